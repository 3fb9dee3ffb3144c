//! Parameterized layers shared by the networks. Activations are batched:
//! axis 0 is always the sample axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlrError};
use crate::numeric::{Conv2dSpec, NdArray, ParamId, ParamStore, SliceStats, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, the random stream for stochastic layers, and
/// the batch statistics gathered by normalization layers.
pub struct Ctx {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub norm_updates: Vec<NormUpdate>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
            norm_updates: Vec::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            norm_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }
}

#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: SliceStats,
}

/// Fold batch statistics into the running buffers.
pub fn apply_norm_updates(store: &mut ParamStore, updates: &[NormUpdate], momentum: f64) {
    for u in updates {
        for (id, batch) in [
            (u.running_mean, &u.stats.mean),
            (u.running_var, &u.stats.var),
        ] {
            let run = store.value_mut(id).data_mut();
            for (r, b) in run.iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Swish,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Swish => tape.swish(x),
            Activation::Identity => x,
        }
    }
}

/// He-style normal initialization.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> NdArray {
    NdArray::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Broadcast shape `[1, C, 1, ...]` for per-channel parameters of a rank
/// `ndim` activation.
fn channel_shape(channels: usize, ndim: usize) -> Vec<usize> {
    let mut s = vec![1; ndim];
    s[1] = channels;
    s
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[inputs, outputs], inputs, rng),
        );
        let bias = store.add(format!("{name}.bias"), NdArray::zeros(&[1, outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// 2-D convolution with an optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !in_channels.is_multiple_of(spec.groups) || !out_channels.is_multiple_of(spec.groups) {
            return Err(SlrError::Config(format!(
                "{name}: {in_channels} -> {out_channels} channels not divisible by {} groups",
                spec.groups
            )));
        }
        let cin_g = in_channels / spec.groups;
        let fan_in = cin_g * kernel.0 * kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[out_channels, cin_g, kernel.0, kernel.1], fan_in, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                NdArray::zeros(&[1, out_channels, 1, 1]),
            )
        });
        Ok(Conv {
            weight,
            bias,
            spec,
            out_channels,
        })
    }

    /// `x` is `[N, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, self.spec)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-channel normalization over every axis but axis 1, with a learned
/// scale and offset. Training uses batch statistics and records them;
/// evaluation uses the running buffers.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        ChannelNorm {
            gamma: store.add(format!("{name}.gamma"), NdArray::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), NdArray::zeros(&[channels])),
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), NdArray::zeros(&[channels])),
            running_var: store
                .add_buffer(format!("{name}.running_var"), NdArray::ones(&[channels])),
            channels,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(SlrError::dim("channel_norm", &shape, &[0, self.channels]));
        }
        let cshape = channel_shape(self.channels, shape.len());
        let normalized = if ctx.training() {
            let mut axes: Vec<usize> = (0..shape.len()).collect();
            axes.swap(0, 1);
            let p = tape.permute(x, &axes)?;
            let (z, stats) = tape.standardize(p, self.channels, NORM_EPS)?;
            ctx.norm_updates.push(NormUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
            tape.permute(z, &axes)?
        } else {
            let neg_mean = store
                .value(self.running_mean)
                .map(|m| -m)
                .reshape(&cshape)?;
            let inv_std = store
                .value(self.running_var)
                .map(|v| 1.0 / (v + NORM_EPS).sqrt())
                .reshape(&cshape)?;
            let neg_mean = tape.input(neg_mean);
            let centered = tape.add(x, neg_mean)?;
            let inv_std = tape.input(inv_std);
            tape.mul(centered, inv_std)?
        };
        let gv = tape.param(store, self.gamma);
        let gv = tape.reshape(gv, &cshape)?;
        let bv = tape.param(store, self.beta);
        let bv = tape.reshape(bv, &cshape)?;
        let y = tape.mul(normalized, gv)?;
        tape.add(y, bv)
    }
}

/// Layer normalization of `[N, F]` rows with a learned scale and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub features: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), NdArray::ones(&[1, features])),
            beta: store.add(format!("{name}.beta"), NdArray::zeros(&[1, features])),
            features,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let (z, _) = tape.standardize(x, rows, NORM_EPS)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul(z, g)?;
        tape.add(y, b)
    }
}

/// Inverted dropout; the identity outside training or at rate 0.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, ctx: &mut Ctx) -> Result<Var> {
    if !ctx.training() || rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(SlrError::Config(format!(
            "dropout rate {rate} must be below 1"
        )));
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let rng = &mut ctx.rng;
    let mask = NdArray::from_fn(&shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = tape.input(mask);
    tape.mul(x, m)
}
