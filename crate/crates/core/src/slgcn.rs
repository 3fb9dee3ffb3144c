//! Decoupled spatio-temporal graph convolution network over skeleton
//! streams.
//!
//! A unit runs: decoupled spatial graph convolution, cascaded spatial /
//! temporal / channel attention, temporal convolution, channel
//! normalization, activation, residual add and DropGraph. The network
//! normalizes the input per (node, channel), stacks the units, averages over
//! frames and classifies with one fully connected layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlrError};
use crate::fusion::{fuse_fixed, FusionWeights, LogitMatrix};
use crate::graph::{NormalizedAdjacency, Partitioning, SkeletonGraph, REFERENCE_POSE};
use crate::nn::{Activation, ChannelNorm, Conv, Ctx, Linear};
use crate::numeric::{Conv2dSpec, NdArray, ParamId, ParamStore, Tape, Var};
use crate::train::Classifier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlgcnConfig {
    /// 3 for `(x, y, s)` streams, 4 with depth.
    pub in_channels: usize,
    pub classes: usize,
    pub units: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Channel groups with their own adjacency.
    pub groups: usize,
    pub temporal_kernel: usize,
    pub dropgraph_keep_prob: f64,
    pub partitioning: Partitioning,
    pub attention: bool,
    pub residual: bool,
    pub activation: Activation,
}

impl Default for SlgcnConfig {
    fn default() -> Self {
        SlgcnConfig {
            in_channels: 3,
            classes: 226,
            units: 10,
            channels: vec![64, 64, 64, 64, 128, 128, 128, 256, 256, 256],
            strides: vec![1, 1, 1, 1, 2, 1, 1, 2, 1, 1],
            groups: 8,
            temporal_kernel: 9,
            dropgraph_keep_prob: 0.9,
            partitioning: Partitioning::Spatial,
            attention: true,
            residual: true,
            activation: Activation::Swish,
        }
    }
}

impl SlgcnConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(SlrError::Config(m));
        if self.units == 0 || self.units != self.channels.len() || self.units != self.strides.len()
        {
            return cfg(format!(
                "units ({}) must equal the number of channel widths ({}) and strides ({})",
                self.units,
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return cfg(format!(
                "temporal kernel {} must be odd",
                self.temporal_kernel
            ));
        }
        if self.groups == 0 {
            return cfg("groups must be positive".into());
        }
        if let Some(c) = self
            .channels
            .iter()
            .find(|&&c| c == 0 || c % self.groups != 0)
        {
            return cfg(format!("{} groups do not divide {c} channels", self.groups));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return cfg(format!("stride {s} not in {{1, 2}}"));
        }
        if self.in_channels != 3 && self.in_channels != 4 {
            return cfg(format!(
                "in_channels must be 3 or 4, got {}",
                self.in_channels
            ));
        }
        if self.classes < 2 {
            return cfg("at least two classes are needed".into());
        }
        if !(self.dropgraph_keep_prob > 0.0 && self.dropgraph_keep_prob <= 1.0) {
            return cfg(format!(
                "dropgraph keep prob {} outside (0, 1]",
                self.dropgraph_keep_prob
            ));
        }
        Ok(())
    }
}

/// Decoupled spatial graph convolution: 1×1 channel mixing into one block
/// per partition, then per channel group aggregation over nodes with that
/// group's trainable adjacency, summed over partitions.
#[derive(Clone, Debug)]
pub struct SpatialGcn {
    pub mixing: Conv,
    /// `[P, G, V, V]`.
    pub adjacency: ParamId,
    pub bias: ParamId,
    pub out_channels: usize,
    pub groups: usize,
}

impl SpatialGcn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        adjacency: &NormalizedAdjacency,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if groups == 0 || !out_channels.is_multiple_of(groups) {
            return Err(SlrError::Config(format!(
                "{name}: {groups} groups do not divide {out_channels} channels"
            )));
        }
        let p = adjacency.partitions.len();
        let v = adjacency.node_count();
        let mixing = Conv::new(
            store,
            &format!("{name}.mixing"),
            in_channels,
            p * out_channels,
            (1, 1),
            Conv2dSpec::new((1, 1), (0, 0), 1),
            false,
            rng,
        )?;
        // every group starts from the physical graph
        let mut init = Vec::with_capacity(p * groups * v * v);
        for part in &adjacency.partitions {
            for _ in 0..groups {
                init.extend_from_slice(part.data());
            }
        }
        let adj = store.add(
            format!("{name}.adjacency"),
            NdArray::new(&[p, groups, v, v], init)?,
        );
        let bias = store.add(
            format!("{name}.bias"),
            NdArray::zeros(&[1, out_channels, 1, 1]),
        );
        Ok(SpatialGcn {
            mixing,
            adjacency: adj,
            bias,
            out_channels,
            groups,
        })
    }

    /// `x` is `[N, C, T, V]`; returns `[N, C', T, V]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.mixing.forward(tape, store, x)?;
        let a = tape.param(store, self.adjacency);
        let z = tape.node_mix(y, a)?;
        let b = tape.param(store, self.bias);
        tape.add(z, b)
    }
}

/// Cascaded spatial, temporal and channel gating. Each stage computes a
/// sigmoid gate from pooled features and applies `x <- x + x * gate`.
#[derive(Clone, Debug)]
pub struct StcAttention {
    pub spatial: Conv,
    pub temporal: Conv,
    pub channel_squeeze: Linear,
    pub channel_excite: Linear,
}

impl StcAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        nodes: usize,
        temporal_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let node_kernel = if nodes % 2 == 1 { nodes } else { nodes - 1 };
        let spatial = Conv::new(
            store,
            &format!("{name}.spatial"),
            channels,
            1,
            (1, node_kernel),
            Conv2dSpec::new((1, 1), (0, (node_kernel - 1) / 2), 1),
            true,
            rng,
        )?;
        let temporal = Conv::new(
            store,
            &format!("{name}.temporal"),
            channels,
            1,
            (temporal_kernel, 1),
            Conv2dSpec::new((1, 1), ((temporal_kernel - 1) / 2, 0), 1),
            true,
            rng,
        )?;
        let hidden = (channels / 2).max(1);
        let channel_squeeze = Linear::new(
            store,
            &format!("{name}.channel_squeeze"),
            channels,
            hidden,
            rng,
        );
        let channel_excite = Linear::new(
            store,
            &format!("{name}.channel_excite"),
            hidden,
            channels,
            rng,
        );
        // gates start at exactly 0.5 everywhere
        for id in [spatial.weight, temporal.weight, channel_excite.weight] {
            store.value_mut(id).fill(0.0);
        }
        Ok(StcAttention {
            spatial,
            temporal,
            channel_squeeze,
            channel_excite,
        })
    }

    /// Force every gate to (numerically) zero so the block is the identity.
    pub fn neutralize(&self, store: &mut ParamStore) {
        for conv in [&self.spatial, &self.temporal] {
            store.value_mut(conv.weight).fill(0.0);
            if let Some(b) = conv.bias {
                store.value_mut(b).fill(-40.0);
            }
        }
        store.value_mut(self.channel_excite.weight).fill(0.0);
        store.value_mut(self.channel_excite.bias).fill(-40.0);
    }

    fn gate(tape: &mut Tape, x: Var, logits: Var) -> Result<Var> {
        let g = tape.sigmoid(logits);
        let xg = tape.mul(x, g)?;
        tape.add(x, xg)
    }

    /// `x` is `[N, C, T, V]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (n, c, t, v) = (s[0], s[1], s[2], s[3]);
        // spatial: pool frames, convolve along nodes
        let pooled = tape.mean_to(x, &[n, c, 1, v])?;
        let logits = self.spatial.forward(tape, store, pooled)?;
        let x = Self::gate(tape, x, logits)?;
        // temporal: pool nodes, convolve along frames
        let pooled = tape.mean_to(x, &[n, c, t, 1])?;
        let logits = self.temporal.forward(tape, store, pooled)?;
        let x = Self::gate(tape, x, logits)?;
        // channel: squeeze-excite bottleneck
        let pooled = tape.mean_to(x, &[n, c, 1, 1])?;
        let pooled = tape.reshape(pooled, &[n, c])?;
        let h = self.channel_squeeze.forward(tape, store, pooled)?;
        let h = tape.swish(h);
        let logits = self.channel_excite.forward(tape, store, h)?;
        let logits = tape.reshape(logits, &[n, c, 1, 1])?;
        Self::gate(tape, x, logits)
    }
}

#[derive(Clone, Debug)]
pub enum Residual {
    None,
    Identity,
    Projection(Conv),
}

/// Correlated node dropout: a seed node is dropped together with its 1-hop
/// neighborhood; surviving nodes are rescaled to preserve the mean.
#[derive(Clone, Debug)]
pub struct DropGraph {
    pub keep_prob: f64,
    /// Binary adjacency with self-loops, `[V, V]`.
    neighborhood: NdArray,
}

impl DropGraph {
    pub fn new(adjacency: &NdArray, keep_prob: f64) -> Self {
        let v = adjacency.shape()[0];
        let neighborhood = NdArray::from_fn(&[v, v], |o| {
            if o / v == o % v || adjacency.data()[o] != 0.0 {
                1.0
            } else {
                0.0
            }
        });
        DropGraph {
            keep_prob,
            neighborhood,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut Ctx) -> Result<Var> {
        if !ctx.training() || self.keep_prob >= 1.0 {
            return Ok(x);
        }
        let s = tape.shape(x).to_vec();
        let (n, v) = (s[0], s[3]);
        let mean_block = self.neighborhood.sum() / v as f64;
        let seed_prob = (1.0 - self.keep_prob) / mean_block;
        let mut mask = NdArray::ones(&[n, 1, 1, v]);
        for sample in 0..n {
            let seeds: Vec<usize> = (0..v)
                .filter(|_| ctx.rng.random::<f64>() < seed_prob)
                .collect();
            let row = &mut mask.data_mut()[sample * v..(sample + 1) * v];
            for &seed in &seeds {
                for (j, r) in row.iter_mut().enumerate() {
                    if self.neighborhood.get(&[seed, j]) != 0.0 {
                        *r = 0.0;
                    }
                }
            }
            let kept = row.iter().filter(|&&m| m != 0.0).count();
            if kept == 0 {
                row.iter_mut().for_each(|m| *m = 1.0);
            } else {
                let scale = v as f64 / kept as f64;
                row.iter_mut().for_each(|m| *m *= scale);
            }
        }
        let m = tape.input(mask);
        tape.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct SlgcnUnit {
    pub gcn: SpatialGcn,
    pub attention: Option<StcAttention>,
    pub temporal: Conv,
    pub norm: ChannelNorm,
    pub residual: Residual,
    pub activation: Activation,
    pub dropgraph: DropGraph,
    pub stride: usize,
}

/// Per-unit geometry and switches.
#[derive(Clone, Debug)]
pub struct UnitSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub groups: usize,
    pub temporal_kernel: usize,
    pub attention: bool,
    pub residual: bool,
    pub activation: Activation,
    pub dropgraph_keep_prob: f64,
}

impl SlgcnUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &UnitSpec,
        adjacency: &NormalizedAdjacency,
        binary_adjacency: &NdArray,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.stride != 1 && spec.stride != 2 {
            return Err(SlrError::Config(format!(
                "{name}: stride {} not in {{1, 2}}",
                spec.stride
            )));
        }
        if spec.temporal_kernel.is_multiple_of(2) {
            return Err(SlrError::Config(format!(
                "{name}: temporal kernel {} must be odd",
                spec.temporal_kernel
            )));
        }
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let gcn = SpatialGcn::new(
            store,
            &format!("{name}.gcn"),
            cin,
            cout,
            spec.groups,
            adjacency,
            rng,
        )?;
        let attention = if spec.attention {
            Some(StcAttention::new(
                store,
                &format!("{name}.stc"),
                cout,
                adjacency.node_count(),
                spec.temporal_kernel,
                rng,
            )?)
        } else {
            None
        };
        let kt = spec.temporal_kernel;
        let temporal = Conv::new(
            store,
            &format!("{name}.tcn"),
            cout,
            cout,
            (kt, 1),
            Conv2dSpec::new((spec.stride, 1), ((kt - 1) / 2, 0), 1),
            true,
            rng,
        )?;
        let norm = ChannelNorm::new(store, &format!("{name}.norm"), cout);
        let residual = if !spec.residual {
            Residual::None
        } else if cin == cout && spec.stride == 1 {
            Residual::Identity
        } else {
            Residual::Projection(Conv::new(
                store,
                &format!("{name}.residual"),
                cin,
                cout,
                (1, 1),
                Conv2dSpec::new((spec.stride, 1), (0, 0), 1),
                true,
                rng,
            )?)
        };
        Ok(SlgcnUnit {
            gcn,
            attention,
            temporal,
            norm,
            residual,
            activation: spec.activation,
            dropgraph: DropGraph::new(binary_adjacency, spec.dropgraph_keep_prob),
            stride: spec.stride,
        })
    }

    /// `x` is `[N, C, T, V]`; returns `[N, C', ceil(T / stride), V]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let mut y = self.gcn.forward(tape, store, x)?;
        if let Some(att) = &self.attention {
            y = att.forward(tape, store, y)?;
        }
        y = self.temporal.forward(tape, store, y)?;
        y = self.norm.forward(tape, store, y, ctx)?;
        y = self.activation.apply(tape, y);
        y = match &self.residual {
            Residual::None => y,
            Residual::Identity => tape.add(y, x)?,
            Residual::Projection(conv) => {
                let r = conv.forward(tape, store, x)?;
                tape.add(y, r)?
            }
        };
        self.dropgraph.forward(tape, y, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct Slgcn {
    pub config: SlgcnConfig,
    pub nodes: usize,
    pub input_norm: ChannelNorm,
    pub units: Vec<SlgcnUnit>,
    pub classifier: Linear,
}

impl Slgcn {
    pub fn new(
        config: &SlgcnConfig,
        graph: &SkeletonGraph,
        reference: Option<&[[f64; 2]]>,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let adjacency = graph.normalized_adjacency(config.partitioning, reference)?;
        let binary = graph.build_adjacency()?;
        let v = graph.node_count();
        let input_norm = ChannelNorm::new(store, "input_norm", v * config.in_channels);
        let mut units = Vec::with_capacity(config.units);
        let mut cin = config.in_channels;
        for (i, (&cout, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let spec = UnitSpec {
                in_channels: cin,
                out_channels: cout,
                stride,
                groups: config.groups,
                temporal_kernel: config.temporal_kernel,
                attention: config.attention,
                residual: config.residual,
                activation: config.activation,
                dropgraph_keep_prob: config.dropgraph_keep_prob,
            };
            units.push(SlgcnUnit::new(
                store,
                &format!("unit{i}"),
                &spec,
                &adjacency,
                &binary,
                rng,
            )?);
            cin = cout;
        }
        let classifier = Linear::new(store, "classifier", cin * v, config.classes, rng);
        // start from uniform predictions
        store.value_mut(classifier.weight).fill(0.0);
        Ok(Slgcn {
            config: config.clone(),
            nodes: v,
            input_norm,
            units,
            classifier,
        })
    }

    /// Network over the 27-node reduced graph.
    pub fn for_reduced_graph(
        config: &SlgcnConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            config,
            &SkeletonGraph::reduced(),
            Some(&REFERENCE_POSE),
            store,
            rng,
        )
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// `x` is `[N, C_in, T, V]`; returns logits `[N, classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let c_in = self.config.in_channels;
        if s.len() != 4 || s[1] != c_in || s[3] != self.nodes {
            return Err(SlrError::Config(format!(
                "input shape {s:?} does not match [N, {c_in}, T, {}]",
                self.nodes
            )));
        }
        let (n, t, v) = (s[0], s[2], s[3]);
        // normalize each (node, channel) pair over samples and frames
        let p = tape.permute(x, &[0, 3, 1, 2])?;
        let p = tape.reshape(p, &[n, v * c_in, t])?;
        let p = self.input_norm.forward(tape, store, p, ctx)?;
        let p = tape.reshape(p, &[n, v, c_in, t])?;
        let mut h = tape.permute(p, &[0, 2, 3, 1])?;
        for unit in &self.units {
            h = unit.forward(tape, store, h, ctx)?;
        }
        let hs = tape.shape(h).to_vec();
        let pooled = tape.mean_to(h, &[hs[0], hs[1], 1, hs[3]])?;
        let flat = tape.reshape(pooled, &[hs[0], hs[1] * hs[3]])?;
        self.classifier.forward(tape, store, flat)
    }

    /// Eval-mode logits `[N, classes]` for a batch `[N, C, T, V]`.
    pub fn predict(&self, store: &ParamStore, batch: &NdArray) -> Result<NdArray> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let y = self.forward(&mut tape, store, x, &mut Ctx::eval())?;
        Ok(tape.value(y).clone())
    }
}

/// Default per-stream weights for joint, bone, joint motion, bone motion.
pub const DEFAULT_STREAM_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];

/// Weighted sum of the four per-stream logit matrices.
pub fn multi_stream_fuse(streams: &[LogitMatrix], weights: [f64; 4]) -> Result<LogitMatrix> {
    if streams.len() != 4 {
        return Err(SlrError::Fusion(format!(
            "expected 4 stream logit matrices, got {}",
            streams.len()
        )));
    }
    let fused = fuse_fixed(streams, &FusionWeights::new(weights.to_vec())?)?;
    Ok(LogitMatrix {
        modality: "multi_stream".into(),
        ..fused
    })
}

impl Classifier for Slgcn {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        Slgcn::forward(self, tape, store, x, ctx)
    }

    fn classes(&self) -> usize {
        self.config.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::mirror_permutation;
    use crate::numeric::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> SlgcnConfig {
        SlgcnConfig {
            classes: 3,
            units: 2,
            channels: vec![4, 4],
            strides: vec![1, 2],
            groups: 2,
            temporal_kernel: 3,
            ..SlgcnConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SlgcnConfig::default().validate().is_ok());
        let mut c = SlgcnConfig::default();
        c.temporal_kernel = 4;
        assert!(matches!(c.validate(), Err(SlrError::Config(_))));
        let mut c = SlgcnConfig::default();
        c.groups = 3;
        assert!(c.validate().is_err());
        let mut c = SlgcnConfig::default();
        c.strides.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn indivisible_groups_rejected() {
        let g = SkeletonGraph::new(2, &[(0, 1)], 0).unwrap();
        let adj = g.normalized_adjacency(Partitioning::Uniform, None).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = SpatialGcn::new(&mut store, "g", 3, 6, 4, &adj, &mut rng);
        assert!(matches!(r, Err(SlrError::Config(_))));
    }

    #[test]
    fn forward_shapes_and_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = Slgcn::for_reduced_graph(&tiny_config(), &mut store, &mut rng).unwrap();
        let x = NdArray::randn(&[2, 3, 7, 27], 0.5, &mut rng);
        let y = model.predict(&store, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.all_finite());

        let mut tape = Tape::new();
        let xv = tape.input(NdArray::randn(&[2, 4, 7, 27], 0.5, &mut rng));
        let mut ctx = Ctx::eval();
        let h = model.units[1]
            .forward(&mut tape, &store, xv, &mut ctx)
            .unwrap();
        assert_eq!(tape.shape(h), &[2, 4, 4, 27]);

        let wrong = NdArray::zeros(&[2, 3, 7, 26]);
        assert!(matches!(
            model.predict(&store, &wrong),
            Err(SlrError::Config(_))
        ));
    }

    fn identity_unit(store: &mut ParamStore, c: usize, v: usize) -> SlgcnUnit {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adj = NormalizedAdjacency {
            partitions: vec![NdArray::eye(v)],
        };
        let spec = UnitSpec {
            in_channels: c,
            out_channels: c,
            stride: 1,
            groups: 1,
            temporal_kernel: 1,
            attention: true,
            residual: false,
            activation: Activation::Identity,
            dropgraph_keep_prob: 1.0,
        };
        let unit =
            SlgcnUnit::new(store, "u", &spec, &adj, &NdArray::zeros(&[v, v]), &mut rng).unwrap();
        let eye = NdArray::eye(c).reshape(&[c, c, 1, 1]).unwrap();
        *store.value_mut(unit.gcn.mixing.weight) = eye.clone();
        *store.value_mut(unit.temporal.weight) = eye;
        unit.attention.as_ref().unwrap().neutralize(store);
        unit
    }

    #[test]
    fn identity_configured_unit_is_identity() {
        let (c, v) = (4, 5);
        let mut store = ParamStore::new();
        let unit = identity_unit(&mut store, c, v);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = NdArray::uniform(&[2, c, 6, v], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = unit
            .forward(&mut tape, &store, xv, &mut Ctx::eval())
            .unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn spatial_gcn_single_node_is_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let adj = NormalizedAdjacency {
            partitions: vec![NdArray::eye(1)],
        };
        let gcn = SpatialGcn::new(&mut store, "g", 3, 2, 1, &adj, &mut rng).unwrap();
        let x = NdArray::randn(&[1, 3, 4, 1], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = gcn.forward(&mut tape, &store, xv).unwrap();
        let w = store.value(gcn.mixing.weight);
        for o in 0..2 {
            for t in 0..4 {
                let expect: f64 = (0..3)
                    .map(|i| w.get(&[o, i, 0, 0]) * x.get(&[0, i, t, 0]))
                    .sum();
                assert!((tape.value(y).get(&[0, o, t, 0]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_gcn_zeroed_group_silences_its_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 2)], 0).unwrap();
        let adj = g.normalized_adjacency(Partitioning::Uniform, None).unwrap();
        let gcn = SpatialGcn::new(&mut store, "g", 2, 4, 2, &adj, &mut rng).unwrap();
        let a = store.value_mut(gcn.adjacency);
        for i in 0..9 {
            a.data_mut()[i] = 0.0;
        }
        let x = NdArray::randn(&[1, 2, 5, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = gcn.forward(&mut tape, &store, xv).unwrap();
        let y = tape.value(y);
        for c in 0..4 {
            let energy: f64 = (0..15).map(|i| y.data()[c * 15 + i].abs()).sum();
            if c < 2 {
                assert_eq!(energy, 0.0);
            } else {
                assert!(energy > 0.0);
            }
        }
    }

    fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in store.trainable_ids().collect::<Vec<_>>() {
            let v = store.value_mut(id);
            let noise = NdArray::randn(v.shape(), 0.1, rng);
            v.axpy(1.0, &noise);
        }
    }

    #[test]
    fn full_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = SlgcnConfig {
            dropgraph_keep_prob: 1.0,
            ..tiny_config()
        };
        let model = Slgcn::for_reduced_graph(&cfg, &mut store, &mut rng).unwrap();
        perturb(&mut store, &mut rng);
        let x = NdArray::randn(&[2, 3, 8, 27], 1.0, &mut rng);
        let target = NdArray::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let r = grad_check(
            &mut store,
            |t, s| {
                let xv = t.input(x.clone());
                let z = model.forward(t, s, xv, &mut Ctx::train(0))?;
                t.cross_entropy(z, target.clone())
            },
            GradCheckOptions {
                coords_per_param: 4,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let model = Slgcn::for_reduced_graph(&tiny_config(), &mut store, &mut rng).unwrap();
        let x = NdArray::randn(&[1, 3, 8, 27], 1.0, &mut rng);
        let a = model.predict(&store, &x).unwrap();
        let b = model.predict(&store, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn logits_not_mirror_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let model = Slgcn::for_reduced_graph(&tiny_config(), &mut store, &mut rng).unwrap();
        perturb(&mut store, &mut rng);
        let x = NdArray::randn(&[1, 3, 8, 27], 1.0, &mut rng);
        let perm = mirror_permutation();
        let mirrored = NdArray::from_fn(&[1, 3, 8, 27], |o| {
            let (c, v) = (o / (8 * 27), o % 27);
            let src = x.data()[o - v + perm[v]];
            if c == 0 {
                -src
            } else {
                src
            }
        });
        let a = model.predict(&store, &x).unwrap();
        let b = model.predict(&store, &mirrored).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    fn stream_logits(seed: u64) -> Vec<LogitMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ["joint", "bone", "joint_motion", "bone_motion"]
            .iter()
            .map(|k| {
                LogitMatrix::with_index_ids(*k, NdArray::randn(&[5, 6], 1.0, &mut rng)).unwrap()
            })
            .collect()
    }

    #[test]
    fn stream_fusion_examples() {
        let s = stream_logits(13);
        assert_eq!(
            multi_stream_fuse(&s, [1.0, 0.0, 0.0, 0.0]).unwrap().scores,
            s[0].scores
        );
        let sum = multi_stream_fuse(&s, DEFAULT_STREAM_WEIGHTS).unwrap();
        for o in 0..30 {
            let want: f64 = s.iter().map(|m| m.scores.data()[o]).sum();
            assert!((sum.scores.data()[o] - want).abs() < 1e-12);
        }
        let same: Vec<LogitMatrix> = (0..4).map(|_| s[0].clone()).collect();
        let f = multi_stream_fuse(&same, [0.5, 0.5, 1.0, 0.5]).unwrap();
        assert!(f.scores.max_abs_diff(&s[0].scores.map(|v| v * 2.5)) < 1e-12);
        for r in 0..5 {
            assert_eq!(f.scores.row(r).len(), 6);
            assert_eq!(
                crate::numeric::argmax(f.scores.row(r)),
                crate::numeric::argmax(s[0].scores.row(r))
            );
        }
        let mut bad = s.clone();
        bad[3] = LogitMatrix::with_index_ids("bone_motion", NdArray::zeros(&[5, 7])).unwrap();
        assert!(matches!(
            multi_stream_fuse(&bad, DEFAULT_STREAM_WEIGHTS),
            Err(SlrError::Fusion(_))
        ));
    }

    #[test]
    fn positive_logit_scaling_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let z = NdArray::randn(&[6], 1.0, &mut rng);
            let k = rng.random_range(0.01..100.0);
            assert_eq!(z.argmax(), z.map(|v| v * k).argmax());
        }
    }

    #[test]
    fn dropgraph_keep_one_is_identity() {
        let a = SkeletonGraph::reduced().build_adjacency().unwrap();
        let dg = DropGraph::new(&a, 1.0);
        let mut tape = Tape::new();
        let x = tape.input(NdArray::ones(&[1, 2, 3, 27]));
        let mut ctx = Ctx::train(0);
        assert_eq!(dg.forward(&mut tape, x, &mut ctx).unwrap(), x);
    }

    #[test]
    fn dropgraph_drops_whole_neighborhoods() {
        let a = SkeletonGraph::reduced().build_adjacency().unwrap();
        let dg = DropGraph::new(&a, 0.5);
        let mut tape = Tape::new();
        let x = tape.input(NdArray::ones(&[4, 1, 1, 27]));
        let mut ctx = Ctx::train(11);
        let y = dg.forward(&mut tape, x, &mut ctx).unwrap();
        let y = tape.value(y);
        let mut dropped_any = false;
        for n in 0..4 {
            let row: Vec<f64> = (0..27).map(|v| y.get(&[n, 0, 0, v])).collect();
            let zeros: Vec<usize> = (0..27).filter(|&v| row[v] == 0.0).collect();
            dropped_any |= !zeros.is_empty();
            // a dropped node always has a dropped neighbor or is an isolated seed's neighbor
            for &z in &zeros {
                let has_dropped_nb =
                    (0..27).any(|j| j != z && a.get(&[z, j]) != 0.0 && row[j] == 0.0);
                let all_nb_dropped_seed = (0..27)
                    .filter(|&j| a.get(&[z, j]) != 0.0)
                    .all(|j| row[j] == 0.0);
                assert!(has_dropped_nb || all_nb_dropped_seed);
            }
            let mean: f64 = row.iter().sum::<f64>() / 27.0;
            assert!((mean - 1.0).abs() < 1e-12);
        }
        assert!(dropped_any);
    }

    #[test]
    fn stc_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let stc = StcAttention::new(&mut store, "stc", 4, 5, 3, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = NdArray::randn(&shape, 0.5, &mut rng);
        }
        let x = store.add("x", NdArray::randn(&[2, 4, 6, 5], 1.0, &mut rng));
        let probe = NdArray::randn(&[2, 4, 6, 5], 1.0, &mut rng);
        let r = grad_check(
            &mut store,
            |t, s| {
                let xv = t.param(s, x);
                let y = stc.forward(t, s, xv)?;
                let p = t.input(probe.clone());
                let z = t.mul(y, p)?;
                t.sum_all(z)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
