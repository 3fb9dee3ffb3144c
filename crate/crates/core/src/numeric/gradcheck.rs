use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SlrError};
use crate::numeric::{ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter; all of them when the parameter is
    /// smaller than this.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            coords_per_param: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

fn eval_loss<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(SlrError::dim("grad_check", v.shape(), &[1]));
    }
    let l = v.data()[0];
    if !l.is_finite() {
        return Err(SlrError::Numeric(format!("non-finite loss {l}")));
    }
    Ok(l)
}

/// Compare tape gradients of the scalar built by `f` against central
/// differences over sampled coordinates of every trainable parameter.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        for c in coords {
            let analytic = grads.get(id).map(|g| g.data()[c]).unwrap_or(0.0);
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval_loss(&f, store);
            store.value_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval_loss(&f, store);
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), c));
            }
        }
    }
    Ok(report)
}
