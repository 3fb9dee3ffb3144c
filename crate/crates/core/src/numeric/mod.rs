//! Dense arrays, a reverse-mode gradient tape and a finite-difference
//! checker for it.

mod array;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use array::{argmax, NdArray};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::Conv2dSpec;
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tape::{SliceStats, Tape, Var};

use crate::error::{Result, SlrError};

/// Temporal convolution of `x: [C, T, V]` (or batched `[N, C, T, V]`) with `kernel: [C', C, k_t]`, zero
/// padded so that `T' = ceil(T / stride)`.
pub fn conv_temporal(tape: &mut Tape, x: Var, kernel: Var, stride: usize) -> Result<Var> {
    let ks = tape.shape(kernel).to_vec();
    if ks.len() != 3 {
        return Err(SlrError::dim("conv_temporal", tape.shape(x), &ks));
    }
    let kt = ks[2];
    if kt.is_multiple_of(2) {
        return Err(SlrError::Config(format!(
            "temporal kernel size must be odd, got {kt}"
        )));
    }
    let k4 = tape.reshape(kernel, &[ks[0], ks[1], kt, 1])?;
    tape.conv2d(x, k4, Conv2dSpec::new((stride, 1), ((kt - 1) / 2, 0), 1))
}

/// Mean over the frame axis: `[C, T, V] -> [C, V]`.
pub fn pool_avg_temporal(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(SlrError::dim("pool_avg_temporal", &s, &[0, 0, 0]));
    }
    let m = tape.mean_to(x, &[s[0], 1, s[2]])?;
    tape.reshape(m, &[s[0], s[2]])
}
