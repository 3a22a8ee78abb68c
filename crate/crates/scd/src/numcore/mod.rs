//! Minimal reverse-mode autodiff over dense tensors.
//!
//! A [`Tape`] records forward operations into a flat arena; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into a [`ParamSet`]. One
//! tape is built per training step and dropped afterwards.

mod tensor;
mod tape;

pub use tensor::{Parameter, ParamSet, Scalar, Tensor};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("backward called on a loss that is not connected to any tracked value")]
    DetachedLoss,
    #[error("parameter name already registered: {0}")]
    DuplicateParam(String),
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> NumError {
    NumError::Invalid { op, msg: msg.into() }
}

/// Central-difference gradient of `f` at `x`, one forward pair per entry.
///
/// Deliberately independent of the tape: it only calls the supplied closure,
/// so it can serve as an oracle for [`Tape::backward`].
pub fn finite_diff_grad<F, Fun>(f: &mut Fun, x: &Tensor<F>, h: f64) -> Result<Tensor<F>, NumError>
where
    F: Scalar,
    Fun: FnMut(&Tensor<F>) -> Result<F, NumError>,
{
    if h <= 0.0 {
        return Err(invalid("finite_diff_grad", "step size must be positive"));
    }
    let step = F::from_f64(h);
    let two = F::from_f64(2.0);
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (two * step);
    }
    Ok(grad)
}
