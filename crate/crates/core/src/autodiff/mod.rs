//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Supplies only the ops the models and losses need: `matmul`, the
//! elementwise suite (`add`, `sub`, `mul`, `scale`, `relu`, `log`, `exp`,
//! `clamp`), the `sum`/`mean` reductions, and a row-wise temperature
//! softmax. Broadcasting is limited to scalar operands and row-vector
//! biases.
//!
//! ```
//! use sskd_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_requires_grad(true));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
//! ```

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_row;

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP_FLOOR: f64 = 1e-12;

/// Temperature softmax over the last axis, outside of any tape.
pub fn softmax_t(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let d = tape.constant(logits.clone());
    let p = tape.softmax(d, tau)?;
    Ok(tape.value(p).clone())
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `ln(clamp(p, floor, 1))` recorded on the tape.
pub fn clamped_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp(p, LOG_CLAMP_FLOOR, 1.0)?;
    tape.log(c)
}

pub(crate) fn ensure_finite(what: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}
