//! Dense tensors, a small reverse-mode tape with hand-written adjoints, and a
//! finite-difference gradient checker.

pub mod gradcheck;
mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use tape::{Activation, BatchStats, Tape, Var};
pub use tensor::{Scalar, Tensor};

use rand::Rng;

use crate::error::{Error, Result};

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// survivors by `1 / (1 - rate)`. Identity when `rate == 0` or not training.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(tape.shape(x), |_| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    tape.mul_const(x, &mask)
}

/// Identity in the forward pass whose backward reports twice the true
/// gradient. Negative control for the gradient checker.
pub fn doubled_backward<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let detached = tape.constant(tape.value(x).clone());
    let twice = tape.add(x, x)?;
    tape.sub(twice, detached)
}

#[cfg(test)]
mod tests;
