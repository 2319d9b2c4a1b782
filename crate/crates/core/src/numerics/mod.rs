//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient verifier. Every other module computes on this substrate.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{bail, Result};
use crate::real::Real;

/// Elementwise operations with scalar-or-equal-shape broadcasting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
}

impl<T: Real> Tape<T> {
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        match (op, args) {
            (Elementwise::Add, &[a, b]) => self.add(a, b),
            (Elementwise::Sub, &[a, b]) => self.sub(a, b),
            (Elementwise::Mul, &[a, b]) => self.mul(a, b),
            (Elementwise::Scale(c), &[a]) => self.scale(a, T::from_f64(c)),
            (Elementwise::Gelu, &[a]) => self.gelu(a),
            _ => bail!(Usage, "{:?} called with {} arguments", op, args.len()),
        }
    }
}
