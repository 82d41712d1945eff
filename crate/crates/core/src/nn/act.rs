use crate::error::{shape_err, Result};
use crate::scalar::Real;

use super::Tensor;

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        grad: None,
    }
}

/// Gradient through ReLU given its forward output. Zero at the kink.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape != grad_out.shape {
        return shape_err("relu gradient shape mismatch");
    }
    Ok(Tensor {
        shape: output.shape.clone(),
        data: output
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
            .collect(),
        grad: None,
    })
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
