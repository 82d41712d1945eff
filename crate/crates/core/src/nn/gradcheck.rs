//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::Tensor;

/// Relative difference step, applied to inputs scaled to unit RMS.
pub const FD_STEP: f64 = 1e-5;

/// An operation with an analytic backward pass, checked in `f64`.
pub trait Differentiable {
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;
    /// Gradients for every input, in input order.
    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub max_rel_error: Vec<f64>,
    pub worst: f64,
    pub tolerance: f64,
    pub non_finite: bool,
    pub error: Option<String>,
    pub passed: bool,
}

/// `max |a - n| / max(max |a|, max |n|, 1e-8)`: the largest deviation
/// relative to the tensor's gradient scale.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 1e-8f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

pub(crate) fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Step for an input: `FD_STEP` times its RMS (plain `FD_STEP` for zeros).
pub(crate) fn step_for(v: &[f64]) -> f64 {
    let r = rms(v);
    if r > 0.0 {
        FD_STEP * r
    } else {
        FD_STEP
    }
}

/// Check `op` at `inputs` against central differences of the scalar
/// `sum(upstream * op(inputs))` for a seeded random upstream gradient.
pub fn grad_check(op: &dyn Differentiable, inputs: &[Tensor<f64>], tolerance: f64, seed: u64) -> GradCheckReport {
    let fail = |msg: String| GradCheckReport {
        max_rel_error: vec![],
        worst: f64::INFINITY,
        tolerance,
        non_finite: false,
        error: Some(msg),
        passed: false,
    };
    let out = match op.forward(inputs) {
        Ok(o) => o,
        Err(e) => return fail(e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upstream = Tensor {
        shape: out.shape.clone(),
        data: (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        grad: None,
    };
    let analytic = match op.backward(inputs, &upstream) {
        Ok(g) => g,
        Err(e) => return fail(e.to_string()),
    };
    if analytic.len() != inputs.len() {
        return fail(format!("backward returned {} gradients for {} inputs", analytic.len(), inputs.len()));
    }
    let mut errors = Vec::with_capacity(inputs.len());
    let mut non_finite = false;
    for (k, input) in inputs.iter().enumerate() {
        let step = step_for(&input.data);
        let mut work = inputs.to_vec();
        let numeric = numeric_gradient(
            |x| {
                work[k].data.copy_from_slice(x);
                match op.forward(&work) {
                    Ok(o) => o.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum(),
                    Err(_) => f64::NAN,
                }
            },
            &input.data,
            step,
        );
        let e = relative_error(&analytic[k].data, &numeric);
        non_finite |= !e.is_finite();
        errors.push(e);
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        passed: !non_finite && worst <= tolerance,
        max_rel_error: errors,
        worst,
        tolerance,
        non_finite,
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv2d_backward, conv2d_forward, Conv2dSpec};

    struct Identity;
    impl Differentiable for Identity {
        fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].clone())
        }
        fn backward(&self, _: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![g.clone()])
        }
    }

    /// Convolution whose weight gradient is deliberately scaled by 1.5.
    struct CorruptConv;
    impl Differentiable for CorruptConv {
        fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            conv2d_forward(&i[0], &i[1], &i[2], Conv2dSpec::default())
        }
        fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let mut r = conv2d_backward(&i[0], &i[1], Conv2dSpec::default(), g)?;
            r.weight.data.iter_mut().for_each(|v| *v *= 1.5);
            Ok(vec![r.input, r.weight, r.bias])
        }
    }

    struct Explodes;
    impl Differentiable for Explodes {
        fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(Tensor { data: i[0].data.iter().map(|v| 1.0 / v).collect(), ..i[0].clone() })
        }
        fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![Tensor { data: i[0].data.iter().zip(&g.data).map(|(v, g)| -g / (v * v)).collect(), ..g.clone() }])
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let r = grad_check(&Identity, &[ramp(&[1, 3, 4])], 1e-4, 1);
        assert!(r.passed && r.worst <= 1e-9, "{r:?}");
    }

    #[test]
    fn detects_corrupted_backward() {
        let r = grad_check(&CorruptConv, &[ramp(&[1, 5, 5]), ramp(&[1, 1, 3, 3]), ramp(&[1])], 1e-4, 2);
        assert!(!r.passed);
        assert!(r.max_rel_error[1] >= 1e-1, "{r:?}");
        assert!(r.max_rel_error[0] <= 1e-4);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = grad_check(&Explodes, &[x], 1e-4, 3);
        assert!(r.non_finite && !r.passed);
    }
}
