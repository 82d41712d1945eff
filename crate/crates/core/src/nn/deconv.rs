//! Learned 2x upsampling: a depthwise transposed convolution with a 4x4
//! kernel, stride 2 and padding 1, reading the input with edge replication.
//! With edge replication a kernel whose phases each sum to one maps a
//! constant input to the same constant, borders included.

use crate::error::{shape_err, Result};
use crate::scalar::Real;

use super::Tensor;

const K: usize = 4;

/// Separable bilinear 2x kernel `[1, 3, 3, 1] / 4` per axis, times `gain`,
/// for each of `channels` channels: shape `(channels, 4, 4)`.
///
/// `gain = 1` preserves per-pixel values; `gain = 0.25` preserves total
/// mass (each input pixel spreads over four output pixels).
pub fn bilinear_kernel<T: Real>(channels: usize, gain: f64) -> Tensor<T> {
    let k1 = [0.25, 0.75, 0.75, 0.25];
    let mut data = Vec::with_capacity(channels * K * K);
    for _ in 0..channels {
        for ky in k1 {
            for kx in k1 {
                data.push(T::of(ky * kx * gain));
            }
        }
    }
    Tensor { shape: vec![channels, K, K], data, grad: None }
}

#[derive(Debug, Clone)]
pub struct UpsampleGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
}

fn check<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if weight.shape != [c, K, K] {
        return shape_err(format!("upsample weight {:?} for {c} channels", weight.shape));
    }
    if h == 0 || w == 0 {
        return shape_err("cannot upsample an empty map");
    }
    Ok((c, h, w))
}

/// Input rows contributing to each output row: `(input_row, kernel_row)`
/// pairs with `out = 2 * in - 1 + k`, `in` clamped to the map.
#[inline]
fn taps(o: usize, n: usize) -> [(usize, usize); 2] {
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let m = (o / 2) as isize;
    if o % 2 == 0 {
        [(clamp(m), 1), (clamp(m - 1), 3)]
    } else {
        [(clamp(m + 1), 0), (clamp(m), 2)]
    }
}

pub fn upsample2x_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check(input, weight)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &input.data[ch * h * w..(ch + 1) * h * w];
        let ker = &weight.data[ch * K * K..(ch + 1) * K * K];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let ty = taps(oy, h);
            for ox in 0..ow {
                let tx = taps(ox, w);
                let mut acc = T::zero();
                for &(iy, ky) in &ty {
                    for &(ix, kx) in &tx {
                        acc += ker[ky * K + kx] * src[iy * w + ix];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample2x_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<UpsampleGrads<T>> {
    let (c, h, w) = check(input, weight)?;
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape != [c, oh, ow] {
        return shape_err("upsample upstream gradient shape mismatch");
    }
    let mut gin = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weight.len()];
    for ch in 0..c {
        let src = &input.data[ch * h * w..(ch + 1) * h * w];
        let ker = &weight.data[ch * K * K..(ch + 1) * K * K];
        let go = &grad_out.data[ch * oh * ow..(ch + 1) * oh * ow];
        let gsrc = &mut gin[ch * h * w..(ch + 1) * h * w];
        let gker = &mut gw[ch * K * K..(ch + 1) * K * K];
        for oy in 0..oh {
            let ty = taps(oy, h);
            for ox in 0..ow {
                let tx = taps(ox, w);
                let g = go[oy * ow + ox];
                for &(iy, ky) in &ty {
                    for &(ix, kx) in &tx {
                        gsrc[iy * w + ix] += ker[ky * K + kx] * g;
                        gker[ky * K + kx] += src[iy * w + ix] * g;
                    }
                }
            }
        }
    }
    Ok(UpsampleGrads { input: Tensor::from_vec(&input.shape, gin)?, weight: Tensor::from_vec(&weight.shape, gw)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Differentiable};
    use rand::{Rng, SeedableRng};

    #[test]
    fn bilinear_preserves_constants() {
        for (c, h, w) in [(1, 1, 1), (1, 3, 5), (2, 4, 4)] {
            let x = Tensor::from_vec(&[c, h, w], vec![1.7f64; c * h * w]).unwrap();
            let y = upsample2x_forward(&x, &bilinear_kernel(c, 1.0)).unwrap();
            assert_eq!(y.shape, vec![c, 2 * h, 2 * w]);
            assert!(y.data.iter().all(|&v| (v - 1.7).abs() < 1e-12));
        }
    }

    #[test]
    fn quarter_gain_preserves_mass() {
        // Edge replication re-injects exactly the border taps that fall
        // outside the output, so mass is conserved for any input.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(&[1, 4, 6], (0..24).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let y = upsample2x_forward(&x, &bilinear_kernel(1, 0.25)).unwrap();
        let (a, b): (f64, f64) = (x.data.iter().sum(), y.data.iter().sum());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn interior_matches_bilinear_interpolation() {
        let x = Tensor::from_vec(&[1, 1, 3], vec![0.0, 4.0, 8.0]).unwrap();
        let y = upsample2x_forward(&x, &bilinear_kernel(1, 1.0)).unwrap();
        assert_eq!(y.data[..6], [0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn weight_shape_checked() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3]);
        assert!(upsample2x_forward(&x, &bilinear_kernel(1, 1.0)).is_err());
    }

    struct UpOp;
    impl Differentiable for UpOp {
        fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            upsample2x_forward(&inputs[0], &inputs[1])
        }
        fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let g = upsample2x_backward(&inputs[0], &inputs[1], grad_out)?;
            Ok(vec![g.input, g.weight])
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for shape in [[1usize, 1, 1], [1, 3, 4], [2, 5, 5]] {
            let n: usize = shape.iter().product();
            let x = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let w = Tensor::from_vec(&[shape[0], 4, 4], (0..shape[0] * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let r = grad_check(&UpOp, &[x, w], 1e-4, 9);
            assert!(r.passed, "{r:?}");
        }
    }
}
