use crate::error::{shape_err, Result};
use crate::scalar::Real;

use super::Tensor;

/// Flat input index of each output element's maximum, plus the input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns form clipped
/// windows. Ties resolve to the first element in row-major window order.
pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (c, h, w) = input.dims3()?;
    if h == 0 || w == 0 {
        return shape_err("cannot pool an empty map");
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = input.data[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (y, x) = (2 * oy + dy, 2 * ox + dx);
                    if y < h && x < w {
                        let i = base + y * w + x;
                        if input.data[i] > best {
                            best = input.data[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, PoolIndices { input_shape: input.shape.clone(), argmax }))
}

pub fn maxpool2x2_backward<T: Real>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return shape_err("pool upstream gradient size mismatch");
    }
    let mut g = Tensor::zeros(&indices.input_shape);
    for (&i, &v) in indices.argmax.iter().zip(&grad_out.data) {
        g.data[i] += v;
    }
    Ok(g)
}
