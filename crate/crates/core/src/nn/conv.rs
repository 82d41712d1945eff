use crate::error::{shape_err, Result};
use crate::scalar::Real;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0 }
    }
}

impl Conv2dSpec {
    pub fn same3x3() -> Self {
        Conv2dSpec { stride: 1, padding: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Self> {
        let (cin, h, w) = input.dims3()?;
        let [cout, wcin, kh, kw] = weight.shape[..] else {
            return shape_err(format!("conv weight must be (out, in, kh, kw), got {:?}", weight.shape));
        };
        if wcin != cin {
            return shape_err(format!("conv expects {wcin} input channels, got {cin}"));
        }
        if let Some(b) = bias {
            if b.shape != [cout] {
                return shape_err(format!("conv bias shape {:?} for {cout} outputs", b.shape));
            }
        }
        if spec.stride == 0 {
            return shape_err("conv stride must be positive");
        }
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return shape_err(format!("{h}x{w} input too small for {kh}x{kw} kernel"));
        }
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
        Ok(Geometry { cin, h, w, cout, kh, kw, oh, ow, stride: spec.stride, pad: spec.padding })
    }

    /// Output range `[lo, hi)` along one axis whose input index
    /// `o * stride + k - pad` stays inside `[0, n)`.
    #[inline]
    fn valid(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n as isize - 1 - off).div_euclid(s) + 1).clamp(0, out as isize);
        (lo.max(0) as usize, (hi as usize).max(lo.max(0) as usize))
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, Some(bias), spec)?;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.cout * plane];
    for oc in 0..g.cout {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias.data[oc]);
        for ic in 0..g.cin {
            let src = &input.data[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = weight.data[((oc * g.cin + ic) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut dst[oy * g.ow + ox0..oy * g.ow + ox1];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        let irow = &src[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            for (o, &i) in orow.iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                *o += wv * i;
                            }
                        } else {
                            for (n, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[ix0 + n * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.cout, g.oh, g.ow], out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: Conv2dSpec,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = Geometry::new(input, weight, None, spec)?;
    if grad_out.shape != [g.cout, g.oh, g.ow] {
        return shape_err(format!(
            "conv upstream gradient {:?}, expected {:?}",
            grad_out.shape,
            [g.cout, g.oh, g.ow]
        ));
    }
    let plane = g.oh * g.ow;
    let mut gin = vec![T::zero(); input.data.len()];
    let mut gw = vec![T::zero(); weight.data.len()];
    let mut gb = vec![T::zero(); g.cout];
    for oc in 0..g.cout {
        let go = &grad_out.data[oc * plane..(oc + 1) * plane];
        gb[oc] = go.iter().copied().sum();
        for ic in 0..g.cin {
            let src = &input.data[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            let gsrc = &mut gin[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let widx = ((oc * g.cin + ic) * g.kh + ky) * g.kw + kx;
                    let wv = weight.data[widx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.ow + ox0..oy * g.ow + ox1];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            let n = ox1 - ox0;
                            let irow = &src[iy * g.w + ix0..iy * g.w + ix0 + n];
                            let gi = &mut gsrc[iy * g.w + ix0..iy * g.w + ix0 + n];
                            for ((gi, &i), &gv) in gi.iter_mut().zip(irow).zip(grow) {
                                acc += gv * i;
                                *gi += wv * gv;
                            }
                        } else {
                            for (n, &gv) in grow.iter().enumerate() {
                                let ix = iy * g.w + ix0 + n * g.stride;
                                acc += gv * src[ix];
                                gsrc[ix] += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_vec(&input.shape, gin)?,
        weight: Tensor::from_vec(&weight.shape, gw)?,
        bias: Tensor::from_vec(&[g.cout], gb)?,
    })
}
