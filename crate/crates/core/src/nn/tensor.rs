use crate::error::{shape_err, Result};
use crate::map::ValueMap;
use crate::scalar::Real;

/// Dense row-major tensor. Feature maps are `(channels, height, width)`;
/// parameters may have any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("{} values for shape {:?}", data.len(), shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected (c, h, w), got {:?}", self.shape)),
        }
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return shape_err(format!("gradient of {} for tensor of {}", g.len(), self.data.len()));
        }
        let dst = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (d, s) in dst.iter_mut().zip(g) {
            *d += *s;
        }
        Ok(())
    }

    /// Single-channel map view as `(1, h, w)`.
    pub fn from_map(map: &ValueMap<T>) -> Self {
        Tensor { shape: vec![1, map.height, map.width], data: map.values.clone(), grad: None }
    }

    /// Channel `c` of a `(c, h, w)` tensor as a map.
    pub fn channel_map(&self, c: usize) -> Result<ValueMap<T>> {
        let (ch, h, w) = self.dims3()?;
        if c >= ch {
            return shape_err(format!("channel {c} of {ch}"));
        }
        Ok(ValueMap { width: w, height: h, values: self.data[c * h * w..(c + 1) * h * w].to_vec() })
    }

    pub fn into_map(self) -> Result<ValueMap<T>> {
        let (c, h, w) = self.dims3()?;
        if c != 1 {
            return shape_err(format!("expected one channel, got {c}"));
        }
        Ok(ValueMap { width: w, height: h, values: self.data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }
}

/// A named learnable (or frozen) parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParam<T> {
    pub id: String,
    pub tensor: Tensor<T>,
    pub learnable: bool,
}
