//! Row-major 2D grids of reals: density maps, perspective maps, weight maps
//! and single-channel images all share this type.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

/// How [`downsample_map`] reduces each `factor × factor` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleMode {
    /// Block sum; preserves total mass (density maps).
    Sum,
    /// Block mean; preserves per-pixel scale (perspective maps).
    Mean,
}

impl<T: Real> ValueMap<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        ValueMap { width, height, values: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return shape_err(format!(
                "{} values for a {}x{} map",
                values.len(),
                width,
                height
            ));
        }
        Ok(ValueMap { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        ValueMap { width, height, values }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.values[y * self.width + x] = v;
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_size(&self, other: &ValueMap<T>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_size(&self, other: &ValueMap<T>, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            shape_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            ))
        }
    }

    /// Total mass, accumulated in `f64`.
    pub fn total(&self) -> f64 {
        crate::scalar::sum_f64(&self.values)
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.total() / self.values.len() as f64
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> ValueMap<T> {
        ValueMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> ValueMap<T> {
        self.map(|v| v * s)
    }

    pub fn cast<U: Real>(&self) -> ValueMap<U> {
        ValueMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Copy of the `w × h` window starting at `(x0, y0)`; must lie inside the map.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ValueMap<T>> {
        if x0 + w > self.width || y0 + h > self.height {
            return shape_err(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            ));
        }
        Ok(ValueMap::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Zero-extend on the right and bottom to `w × h`.
    pub fn pad_to(&self, w: usize, h: usize) -> ValueMap<T> {
        ValueMap::from_fn(w, h, |x, y| {
            if x < self.width && y < self.height {
                self.get(x, y)
            } else {
                T::zero()
            }
        })
    }
}

/// Reduce a map by an integer factor in each dimension.
///
/// When a dimension is not divisible by `factor` the map is first zero-padded
/// on the right/bottom up to the next multiple. Zero padding leaves sums
/// untouched; in mean mode each output cell still divides by `factor²`, so
/// partially padded border cells are pulled toward zero.
pub fn downsample_map<T: Real>(
    map: &ValueMap<T>,
    factor: usize,
    mode: DownsampleMode,
) -> Result<ValueMap<T>> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let out_w = map.width.div_ceil(factor);
    let out_h = map.height.div_ceil(factor);
    let mut acc = vec![0.0f64; out_w * out_h];
    for y in 0..map.height {
        let row = &map.values[y * map.width..(y + 1) * map.width];
        let orow = &mut acc[(y / factor) * out_w..(y / factor + 1) * out_w];
        for (x, v) in row.iter().enumerate() {
            orow[x / factor] += v.as_f64();
        }
    }
    let norm = match mode {
        DownsampleMode::Sum => 1.0,
        DownsampleMode::Mean => 1.0 / (factor * factor) as f64,
    };
    Ok(ValueMap {
        width: out_w,
        height: out_h,
        values: acc.into_iter().map(|v| T::of(v * norm)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let m = ValueMap::from_fn(5, 3, |x, y| (x * 7 + y) as f64 * 0.3);
        assert_eq!(downsample_map(&m, 1, DownsampleMode::Sum).unwrap(), m);
        assert_eq!(downsample_map(&m, 1, DownsampleMode::Mean).unwrap(), m);
    }

    #[test]
    fn two_by_two_block() {
        let m = ValueMap::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = downsample_map(&m, 2, DownsampleMode::Sum).unwrap();
        let a = downsample_map(&m, 2, DownsampleMode::Mean).unwrap();
        assert_eq!(s.values, vec![10.0]);
        assert_eq!(a.values, vec![2.5]);
    }

    #[test]
    fn zero_factor_rejected() {
        let m = ValueMap::<f64>::zeros(4, 4);
        assert!(matches!(downsample_map(&m, 0, DownsampleMode::Sum), Err(Error::Config(_))));
    }

    #[test]
    fn non_divisible_dims_are_padded() {
        let m = ValueMap::filled(5, 3, 1.0f64);
        let s = downsample_map(&m, 2, DownsampleMode::Sum).unwrap();
        assert_eq!((s.width, s.height), (3, 2));
        assert_eq!(s.total(), 15.0);
        assert_eq!(s.values, vec![4.0, 4.0, 2.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn random_map_mass_preserved_by_eight() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = ValueMap::from_fn(64, 48, |_, _| rng.gen::<f64>());
        // Summation oracle: plain sequential sum of the source.
        let oracle: f64 = m.values.iter().sum();
        let d = downsample_map(&m, 8, DownsampleMode::Sum).unwrap();
        assert!(((d.total() - oracle) / oracle).abs() <= 1e-9);
    }
}
