//! Ground-truth map generation.
//!
//! Density maps place one unit-mass Gaussian per annotated head. Perspective
//! maps are estimated from head annotations alone: the mean distance from each
//! head to its nearest neighbours stands in for the local head size, samples
//! are averaged per row band, and a saturating `a * tanh(b * (y + c))` profile
//! is fitted over the row means. A straight-line fit is kept as a baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::AnnotatedScene;
use crate::map::ValueMap;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityKernelConfig {
    /// Neighbours used for the adaptive bandwidth.
    pub knn_k: usize,
    /// `sigma = sigma_scale * mean k-NN distance`.
    pub sigma_scale: f64,
    /// Overrides the adaptive rule when set.
    pub fixed_sigma: Option<f64>,
    pub truncation_radius_sigmas: f64,
    /// Lower bound on the adaptive bandwidth (coincident heads).
    pub min_sigma: f64,
    /// Bandwidth for a head with no neighbour to measure against.
    pub fallback_sigma: f64,
}

impl Default for DensityKernelConfig {
    fn default() -> Self {
        DensityKernelConfig {
            knn_k: 3,
            sigma_scale: 0.3,
            fixed_sigma: None,
            truncation_radius_sigmas: 4.0,
            min_sigma: 0.5,
            fallback_sigma: 4.0,
        }
    }
}

impl DensityKernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if !(self.sigma_scale > 0.0) || !(self.truncation_radius_sigmas > 0.0) {
            return Err(Error::Config("sigma_scale and truncation radius must be positive".into()));
        }
        if let Some(s) = self.fixed_sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("fixed sigma {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// A sampled perspective value at a head row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspectiveSample<T = f64> {
    pub row: T,
    pub value: T,
}

/// Mean distance from head `i` to its `k` nearest other heads, for every head.
/// Brute force; `k` is clamped to the number of other heads.
fn knn_mean_distances(heads: &[(f64, f64)], k: usize) -> Vec<Option<f64>> {
    let n = heads.len();
    let mut out = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for (i, &(xi, yi)) in heads.iter().enumerate() {
        d.clear();
        for (j, &(xj, yj)) in heads.iter().enumerate() {
            if i != j {
                d.push(((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt());
            }
        }
        let kk = k.min(d.len());
        if kk == 0 {
            out.push(None);
            continue;
        }
        d.select_nth_unstable_by(kk - 1, |a, b| a.total_cmp(b));
        let mut nearest = d[..kk].to_vec();
        nearest.sort_by(|a, b| a.total_cmp(b));
        out.push(Some(nearest.iter().sum::<f64>() / kk as f64));
    }
    out
}

/// Ground-truth density map: each head contributes a Gaussian truncated at
/// `truncation_radius_sigmas` and clipped to the image, renormalised to unit
/// discrete mass, so the map sums to the head count.
pub fn render_density_map<T: Real>(
    scene: &AnnotatedScene,
    cfg: &DensityKernelConfig,
) -> Result<ValueMap<T>> {
    cfg.validate()?;
    let (w, h) = (scene.width, scene.height);
    let mut acc = vec![0.0f64; w * h];
    let sigmas: Vec<f64> = match cfg.fixed_sigma {
        Some(s) => vec![s; scene.heads.len()],
        None => knn_mean_distances(&scene.heads, cfg.knn_k)
            .into_iter()
            .map(|d| match d {
                Some(d) => (cfg.sigma_scale * d).max(cfg.min_sigma),
                None => cfg.fallback_sigma,
            })
            .collect(),
    };
    let mut kernel = Vec::new();
    for (&(hx, hy), &sigma) in scene.heads.iter().zip(&sigmas) {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("non-positive kernel sigma {sigma}")));
        }
        let radius = (cfg.truncation_radius_sigmas * sigma).ceil() as i64;
        let cx = hx.floor() as i64;
        let cy = hy.floor() as i64;
        let x0 = (cx - radius).max(0);
        let x1 = (cx + radius).min(w as i64 - 1);
        let y0 = (cy - radius).max(0);
        let y1 = (cy + radius).min(h as i64 - 1);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let r2 = (cfg.truncation_radius_sigmas * sigma).powi(2);
        kernel.clear();
        let mut mass = 0.0;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 + 0.5 - hx;
                let dy = py as f64 + 0.5 - hy;
                let d2 = dx * dx + dy * dy;
                let v = if d2 <= r2 { (-d2 * inv).exp() } else { 0.0 };
                mass += v;
                kernel.push(v);
            }
        }
        if !(mass > 0.0) {
            // The head's own pixel is always within the truncation radius,
            // so this only happens for a head outside the image.
            return Err(Error::Domain(format!("head ({hx}, {hy}) outside the image")));
        }
        let mut it = kernel.iter();
        for py in y0..=y1 {
            let row = &mut acc[py as usize * w..(py as usize + 1) * w];
            for px in x0..=x1 {
                row[px as usize] += it.next().copied().unwrap_or(0.0) / mass;
            }
        }
    }
    Ok(ValueMap { width: w, height: h, values: acc.into_iter().map(T::of).collect() })
}

/// One sample per head: the mean distance to its `k` nearest other heads,
/// located at the head's row.
pub fn knn_head_scales<T: Real>(scene: &AnnotatedScene, k: usize) -> Result<Vec<PerspectiveSample<T>>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if scene.heads.len() < k + 1 {
        return Err(Error::InsufficientData(format!(
            "{} heads, need at least {} for k = {k}",
            scene.heads.len(),
            k + 1
        )));
    }
    Ok(knn_mean_distances(&scene.heads, k)
        .into_iter()
        .zip(&scene.heads)
        .map(|(d, &(_, y))| PerspectiveSample {
            row: T::of(y),
            value: T::of(d.expect("k + 1 heads guarantee a neighbour")),
        })
        .collect())
}

/// Average samples over horizontal bands `[i * bin_height, (i + 1) * bin_height)`.
/// Each non-empty band yields one sample at its center row `(i + 0.5) * bin_height`;
/// output is sorted by row.
pub fn row_mean_samples<T: Real>(
    samples: &[PerspectiveSample<T>],
    bin_height: usize,
) -> Result<Vec<PerspectiveSample<T>>> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples to average".into()));
    }
    if bin_height == 0 {
        return Err(Error::Config("bin height must be positive".into()));
    }
    let bh = bin_height as f64;
    let mut bins: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for s in samples {
        let b = (s.row.as_f64() / bh).floor() as i64;
        let e = bins.entry(b).or_insert((0.0, 0));
        e.0 += s.value.as_f64();
        e.1 += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(b, (sum, n))| PerspectiveSample {
            row: T::of((b as f64 + 0.5) * bh),
            value: T::of(sum / n as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Jittered restarts on top of the structured initial guesses.
    pub restarts: usize,
    pub seed: u64,
    /// Relative cost decrease below which an iteration counts as stalled.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iterations: 400, restarts: 8, seed: 0x7A11, tolerance: 1e-14 }
    }
}

/// Parameters of `p(y) = a * tanh(b * (y + c))` plus fit diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhFitParams<T = f64> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub residual_rms: T,
    pub n_rows_used: usize,
    pub converged: bool,
}

impl<T: Real> TanhFitParams<T> {
    pub fn eval(&self, row: T) -> T {
        self.a * (self.b * (row + self.c)).tanh()
    }

    /// Successful fit whose profile grows toward the image bottom.
    pub fn is_increasing(&self) -> bool {
        self.converged && self.a > T::zero() && self.b > T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit<T = f64> {
    pub slope: T,
    pub intercept: T,
    pub residual_rms: T,
}

impl<T: Real> LinearFit<T> {
    pub fn eval(&self, row: T) -> T {
        self.slope * row + self.intercept
    }
}

/// Ordinary least-squares line `p = slope * row + intercept`.
pub fn fit_linear<T: Real>(samples: &[PerspectiveSample<T>]) -> Result<LinearFit<T>> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData("linear fit needs two samples".into()));
    }
    let n = samples.len() as f64;
    let my = samples.iter().map(|s| s.row.as_f64()).sum::<f64>() / n;
    let mp = samples.iter().map(|s| s.value.as_f64()).sum::<f64>() / n;
    let (mut syy, mut syp) = (0.0, 0.0);
    for s in samples {
        let dy = s.row.as_f64() - my;
        syy += dy * dy;
        syp += dy * (s.value.as_f64() - mp);
    }
    if !(syy > 0.0) {
        return Err(Error::Degenerate("all sample rows identical".into()));
    }
    let slope = syp / syy;
    let intercept = mp - slope * my;
    let ss: f64 = samples
        .iter()
        .map(|s| (slope * s.row.as_f64() + intercept - s.value.as_f64()).powi(2))
        .sum();
    Ok(LinearFit {
        slope: T::of(slope),
        intercept: T::of(intercept),
        residual_rms: T::of((ss / n).sqrt()),
    })
}

/// Rows and values normalised to O(1) for the solver.
struct Normalised {
    ys: Vec<f64>,
    ps: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    p_scale: f64,
}

impl Normalised {
    fn new<T: Real>(samples: &[PerspectiveSample<T>]) -> Self {
        let n = samples.len() as f64;
        let y_mean = samples.iter().map(|s| s.row.as_f64()).sum::<f64>() / n;
        let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.row.as_f64()), hi.max(s.row.as_f64()))
        });
        let y_scale = ((hi - lo) / 2.0).max(1e-300);
        let p_scale = samples
            .iter()
            .map(|s| s.value.as_f64().abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        Normalised {
            ys: samples.iter().map(|s| (s.row.as_f64() - y_mean) / y_scale).collect(),
            ps: samples.iter().map(|s| s.value.as_f64() / p_scale).collect(),
            y_mean,
            y_scale,
            p_scale,
        }
    }

    /// Raw (a, b, c) into normalised coordinates and back.
    fn to_norm(&self, [a, b, c]: [f64; 3]) -> [f64; 3] {
        [a / self.p_scale, b * self.y_scale, (c + self.y_mean) / self.y_scale]
    }

    fn from_norm(&self, [a, b, c]: [f64; 3]) -> [f64; 3] {
        [a * self.p_scale, b / self.y_scale, c * self.y_scale - self.y_mean]
    }

    fn cost(&self, t: &[f64; 3]) -> f64 {
        self.ys
            .iter()
            .zip(&self.ps)
            .map(|(&y, &p)| (t[0] * (t[1] * (y + t[2])).tanh() - p).powi(2))
            .sum()
    }
}

/// Levenberg-Marquardt on the 3-parameter tanh model with Marquardt
/// (diagonal) damping. Returns `(params, cost, converged)`.
fn levenberg_marquardt(data: &Normalised, start: [f64; 3], opts: &FitOptions) -> ([f64; 3], f64, bool) {
    let mut t = start;
    let mut cost = data.cost(&t);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut stalls = 0;
    for _ in 0..opts.max_iterations {
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for (&y, &p) in data.ys.iter().zip(&data.ps) {
            let u = y + t[2];
            let th = (t[1] * u).tanh();
            let sech2 = 1.0 - th * th;
            let r = t[0] * th - p;
            let j = [th, t[0] * sech2 * u, t[0] * sech2 * t[1]];
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let grad_norm = jtr.iter().map(|g| g.abs()).fold(0.0, f64::max);
        if grad_norm < 1e-15 || cost < 1e-30 {
            converged = true;
            break;
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut m = jtj;
            for (d, row) in m.iter_mut().enumerate() {
                row[d] += lambda * jtj[d][d].max(1e-12);
            }
            let Some(step) = solve3(m, [-jtr[0], -jtr[1], -jtr[2]]) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [t[0] + step[0], t[1] + step[1], t[2] + step[2]];
            let c = data.cost(&cand);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                let step_small = step
                    .iter()
                    .zip(&cand)
                    .all(|(s, v)| s.abs() <= 1e-12 * (v.abs() + 1e-12));
                t = cand;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < opts.tolerance || step_small {
                    stalls += 1;
                } else {
                    stalls = 0;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            // No descent direction left at any damping: a local minimum.
            converged = true;
            break;
        }
        if stalls >= 3 {
            converged = true;
            break;
        }
    }
    (t, cost, converged)
}

/// Gaussian elimination with partial pivoting for a 3x3 system.
fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = r[row];
        for k in row + 1..3 {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Least-squares fit of `a * tanh(b * (y + c))` with multi-start damped
/// Gauss-Newton. Starts: the max/min-row heuristic, a near-linear start
/// derived from the straight-line fit, a saturated (flat) start, and
/// `opts.restarts` seeded jitters of the first. The lowest-cost result wins;
/// `converged` is false if that run hit the iteration cap.
pub fn fit_tanh<T: Real>(samples: &[PerspectiveSample<T>], opts: &FitOptions) -> Result<TanhFitParams<T>> {
    if samples.len() < 3 {
        return Err(Error::InsufficientData(format!("{} samples, need 3", samples.len())));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.row.as_f64()), hi.max(s.row.as_f64()))
    });
    if !(hi > lo) {
        return Err(Error::InsufficientData("samples span a single row".into()));
    }
    if samples.iter().any(|s| !s.value.as_f64().is_finite() || !s.row.as_f64().is_finite()) {
        return Err(Error::Domain("non-finite sample".into()));
    }
    let span = hi - lo;
    let pmax = samples.iter().map(|s| s.value.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let pmean = samples.iter().map(|s| s.value.as_f64()).sum::<f64>() / samples.len() as f64;

    let data = Normalised::new(samples);
    let base = [pmax, 2.0 / span, -lo];
    let mut starts = vec![base, [pmean, 2.0 / span, -lo + 4.0 * span]];
    if let Ok(lin) = fit_linear(samples) {
        let (s, i) = (lin.slope.as_f64(), lin.intercept.as_f64());
        if s.abs() > 1e-300 {
            // Small argument: tanh(x) ~ x, so a*b = slope and b*c*a = intercept.
            let c = i / s;
            let b = 1e-3 / (c.abs() + hi.abs() + lo.abs() + span);
            starts.push([s / b, b, c]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let ja: f64 = rng.sample(StandardNormal);
        let jb: f64 = rng.sample(StandardNormal);
        let jc: f64 = rng.sample(StandardNormal);
        starts.push([
            base[0] * (0.5 * ja).exp(),
            base[1] * (0.7 * jb).exp(),
            base[2] + 0.5 * span * jc,
        ]);
    }

    let mut best: Option<([f64; 3], f64, bool)> = None;
    for s in starts {
        let (t, cost, conv) = levenberg_marquardt(&data, data.to_norm(s), opts);
        if cost.is_finite() && best.as_ref().map_or(true, |b| cost < b.1) {
            best = Some((t, cost, conv));
        }
    }
    let (t, cost, converged) =
        best.ok_or_else(|| Error::Degenerate("no start produced a finite fit".into()))?;
    let [mut a, mut b, c] = data.from_norm(t);
    // tanh is odd: keep the amplitude positive.
    if a < 0.0 {
        a = -a;
        b = -b;
    }
    let rms = (cost / samples.len() as f64).sqrt() * data.p_scale;
    Ok(TanhFitParams {
        a: T::of(a),
        b: T::of(b),
        c: T::of(c),
        residual_rms: T::of(rms),
        n_rows_used: samples.len(),
        converged,
    })
}

/// Row-constant map of the fitted profile, clamped below at `epsilon`.
pub fn render_perspective_map<T: Real>(
    fit: &TanhFitParams<T>,
    width: usize,
    height: usize,
    epsilon: T,
) -> ValueMap<T> {
    render_rows(width, height, epsilon, |row| fit.eval(row))
}

pub fn render_linear_perspective_map<T: Real>(
    fit: &LinearFit<T>,
    width: usize,
    height: usize,
    epsilon: T,
) -> ValueMap<T> {
    render_rows(width, height, epsilon, |row| fit.eval(row))
}

fn render_rows<T: Real>(width: usize, height: usize, epsilon: T, f: impl Fn(T) -> T) -> ValueMap<T> {
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let v = f(T::of(y as f64)).max(epsilon);
        values.extend(std::iter::repeat(v).take(width));
    }
    ValueMap { width, height, values }
}

/// Which model produced a scene's perspective map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerspectiveFit {
    Tanh(TanhFitParams<f64>),
    /// Tanh fit failed or was not increasing; straight line with positive slope.
    Linear(LinearFit<f64>),
    /// Too few heads or no increasing trend; constant map.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveGtConfig {
    pub knn_k: usize,
    /// Row band height; `None` means `height / 32` (at least 1).
    pub bin_height: Option<usize>,
    pub epsilon: f64,
    pub fit: FitOptions,
    /// Use the straight-line fit instead of tanh.
    pub linear: bool,
}

impl Default for PerspectiveGtConfig {
    fn default() -> Self {
        PerspectiveGtConfig { knn_k: 3, bin_height: None, epsilon: 1e-3, fit: FitOptions::default(), linear: false }
    }
}

/// Full perspective ground truth for a scene: k-NN scales, row means, fit,
/// render. Falls back to a line and then a constant when the data cannot
/// support an increasing tanh profile.
pub fn perspective_gt<T: Real>(
    scene: &AnnotatedScene,
    cfg: &PerspectiveGtConfig,
) -> Result<(ValueMap<T>, PerspectiveFit)> {
    let (w, h) = (scene.width, scene.height);
    let eps = cfg.epsilon;
    let constant = |v: f64| {
        let v = v.max(eps);
        (ValueMap::filled(w, h, T::of(v)), PerspectiveFit::Constant(v))
    };
    let samples = match knn_head_scales::<f64>(scene, cfg.knn_k) {
        Ok(s) => s,
        Err(Error::InsufficientData(_)) => return Ok(constant(1.0)),
        Err(e) => return Err(e),
    };
    let mean_sample = samples.iter().map(|s| s.value).sum::<f64>() / samples.len() as f64;
    let bin = cfg.bin_height.unwrap_or((h / 32).max(1));
    let means = row_mean_samples(&samples, bin)?;
    if !cfg.linear && means.len() >= 3 {
        if let Ok(fit) = fit_tanh(&means, &cfg.fit) {
            if fit.is_increasing() {
                let f = TanhFitParams {
                    a: T::of(fit.a),
                    b: T::of(fit.b),
                    c: T::of(fit.c),
                    residual_rms: T::of(fit.residual_rms),
                    n_rows_used: fit.n_rows_used,
                    converged: fit.converged,
                };
                return Ok((render_perspective_map(&f, w, h, T::of(eps)), PerspectiveFit::Tanh(fit)));
            }
        }
    }
    match fit_linear(&means) {
        Ok(lin) if lin.slope > 0.0 => {
            let l = LinearFit {
                slope: T::of(lin.slope),
                intercept: T::of(lin.intercept),
                residual_rms: T::of(lin.residual_rms),
            };
            Ok((render_linear_perspective_map(&l, w, h, T::of(eps)), PerspectiveFit::Linear(lin)))
        }
        _ => Ok(constant(mean_sample)),
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn density_integrates_to_count(
            w in 8usize..48,
            h in 8usize..48,
            fr in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..30),
            fixed in prop::option::of(0.5f64..6.0),
        ) {
            let heads = fr.iter().map(|&(a, b)| (a * (w as f64 - 1e-6), b * (h as f64 - 1e-6))).collect();
            let s = AnnotatedScene::new("p", w, h, heads);
            let cfg = DensityKernelConfig { fixed_sigma: fixed, ..Default::default() };
            let m: ValueMap<f64> = render_density_map(&s, &cfg).unwrap();
            prop_assert!((m.total() - s.count() as f64).abs() <= 1e-6 * (1.0 + s.count() as f64));
            prop_assert!(m.values.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn perspective_gt_is_positive_and_row_constant(seed in 0u64..1000) {
            use crate::geometry::{generate_scene, SceneConfig};
            let s = generate_scene(&SceneConfig::default(), seed).unwrap();
            let cfg = PerspectiveGtConfig::default();
            let (m, _) = perspective_gt::<f64>(&s, &cfg).unwrap();
            for y in 0..m.height {
                for x in 0..m.width {
                    prop_assert!(m.get(x, y) >= cfg.epsilon);
                    prop_assert_eq!(m.get(x, y), m.get(0, y));
                }
            }
        }
    }
}
