//! Training objective: per-map MSE + DSSIM, and the six-term composite loss.
//!
//! SSIM windows are Gaussian, clipped at the map border and renormalised
//! over the in-bounds taps, so every pixel (and maps smaller than the
//! window) has a well-defined local mean.

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::map::ValueMap;
use crate::model::{MultiScaleOutputs, OutputGrads};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// DSSIM weight per map pixel; the effective weight on a map is
    /// `lambda_dssim * pixel_count`.
    pub lambda_dssim: f64,
    pub kappa: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_dssim: 0.001, kappa: 0.1, lambda1: 0.1, lambda2: 0.1, lambda3: 0.1 }
    }
}

impl LossWeights {
    pub const KEYS: &'static [&'static str] =
        &["loss.lambda_dssim", "loss.kappa", "loss.lambda1", "loss.lambda2", "loss.lambda3"];

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_dssim, self.kappa, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let w = LossWeights {
            lambda_dssim: kv.get_or("loss.lambda_dssim", d.lambda_dssim)?,
            kappa: kv.get_or("loss.kappa", d.kappa)?,
            lambda1: kv.get_or("loss.lambda1", d.lambda1)?,
            lambda2: kv.get_or("loss.lambda2", d.lambda2)?,
            lambda3: kv.get_or("loss.lambda3", d.lambda3)?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("loss.lambda_dssim", self.lambda_dssim);
        kv.set("loss.kappa", self.kappa);
        kv.set("loss.lambda1", self.lambda1);
        kv.set("loss.lambda2", self.lambda2);
        kv.set("loss.lambda3", self.lambda3);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub gaussian_sigma: f64,
    /// Fixed stabilisers. When `None`, `(k * L)^2` with `L = max(max(target), 1e-6)`.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window_size: 5, gaussian_sigma: 1.0, c1: None, c2: None, k1: 0.01, k2: 0.03 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size % 2 == 0 || self.window_size == 0 {
            return Err(Error::Config(format!("ssim window must be odd, got {}", self.window_size)));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config("ssim sigma must be positive".into()));
        }
        for c in [self.c1, self.c2].into_iter().flatten() {
            if !(c > 0.0) {
                return Err(Error::Config("ssim constants must be positive".into()));
            }
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("ssim k1, k2 must be positive".into()));
        }
        Ok(())
    }

    /// `(C1, C2)` for a given target map.
    pub fn constants<T: Real>(&self, target: &ValueMap<T>) -> (f64, f64) {
        let l = target.max_value().as_f64().max(1e-6);
        (self.c1.unwrap_or((self.k1 * l).powi(2)), self.c2.unwrap_or((self.k2 * l).powi(2)))
    }

    fn taps(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as i64;
        (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp())
            .collect()
    }
}

/// `0.5 * sum (e - g)^2` and its gradient `e - g`.
pub fn mse_loss<T: Real>(estimate: &ValueMap<T>, target: &ValueMap<T>) -> Result<(f64, ValueMap<T>)> {
    estimate.check_same_size(target, "mse")?;
    let mut value = 0.0f64;
    let grad = estimate
        .values
        .iter()
        .zip(&target.values)
        .map(|(&e, &g)| {
            let d = e - g;
            value += 0.5 * d.as_f64() * d.as_f64();
            d
        })
        .collect();
    Ok((value, ValueMap { width: estimate.width, height: estimate.height, values: grad }))
}

/// Separable window sums with border clipping, in f64.
struct Window {
    taps: Vec<f64>,
    w: usize,
    h: usize,
    /// Per-pixel sum of in-bounds weights.
    norm: Vec<f64>,
}

impl Window {
    fn new(cfg: &SsimConfig, w: usize, h: usize) -> Self {
        let taps = cfg.taps();
        let r = (taps.len() / 2) as i64;
        let axis = |n: usize| -> Vec<f64> {
            (0..n as i64)
                .map(|p| (-r..=r).filter(|i| (0..n as i64).contains(&(p + i))).map(|i| taps[(i + r) as usize]).sum())
                .collect()
        };
        let (sx, sy) = (axis(w), axis(h));
        let norm = sy.iter().flat_map(|&b| sx.iter().map(move |&a| a * b)).collect();
        Window { taps, w, h, norm }
    }

    /// Unnormalised symmetric blur; self-adjoint.
    fn blur(&self, a: &[f64]) -> Vec<f64> {
        let r = (self.taps.len() / 2) as i64;
        let (w, h) = (self.w as i64, self.h as i64);
        let mut tmp = vec![0.0; a.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for i in -r..=r {
                    let xx = x + i;
                    if (0..w).contains(&xx) {
                        s += self.taps[(i + r) as usize] * a[(y * w + xx) as usize];
                    }
                }
                tmp[(y * w + x) as usize] = s;
            }
        }
        let mut out = vec![0.0; a.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for i in -r..=r {
                    let yy = y + i;
                    if (0..h).contains(&yy) {
                        s += self.taps[(i + r) as usize] * tmp[(yy * w + x) as usize];
                    }
                }
                out[(y * w + x) as usize] = s;
            }
        }
        out
    }

    fn mean(&self, a: &[f64]) -> Vec<f64> {
        self.blur(a).iter().zip(&self.norm).map(|(s, z)| s / z).collect()
    }
}

struct SsimParts {
    s: Vec<f64>,
    mu_e: Vec<f64>,
    mu_g: Vec<f64>,
    n1: Vec<f64>,
    n2: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    window: Window,
}

/// SSIM from local moments.
pub fn ssim_from_moments(mu_e: f64, mu_g: f64, var_e: f64, var_g: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    (2.0 * mu_e * mu_g + c1) * (2.0 * cov + c2) / ((mu_e * mu_e + mu_g * mu_g + c1) * (var_e + var_g + c2))
}

fn ssim_parts<T: Real>(e: &ValueMap<T>, g: &ValueMap<T>, cfg: &SsimConfig) -> Result<SsimParts> {
    cfg.validate()?;
    e.check_same_size(g, "ssim")?;
    if e.len() == 0 {
        return Err(Error::Shape("ssim on an empty map".into()));
    }
    let (c1, c2) = cfg.constants(g);
    let window = Window::new(cfg, e.width, e.height);
    let ev: Vec<f64> = e.values.iter().map(|v| v.as_f64()).collect();
    let gv: Vec<f64> = g.values.iter().map(|v| v.as_f64()).collect();
    let mu_e = window.mean(&ev);
    let mu_g = window.mean(&gv);
    let m_ee = window.mean(&ev.iter().map(|v| v * v).collect::<Vec<_>>());
    let m_gg = window.mean(&gv.iter().map(|v| v * v).collect::<Vec<_>>());
    let m_eg = window.mean(&ev.iter().zip(&gv).map(|(a, b)| a * b).collect::<Vec<_>>());
    let n = ev.len();
    let (mut s, mut n1, mut n2, mut d1, mut d2) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        let (me, mg) = (mu_e[j], mu_g[j]);
        n1[j] = 2.0 * me * mg + c1;
        d1[j] = me * me + mg * mg + c1;
        n2[j] = 2.0 * (m_eg[j] - me * mg) + c2;
        d2[j] = (m_ee[j] - me * me) + (m_gg[j] - mg * mg) + c2;
        s[j] = n1[j] * n2[j] / (d1[j] * d2[j]);
    }
    Ok(SsimParts { s, mu_e, mu_g, n1, n2, d1, d2, window })
}

/// Per-pixel SSIM of `estimate` against `target`.
pub fn ssim_map<T: Real>(estimate: &ValueMap<T>, target: &ValueMap<T>, cfg: &SsimConfig) -> Result<ValueMap<T>> {
    let parts = ssim_parts(estimate, target, cfg)?;
    Ok(ValueMap {
        width: estimate.width,
        height: estimate.height,
        values: parts.s.into_iter().map(T::of).collect(),
    })
}

/// `1 - mean(SSIM)` and its gradient with respect to `estimate`.
pub fn dssim_loss<T: Real>(estimate: &ValueMap<T>, target: &ValueMap<T>, cfg: &SsimConfig) -> Result<(f64, ValueMap<T>)> {
    let p = ssim_parts(estimate, target, cfg)?;
    let n = p.s.len();
    let inv_m = 1.0 / n as f64;
    let value = 1.0 - p.s.iter().sum::<f64>() * inv_m;
    // dS/dmu_e = a, dS/dm_ee = b, dS/dm_eg = c; expressed without dividing
    // by N1 or N2, which may vanish.
    let (mut a, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        let dd = p.d1[j] * p.d2[j];
        let (me, mg, s) = (p.mu_e[j], p.mu_g[j], p.s[j]);
        let z = p.window.norm[j];
        a[j] = (2.0 * mg * p.n2[j] / dd - 2.0 * me * s / p.d1[j] - 2.0 * mg * p.n1[j] / dd + 2.0 * me * s / p.d2[j]) / z;
        b[j] = -s / p.d2[j] / z;
        c[j] = 2.0 * p.n1[j] / dd / z;
    }
    let (ta, tb, tc) = (p.window.blur(&a), p.window.blur(&b), p.window.blur(&c));
    let grad = (0..n)
        .map(|k| {
            let ek = estimate.values[k].as_f64();
            let gk = target.values[k].as_f64();
            T::of(-inv_m * (ta[k] + 2.0 * ek * tb[k] + gk * tc[k]))
        })
        .collect();
    Ok((value, ValueMap { width: estimate.width, height: estimate.height, values: grad }))
}

/// One task loss: `MSE + lambda_dssim * pixels * DSSIM`.
pub fn task_loss<T: Real>(
    estimate: &ValueMap<T>,
    target: &ValueMap<T>,
    lambda_dssim: f64,
    cfg: &SsimConfig,
) -> Result<(f64, ValueMap<T>)> {
    let (mse, mut grad) = mse_loss(estimate, target)?;
    if lambda_dssim == 0.0 {
        return Ok((mse, grad));
    }
    let lam = lambda_dssim * estimate.len() as f64;
    let (dssim, dg) = dssim_loss(estimate, target, cfg)?;
    for (g, d) in grad.values.iter_mut().zip(&dg.values) {
        *g += T::of(lam) * *d;
    }
    Ok((mse + lam * dssim, grad))
}

/// Ground truth at every supervised resolution, already scale-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBundle<T> {
    /// Density at 1/8, 1/16, 1/32.
    pub density: [Option<ValueMap<T>>; 3],
    /// Perspective at 1/8, 1/16.
    pub perspective: [Option<ValueMap<T>>; 2],
}

/// Which terms contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// All six terms.
    Full,
    /// Density terms only; perspective terms are weighted 0.
    DensityOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub p: f64,
    pub d: f64,
    pub ps: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss<T> {
    pub total: f64,
    /// Unweighted per-term losses.
    pub terms: LossTerms,
    pub grads: OutputGrads<T>,
}

fn need<'a, T>(m: &'a Option<ValueMap<T>>, what: &str) -> Result<&'a ValueMap<T>> {
    m.as_ref().ok_or_else(|| Error::Config(format!("ground truth missing at {what}")))
}

/// `L_P + L_D + kappa L_Ps + lambda1 L_D1 + lambda2 L_D2 + lambda3 L_D3`.
pub fn composite_loss<T: Real>(
    outputs: &MultiScaleOutputs<T>,
    gts: &GtBundle<T>,
    wts: &LossWeights,
    cfg: &SsimConfig,
    objective: Objective,
) -> Result<CompositeLoss<T>> {
    wts.validate()?;
    let g8 = need(&gts.density[0], "density 1/8")?;
    let g16 = need(&gts.density[1], "density 1/16")?;
    let g32 = need(&gts.density[2], "density 1/32")?;
    let lam = wts.lambda_dssim;
    let weighted = |w: f64, e: &ValueMap<T>, g: &ValueMap<T>| -> Result<(f64, Option<ValueMap<T>>)> {
        let (v, grad) = task_loss(e, g, lam, cfg)?;
        let grad = (w != 0.0).then(|| grad.map(|x| x * T::of(w)));
        Ok((v, grad))
    };
    let mut terms = LossTerms::default();
    let mut grads = OutputGrads::default();
    (terms.d, grads.d_e) = weighted(1.0, &outputs.d_e, g8)?;
    (terms.d1, grads.d_e1) = weighted(wts.lambda1, &outputs.d_e1, g8)?;
    (terms.d2, grads.d_e2) = weighted(wts.lambda2, &outputs.d_e2, g16)?;
    (terms.d3, grads.d_e3) = weighted(wts.lambda3, &outputs.d_e3, g32)?;
    let mut total = terms.d + wts.lambda1 * terms.d1 + wts.lambda2 * terms.d2 + wts.lambda3 * terms.d3;
    if objective == Objective::Full {
        let p8 = need(&gts.perspective[0], "perspective 1/8")?;
        let p16 = need(&gts.perspective[1], "perspective 1/16")?;
        (terms.p, grads.p_e) = weighted(1.0, &outputs.p_e, p8)?;
        (terms.ps, grads.p_es) = weighted(wts.kappa, &outputs.p_es, p16)?;
        total += terms.p + wts.kappa * terms.ps;
    }
    Ok(CompositeLoss { total, terms, grads })
}
