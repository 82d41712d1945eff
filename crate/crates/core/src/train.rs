//! Two-phase SGD training.
//!
//! Phase 1 trains the density heads with average combination. Phase 2 adds
//! the perspective branch and the PA layers and fine-tunes everything on the
//! full objective. Training is single-threaded and fully determined by
//! `(samples, config, seed)`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::geometry::{derive_seed, AnnotatedScene, RoiMask};
use crate::gt::{perspective_gt, render_density_map, DensityKernelConfig, PerspectiveGtConfig};
use crate::losses::{composite_loss, GtBundle, LossTerms, LossWeights, Objective, SsimConfig};
use crate::map::{downsample_map, DownsampleMode, ValueMap};
use crate::model::{
    CombineMode, ModelConfig, PacnnModel, ParamGrads, PA_INNER_ALPHA, PA_INNER_BETA, PA_OUTER_ALPHA,
    PA_OUTER_BETA,
};
use crate::nn::Tensor;

/// Smallest side accepted by the network.
pub const DEFAULT_DENSITY_SCALE: f64 = 1.5625;
pub const MIN_INPUT: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub crops_per_image: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub model: ModelConfig,
    /// Combination used in phase 2; `Average` gives the no-perspective baseline.
    pub phase2_mode: CombineMode,
    pub freeze_backbone_phase2: bool,
    /// Start the PA upsamplers from the phase-1 average upsamplers.
    pub phase2_copy_upsamplers: bool,
    /// Downsampled density cells are multiplied by this before the loss.
    /// 1.5625 is 100 per full-resolution pixel spread over an 8x8 cell.
    pub density_scale: f64,
    pub density: DensityKernelConfig,
    pub perspective: PerspectiveGtConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            epochs_phase1: 100,
            epochs_phase2: 150,
            batch_size: 1,
            crops_per_image: 9,
            seed: 0,
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            model: ModelConfig::default(),
            phase2_mode: CombineMode::Pa,
            freeze_backbone_phase2: false,
            phase2_copy_upsamplers: true,
            density_scale: DEFAULT_DENSITY_SCALE,
            density: DensityKernelConfig::default(),
            perspective: PerspectiveGtConfig::default(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "train.learning_rate",
    "train.momentum",
    "train.epochs_phase1",
    "train.epochs_phase2",
    "train.batch_size",
    "train.crops_per_image",
    "train.seed",
    "train.phase2_mode",
    "train.freeze_backbone_phase2",
    "train.phase2_copy_upsamplers",
    "norm.density_scale",
    "norm.perspective_max",
    "gt.knn_k",
    "gt.sigma_scale",
    "gt.fixed_sigma",
    "gt.perspective_linear",
    "ssim.window_size",
    "ssim.sigma",
    "ssim.c1",
    "ssim.c2",
];

fn parse_mode(s: &str) -> Result<CombineMode> {
    match s {
        "pa" => Ok(CombineMode::Pa),
        "average" => Ok(CombineMode::Average),
        other => Err(Error::Config(format!("unknown combine mode {other:?}"))),
    }
}

pub fn mode_name(m: CombineMode) -> &'static str {
    match m {
        CombineMode::Pa => "pa",
        CombineMode::Average => "average",
    }
}

impl TrainConfig {
    /// Every key understood by [`TrainConfig::from_kv`].
    pub fn known_keys() -> Vec<&'static str> {
        let mut k: Vec<&str> = TRAIN_KEYS.to_vec();
        k.extend_from_slice(LossWeights::KEYS);
        k.extend_from_slice(ModelConfig::keys());
        k
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(&Self::known_keys())?;
        let d = TrainConfig::default();
        let ssim = SsimConfig {
            window_size: kv.get_or("ssim.window_size", d.ssim.window_size)?,
            gaussian_sigma: kv.get_or("ssim.sigma", d.ssim.gaussian_sigma)?,
            c1: kv.get_opt("ssim.c1")?,
            c2: kv.get_opt("ssim.c2")?,
            ..d.ssim
        };
        let density = DensityKernelConfig {
            knn_k: kv.get_or("gt.knn_k", d.density.knn_k)?,
            sigma_scale: kv.get_or("gt.sigma_scale", d.density.sigma_scale)?,
            fixed_sigma: kv.get_opt("gt.fixed_sigma")?,
            ..d.density
        };
        let perspective = PerspectiveGtConfig {
            knn_k: density.knn_k,
            linear: kv.get_or("gt.perspective_linear", false)?,
            ..d.perspective
        };
        let cfg = TrainConfig {
            learning_rate: kv.get_or("train.learning_rate", d.learning_rate)?,
            momentum: kv.get_or("train.momentum", d.momentum)?,
            epochs_phase1: kv.get_or("train.epochs_phase1", d.epochs_phase1)?,
            epochs_phase2: kv.get_or("train.epochs_phase2", d.epochs_phase2)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            crops_per_image: kv.get_or("train.crops_per_image", d.crops_per_image)?,
            seed: kv.get_or("train.seed", d.seed)?,
            weights: LossWeights::from_kv(kv)?,
            ssim,
            model: ModelConfig::from_kv(kv)?,
            phase2_mode: parse_mode(kv.raw("train.phase2_mode").unwrap_or("pa"))?,
            freeze_backbone_phase2: kv.get_or("train.freeze_backbone_phase2", d.freeze_backbone_phase2)?,
            phase2_copy_upsamplers: kv.get_or("train.phase2_copy_upsamplers", d.phase2_copy_upsamplers)?,
            density_scale: kv.get_or("norm.density_scale", d.density_scale)?,
            density,
            perspective,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("train.learning_rate", self.learning_rate);
        kv.set("train.momentum", self.momentum);
        kv.set("train.epochs_phase1", self.epochs_phase1);
        kv.set("train.epochs_phase2", self.epochs_phase2);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.crops_per_image", self.crops_per_image);
        kv.set("train.seed", self.seed);
        kv.set("train.phase2_mode", mode_name(self.phase2_mode));
        kv.set("train.freeze_backbone_phase2", self.freeze_backbone_phase2);
        kv.set("train.phase2_copy_upsamplers", self.phase2_copy_upsamplers);
        kv.set("norm.density_scale", self.density_scale);
        kv.set("gt.knn_k", self.density.knn_k);
        kv.set("gt.sigma_scale", self.density.sigma_scale);
        if let Some(s) = self.density.fixed_sigma {
            kv.set("gt.fixed_sigma", s);
        }
        kv.set("gt.perspective_linear", self.perspective.linear);
        kv.set("ssim.window_size", self.ssim.window_size);
        kv.set("ssim.sigma", self.ssim.gaussian_sigma);
        if let Some(c) = self.ssim.c1 {
            kv.set("ssim.c1", c);
        }
        if let Some(c) = self.ssim.c2 {
            kv.set("ssim.c2", c);
        }
        self.weights.write_kv(&mut kv);
        self.model.write_kv(&mut kv);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.density_scale > 0.0) {
            return Err(Error::Config("density scale must be positive".into()));
        }
        self.weights.validate()?;
        self.ssim.validate()?;
        self.density.validate()?;
        self.model.validate()
    }
}

/// Scale factors between raw GT units and the units the network is trained in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub density_scale: f64,
    pub perspective_max: f64,
}

impl Normalization {
    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("norm.density_scale", self.density_scale);
        kv.set("norm.perspective_max", self.perspective_max);
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        Ok(Normalization {
            density_scale: kv.get_or("norm.density_scale", DEFAULT_DENSITY_SCALE)?,
            perspective_max: kv.get_or("norm.perspective_max", 1.0)?,
        })
    }
}

/// Seeded top-left corners of `n` half-width, half-height crops.
pub fn crop_offsets(scene: &AnnotatedScene, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if scene.width < 2 * MIN_INPUT || scene.height < 2 * MIN_INPUT {
        return Err(Error::InsufficientData(format!(
            "scene {} is {}x{}; crops need at least {}x{}",
            scene.id,
            scene.width,
            scene.height,
            2 * MIN_INPUT,
            2 * MIN_INPUT
        )));
    }
    let (cw, ch) = (scene.width / 2, scene.height / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| (rng.gen_range(0..=scene.width - cw), rng.gen_range(0..=scene.height - ch))).collect())
}

/// `n` half-width, half-height crops at seeded offsets. Heads are translated
/// and filtered to each crop; image, ROI and horizon follow the crop.
pub fn augment(scene: &AnnotatedScene, n: usize, seed: u64) -> Result<Vec<AnnotatedScene>> {
    let (cw, ch) = (scene.width / 2, scene.height / 2);
    crop_offsets(scene, n, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (x0, y0))| crop_scene(scene, x0, y0, cw, ch, format!("{}_crop{i}", scene.id)))
        .collect()
}

/// Sub-scene covering `[x0, x0 + w) x [y0, y0 + h)`.
pub fn crop_scene(scene: &AnnotatedScene, x0: usize, y0: usize, w: usize, h: usize, id: String) -> Result<AnnotatedScene> {
    let (fx, fy) = (x0 as f64, y0 as f64);
    let mut heads = Vec::new();
    let mut scales = scene.per_head_scale.as_ref().map(|_| Vec::new());
    for (i, &(x, y)) in scene.heads.iter().enumerate() {
        if x >= fx && x < fx + w as f64 && y >= fy && y < fy + h as f64 {
            heads.push((x - fx, y - fy));
            if let (Some(out), Some(src)) = (scales.as_mut(), scene.per_head_scale.as_ref()) {
                out.push(src[i]);
            }
        }
    }
    let roi = scene.roi.as_ref().map(|r| RoiMask {
        width: w,
        height: h,
        inside: (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| r.contains(x0 + x, y0 + y)).collect(),
    });
    let image = scene.image.as_ref().map(|im| im.crop(x0, y0, w, h)).transpose()?;
    Ok(AnnotatedScene {
        id,
        width: w,
        height: h,
        heads,
        roi,
        camera: scene.camera,
        horizon_rows: scene.horizon_rows.map(|r| r + fy),
        per_head_scale: scales,
        image,
    })
}

/// One network input with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub gts: GtBundle<f32>,
    pub count: f64,
}

/// Pad a map to the network's padded input size.
fn padded(map: &ValueMap<f64>) -> ValueMap<f64> {
    map.pad_to(map.width.next_multiple_of(MIN_INPUT), map.height.next_multiple_of(MIN_INPUT))
}

/// GT at 1/8, 1/16, 1/32 (density, sum) and 1/8, 1/16 (perspective, mean),
/// in training units.
pub fn gt_bundle(density: &ValueMap<f64>, perspective: &ValueMap<f64>, norm: &Normalization) -> Result<GtBundle<f32>> {
    let d = padded(density);
    let p = padded(perspective);
    let ds = |f| -> Result<Option<ValueMap<f32>>> {
        Ok(Some(downsample_map(&d, f, DownsampleMode::Sum)?.scale(norm.density_scale).cast()))
    };
    let ps = |f| -> Result<Option<ValueMap<f32>>> {
        Ok(Some(downsample_map(&p, f, DownsampleMode::Mean)?.scale(1.0 / norm.perspective_max).cast()))
    };
    Ok(GtBundle { density: [ds(8)?, ds(16)?, ds(32)?], perspective: [ps(8)?, ps(16)?] })
}

pub fn image_tensor(scene: &AnnotatedScene) -> Result<Tensor<f32>> {
    let img = scene.image.as_ref().ok_or_else(|| Error::Config(format!("scene {} has no image", scene.id)))?;
    Ok(Tensor::from_map(img))
}

/// Training samples for a set of scenes, plus the normalisation they were
/// built with and any warnings. Crops regenerate density from the cropped
/// heads; their perspective is cut from the parent scene's fitted map.
pub fn prepare_samples(
    scenes: &[AnnotatedScene],
    cfg: &TrainConfig,
) -> Result<(Vec<TrainSample>, Normalization, Vec<String>)> {
    if scenes.is_empty() {
        return Err(Error::InsufficientData("no training scenes".into()));
    }
    let persp: Vec<ValueMap<f64>> = scenes
        .par_iter()
        .map(|s| perspective_gt::<f64>(s, &cfg.perspective).map(|r| r.0))
        .collect::<Result<_>>()?;
    let pmax = persp.iter().map(|m| m.max_value()).fold(0.0f64, f64::max);
    let norm = Normalization { density_scale: cfg.density_scale, perspective_max: if pmax > 0.0 { pmax } else { 1.0 } };
    let per_scene: Vec<(Vec<TrainSample>, Option<String>)> = scenes
        .par_iter()
        .zip(&persp)
        .enumerate()
        .map(|(i, (scene, pmap))| -> Result<_> {
            let mut warning = None;
            let parts: Vec<(AnnotatedScene, ValueMap<f64>)> =
                match crop_offsets(scene, cfg.crops_per_image, derive_seed(cfg.seed, i as u64)) {
                    Ok(offsets) if !offsets.is_empty() => {
                        let (cw, ch) = (scene.width / 2, scene.height / 2);
                        offsets
                            .into_iter()
                            .enumerate()
                            .map(|(k, (x0, y0))| {
                                let c = crop_scene(scene, x0, y0, cw, ch, format!("{}_crop{k}", scene.id))?;
                                Ok((c, pmap.crop(x0, y0, cw, ch)?))
                            })
                            .collect::<Result<_>>()?
                    }
                    Ok(_) => vec![(scene.clone(), pmap.clone())],
                    Err(Error::InsufficientData(msg)) => {
                        warning = Some(format!("{msg}; training on the whole image"));
                        vec![(scene.clone(), pmap.clone())]
                    }
                    Err(e) => return Err(e),
                };
            let samples = parts
                .into_iter()
                .map(|(s, p)| {
                    let d = render_density_map::<f64>(&s, &cfg.density)?;
                    Ok(TrainSample { id: s.id.clone(), image: image_tensor(&s)?, gts: gt_bundle(&d, &p, &norm)?, count: s.count() as f64 })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((samples, warning))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (s, w) in per_scene {
        samples.extend(s);
        warnings.extend(w);
    }
    Ok((samples, norm, warnings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub phase: u8,
    pub epoch: usize,
    /// Per-term losses averaged over the epoch's samples.
    pub terms: LossTerms,
    pub total: f64,
    /// Count MAE of the pre-update predictions seen during the epoch.
    pub mae: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        let t = &self.terms;
        format!(
            "phase={} epoch={} total={:.9e} l_d={:.9e} l_d1={:.9e} l_d2={:.9e} l_d3={:.9e} l_p={:.9e} l_ps={:.9e} mae={:.6}",
            self.phase, self.epoch, self.total, t.d, t.d1, t.d2, t.d3, t.p, t.ps, self.mae
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Content hash of the final parameters.
    pub checkpoint_id: String,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

/// FNV-1a over the parameter ids and value bits.
pub fn checkpoint_id(model: &PacnnModel<f32>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for p in &model.params.params {
        p.id.bytes().for_each(&mut eat);
        for v in &p.tensor.data {
            v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
        }
    }
    format!("{h:016x}")
}

struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn new(model: &PacnnModel<f32>) -> Self {
        Sgd { velocity: model.params.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect() }
    }

    /// `v = mu * v + g; theta -= lr * v` for every trainable tensor.
    fn step(&mut self, model: &mut PacnnModel<f32>, grads: &ParamGrads<f32>, trainable: &[bool], lr: f32, mu: f32) {
        for (i, p) in model.params.params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            for ((theta, v), g) in p.tensor.data.iter_mut().zip(&mut self.velocity[i]).zip(&grads.0[i]) {
                *v = mu * *v + g;
                *theta -= lr * *v;
            }
        }
    }
}

/// Train-time scalar logging hook.
pub type LogFn<'a> = &'a mut dyn FnMut(&EpochLog);

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut PacnnModel<f32>,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    phase: u8,
    epochs: usize,
    mode: CombineMode,
    objective: Objective,
    trainable: &[bool],
    log: &mut Option<LogFn>,
) -> Result<Vec<EpochLog>> {
    let mut opt = Sgd::new(model);
    let mut logs = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (lr, mu) = (cfg.learning_rate as f32, cfg.momentum as f32);
    let scale = cfg.density_scale;
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ((phase as u64) << 32) | epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let (mut total, mut abs_err) = (0.0f64, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = ParamGrads::zeros_like(&model.params);
            for &i in batch {
                let s = &samples[i];
                let (out, cache) = model.forward_cached(&s.image, mode)?;
                let loss = composite_loss(&out, &s.gts, &cfg.weights, &cfg.ssim, objective)?;
                if !loss.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("phase {phase}, sample {}: loss {} terms {:?}", s.id, loss.total, loss.terms),
                    });
                }
                let g = model.backward(&cache, &loss.grads)?;
                for (a, b) in acc.0.iter_mut().zip(&g.0) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
                }
                total += loss.total;
                let t = loss.terms;
                sum.d += t.d;
                sum.d1 += t.d1;
                sum.d2 += t.d2;
                sum.d3 += t.d3;
                sum.p += t.p;
                sum.ps += t.ps;
                abs_err += (out.d_e.total() / scale - s.count).abs();
            }
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f32;
                acc.0.iter_mut().flatten().for_each(|v| *v *= inv);
            }
            opt.step(model, &acc, trainable, lr, mu);
            if model.params.params.iter().any(|p| p.tensor.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { epoch, detail: format!("phase {phase}: non-finite parameters") });
            }
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            phase,
            epoch,
            terms: LossTerms {
                p: sum.p / n,
                d: sum.d / n,
                ps: sum.ps / n,
                d1: sum.d1 / n,
                d2: sum.d2 / n,
                d3: sum.d3 / n,
            },
            total: total / n,
            mae: abs_err / n,
        };
        if let Some(f) = log.as_mut() {
            f(&entry);
        }
        logs.push(entry);
    }
    Ok(logs)
}

/// Fresh model for a training run.
pub fn init_model(cfg: &TrainConfig) -> Result<PacnnModel<f32>> {
    PacnnModel::new(cfg.model.clone())
}

/// Phase 1: average combination, density terms only.
pub fn train_phase1(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut log: Option<LogFn>,
) -> Result<(PacnnModel<f32>, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    let start = Instant::now();
    let mut model = init_model(cfg)?;
    let trainable: Vec<bool> = model.params.params.iter().map(|p| p.learnable).collect();
    let epochs = run_phase(
        &mut model,
        samples,
        cfg,
        1,
        cfg.epochs_phase1,
        CombineMode::Average,
        Objective::DensityOnly,
        &trainable,
        &mut log,
    )?;
    let report = TrainReport {
        epochs,
        checkpoint_id: checkpoint_id(&model),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    Ok((model, report))
}

/// Operating point of the PA layers before phase 2: `alpha = 1`, `beta` at
/// the mean GT perspective of the first training sample.
pub fn init_pa_layers(model: &mut PacnnModel<f32>, first: &TrainSample, copy_upsamplers: bool) -> Result<()> {
    let mean = |m: &Option<ValueMap<f32>>| m.as_ref().map_or(0.0, |m| m.mean()) as f32;
    model.params.set_scalar(PA_OUTER_ALPHA, 1.0)?;
    model.params.set_scalar(PA_INNER_ALPHA, 1.0)?;
    model.params.set_scalar(PA_OUTER_BETA, mean(&first.gts.perspective[0]))?;
    model.params.set_scalar(PA_INNER_BETA, mean(&first.gts.perspective[1]))?;
    if copy_upsamplers {
        for (src, dst) in [("avg.up3", "pa.up3"), ("avg.up2", "pa.up2")] {
            let data = model.params.get(src).expect("upsampler").tensor.data.clone();
            model.params.get_mut(dst).expect("upsampler").tensor.data = data;
        }
    }
    Ok(())
}

/// Phase 2 from a phase-1 model. With `phase2_mode = Average` this continues
/// the density-only objective instead, which is the no-perspective baseline.
pub fn train_phase2(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    warm_start: &PacnnModel<f32>,
    mut log: Option<LogFn>,
) -> Result<(PacnnModel<f32>, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    let start = Instant::now();
    let mut model = warm_start.clone();
    let mut epochs = Vec::new();
    if cfg.epochs_phase2 > 0 {
        let (mode, objective) = match cfg.phase2_mode {
            CombineMode::Pa => {
                init_pa_layers(&mut model, &samples[0], cfg.phase2_copy_upsamplers)?;
                (CombineMode::Pa, Objective::Full)
            }
            CombineMode::Average => (CombineMode::Average, Objective::DensityOnly),
        };
        let trainable: Vec<bool> = model
            .params
            .params
            .iter()
            .map(|p| p.learnable && !(cfg.freeze_backbone_phase2 && p.id.starts_with("block")))
            .collect();
        epochs = run_phase(&mut model, samples, cfg, 2, cfg.epochs_phase2, mode, objective, &trainable, &mut log)?;
    }
    let report = TrainReport {
        epochs,
        checkpoint_id: checkpoint_id(&model),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_dataset, SceneConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            model: crate::checks::tiny_model_config(1),
            crops_per_image: 2,
            epochs_phase1: 2,
            epochs_phase2: 2,
            learning_rate: 1e-7,
            ..Default::default()
        }
    }

    fn scenes(n: usize) -> Vec<AnnotatedScene> {
        generate_dataset(&SceneConfig::default(), 5, n).unwrap()
    }

    #[test]
    fn augment_zero_and_small() {
        let s = &scenes(1)[0];
        assert!(augment(s, 0, 1).unwrap().is_empty());
        let tiny = AnnotatedScene::new("t", 40, 80, vec![]);
        assert!(matches!(augment(&tiny, 3, 1), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn crops_are_quarter_size_and_heads_contained() {
        let s = &scenes(1)[0];
        let crops = augment(s, 50, 9).unwrap();
        assert_eq!(crops.len(), 50);
        let offsets = crop_offsets(s, 50, 9).unwrap();
        for (c, &(x0, y0)) in crops.iter().zip(&offsets) {
            assert_eq!((c.width, c.height), (s.width / 2, s.height / 2));
            c.validate().unwrap();
            let (x0, y0) = (x0 as f64, y0 as f64);
            for &(x, y) in &c.heads {
                assert!(s.heads.contains(&(x + x0, y + y0)));
            }
            let inside = s
                .heads
                .iter()
                .filter(|&&(x, y)| x >= x0 && x < x0 + c.width as f64 && y >= y0 && y < y0 + c.height as f64)
                .count();
            assert_eq!(inside, c.count());
        }
    }

    #[test]
    fn empty_crop_is_valid() {
        let mut s = scenes(1)[0].clone();
        s.heads = vec![(1.0, 1.0)];
        s.per_head_scale = Some(vec![1.0]);
        let c = crop_scene(&s, 32, 32, 32, 32, "c".into()).unwrap();
        assert_eq!(c.count(), 0);
        c.validate().unwrap();
    }

    #[test]
    fn bundle_preserves_mass() {
        let sc = scenes(3);
        let cfg = small_cfg();
        let (samples, norm, warnings) = prepare_samples(&sc, &cfg).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(samples.len(), 6);
        for s in &samples {
            for m in s.gts.density.iter().flatten() {
                assert!((m.total() / norm.density_scale - s.count).abs() < 1e-3 * (1.0 + s.count));
            }
            let pmax = s.gts.perspective.iter().flatten().map(|m| m.max_value()).fold(0.0f32, f32::max);
            assert!(pmax <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let cfg = TrainConfig { learning_rate: 0.0, ..small_cfg() };
        let (samples, _, _) = prepare_samples(&scenes(2), &cfg).unwrap();
        let init = init_model(&cfg).unwrap();
        let (m, rep) = train_phase1(&samples, &cfg, None).unwrap();
        assert_eq!(m.params, init.params);
        let (a, b) = (rep.epochs[0].total, rep.epochs[1].total);
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn phase2_zero_epochs_returns_warm_start() {
        let cfg = small_cfg();
        let (samples, _, _) = prepare_samples(&scenes(2), &cfg).unwrap();
        let (m1, _) = train_phase1(&samples, &cfg, None).unwrap();
        let (m2, rep) = train_phase2(&samples, &TrainConfig { epochs_phase2: 0, ..cfg }, &m1, None).unwrap();
        assert_eq!(m2.params, m1.params);
        assert!(rep.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg();
        let (samples, _, _) = prepare_samples(&scenes(2), &cfg).unwrap();
        let run = || {
            let (m1, r1) = train_phase1(&samples, &cfg, None).unwrap();
            let (m2, r2) = train_phase2(&samples, &cfg, &m1, None).unwrap();
            (checkpoint_id(&m2), r1.epochs, r2.epochs)
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.2.iter().all(|e| e.total.is_finite()));
    }

    #[test]
    fn frozen_backbone_stays_fixed() {
        let cfg = TrainConfig { freeze_backbone_phase2: true, ..small_cfg() };
        let (samples, _, _) = prepare_samples(&scenes(2), &cfg).unwrap();
        let (m1, _) = train_phase1(&samples, &cfg, None).unwrap();
        let (m2, _) = train_phase2(&samples, &cfg, &m1, None).unwrap();
        for (a, b) in m1.params.params.iter().zip(&m2.params.params) {
            if a.id.starts_with("block") {
                assert_eq!(a.tensor.data, b.tensor.data, "{}", a.id);
            }
        }
        assert_ne!(m1.params.get("head1.w").unwrap().tensor.data, m2.params.get("head1.w").unwrap().tensor.data);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig { learning_rate: 1e12, ..small_cfg() };
        let (samples, _, _) = prepare_samples(&scenes(2), &cfg).unwrap();
        assert!(matches!(train_phase1(&samples, &cfg, None), Err(Error::Divergence { .. })));
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig { phase2_mode: CombineMode::Average, seed: 77, ..small_cfg() };
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let mut kv = cfg.to_kv();
        kv.set("train.bogus", 1);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }
}
