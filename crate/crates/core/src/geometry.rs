//! Pinhole perspective geometry and the synthetic crowd-scene generator.
//!
//! Image rows grow downward. A head observed at camera-plane coordinate
//! `y_head` (measured down from the horizon line) sits on image row
//! `y_head - horizon_rows`, so the horizon lies `horizon_rows` rows above the
//! top of the frame. The focal length `f` is expressed in pixels per unit of
//! the ratio `f / depth`; only ratios reach the perspective value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::map::ValueMap;
use crate::scalar::Real;

/// Focal length, camera height `C` and assumed person height `H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<T = f64> {
    pub focal_length: T,
    pub camera_height: T,
    pub person_height: T,
}

pub const DEFAULT_PERSON_HEIGHT: f64 = 1.75;

impl<T: Real> CameraModel<T> {
    pub fn new(focal_length: T, camera_height: T, person_height: T) -> Result<Self> {
        let cam = CameraModel { focal_length, camera_height, person_height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.focal_length, self.camera_height, self.person_height]
            .iter()
            .all(|v| v.is_finite() && *v > T::zero());
        if !all_positive {
            return Err(Error::Domain(format!("camera fields must be positive: {self:?}")));
        }
        if self.person_height >= self.camera_height {
            return Err(Error::Domain(format!(
                "person height {} must be below camera height {}",
                self.person_height, self.camera_height
            )));
        }
        Ok(())
    }

    /// `C - H`, the head-plane height below the camera.
    #[inline]
    pub fn head_drop(&self) -> T {
        self.camera_height - self.person_height
    }
}

/// Where a person of height `H` at a given depth lands on the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPerson<T = f64> {
    pub y_head: T,
    pub y_feet: T,
    pub pixel_height: T,
    pub depth: T,
}

pub fn project_person<T: Real>(camera: &CameraModel<T>, depth: T) -> Result<ProjectedPerson<T>> {
    if !(depth > T::zero()) || !depth.is_finite() {
        return Err(Error::Domain(format!("depth must be positive, got {depth}")));
    }
    camera.validate()?;
    let f = camera.focal_length;
    let y_head = f * camera.head_drop() / depth;
    let y_feet = f * camera.camera_height / depth;
    Ok(ProjectedPerson { y_head, y_feet, pixel_height: y_feet - y_head, depth })
}

/// Pixels per meter at head row `y_head`: `y_head / (C - H)`.
pub fn perspective_value<T: Real>(camera: &CameraModel<T>, y_head: T) -> Result<T> {
    camera.validate()?;
    Ok(y_head / camera.head_drop())
}

/// Depth at which a head projects to `y_head`; inverse of the head equation.
pub fn depth_for_head_row<T: Real>(camera: &CameraModel<T>, y_head: T) -> Result<T> {
    camera.validate()?;
    if !(y_head > T::zero()) {
        return Err(Error::Domain(format!("head row {y_head} is at or above the horizon")));
    }
    Ok(camera.focal_length * camera.head_drop() / y_head)
}

/// Binary region-of-interest mask, row-major, same size as the scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    pub width: usize,
    pub height: usize,
    pub inside: Vec<bool>,
}

impl RoiMask {
    pub fn full(width: usize, height: usize) -> Self {
        RoiMask { width, height, inside: vec![true; width * height] }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.inside[y * self.width + x]
    }

    /// Majority-rule reduction to a `factor`-downsampled grid.
    pub fn downsample(&self, factor: usize) -> RoiMask {
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut votes = vec![0usize; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.contains(x, y) {
                    votes[(y / factor) * w + x / factor] += 1;
                }
            }
        }
        let need = factor * factor;
        RoiMask { width: w, height: h, inside: votes.into_iter().map(|v| 2 * v > need).collect() }
    }
}

/// An image with head-center annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedScene {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Head centers `(x, y)` in pixel coordinates.
    pub heads: Vec<(f64, f64)>,
    pub roi: Option<RoiMask>,
    pub camera: Option<CameraModel<f64>>,
    /// Rows between the horizon and the top image row (synthetic scenes).
    pub horizon_rows: Option<f64>,
    /// Rendered head radius per head (synthetic scenes).
    pub per_head_scale: Option<Vec<f64>>,
    pub image: Option<ValueMap<f32>>,
}

impl AnnotatedScene {
    pub fn new(id: impl Into<String>, width: usize, height: usize, heads: Vec<(f64, f64)>) -> Self {
        AnnotatedScene {
            id: id.into(),
            width,
            height,
            heads,
            roi: None,
            camera: None,
            horizon_rows: None,
            per_head_scale: None,
            image: None,
        }
    }

    pub fn count(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("scene {} has zero area", self.id)));
        }
        for &(x, y) in &self.heads {
            if !(x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64) {
                return Err(Error::Domain(format!(
                    "scene {}: head ({x}, {y}) outside {}x{}",
                    self.id, self.width, self.height
                )));
            }
        }
        if let Some(roi) = &self.roi {
            if roi.width != self.width || roi.height != self.height {
                return Err(Error::Shape(format!("scene {}: roi size mismatch", self.id)));
            }
        }
        if let Some(s) = &self.per_head_scale {
            if s.len() != self.heads.len() {
                return Err(Error::Shape(format!("scene {}: per-head scale length", self.id)));
            }
        }
        if let Some(img) = &self.image {
            if img.width != self.width || img.height != self.height {
                return Err(Error::Shape(format!("scene {}: image size mismatch", self.id)));
            }
        }
        Ok(())
    }

    /// True perspective value of an image row, when the scene carries a camera.
    pub fn true_perspective(&self, row: f64) -> Option<f64> {
        let cam = self.camera.as_ref()?;
        let horizon = self.horizon_rows?;
        perspective_value(cam, row + horizon).ok()
    }
}

/// Vertical distribution of head positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Uniform on the ground plane: row density falls as `1 / p(y)^2`, so far
    /// (small) people are packed more densely in the image.
    GroundUniform,
    /// Uniform over image rows.
    ImageUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub camera: CameraModel<f64>,
    pub horizon_rows: f64,
    pub placement: Placement,
    /// Blob radius is `radius_gain * p(y)`.
    pub radius_gain: f64,
    pub blob_amplitude: f64,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            count_min: 5,
            count_max: 50,
            camera: CameraModel {
                focal_length: 500.0,
                camera_height: 33.75,
                person_height: DEFAULT_PERSON_HEIGHT,
            },
            horizon_rows: 16.0,
            placement: Placement::GroundUniform,
            radius_gain: 2.0,
            blob_amplitude: 1.0,
            noise_std: 0.05,
        }
    }
}

const SCENE_KEYS: &[&str] = &[
    "width",
    "height",
    "count_min",
    "count_max",
    "focal_length",
    "camera_height",
    "person_height",
    "horizon_rows",
    "placement",
    "radius_gain",
    "blob_amplitude",
    "noise_std",
];

impl SceneConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(SCENE_KEYS)?;
        let d = SceneConfig::default();
        let placement = match kv.raw("placement").unwrap_or("ground_uniform") {
            "ground_uniform" => Placement::GroundUniform,
            "image_uniform" => Placement::ImageUniform,
            other => return Err(Error::Config(format!("unknown placement {other}"))),
        };
        let cfg = SceneConfig {
            width: kv.get_or("width", d.width)?,
            height: kv.get_or("height", d.height)?,
            count_min: kv.get_or("count_min", d.count_min)?,
            count_max: kv.get_or("count_max", d.count_max)?,
            camera: CameraModel {
                focal_length: kv.get_or("focal_length", d.camera.focal_length)?,
                camera_height: kv.get_or("camera_height", d.camera.camera_height)?,
                person_height: kv.get_or("person_height", d.camera.person_height)?,
            },
            horizon_rows: kv.get_or("horizon_rows", d.horizon_rows)?,
            placement,
            radius_gain: kv.get_or("radius_gain", d.radius_gain)?,
            blob_amplitude: kv.get_or("blob_amplitude", d.blob_amplitude)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("width", self.width);
        kv.set("height", self.height);
        kv.set("count_min", self.count_min);
        kv.set("count_max", self.count_max);
        kv.set("focal_length", self.camera.focal_length);
        kv.set("camera_height", self.camera.camera_height);
        kv.set("person_height", self.camera.person_height);
        kv.set("horizon_rows", self.horizon_rows);
        kv.set(
            "placement",
            match self.placement {
                Placement::GroundUniform => "ground_uniform",
                Placement::ImageUniform => "image_uniform",
            },
        );
        kv.set("radius_gain", self.radius_gain);
        kv.set("blob_amplitude", self.blob_amplitude);
        kv.set("noise_std", self.noise_std);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene must have non-zero area".into()));
        }
        if self.count_min > self.count_max {
            return Err(Error::Config(format!(
                "empty count range [{}, {}]",
                self.count_min, self.count_max
            )));
        }
        if !(self.horizon_rows > 0.0) {
            return Err(Error::Config("horizon_rows must be positive".into()));
        }
        if !(self.radius_gain > 0.0) || self.noise_std < 0.0 {
            return Err(Error::Config("radius_gain must be positive, noise_std non-negative".into()));
        }
        self.camera.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Perspective value at image row `row`.
    pub fn perspective_at_row(&self, row: f64) -> f64 {
        (row + self.horizon_rows) / self.camera.head_drop()
    }
}

/// Deterministic synthetic scene: head positions, per-head scales and a
/// rendered single-channel image, all fixed by `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<AnnotatedScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(config.count_min..=config.count_max);
    let w = config.width as f64;
    let h = config.height as f64;
    let top = config.horizon_rows;
    let bottom = config.horizon_rows + h;

    let mut heads = Vec::with_capacity(count);
    let mut scales = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen();
        let y_head = match config.placement {
            // Inverse CDF of a 1/y^2 density on [top, bottom).
            Placement::GroundUniform => 1.0 / (1.0 / top - u * (1.0 / top - 1.0 / bottom)),
            Placement::ImageUniform => top + u * h,
        };
        let row = (y_head - top).clamp(0.0, h - 1e-9);
        let x = (rng.gen::<f64>() * w).min(w - 1e-9);
        // The depth is implied by the row; only the resulting scale matters here.
        let _depth = depth_for_head_row(&config.camera, row + top)?;
        heads.push((x, row));
        scales.push(config.radius_gain * config.perspective_at_row(row));
    }

    let mut img = vec![0.0f64; config.width * config.height];
    for v in img.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = n * config.noise_std;
    }
    for (&(hx, hy), &radius) in heads.iter().zip(&scales) {
        let s = (radius * 0.5).max(0.25);
        let reach = (3.0 * s).ceil() as i64 + 1;
        let cx = hx.floor() as i64;
        let cy = hy.floor() as i64;
        let inv = 1.0 / (2.0 * s * s);
        for py in (cy - reach).max(0)..=(cy + reach).min(config.height as i64 - 1) {
            for px in (cx - reach).max(0)..=(cx + reach).min(config.width as i64 - 1) {
                let dx = px as f64 + 0.5 - hx;
                let dy = py as f64 + 0.5 - hy;
                img[py as usize * config.width + px as usize] +=
                    config.blob_amplitude * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }

    let scene = AnnotatedScene {
        id: format!("scene_{seed:08}"),
        width: config.width,
        height: config.height,
        heads,
        roi: None,
        camera: Some(config.camera),
        horizon_rows: Some(config.horizon_rows),
        per_head_scale: Some(scales),
        image: Some(ValueMap {
            width: config.width,
            height: config.height,
            values: img.into_iter().map(|v| v as f32).collect(),
        }),
    };
    scene.validate()?;
    Ok(scene)
}

/// Per-scene seed for scene `index` of a dataset generated from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` scenes generated in parallel; output order and content depend only on
/// `(config, seed, n)`.
pub fn generate_dataset(config: &SceneConfig, seed: u64, n: usize) -> Result<Vec<AnnotatedScene>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = generate_scene(config, derive_seed(seed, i as u64))?;
            s.id = format!("scene_{i:05}");
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel<f64> {
        CameraModel::new(100.0, 10.0, 1.75).unwrap()
    }

    #[test]
    fn project_person_reference_values() {
        let p = project_person(&cam(), 100.0).unwrap();
        // Independent scalar calculation of the similar-triangle rows.
        let (f, c, h, z) = (100.0f64, 10.0f64, 1.75f64, 100.0f64);
        assert!((p.y_head - f * (c - h) / z).abs() < 1e-12);
        assert!((p.y_head - 8.25).abs() < 1e-12);
        assert!((p.y_feet - 10.0).abs() < 1e-12);
        assert!((p.pixel_height - 1.75).abs() < 1e-12);
    }

    #[test]
    fn doubling_depth_halves_height() {
        let a = project_person(&cam(), 37.0).unwrap();
        let b = project_person(&cam(), 74.0).unwrap();
        assert!((a.pixel_height - 2.0 * b.pixel_height).abs() < 1e-12);
    }

    #[test]
    fn height_over_head_row_is_constant() {
        let c = cam();
        for depth in [0.5, 3.0, 40.0, 1e4] {
            let p = project_person(&c, depth).unwrap();
            let ratio = p.pixel_height / p.y_head;
            assert!((ratio - 1.75 / 8.25).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_depth_is_domain_error() {
        assert!(matches!(project_person(&cam(), 0.0), Err(Error::Domain(_))));
        assert!(matches!(project_person(&cam(), -3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn perspective_value_examples() {
        let c = CameraModel::new(1.0, 2.75, 1.75).unwrap();
        assert_eq!(perspective_value(&c, 5.0).unwrap(), 5.0);
        let p = project_person(&cam(), 100.0).unwrap();
        let pv = perspective_value(&cam(), p.y_head).unwrap();
        assert!((pv - 1.0).abs() < 1e-12);
        assert!((pv - p.pixel_height / 1.75).abs() < 1e-12);
        assert_eq!(perspective_value(&cam(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn camera_below_person_rejected() {
        assert!(CameraModel::new(100.0, 1.5, 1.75).is_err());
        let bad = CameraModel { focal_length: 1.0, camera_height: 1.75, person_height: 1.75 };
        assert!(matches!(perspective_value(&bad, 3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_count_range() {
        let cfg = SceneConfig { count_min: 5, count_max: 5, ..Default::default() };
        for seed in 0..5 {
            assert_eq!(generate_scene(&cfg, seed).unwrap().count(), 5);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 42).unwrap();
        let b = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 43).unwrap();
        assert_ne!(a.heads, c.heads);
    }

    #[test]
    fn bad_configs_rejected() {
        let zero = SceneConfig { width: 0, ..Default::default() };
        assert!(matches!(generate_scene(&zero, 1), Err(Error::Config(_))));
        let empty = SceneConfig { count_min: 6, count_max: 5, ..Default::default() };
        assert!(matches!(generate_scene(&empty, 1), Err(Error::Config(_))));
    }

    #[test]
    fn scales_are_monotone_in_row() {
        // Brute-force pairwise scan.
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            let scales = s.per_head_scale.as_ref().unwrap();
            for i in 0..s.heads.len() {
                for j in 0..s.heads.len() {
                    if s.heads[i].1 < s.heads[j].1 {
                        assert!(scales[i] <= scales[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn scene_config_kv_round_trip() {
        let cfg = SceneConfig { placement: Placement::ImageUniform, noise_std: 0.0, ..Default::default() };
        assert_eq!(SceneConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut kv = cfg.to_kv();
        kv.set("bogus", 1);
        assert!(SceneConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn roi_majority_downsample() {
        let mut m = RoiMask::full(4, 2);
        m.inside[0] = false;
        m.inside[1] = false;
        m.inside[4] = false;
        let d = m.downsample(2);
        assert_eq!(d.inside, vec![false, true]);
    }

    proptest::proptest! {
        #[test]
        fn head_identity_holds(
            f in 1.0f64..2000.0,
            c in 2.0f64..60.0,
            hfrac in 0.05f64..0.95,
            depth in 0.1f64..1e4,
        ) {
            let cam = CameraModel::new(f, c, c * hfrac).unwrap();
            let p = project_person(&cam, depth).unwrap();
            let lhs = p.pixel_height * cam.head_drop();
            let rhs = p.y_head * cam.person_height;
            proptest::prop_assert!(((lhs - rhs) / rhs).abs() <= 1e-12);
            proptest::prop_assert!(p.y_feet > p.y_head);
        }

        #[test]
        fn perspective_monotone_and_focal_invariant(
            c in 2.0f64..60.0,
            y1 in 0.0f64..500.0,
            dy in 1e-6f64..100.0,
            f1 in 1.0f64..100.0,
            f2 in 100.0f64..5000.0,
        ) {
            let a = CameraModel::new(f1, c, 1.75f64.min(c * 0.5)).unwrap();
            let b = CameraModel { focal_length: f2, ..a };
            let p1 = perspective_value(&a, y1).unwrap();
            proptest::prop_assert!(perspective_value(&a, y1 + dy).unwrap() > p1);
            proptest::prop_assert_eq!(p1, perspective_value(&b, y1).unwrap());
        }
    }
}
