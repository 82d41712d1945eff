//! Multi-scale density network with perspective-aware combination.
//!
//! Topology (input `H x W`, both divisible by 32):
//!
//! ```text
//! image -> block1 -> pool -> block2 -> pool -> block3 -> pool -> block4 = F8   (H/8)
//!   F8 -> 1x1 -> relu                              = d_e1 (H/8)
//!   F8 -> pool = F16 -> conv x n -> 1x1 -> relu    = d_e2 (H/16)
//!            branch -> pool -> conv -> 1x1 -> relu = d_e3 (H/32)
//!   F16 -> conv -> conv -> 1x1                     = p_es (H/16)
//!   p_es -> up2x                                   = p_e  (H/8)
//! ```
//!
//! Average mode: `d_e = (d_e1 + Up((d_e2 + Up(d_e3)) / 2)) / 2`.
//! PA mode: `d_es = W_s * d_e2 + (1 - W_s) * Up(d_e3)` and
//! `d_e = W * d_e1 + (1 - W) * Up(d_es)`, with
//! `W = sigmoid(alpha * (p - beta))` computed from `p_es` and `p_e`.
//! Every use of `Up` has its own kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{shape_err, Error, Result};
use crate::map::ValueMap;
use crate::nn::{
    bilinear_kernel, conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward,
    read_checkpoint, relu_backward, relu_forward, sigmoid, upsample2x_backward, upsample2x_forward,
    write_checkpoint, Conv2dSpec, LayerParam, PoolIndices, Tensor,
};
use crate::scalar::Real;

/// Sigmoid weighting parameters of one PA layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaWeightParams<T> {
    pub alpha: T,
    pub beta: T,
}

/// Values cached by [`pa_combine_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PaCache<T> {
    pub d_fine: ValueMap<T>,
    pub d_coarse: ValueMap<T>,
    pub p: ValueMap<T>,
    pub w: ValueMap<T>,
    pub params: PaWeightParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaGrads<T> {
    pub d_fine: ValueMap<T>,
    pub d_coarse: ValueMap<T>,
    pub p: ValueMap<T>,
    pub alpha: T,
    pub beta: T,
}

/// `w = sigmoid(alpha * (p - beta))`, `d_out = w * d_fine + (1 - w) * d_coarse`.
pub fn pa_combine_forward<T: Real>(
    d_fine: &ValueMap<T>,
    d_coarse: &ValueMap<T>,
    p: &ValueMap<T>,
    pw: PaWeightParams<T>,
) -> Result<(ValueMap<T>, ValueMap<T>, PaCache<T>)> {
    d_fine.check_same_size(d_coarse, "pa combine: fine vs coarse")?;
    d_fine.check_same_size(p, "pa combine: density vs perspective")?;
    let w = p.map(|pv| sigmoid(pw.alpha * (pv - pw.beta)));
    let out = ValueMap {
        width: d_fine.width,
        height: d_fine.height,
        values: w
            .values
            .iter()
            .zip(d_fine.values.iter().zip(&d_coarse.values))
            .map(|(&wj, (&f, &c))| wj * f + (T::one() - wj) * c)
            .collect(),
    };
    let cache = PaCache {
        d_fine: d_fine.clone(),
        d_coarse: d_coarse.clone(),
        p: p.clone(),
        w: w.clone(),
        params: pw,
    };
    Ok((out, w, cache))
}

/// Chain rule through one PA layer:
///
/// - `dL/d alpha = sum_j g_j (f_j - c_j) (p_j - beta) w_j (1 - w_j)`
/// - `dL/d beta  = sum_j g_j (f_j - c_j) (-alpha) w_j (1 - w_j)`
/// - `dL/d f_j = g_j w_j`, `dL/d c_j = g_j (1 - w_j)`,
///   `dL/d p_j = g_j alpha w_j (1 - w_j) (f_j - c_j)`.
pub fn pa_combine_backward<T: Real>(upstream: &ValueMap<T>, cache: Option<&PaCache<T>>) -> Result<PaGrads<T>> {
    let cache = cache.ok_or_else(|| Error::State("pa backward called before forward".into()))?;
    upstream.check_same_size(&cache.w, "pa backward upstream")?;
    let PaWeightParams { alpha, beta } = cache.params;
    let n = upstream.len();
    let mut gf = Vec::with_capacity(n);
    let mut gc = Vec::with_capacity(n);
    let mut gp = Vec::with_capacity(n);
    let (mut ga, mut gb) = (0.0f64, 0.0f64);
    for j in 0..n {
        let g = upstream.values[j];
        let w = cache.w.values[j];
        let diff = cache.d_fine.values[j] - cache.d_coarse.values[j];
        let slope = w * (T::one() - w);
        gf.push(g * w);
        gc.push(g * (T::one() - w));
        let common = g * diff * slope;
        gp.push(common * alpha);
        ga += (common * (cache.p.values[j] - beta)).as_f64();
        gb -= (common * alpha).as_f64();
    }
    let (w, h) = (upstream.width, upstream.height);
    Ok(PaGrads {
        d_fine: ValueMap { width: w, height: h, values: gf },
        d_coarse: ValueMap { width: w, height: h, values: gc },
        p: ValueMap { width: w, height: h, values: gp },
        alpha: T::of(ga),
        beta: T::of(gb),
    })
}

/// A PA weighting layer that keeps its forward cache.
#[derive(Debug, Clone, Default)]
pub struct PaLayer<T> {
    cache: Option<PaCache<T>>,
}

impl<T: Real> PaLayer<T> {
    pub fn new() -> Self {
        PaLayer { cache: None }
    }

    pub fn forward(
        &mut self,
        d_fine: &ValueMap<T>,
        d_coarse: &ValueMap<T>,
        p: &ValueMap<T>,
        pw: PaWeightParams<T>,
    ) -> Result<(ValueMap<T>, ValueMap<T>)> {
        let (out, w, cache) = pa_combine_forward(d_fine, d_coarse, p, pw)?;
        self.cache = Some(cache);
        Ok((out, w))
    }

    pub fn backward(&self, upstream: &ValueMap<T>) -> Result<PaGrads<T>> {
        pa_combine_backward(upstream, self.cache.as_ref())
    }
}

/// `(d1 + up((d2 + up(d3)) / 2)) / 2` with a caller-supplied 2x upsampler.
pub fn combine_average<T: Real>(
    d_e1: &ValueMap<T>,
    d_e2: &ValueMap<T>,
    d_e3: &ValueMap<T>,
    upsampler: impl Fn(&ValueMap<T>) -> Result<ValueMap<T>>,
) -> Result<ValueMap<T>> {
    let half = T::of(0.5);
    let u3 = upsampler(d_e3)?;
    d_e2.check_same_size(&u3, "average combine: d_e2 vs Up(d_e3)")?;
    let mid = zip_map(d_e2, &u3, |a, b| (a + b) * half);
    let u2 = upsampler(&mid)?;
    d_e1.check_same_size(&u2, "average combine: d_e1 vs Up(mid)")?;
    Ok(zip_map(d_e1, &u2, |a, b| (a + b) * half))
}

fn zip_map<T: Real>(a: &ValueMap<T>, b: &ValueMap<T>, f: impl Fn(T, T) -> T) -> ValueMap<T> {
    ValueMap {
        width: a.width,
        height: a.height,
        values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// How the three density heads are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Average,
    Pa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channel width of each of the four backbone blocks.
    pub block_widths: [usize; 4],
    /// 3x3 conv layers in each backbone block.
    pub block_depths: [usize; 4],
    /// 3x3 convs on the 1/16 density branch.
    pub density_branch_convs: usize,
    /// Width of the two 3x3 perspective-branch convs.
    pub perspective_width: usize,
    /// Zero-pad inputs whose sides are not multiples of 32.
    pub pad_input: bool,
    /// Initial bias of the three rectified density heads; positive so the
    /// heads start active.
    pub head_bias_init: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            block_widths: [16, 32, 64, 64],
            block_depths: [2, 2, 3, 3],
            density_branch_convs: 1,
            perspective_width: 32,
            pad_input: true,
            head_bias_init: 0.1,
            init_seed: 0,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "model.in_channels",
    "model.block_widths",
    "model.block_depths",
    "model.density_branch_convs",
    "model.perspective_width",
    "model.pad_input",
    "model.head_bias_init",
    "model.init_seed",
];

fn parse_quad(kv: &KvConfig, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
    let Some(raw) = kv.raw(key) else { return Ok(default) };
    let v: Vec<usize> = raw
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: bad list {raw:?}"))))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| Error::Config(format!("{key}: expected 4 entries")))
}

impl ModelConfig {
    pub fn keys() -> &'static [&'static str] {
        MODEL_KEYS
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            in_channels: kv.get_or("model.in_channels", d.in_channels)?,
            block_widths: parse_quad(kv, "model.block_widths", d.block_widths)?,
            block_depths: parse_quad(kv, "model.block_depths", d.block_depths)?,
            density_branch_convs: kv.get_or("model.density_branch_convs", d.density_branch_convs)?,
            perspective_width: kv.get_or("model.perspective_width", d.perspective_width)?,
            pad_input: kv.get_or("model.pad_input", d.pad_input)?,
            head_bias_init: kv.get_or("model.head_bias_init", d.head_bias_init)?,
            init_seed: kv.get_or("model.init_seed", d.init_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        let join = |a: [usize; 4]| a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        kv.set("model.in_channels", self.in_channels);
        kv.set("model.block_widths", join(self.block_widths));
        kv.set("model.block_depths", join(self.block_depths));
        kv.set("model.density_branch_convs", self.density_branch_convs);
        kv.set("model.perspective_width", self.perspective_width);
        kv.set("model.pad_input", self.pad_input);
        kv.set("model.head_bias_init", self.head_bias_init);
        kv.set("model.init_seed", self.init_seed);
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.block_widths.contains(&0)
            || self.block_depths.contains(&0)
            || self.perspective_width == 0
        {
            return Err(Error::Config("model widths and depths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
struct Slots {
    blocks: [Vec<ConvSlot>; 4],
    head1: ConvSlot,
    branch2: Vec<ConvSlot>,
    head2: ConvSlot,
    branch3: ConvSlot,
    head3: ConvSlot,
    persp: [ConvSlot; 3],
    persp_up: usize,
    avg_up3: usize,
    avg_up2: usize,
    pa_up3: usize,
    pa_up2: usize,
    pa_s_alpha: usize,
    pa_s_beta: usize,
    pa_alpha: usize,
    pa_beta: usize,
}

/// All learnable parameters, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub params: Vec<LayerParam<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.params.iter().position(|p| p.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&LayerParam<T>> {
        self.params.iter().find(|p| p.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut LayerParam<T>> {
        self.params.iter_mut().find(|p| p.id == id)
    }

    pub fn scalar(&self, id: &str) -> Option<T> {
        self.get(id).map(|p| p.tensor.data[0])
    }

    pub fn set_scalar(&mut self, id: &str, v: T) -> Result<()> {
        let p = self.get_mut(id).ok_or_else(|| Error::Config(format!("no parameter {id}")))?;
        p.tensor.data[0] = v;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| LayerParam { id: p.id.clone(), tensor: p.tensor.cast(), learnable: p.learnable })
                .collect(),
        }
    }

    pub fn write_checkpoint(&self, w: impl std::io::Write) -> Result<()> {
        write_checkpoint(w, &self.params)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Flat copy of every parameter value.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.tensor.data.iter().copied()).collect()
    }
}

/// Gradient buffers parallel to [`ModelParams::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T>(pub Vec<Vec<T>>);

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        ParamGrads(params.params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect())
    }

    fn add(&mut self, idx: usize, g: &[T]) {
        for (d, s) in self.0[idx].iter_mut().zip(g) {
            *d += *s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutputs<T> {
    pub d_e1: ValueMap<T>,
    pub d_e2: ValueMap<T>,
    pub d_e3: ValueMap<T>,
    pub p_es: ValueMap<T>,
    pub p_e: ValueMap<T>,
    pub w_s: ValueMap<T>,
    pub w: ValueMap<T>,
    pub d_es: ValueMap<T>,
    pub d_e: ValueMap<T>,
    pub mode: CombineMode,
    /// `(width, height)` after padding to a multiple of 32.
    pub padded_size: (usize, usize),
}

/// Upstream gradients for each supervised output. `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T> {
    pub d_e: Option<ValueMap<T>>,
    pub d_e1: Option<ValueMap<T>>,
    pub d_e2: Option<ValueMap<T>>,
    pub d_e3: Option<ValueMap<T>>,
    pub p_e: Option<ValueMap<T>>,
    pub p_es: Option<ValueMap<T>>,
}

#[derive(Debug, Clone)]
struct ConvTrace<T> {
    input: Tensor<T>,
    output: Tensor<T>,
}

#[derive(Debug, Clone)]
enum Combine<T> {
    Average { d3: Tensor<T>, mid: Tensor<T> },
    Pa { d3: Tensor<T>, inner: PaCache<T>, d_es: Tensor<T>, outer: PaCache<T> },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    blocks: Vec<Vec<ConvTrace<T>>>,
    pools: Vec<PoolIndices>,
    head1: ConvTrace<T>,
    pool16: PoolIndices,
    branch2: Vec<ConvTrace<T>>,
    head2: ConvTrace<T>,
    pool32: PoolIndices,
    branch3: ConvTrace<T>,
    head3: ConvTrace<T>,
    persp: Vec<ConvTrace<T>>,
    p_es: Tensor<T>,
    combine: Combine<T>,
}

pub const PA_INNER_ALPHA: &str = "pa.inner.alpha";
pub const PA_INNER_BETA: &str = "pa.inner.beta";
pub const PA_OUTER_ALPHA: &str = "pa.outer.alpha";
pub const PA_OUTER_BETA: &str = "pa.outer.beta";
pub const HEAD_BIASES: [&str; 3] = ["head1.b", "head2.b", "head3.b"];

/// The network: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct PacnnModel<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    slots: Slots,
}

struct Builder<'a, T> {
    params: Vec<LayerParam<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, id: &str, cin: usize, cout: usize, k: usize, relu: bool) -> ConvSlot {
        // Kaiming normal on fan-in.
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = cout * cin * k * k;
        let data = (0..n).map(|_| T::of(normal.sample(self.rng))).collect();
        let w = self.push(format!("{id}.w"), Tensor { shape: vec![cout, cin, k, k], data, grad: None });
        let b = self.push(format!("{id}.b"), Tensor::zeros(&[cout]));
        ConvSlot { w, b, relu }
    }

    fn push(&mut self, id: String, tensor: Tensor<T>) -> usize {
        self.params.push(LayerParam { id, tensor, learnable: true });
        self.params.len() - 1
    }

    fn scalar(&mut self, id: &str, v: f64) -> usize {
        self.push(id.to_string(), Tensor { shape: vec![1], data: vec![T::of(v)], grad: None })
    }
}

impl<T: Real> PacnnModel<T> {
    /// Freshly initialised model: Kaiming convs, bilinear upsamplers
    /// (mass-preserving for densities, value-preserving for perspective),
    /// PA layers at `alpha = 1, beta = 0`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut b = Builder { params: Vec::new(), rng: &mut rng };
        let mut cin = config.in_channels;
        let mut blocks: [Vec<ConvSlot>; 4] = Default::default();
        for (bi, block) in blocks.iter_mut().enumerate() {
            for li in 0..config.block_depths[bi] {
                let cout = config.block_widths[bi];
                block.push(b.conv(&format!("block{}.conv{}", bi + 1, li + 1), cin, cout, 3, true));
                cin = cout;
            }
        }
        let f8 = cin;
        let head1 = b.conv("head1", f8, 1, 1, true);
        let mut branch2 = Vec::new();
        let mut c = f8;
        for li in 0..config.density_branch_convs {
            branch2.push(b.conv(&format!("branch2.conv{}", li + 1), c, f8, 3, true));
            c = f8;
        }
        let head2 = b.conv("head2", c, 1, 1, true);
        let branch3 = b.conv("branch3.conv1", c, f8, 3, true);
        let head3 = b.conv("head3", f8, 1, 1, true);
        let pw = config.perspective_width;
        let persp = [
            b.conv("persp.conv1", f8, pw, 3, true),
            b.conv("persp.conv2", pw, pw, 3, true),
            b.conv("persp.conv3", pw, 1, 1, false),
        ];
        let persp_up = b.push("persp.up".into(), bilinear_kernel(1, 1.0));
        let avg_up3 = b.push("avg.up3".into(), bilinear_kernel(1, 0.25));
        let avg_up2 = b.push("avg.up2".into(), bilinear_kernel(1, 0.25));
        let pa_up3 = b.push("pa.up3".into(), bilinear_kernel(1, 0.25));
        let pa_up2 = b.push("pa.up2".into(), bilinear_kernel(1, 0.25));
        let pa_s_alpha = b.scalar(PA_INNER_ALPHA, 1.0);
        let pa_s_beta = b.scalar(PA_INNER_BETA, 0.0);
        let pa_alpha = b.scalar(PA_OUTER_ALPHA, 1.0);
        let pa_beta = b.scalar(PA_OUTER_BETA, 0.0);
        let slots = Slots {
            blocks,
            head1,
            branch2,
            head2,
            branch3,
            head3,
            persp,
            persp_up,
            avg_up3,
            avg_up2,
            pa_up3,
            pa_up2,
            pa_s_alpha,
            pa_s_beta,
            pa_alpha,
            pa_beta,
        };
        for s in [slots.head1, slots.head2, slots.head3] {
            b.params[s.b].tensor.data[0] = T::of(config.head_bias_init);
        }
        Ok(PacnnModel { config, params: ModelParams { params: b.params }, slots })
    }

    /// Rebuild from a parameter list (e.g. a checkpoint); ids and shapes
    /// must match the configuration exactly.
    pub fn from_params(config: ModelConfig, params: Vec<LayerParam<T>>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.params.len() {
            return Err(Error::Format(format!(
                "{} parameters, model expects {}",
                params.len(),
                model.params.params.len()
            )));
        }
        for (dst, src) in model.params.params.iter_mut().zip(params) {
            if dst.id != src.id || dst.tensor.shape != src.tensor.shape {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    src.id, src.tensor.shape, dst.id, dst.tensor.shape
                )));
            }
            dst.tensor.data = src.tensor.data;
        }
        Ok(model)
    }

    pub fn load_checkpoint(config: ModelConfig, r: impl std::io::Read) -> Result<Self> {
        Self::from_params(config, read_checkpoint(r)?)
    }

    pub fn cast<U: Real>(&self) -> PacnnModel<U> {
        PacnnModel { config: self.config.clone(), params: self.params.cast(), slots: self.slots.clone() }
    }

    pub fn pa_params(&self) -> (PaWeightParams<T>, PaWeightParams<T>) {
        let s = |i: usize| self.params.params[i].tensor.data[0];
        (
            PaWeightParams { alpha: s(self.slots.pa_s_alpha), beta: s(self.slots.pa_s_beta) },
            PaWeightParams { alpha: s(self.slots.pa_alpha), beta: s(self.slots.pa_beta) },
        )
    }

    /// Ids of the parameters used only by the given mode's combination path
    /// and the perspective branch.
    pub fn backbone_ids(&self) -> Vec<String> {
        self.params
            .params
            .iter()
            .filter(|p| p.id.starts_with("block"))
            .map(|p| p.id.clone())
            .collect()
    }

    fn conv_fwd(&self, slot: ConvSlot, x: Tensor<T>, spec: Conv2dSpec) -> Result<(Tensor<T>, ConvTrace<T>)> {
        let p = &self.params.params;
        let mut y = conv2d_forward(&x, &p[slot.w].tensor, &p[slot.b].tensor, spec)?;
        if slot.relu {
            y = relu_forward(&y);
        }
        Ok((y.clone(), ConvTrace { input: x, output: y }))
    }

    fn conv_bwd(&self, slot: ConvSlot, t: &ConvTrace<T>, g: Tensor<T>, grads: &mut ParamGrads<T>) -> Result<Tensor<T>> {
        let g = if slot.relu { relu_backward(&t.output, &g)? } else { g };
        let wt = &self.params.params[slot.w].tensor;
        let k = wt.shape[2];
        let spec = if k == 3 { Conv2dSpec::same3x3() } else { Conv2dSpec::default() };
        let r = conv2d_backward(&t.input, wt, spec, &g)?;
        grads.add(slot.w, &r.weight.data);
        grads.add(slot.b, &r.bias.data);
        Ok(r.input)
    }

    fn up_fwd(&self, slot: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        upsample2x_forward(x, &self.params.params[slot].tensor)
    }

    fn up_bwd(&self, slot: usize, x: &Tensor<T>, g: &Tensor<T>, grads: &mut ParamGrads<T>) -> Result<Tensor<T>> {
        let r = upsample2x_backward(x, &self.params.params[slot].tensor, g)?;
        grads.add(slot, &r.weight.data);
        Ok(r.input)
    }

    /// Pad (or reject) an input image so both sides are multiples of 32.
    pub fn prepare_input(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = image.dims3()?;
        if c != self.config.in_channels {
            return shape_err(format!("model expects {} channels, got {c}", self.config.in_channels));
        }
        if h == 0 || w == 0 {
            return shape_err("empty input image");
        }
        if h % 32 == 0 && w % 32 == 0 {
            return Ok(image.clone());
        }
        if !self.config.pad_input {
            return shape_err(format!("input {h}x{w} is not divisible by 32 and padding is disabled"));
        }
        let (ph, pw) = (h.next_multiple_of(32), w.next_multiple_of(32));
        let mut data = vec![T::zero(); c * ph * pw];
        for ch in 0..c {
            for y in 0..h {
                let src = &image.data[(ch * h + y) * w..(ch * h + y + 1) * w];
                data[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
            }
        }
        Tensor::from_vec(&[c, ph, pw], data)
    }

    pub fn forward(&self, image: &Tensor<T>, mode: CombineMode) -> Result<MultiScaleOutputs<T>> {
        Ok(self.forward_cached(image, mode)?.0)
    }

    pub fn forward_cached(&self, image: &Tensor<T>, mode: CombineMode) -> Result<(MultiScaleOutputs<T>, ForwardCache<T>)> {
        let s = &self.slots;
        let same = Conv2dSpec::same3x3();
        let one = Conv2dSpec::default();
        let input = self.prepare_input(image)?;
        let padded_size = (input.shape[2], input.shape[1]);

        let mut x = input;
        let mut blocks = Vec::with_capacity(4);
        let mut pools = Vec::with_capacity(3);
        for (bi, block) in s.blocks.iter().enumerate() {
            let mut traces = Vec::with_capacity(block.len());
            for &slot in block {
                let (y, t) = self.conv_fwd(slot, x, same)?;
                traces.push(t);
                x = y;
            }
            blocks.push(traces);
            if bi < 3 {
                let (y, idx) = maxpool2x2_forward(&x)?;
                pools.push(idx);
                x = y;
            }
        }
        let f8 = x;
        let (d1, head1) = self.conv_fwd(s.head1, f8.clone(), one)?;
        let (f16, pool16) = maxpool2x2_forward(&f8)?;

        let mut y = f16.clone();
        let mut branch2 = Vec::new();
        for &slot in &s.branch2 {
            let (o, t) = self.conv_fwd(slot, y, same)?;
            branch2.push(t);
            y = o;
        }
        let (d2, head2) = self.conv_fwd(s.head2, y.clone(), one)?;
        let (f32_, pool32) = maxpool2x2_forward(&y)?;
        let (c6, branch3) = self.conv_fwd(s.branch3, f32_, same)?;
        let (d3, head3) = self.conv_fwd(s.head3, c6, one)?;

        let (q1, t1) = self.conv_fwd(s.persp[0], f16, same)?;
        let (q2, t2) = self.conv_fwd(s.persp[1], q1, same)?;
        let (p_es, t3) = self.conv_fwd(s.persp[2], q2, one)?;
        let p_e = self.up_fwd(s.persp_up, &p_es)?;

        let d1m = d1.clone().into_map()?;
        let d2m = d2.clone().into_map()?;
        let p_esm = p_es.clone().into_map()?;
        let p_em = p_e.into_map()?;
        let half = T::of(0.5);
        let (d_es, w_s, d_e, w, combine) = match mode {
            CombineMode::Average => {
                let u3 = self.up_fwd(s.avg_up3, &d3)?.into_map()?;
                d2m.check_same_size(&u3, "d_e2 vs Up(d_e3)")?;
                let mid = zip_map(&d2m, &u3, |a, b| (a + b) * half);
                let midt = Tensor::from_map(&mid);
                let u2 = self.up_fwd(s.avg_up2, &midt)?.into_map()?;
                d1m.check_same_size(&u2, "d_e1 vs Up(mid)")?;
                let d_e = zip_map(&d1m, &u2, |a, b| (a + b) * half);
                let w_s = ValueMap::filled(mid.width, mid.height, half);
                let w = ValueMap::filled(d_e.width, d_e.height, half);
                (mid, w_s, d_e, w, Combine::Average { d3: d3.clone(), mid: midt })
            }
            CombineMode::Pa => {
                let (inner_p, outer_p) = self.pa_params();
                let u3 = self.up_fwd(s.pa_up3, &d3)?.into_map()?;
                let (d_es, w_s, inner) = pa_combine_forward(&d2m, &u3, &p_esm, inner_p)?;
                let d_est = Tensor::from_map(&d_es);
                let u = self.up_fwd(s.pa_up2, &d_est)?.into_map()?;
                let (d_e, w, outer) = pa_combine_forward(&d1m, &u, &p_em, outer_p)?;
                (d_es, w_s, d_e, w, Combine::Pa { d3: d3.clone(), inner, d_es: d_est, outer })
            }
        };
        let outputs = MultiScaleOutputs {
            d_e1: d1m,
            d_e2: d2m,
            d_e3: d3.into_map()?,
            p_es: p_esm,
            p_e: p_em,
            w_s,
            w,
            d_es,
            d_e,
            mode,
            padded_size,
        };
        let cache = ForwardCache {
            blocks,
            pools,
            head1,
            pool16,
            branch2,
            head2,
            pool32,
            branch3,
            head3,
            persp: vec![t1, t2, t3],
            p_es,
            combine,
        };
        Ok((outputs, cache))
    }

    /// Reverse pass from upstream output gradients to every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &OutputGrads<T>) -> Result<ParamGrads<T>> {
        let s = &self.slots;
        let mut grads = ParamGrads::zeros_like(&self.params);
        let to_t = |m: &Option<ValueMap<T>>, like: &Tensor<T>| -> Result<Tensor<T>> {
            match m {
                Some(m) => {
                    if [1, m.height, m.width] != like.shape[..] {
                        return shape_err(format!("upstream gradient {}x{} for output {:?}", m.width, m.height, like.shape));
                    }
                    Ok(Tensor::from_map(m))
                }
                None => Ok(Tensor::zeros(&like.shape)),
            }
        };
        let mut g_d1 = to_t(&upstream.d_e1, &cache.head1.output)?;
        let mut g_d2 = to_t(&upstream.d_e2, &cache.head2.output)?;
        let mut g_d3 = to_t(&upstream.d_e3, &cache.head3.output)?;
        let mut g_pes = to_t(&upstream.p_es, &cache.p_es)?;
        let p_e_shape = Tensor::<T>::zeros(&[1, cache.p_es.shape[1] * 2, cache.p_es.shape[2] * 2]);
        let mut g_pe = to_t(&upstream.p_e, &p_e_shape)?;
        let g_de = to_t(&upstream.d_e, &cache.head1.output)?;

        let half = T::of(0.5);
        let add = |a: &mut Tensor<T>, b: &[T]| a.data.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        match &cache.combine {
            Combine::Average { d3, mid } => {
                add(&mut g_d1, &g_de.data.iter().map(|&v| v * half).collect::<Vec<_>>());
                let g_u2 = Tensor { data: g_de.data.iter().map(|&v| v * half).collect(), ..g_de.clone() };
                let g_mid = self.up_bwd(s.avg_up2, mid, &g_u2, &mut grads)?;
                let g_half: Vec<T> = g_mid.data.iter().map(|&v| v * half).collect();
                add(&mut g_d2, &g_half);
                let g_u3 = Tensor { data: g_half, ..g_mid };
                let g = self.up_bwd(s.avg_up3, d3, &g_u3, &mut grads)?;
                add(&mut g_d3, &g.data);
            }
            Combine::Pa { d3, inner, d_es, outer } => {
                let go = pa_combine_backward(&g_de.clone().into_map()?, Some(outer))?;
                add(&mut g_d1, &go.d_fine.values);
                add(&mut g_pe, &go.p.values);
                grads.add(s.pa_alpha, &[go.alpha]);
                grads.add(s.pa_beta, &[go.beta]);
                let g_des = self.up_bwd(s.pa_up2, d_es, &Tensor::from_map(&go.d_coarse), &mut grads)?;
                let gi = pa_combine_backward(&g_des.into_map()?, Some(inner))?;
                add(&mut g_d2, &gi.d_fine.values);
                add(&mut g_pes, &gi.p.values);
                grads.add(s.pa_s_alpha, &[gi.alpha]);
                grads.add(s.pa_s_beta, &[gi.beta]);
                let g = self.up_bwd(s.pa_up3, d3, &Tensor::from_map(&gi.d_coarse), &mut grads)?;
                add(&mut g_d3, &g.data);
            }
        }

        // Perspective branch.
        let g = self.up_bwd(s.persp_up, &cache.p_es, &g_pe, &mut grads)?;
        add(&mut g_pes, &g.data);
        let mut g = g_pes;
        for (slot, t) in s.persp.iter().zip(&cache.persp).rev() {
            g = self.conv_bwd(*slot, t, g, &mut grads)?;
        }
        let mut g_f16 = g;

        // Coarsest head, then the 1/16 branch.
        let g = self.conv_bwd(s.head3, &cache.head3, g_d3, &mut grads)?;
        let g = self.conv_bwd(s.branch3, &cache.branch3, g, &mut grads)?;
        let mut g_b2 = maxpool2x2_backward(&cache.pool32, &g)?;
        let g = self.conv_bwd(s.head2, &cache.head2, g_d2, &mut grads)?;
        add(&mut g_b2, &g.data);
        let mut g = g_b2;
        for (slot, t) in s.branch2.iter().zip(&cache.branch2).rev() {
            g = self.conv_bwd(*slot, t, g, &mut grads)?;
        }
        add(&mut g_f16, &g.data);

        let mut g_f8 = maxpool2x2_backward(&cache.pool16, &g_f16)?;
        let g = self.conv_bwd(s.head1, &cache.head1, g_d1, &mut grads)?;
        add(&mut g_f8, &g.data);

        let mut g = g_f8;
        for bi in (0..4).rev() {
            if bi < 3 {
                g = maxpool2x2_backward(&cache.pools[bi], &g)?;
            }
            for (slot, t) in s.blocks[bi].iter().zip(&cache.blocks[bi]).rev() {
                g = self.conv_bwd(*slot, t, g, &mut grads)?;
            }
        }
        Ok(grads)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pa_output_lies_between_inputs(
            vals in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, -5.0f64..5.0), 1..50),
            alpha in -20.0f64..20.0,
            beta in -3.0f64..3.0,
        ) {
            let n = vals.len();
            let f = ValueMap::from_vec(n, 1, vals.iter().map(|v| v.0).collect()).unwrap();
            let c = ValueMap::from_vec(n, 1, vals.iter().map(|v| v.1).collect()).unwrap();
            let p = ValueMap::from_vec(n, 1, vals.iter().map(|v| v.2).collect()).unwrap();
            let (out, w, _) = pa_combine_forward(&f, &c, &p, PaWeightParams { alpha, beta }).unwrap();
            for i in 0..n {
                prop_assert!((0.0..=1.0).contains(&w.values[i]));
                let (lo, hi) = (f.values[i].min(c.values[i]), f.values[i].max(c.values[i]));
                prop_assert!(out.values[i] >= lo - 1e-12 && out.values[i] <= hi + 1e-12);
            }
        }
    }
}
