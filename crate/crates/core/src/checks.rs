//! Finite-difference gradient checks for every differentiable piece.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::derive_seed;
use crate::losses::{composite_loss, dssim_loss, GtBundle, LossWeights, Objective, SsimConfig};
use crate::map::ValueMap;
use crate::model::{pa_combine_backward, pa_combine_forward, CombineMode, ModelConfig, PacnnModel, PaWeightParams};
use crate::nn::{
    conv2d_backward, conv2d_forward, grad_check, upsample2x_backward, upsample2x_forward, Conv2dSpec,
    Differentiable, GradCheckReport, Tensor,
};

fn as_map(t: &Tensor<f64>) -> ValueMap<f64> {
    t.clone().into_map().expect("single-channel tensor")
}

/// One PA layer; inputs `[d_fine, d_coarse, p, alpha, beta]`.
pub struct PaOp;

impl Differentiable for PaOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let pw = PaWeightParams { alpha: i[3].data[0], beta: i[4].data[0] };
        let (out, _, _) = pa_combine_forward(&as_map(&i[0]), &as_map(&i[1]), &as_map(&i[2]), pw)?;
        Ok(Tensor::from_map(&out))
    }

    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let pw = PaWeightParams { alpha: i[3].data[0], beta: i[4].data[0] };
        let (_, _, cache) = pa_combine_forward(&as_map(&i[0]), &as_map(&i[1]), &as_map(&i[2]), pw)?;
        let r = pa_combine_backward(&as_map(g), Some(&cache))?;
        Ok(vec![
            Tensor::from_map(&r.d_fine),
            Tensor::from_map(&r.d_coarse),
            Tensor::from_map(&r.p),
            Tensor::from_vec(&[1], vec![r.alpha])?,
            Tensor::from_vec(&[1], vec![r.beta])?,
        ])
    }
}

/// Seeded PA instance. Odd seeds use a steep sigmoid so part of the map
/// sits in the saturated tails.
pub fn pa_instance(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(2..9), rng.gen_range(2..9));
    let mut map = |lo: f64, hi: f64| {
        let m = ValueMap::from_fn(w, h, |_, _| rng.gen_range(lo..hi));
        Tensor::from_map(&m)
    };
    let f = map(0.0, 5.0);
    let c = map(0.0, 5.0);
    let p = map(-2.0, 2.0);
    let alpha = if seed % 2 == 1 { rng.gen_range(8.0..30.0) } else { rng.gen_range(-3.0..3.0) };
    let beta = rng.gen_range(-1.0..1.0);
    vec![f, c, p, Tensor::from_vec(&[1], vec![alpha]).unwrap(), Tensor::from_vec(&[1], vec![beta]).unwrap()]
}

/// DSSIM loss as a function of the estimate; target is fixed.
pub struct DssimOp {
    pub target: ValueMap<f64>,
    pub cfg: SsimConfig,
}

impl Differentiable for DssimOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let (v, _) = dssim_loss(&as_map(&i[0]), &self.target, &self.cfg)?;
        Tensor::from_vec(&[1], vec![v])
    }

    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (_, grad) = dssim_loss(&as_map(&i[0]), &self.target, &self.cfg)?;
        Ok(vec![Tensor::from_map(&grad.map(|v| v * g.data[0]))])
    }
}

pub struct ConvOp(pub Conv2dSpec);

impl Differentiable for ConvOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        conv2d_forward(&i[0], &i[1], &i[2], self.0)
    }

    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let r = conv2d_backward(&i[0], &i[1], self.0, g)?;
        Ok(vec![r.input, r.weight, r.bias])
    }
}

pub struct UpsampleOp;

impl Differentiable for UpsampleOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        upsample2x_forward(&i[0], &i[1])
    }

    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let r = upsample2x_backward(&i[0], &i[1], g)?;
        Ok(vec![r.input, r.weight])
    }
}

/// Total training loss as a function of every model parameter.
pub struct ModelLossOp {
    pub model: PacnnModel<f64>,
    pub image: Tensor<f64>,
    pub gts: GtBundle<f64>,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub mode: CombineMode,
    pub objective: Objective,
}

impl ModelLossOp {
    fn with_params(&self, inputs: &[Tensor<f64>]) -> PacnnModel<f64> {
        let mut m = self.model.clone();
        for (p, t) in m.params.params.iter_mut().zip(inputs) {
            p.tensor.data.copy_from_slice(&t.data);
        }
        m
    }

    pub fn inputs(&self) -> Vec<Tensor<f64>> {
        self.model.params.params.iter().map(|p| p.tensor.clone()).collect()
    }
}

impl Differentiable for ModelLossOp {
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let m = self.with_params(inputs);
        let out = m.forward(&self.image, self.mode)?;
        let loss = composite_loss(&out, &self.gts, &self.weights, &self.ssim, self.objective)?;
        Tensor::from_vec(&[1], vec![loss.total])
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let m = self.with_params(inputs);
        let (out, cache) = m.forward_cached(&self.image, self.mode)?;
        let loss = composite_loss(&out, &self.gts, &self.weights, &self.ssim, self.objective)?;
        let grads = m.backward(&cache, &loss.grads)?;
        Ok(grads
            .0
            .into_iter()
            .zip(inputs)
            .map(|(gv, t)| Tensor { shape: t.shape.clone(), data: gv.iter().map(|v| v * g.data[0]).collect(), grad: None })
            .collect())
    }
}

/// A small network (under 5k parameters) for end-to-end checks.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        block_widths: [4, 6, 8, 8],
        block_depths: [1, 1, 1, 1],
        density_branch_convs: 1,
        perspective_width: 6,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

/// Seeded end-to-end instance on a 32x32 input with random positive targets.
pub fn model_loss_instance(seed: u64, mode: CombineMode) -> Result<ModelLossOp> {
    let mut model = PacnnModel::<f64>::new(tiny_model_config(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    // Small positive head biases keep the rectified heads active.
    for id in crate::model::HEAD_BIASES {
        model.params.get_mut(id).expect("head bias").tensor.data[0] = rng.gen_range(0.2..0.6);
    }
    model.params.set_scalar(crate::model::PA_INNER_BETA, rng.gen_range(-0.2..0.2))?;
    model.params.set_scalar(crate::model::PA_OUTER_BETA, rng.gen_range(-0.2..0.2))?;
    let image = Tensor::from_vec(&[1, 32, 32], (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let mut map = |n: usize, hi: f64| Some(ValueMap::from_fn(n, n, |_, _| rng.gen_range(0.0..hi)));
    let gts = GtBundle { density: [map(4, 1.0), map(2, 4.0), map(1, 16.0)], perspective: [map(4, 1.0), map(2, 1.0)] };
    Ok(ModelLossOp {
        model,
        image,
        gts,
        weights: LossWeights::default(),
        ssim: SsimConfig::default(),
        mode,
        objective: Objective::Full,
    })
}

/// Every check with its tolerance, as `(name, report)`.
pub fn run_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for k in 0..10 {
        let s = derive_seed(seed, k);
        out.push((format!("pa_layer[{k}]"), grad_check(&PaOp, &pa_instance(s), 1e-4, s)));
    }
    for k in 0..3 {
        let s = derive_seed(seed, 100 + k);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (w, h) = (rng.gen_range(3..12), rng.gen_range(3..12));
        let target = ValueMap::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0));
        let est = ValueMap::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0));
        let op = DssimOp { target, cfg: SsimConfig::default() };
        out.push((format!("dssim[{k}]"), grad_check(&op, &[Tensor::from_map(&est)], 1e-4, s)));
    }
    {
        let s = derive_seed(seed, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let conv = [t(&[2, 6, 5]), t(&[3, 2, 3, 3]), t(&[3])];
        out.push(("conv3x3".into(), grad_check(&ConvOp(Conv2dSpec::same3x3()), &conv, 1e-4, s)));
        let up = [t(&[2, 3, 4]), t(&[2, 4, 4])];
        out.push(("upsample".into(), grad_check(&UpsampleOp, &up, 1e-4, s)));
    }
    for (k, mode) in [CombineMode::Pa, CombineMode::Average].into_iter().enumerate() {
        let s = derive_seed(seed, 300 + k as u64);
        let report = match model_loss_instance(s, mode) {
            Ok(op) => grad_check(&op, &op.inputs(), 1e-3, s),
            Err(e) => GradCheckReport {
                max_rel_error: vec![],
                worst: f64::INFINITY,
                tolerance: 1e-3,
                non_finite: false,
                error: Some(e.to_string()),
                passed: false,
            },
        };
        out.push((format!("model_{mode:?}").to_lowercase(), report));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_is_small() {
        let m = PacnnModel::<f64>::new(tiny_model_config(0)).unwrap();
        assert!(m.params.count() <= 5000, "{}", m.params.count());
    }

    #[test]
    fn pa_layer_checks() {
        for k in 0..10 {
            let r = grad_check(&PaOp, &pa_instance(k), 1e-4, k);
            assert!(r.passed, "instance {k}: {:?}", r.max_rel_error);
        }
    }

    #[test]
    fn model_checks() {
        for mode in [CombineMode::Pa, CombineMode::Average] {
            let op = model_loss_instance(11, mode).unwrap();
            let r = grad_check(&op, &op.inputs(), 1e-3, 11);
            let worst = op
                .model
                .params
                .params
                .iter()
                .zip(&r.max_rel_error)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(p, e)| (p.id.clone(), *e));
            assert!(r.passed, "{mode:?}: worst {worst:?}");
        }
    }
}
