//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any enforced criterion fails. The paired ablation is a
//! statistical comparison at small scale; it is reported but not enforced.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use pacnn::checks::{model_loss_instance, pa_instance, tiny_model_config, PaOp};
use pacnn::geometry::{derive_seed, generate_dataset, generate_scene, AnnotatedScene, SceneConfig};
use pacnn::gt::{fit_linear, fit_tanh, render_density_map, DensityKernelConfig, FitOptions, PerspectiveSample};
use pacnn::losses::{dssim_loss, ssim_map, SsimConfig};
use pacnn::metrics::evaluate;
use pacnn::model::{CombineMode, ModelConfig, PacnnModel};
use pacnn::nn::{grad_check, numeric_gradient, relative_error};
use pacnn::train::{init_model, prepare_samples, train_phase1, train_phase2, TrainConfig};
use pacnn::{downsample_map, DownsampleMode, ValueMap};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Paired ablation: PA against the average-combination baseline, both
/// continuing from the same phase-1 model with equal phase-2 budgets.
fn a1() -> Outcome {
    // Horizon close to the top row: head scale varies roughly tenfold down the frame.
    let scenes = SceneConfig { horizon_rows: 6.0, radius_gain: 2.5, ..SceneConfig::default() };
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let train = generate_dataset(&scenes, derive_seed(seed, 1), 200).unwrap();
        let test = generate_dataset(&scenes, derive_seed(seed, 2), 50).unwrap();
        let model = ModelConfig {
            block_widths: [8, 16, 16, 16],
            block_depths: [1, 1, 2, 2],
            perspective_width: 16,
            init_seed: seed,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            epochs_phase1: 20,
            epochs_phase2: 20,
            crops_per_image: 0,
            seed,
            model,
            ..TrainConfig::default()
        };
        let (samples, norm, _) = prepare_samples(&train, &cfg).unwrap();
        let (warm, _) = train_phase1(&samples, &cfg, None).unwrap();
        let (pa, _) = train_phase2(&samples, &cfg, &warm, None).unwrap();
        let base_cfg = TrainConfig { phase2_mode: CombineMode::Average, ..cfg.clone() };
        let (base, _) = train_phase2(&samples, &base_cfg, &warm, None).unwrap();
        let (mp, _) = evaluate(&pa, &test, CombineMode::Pa, &norm).unwrap();
        let (mb, _) = evaluate(&base, &test, CombineMode::Average, &norm).unwrap();
        if mp.mae <= mb.mae {
            wins += 1;
        }
        rows.push(format!("seed{seed} pa={:.3} avg={:.3}", mp.mae, mb.mae));
    }
    outcome(wins >= 4, format!("PA wins {wins}/5 [{}]", rows.join(", ")))
}

fn a2() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for seed in 0..10u64 {
        let r = grad_check(&PaOp, &pa_instance(seed), 1e-4, seed);
        ok &= r.passed;
        worst = worst.max(r.worst);
    }
    outcome(ok, format!("10 instances, 5 saturated, worst relative error {worst:.2e}"))
}

fn a3() -> Outcome {
    let params = PacnnModel::<f64>::new(tiny_model_config(0)).unwrap().params.count();
    let mut worst = 0.0f64;
    let mut ok = params <= 5000;
    for (seed, mode) in [(0, CombineMode::Pa), (1, CombineMode::Average)] {
        let op = model_loss_instance(seed, mode).unwrap();
        let r = grad_check(&op, &op.inputs(), 1e-3, seed);
        ok &= r.passed;
        worst = worst.max(r.worst);
    }
    outcome(ok, format!("{params} parameters, 32x32 input, worst relative error {worst:.2e}"))
}

fn a4() -> Outcome {
    let cfg = SceneConfig::default();
    let kernel = DensityKernelConfig::default();
    let (mut worst_mass, mut worst_down) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let base = generate_scene(&cfg, seed).unwrap();
        let (w, h) = (base.width as f64, base.height as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0DE);
        let mut heads = base.heads.clone();
        for _ in 0..6 {
            let t = rng.gen_range(0.0..1.0);
            heads.push((0.0, t * (h - 1e-3)));
            heads.push((w - 1e-3, t * (h - 1e-3)));
            heads.push((t * (w - 1e-3), 0.0));
            heads.push((t * (w - 1e-3), h - 1e-3));
        }
        let scene = AnnotatedScene::new(format!("border{seed}"), base.width, base.height, heads);
        let d: ValueMap<f64> = render_density_map(&scene, &kernel).unwrap();
        worst_mass = worst_mass.max((d.total() - scene.count() as f64).abs());
        let down = downsample_map(&d, 8, DownsampleMode::Sum).unwrap();
        worst_down = worst_down.max((down.total() - d.total()).abs() / d.total());
    }
    outcome(
        worst_mass <= 1e-4 && worst_down <= 1e-9,
        format!("100 scenes, worst mass error {worst_mass:.2e}, worst downsampling drift {worst_down:.2e}"),
    )
}

fn tanh(a: f64, b: f64, c: f64, y: f64) -> f64 {
    a * (b * (y + c)).tanh()
}

fn a5() -> Outcome {
    let opts = FitOptions::default();
    let rows = 768;
    let (mut clean, mut noisy) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (rng.gen_range(1.5..4.0), rng.gen_range(0.002..0.006), rng.gen_range(20.0..150.0));
        let rel = |f: &pacnn::gt::TanhFitParams| {
            [(f.a, a), (f.b, b), (f.c, c)].iter().map(|(g, w)| ((g - w) / w).abs()).fold(0.0, f64::max)
        };
        let s: Vec<_> = (0..rows)
            .map(|y| PerspectiveSample { row: y as f64, value: tanh(a, b, c, y as f64) })
            .collect();
        clean = clean.max(rel(&fit_tanh(&s, &opts).unwrap()));
        let noise = Normal::new(1.0, 0.05).unwrap();
        let s: Vec<_> = (0..rows)
            .map(|y| PerspectiveSample { row: y as f64, value: tanh(a, b, c, y as f64) * noise.sample(&mut rng) })
            .collect();
        noisy = noisy.max(rel(&fit_tanh(&s, &opts).unwrap()));
    }
    // Tiered profile: plateaus with shrinking steps toward the bottom rows.
    let tiers = [0.4, 1.2, 1.7, 1.95, 2.05];
    let steps: Vec<_> = (0..200)
        .map(|y| PerspectiveSample { row: y as f64, value: tiers[y / 40] })
        .collect();
    let t = fit_tanh(&steps, &opts).unwrap();
    let l = fit_linear(&steps).unwrap();
    outcome(
        clean <= 1e-3 && noisy <= 0.1 && t.residual_rms <= l.residual_rms,
        format!(
            "20 seeds, noiseless {clean:.2e}, 5% noise {noisy:.2e}, tiered rms tanh {:.4} vs linear {:.4}",
            t.residual_rms, l.residual_rms
        ),
    )
}

/// Independent SSIM at one pixel: direct 5x5 Gaussian window sums, clipped
/// at the border.
fn scalar_ssim(e: &ValueMap<f64>, g: &ValueMap<f64>, x: usize, y: usize) -> f64 {
    let l = g.values.iter().cloned().fold(0.0f64, f64::max).max(1e-6);
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let mut s = [0.0f64; 6];
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            let (xx, yy) = (x as i64 + dx, y as i64 + dy);
            if xx < 0 || yy < 0 || xx >= e.width as i64 || yy >= e.height as i64 {
                continue;
            }
            let w = (-((dx * dx + dy * dy) as f64) / 2.0).exp();
            let (a, b) = (e.get(xx as usize, yy as usize), g.get(xx as usize, yy as usize));
            for (acc, v) in s.iter_mut().zip([1.0, a, b, a * a, b * b, a * b]) {
                *acc += w * v;
            }
        }
    }
    let (me, mg) = (s[1] / s[0], s[2] / s[0]);
    let (ve, vg, cv) = (s[3] / s[0] - me * me, s[4] / s[0] - mg * mg, s[5] / s[0] - me * mg);
    ((2.0 * me * mg + c1) * (2.0 * cv + c2)) / ((me * me + mg * mg + c1) * (ve + vg + c2))
}

fn a6() -> Outcome {
    let cfg = SsimConfig::default();
    let rand_map = |w: usize, h: usize, seed: u64| -> ValueMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ValueMap::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
    };
    let mut self_dev = 0.0f64;
    for seed in 0..10 {
        let x = rand_map(16, 12, seed);
        let s = ssim_map(&x, &x, &cfg).unwrap();
        for y in 2..10 {
            for xx in 2..14 {
                self_dev = self_dev.max((s.get(xx, y) - 1.0).abs());
            }
        }
    }
    let mut grad_err = 0.0f64;
    for (w, h, seed) in [(9, 7, 21u64), (14, 11, 22), (4, 3, 23)] {
        let e = rand_map(w, h, seed);
        let g = rand_map(w, h, seed + 50);
        let (_, grad) = dssim_loss(&e, &g, &cfg).unwrap();
        let num = numeric_gradient(
            |v| dssim_loss(&ValueMap::from_vec(w, h, v.to_vec()).unwrap(), &g, &cfg).unwrap().0,
            &e.values,
            1e-5,
        );
        grad_err = grad_err.max(relative_error(&grad.values, &num));
    }
    let e = rand_map(13, 10, 31);
    let g = rand_map(13, 10, 32);
    let s = ssim_map(&e, &g, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut oracle = 0.0f64;
    for _ in 0..20 {
        let (x, y) = (rng.gen_range(0..13), rng.gen_range(0..10));
        oracle = oracle.max((s.get(x, y) - scalar_ssim(&e, &g, x, y)).abs());
    }
    outcome(
        self_dev <= 1e-12 && grad_err <= 1e-4 && oracle <= 1e-6,
        format!("self-similarity {self_dev:.1e}, gradient {grad_err:.2e}, scalar oracle {oracle:.2e}"),
    )
}

fn pacnn(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_pacnn")).args(args).output().expect("spawn pacnn");
    assert!(out.status.success(), "pacnn {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(root: &Path, cfg: &Path) -> (Vec<u8>, String) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, test, gt, run) = (root.join("data"), root.join("test"), root.join("gt"), root.join("run"));
    pacnn(&["gen-data", "--out", &s(&data), "--count", "12", "--seed", "7"]);
    pacnn(&["gen-data", "--out", &s(&test), "--count", "6", "--seed", "8"]);
    pacnn(&["gen-gt", "--data", &s(&data), "--out", &s(&gt), "--config", &s(cfg)]);
    pacnn(&["train", "--data", &s(&data), "--out", &s(&run), "--config", &s(cfg), "--seed", "3"]);
    let metrics = pacnn(&["eval", "--model", &s(&run), "--data", &s(&test)]);
    (std::fs::read(run.join("model.pacp")).unwrap(), metrics)
}

fn a7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "train.epochs_phase1 = 2\ntrain.epochs_phase2 = 2\ntrain.crops_per_image = 2\n\
         model.block_widths = 4,8,8,8\nmodel.block_depths = 1,1,1,1\nmodel.perspective_width = 8\n",
    )
    .unwrap();
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let (ck1, m1) = pipeline(&r1, &cfg);
    let (ck2, m2) = pipeline(&r2, &cfg);
    let gt_same = ["scene_00000.density.pacm", "scene_00011.perspective.pacm"]
        .iter()
        .all(|f| std::fs::read(r1.join("gt").join(f)).unwrap() == std::fs::read(r2.join("gt").join(f)).unwrap());
    outcome(
        ck1 == ck2 && m1 == m2 && gt_same,
        format!("checkpoint {} bytes, metrics `{}`", ck1.len(), m1.lines().next().unwrap_or("")),
    )
}

fn a8() -> Outcome {
    let scene = generate_scene(&SceneConfig { count_min: 40, count_max: 50, ..SceneConfig::default() }, 11).unwrap();
    let cfg = TrainConfig { epochs_phase1: 200, epochs_phase2: 0, crops_per_image: 0, seed: 11, ..TrainConfig::default() };
    let (samples, norm, _) = prepare_samples(std::slice::from_ref(&scene), &cfg).unwrap();
    let before = evaluate(&init_model(&cfg).unwrap(), std::slice::from_ref(&scene), CombineMode::Average, &norm).unwrap().0.mae;
    let (m, report) = train_phase1(&samples, &cfg, None).unwrap();
    let after = evaluate(&m, std::slice::from_ref(&scene), CombineMode::Average, &norm).unwrap().0.mae;
    outcome(
        after <= 0.5 * before,
        format!("count {}, MAE {before:.2} -> {after:.2} in {} epochs", scene.count(), report.epochs.len()),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome, bool); 8] = [
        ("A1", a1, false),
        ("A2", a2, true),
        ("A3", a3, true),
        ("A4", a4, true),
        ("A5", a5, true),
        ("A6", a6, true),
        ("A7", a7, true),
        ("A8", a8, true),
    ];
    let mut failed = Vec::new();
    for (name, run, enforced) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == name) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if enforced { "" } else { " [reported only]" };
        println!("{name} {status}{note} ({:.1}s) {}", t.elapsed().as_secs_f64(), o.detail);
        if !o.pass && enforced {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
