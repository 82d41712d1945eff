use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pacnn::checks::run_suite;
use pacnn::config::KvConfig;
use pacnn::geometry::{generate_dataset, SceneConfig};
use pacnn::gt::{perspective_gt, render_density_map, PerspectiveFit, PerspectiveGtConfig};
use pacnn::io::{load_annotations, load_map, read_dataset, save_map, save_pgm, write_dataset};
use pacnn::metrics::{evaluate, predict};
use pacnn::model::{CombineMode, PacnnModel};
use pacnn::train::{checkpoint_id, mode_name, prepare_samples, train_phase1, train_phase2, EpochLog, Normalization, TrainConfig};
use pacnn::{Error, Result, ValueMap};

const MODEL_FILE: &str = "model.pacp";
const RUN_CONFIG_FILE: &str = "run.cfg";
const TRAIN_LOG_FILE: &str = "train.log";

#[derive(Parser)]
#[command(name = "pacnn", version, about = "Perspective-aware crowd density regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pa,
    Average,
}

impl From<Mode> for CombineMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Pa => CombineMode::Pa,
            Mode::Average => CombineMode::Average,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene generator settings (key = value).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write density and perspective ground-truth maps for every scene.
    GenGt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config; only its gt.* settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit a perspective profile to one annotated scene.
    FitPerspective {
        #[arg(long)]
        annotations: PathBuf,
        /// Scene id; the first scene when absent.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        linear: bool,
        #[arg(long, default_value_t = 0x7A11)]
        seed: u64,
    },
    /// Train both phases and write a model directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Count MAE and MSE of a trained model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Density map and count for a single image map.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Convert a map file to an 8-bit PGM heatmap.
    ExportHeatmap {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every finite-difference gradient check.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("PACNN_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring PACNN_THREADS={n:?}"),
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_model(dir: &Path) -> Result<(PacnnModel<f32>, TrainConfig, Normalization)> {
    let kv = KvConfig::load(dir.join(RUN_CONFIG_FILE))?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let norm = Normalization::from_kv(&kv)?;
    let model = PacnnModel::load_checkpoint(cfg.model.clone(), File::open(dir.join(MODEL_FILE))?)?;
    Ok((model, cfg, norm))
}

fn trained_mode(cfg: &TrainConfig) -> CombineMode {
    if cfg.epochs_phase2 > 0 {
        cfg.phase2_mode
    } else {
        CombineMode::Average
    }
}

fn describe_fit(fit: &PerspectiveFit) -> String {
    match fit {
        PerspectiveFit::Tanh(f) => format!(
            "model=tanh a={} b={} c={} residual_rms={} rows={} converged={}",
            f.a, f.b, f.c, f.residual_rms, f.n_rows_used, f.converged
        ),
        PerspectiveFit::Linear(l) => {
            format!("model=linear slope={} intercept={} residual_rms={}", l.slope, l.intercept, l.residual_rms)
        }
        PerspectiveFit::Constant(v) => format!("model=constant value={v}"),
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { out, count, seed, config } => {
            let sc = match config {
                Some(p) => SceneConfig::from_kv(&KvConfig::load(p)?)?,
                None => SceneConfig::default(),
            };
            let scenes = generate_dataset(&sc, seed, count)?;
            write_dataset(&out, &scenes)?;
            sc.to_kv().save(out.join("scene.cfg"))?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::GenGt { data, out, config } => {
            let cfg = match config {
                Some(p) => TrainConfig::from_kv(&KvConfig::load(p)?)?,
                None => TrainConfig::default(),
            };
            let scenes = read_dataset(&data)?;
            fs::create_dir_all(&out)?;
            let mut fits = BufWriter::new(File::create(out.join("fits.txt"))?);
            for s in &scenes {
                let d: ValueMap<f32> = render_density_map(s, &cfg.density)?;
                let (p, fit) = perspective_gt::<f32>(s, &cfg.perspective)?;
                save_map(out.join(format!("{}.density.pacm", s.id)), &d)?;
                save_map(out.join(format!("{}.perspective.pacm", s.id)), &p)?;
                writeln!(fits, "id={} count={} {}", s.id, s.count(), describe_fit(&fit))?;
            }
            fits.flush()?;
            println!("wrote ground truth for {} scenes to {}", scenes.len(), out.display());
        }
        Command::FitPerspective { annotations, id, out, linear, seed } => {
            let scenes = load_annotations(&annotations)?;
            let scene = match &id {
                Some(id) => scenes.iter().find(|s| &s.id == id),
                None => scenes.first(),
            }
            .ok_or_else(|| Error::InsufficientData("no matching scene in annotation file".into()))?;
            let mut cfg = PerspectiveGtConfig { linear, ..Default::default() };
            cfg.fit.seed = seed;
            let (map, fit) = perspective_gt::<f32>(scene, &cfg)?;
            save_map(&out, &map)?;
            println!("{}", describe_fit(&fit));
        }
        Command::Train { data, out, config, seed } => {
            let mut kv = match config {
                Some(p) => KvConfig::load(p)?,
                None => KvConfig::new(),
            };
            if let Some(s) = seed {
                kv.set("train.seed", s);
            }
            let cfg = TrainConfig::from_kv(&kv)?;
            let scenes = read_dataset(&data)?;
            let (samples, norm, warnings) = prepare_samples(&scenes, &cfg)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            fs::create_dir_all(&out)?;
            let mut log_file = BufWriter::new(File::create(out.join(TRAIN_LOG_FILE))?);
            let mut io_err = None;
            let mut log = |e: &EpochLog| {
                if let Err(err) = writeln!(log_file, "{}", e.to_line()) {
                    io_err.get_or_insert(err);
                }
            };
            let (m1, r1) = train_phase1(&samples, &cfg, Some(&mut log))?;
            let (m2, r2) = train_phase2(&samples, &cfg, &m1, Some(&mut log))?;
            drop(log);
            if let Some(e) = io_err {
                return Err(e.into());
            }
            log_file.flush()?;
            let mut w = BufWriter::new(File::create(out.join(MODEL_FILE))?);
            m2.params.write_checkpoint(&mut w)?;
            w.flush()?;
            let mut run_kv = cfg.to_kv();
            norm.write_kv(&mut run_kv);
            run_kv.save(out.join(RUN_CONFIG_FILE))?;
            println!(
                "samples={} phase1_epochs={} phase2_epochs={} checkpoint={} seconds={:.1}",
                samples.len(),
                r1.epochs.len(),
                r2.epochs.len(),
                checkpoint_id(&m2),
                r1.wall_clock_secs + r2.wall_clock_secs
            );
        }
        Command::Eval { model, data, mode } => {
            let (m, cfg, norm) = load_model(&model)?;
            let mode = mode.map_or(trained_mode(&cfg), CombineMode::from);
            let scenes = read_dataset(&data)?;
            let (metrics, _) = evaluate(&m, &scenes, mode, &norm)?;
            println!("MAE: {:.6}", metrics.mae);
            println!("MSE: {:.6}", metrics.mse);
            println!(
                "{}",
                serde_json::json!({ "mae": metrics.mae, "mse": metrics.mse, "n": metrics.n, "mode": mode_name(mode) })
            );
        }
        Command::Predict { model, image, out, mode } => {
            let (m, cfg, norm) = load_model(&model)?;
            let mode = mode.map_or(trained_mode(&cfg), CombineMode::from);
            let img: ValueMap<f32> = load_map(&image)?;
            let mut scene = pacnn::geometry::AnnotatedScene::new("input", img.width, img.height, vec![]);
            scene.image = Some(img);
            let (outputs, count) = predict(&m, &scene, mode, &norm)?;
            if let Some(p) = out {
                save_map(p, &outputs.d_e.scale(1.0 / norm.density_scale as f32))?;
            }
            println!("count: {count:.6}");
        }
        Command::ExportHeatmap { map, out } => {
            let m: ValueMap<f32> = load_map(&map)?;
            save_pgm(&out, &m)?;
            println!("wrote {}x{} heatmap to {}", m.width, m.height, out.display());
        }
        Command::GradCheck { seed } => {
            let mut ok = true;
            for (name, r) in run_suite(seed) {
                let status = if r.passed { "PASS" } else { "FAIL" };
                match &r.error {
                    Some(e) => println!("{status} {name}: {e}"),
                    None => println!("{status} {name}: worst relative error {:.3e} (tolerance {:.0e})", r.worst, r.tolerance),
                }
                ok &= r.passed;
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
    }
    Ok(ExitCode::SUCCESS)
}
