use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use trackverify::checkpoint::Checkpoint;
use trackverify::config::RunConfig;
use trackverify::metrics::{Aggregation, EvalReport};
use trackverify::pipeline::{
    error_curves, evaluate_labels, perturb_tracks, run_gradient_check, score_tracks, select_tracks, GroundTruthRecord, LabelRecord,
    ScoreRecord, TrackRecord, VideoSet,
};
use trackverify::select::SelectorKind;
use trackverify::train::{DatasetSpec, GradCheck, Trainer};
use trackverify::world::Manifest;

mod plot;

#[derive(Parser)]
#[command(name = "trackverify", version, about = "Score, fuse and evaluate candidate point tracks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines, applied after flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "TRACKVERIFY_OUT", default_value = "trackverify_out")]
    out: PathBuf,
    /// Master seed of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic video manifest.
    Gen {
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Sample ground-truth tracks and perturbed candidates.
    Perturb {
        /// Manifest directory written by `gen`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tracks: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Train the verifier on a manifest.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute reliability scores for candidate tracks.
    Score {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Build pseudo-labels with one selector.
    Select {
        #[arg(long)]
        method: SelectorKind,
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Ground-truth tracks; required by the oracle.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Evaluate pseudo-labels against ground truth.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        aggregation: Option<Aggregation>,
    },
    /// Render error curves and a per-method accuracy chart as SVG.
    Plot {
        #[arg(long)]
        gt: PathBuf,
        /// Label files, one per method.
        #[arg(long, required = true)]
        labels: Vec<PathBuf>,
        /// Track whose error curves are drawn.
        #[arg(long, default_value_t = 0)]
        track: usize,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        candidates: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Lib(trackverify::Error),
}

impl From<trackverify::Error> for Failure {
    fn from(e: trackverify::Error) -> Self {
        Failure::Lib(e)
    }
}

type Res<T> = Result<T, Failure>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Res<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{} is not valid: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(trackverify::Error::from)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(trackverify::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(trackverify::Error::from)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_config(common: &Common, flags: impl FnOnce(&mut RunConfig)) -> Res<RunConfig> {
    let mut cfg = RunConfig::default();
    flags(&mut cfg);
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply(&text)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(dir: &Path) -> Res<Manifest> {
    if !dir.join("manifest.json").exists() {
        return Err(Failure::Usage(format!("{} has no manifest.json; run `gen` first", dir.display())));
    }
    Ok(Manifest::read_dir(dir)?)
}

fn dataset_of(m: &Manifest, cfg: &RunConfig) -> Res<DatasetSpec> {
    let world = m
        .videos
        .first()
        .map(|v| v.config.clone())
        .ok_or_else(|| Failure::Usage("manifest lists no videos".into()))?;
    Ok(DatasetSpec {
        world,
        videos: m.videos.len(),
        seed: m.master_seed,
        perturbation: cfg.perturbation.clone(),
    })
}

fn run(cli: Cli) -> Res<()> {
    let c = &cli.common;
    let out = &c.out;
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| out.join("data"));
    let or_out = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
    match &cli.command {
        Command::Gen { videos } => {
            let cfg = load_config(c, |cfg| {
                if let Some(v) = videos {
                    cfg.data.videos = *v;
                }
                if let Some(s) = c.seed {
                    cfg.data.seed = s;
                }
            })?;
            log::info!("gen: {} videos, master seed {}", cfg.data.videos, cfg.data.seed);
            let m = Manifest::new(&cfg.world, cfg.data.videos, cfg.data.seed)?;
            let dir = out.join("data");
            m.write_dir(&dir)?;
            log::info!("wrote {}", dir.display());
        }
        Command::Perturb { data, tracks, candidates } => {
            let cfg = load_config(c, |cfg| {
                if let Some(n) = tracks {
                    cfg.eval.tracks = *n;
                }
                if let Some(m) = candidates {
                    cfg.eval.candidates = *m;
                }
                if let Some(s) = c.seed {
                    cfg.eval.seed = s;
                }
            })?;
            let videos = VideoSet::load(&manifest(&data_dir(data))?)?;
            log::info!("perturb: {} tracks x {} candidates, seed {}", cfg.eval.tracks, cfg.eval.candidates, cfg.eval.seed);
            let (t, g) = perturb_tracks(&videos, &cfg.perturbation, cfg.eval.tracks, cfg.eval.candidates, cfg.eval.seed)?;
            write_json(&out.join("candidates.json"), &t)?;
            write_json(&out.join("gt.json"), &g)?;
        }
        Command::Train { data, steps, resume } => {
            let cfg = load_config(c, |cfg| {
                if let Some(s) = steps {
                    cfg.training.steps = *s;
                }
                if let Some(s) = c.seed {
                    cfg.training.seed = s;
                }
            })?;
            let mut trainer = match resume {
                Some(path) => {
                    let mut t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
                    t.config.steps = cfg.training.steps;
                    log::info!("resuming {} at step {}", path.display(), t.step);
                    t
                }
                None => {
                    let ds = dataset_of(&manifest(&data_dir(data))?, &cfg)?;
                    Trainer::new(cfg.model.clone(), ds, cfg.training.clone())?
                }
            };
            log::info!(
                "train: {} steps, training seed {}, data seed {}",
                trainer.config.steps,
                trainer.config.seed,
                trainer.dataset.seed
            );
            let ckdir = out.join("checkpoints");
            let log = trainer.run(Some(&ckdir), |e| {
                if e.step % 50 == 0 || e.step + 1 == cfg.training.steps {
                    log::info!("step {} loss {:.5} lr {:.3e}", e.step, e.loss, e.lr);
                }
            })?;
            trainer.checkpoint().save(&out.join("verifier.ckpt"))?;
            log::info!("wrote {}", out.join("verifier.ckpt").display());
            write_json(&out.join("train_log.json"), &log)?;
        }
        Command::Score { checkpoint, data, candidates } => {
            let ck = Checkpoint::load(&or_out(checkpoint, "verifier.ckpt"))?;
            let videos = VideoSet::load(&manifest(&data_dir(data))?)?;
            let tracks: Vec<TrackRecord> = read_json(&or_out(candidates, "candidates.json"))?;
            let scores = score_tracks(&ck.params, &videos, &tracks)?;
            write_json(&out.join("scores.json"), &scores)?;
        }
        Command::Select {
            method,
            candidates,
            scores,
            gt,
        } => {
            let cfg = load_config(c, |cfg| {
                if let Some(s) = c.seed {
                    cfg.eval.seed = s;
                }
            })?;
            if *method == SelectorKind::Oracle && gt.is_none() {
                return Err(Failure::Usage("select --method oracle needs --gt <ground-truth file>".into()));
            }
            if *method == SelectorKind::Verifier && scores.is_none() {
                return Err(Failure::Usage("select --method verifier needs --scores <scores file>".into()));
            }
            let tracks: Vec<TrackRecord> = read_json(&or_out(candidates, "candidates.json"))?;
            let scores: Option<Vec<ScoreRecord>> = scores.as_deref().map(read_json).transpose()?;
            let gt: Option<Vec<GroundTruthRecord>> = gt.as_deref().map(read_json).transpose()?;
            if *method == SelectorKind::RandomTeacher {
                log::info!("random teacher seed {}", cfg.eval.seed);
            }
            let labels = select_tracks(*method, &tracks, scores.as_deref(), gt.as_deref(), cfg.eval.seed, &cfg.selection)?;
            write_json(&out.join(format!("labels_{method}.json")), &labels)?;
        }
        Command::Eval { labels, gt, aggregation } => {
            let cfg = load_config(c, |cfg| {
                if let Some(a) = aggregation {
                    cfg.eval.aggregation = *a;
                }
            })?;
            let l: Vec<LabelRecord> = read_json(labels)?;
            let g: Vec<GroundTruthRecord> = read_json(gt)?;
            let method = l.first().map(|r| r.label.method.name()).unwrap_or("empty");
            let report = evaluate_labels(method, &l, &g, cfg.eval.aggregation)?;
            log::info!("{method}: delta_avg {:.4} aj {:.4} oa {:.4}", report.delta_avg, report.aj, report.oa);
            write_json(&out.join(format!("report_{method}.json")), &report)?;
        }
        Command::Plot { gt, labels, track } => {
            let g: Vec<GroundTruthRecord> = read_json(gt)?;
            let mut curves = Vec::new();
            let mut reports: Vec<EvalReport> = Vec::new();
            for path in labels {
                let l: Vec<LabelRecord> = read_json(path)?;
                let method = l.first().map(|r| r.label.method.name()).unwrap_or("empty").to_string();
                reports.push(evaluate_labels(&method, &l, &g, Aggregation::PerTrack)?);
                let pos = l
                    .iter()
                    .position(|r| r.id == *track)
                    .ok_or_else(|| Failure::Usage(format!("{} has no track {track}", path.display())))?;
                let curve = error_curves(&l[pos..=pos], &g)?.remove(0);
                curves.push((method, curve));
            }
            fs::create_dir_all(out).map_err(trackverify::Error::from)?;
            let p = out.join("error_curves.svg");
            fs::write(&p, plot::error_curves(&curves, *track)).map_err(trackverify::Error::from)?;
            log::info!("wrote {}", p.display());
            let p = out.join("delta_avg.svg");
            fs::write(&p, plot::bar_chart(&reports)).map_err(trackverify::Error::from)?;
            log::info!("wrote {}", p.display());
        }
        Command::Gradcheck {
            width,
            frames,
            candidates,
            epsilon,
            tolerance,
        } => {
            let seed = c.seed.unwrap_or(0);
            log::info!("gradcheck seed {seed}");
            let opts = GradCheck {
                epsilon: *epsilon,
                ..Default::default()
            };
            let r = run_gradient_check(*width, *frames, *candidates, seed, opts)?;
            write_json(&out.join("gradcheck.json"), &r)?;
            println!("max relative error {:.3e} at {}", r.max_rel_error, r.worst);
            if !(r.max_rel_error < *tolerance) {
                return Err(Failure::Runtime(format!("gradient check exceeded tolerance {tolerance:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
