use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use polarfuse::config::{Config, ConfigError};
use polarfuse::dataset::{self, DataError, Sample, Split};
use polarfuse::fingerprint::TOOL_VERSION;
use polarfuse::gradcheck;
use polarfuse::kitti::{self, CalibMatrices};
use polarfuse::metrics::{self, EvalReport};
use polarfuse::par::{self, Exec};
use polarfuse::pasting::{self, PasteError};
use polarfuse::sampling_db::{build_database_with, DbError, DenseObjectDB};
use polarfuse::scene::Scene;
use polarfuse::training::{self, AssistantSnapshot, CheckpointMeta, Prepared, TrainError, TrainOutcome};

#[derive(Parser)]
#[command(name = "polarfuse", version, about = "Polar-sampling densification and feature-supervised fusion training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.lambda=0`. Applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads; 1 selects the sequential reference path. Default: all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Shorthand for sim.seed, db.seed, train.seed and gradcheck.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate KITTI-layout train and val splits with camera grids.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the dense object database from a training split.
    BuildDb {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paste database points into every object of a split.
    Enhance {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one PLY preview per frame, added points in magenta.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Train the assistant detector on enhanced scenes.
    TrainAssistant(TrainArgs),
    /// Train the fusion detector with feature supervision from an assistant.
    TrainFusion {
        #[command(flatten)]
        args: TrainArgs,
        /// Assistant checkpoint from `train-assistant`.
        #[arg(long)]
        assistant: PathBuf,
    },
    /// Per-class AP@R40 of a checkpoint or of a detection dump on a split.
    Evaluate {
        #[arg(long)]
        split: PathBuf,
        #[arg(long, conflicts_with = "dump", required_unless_present = "dump")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<frame>.txt` dumps (`class score x y z l w h yaw`).
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Evaluate on enhanced scenes (needs --db).
        #[arg(long, requires = "db")]
        enhanced: bool,
        #[arg(long)]
        db: Option<PathBuf>,
        /// Machine-readable report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one frame as PLY; with --db, pasted points are magenta.
    ExportPly {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Dense object database used to enhance the scenes.
    #[arg(long)]
    db: PathBuf,
    /// Checkpoint to write; the log and metrics go beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Paste(#[from] PasteError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Train(TrainError::DivergedLoss { .. }) | CliError::Failed(_) => 4,
            CliError::Train(TrainError::Config(_) | TrainError::ConfigMismatch(_)) => 2,
            _ => 3,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, bytes).map_err(io(path))
}

/// `out/config.toml` for directories, `out.config.toml` for files.
fn write_resolved(cfg: &Config, out: &Path, is_dir: bool) -> Result<(), CliError> {
    let path = if is_dir {
        out.join("config.toml")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".config.toml");
        PathBuf::from(s)
    };
    let text = format!("# {TOOL_VERSION}, config hash {}\n{}", cfg.hash(), cfg.to_toml());
    write(&path, text)
}

fn beside(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct Ctx {
    cfg: Config,
    exec: Exec,
}

impl Ctx {
    fn read_split(&self, dir: &Path) -> Result<Vec<Sample>, CliError> {
        Ok(dataset::read_split(dir, self.cfg.sim.crop_margin, Some(&self.cfg.bev), self.exec)?)
    }

    fn load_db(&self, path: &Path) -> Result<DenseObjectDB, CliError> {
        let db = DenseObjectDB::load(&fs::read(path).map_err(io(path))?)?;
        if db.config != self.cfg.db {
            log::warn!("{}: database was built with a different [db] configuration", path.display());
        }
        Ok(db)
    }

    fn enhance(&self, samples: &[Sample], db: &DenseObjectDB) -> Result<Vec<Scene>, CliError> {
        let scenes: Vec<Scene> = samples.iter().map(|s| s.scene.clone()).collect();
        Ok(pasting::enhance_scenes(&scenes, db, self.exec)?)
    }

    fn prepare(&self, dir: &Path, db: &DenseObjectDB, fusion: bool) -> Result<Vec<Prepared>, CliError> {
        let samples = self.read_split(dir)?;
        let enhanced = self.enhance(&samples, db)?;
        Ok(training::prepare_all(&samples, Some(&enhanced), &self.cfg.net(fusion), self.exec))
    }
}

fn refuse_val(dir: &Path) -> Result<(), CliError> {
    if dataset::detect_split(dir) == Some(Split::Val) {
        return Err(CliError::Usage(format!(
            "{} is a validation split; the object database may only be built from training data, so validation objects never leak into training",
            dir.display()
        )));
    }
    Ok(())
}

fn save_outcome(ctx: &Ctx, out: &Path, net_fusion: bool, train_cfg: &training::TrainConfig, outcome: &TrainOutcome) -> Result<(), CliError> {
    let meta = CheckpointMeta::new(&ctx.cfg.net(net_fusion), Some(train_cfg), outcome.log.clone(), outcome.report.clone());
    write(out, training::save_checkpoint(&outcome.network, &meta))?;
    write(&beside(out, ".log.tsv"), training::log_tsv(&outcome.log))?;
    if let Some(r) = &outcome.report {
        write(&beside(out, ".metrics.json"), serde_json::to_string_pretty(r).expect("report serializes"))?;
    }
    write_resolved(&ctx.cfg, out, false)?;
    print!("{}", training::log_tsv(&outcome.log));
    if let Some(r) = &outcome.report {
        print!("{}", r.to_table());
    }
    Ok(())
}

fn report(r: &EvalReport, out: Option<&Path>) -> Result<(), CliError> {
    print!("{}", r.to_table());
    if let Some(p) = out {
        write(p, serde_json::to_string_pretty(r).expect("report serializes"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut sets = Vec::new();
    if let Some(s) = cli.global.seed {
        for k in ["sim.seed", "db.seed", "train.seed", "gradcheck.seed"] {
            sets.push(format!("{k}={s}"));
        }
    }
    sets.extend(cli.global.sets.iter().cloned());
    let cfg = Config::load(cli.global.config.as_deref(), &sets)?;
    let exec = match cli.global.threads {
        Some(0) => return Err(CliError::Usage("--threads must be at least 1".into())),
        Some(1) => Exec::Seq,
        Some(n) => {
            par::init_threads(n);
            Exec::Par
        }
        None => Exec::Par,
    };
    let ctx = Ctx { cfg, exec };
    let cfg = &ctx.cfg;

    match cli.cmd {
        Cmd::Synth { out } => {
            let calib = CalibMatrices::kitti_like();
            for split in [Split::Train, Split::Val] {
                let samples = dataset::synthesize(&cfg.sim, &cfg.bev, split, exec).map_err(DataError::from)?;
                dataset::write_split(&out.join(split.name()), split, &samples, &calib)?;
                println!("{}: {} frames", split.name(), samples.len());
            }
            write_resolved(cfg, &out, true)?;
        }
        Cmd::BuildDb { split, out } => {
            refuse_val(&split)?;
            let samples = ctx.read_split(&split)?;
            let scenes: Vec<Scene> = samples.into_iter().map(|s| s.scene).collect();
            let db = build_database_with(&scenes, &cfg.db, exec)?;
            write(&out, db.save())?;
            write_resolved(cfg, &out, false)?;
            println!("{} entries from {} frames", db.len(), scenes.len());
        }
        Cmd::Enhance { split, db, out, ply } => {
            let db = ctx.load_db(&db)?;
            let samples = ctx.read_split(&split)?;
            let enhanced = ctx.enhance(&samples, &db)?;
            let split_kind = dataset::detect_split(&split).unwrap_or(Split::Train);
            let calib = CalibMatrices::kitti_like();
            let out_samples: Vec<Sample> = samples.iter().zip(&enhanced).map(|(s, e)| Sample { scene: e.clone(), ..s.clone() }).collect();
            dataset::write_split(&out, split_kind, &out_samples, &calib)?;
            if let Some(dir) = ply {
                for e in &enhanced {
                    write(&dir.join(format!("{}.ply", e.frame_id)), kitti::scene_ply(e))?;
                }
            }
            write_resolved(cfg, &out, true)?;
            let added: usize = enhanced.iter().map(Scene::added_len).sum();
            println!("{} frames, {added} points added", enhanced.len());
        }
        Cmd::TrainAssistant(a) => {
            let db = ctx.load_db(&a.db)?;
            let fusion = cfg.assistant.camera;
            let train = ctx.prepare(&a.train, &db, fusion)?;
            let val = match &a.val {
                Some(v) => ctx.prepare(v, &db, fusion)?,
                None => Vec::new(),
            };
            let tc = cfg.assistant_train();
            let (outcome, _) = training::train_assistant(&cfg.assistant_net(), &train, &val, &tc, &cfg.eval, exec)?;
            save_outcome(&ctx, &a.out, fusion, &tc, &outcome)?;
        }
        Cmd::TrainFusion { args: a, assistant } => {
            let (anet, ameta) = training::load_checkpoint(&fs::read(&assistant).map_err(io(&assistant))?)?;
            if ameta.bev_fingerprint != cfg.bev.fingerprint() {
                return Err(TrainError::ConfigMismatch(format!("assistant BEV fingerprint {} differs from this run's {}", ameta.bev_fingerprint, cfg.bev.fingerprint())).into());
            }
            let snapshot = AssistantSnapshot::from_network(&anet).map_err(TrainError::from)?;
            let db = ctx.load_db(&a.db)?;
            let train = ctx.prepare(&a.train, &db, true)?;
            let val = match &a.val {
                Some(v) => ctx.prepare(v, &db, true)?,
                None => Vec::new(),
            };
            let outcome = training::train_fusion(&cfg.net(true), &train, &val, &snapshot, &cfg.train, &cfg.eval, exec)?;
            save_outcome(&ctx, &a.out, true, &cfg.train, &outcome)?;
        }
        Cmd::Evaluate { split, checkpoint, dump, enhanced, db, out } => {
            let loaded = match &checkpoint {
                Some(ck) => {
                    let (net, meta) = training::load_checkpoint(&fs::read(ck).map_err(io(ck))?)?;
                    if meta.bev_fingerprint != cfg.bev.fingerprint() {
                        return Err(TrainError::ConfigMismatch(format!("checkpoint BEV fingerprint {} differs from this run's {}", meta.bev_fingerprint, cfg.bev.fingerprint())).into());
                    }
                    Some(net)
                }
                None => None,
            };
            let samples = ctx.read_split(&split)?;
            let r = if let Some(net) = loaded {
                let scenes = match (&db, enhanced) {
                    (Some(d), true) => Some(ctx.enhance(&samples, &ctx.load_db(d)?)?),
                    _ => None,
                };
                let mut items = training::prepare_all(&samples, scenes.as_deref(), &net.config, exec);
                if enhanced {
                    items = training::enhanced_view(&items)?;
                }
                training::evaluate_network(&net, &items, &cfg.eval, exec)?.0
            } else {
                let dir = dump.expect("clap enforces one of checkpoint/dump");
                let mut dumps = BTreeMap::new();
                for s in &samples {
                    let p = dir.join(format!("{}.txt", s.frame_id));
                    if p.exists() {
                        let text = fs::read_to_string(&p).map_err(io(&p))?;
                        dumps.insert(s.frame_id.clone(), metrics::read_dump(&text)?);
                    }
                }
                let frames: Vec<String> = samples.iter().map(|s| s.frame_id.clone()).collect();
                let dets = metrics::align_dumps(&frames, &dumps);
                let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
                metrics::evaluate(&dets, &gts, &cfg.eval, exec)?
            };
            report(&r, out.as_deref())?;
        }
        Cmd::Gradcheck { out } => {
            let results = gradcheck::run_suite(&cfg.gradcheck, exec).map_err(|e| CliError::Failed(format!("gradient check could not run: {e}")))?;
            let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
            for r in &results {
                let w = worst.entry(r.name.as_str()).or_insert(0.0);
                *w = w.max(r.max_rel_error);
            }
            for (name, w) in &worst {
                let ok = *w < cfg.gradcheck.tolerance;
                println!("{:<20} max rel err {:.3e}  {}", name, w, if ok { "ok" } else { "FAIL" });
            }
            if let Some(p) = &out {
                write(p, serde_json::to_string_pretty(&results).expect("results serialize"))?;
            }
            let failed = results.iter().filter(|r| !r.passed(cfg.gradcheck.tolerance)).count();
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} of {} gradient checks failed", results.len())));
            }
            println!("{} checks passed", results.len());
        }
        Cmd::ExportPly { split, frame, db, out } => {
            let sample = dataset::read_frame(&split, &frame, cfg.sim.crop_margin, None)?;
            let scene = match db {
                Some(d) => pasting::enhance_scene(&sample.scene, &ctx.load_db(&d)?)?,
                None => sample.scene,
            };
            write(&out, kitti::scene_ply(&scene))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
