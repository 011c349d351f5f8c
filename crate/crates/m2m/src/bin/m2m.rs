//! Operator entry points: dataset generation, training, evaluation,
//! ablations, and hyperparameter sweeps, all driven by one TOML run file.
//! Every command is deterministic under (config, seed) and stamps its
//! outputs with the config hash.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort,
//! 4 I/O error.

use clap::{Parser, Subcommand};

use m2m::checkpoint::{self, Checkpoint, CheckpointError};
use m2m::config::{ConfigError, Mode, ModelConfig, RunConfig, Variant};
use m2m::datagen::{self, io as dataio, DataError, DatasetMeta, Sample};
use m2m::features::{Batch, FeatureError, Featurizer};
use m2m::model::{build_model, rebuild_model, Model};
use m2m::tensor::{ParamStore, TensorError};
use m2m::train::{
    evaluate, history_csv, train_resumable, MetricsReport, TrainError, TrainOutcome,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "m2m",
    version,
    about = "Multi-scenario multi-task count forecasting: data, training, evaluation"
)]
struct Cli {
    /// Run configuration file (TOML); every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in both the train and gen-data sections.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the model variant: m2m | single_task | shared_bottom | mmoe.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// With no verb, the config's `mode` field decides what runs.
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic panel and its metadata sidecar.
    GenData,
    /// Train the configured variant; writes checkpoint, history, summary.
    Train {
        /// Continue from this checkpoint; epoch numbering carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score the full model plus its three ablations on one seed.
    Ablate,
    /// Retrain from scratch at each value of one hyperparameter axis.
    Sweep {
        /// T (window length), d (scenario dimension), or K (meta layers).
        #[arg(long)]
        axis: String,
        /// Comma-separated list of axis values.
        #[arg(long)]
        values: String,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Config(_) | CliError::Feature(_) | CliError::Usage(_) => 2,
        CliError::Tensor(_) => 2,
        CliError::Data(DataError::Io(_)) => 4,
        CliError::Data(_) => 2,
        CliError::Train(t) => match t {
            TrainError::NonFinite { .. }
            | TrainError::NonPositiveRate { .. }
            | TrainError::Metrics(_) => 3,
            TrainError::Io(_) => 4,
            _ => 2,
        },
        CliError::Checkpoint(c) => match c {
            CheckpointError::Tensor(_) => 2,
            _ => 4,
        },
        CliError::Io(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn revision() -> &'static str {
    option_env!("M2M_REVISION").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.gen.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(v) = &cli.variant {
        cfg.variant = Variant::parse(v)?;
    }

    let cmd = match cli.cmd {
        Some(c) => c,
        None => match cfg.mode {
            Mode::GenData => Cmd::GenData,
            Mode::Train => Cmd::Train { resume: None },
            Mode::Eval => Cmd::Eval {
                checkpoint: cfg.out_dir.join("checkpoint.ckpt"),
            },
            Mode::Ablate => Cmd::Ablate,
            Mode::Sweep => {
                return Err(CliError::Usage(
                    "sweep needs --axis and --values on the command line".into(),
                ))
            }
        },
    };

    match cmd {
        Cmd::GenData => cmd_gen_data(&cfg),
        Cmd::Train { resume } => cmd_train(&cfg, resume.as_deref()),
        Cmd::Eval { checkpoint } => cmd_eval(&cfg, &checkpoint),
        Cmd::Ablate => cmd_ablate(&cfg),
        Cmd::Sweep { axis, values } => cmd_sweep(&cfg, &axis, &values),
    }
}

fn config_hash_hex(cfg: &RunConfig) -> String {
    format!("{:016x}", cfg.hash())
}

fn file_hash(path: &Path) -> Result<u64, CliError> {
    Ok(m2m::hash::fnv1a64(&fs::read(path)?))
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = datagen::generate(&cfg.gen)?;
    if let Some(dir) = cfg.dataset.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    dataio::save(&ds.samples, &cfg.dataset)?;
    dataio::save_meta(&ds.meta, &dataio::meta_path(&cfg.dataset))?;

    println!("config hash {}", config_hash_hex(cfg));
    println!(
        "wrote {} samples across {} scenarios to {}",
        ds.samples.len(),
        cfg.gen.n_scenarios(),
        cfg.dataset.display()
    );
    for (t, task) in cfg.gen.tasks.iter().enumerate() {
        let measured = &ds.meta.empirical_rho[t];
        for i in 0..task.rho.len() {
            for j in (i + 1)..task.rho.len() {
                println!(
                    "rho[{}] scenarios {}-{}: target {:+.3} observed {:+.3}",
                    task.name, i, j, task.rho[i][j], measured.rho[i][j]
                );
            }
        }
    }
    println!("dataset hash {:016x}", file_hash(&cfg.dataset)?);
    Ok(())
}

struct LoadedData {
    meta: DatasetMeta,
    train: Vec<Sample>,
    valid: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_split(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let samples = dataio::load(&cfg.dataset)?;
    let meta = dataio::load_meta(&dataio::meta_path(&cfg.dataset))?;
    let (train, valid, test) = datagen::split::split(samples, &cfg.split)?;
    Ok(LoadedData {
        meta,
        train,
        valid,
        test,
    })
}

/// Fits the pipeline on the train split and transforms all three splits.
/// The model config's data-shape section always follows the dataset.
fn featurize(
    model_cfg: &mut ModelConfig,
    data: &LoadedData,
) -> Result<(Featurizer, Batch, Batch, Batch), CliError> {
    let f = Featurizer::fit(&data.train, &data.meta, model_cfg.window)?;
    model_cfg.shape = f.shape().clone();
    model_cfg.validate()?;
    let tb = f.transform(&data.train)?;
    let vb = f.transform(&data.valid)?;
    let eb = f.transform(&data.test)?;
    Ok((f, tb, vb, eb))
}

fn write_run_summary(
    cfg: &RunConfig,
    out: &TrainOutcome,
    variant_label: &str,
    path: &Path,
) -> Result<(), CliError> {
    let summary = serde_json::json!({
        "config_hash": config_hash_hex(cfg),
        "seed": cfg.train.seed,
        "revision": revision(),
        "variant": variant_label,
        "best_epoch": out.best_epoch,
        "best_valid_nmae": out.best_valid_nmae,
        "epochs": out.history.len(),
    });
    fs::write(path, format!("{summary:#}\n")).map_err(CliError::Io)
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let data = load_split(cfg)?;

    let mut model_cfg = cfg.model.clone();
    let mut store = ParamStore::new();
    let (featurizer, tb, vb, _eb, mut model, start_epoch, adam_init);
    match resume {
        None => {
            let (f, t, v, e) = featurize(&mut model_cfg, &data)?;
            featurizer = f;
            tb = t;
            vb = v;
            _eb = e;
            model = build_model(&mut store, &model_cfg, cfg.variant, cfg.train.seed)?;
            start_epoch = 0;
            adam_init = None;
        }
        Some(path) => {
            // The checkpoint's pipeline and model config govern a resumed
            // run; the config file supplies data paths and the train section.
            let ck = checkpoint::load(path)?;
            model_cfg = ck.config.clone();
            featurizer = ck.featurizer.clone();
            tb = featurizer.transform(&data.train)?;
            vb = featurizer.transform(&data.valid)?;
            _eb = featurizer.transform(&data.test)?;
            store = ck.store;
            model = rebuild_model(&store, &ck.config, ck.variant, ck.baseline.as_ref())?;
            model.set_output_scales(&ck.scales);
            start_epoch = ck.epochs_done;
            adam_init = ck.adam;
        }
    }

    let (out, adam) = train_resumable(
        model.as_mut(),
        &mut store,
        &tb,
        &vb,
        &cfg.train,
        start_epoch,
        adam_init,
    )?;

    let history_path = cfg.out_dir.join("history.csv");
    if resume.is_some() && history_path.exists() {
        let mut body = String::new();
        for h in &out.history {
            body.push_str(&format!(
                "{},{},{},{}\n",
                h.epoch, h.train_loss, h.valid_loss, h.valid_overall_nmae
            ));
        }
        let mut existing = fs::read_to_string(&history_path)?;
        existing.push_str(&body);
        fs::write(&history_path, existing)?;
    } else {
        fs::write(&history_path, history_csv(&out.history))?;
    }

    let ck = Checkpoint {
        variant: model.variant(),
        config: model_cfg,
        baseline: model.baseline_config().cloned(),
        scales: model.output_scales(),
        config_hash: config_hash_hex(cfg),
        epochs_done: start_epoch + cfg.train.epochs,
        featurizer,
        store,
        adam: Some(adam),
    };
    checkpoint::save(&cfg.out_dir.join("checkpoint.ckpt"), &ck)?;
    write_run_summary(cfg, &out, model.variant().label(), &cfg.out_dir.join("run.json"))?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;

    for h in &out.history {
        println!(
            "epoch {:>3}  train loss {:.5}  valid loss {:.5}  valid NMAE {:.5}",
            h.epoch, h.train_loss, h.valid_loss, h.valid_overall_nmae
        );
    }
    println!(
        "kept epoch {} (valid NMAE {:.5}); checkpoint at {}",
        out.best_epoch,
        out.best_valid_nmae,
        cfg.out_dir.join("checkpoint.ckpt").display()
    );
    Ok(())
}

fn eval_checkpoint(cfg: &RunConfig, ck: &Checkpoint, test: &[Sample]) -> Result<MetricsReport, CliError> {
    let batch = ck.featurizer.transform(test)?;
    let mut model = rebuild_model(&ck.store, &ck.config, ck.variant, ck.baseline.as_ref())?;
    model.set_output_scales(&ck.scales);
    let report = evaluate(model.as_ref(), &ck.store, &batch, cfg.train.batch_size)?;
    Ok(report.with_run_info(&ck.config_hash, cfg.train.seed, revision()))
}

fn cmd_eval(cfg: &RunConfig, ckpt_path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let data = load_split(cfg)?;
    let ck = checkpoint::load(ckpt_path)?;
    let report = eval_checkpoint(cfg, &ck, &data.test)?;

    fs::write(cfg.out_dir.join("metrics.csv"), report.cells_csv())?;
    fs::write(cfg.out_dir.join("summary.csv"), report.summary_csv())?;
    println!(
        "pooled  overall: NMAE {:.5}  SMAPE {:.5}  ({} residuals)",
        report.pooled.nmae, report.pooled.smape, report.pooled.n
    );
    println!(
        "macro   overall: NMAE {:.5}  SMAPE {:.5}  ({} cells)",
        report.macro_avg.nmae, report.macro_avg.smape, report.macro_avg.n
    );
    println!("checkpoint config hash {}", report.config_hash);
    Ok(())
}

/// The three meta-stage ablations, as (label, flag setter) pairs.
fn ablation_fixtures() -> Vec<(&'static str, fn(&mut ModelConfig))> {
    vec![
        ("full", |_| {}),
        ("wo_mt", |c| c.disable_meta_tower = true),
        ("wo_ma", |c| c.disable_meta_attention = true),
        ("wo_tl", |c| c.disable_transformer = true),
    ]
}

fn train_once(
    model_cfg: &ModelConfig,
    variant: Variant,
    cfg: &RunConfig,
    tb: &Batch,
    vb: &Batch,
) -> Result<(Box<dyn Model>, ParamStore), CliError> {
    let mut store = ParamStore::new();
    let mut model = build_model(&mut store, model_cfg, variant, cfg.train.seed)?;
    train_resumable(model.as_mut(), &mut store, tb, vb, &cfg.train, 0, None)?;
    Ok((model, store))
}

fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let hash_before = file_hash(&cfg.dataset)?;
    let data = load_split(cfg)?;
    let mut model_cfg = cfg.model.clone();
    let (_f, tb, vb, eb) = featurize(&mut model_cfg, &data)?;
    let hash_hex = config_hash_hex(cfg);

    let mut rows: Vec<(u32, usize, &'static str, f64, f64, usize)> = Vec::new();
    for (label, tweak) in ablation_fixtures() {
        let mut mc = model_cfg.clone();
        tweak(&mut mc);
        let (model, store) = train_once(&mc, Variant::M2m, cfg, &tb, &vb)?;
        let report = evaluate(model.as_ref(), &store, &eb, cfg.train.batch_size)?;
        println!(
            "{label:<6} pooled NMAE {:.5}  SMAPE {:.5}",
            report.pooled.nmae, report.pooled.smape
        );
        for c in &report.cells {
            rows.push((c.scenario, c.task, label, c.nmae, c.smape, c.n));
        }
    }
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut csv = String::from("scenario,task,variant,nmae,smape,n,config_hash\n");
    for (s, t, label, nmae, smape, n) in &rows {
        csv.push_str(&format!("{s},{t},{label},{nmae},{smape},{n},{hash_hex}\n"));
    }
    let out = cfg.out_dir.join("ablation.csv");
    fs::write(&out, csv)?;

    assert_eq!(
        file_hash(&cfg.dataset)?,
        hash_before,
        "ablation must not touch the dataset"
    );
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

/// Maps a sweep axis name to the config field it varies.
fn apply_axis(axis: &str, value: usize, mc: &mut ModelConfig) -> Result<(), CliError> {
    match axis {
        "T" => mc.window = value,
        "d" => mc.d_scenario = value,
        "K" => mc.meta_depth = value,
        other => {
            return Err(CliError::Usage(format!(
                "unknown sweep axis '{other}' (expected T, d, or K)"
            )))
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, axis: &str, values: &str) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut points: Vec<usize> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("sweep value '{v}' is not a count")))
        })
        .collect::<Result<_, _>>()?;
    if points.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    points.sort_unstable();
    points.dedup();

    let hash_before = file_hash(&cfg.dataset)?;
    let data = load_split(cfg)?;
    let hash_hex = config_hash_hex(cfg);

    let mut csv = format!("{axis},nmae,smape,config_hash\n");
    for &value in &points {
        let mut model_cfg = cfg.model.clone();
        apply_axis(axis, value, &mut model_cfg)?;
        // Each point refits the pipeline: a window sweep changes the
        // featurization itself, and points stay fully independent.
        let f = Featurizer::fit(&data.train, &data.meta, model_cfg.window)?;
        model_cfg.shape = f.shape().clone();
        model_cfg.validate()?;
        let tb = f.transform(&data.train)?;
        let vb = f.transform(&data.valid)?;
        let eb = f.transform(&data.test)?;
        let (model, store) = train_once(&model_cfg, cfg.variant, cfg, &tb, &vb)?;
        let report = evaluate(model.as_ref(), &store, &eb, cfg.train.batch_size)?;
        println!(
            "{axis} = {value:>4}: pooled NMAE {:.5}  SMAPE {:.5}",
            report.pooled.nmae, report.pooled.smape
        );
        csv.push_str(&format!(
            "{value},{},{},{hash_hex}\n",
            report.pooled.nmae, report.pooled.smape
        ));
    }
    let out = cfg.out_dir.join("sweep.csv");
    fs::write(&out, csv)?;

    assert_eq!(
        file_hash(&cfg.dataset)?,
        hash_before,
        "sweep must not touch the dataset"
    );
    println!("wrote {} points to {}", points.len(), out.display());
    Ok(())
}
