//! `mmw`: dataset generation, impairment, training, evaluation and sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmw_core::evalkit::{
    ablate, ablation_csv, dump_attention, evaluate, robustness_sweep, sweep_csv, DataConfig, Predictor,
};
use mmw_core::model::{samples_for_split, train, ModalitySet, ModelConfig, Network};
use mmw_core::scene::{frame_seed, gen_dataset, label_frame, load_dataset, GenConfig, Split};
use mmw_core::weather::WeatherPreset;
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] mmw_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Verification(_) => 3,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mmw", version, about = "Synthetic mmWave beam prediction workflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Workers {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled dataset with LiDAR and camera streams.
    Gen {
        /// Generation config (JSON, format "mmw-gen/1"); built-in defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        workers: Workers,
    },
    /// Apply a weather preset to the LiDAR and camera streams of a dataset.
    Impair {
        #[arg(long = "in")]
        input: PathBuf,
        /// Built-in preset (sunny, fog_heavy, rain_heavy) or a preset file.
        #[arg(long)]
        weather: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: Workers,
    },
    /// Train a model and save the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model config (JSON, format "mmw-model/1"); built-in defaults if omitted.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (default: `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        workers: Workers,
    },
    /// Evaluate a predictor on the test split.
    Eval {
        /// Checkpoint; required for the model predictor.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = PredictorArg::Model)]
        predictor: PredictorArg,
        /// Shorthand for `--predictor oracle`.
        #[arg(long, conflicts_with = "predictor")]
        oracle: bool,
        /// Seed of the random predictor.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also dump the LiDAR pooling attention of this history sensor frame.
        #[arg(long)]
        dump_attention: Option<usize>,
        /// Test sample used for the attention dump.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[command(flatten)]
        workers: Workers,
    },
    /// Train and evaluate every cell of the requested ablation axes.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of {modalities, bgam}.
        #[arg(long, value_delimiter = ',', default_value = "modalities,bgam")]
        axes: Vec<String>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: Workers,
    },
    /// Evaluate a checkpoint on test sets regenerated with other antenna counts.
    SweepNt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        nt: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the random reference predictor.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        workers: Workers,
    },
    /// Recompute every label from stored paths and compare with the stored ones.
    Oracle {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        workers: Workers,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PredictorArg {
    Model,
    Persistence,
    Random,
    Oracle,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| mmw_core::Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        mmw_core::Error::Format {
            path: path.into(),
            detail: e.to_string(),
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| mmw_core::Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| {
        mmw_core::Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

fn set_workers(w: Workers) -> CliResult {
    if let Some(n) = w.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn model_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(config: Option<PathBuf>, out: PathBuf, seed: u64) -> CliResult {
    let cfg: GenConfig = match config {
        Some(p) => read_json(&p)?,
        None => GenConfig::default(),
    };
    let m = gen_dataset(&cfg, seed, &out)?;
    log::info!("wrote {} / {} / {} trajectories to {}", m.train.len(), m.val.len(), m.test.len(), out.display());
    Ok(())
}

fn cmd_impair(input: PathBuf, weather: String, out: PathBuf) -> CliResult {
    let preset = WeatherPreset::resolve(&weather)?;
    let mut ds = load_dataset(&input)?;
    let depth_ref = ds.manifest.config.sensors.cam_depth_ref_m;
    for split in Split::ALL {
        for traj in ds.split_mut(split) {
            let seed = traj.entry.seed;
            for f in &mut traj.frames {
                if let Some(c) = &f.point_cloud {
                    f.point_cloud = Some(preset.apply_lidar(c, frame_seed(seed, f.t_index)));
                }
                if let Some(img) = &f.image {
                    f.image = Some(preset.apply_camera(img, depth_ref));
                }
            }
        }
    }
    ds.write(&out)?;
    log::info!("applied `{}` to {}", preset.name, out.display());
    Ok(())
}

fn cmd_train(data: PathBuf, cfg_path: Option<PathBuf>, out: PathBuf, log_path: Option<PathBuf>) -> CliResult {
    let cfg = model_config(cfg_path.as_deref())?;
    let ds = load_dataset(&data)?;
    let tr = samples_for_split(&ds, Split::Train, &cfg)?;
    let va = samples_for_split(&ds, Split::Val, &cfg)?;
    log::info!("{} training and {} validation samples", tr.len(), va.len());
    let mut net = Network::new(cfg)?;
    let log = train(&mut net, &tr, &va)?;
    let dc = DataConfig {
        gen: ds.manifest.config.clone(),
        seed: ds.manifest.seed,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| mmw_core::Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    net.save(&out, serde_json::to_value(&dc).map_err(mmw_core::Error::from)?)?;
    let log_path = log_path.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.csv");
        p.into()
    });
    write_text(&log_path, &log.to_csv())?;
    log::info!("best epoch {} (val loss {:.4})", log.best_epoch, log.best_val_loss);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: Option<PathBuf>,
    data: PathBuf,
    report: PathBuf,
    predictor: PredictorArg,
    seed: u64,
    dump: Option<usize>,
    sample: usize,
) -> CliResult {
    let net = match &ckpt {
        Some(p) => Some(Network::load(p)?.0),
        None => None,
    };
    let cfg = match &net {
        Some(n) => n.config.clone(),
        None => ModelConfig {
            modalities: ModalitySet::Index,
            ..ModelConfig::default()
        },
    };
    let ds = load_dataset(&data)?;
    let te = samples_for_split(&ds, Split::Test, &cfg)?;
    let pred = match predictor {
        PredictorArg::Model => {
            Predictor::Model(net.as_ref().ok_or_else(|| CliError::Usage("the model predictor needs --ckpt".into()))?)
        }
        PredictorArg::Persistence => Predictor::Persistence,
        PredictorArg::Random => Predictor::Random { seed },
        PredictorArg::Oracle => Predictor::Oracle,
    };
    let rep = evaluate(pred, &te, cfg.q_beams)?;
    rep.write(&report)?;
    println!(
        "{}: {} samples, avg gain {:.4}, acc@1 {:.4}, acc@3 {:.4}",
        rep.predictor, rep.samples, rep.avg_gain, rep.avg_acc1, rep.avg_acc3
    );
    if let Some(frame) = dump {
        let net = net.as_ref().ok_or_else(|| CliError::Usage("--dump-attention needs --ckpt".into()))?;
        let s = te.get(sample).ok_or_else(|| CliError::Usage(format!("no test sample {sample}")))?;
        dump_attention(net, s, frame)?.write(&report.join("attention"))?;
    }
    Ok(())
}

fn cmd_ablate(data: PathBuf, axes: Vec<String>, cfg_path: Option<PathBuf>, out: PathBuf) -> CliResult {
    let base = model_config(cfg_path.as_deref())?;
    for a in &axes {
        if a != "modalities" && a != "bgam" {
            return Err(CliError::Usage(format!("unknown ablation axis `{a}`")));
        }
    }
    let mods: Vec<ModalitySet> = if axes.iter().any(|a| a == "modalities") {
        ModalitySet::ALL.to_vec()
    } else {
        vec![base.modalities]
    };
    let bgam: Vec<bool> = if axes.iter().any(|a| a == "bgam") {
        vec![true, false]
    } else {
        vec![base.bgam]
    };
    let ds = load_dataset(&data)?;
    let rows = ablate(&ds, &base, &mods, &bgam)?;
    let csv = ablation_csv(&rows);
    write_text(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(ckpt: PathBuf, nt: Vec<usize>, out: PathBuf, seed: u64) -> CliResult {
    let (net, dc) = Network::load(&ckpt)?;
    let dc: DataConfig = serde_json::from_value(dc).map_err(mmw_core::Error::from)?;
    let rows = robustness_sweep(&net, &dc, &nt, seed)?;
    let csv = sweep_csv(&rows);
    write_text(&out.join("sweep.csv"), &csv)?;
    for r in &rows {
        r.model.write(&out.join(format!("nt{}", r.n_t)))?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_oracle(data: PathBuf) -> CliResult {
    let ds = load_dataset(&data)?;
    let cfg = &ds.manifest.config;
    let (tx, rx) = cfg.codebooks()?;
    let mut checked = 0;
    let mut bad = Vec::new();
    for split in Split::ALL {
        for traj in ds.split(split) {
            for f in &traj.frames {
                let s = label_frame(&f.paths, &cfg.array, &cfg.subcarriers, &tx, &rx)?;
                let gains_ok = f.tx_gains.as_deref().map_or(true, |g| g == s.optimal_tx_row());
                if [s.p_star, s.q_star] != f.optimal_pair || !gains_ok {
                    bad.push(format!("{}/{} tick {}", split.name(), traj.entry.id, f.t_index));
                }
                checked += 1;
            }
        }
    }
    if !bad.is_empty() {
        for b in bad.iter().take(10) {
            eprintln!("label mismatch: {b}");
        }
        return Err(CliError::Verification(format!("{} of {checked} labels differ", bad.len())));
    }
    println!("{checked} labels verified");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            workers,
        } => {
            set_workers(workers)?;
            cmd_gen(config, out, seed)
        }
        Command::Impair {
            input,
            weather,
            out,
            workers,
        } => {
            set_workers(workers)?;
            cmd_impair(input, weather, out)
        }
        Command::Train {
            data,
            model_config,
            out,
            log,
            workers,
        } => {
            set_workers(workers)?;
            cmd_train(data, model_config, out, log)
        }
        Command::Eval {
            ckpt,
            data,
            report,
            predictor,
            oracle,
            seed,
            dump_attention,
            sample,
            workers,
        } => {
            set_workers(workers)?;
            let predictor = if oracle { PredictorArg::Oracle } else { predictor };
            cmd_eval(ckpt, data, report, predictor, seed, dump_attention, sample)
        }
        Command::Ablate {
            data,
            axes,
            model_config,
            out,
            workers,
        } => {
            set_workers(workers)?;
            cmd_ablate(data, axes, model_config, out)
        }
        Command::SweepNt {
            ckpt,
            nt,
            out,
            seed,
            workers,
        } => {
            set_workers(workers)?;
            cmd_sweep(ckpt, nt, out, seed)
        }
        Command::Oracle { data, workers } => {
            set_workers(workers)?;
            cmd_oracle(data)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMW_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
