use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use tagsense_core::alert::{write_event, write_events_header, Monitor, MonitorConfig};
use tagsense_core::channel_sim::{default_profiles, ProfileSet};
use tagsense_core::error::StageExt;
use tagsense_core::eval::evaluate;
use tagsense_core::experiments::{
    artifacts, compare_runs, history_csv, run_experiment, simulate, to_examples, ExperimentConfig, ExperimentKind, RunSummary,
    SimulationPlan,
};
use tagsense_core::features::{
    extract_samples, fit_standardization, read_feature_csv, write_feature_csv, ExtractOptions, PhaseStats,
};
use tagsense_core::ingest::{load_reader_log, stream_reader_log, PhaseUnit};
use tagsense_core::mlp::{train, History, Model, Network};
use tagsense_core::{Error, FeatureMode, LabeledSample, MaterialClass, Result};

#[derive(Parser)]
#[command(name = "tagsense", version, about = "Classify what an RFID-tagged item is carried in")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled reader log from a session plan.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        /// Material profile CSV; bundled profiles when omitted.
        #[arg(long, alias = "profiles")]
        profile: Option<PathBuf>,
        /// Directory for reads.csv and profiles.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the bundled material profiles as CSV.
    Profiles {
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a labeled reader log into a feature CSV.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        /// single, window or window-dist.
        #[arg(long)]
        mode: FeatureMode,
        #[command(flatten)]
        read_opts: ReadOpts,
        #[arg(long, default_value_t = 1000)]
        window_ms: i64,
        #[arg(long, default_value_t = 2)]
        min_reads: usize,
        /// Arithmetic instead of circular phase statistics.
        #[arg(long)]
        naive_phase: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a preset network on the train.csv and validation.csv of a split directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// single, onesec or dist.
        #[arg(long)]
        preset: ExperimentKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated class list; the preset's classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<MaterialClass>>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Directory for model.json and history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a feature CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Feature CSV to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// Also write the evaluation as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a full experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; `runs/<config name>` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Watch a read stream and write theft-risk alerts.
    Monitor {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long = "in", conflicts_with = "stdin", required_unless_present = "stdin")]
        input: Option<PathBuf>,
        #[arg(long)]
        stdin: bool,
        #[command(flatten)]
        read_opts: ReadOpts,
        #[arg(long)]
        out: PathBuf,
        /// Pace replay by read timestamps.
        #[arg(long)]
        realtime: bool,
    },
}

#[derive(Args)]
struct ReadOpts {
    /// radians or impinj.
    #[arg(long, default_value = "radians")]
    phase_unit: PhaseUnit,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_profiles(path: Option<&Path>) -> Result<ProfileSet> {
    path.map_or_else(|| Ok(default_profiles()), ProfileSet::load)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufReader::new(file))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn load_features(path: &Path) -> Result<Vec<LabeledSample>> {
    Ok(read_feature_csv(open(path)?)?.1)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate { plan, profile, out } => {
            let plan = SimulationPlan::load(&plan).stage("config")?;
            let profiles = load_profiles(profile.as_deref()).stage("profiles")?;
            let log = simulate(&plan, &profiles).stage("simulate")?;
            create_dir(&out)?;
            profiles.write_csv(create(&out.join(artifacts::PROFILES))?)?;
            let reads = out.join(artifacts::READS);
            log.write_csv(create(&reads)?)?;
            println!("wrote {} reads to {}", log.len(), reads.display());
        }
        Command::Profiles { out } => default_profiles().write_csv(create(&out)?)?,
        Command::Extract {
            input,
            mode,
            read_opts,
            window_ms,
            min_reads,
            naive_phase,
            out,
        } => {
            let log = load_reader_log(&input, read_opts.phase_unit).stage("ingest")?;
            let opts = ExtractOptions {
                window_ms,
                min_reads,
                phase_stats: if naive_phase { PhaseStats::Naive } else { PhaseStats::Circular },
            };
            let samples = extract_samples(&log, mode, &opts).stage("features")?;
            write_feature_csv(&samples, mode, create(&out)?)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train {
            data,
            preset,
            seed,
            classes,
            max_epochs,
            out,
        } => {
            let mut cfg = ExperimentConfig::full_scale(preset, seed);
            cfg.classes = classes;
            cfg.train.max_epochs = max_epochs;
            cfg.validate().stage("config")?;
            let train_set = load_features(&data.join(artifacts::TRAIN)).stage("ingest")?;
            let val_set = load_features(&data.join(artifacts::VALIDATION)).stage("ingest")?;
            let (model, history) = train_model(&cfg, &train_set, &val_set).stage("train")?;
            create_dir(&out)?;
            let model_path = out.join(artifacts::MODEL);
            model.save(&model_path)?;
            create(&out.join(artifacts::HISTORY))?.write_all(history_csv(&history).as_bytes())?;
            println!(
                "trained {} epochs (best {}, val loss {:.4}); model written to {}",
                history.epochs(),
                history.best_epoch,
                history.val_loss[history.best_epoch - 1],
                model_path.display()
            );
        }
        Command::Eval { model, data, json } => {
            let model = Model::load(&model).stage("model")?;
            let test = load_features(&data).stage("ingest")?;
            let evaluation = evaluate(&model, &test).stage("evaluate")?;
            print!("{}", evaluation.render());
            if let Some(path) = json {
                create(&path)?.write_all(evaluation.to_json()?.as_bytes())?;
            }
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config).stage("config")?;
            let out = out.unwrap_or_else(|| {
                let name = config.file_stem().unwrap_or(config.as_os_str());
                Path::new("runs").join(name)
            });
            let started = Instant::now();
            let report = run_experiment(&cfg, &out)?;
            println!(
                "{:?}: test accuracy {:.4} after {} epochs ({:.1} s); artifacts in {}",
                report.metrics.kind,
                report.accuracy(),
                report.metrics.epochs_run,
                started.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Command::Compare { runs } => {
            let summaries = runs
                .iter()
                .map(|d| RunSummary::load(d).stage("compare"))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare_runs(&summaries).stage("compare")?;
            print!("{}", cmp.render());
        }
        Command::Monitor {
            model,
            policy,
            input,
            stdin: _,
            read_opts,
            out,
            realtime,
        } => {
            let model = Model::load(&model).stage("model")?;
            let config = MonitorConfig::load(&policy).stage("config")?;
            let source: Box<dyn Read> = match &input {
                Some(p) => Box::new(open(p)?),
                None => Box::new(io::stdin().lock()),
            };
            monitor(model, config, source, read_opts.phase_unit, &out, realtime)?;
        }
    }
    Ok(())
}

fn train_model(cfg: &ExperimentConfig, train_set: &[LabeledSample], val_set: &[LabeledSample]) -> Result<(Model, History)> {
    let classes = cfg.classes();
    let std = fit_standardization(train_set)?;
    let t = to_examples(train_set, &std, &classes)?;
    let v = to_examples(val_set, &std, &classes)?;
    let (net, history) = train(Network::init(cfg.network_spec())?, &t, &v, &cfg.train_config())?;
    Ok((Model::new(net, classes, std, cfg.extract.phase_stats)?, history))
}

fn monitor(model: Model, config: MonitorConfig, source: impl Read, unit: PhaseUnit, out: &Path, realtime: bool) -> Result<()> {
    let mut monitor = Monitor::new(model, config).stage("config")?;
    let mut sink = create(out)?;
    write_events_header(&mut sink)?;
    let mut clock: Option<(Instant, i64)> = None;
    for entry in stream_reader_log(source, unit).stage("ingest")? {
        let read = entry.stage("ingest")?.read;
        if realtime {
            let (t0, ts0) = *clock.get_or_insert((Instant::now(), read.timestamp_ms));
            let due = t0 + Duration::from_millis((read.timestamp_ms - ts0).max(0) as u64);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        for e in monitor.process_read(read).stage("monitor")? {
            write_event(&mut sink, &e)?;
            // Each alert is visible downstream as soon as it is raised.
            sink.flush()?;
        }
    }
    for e in monitor.flush().stage("monitor")? {
        write_event(&mut sink, &e)?;
    }
    sink.flush()?;
    let m = monitor.drain_metrics();
    eprintln!(
        "reads seen {}, dropped {}, windows evaluated {}, events {}",
        m.reads_seen, m.reads_dropped, m.windows_evaluated, m.events_emitted
    );
    Ok(())
}
