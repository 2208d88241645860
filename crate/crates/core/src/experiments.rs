//! End-to-end experiment runs: simulate (or import) reads, build features,
//! balance, split, standardize, train, evaluate, and persist every artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_sim::{default_profiles, generate_session, ChannelConfig, ProfileSet, SessionSpec};
use crate::data_prep::{balance_classes, split, SplitFractions};
use crate::domain::{FeatureMode, LabeledSample, MaterialClass};
use crate::error::{read_file, write_file, Error, Result, StageExt};
use crate::eval::{evaluate, Evaluation};
use crate::features::{extract_samples, fit_standardization, write_feature_csv, ExtractOptions, StandardizationParams};
use crate::ingest::{load_reader_log, LogEntry, PhaseUnit, ReaderLog};
use crate::mlp::{train, AdamConfig, Example, History, Model, Network, NetworkSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Two features from each individual read.
    SinglePoint,
    /// Four window statistics per one-second window.
    OneSecond,
    /// Window statistics plus the tag-to-reader distance.
    WithDistance,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 3] = [
        ExperimentKind::SinglePoint,
        ExperimentKind::OneSecond,
        ExperimentKind::WithDistance,
    ];

    pub fn feature_mode(self) -> FeatureMode {
        match self {
            ExperimentKind::SinglePoint => FeatureMode::SinglePoint,
            ExperimentKind::OneSecond => FeatureMode::WindowStats,
            ExperimentKind::WithDistance => FeatureMode::WindowStatsDist,
        }
    }

    /// Hidden layer widths of the preset network.
    pub fn hidden_layers(self) -> Vec<usize> {
        match self {
            ExperimentKind::SinglePoint => NetworkSpec::single_point(0).hidden_layers,
            ExperimentKind::OneSecond => NetworkSpec::one_second(0).hidden_layers,
            ExperimentKind::WithDistance => NetworkSpec::with_distance(0).hidden_layers,
        }
    }

    pub fn default_classes(self) -> Vec<MaterialClass> {
        use MaterialClass::*;
        match self {
            ExperimentKind::SinglePoint | ExperimentKind::OneSecond => MaterialClass::ALL.to_vec(),
            ExperimentKind::WithDistance => vec![Control, PlasticBox, FabricBag, Backpack],
        }
    }

    /// Full-scale collection plan: ten minutes at 2 m, or two minutes at
    /// each of 0.3, 1 and 2 m for the distance experiment.
    pub fn default_sessions(self) -> Vec<SessionPlanEntry> {
        let at = |distance_m, duration_s| SessionPlanEntry {
            distance_m,
            duration_s,
            classes: None,
        };
        match self {
            ExperimentKind::SinglePoint | ExperimentKind::OneSecond => vec![at(2.0, 600.0)],
            ExperimentKind::WithDistance => vec![at(0.3, 120.0), at(1.0, 120.0), at(2.0, 120.0)],
        }
    }

    pub fn preset_name(self) -> &'static str {
        match self {
            ExperimentKind::SinglePoint => "single",
            ExperimentKind::OneSecond => "onesec",
            ExperimentKind::WithDistance => "dist",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_point" => Ok(ExperimentKind::SinglePoint),
            "onesec" | "one_second" => Ok(ExperimentKind::OneSecond),
            "dist" | "with_distance" => Ok(ExperimentKind::WithDistance),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

/// One simulated session per listed class (all classes when `classes` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionPlanEntry {
    pub distance_m: f64,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<MaterialClass>>,
}

/// What to simulate: channel parameters and a session list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationPlan {
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default = "all_classes")]
    pub classes: Vec<MaterialClass>,
    pub sessions: Vec<SessionPlanEntry>,
}

fn all_classes() -> Vec<MaterialClass> {
    MaterialClass::ALL.to_vec()
}

impl SimulationPlan {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&read_file(path)?)?)
    }

    fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        if self.sessions.is_empty() {
            return Err(Error::Config("plan has no sessions".into()));
        }
        for class in &self.classes {
            let covered = self
                .sessions
                .iter()
                .any(|s| s.classes.as_ref().is_none_or(|cs| cs.contains(class)));
            if !covered {
                return Err(Error::Config(format!("no session covers class {class}")));
            }
        }
        Ok(())
    }
}

/// Stable tag id for a simulated (class, session) pair.
pub fn simulated_tag_id(class: MaterialClass, session: usize) -> String {
    format!("E2801160{:02X}{:04X}", class.index(), session)
}

/// Runs every session of the plan and merges the reads by timestamp.
///
/// Each (class, session) pair draws from its own random stream of
/// `plan.channel.seed`, so the result does not depend on class order.
pub fn simulate(plan: &SimulationPlan, profiles: &ProfileSet) -> Result<ReaderLog> {
    plan.validate()?;
    let mut entries = Vec::new();
    for &class in &plan.classes {
        for (j, s) in plan.sessions.iter().enumerate() {
            if s.classes.as_ref().is_some_and(|cs| !cs.contains(&class)) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(plan.channel.seed);
            rng.set_stream((class.index() as u64) << 32 | j as u64);
            let spec = SessionSpec {
                tag_id: simulated_tag_id(class, j),
                antenna_port: 1,
                start_ms: 0,
                distance_m: s.distance_m,
                duration_s: s.duration_s,
            };
            let reads = generate_session(&plan.channel, profiles.get(class), &spec, &mut rng)?;
            entries.extend(reads.into_iter().map(|read| LogEntry {
                read,
                label: Some(class),
            }));
        }
    }
    entries.sort_by_key(|e| e.read.timestamp_ms);
    let mut log = ReaderLog::new("simulated");
    log.entries = entries;
    Ok(log)
}

/// Optional overrides of the preset training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Profile CSV; the bundled profiles when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles: Option<PathBuf>,
    /// Reader-log CSV to use instead of simulating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reads: Option<PathBuf>,
    #[serde(default)]
    pub phase_unit: PhaseUnit,
    /// Class subset; the kind's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<MaterialClass>>,
    /// Hidden widths; the kind's preset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub extract: ExtractOptions,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub train: TrainOverrides,
    /// Session plan; the kind's full-scale plan when empty.
    #[serde(default)]
    pub sessions: Vec<SessionPlanEntry>,
}

/// Safety cap on training length; early stopping normally ends runs long before.
pub const MAX_EPOCHS: usize = 500;

/// splitmix64 of `seed + stream`, for deriving per-stage seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    /// The kind's preset network, class set and full-scale session plan.
    pub fn full_scale(kind: ExperimentKind, seed: u64) -> Self {
        ExperimentConfig {
            kind,
            seed,
            profiles: None,
            reads: None,
            phase_unit: PhaseUnit::Radians,
            classes: None,
            hidden_layers: None,
            channel: ChannelConfig::default(),
            extract: ExtractOptions::default(),
            split: SplitFractions::default(),
            train: TrainOverrides::default(),
            sessions: kind.default_sessions(),
        }
    }

    /// Parses a TOML config; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        for p in [&mut cfg.profiles, &mut cfg.reads].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&read_file(path)?, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn classes(&self) -> Vec<MaterialClass> {
        self.classes.clone().unwrap_or_else(|| self.kind.default_classes())
    }

    pub fn sessions(&self) -> Vec<SessionPlanEntry> {
        if self.sessions.is_empty() {
            self.kind.default_sessions()
        } else {
            self.sessions.clone()
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.kind.feature_mode().dim(),
            hidden_layers: self.hidden_layers.clone().unwrap_or_else(|| self.kind.hidden_layers()),
            output_dim: self.classes().len(),
            seed: derive_seed(self.seed, 3),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::default();
        let o = &self.train;
        TrainConfig {
            batch_size: o.batch_size.unwrap_or(base.batch_size),
            learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
            max_epochs: o.max_epochs.unwrap_or(MAX_EPOCHS),
            adam: o.adam.unwrap_or(base.adam),
            patience: o.patience.unwrap_or(base.patience),
            min_delta: o.min_delta.unwrap_or(base.min_delta),
            shuffle_seed: derive_seed(self.seed, 4),
        }
    }

    pub fn simulation_plan(&self) -> SimulationPlan {
        SimulationPlan {
            channel: ChannelConfig {
                seed: derive_seed(self.seed, 0),
                ..self.channel
            },
            classes: self.classes(),
            sessions: self.sessions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.classes();
        if classes.len() < 2 {
            return Err(Error::Config("at least two classes are needed".into()));
        }
        let mut unique = classes.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != classes.len() {
            return Err(Error::Config("class subset lists a class twice".into()));
        }
        self.network_spec().validate()?;
        self.train_config().validate()?;
        self.split.validate()?;
        if self.reads.is_none() {
            self.simulation_plan().validate()?;
        }
        Ok(())
    }
}

/// Everything written to `metrics.json`. Contains no paths, so identical
/// runs in different directories produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub classes: Vec<MaterialClass>,
    pub reads: usize,
    /// Samples per class before balancing, in `classes` order.
    pub samples_per_class: Vec<usize>,
    pub balanced_per_class: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_val_loss: f64,
    pub test_accuracy: f64,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub metrics: RunMetrics,
    pub history: History,
    pub model: Model,
    pub dir: PathBuf,
}

impl ExperimentReport {
    pub fn accuracy(&self) -> f64 {
        self.metrics.test_accuracy
    }
}

/// File names inside a run directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.toml";
    pub const PROFILES: &str = "profiles.csv";
    pub const READS: &str = "reads.csv";
    pub const FEATURES: &str = "features.csv";
    pub const TRAIN: &str = "train.csv";
    pub const VALIDATION: &str = "validation.csv";
    pub const TEST: &str = "test.csv";
    pub const SPLIT: &str = "split.json";
    pub const MODEL: &str = "model.json";
    pub const HISTORY: &str = "history.csv";
    pub const CONFUSION: &str = "confusion.csv";
    pub const METRICS: &str = "metrics.json";
    pub const REPORT: &str = "report.txt";
}

pub fn to_examples(samples: &[LabeledSample], std: &StandardizationParams, classes: &[MaterialClass]) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let target = classes
                .iter()
                .position(|c| *c == s.label)
                .ok_or_else(|| Error::domain(format!("label {} not in class set", s.label)))?;
            Ok(Example {
                input: std.apply(&s.features)?.into_values(),
                target,
            })
        })
        .collect()
}

/// `epoch,train_loss,val_loss` with 1-based epochs.
pub fn history_csv(h: &History) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for (i, (t, v)) in h.train_loss.iter().zip(&h.val_loss).enumerate() {
        writeln!(out, "{},{t},{v}", i + 1).unwrap();
    }
    out
}

fn csv_bytes(log: &ReaderLog) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    Ok(buf)
}

/// Runs the full pipeline and writes every artifact into `out_dir`.
///
/// Failures are tagged with the stage that produced them.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    use artifacts::*;
    cfg.validate().stage("config")?;
    std::fs::create_dir_all(out_dir)
        .map_err(|source| Error::File {
            path: out_dir.to_path_buf(),
            source,
        })
        .stage("persist")?;
    write_file(&out_dir.join(CONFIG), cfg.to_toml()?).stage("persist")?;

    let classes = cfg.classes();
    let mode = cfg.kind.feature_mode();

    let profiles = match &cfg.profiles {
        Some(p) => ProfileSet::load(p).stage("profiles")?,
        None => default_profiles(),
    };
    let mut buf = Vec::new();
    profiles.write_csv(&mut buf).stage("persist")?;
    write_file(&out_dir.join(PROFILES), buf).stage("persist")?;

    let log = match &cfg.reads {
        Some(p) => load_reader_log(p, cfg.phase_unit).stage("ingest")?,
        None => simulate(&cfg.simulation_plan(), &profiles).stage("simulate")?,
    };
    write_file(&out_dir.join(READS), csv_bytes(&log)?).stage("persist")?;

    let mut samples = extract_samples(&log, mode, &cfg.extract).stage("features")?;
    samples.retain(|s| classes.contains(&s.label));
    let mut buf = Vec::new();
    write_feature_csv(&samples, mode, &mut buf).stage("persist")?;
    write_file(&out_dir.join(FEATURES), buf).stage("persist")?;
    let samples_per_class: Vec<usize> = classes
        .iter()
        .map(|c| samples.iter().filter(|s| s.label == *c).count())
        .collect();

    let balanced = balance_classes(samples, &classes, derive_seed(cfg.seed, 1)).stage("balance")?;
    let balanced_per_class = balanced.len() / classes.len();
    let data = split(&balanced, &cfg.split, derive_seed(cfg.seed, 2)).stage("split")?;
    data.save(out_dir, mode).stage("persist")?;

    let std = fit_standardization(&data.train).stage("standardize")?;
    let train_set = to_examples(&data.train, &std, &classes).stage("standardize")?;
    let val_set = to_examples(&data.validation, &std, &classes).stage("standardize")?;

    let net = Network::init(cfg.network_spec()).stage("train")?;
    let parameters = net.param_count();
    let (net, history) = train(net, &train_set, &val_set, &cfg.train_config()).stage("train")?;
    let model = Model::new(net, classes.clone(), std, cfg.extract.phase_stats).stage("train")?;
    model.save(&out_dir.join(MODEL)).stage("persist")?;

    let evaluation = evaluate(&model, &data.test).stage("evaluate")?;

    let metrics = RunMetrics {
        kind: cfg.kind,
        seed: cfg.seed,
        classes,
        reads: log.len(),
        samples_per_class,
        balanced_per_class,
        train_size: data.train.len(),
        validation_size: data.validation.len(),
        test_size: data.test.len(),
        parameters,
        epochs_run: history.epochs(),
        best_epoch: history.best_epoch,
        stopped_early: history.stopped_early,
        best_val_loss: history.val_loss[history.best_epoch - 1],
        test_accuracy: evaluation.accuracy,
        evaluation,
    };
    write_file(&out_dir.join(METRICS), serde_json::to_string_pretty(&metrics)?).stage("persist")?;
    write_file(&out_dir.join(HISTORY), history_csv(&history)).stage("persist")?;
    write_file(&out_dir.join(CONFUSION), metrics.evaluation.confusion.to_csv()).stage("persist")?;
    let report = format!(
        "experiment: {:?} (seed {})\nepochs: {} (best {}, early stop: {})\n\n{}",
        metrics.kind,
        metrics.seed,
        metrics.epochs_run,
        metrics.best_epoch,
        metrics.stopped_early,
        metrics.evaluation.render()
    );
    write_file(&out_dir.join(REPORT), report).stage("persist")?;

    Ok(ExperimentReport {
        metrics,
        history,
        model,
        dir: out_dir.to_path_buf(),
    })
}

/// The headline numbers of one run, as read back from its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub kind: ExperimentKind,
    pub accuracy: f64,
}

impl RunSummary {
    pub fn from_metrics(name: impl Into<String>, m: &RunMetrics) -> Self {
        RunSummary {
            name: name.into(),
            kind: m.kind,
            accuracy: m.test_accuracy,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: RunMetrics = serde_json::from_str(&read_file(&dir.join(artifacts::METRICS))?)?;
        Ok(Self::from_metrics(dir.display().to_string(), &m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingOutcome {
    Holds,
    Tie,
    Violated,
}

/// One pairwise check of the expected kind ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub higher: ExperimentKind,
    pub lower: ExperimentKind,
    pub higher_accuracy: f64,
    pub lower_accuracy: f64,
    pub outcome: OrderingOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Runs sorted by accuracy, best first; equal accuracies keep input order.
    pub rows: Vec<RunSummary>,
    pub checks: Vec<OrderingCheck>,
    /// Index pairs (into `rows`) of runs with identical accuracy.
    pub ties: Vec<(usize, usize)>,
}

impl Comparison {
    pub fn ordering_holds(&self) -> bool {
        self.checks.iter().all(|c| c.outcome != OrderingOutcome::Violated)
    }

    pub fn render(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
        let mut out = format!("{:name_w$}  {:14} {:>8}\n", "run", "kind", "accuracy");
        for r in &self.rows {
            writeln!(out, "{:name_w$}  {:14} {:>8.4}", r.name, format!("{:?}", r.kind), r.accuracy).unwrap();
        }
        for c in &self.checks {
            let sym = match c.outcome {
                OrderingOutcome::Holds => ">",
                OrderingOutcome::Tie => "=",
                OrderingOutcome::Violated => "<",
            };
            writeln!(
                out,
                "{:?} {sym} {:?}: {:.4} vs {:.4} ({:?})",
                c.higher, c.lower, c.higher_accuracy, c.lower_accuracy, c.outcome
            )
            .unwrap();
        }
        for (a, b) in &self.ties {
            writeln!(out, "tie: {} = {}", self.rows[*a].name, self.rows[*b].name).unwrap();
        }
        out
    }
}

/// Tabulates runs and checks OneSecond > WithDistance > SinglePoint on the
/// mean accuracy of each kind present.
pub fn compare_runs(reports: &[RunSummary]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::domain("comparison needs at least two runs"));
    }
    let mut rows = reports.to_vec();
    rows.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy));
    let mut ties = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i].accuracy == rows[j].accuracy {
                ties.push((i, j));
            }
        }
    }
    let mean = |kind: ExperimentKind| {
        let accs: Vec<f64> = reports.iter().filter(|r| r.kind == kind).map(|r| r.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    };
    use ExperimentKind::*;
    let mut checks = Vec::new();
    for (higher, lower) in [(OneSecond, WithDistance), (WithDistance, SinglePoint), (OneSecond, SinglePoint)] {
        if let (Some(h), Some(l)) = (mean(higher), mean(lower)) {
            let outcome = if h > l {
                OrderingOutcome::Holds
            } else if h == l {
                OrderingOutcome::Tie
            } else {
                OrderingOutcome::Violated
            };
            checks.push(OrderingCheck {
                higher,
                lower,
                higher_accuracy: h,
                lower_accuracy: l,
                outcome,
            });
        }
    }
    Ok(Comparison { rows, checks, ties })
}
