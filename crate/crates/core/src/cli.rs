//! Command-line runs: `key = value` config files merged with flags, validated
//! into a [`RunConfig`] and dispatched to one subcommand.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::classify::{write_predictions_csv, TimeMode};
use crate::error::{MfldaError, Result};
use crate::fd_model::FunctionalDataSet;
use crate::io::{csv_writer, fmt_f64, write_key_values};
use crate::metrics::{evaluate, selection_metrics, ConfusionMatrix, EvaluationReport};
use crate::model::{FitSettings, FittedModel, Smoother, SmoothingConfig};
use crate::preprocess::{preprocess_dataset, PreprocessConfig};
use crate::scatter::Mode;
use crate::simgen::{generate, Scenario, SimConfig};
use crate::sparse::{SparseConfig, SELECTIVITY_DEFAULT};
use crate::tuning::{stratified_split, tune, CvConfig, CvResult, TauGrid, C_UPDATE_DEFAULT, TARGET_SPARSITY_DEFAULT};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "mflda", version, about = "Sparse multivariate functional LDA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Generate a synthetic dataset
    Simulate(Flags),
    /// Fit a model (tuning τ first when none is given)
    Fit(Flags),
    /// Choose τ by range search and cross-validation
    Tune(Flags),
    /// Classify subjects with a fitted model
    Classify(Flags),
    /// Score a predictions file
    Evaluate(Flags),
    /// Split, tune, fit, classify and evaluate in one run
    Pipeline(Flags),
}

impl CliCommand {
    pub fn split(self) -> (Command, Flags) {
        match self {
            CliCommand::Simulate(f) => (Command::Simulate, f),
            CliCommand::Fit(f) => (Command::Fit, f),
            CliCommand::Tune(f) => (Command::Tune, f),
            CliCommand::Classify(f) => (Command::Classify, f),
            CliCommand::Evaluate(f) => (Command::Evaluate, f),
            CliCommand::Pipeline(f) => (Command::Pipeline, f),
        }
    }
}

/// Flags shared by every subcommand; each one overrides the config key of the
/// same name (dashes become underscores).
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// `key = value` config file; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long)]
    pub output_dir: Option<String>,
    /// time_dependent or time_independent
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub target_sparsity: Option<String>,
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub threads: Option<String>,
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub selectivity: Option<String>,
    /// Extra `key=value` settings
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("input", &self.input),
            ("output_dir", &self.output_dir),
            ("mode", &self.mode),
            ("tau", &self.tau),
            ("target_sparsity", &self.target_sparsity),
            ("folds", &self.folds),
            ("seed", &self.seed),
            ("threads", &self.threads),
            ("scenario", &self.scenario),
            ("groups", &self.groups),
            ("selectivity", &self.selectivity),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Fit,
    Tune,
    Classify,
    Evaluate,
    Pipeline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Tune => "tune",
            Command::Classify => "classify",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Raw configuration before validation.
pub type RawConfig = BTreeMap<String, String>;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<RawConfig> {
    let mut out = RawConfig::new();
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                out.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => problems.push(format!("line {}: expected key = value", n + 1)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(MfldaError::Config(problems))
    }
}

/// Config file contents overlaid with flags.
pub fn merge_flags(flags: &Flags) -> Result<RawConfig> {
    let mut raw = match &flags.config {
        Some(p) => parse_config_text(&fs::read_to_string(p)?)?,
        None => RawConfig::new(),
    };
    for (k, v) in flags.pairs() {
        if let Some(v) = v {
            raw.insert(k.to_string(), v.clone());
        }
    }
    let mut problems = Vec::new();
    for s in &flags.set {
        match s.split_once('=') {
            Some((k, v)) => {
                raw.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => problems.push(format!("--set {s}: expected KEY=VALUE")),
        }
    }
    if problems.is_empty() {
        Ok(raw)
    } else {
        Err(MfldaError::Config(problems))
    }
}

const KNOWN_KEYS: &[&str] = &[
    "subcommand",
    "version",
    "input",
    "test_input",
    "model",
    "truth",
    "selected",
    "output_dir",
    "mode",
    "time_mode",
    "tau",
    "target_sparsity",
    "c_update",
    "folds",
    "seed",
    "threads",
    "selectivity",
    "components",
    "degree",
    "knots",
    "min_timepoints",
    "test_fraction",
    "scenario",
    "groups",
    "n_per_group",
    "p",
    "t",
    "sigma",
    "signal_fraction",
    "rho",
    "disjoint_signals",
    "keep_rate",
    "preprocess",
    "max_zero_fraction",
    "pseudo_count",
    "variance_quantile_cut",
];

/// Validated run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub test_input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub selected: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub time_mode: TimeMode,
    pub tau: Option<f64>,
    pub target_sparsity: f64,
    pub c_update: f64,
    pub folds: usize,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub selectivity: f64,
    pub components: Option<usize>,
    pub smoothing: SmoothingConfig,
    pub test_fraction: f64,
    pub sim: SimSettings,
    pub preprocess: Option<PreprocessConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub scenario: Scenario,
    pub groups: usize,
    pub n_per_group: usize,
    pub p: usize,
    pub t: usize,
    pub sigma: f64,
    pub signal_fraction: f64,
    pub rho: f64,
    pub disjoint_signals: bool,
    pub keep_rate: f64,
}

struct Reader<'a> {
    raw: &'a RawConfig,
    problems: Vec<String>,
}

impl Reader<'_> {
    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        self.opt(key).unwrap_or(default)
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let v = self.raw.get(key)?;
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.problems.push(format!("{key}: cannot parse `{v}`"));
                None
            }
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.problems.push(msg());
        }
    }
}

/// Fills defaults, rejects unknown keys and checks every constraint,
/// reporting all problems together.
pub fn validate_config(command: Command, raw: &RawConfig) -> Result<RunConfig> {
    let mut r = Reader {
        raw,
        problems: Vec::new(),
    };
    for k in raw.keys() {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            r.problems.push(format!("unknown key `{k}`"));
        }
    }
    if let Some(v) = raw.get("version") {
        if v != VERSION {
            warn!("config written by version {v}, running {VERSION}");
        }
    }
    let mode = match raw.get("mode") {
        Some(m) => m.parse().unwrap_or_else(|_| {
            r.problems.push(format!("mode: unknown value `{m}`"));
            Mode::TimeIndependent
        }),
        None => Mode::TimeIndependent,
    };
    let time_mode = match raw.get("time_mode").map(String::as_str) {
        None | Some("overall") => TimeMode::Overall,
        Some("time_wise") => TimeMode::TimeWise,
        Some(v) => {
            r.problems.push(format!("time_mode: unknown value `{v}`"));
            TimeMode::Overall
        }
    };
    let scenario = match raw.get("scenario") {
        Some(s) => s.parse().unwrap_or_else(|_| {
            r.problems.push(format!("scenario: unknown value `{s}`"));
            Scenario::AllTime
        }),
        None => Scenario::AllTime,
    };

    let tau: Option<f64> = r.opt("tau");
    if let Some(t) = tau {
        r.check(t >= 0.0 && t.is_finite(), || format!("tau = {t} must be finite and >= 0"));
    }
    let target_sparsity = r.get("target_sparsity", TARGET_SPARSITY_DEFAULT);
    r.check(target_sparsity > 0.0 && target_sparsity <= 1.0, || {
        format!("target_sparsity = {target_sparsity} must lie in (0, 1]")
    });
    let c_update = r.get("c_update", C_UPDATE_DEFAULT);
    r.check(c_update > 1.0, || format!("c_update = {c_update} must exceed 1"));
    let folds = r.get("folds", 5usize);
    r.check(folds >= 2, || format!("folds = {folds} must be at least 2"));
    let seed: Option<u64> = r.opt("seed");
    let threads: Option<usize> = r.opt("threads");
    if let Some(n) = threads {
        r.check(n >= 1, || "threads must be at least 1".into());
    }
    let selectivity = r.get("selectivity", SELECTIVITY_DEFAULT);
    r.check(selectivity > 0.0 && selectivity <= 1.0, || {
        format!("selectivity = {selectivity} must lie in (0, 1]")
    });
    let components: Option<usize> = r.opt("components");
    if let Some(c) = components {
        r.check(c >= 1, || "components must be at least 1".into());
    }
    let smoothing = SmoothingConfig {
        degree: r.get("degree", 3),
        n_interior: r.get("knots", 4),
        min_timepoints: r.get("min_timepoints", 8),
    };
    let test_fraction = r.get("test_fraction", 0.25);
    r.check(test_fraction > 0.0 && test_fraction < 1.0, || {
        format!("test_fraction = {test_fraction} must lie in (0, 1)")
    });
    let sim = SimSettings {
        scenario,
        groups: r.get("groups", 2),
        n_per_group: r.get("n_per_group", 50),
        p: r.get("p", 60),
        t: r.get("t", 40),
        sigma: r.get("sigma", crate::simgen::SIGMA_DEFAULT),
        signal_fraction: r.get("signal_fraction", 0.10),
        rho: r.get("rho", 0.0),
        disjoint_signals: r.get("disjoint_signals", false),
        keep_rate: r.get("keep_rate", 1.0),
    };
    r.check(sim.groups >= 2, || format!("groups = {} must be at least 2", sim.groups));
    r.check(sim.n_per_group >= 1, || "n_per_group must be positive".into());
    r.check(sim.t >= 2, || "t must be at least 2".into());
    r.check(sim.sigma >= 0.0, || "sigma must be non-negative".into());
    r.check(sim.rho == 0.0 || sim.rho == 1.0, || "rho must be 0 or 1".into());
    let preprocess = if r.get("preprocess", false) {
        let pc = PreprocessConfig {
            max_zero_fraction: r.get("max_zero_fraction", 0.80),
            pseudo_count: r.get("pseudo_count", 1.0),
            variance_quantile_cut: r.get("variance_quantile_cut", 0.05),
        };
        if let Err(MfldaError::Config(p)) = pc.validate() {
            r.problems.extend(p);
        }
        Some(pc)
    } else {
        None
    };

    let path = |k: &str| raw.get(k).map(PathBuf::from);
    let input = path("input");
    let model = path("model");
    let needs_input = command != Command::Simulate;
    if needs_input && input.is_none() {
        r.problems.push(format!("{} needs `input`", command.name()));
    }
    if command == Command::Classify && model.is_none() {
        r.problems.push("classify needs `model`".into());
    }
    let stochastic = match command {
        Command::Simulate | Command::Tune | Command::Pipeline => true,
        Command::Fit => tau.is_none(),
        Command::Classify | Command::Evaluate => false,
    };
    if stochastic && seed.is_none() {
        r.problems.push(format!("{} needs `seed`", command.name()));
    }
    if !r.problems.is_empty() {
        return Err(MfldaError::Config(r.problems));
    }
    Ok(RunConfig {
        command,
        input,
        test_input: path("test_input"),
        model,
        truth: path("truth"),
        selected: path("selected"),
        output_dir: path("output_dir").unwrap_or_else(|| PathBuf::from("mflda_out")),
        mode,
        time_mode,
        tau,
        target_sparsity,
        c_update,
        folds,
        seed,
        threads,
        selectivity,
        components,
        smoothing,
        test_fraction,
        sim,
        preprocess,
    })
}

impl RunConfig {
    /// The resolved configuration in the config-file format.
    pub fn manifest(&self) -> Vec<(String, String)> {
        let mut m: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| m.push((k.to_string(), v));
        put("subcommand", self.command.name().into());
        put("version", VERSION.into());
        for (k, v) in [
            ("input", &self.input),
            ("test_input", &self.test_input),
            ("model", &self.model),
            ("truth", &self.truth),
            ("selected", &self.selected),
        ] {
            if let Some(v) = v {
                put(k, v.display().to_string());
            }
        }
        put("output_dir", self.output_dir.display().to_string());
        put("mode", self.mode.to_string());
        put(
            "time_mode",
            match self.time_mode {
                TimeMode::Overall => "overall".into(),
                TimeMode::TimeWise => "time_wise".into(),
            },
        );
        if let Some(t) = self.tau {
            put("tau", fmt_f64(t));
        }
        put("target_sparsity", fmt_f64(self.target_sparsity));
        put("c_update", fmt_f64(self.c_update));
        put("folds", self.folds.to_string());
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        if let Some(n) = self.threads {
            put("threads", n.to_string());
        }
        put("selectivity", fmt_f64(self.selectivity));
        if let Some(c) = self.components {
            put("components", c.to_string());
        }
        put("degree", self.smoothing.degree.to_string());
        put("knots", self.smoothing.n_interior.to_string());
        put("min_timepoints", self.smoothing.min_timepoints.to_string());
        put("test_fraction", fmt_f64(self.test_fraction));
        let s = &self.sim;
        put("scenario", s.scenario.to_string());
        put("groups", s.groups.to_string());
        put("n_per_group", s.n_per_group.to_string());
        put("p", s.p.to_string());
        put("t", s.t.to_string());
        put("sigma", fmt_f64(s.sigma));
        put("signal_fraction", fmt_f64(s.signal_fraction));
        put("rho", fmt_f64(s.rho));
        put("disjoint_signals", s.disjoint_signals.to_string());
        put("keep_rate", fmt_f64(s.keep_rate));
        put("preprocess", self.preprocess.is_some().to_string());
        if let Some(pc) = &self.preprocess {
            put("max_zero_fraction", fmt_f64(pc.max_zero_fraction));
            put("pseudo_count", fmt_f64(pc.pseudo_count));
            put("variance_quantile_cut", fmt_f64(pc.variance_quantile_cut));
        }
        m
    }

    fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        let mut c = SimConfig::new(s.groups, s.n_per_group, s.p, s.scenario, self.seed.unwrap_or(0));
        c.t = s.t;
        c.sigma = s.sigma;
        c.signal_fraction = s.signal_fraction;
        c.rho = s.rho;
        c.disjoint_signals = s.disjoint_signals;
        c.keep_rate = s.keep_rate;
        c
    }

    fn fit_settings(&self, n_classes: usize, tau: f64) -> FitSettings {
        FitSettings {
            sparse: SparseConfig {
                mode: self.mode,
                tau,
                n_components: self.components.unwrap_or(n_classes - 1),
                selectivity_threshold: self.selectivity,
                ..SparseConfig::default()
            },
            time_mode: self.time_mode,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

/// Model file: smoothing setup, names and the fitted estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub smoother: Smoother,
    pub model: FittedModel,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        MfldaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<FunctionalDataSet> {
    let data = FunctionalDataSet::from_long_csv(open(path)?)?;
    match &cfg.preprocess {
        Some(pc) => Ok(preprocess_dataset(&data, pc)?.0),
        None => Ok(data),
    }
}

/// Reorders features and classes of `data` to match the given names.
pub fn align(data: &FunctionalDataSet, feature_names: &[String], class_names: &[String]) -> Result<FunctionalDataSet> {
    let feature_map: Vec<Option<usize>> = data
        .feature_names
        .iter()
        .map(|f| feature_names.iter().position(|g| g == f))
        .collect();
    for f in feature_names {
        if !data.feature_names.contains(f) {
            return Err(MfldaError::Data(format!("feature {f} missing from input")));
        }
    }
    let mut class_map = Vec::new();
    for c in &data.class_names {
        class_map.push(
            class_names
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| MfldaError::Data(format!("class {c} unknown to the model")))?,
        );
    }
    let mut out = data.clone();
    out.feature_names = feature_names.to_vec();
    out.class_names = class_names.to_vec();
    for s in &mut out.subjects {
        s.label = s.label.map(|k| class_map[k]);
        s.observations.retain(|o| feature_map[o.feature].is_some());
        for o in &mut s.observations {
            o.feature = feature_map[o.feature].expect("retained");
        }
    }
    Ok(out)
}

fn write_manifest(cfg: &RunConfig) -> Result<()> {
    write_key_values(create(&cfg.out("manifest.txt"))?, &cfg.manifest())
}

fn write_exclusions(cfg: &RunConfig, name: &str, ex: &[crate::fd_model::Exclusion]) -> Result<()> {
    let mut w = csv_writer(create(&cfg.out(name))?);
    w.write_record(["subject_id", "reason"])?;
    for e in ex {
        w.write_record([&e.subject, &e.reason])?;
    }
    w.flush()?;
    Ok(())
}

fn write_grid(cfg: &RunConfig, grid: &TauGrid, cv: &CvResult) -> Result<()> {
    cv.write_trace_csv(create(&cfg.out("tuning_trace.csv"))?)?;
    let mut w = csv_writer(create(&cfg.out("tau_grid.csv"))?);
    w.write_record(["tau", "sparsity", "mean_combined"])?;
    for (k, &tau) in grid.grid.iter().enumerate() {
        w.write_record([fmt_f64(tau), fmt_f64(grid.sparsity[k]), fmt_f64(cv.mean_combined[k])])?;
    }
    w.flush()?;
    Ok(())
}

/// Smooths, tunes when needed, and fits on a labelled dataset.
fn train(cfg: &RunConfig, data: &FunctionalDataSet) -> Result<ModelFile> {
    let smoother = Smoother::for_data(data, &cfg.smoothing)?;
    let (spline, excluded) = smoother.smooth(data)?;
    if !excluded.is_empty() {
        warn!("{} subjects excluded during smoothing", excluded.len());
    }
    write_exclusions(cfg, "exclusions.csv", &excluded)?;
    let x = spline.to_tensor();
    let all = data.labels()?;
    let labels: Vec<usize> = spline.source_index.iter().map(|&i| all[i]).collect();
    let g = data.n_classes();
    let tau = match cfg.tau {
        Some(t) => t,
        None => {
            let cv = CvConfig {
                folds: cfg.folds,
                seed: cfg.seed.expect("validated"),
            };
            let (grid, result) = tune(
                &x,
                &labels,
                g,
                &cfg.fit_settings(g, 0.0),
                cfg.target_sparsity,
                cfg.c_update,
                &cv,
            )?;
            write_grid(cfg, &grid, &result)?;
            result.best_tau
        }
    };
    info!("fitting with tau {tau:e}");
    let model = FittedModel::fit(&x, &labels, g, &cfg.fit_settings(g, tau))?;
    model
        .fit
        .profile
        .write_csv(create(&cfg.out("selected_features.csv"))?, &data.feature_names)?;
    Ok(ModelFile {
        version: VERSION.into(),
        feature_names: data.feature_names.clone(),
        class_names: data.class_names.clone(),
        smoother,
        model,
    })
}

/// Predictions and scores for `data`, written to the output directory.
fn predict(cfg: &RunConfig, mf: &ModelFile, data: &FunctionalDataSet) -> Result<Option<EvaluationReport>> {
    let data = align(data, &mf.feature_names, &mf.class_names)?;
    let (spline, excluded) = mf.smoother.smooth(&data)?;
    write_exclusions(cfg, "test_exclusions.csv", &excluded)?;
    let x = spline.to_tensor();
    let scores = mf.model.scores(&x)?;
    scores.write_csv(create(&cfg.out("scores.csv"))?, &spline.subject_ids, &spline.grid)?;
    let preds = crate::classify::nearest_centroid(&scores, &mf.model.centroids, mf.model.settings.time_mode)?;
    let truth: Option<Vec<usize>> = spline
        .source_index
        .iter()
        .map(|&i| data.subjects[i].label)
        .collect();
    write_predictions_csv(
        create(&cfg.out("predictions.csv"))?,
        &preds,
        &spline.subject_ids,
        &mf.class_names,
        truth.as_deref(),
    )?;
    match truth {
        Some(t) => {
            let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
            let cm = ConfusionMatrix::from_predictions(&t, &predicted, mf.class_names.len())?;
            Ok(Some(evaluate(&cm)?))
        }
        None => Ok(None),
    }
}

fn read_names(path: &Path, column: &str, filter: Option<&str>) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let headers = rdr.headers()?.clone();
    let pos = |c: &str| {
        headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| MfldaError::Data(format!("{}: no `{c}` column", path.display())))
    };
    let c = pos(column)?;
    let f = filter.map(pos).transpose()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if f.is_none_or(|f| &rec[f] == "true") {
            out.push(rec[c].to_string());
        }
    }
    Ok(out)
}

/// Adds selection metrics when both a truth file and a selection are known.
fn attach_selection(
    report: &mut EvaluationReport,
    truth: Option<&Path>,
    selected: &[String],
    feature_names: &[String],
) -> Result<()> {
    let Some(truth) = truth else { return Ok(()) };
    let truth_names = read_names(truth, "feature", None)?;
    let index = |names: &[String]| -> Vec<usize> {
        names
            .iter()
            .filter_map(|n| feature_names.iter().position(|f| f == n))
            .collect()
    };
    report.selection = Some(selection_metrics(
        &index(selected),
        &index(&truth_names),
        feature_names.len(),
    )?);
    Ok(())
}

fn selected_names(mf: &ModelFile) -> Vec<String> {
    mf.model
        .fit
        .profile
        .selected
        .iter()
        .map(|&j| mf.feature_names[j].clone())
        .collect()
}

fn run_simulate(cfg: &RunConfig) -> Result<()> {
    let sc = cfg.sim_config();
    let sim = generate(&sc)?;
    sim.data.write_long_csv(create(&cfg.out("data.csv"))?)?;
    sim.truth
        .write_csv(create(&cfg.out("truth.csv"))?, &sim.data.feature_names, sc.n_groups())
}

fn run_tune(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg.input.as_deref().expect("validated"), cfg)?;
    let smoother = Smoother::for_data(&data, &cfg.smoothing)?;
    let (spline, _) = smoother.smooth(&data)?;
    let x = spline.to_tensor();
    let all = data.labels()?;
    let labels: Vec<usize> = spline.source_index.iter().map(|&i| all[i]).collect();
    let g = data.n_classes();
    let cv = CvConfig {
        folds: cfg.folds,
        seed: cfg.seed.expect("validated"),
    };
    let (grid, result) = tune(
        &x,
        &labels,
        g,
        &cfg.fit_settings(g, 0.0),
        cfg.target_sparsity,
        cfg.c_update,
        &cv,
    )?;
    write_grid(cfg, &grid, &result)?;
    write_key_values(
        create(&cfg.out("tuning.txt"))?,
        &[("tau".to_string(), fmt_f64(result.best_tau))],
    )
}

fn run_fit(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg.input.as_deref().expect("validated"), cfg)?;
    let mf = train(cfg, &data)?;
    serde_json::to_writer(create(&cfg.out("model.json"))?, &mf)?;
    Ok(())
}

fn run_classify(cfg: &RunConfig) -> Result<()> {
    let mf: ModelFile = serde_json::from_reader(std::io::BufReader::new(open(cfg.model.as_deref().expect("validated"))?))?;
    let data = load_dataset(cfg.input.as_deref().expect("validated"), cfg)?;
    if let Some(report) = predict(cfg, &mf, &data)? {
        report.write_text(create(&cfg.out("metrics.txt"))?)?;
    }
    Ok(())
}

fn run_evaluate(cfg: &RunConfig) -> Result<()> {
    let path = cfg.input.as_deref().expect("validated");
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let (pred, truth) = (rec.get(1).unwrap_or(""), rec.get(2).unwrap_or(""));
        if truth.is_empty() {
            return Err(MfldaError::Data(format!("{}: row without a true class", path.display())));
        }
        pairs.push((truth.to_string(), pred.to_string()));
    }
    let mut names: Vec<String> = pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    crate::fd_model::sort_class_names(&mut names);
    names.dedup();
    if names.len() < 2 {
        names.push(format!("{}_other", names.first().cloned().unwrap_or_default()));
    }
    let idx = |s: &str| names.iter().position(|n| n == s).expect("collected");
    let truth: Vec<usize> = pairs.iter().map(|(t, _)| idx(t)).collect();
    let predicted: Vec<usize> = pairs.iter().map(|(_, p)| idx(p)).collect();
    let mut report = evaluate(&ConfusionMatrix::from_predictions(&truth, &predicted, names.len())?)?;
    if let (Some(sel), Some(truth)) = (&cfg.selected, &cfg.truth) {
        let selected = read_names(sel, "feature", Some("selected"))?;
        let all = read_names(sel, "feature", None)?;
        attach_selection(&mut report, Some(truth), &selected, &all)?;
    }
    report.write_text(create(&cfg.out("metrics.txt"))?)
}

fn run_pipeline(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg.input.as_deref().expect("validated"), cfg)?;
    let (train_set, test_set) = match &cfg.test_input {
        Some(p) => (data.clone(), load_dataset(p, cfg)?),
        None => {
            let labels = data.labels()?;
            let (tr, te) = stratified_split(&labels, data.n_classes(), cfg.test_fraction, cfg.seed.expect("validated"))?;
            (data.select_subjects(&tr), data.select_subjects(&te))
        }
    };
    let mf = train(cfg, &train_set)?;
    serde_json::to_writer(create(&cfg.out("model.json"))?, &mf)?;
    let mut report = predict(cfg, &mf, &test_set)?
        .ok_or_else(|| MfldaError::Data("test subjects carry no class labels".into()))?;
    attach_selection(&mut report, cfg.truth.as_deref(), &selected_names(&mf), &mf.feature_names)?;
    report.write_text(create(&cfg.out("metrics.txt"))?)
}

/// Runs one validated configuration, honouring the thread cap.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    for p in [&cfg.input, &cfg.test_input, &cfg.model, &cfg.truth, &cfg.selected]
        .into_iter()
        .flatten()
    {
        if !p.is_file() {
            return Err(MfldaError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} does not exist", p.display()),
            )));
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let work = || -> Result<()> {
        write_manifest(cfg)?;
        match cfg.command {
            Command::Simulate => run_simulate(cfg),
            Command::Fit => run_fit(cfg),
            Command::Tune => run_tune(cfg),
            Command::Classify => run_classify(cfg),
            Command::Evaluate => run_evaluate(cfg),
            Command::Pipeline => run_pipeline(cfg),
        }
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| MfldaError::Argument(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 3 } else { 0 };
        }
    };
    let (command, flags) = cli.command.split();
    let result = merge_flags(&flags)
        .and_then(|raw| validate_config(command, &raw))
        .and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
