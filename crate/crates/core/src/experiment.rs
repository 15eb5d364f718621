//! Config-driven experiment pipeline.
//!
//! A run for one seed goes through six stages, each reading the artifacts
//! of the previous one from disk:
//!
//! ```text
//! <run>/dataset/   data.csv labels.json holidays.json dataset.json
//! <run>/features/  mcm.bin mcm.json
//! <run>/model/     checkpoint
//! <run>/detect/    thresholds.json residuals.bin residuals.json trace_<method>.csv
//! <run>/rootcause/ <method>.json
//! <run>/eval/      <method>.json
//! ```
//!
//! Sweeps expand into child runs, each in its own subdirectory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate_dataset, DatasetSpec, LabelRecord, Split, SplitLayout};
use crate::detect::{fit_thresholds, ScoreMethod, ScoreTrace, StepResiduals, ThresholdFit, ThresholdOptions};
use crate::error::{invalid, Error, Result};
use crate::evalkit::{
    nab_score, point_metrics, root_cause_recall, EvalReport, RootCausePrediction, RootCauseTruth,
};
use crate::frame::SeriesFrame;
use crate::mcm::{assemble_inputs, build_mcm, input_steps, McmConfig, McmSequence, SquareMatrix};
use crate::model::{InputShape, NetworkConfig, ReconstructionModel, Trainer};
use crate::rootcause::{analyze_window, RootCauseMethod, RootCauseReport};

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "RSMGAN_DEVICE";
pub const FAILED_MARKER: &str = "FAILED";

/// Resolves the compute device. Only the CPU backend exists.
pub fn resolve_device(value: Option<&str>) -> Result<&'static str> {
    match value.map(str::trim) {
        None | Some("") | Some("cpu") => Ok("cpu"),
        Some(other) => Err(Error::Config(format!(
            "{DEVICE_ENV}={other:?} is not available; this build only supports \"cpu\""
        ))),
    }
}

pub fn device_from_env() -> Result<&'static str> {
    resolve_device(std::env::var(DEVICE_ENV).ok().as_deref())
}

/// A dataset read from disk instead of synthesized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalData {
    /// `timestamp,<series>...` CSV.
    pub csv: PathBuf,
    /// JSON list of `{start, end, root_causes, split}` records.
    pub labels: PathBuf,
    /// JSON list of holiday timestamps.
    #[serde(default)]
    pub holidays: Option<PathBuf>,
}

/// Lists expanded into one child run per combination.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub train_anomalies: Vec<usize>,
    pub mask_holidays: Vec<bool>,
    pub noise_scale: Vec<f64>,
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        self.train_anomalies.is_empty() && self.mask_holidays.is_empty() && self.noise_scale.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub external: Option<ExternalData>,
    pub mcm: McmConfig,
    pub network: NetworkConfig,
    pub thresholds: ThresholdOptions,
    /// Method whose detections drive root-cause analysis summaries.
    pub method: ScoreMethod,
    pub root_cause: RootCauseMethod,
    pub mask_holidays: bool,
    pub sweep: Sweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![1],
            output_dir: PathBuf::from("runs/experiment"),
            dataset: DatasetSpec::default(),
            external: None,
            mcm: McmConfig::default(),
            network: NetworkConfig::desk(),
            thresholds: ThresholdOptions::default(),
            method: ScoreMethod::ContextH,
            root_cause: RootCauseMethod::Ae,
            mask_holidays: true,
            sweep: Sweep::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk defaults with the full-size network and 300-epoch schedule.
    pub fn full_scale() -> Self {
        Self {
            network: NetworkConfig::default(),
            ..Self::default()
        }
    }

    /// Parses a config; tables given in `text` are merged key by key over
    /// [`ExperimentConfig::default`], so a partial `[network]` table keeps
    /// the desk-scale values for everything it does not mention.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(text, &Self::default())
    }

    /// Like [`ExperimentConfig::from_toml`] with `base` supplying the
    /// values `text` leaves out.
    pub fn from_toml_over(text: &str, base: &Self) -> Result<Self> {
        let cfg = |e: &dyn fmt::Display| Error::Config(e.to_string());
        let mut merged = toml::Value::try_from(base).map_err(|e| cfg(&e))?;
        let user: toml::Value = text.parse::<toml::Table>().map_err(|e| cfg(&e))?.into();
        merge(&mut merged, user);
        merged.try_into().map_err(|e| cfg(&e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_over(path, &Self::default())
    }

    pub fn load_over(path: &Path, base: &Self) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_over(&text, base)?;
        // Relative data paths are resolved against the config file.
        if let (Some(ext), Some(dir)) = (config.external.as_mut(), path.parent()) {
            for p in [Some(&mut ext.csv), Some(&mut ext.labels), ext.holidays.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.mcm.validate()?;
        self.network.validate()?;
        if let Some(ext) = &self.external {
            for p in [Some(&ext.csv), Some(&ext.labels), ext.holidays.as_ref()]
                .into_iter()
                .flatten()
            {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
            if !self.sweep.train_anomalies.is_empty() || !self.sweep.noise_scale.is_empty() {
                return Err(Error::Config(
                    "dataset sweeps need a synthetic dataset".into(),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex(&Sha256::digest(json)))
    }

    /// One `(label, config)` per sweep combination; a single unlabeled
    /// entry when there is no sweep.
    pub fn expand(&self) -> Vec<(String, ExperimentConfig)> {
        let mut out = vec![(Vec::<String>::new(), self.clone())];
        let sweep = &self.sweep;
        if !sweep.train_anomalies.is_empty() {
            out = out
                .into_iter()
                .flat_map(|(label, cfg)| {
                    sweep.train_anomalies.iter().map(move |&k| {
                        let mut c = cfg.clone();
                        c.dataset.train_anomalies = k;
                        let mut l = label.clone();
                        l.push(format!("train_anomalies-{k}"));
                        (l, c)
                    })
                })
                .collect();
        }
        if !sweep.mask_holidays.is_empty() {
            out = out
                .into_iter()
                .flat_map(|(label, cfg)| {
                    sweep.mask_holidays.iter().map(move |&m| {
                        let mut c = cfg.clone();
                        c.mask_holidays = m;
                        let mut l = label.clone();
                        l.push(format!("mask_holidays-{m}"));
                        (l, c)
                    })
                })
                .collect();
        }
        if !sweep.noise_scale.is_empty() {
            out = out
                .into_iter()
                .flat_map(|(label, cfg)| {
                    sweep.noise_scale.iter().map(move |&s| {
                        let mut c = cfg.clone();
                        c.dataset.noise_scale = s;
                        let mut l = label.clone();
                        l.push(format!("noise_scale-{s}"));
                        (l, c)
                    })
                })
                .collect();
        }
        out.into_iter()
            .map(|(label, mut cfg)| {
                cfg.sweep = Sweep::default();
                (label.join("_"), cfg)
            })
            .collect()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Featurize,
    Train,
    Detect,
    RootCause,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::Featurize,
        Stage::Train,
        Stage::Detect,
        Stage::RootCause,
        Stage::Evaluate,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generate => "generate",
            Stage::Featurize => "featurize",
            Stage::Train => "train",
            Stage::Detect => "detect",
            Stage::RootCause => "rootcause",
            Stage::Evaluate => "evaluate",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| invalid!("unknown stage {s:?}"))
    }
}

/// Artifact locations of one seed's run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `<dir>/seed-<seed>`.
    pub fn for_seed(dir: &Path, seed: u64) -> Self {
        Self::new(dir.join(format!("seed-{seed}")))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn data_csv(&self) -> PathBuf {
        self.dataset_dir().join("data.csv")
    }
    pub fn labels_json(&self) -> PathBuf {
        self.dataset_dir().join("labels.json")
    }
    pub fn holidays_json(&self) -> PathBuf {
        self.dataset_dir().join("holidays.json")
    }
    pub fn dataset_json(&self) -> PathBuf {
        self.dataset_dir().join("dataset.json")
    }
    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn mcm_bin(&self) -> PathBuf {
        self.features_dir().join("mcm.bin")
    }
    pub fn mcm_json(&self) -> PathBuf {
        self.features_dir().join("mcm.json")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn detect_dir(&self) -> PathBuf {
        self.root.join("detect")
    }
    pub fn thresholds_json(&self) -> PathBuf {
        self.detect_dir().join("thresholds.json")
    }
    pub fn residuals_bin(&self) -> PathBuf {
        self.detect_dir().join("residuals.bin")
    }
    pub fn residuals_json(&self) -> PathBuf {
        self.detect_dir().join("residuals.json")
    }
    pub fn trace_csv(&self, method: ScoreMethod) -> PathBuf {
        self.detect_dir().join(format!("trace_{method}.csv"))
    }
    pub fn rootcause_json(&self, method: ScoreMethod) -> PathBuf {
        self.root.join("rootcause").join(format!("{method}.json"))
    }
    pub fn eval_json(&self, method: ScoreMethod) -> PathBuf {
        self.root.join("eval").join(format!("{method}.json"))
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn failed_marker(&self) -> PathBuf {
        self.root.join(FAILED_MARKER)
    }
}

/// `dataset.json`: where the data came from and how it is split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub n_series: usize,
    pub length: usize,
    pub layout: SplitLayout,
    pub synthetic: Option<DatasetSpec>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn generate(config: &ExperimentConfig, seed: u64, paths: &RunPaths) -> Result<DatasetInfo> {
    fs::create_dir_all(paths.dataset_dir())?;
    let (frame, labels, info) = match &config.external {
        Some(ext) => {
            let mut frame = SeriesFrame::read_csv(&ext.csv)?;
            if let Some(h) = &ext.holidays {
                frame.read_holidays_json(h)?;
            }
            let labels: Vec<LabelRecord> = read_json(&ext.labels)?;
            for l in &labels {
                if l.start >= l.end || l.end > frame.len() {
                    return Err(invalid!(
                        "label {}..{} lies outside the series",
                        l.start,
                        l.end
                    ));
                }
            }
            let info = DatasetInfo {
                seed,
                n_series: frame.n_series(),
                length: frame.len(),
                layout: SplitLayout::for_length(frame.len()),
                synthetic: None,
            };
            (frame, labels, info)
        }
        None => {
            let ds = generate_dataset(&config.dataset, seed)?;
            let labels = ds.labels().map(LabelRecord::from).collect();
            let info = DatasetInfo {
                seed,
                n_series: ds.frame.n_series(),
                length: ds.frame.len(),
                layout: ds.layout.clone(),
                synthetic: Some(config.dataset.clone()),
            };
            (ds.frame, labels, info)
        }
    };
    frame.write_csv(&paths.data_csv())?;
    frame.write_holidays_json(&paths.holidays_json())?;
    write_json(&paths.labels_json(), &labels)?;
    write_json(&paths.dataset_json(), &info)?;
    log::info!(
        "generated {} series × {} points with {} labels",
        info.n_series,
        info.length,
        labels.len()
    );
    Ok(info)
}

pub fn load_dataset(paths: &RunPaths) -> Result<(SeriesFrame, Vec<LabelRecord>, DatasetInfo)> {
    let mut frame = SeriesFrame::read_csv(&paths.data_csv())?;
    frame.read_holidays_json(&paths.holidays_json())?;
    let labels = read_json(&paths.labels_json())?;
    let info = read_json(&paths.dataset_json())?;
    Ok((frame, labels, info))
}

/// Z-scores every series with its training statistics and builds the MCMs.
pub fn featurize(config: &ExperimentConfig, paths: &RunPaths) -> Result<McmSequence> {
    let (frame, _, info) = load_dataset(paths)?;
    let seq = build_mcm(&frame.zscored(info.layout.train.clone()), &config.mcm)?;
    fs::create_dir_all(paths.features_dir())?;
    seq.write(&paths.mcm_bin(), &paths.mcm_json())?;
    Ok(seq)
}

pub fn load_features(paths: &RunPaths) -> Result<McmSequence> {
    McmSequence::read(&paths.mcm_bin(), &paths.mcm_json())
}

/// Model steps whose raw points lie inside `range` and have full history.
pub fn split_steps(seq: &McmSequence, config: &McmConfig, range: Range<usize>) -> Result<Range<usize>> {
    let within = seq.steps_within(range);
    let valid = input_steps(seq, config)?;
    let start = within.start.max(valid.start);
    let end = within.end.min(valid.end);
    Ok(start..end.max(start))
}

fn network_for(config: &ExperimentConfig, seed: u64) -> NetworkConfig {
    NetworkConfig {
        seed,
        ..config.network.clone()
    }
}

pub fn train(config: &ExperimentConfig, seed: u64, paths: &RunPaths) -> Result<ReconstructionModel> {
    let seq = load_features(paths)?;
    let info: DatasetInfo = read_json(&paths.dataset_json())?;
    let steps = split_steps(&seq, &config.mcm, info.layout.train.clone())?;
    if steps.is_empty() {
        return Err(invalid!("the training split has no complete model inputs"));
    }
    let inputs = assemble_inputs(&seq, &config.mcm, steps, config.mask_holidays)?;
    let shape = InputShape {
        n: seq.n,
        channels: seq.channels,
        slots: config.mcm.slot_count(),
    };
    let network = network_for(config, seed);
    let epochs = network.epochs;
    let mut trainer = Trainer::new(ReconstructionModel::new(network, shape)?);
    log::info!("training on {} inputs for {epochs} epochs", inputs.len());
    for _ in 0..epochs {
        trainer.epoch(&inputs)?;
    }
    trainer.model.save(&paths.model_dir())?;
    Ok(trainer.model)
}

fn residuals_for(
    model: &ReconstructionModel,
    seq: &McmSequence,
    config: &ExperimentConfig,
    steps: Range<usize>,
) -> Result<StepResiduals> {
    let mut out = StepResiduals::default();
    // Bounded chunks keep peak memory flat on long splits.
    const CHUNK: usize = 256;
    let mut start = steps.start;
    while start < steps.end {
        let end = (start + CHUNK).min(steps.end);
        let inputs = assemble_inputs(seq, &config.mcm, start..end, config.mask_holidays)?;
        for r in model.reconstruct(&inputs)? {
            out.steps.push(r.step);
            out.residuals.push(r.residual);
        }
        start = end;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ResidualIndex {
    n: usize,
    steps: Vec<usize>,
}

fn write_residuals(paths: &RunPaths, r: &StepResiduals) -> Result<()> {
    let n = r.residuals.first().map_or(0, SquareMatrix::n);
    let mut bytes = Vec::with_capacity(r.residuals.len() * n * n * 8);
    for m in &r.residuals {
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(paths.residuals_bin(), bytes)?;
    write_json(
        &paths.residuals_json(),
        &ResidualIndex {
            n,
            steps: r.steps.clone(),
        },
    )
}

/// Test-split residuals saved by [`detect`].
pub fn load_residuals(paths: &RunPaths) -> Result<StepResiduals> {
    let idx: ResidualIndex = read_json(&paths.residuals_json())?;
    let bytes = fs::read(paths.residuals_bin())?;
    let len = idx.n * idx.n;
    if bytes.len() != idx.steps.len() * len * 8 {
        return Err(Error::Format("residual blob does not match its index".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let residuals = if len == 0 {
        Vec::new()
    } else {
        values
            .chunks_exact(len)
            .map(|c| SquareMatrix::new(idx.n, c.to_vec()))
            .collect::<Result<_>>()?
    };
    Ok(StepResiduals {
        steps: idx.steps,
        residuals,
    })
}

fn windows(labels: &[LabelRecord], split: Split) -> Vec<Range<usize>> {
    labels
        .iter()
        .filter(|l| l.split == split)
        .map(|l| l.start..l.end)
        .collect()
}

/// Reconstructs every split, fits thresholds and writes the test traces.
pub fn detect(config: &ExperimentConfig, paths: &RunPaths) -> Result<ThresholdFit> {
    let seq = load_features(paths)?;
    let (_, labels, info) = load_dataset(paths)?;
    let model = ReconstructionModel::load(&paths.model_dir())?;
    let layout = &info.layout;

    let train_steps = split_steps(&seq, &config.mcm, layout.train.clone())?;
    let val_steps = split_steps(&seq, &config.mcm, layout.validation.clone())?;
    let test_steps = split_steps(&seq, &config.mcm, layout.test.clone())?;
    let train = residuals_for(&model, &seq, config, train_steps)?;
    let validation = residuals_for(&model, &seq, config, val_steps)?;
    let test = residuals_for(&model, &seq, config, test_steps)?;

    let fit = fit_thresholds(
        &train.residuals,
        &validation,
        seq.step,
        layout.validation.clone(),
        &windows(&labels, Split::Validation),
        &config.thresholds,
    )?;
    fs::create_dir_all(paths.detect_dir())?;
    write_json(&paths.thresholds_json(), &fit)?;
    write_residuals(paths, &test)?;
    for method in ScoreMethod::ALL {
        ScoreTrace::new(method, fit.theta(method), &test, &seq.timestamps)?
            .write_csv(&paths.trace_csv(method))?;
    }
    log::info!(
        "thresholds: η={:.4} θ_b={:.4} θ_h={:.4}",
        fit.eta,
        fit.theta_b,
        fit.theta_h
    );
    Ok(fit)
}

pub fn load_trace(paths: &RunPaths, method: ScoreMethod) -> Result<ScoreTrace> {
    let fit: ThresholdFit = read_json(&paths.thresholds_json())?;
    ScoreTrace::read_csv(&paths.trace_csv(method), method, fit.theta(method))
}

/// Root causes of every detected run of both scoring methods.
pub fn rootcause(
    config: &ExperimentConfig,
    paths: &RunPaths,
) -> Result<BTreeMap<String, Vec<RootCauseReport>>> {
    let fit: ThresholdFit = read_json(&paths.thresholds_json())?;
    let residuals = load_residuals(paths)?;
    let step = config.mcm.step;
    let mut out = BTreeMap::new();
    for method in ScoreMethod::ALL {
        let trace = load_trace(paths, method)?;
        let mut reports = Vec::new();
        for run in trace.detected_runs() {
            let window: Vec<SquareMatrix> = residuals
                .steps
                .iter()
                .zip(&residuals.residuals)
                .filter(|(s, _)| run.contains(s))
                .map(|(_, r)| r.clone())
                .collect();
            reports.push(analyze_window(&window, run, step, config.root_cause, fit.theta_b)?);
        }
        write_json(&paths.rootcause_json(method), &reports)?;
        out.insert(method.to_string(), reports);
    }
    Ok(out)
}

/// Point metrics, NAB score and root-cause recall on the test split.
pub fn evaluate(config: &ExperimentConfig, paths: &RunPaths) -> Result<BTreeMap<String, EvalReport>> {
    let (_, labels, info) = load_dataset(paths)?;
    let test = info.layout.test.clone();
    let test_windows = windows(&labels, Split::Test);
    let truth: Vec<RootCauseTruth> = labels
        .iter()
        .filter(|l| l.split == Split::Test)
        .map(|l| RootCauseTruth {
            window: l.start..l.end,
            root_causes: l.root_causes.clone(),
        })
        .collect();
    let mut out = BTreeMap::new();
    for method in ScoreMethod::ALL {
        let trace = load_trace(paths, method)?;
        let det = trace.expand(config.mcm.step, test.clone());
        let points = point_metrics(&det, test.start, &test_windows)?;
        let nab = nab_score(&det, test.start, &test_windows, &config.thresholds.nab_profile)?;
        let reports: Vec<RootCauseReport> = read_json(&paths.rootcause_json(method))?;
        let predictions: Vec<RootCausePrediction> = reports
            .into_iter()
            .map(|r| RootCausePrediction {
                window: r.raw,
                selected: r.selected,
            })
            .collect();
        let report = EvalReport::new(&points, &nab, root_cause_recall(&predictions, &truth));
        write_json(&paths.eval_json(method), &report)?;
        out.insert(method.to_string(), report);
    }
    Ok(out)
}

pub fn run_stage(stage: Stage, config: &ExperimentConfig, seed: u64, paths: &RunPaths) -> Result<()> {
    log::info!("{}: {stage}", paths.root.display());
    match stage {
        Stage::Generate => generate(config, seed, paths).map(drop),
        Stage::Featurize => featurize(config, paths).map(drop),
        Stage::Train => train(config, seed, paths).map(drop),
        Stage::Detect => detect(config, paths).map(drop),
        Stage::RootCause => rootcause(config, paths).map(drop),
        Stage::Evaluate => evaluate(config, paths).map(drop),
    }
}

/// Records `err` in a `FAILED` marker inside `dir`.
pub fn mark_failed(dir: &Path, err: &Error) {
    let _ = fs::create_dir_all(dir);
    if let Err(e) = fs::write(dir.join(FAILED_MARKER), format!("{err}\n")) {
        log::error!("could not write failure marker in {}: {e}", dir.display());
    }
}

/// Every stage for one seed. On failure the partial artifacts stay and a
/// `FAILED` marker holds the error.
pub fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    paths: &RunPaths,
) -> Result<BTreeMap<String, EvalReport>> {
    let _ = fs::remove_file(paths.failed_marker());
    let result = (|| {
        for stage in &Stage::ALL[..5] {
            run_stage(*stage, config, seed, paths)?;
        }
        evaluate(config, paths)
    })();
    if let Err(e) = &result {
        mark_failed(&paths.root, e);
    }
    result
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run: String,
    pub method: String,
    pub seeds: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub nab_score: f64,
    pub root_cause_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<String>,
    pub version: String,
    pub checkpoint_version: u32,
    pub mcm_format_version: u32,
    pub device: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChildSummary {
    pub label: String,
    pub dir: PathBuf,
    pub per_seed: Vec<(u64, BTreeMap<String, EvalReport>)>,
    pub mean: BTreeMap<String, EvalReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSummary {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub children: Vec<ChildSummary>,
}

impl ExperimentSummary {
    pub fn rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for child in &self.children {
            for (method, r) in &child.mean {
                rows.push(ResultRow {
                    run: if child.label.is_empty() {
                        "default".into()
                    } else {
                        child.label.clone()
                    },
                    method: method.clone(),
                    seeds: child.per_seed.len(),
                    precision: r.precision,
                    recall: r.recall,
                    f1: r.f1,
                    fpr: r.fpr,
                    nab_score: r.nab_score,
                    root_cause_recall: r.root_cause_recall,
                });
            }
        }
        rows
    }
}

fn mean_reports(per_seed: &[(u64, BTreeMap<String, EvalReport>)]) -> BTreeMap<String, EvalReport> {
    let mut out = BTreeMap::new();
    for method in ScoreMethod::ALL {
        let key = method.to_string();
        let all: Vec<EvalReport> = per_seed.iter().filter_map(|(_, m)| m.get(&key).cloned()).collect();
        if let Some(mean) = EvalReport::mean(&all) {
            out.insert(key, mean);
        }
    }
    out
}

/// Runs every child of the sweep for every seed.
///
/// Layout: `<output>/[<child>/]seed-<s>/…`, a `mean.json` per child, plus
/// `results.csv`, `manifest.json` and `config.toml` at the top.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    let root = config.output_dir.clone();
    let result = run_experiment_inner(config, &root);
    if let Err(e) = &result {
        mark_failed(&root, e);
    }
    result
}

fn run_experiment_inner(config: &ExperimentConfig, root: &Path) -> Result<ExperimentSummary> {
    config.validate()?;
    let device = device_from_env()?;
    fs::create_dir_all(root)?;
    let _ = fs::remove_file(root.join(FAILED_MARKER));
    fs::write(root.join("config.toml"), config.to_toml()?)?;

    let children = config.expand();
    let manifest = Manifest {
        name: config.name.clone(),
        config_hash: config.hash()?,
        seeds: config.seeds.clone(),
        runs: children.iter().map(|(l, _)| l.clone()).collect(),
        version: env!("CARGO_PKG_VERSION").into(),
        checkpoint_version: crate::model::CHECKPOINT_VERSION,
        mcm_format_version: crate::mcm::MCM_FORMAT_VERSION,
        device: device.into(),
    };
    write_json(&root.join("manifest.json"), &manifest)?;

    let mut summaries = Vec::new();
    for (label, child) in children {
        let dir = if label.is_empty() {
            root.to_path_buf()
        } else {
            root.join(&label)
        };
        let mut per_seed = Vec::new();
        for &seed in &child.seeds {
            let reports = run_seed(&child, seed, &RunPaths::for_seed(&dir, seed))?;
            per_seed.push((seed, reports));
        }
        let mean = mean_reports(&per_seed);
        write_json(&dir.join("mean.json"), &mean)?;
        summaries.push(ChildSummary {
            label,
            dir,
            per_seed,
            mean,
        });
    }
    let summary = ExperimentSummary {
        root: root.to_path_buf(),
        manifest,
        children: summaries,
    };
    let mut w = csv::Writer::from_path(root.join("results.csv"))?;
    for row in summary.rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_base_keeps_full_network() {
        let text = "[network]\nepochs = 7\n";
        let full = ExperimentConfig::from_toml_over(text, &ExperimentConfig::full_scale()).unwrap();
        let desk = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(full.network.epochs, 7);
        assert_eq!(full.network.conv_layers, NetworkConfig::default().conv_layers);
        assert_eq!(desk.network.conv_layers, NetworkConfig::desk().conv_layers);
        assert_eq!(full.dataset, desk.dataset);
    }

    #[test]
    fn device_selection() {
        assert_eq!(resolve_device(None).unwrap(), "cpu");
        assert_eq!(resolve_device(Some("cpu")).unwrap(), "cpu");
        assert!(matches!(resolve_device(Some("cuda")), Err(Error::Config(_))));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.sweep.train_anomalies = vec![0, 5];
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = ExperimentConfig::from_toml("seeds = [3, 4]\n[dataset]\ntest_anomalies = 4\n").unwrap();
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.dataset.test_anomalies, 4);
        assert_eq!(c.dataset.n_series, 10);
        assert_eq!(c.network, NetworkConfig::desk());
        let c = ExperimentConfig::from_toml("[network]\nbatch_size = 16\noptimizer = { beta1 = 0.0 }\n").unwrap();
        assert_eq!(c.network.batch_size, 16);
        assert_eq!(c.network.optimizer.beta1, 0.0);
        assert_eq!(c.network.optimizer.learning_rate, 1e-3);
        assert_eq!(c.network.conv_layers, NetworkConfig::desk().conv_layers);
        assert!(ExperimentConfig::from_toml("[network]\nwidth = 3\n").is_err());
    }

    #[test]
    fn sweep_expands_to_cartesian_product() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.expand().len(), 1);
        assert_eq!(c.expand()[0].0, "");
        c.sweep.train_anomalies = vec![0, 5, 10, 15];
        let kids = c.expand();
        assert_eq!(kids.len(), 4);
        let counts: Vec<usize> = kids.iter().map(|(_, k)| k.dataset.train_anomalies).collect();
        assert_eq!(counts, vec![0, 5, 10, 15]);
        assert!(kids.iter().all(|(_, k)| k.sweep.is_empty()));
        c.sweep.mask_holidays = vec![true, false];
        let kids = c.expand();
        assert_eq!(kids.len(), 8);
        assert_eq!(kids[1].0, "train_anomalies-0_mask_holidays-false");
        let labels: std::collections::BTreeSet<_> = kids.iter().map(|(l, _)| l.clone()).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seeds = vec![2];
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        c.seeds = vec![1];
        c.external = Some(ExternalData {
            csv: "/nonexistent/data.csv".into(),
            labels: "/nonexistent/labels.json".into(),
            holidays: None,
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert!("fit".parse::<Stage>().is_err());
    }
}
