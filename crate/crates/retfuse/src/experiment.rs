//! Experiment orchestration: a TOML-described pipeline that generates
//! (or loads) a dataset, splits it by patient, trains every configured
//! run, and compares them on the held-out test split.
//!
//! Everything here is library-level so the command-line front end
//! stays a thin argument parser.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{BackboneSpec, PRESET_NAMES};
use crate::data::{
    load_dataset, preprocess, save_dataset, split_by_patient, synth_generate, Acquisition,
    DataError, DatasetSplit, SynthConfig, TargetGrids, DEFAULT_FRACTIONS,
};
use crate::eval::{self, operating_point, roc_curve, EvalError, ScoredSet};
use crate::fusion::{build_model, FusionError, FusionModel, Method};
use crate::report::{roc_svg, MetricsReport, ReportError, ReportRow, RocSeries};
use crate::train::{self, StoppingReason, TrainConfig, TrainError};

pub const CONFIG_VERSION: u32 = 1;

// ── Errors ───────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error("config is not valid TOML: {0}")]
    Toml(#[from] Box<toml::de::Error>),
    #[error("run '{run}': {msg}")]
    Run { run: String, msg: String },
    #[error("scores line {line}: {msg}")]
    ScoresParse { line: usize, msg: String },
    #[error("{0} already exists; refusing to overwrite")]
    AlreadyExists(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] FusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── Configuration ────────────────────────────────────────────────────

/// Where acquisitions come from: an existing manifest on disk, or a
/// synthetic-cohort description generated on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Manifest {
        path: PathBuf,
    },
    Synth {
        #[serde(flatten)]
        synth: SynthConfig,
    },
}

fn d_fractions() -> [f64; 3] {
    DEFAULT_FRACTIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train/val/test patient fractions.
    #[serde(default = "d_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    /// Optional resampling targets; omitted axes keep each
    /// acquisition's native grid.
    #[serde(default)]
    pub volume_grid: Option<[usize; 3]>,
    #[serde(default)]
    pub lso_grid: Option<[usize; 2]>,
}

fn d_preset() -> String {
    "mini-res-a".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Unique name; doubles as the run's directory name.
    pub name: String,
    pub method: Method,
    #[serde(default = "d_preset")]
    pub preset: String,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

fn d_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Config schema version; must be 1.
    pub version: u32,
    pub data: DataConfig,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    /// Name of the run the improvement column is measured against.
    pub baseline: String,
    pub runs: Vec<RunConfig>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.')
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::BadConfig(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (supported: {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.runs.is_empty() {
            return bad("at least one run is required".into());
        }
        let mut seen = HashSet::new();
        for run in &self.runs {
            if !valid_name(&run.name) {
                return bad(format!(
                    "run name '{}' is invalid (use letters, digits, '-', '_', '.')",
                    run.name
                ));
            }
            if !seen.insert(run.name.as_str()) {
                return bad(format!("duplicate run name '{}'", run.name));
            }
            if !PRESET_NAMES.contains(&run.preset.as_str()) {
                return bad(format!(
                    "run '{}': unknown preset '{}' (expected one of {PRESET_NAMES:?})",
                    run.name, run.preset
                ));
            }
            run.train.validate()?;
        }
        if !seen.contains(self.baseline.as_str()) {
            return bad(format!(
                "baseline '{}' does not name any configured run",
                self.baseline
            ));
        }
        let f = &self.data.split_fractions;
        if f.iter().any(|v| !v.is_finite() || *v <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("split_fractions must be positive and sum to 1, got {f:?}"));
        }
        if let DataSource::Synth { synth } = &self.data.source {
            synth.validate()?;
        }
        if let Some(g) = self.data.volume_grid {
            if g.contains(&0) {
                return bad(format!("volume_grid extents must be nonzero, got {g:?}"));
            }
        }
        if let Some(g) = self.data.lso_grid {
            if g.contains(&0) {
                return bad(format!("lso_grid extents must be nonzero, got {g:?}"));
            }
        }
        // Where the training grids are statically known, reject ones
        // that collapse a backbone's last stage — per-sample batch
        // norm would zero every feature there, so training could only
        // produce a dead model.
        let (vol, lso) = match &self.data.source {
            DataSource::Synth { synth } => (
                Some(self.data.volume_grid.unwrap_or([
                    synth.grid.d,
                    synth.grid.h,
                    synth.grid.w,
                ])),
                Some(self
                    .data
                    .lso_grid
                    .unwrap_or([synth.grid.lso_h, synth.grid.lso_w])),
            ),
            DataSource::Manifest { .. } => (self.data.volume_grid, self.data.lso_grid),
        };
        for run in &self.runs {
            let grids: [(usize, Option<Vec<usize>>); 2] = [
                (3, vol.map(|g| g.to_vec())),
                (2, lso.map(|g| g.to_vec())),
            ];
            for (rank, extents) in grids {
                let Some(e) = extents else { continue };
                let spec = BackboneSpec::preset(&run.preset, rank)
                    .map_err(|err| ExperimentError::BadConfig(err.to_string()))?;
                if let Err(err) = spec.check_train_viability(&e) {
                    return bad(format!("run '{}': {err}", run.name));
                }
            }
        }
        Ok(())
    }
}

/// Parse and validate a TOML experiment description.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(Box::new)?;
    config.validate()?;
    Ok(config)
}

// ── Experiment driver ────────────────────────────────────────────────

/// A validated config anchored to the directory its file came from;
/// relative paths in the config resolve against that directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub stopping: StoppingReason,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub checkpoint: PathBuf,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        matches!(self.stopping, StoppingReason::Diverged)
    }
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub report: MetricsReport,
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let config = parse_experiment(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(Experiment { config, base })
    }

    pub fn from_parts(config: ExperimentConfig, base: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Experiment {
            config,
            base: base.into(),
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        resolve(&self.base, &self.config.output_dir)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir().join("dataset")
    }

    pub fn run_dir(&self, run: &str) -> PathBuf {
        self.output_dir().join("runs").join(run)
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.config.data.source {
            DataSource::Manifest { path } => resolve(&self.base, path),
            DataSource::Synth { .. } => self.dataset_dir().join("manifest.txt"),
        }
    }

    /// Generate the synthetic dataset onto disk. Same seed, same
    /// bytes; an existing dataset is only replaced with `force`.
    pub fn cmd_synth(&self, force: bool) -> Result<PathBuf> {
        let synth = match &self.config.data.source {
            DataSource::Synth { synth } => synth,
            DataSource::Manifest { path } => {
                return Err(ExperimentError::BadConfig(format!(
                    "data source is an existing manifest ({}); nothing to synthesize",
                    path.display()
                )))
            }
        };
        let dir = self.dataset_dir();
        let manifest = dir.join("manifest.txt");
        if manifest.exists() {
            if !force {
                return Err(ExperimentError::AlreadyExists(manifest));
            }
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let acqs = synth_generate(synth)?;
        let path = save_dataset(&acqs, &dir)?;
        log::info!(
            "wrote {} acquisitions to {}",
            acqs.len(),
            dir.display()
        );
        Ok(path)
    }

    /// Load every acquisition, resample to the configured grids (or
    /// keep native ones) and normalize intensities.
    pub fn load_prepared(&self) -> Result<Vec<Acquisition>> {
        let manifest = self.manifest_path();
        if !manifest.exists() {
            let hint = match self.config.data.source {
                DataSource::Synth { .. } => "; generate it first (synth command)",
                DataSource::Manifest { .. } => "",
            };
            return Err(ExperimentError::BadConfig(format!(
                "dataset manifest not found at {}{hint}",
                manifest.display()
            )));
        }
        let raw = load_dataset(&manifest)?;
        raw.iter()
            .map(|acq| {
                let s = acq.structure.shape();
                let l = acq.lso.shape();
                let grids = TargetGrids {
                    volume: self.config.data.volume_grid.unwrap_or([s[0], s[1], s[2]]),
                    lso: self.config.data.lso_grid.unwrap_or([l[0], l[1]]),
                };
                Ok(preprocess(acq, &grids)?)
            })
            .collect()
    }

    /// Patient-grouped split of prepared acquisitions, materialized in
    /// dataset order within each split.
    pub fn split_sets(
        &self,
        acqs: Vec<Acquisition>,
    ) -> Result<(Vec<Acquisition>, Vec<Acquisition>, Vec<Acquisition>, DatasetSplit)> {
        let split = split_by_patient(
            &acqs,
            self.config.data.split_fractions,
            self.config.data.split_seed,
        )?;
        let val_ids: HashSet<&str> = split.val.iter().map(String::as_str).collect();
        let test_ids: HashSet<&str> = split.test.iter().map(String::as_str).collect();
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for acq in acqs {
            if val_ids.contains(acq.acquisition_id.as_str()) {
                val.push(acq);
            } else if test_ids.contains(acq.acquisition_id.as_str()) {
                test.push(acq);
            } else {
                train.push(acq);
            }
        }
        Ok((train, val, test, split))
    }

    /// Train every configured run. A diverged run is recorded and the
    /// remaining runs still execute; the caller decides how to surface
    /// that (the CLI exits nonzero).
    pub fn cmd_run(&self) -> Result<Vec<RunOutcome>> {
        self.cmd_run_only(None)
    }

    /// Train either every configured run or just the one named in
    /// `only`.
    pub fn cmd_run_only(&self, only: Option<&str>) -> Result<Vec<RunOutcome>> {
        if let Some(name) = only {
            if !self.config.runs.iter().any(|r| r.name == name) {
                return Err(ExperimentError::BadConfig(format!(
                    "no run named '{name}' in the config"
                )));
            }
        }
        let (train_set, val_set, _test, split) = self.split_sets(self.load_prepared()?)?;
        log::info!(
            "split sizes: {} train / {} val / {} test acquisitions",
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        let mut outcomes = Vec::new();
        for run in &self.config.runs {
            if only.is_some_and(|name| name != run.name) {
                continue;
            }
            let dir = self.run_dir(&run.name);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
            }
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

            let mut model = build_model(run.method, &run.preset, run.init_seed)?;
            log::info!(
                "run '{}': {} on {} ({} parameters)",
                run.name,
                run.method,
                run.preset,
                model.param_count()
            );
            let history = train::train(&mut model, &train_set, &val_set, &run.train)?;

            let best_epoch = history.best_epoch;
            let best_val_auc = history.best_val_auc();
            let checkpoint = dir.join(format!(
                "checkpoint_e{:03}_auc{:.4}.farc",
                best_epoch.unwrap_or(0),
                best_val_auc.unwrap_or(0.0)
            ));
            let mut meta = vec![
                ("run".to_string(), run.name.clone()),
                ("epoch".to_string(), best_epoch.unwrap_or(0).to_string()),
                ("stopping".to_string(), history.stopping.as_str().to_string()),
            ];
            if let Some(auc) = best_val_auc {
                meta.push(("val-auc".to_string(), format!("{auc}")));
            }
            model.save_checkpoint(&checkpoint, &meta)?;
            history.save(&dir.join("history.txt"))?;

            if history.stopping == StoppingReason::Diverged {
                log::warn!("run '{}' diverged; kept last good weights", run.name);
            } else {
                log::info!(
                    "run '{}' finished ({}): best epoch {:?} val AUC {:?}",
                    run.name,
                    history.stopping.as_str(),
                    best_epoch,
                    best_val_auc
                );
            }
            outcomes.push(RunOutcome {
                name: run.name.clone(),
                stopping: history.stopping,
                best_epoch,
                best_val_auc,
                checkpoint,
            });
        }
        Ok(outcomes)
    }

    /// Evaluate every trained run on the test split at the threshold
    /// chosen on the validation split, then write `report.csv` and
    /// `roc.svg` under the output directory.
    pub fn cmd_compare(&self) -> Result<CompareOutcome> {
        let (_train, val_set, test_set, _split) = self.split_sets(self.load_prepared()?)?;
        let mut rows = Vec::new();
        let mut curves = Vec::new();
        for run in &self.config.runs {
            let dir = self.run_dir(&run.name);
            let ckpt = find_checkpoint(&dir).map_err(|msg| ExperimentError::Run {
                run: run.name.clone(),
                msg,
            })?;
            let model = FusionModel::load_checkpoint(&ckpt)?;
            if model.method() != run.method || model.preset() != run.preset {
                return Err(ExperimentError::Run {
                    run: run.name.clone(),
                    msg: format!(
                        "checkpoint was trained as {} on {}, but the config says {} on {}",
                        model.method(),
                        model.preset(),
                        run.method,
                        run.preset
                    ),
                });
            }
            let val_scores = score_set(&model, &val_set)?;
            let op = operating_point(&val_scores)?;
            let test_scores = score_set(&model, &test_set)?;
            save_scores(&dir.join("test_scores.txt"), &test_scores)?;
            let auc = eval::auc(&test_scores)?;
            let (sensitivity, specificity) = eval::sens_spec(&test_scores, op.threshold)?;
            rows.push(ReportRow {
                method: run.method.as_string(),
                backbone: run.preset.clone(),
                auc,
                sensitivity,
                specificity,
            });
            curves.push(RocSeries {
                label: run.name.clone(),
                curve: roc_curve(&test_scores)?,
            });
        }
        let baseline_index = self
            .config
            .runs
            .iter()
            .position(|r| r.name == self.config.baseline)
            .expect("baseline validated at config load");
        let report = MetricsReport::new(rows, baseline_index)?;

        let out = self.output_dir();
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        let csv_path = out.join("report.csv");
        std::fs::write(&csv_path, report.to_csv()).map_err(io_err(&csv_path))?;
        let svg_path = out.join("roc.svg");
        std::fs::write(&svg_path, roc_svg(&curves)).map_err(io_err(&svg_path))?;
        log::info!("wrote {} and {}", csv_path.display(), svg_path.display());
        Ok(CompareOutcome {
            report,
            csv_path,
            svg_path,
        })
    }
}

/// Score a split in dataset order.
pub fn score_set(model: &FusionModel, set: &[Acquisition]) -> Result<ScoredSet> {
    let scores: Vec<f32> = set
        .par_iter()
        .map(|a| model.predict(a).map(|p| p as f32))
        .collect::<Result<Vec<_>, FusionError>>()?;
    Ok(ScoredSet::new(
        set.iter().map(|a| a.acquisition_id.clone()).collect(),
        scores,
        set.iter().map(|a| a.label()).collect(),
    )?)
}

/// Locate the single `checkpoint_*.farc` in a run directory.
fn find_checkpoint(dir: &Path) -> Result<PathBuf, String> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Err(format!("no run directory at {}; train it first", dir.display())),
    };
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("checkpoint_") && n.ends_with(".farc"))
                .unwrap_or(false)
        })
        .collect();
    found.sort();
    match found.len() {
        0 => Err(format!("no checkpoint in {}; train it first", dir.display())),
        1 => Ok(found.remove(0)),
        _ => Err(format!("multiple checkpoints in {}: {found:?}", dir.display())),
    }
}

// ── Score persistence ────────────────────────────────────────────────

pub const SCORES_VERSION: u32 = 1;

/// Shortest-round-trip float rendering keeps reloaded scores
/// bit-identical, so metrics recomputed from the file match the
/// report exactly.
pub fn render_scores(set: &ScoredSet) -> String {
    let mut out = format!("scores-version {SCORES_VERSION}\n");
    for i in 0..set.len() {
        out.push_str(&format!(
            "acq {} label {} score {}\n",
            set.ids()[i],
            set.labels()[i] as u8,
            set.scores()[i]
        ));
    }
    out
}

pub fn parse_scores(text: &str) -> Result<ScoredSet> {
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut version_seen = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |msg: String| ExperimentError::ScoresParse { line: line_no, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if !version_seen {
            match toks.as_slice() {
                ["scores-version", v] if v.parse() == Ok(SCORES_VERSION) => {
                    version_seen = true;
                    continue;
                }
                _ => return Err(fail("expected 'scores-version 1' first".into())),
            }
        }
        match toks.as_slice() {
            ["acq", id, "label", label, "score", score] => {
                let label = match *label {
                    "0" => false,
                    "1" => true,
                    other => return Err(fail(format!("label must be 0 or 1, got '{other}'"))),
                };
                let score: f32 = score
                    .parse()
                    .map_err(|_| fail(format!("unparseable score '{score}'")))?;
                if !score.is_finite() {
                    return Err(fail(format!("non-finite score '{score}'")));
                }
                ids.push(id.to_string());
                scores.push(score);
                labels.push(label);
            }
            _ => return Err(fail(format!("unrecognized line '{line}'"))),
        }
    }
    if !version_seen {
        return Err(ExperimentError::ScoresParse {
            line: 1,
            msg: "empty scores file: missing version line".into(),
        });
    }
    Ok(ScoredSet::new(ids, scores, labels)?)
}

pub fn save_scores(path: &Path, set: &ScoredSet) -> Result<()> {
    std::fs::write(path, render_scores(set)).map_err(io_err(path))
}

pub fn load_scores(path: &Path) -> Result<ScoredSet> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_scores(&text)
}
