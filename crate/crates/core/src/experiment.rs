//! Experiment configuration and the pipeline stages the command-line driver
//! exposes: train, pack, infer, bench.
//!
//! Every artifact carries the SHA-256 of the effective configuration and the
//! seed, so outputs of separate stage invocations can be matched up.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{predict_counts, speedup_report, CostConfig, CostReport};
use crate::error::{Error, Result};
use crate::kernels::{run_model, LayerShape};
use crate::pack::file::PackedModel;
use crate::qformat::{LayerPrecisionMap, PrecisionSet};
use crate::train::data::{generate, Dataset, DatasetSpec};
use crate::train::{accuracy, export_packed, run_training, Calibration, ModelSpec, ToyModel, TrainConfig, TrainJob, TrainReport};
use crate::vexec::{ExecContext, InstrCount, Target};

pub const TRAIN_REPORT: &str = "train_report.json";
pub const TRAINED_STATE: &str = "trained.json";
pub const MODEL_FILE: &str = "model.sysm";
pub const INFERENCE: &str = "inference.json";
pub const COST_JSON: &str = "cost_report.json";
pub const COST_CSV: &str = "cost_report.csv";
pub const DATASET_CSV: &str = "dataset.csv";
pub const TRACE: &str = "trace.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// `G124`, `G128` or `G148`.
    pub precision_set: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "cpu")]
    pub target: Target,
}

fn cpu() -> Target {
    Target::Cpu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "unit")]
    pub vmac_cycles: f64,
    #[serde(default = "unit")]
    pub reduce_cycles: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for CostSection {
    fn default() -> Self {
        Self { vmac_cycles: 1.0, reduce_cycles: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_model() -> ModelSpec {
    ModelSpec::mlp(&[16, 16])
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let set = self.set()?;
        self.train.validate(&set)?;
        self.dataset.validate()?;
        CostConfig::new(self.cost.vmac_cycles, self.cost.reduce_cycles, self.experiment.target)?;
        Ok(())
    }

    pub fn set(&self) -> Result<PrecisionSet> {
        PrecisionSet::by_name(&self.experiment.precision_set)
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    /// The output directory is excluded so relocating results keeps the hash.
    pub fn hash(&self) -> [u8; 32] {
        let mut canon = self.clone();
        canon.output = OutputSection::default();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn cost_config(&self) -> Result<CostConfig> {
        CostConfig::new(self.cost.vmac_cycles, self.cost.reduce_cycles, self.experiment.target)
    }

    pub fn job(&self) -> Result<TrainJob> {
        Ok(TrainJob {
            set: self.set()?,
            seed: self.seed(),
            train: self.train.clone(),
            model: self.model.clone(),
            dataset: self.dataset.clone(),
        })
    }

    /// Train and test splits of the seeded dataset.
    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        let data = generate(&self.dataset, self.seed())?;
        Ok(data.split(self.dataset.test_fraction))
    }
}

/// What `train` leaves behind for `pack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedState {
    pub config_hash: String,
    pub seed: u64,
    pub model: ToyModel,
    pub maps: Vec<LayerPrecisionMap>,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub config_hash: String,
    pub seed: u64,
    pub target: Target,
    pub precision_set: [u32; 3],
    pub samples: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
    pub counts: InstrCount,
    pub predicted_counts: InstrCount,
    pub counts_match: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn check_provenance(cfg: &ExperimentConfig, hash: &str, seed: u64, what: &str) -> Result<()> {
    if hash != hex::encode(cfg.hash()) || seed != cfg.seed() {
        return Err(Error::Config(format!("{what} was produced by a different configuration or seed")));
    }
    Ok(())
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub trace: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, trace: bool) -> Self {
        let out = out.unwrap_or_else(|| config.output.dir.clone());
        Self { config, out, trace }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Trains, writes the report, the dataset, the trained state and the
    /// packed model.
    pub fn train(&self) -> Result<TrainReport> {
        fs::create_dir_all(&self.out)?;
        let (train, test) = self.config.splits()?;
        let full = Dataset {
            x: test.x.iter().chain(&train.x).cloned().collect(),
            y: test.y.iter().chain(&train.y).copied().collect(),
            classes: train.classes,
        };
        fs::write(self.path(DATASET_CSV), full.to_csv())?;
        let hash = self.config.hash();
        let outcome = run_training(&self.config.job()?, &train, &test, hash)?;
        write_json(&self.path(TRAIN_REPORT), &outcome.report)?;
        let state = TrainedState {
            config_hash: hex::encode(hash),
            seed: self.config.seed(),
            model: outcome.model,
            maps: outcome.maps,
            calibration: outcome.calibration,
        };
        write_json(&self.path(TRAINED_STATE), &state)?;
        outcome.packed.save(&self.path(MODEL_FILE))?;
        Ok(outcome.report)
    }

    /// Re-packs the trained state into the model file.
    pub fn pack(&self) -> Result<PackedModel> {
        let state: TrainedState = read_json(&self.path(TRAINED_STATE))?;
        check_provenance(&self.config, &state.config_hash, state.seed, TRAINED_STATE)?;
        let packed = export_packed(&state.model, &state.maps, &state.calibration, self.config.hash(), state.seed)?;
        packed.save(&self.path(MODEL_FILE))?;
        Ok(packed)
    }

    fn load_model(&self, model: Option<&Path>) -> Result<PackedModel> {
        let path = model.map_or_else(|| self.path(MODEL_FILE), Path::to_path_buf);
        let m = PackedModel::load(&path)?;
        check_provenance(&self.config, &hex::encode(m.config_hash), m.seed, MODEL_FILE)?;
        Ok(m)
    }

    /// Simulated inference over the test split, cross-checked against the
    /// closed-form instruction counts.
    pub fn infer(&self, model: Option<&Path>) -> Result<InferenceReport> {
        fs::create_dir_all(&self.out)?;
        let packed = self.load_model(model)?;
        let (_, test) = self.config.splits()?;
        let target = self.config.experiment.target;
        let mut ctx = if self.trace { ExecContext::with_trace() } else { ExecContext::new() };
        let out = run_model(&packed, &test.x, target, &mut ctx)?;
        let shapes: Vec<LayerShape> = packed.layers.iter().map(|l| l.shape).collect();
        let predicted = predict_counts(&shapes, &packed.maps()?, test.len(), target)?;
        let report = InferenceReport {
            config_hash: hex::encode(packed.config_hash),
            seed: packed.seed,
            target,
            precision_set: self.config.set()?.into(),
            samples: test.len(),
            accuracy: accuracy(&out.logits, &test.y),
            predictions: out.predictions,
            logits: out.logits,
            counts_match: predicted == out.counts,
            counts: out.counts,
            predicted_counts: predicted,
        };
        write_json(&self.path(INFERENCE), &report)?;
        if self.trace {
            fs::write(self.path(TRACE), ctx.trace_text())?;
        }
        Ok(report)
    }

    pub fn bench(&self, model: Option<&Path>) -> Result<CostReport> {
        fs::create_dir_all(&self.out)?;
        let packed = self.load_model(model)?;
        let report = speedup_report(&packed, &self.config.cost_config()?)?;
        write_json(&self.path(COST_JSON), &report)?;
        fs::write(self.path(COST_CSV), report.to_csv())?;
        Ok(report)
    }
}
