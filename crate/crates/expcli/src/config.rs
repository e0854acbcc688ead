//! Experiment configuration: built-in defaults, the desk-scale preset, a TOML
//! file (or a previous run's manifest) and command-line overrides, applied in
//! that order.

use std::fs;
use std::path::{Path, PathBuf};

use gadkl_core::acquisition::{AcquisitionKind, AcquisitionSpec};
use gadkl_core::dkl::DklConfig;
use gadkl_core::ferrosim::LatticeConfig;
use gadkl_core::genetic::GaConfig;
use gadkl_core::orchestrator::{Budget, EstimationPolicy, PolicyConfig, RunConfig, SimulatorConfig};
use gadkl_core::waveform::WaveformConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "GADKL_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "gadkl-out";
const MAX_DEFAULT_WORKERS: usize = 10;

/// Settings specific to the policy-comparison subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Active-learning seeds for the acquisition comparison.
    pub acquisition_seeds: Vec<u64>,
    /// Queries per acquisition run on the snapshot.
    pub acquisition_budget: usize,
    pub acquisition_batch_size: usize,
    /// Master seeds for the estimation-policy sweep.
    pub estimation_seeds: Vec<u64>,
    pub estimation_filters: usize,
    pub estimation_batch_size: usize,
    pub estimation_budget: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            acquisition_seeds: (0..5).collect(),
            acquisition_budget: 100,
            acquisition_batch_size: 10,
            estimation_seeds: (0..3).collect(),
            estimation_filters: 32,
            estimation_batch_size: 1,
            estimation_budget: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub generations: usize,
    /// Simulator threads; does not affect results.
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub ga: GaConfig,
    pub waveform: WaveformConfig,
    pub simulator: SimulatorConfig,
    pub dkl: DklConfig,
    pub policy: PolicyConfig,
    pub study: StudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            master_seed: run.master_seed,
            generations: run.generations,
            workers: None,
            output_dir: None,
            ga: run.ga,
            waveform: run.waveform,
            simulator: run.simulator,
            dkl: run.dkl,
            policy: run.policy,
            study: StudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: population 200, 10 generations, budget 20 and a
    /// 20×20 lattice.
    pub fn small() -> Self {
        let mut c = Self::default();
        c.ga.population_size = 200;
        c.generations = 10;
        c.policy.query_budget = Budget::Count(20);
        c.simulator.lattice = LatticeConfig {
            n: 20,
            ..c.simulator.lattice
        };
        c
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            master_seed: self.master_seed,
            generations: self.generations,
            ga: self.ga.clone(),
            waveform: self.waveform.clone(),
            simulator: self.simulator.clone(),
            dkl: self.dkl.clone(),
            policy: self.policy.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.run_config().validate()?;
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        let s = &self.study;
        if s.estimation_filters == 0
            || s.estimation_batch_size == 0
            || s.estimation_budget < s.estimation_batch_size
            || s.acquisition_batch_size == 0
            || s.acquisition_budget < s.acquisition_batch_size
        {
            return Err(CliError::Config(
                "study filters and batch sizes must be positive, budgets at least the batch size".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over everything that can change results; worker count and
    /// output location are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = None;
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolved_workers(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map_or(1, |n| n.get())
                .min(MAX_DEFAULT_WORKERS)
        })
    }

    /// Config value, then the environment variable, then `gadkl-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
    }

    /// Layers a config file over `self`. A `.json` file may be a run manifest,
    /// in which case its embedded config is used.
    pub fn merge_file(&self, path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let layer: Value = if path.extension().is_some_and(|e| e == "json") {
            let v: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            match v {
                Value::Object(mut m) if m.contains_key("config") && m.contains_key("config_hash") => {
                    m.remove("config").unwrap_or_default()
                }
                other => other,
            }
        } else {
            let t: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).map_err(|e| CliError::Config(e.to_string()))?
        };
        self.merge_value(layer).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Layers a TOML snippet over `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self, CliError> {
        let t: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let v = serde_json::to_value(t).map_err(|e| CliError::Config(e.to_string()))?;
        self.merge_value(v).map_err(|e| CliError::Config(e.to_string()))
    }

    fn merge_value(&self, layer: Value) -> Result<Self, serde_json::Error> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, layer);
        serde_json::from_value(base)
    }
}

/// Command-line overrides, applied after any config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML config file, or a manifest.json from an earlier run.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the canonical defaults.
    #[arg(long)]
    pub small: bool,
    #[arg(long = "seed", value_name = "N")]
    pub master_seed: Option<u64>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long, value_name = "N")]
    pub population: Option<usize>,
    /// New ground-truth queries per generation, or `full`.
    #[arg(long)]
    pub budget: Option<Budget>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "KIND")]
    pub acquisition: Option<AcquisitionKind>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long, value_name = "POLICY")]
    pub estimation: Option<EstimationPolicy>,
    #[arg(long, value_name = "N")]
    pub filters: Option<usize>,
    #[arg(long, value_name = "N")]
    pub lattice_n: Option<usize>,
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
    #[arg(long, value_name = "N")]
    pub warm_iterations: Option<usize>,
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    /// Defaults or preset, then the file, then the flags.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = if self.small {
            ExperimentConfig::small()
        } else {
            ExperimentConfig::default()
        };
        if let Some(path) = &self.config {
            c = c.merge_file(path)?;
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.master_seed, self.master_seed);
        set!(c.generations, self.generations);
        set!(c.ga.population_size, self.population);
        set!(c.policy.query_budget, self.budget);
        set!(c.policy.batch_size, self.batch_size);
        if let Some(kind) = self.acquisition {
            c.policy.acquisition = AcquisitionSpec::new(kind);
        }
        set!(c.policy.acquisition.xi, self.xi);
        set!(c.policy.estimation, self.estimation);
        set!(c.dkl.net.conv_filters, self.filters);
        set!(c.simulator.lattice.n, self.lattice_n);
        set!(c.dkl.train.iterations, self.iterations);
        set!(c.dkl.train.warm_iterations, self.warm_iterations);
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if self.output_dir.is_some() {
            c.output_dir = self.output_dir.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Tables replaced as a whole, so their defaults follow the new contents
/// (an acquisition kind brings its own trade-off default).
const REPLACED_TABLES: [&str; 1] = ["acquisition"];

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if !REPLACED_TABLES.contains(&k.as_str()) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
