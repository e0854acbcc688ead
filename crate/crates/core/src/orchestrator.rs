//! The GA-DKL loop: per generation, seed the surrogate with evaluated elites,
//! actively query the simulator, estimate the rest of the population, and
//! hand those estimates to the GA.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{self, AcquisitionError, AcquisitionSpec};
use crate::dkl::{DklConfig, DklError, DklModel, PosteriorSampler, Prediction};
use crate::ferrosim::{self, DisorderField, LatticeConfig, SimError, Vec2};
use crate::genetic::{self, FitnessProvider, GaConfig, GaError, IdAllocator};
use crate::rng::{self, substream};
use crate::waveform::{self, Chromosome, WaveformConfig};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("simulation of chromosome {id} failed: {source}")]
    Simulation {
        id: u64,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Lattice(#[from] SimError),
    #[error(transparent)]
    Surrogate(#[from] DklError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Genetic(#[from] GaError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl OrchestratorError {
    /// Whether the failure is numerical rather than a configuration problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            OrchestratorError::Simulation { .. }
                | OrchestratorError::Surrogate(
                    DklError::IllConditioned(_) | DklError::NegativeVariance(_) | DklError::NonFinite(_)
                )
        )
    }
}

type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationPolicy {
    MeanOnly,
    UncertaintyOnly,
    #[default]
    Thompson,
}

impl EstimationPolicy {
    pub const ALL: [EstimationPolicy; 3] = [
        EstimationPolicy::UncertaintyOnly,
        EstimationPolicy::MeanOnly,
        EstimationPolicy::Thompson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimationPolicy::MeanOnly => "mean-only",
            EstimationPolicy::UncertaintyOnly => "uncertainty-only",
            EstimationPolicy::Thompson => "thompson",
        }
    }
}

impl fmt::Display for EstimationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimationPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown estimation policy `{s}`"))
    }
}

/// How often a fresh Thompson draw is taken while building a generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThompsonCadence {
    #[default]
    PerEvent,
    PerGeneration,
}

/// New ground-truth queries per generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr", into = "BudgetRepr")]
pub enum Budget {
    Count(usize),
    /// Every chromosome without a truth; the surrogate is bypassed.
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<BudgetRepr> for Budget {
    type Error = String;

    fn try_from(r: BudgetRepr) -> std::result::Result<Self, String> {
        match r {
            BudgetRepr::Count(n) => Ok(Budget::Count(n)),
            BudgetRepr::Word(w) => w.parse(),
        }
    }
}

impl From<Budget> for BudgetRepr {
    fn from(b: Budget) -> Self {
        match b {
            Budget::Count(n) => BudgetRepr::Count(n),
            Budget::Full => BudgetRepr::Word("full".into()),
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Budget::Full);
        }
        s.parse()
            .map(Budget::Count)
            .map_err(|_| format!("budget must be a count or `full`, got `{s}`"))
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(n) => write!(f, "{n}"),
            Budget::Full => f.write_str("full"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub acquisition: AcquisitionSpec,
    pub estimation: EstimationPolicy,
    pub batch_size: usize,
    pub query_budget: Budget,
    /// Fraction of generation 0 evaluated at random before the first fit.
    pub init_random_fraction: f64,
    pub thompson_cadence: ThompsonCadence,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            acquisition: AcquisitionSpec::default(),
            estimation: EstimationPolicy::Thompson,
            batch_size: 10,
            query_budget: Budget::Count(100),
            init_random_fraction: 0.01,
            thompson_cadence: ThompsonCadence::PerEvent,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OrchestratorError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if let Budget::Count(n) = self.query_budget {
            if n < self.batch_size {
                return bad("query_budget must be at least batch_size");
            }
        }
        if !(self.acquisition.xi >= 0.0 && self.acquisition.xi.is_finite()) {
            return bad("acquisition xi must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.init_random_fraction) {
            return bad("init_random_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Generation-0 random evaluations for a population of `size`.
    pub fn bootstrap_count(&self, size: usize) -> usize {
        ((self.init_random_fraction * size as f64).round() as usize).max(MIN_TRAIN).min(size)
    }
}

/// A GP fit needs at least this many observations.
const MIN_TRAIN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub lattice: LatticeConfig,
    /// Physical amplitude of a gene value of 1.
    pub field_scale: f64,
    pub disorder_fraction: f64,
    pub disorder_magnitude: f64,
    /// The disorder realization is part of the objective, so it has its own
    /// seed independent of the run's master seed.
    pub disorder_seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            lattice: LatticeConfig::default(),
            field_scale: 1.0,
            disorder_fraction: 0.15,
            disorder_magnitude: 0.5,
            disorder_seed: 0,
        }
    }
}

/// Ground-truth evaluator with a fixed disorder realization and worker pool.
pub struct Simulator {
    lattice: LatticeConfig,
    field_scale: f64,
    disorder: DisorderField,
    pool: rayon::ThreadPool,
}

impl Simulator {
    pub fn new(config: &SimulatorConfig, workers: usize) -> Result<Self> {
        config.lattice.validate()?;
        let disorder = ferrosim::generate_disorder(
            config.disorder_seed,
            &config.lattice,
            config.disorder_fraction,
            config.disorder_magnitude,
        )?;
        Self::with_disorder(config.lattice.clone(), config.field_scale, disorder, workers)
    }

    pub fn with_disorder(lattice: LatticeConfig, field_scale: f64, disorder: DisorderField, workers: usize) -> Result<Self> {
        lattice.validate()?;
        if !(field_scale.is_finite() && field_scale >= 0.0) {
            return Err(OrchestratorError::InvalidConfig("field_scale must be non-negative".into()));
        }
        if disorder.n() != lattice.n {
            return Err(SimError::ShapeMismatch {
                expected: lattice.sites(),
                got: disorder.n() * disorder.n(),
            }
            .into());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| OrchestratorError::InvalidConfig(format!("worker pool: {e}")))?;
        Ok(Self {
            lattice,
            field_scale,
            disorder,
            pool,
        })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn disorder(&self) -> &DisorderField {
        &self.disorder
    }

    /// Curl of the final state and, when asked, the ⟨p⟩ trace.
    pub fn run(&self, c: &Chromosome, record: bool) -> Result<(f64, Option<Vec<Vec2>>)> {
        let schedule = waveform::to_physical(c, self.field_scale);
        let out = ferrosim::simulate(schedule.values(), &self.disorder, &self.lattice, record)
            .map_err(|source| OrchestratorError::Simulation { id: c.id(), source })?;
        Ok((ferrosim::curl_fitness(&out.state), out.history))
    }

    pub fn evaluate(&self, c: &Chromosome) -> Result<f64> {
        Ok(self.run(c, false)?.0)
    }

    /// Fitness of each chromosome, in input order.
    pub fn evaluate_batch(&self, batch: &[&Chromosome]) -> Result<Vec<f64>> {
        self.pool.install(|| batch.par_iter().map(|c| self.evaluate(c)).collect())
    }
}

/// Source of ground-truth fitness for the active-learning loop.
pub trait GroundTruth: Sync {
    /// Fitness of each chromosome, in input order.
    fn evaluate_batch(&self, batch: &[&Chromosome]) -> Result<Vec<f64>>;
}

impl GroundTruth for Simulator {
    fn evaluate_batch(&self, batch: &[&Chromosome]) -> Result<Vec<f64>> {
        Simulator::evaluate_batch(self, batch)
    }
}

/// Everything recorded while exploring one generation.
#[derive(Clone, Debug)]
pub struct GenerationLedger {
    pub generation: usize,
    pub chromosomes: Vec<Chromosome>,
    /// Members whose truth was carried over from the previous generation.
    pub carried: Vec<usize>,
    /// New simulator queries in the order they were made.
    pub new_queries: Vec<usize>,
    /// How many leading `new_queries` were the generation-0 bootstrap.
    pub bootstrap: usize,
    /// Train-predict-query rounds performed.
    pub al_iterations: usize,
    /// Ground truth for every member that has one (carried or queried).
    pub truth: BTreeMap<usize, f64>,
    /// Surrogate posterior over the whole generation after the last query.
    pub prediction: Option<Prediction>,
    /// Row-major `size × embedding_dim` embeddings after the last query.
    pub embeddings: Option<Vec<f64>>,
    /// RMSE of predictions made just before each queried batch was revealed.
    pub holdout_rmse: Option<f64>,
    pub surrogate_lml: Option<f64>,
    /// Fitness vector of the first estimate handed to the GA.
    pub estimated: Vec<f64>,
}

impl GenerationLedger {
    pub fn queried(&self) -> impl Iterator<Item = usize> + '_ {
        self.truth.keys().copied()
    }

    pub fn is_queried(&self, index: usize) -> bool {
        self.truth.contains_key(&index)
    }

    pub fn unqueried(&self) -> Vec<usize> {
        (0..self.chromosomes.len()).filter(|i| !self.truth.contains_key(i)).collect()
    }

    pub fn best_truth(&self) -> Option<f64> {
        self.truth.values().copied().reduce(f64::max)
    }
}

/// Configuration for the within-generation loop.
#[derive(Clone, Debug)]
pub struct ExploreSettings<'a> {
    pub policy: &'a PolicyConfig,
    pub dkl: &'a DklConfig,
    pub generation: usize,
    pub master_seed: u64,
}

/// Runs active learning over `population`.
///
/// `carried` lists members with a known truth. When it is empty and
/// `generation` is 0, a random bootstrap is evaluated first; otherwise, if
/// fewer than two truths are available, random members are queried out of
/// the budget until there are.
pub fn explore_generation(
    population: Vec<Chromosome>,
    carried: &[(usize, f64)],
    settings: &ExploreSettings<'_>,
    sim: &dyn GroundTruth,
) -> Result<(GenerationLedger, Option<DklModel>)> {
    explore_generation_from(population, carried, settings, sim, None)
}

/// Freshly initialized surrogate for `generation`, fitted with the full
/// iteration count on the given truths (indices into `population`).
pub fn fit_initial_model(
    population: &[Chromosome],
    truth: &BTreeMap<usize, f64>,
    dkl: &DklConfig,
    master_seed: u64,
    generation: usize,
) -> Result<DklModel> {
    let mut init_rng = substream(master_seed, rng::DKL_INIT, generation as u64);
    let mut model = DklModel::new(dkl.clone(), &mut init_rng)?;
    let (xs, ys): (Vec<&[f64]>, Vec<f64>) = truth.iter().map(|(&i, &t)| (population[i].genes(), t)).unzip();
    model.set_training_data(&xs, &ys)?;
    model.train(dkl.train.iterations, dkl.train.network_learning_rate, dkl.train.learning_rate)?;
    Ok(model)
}

/// [`explore_generation`] starting from `fitted`, the result of
/// [`fit_initial_model`] on the carried truths, when given. Comparing several
/// policies on one generation then shares that first fit.
pub fn explore_generation_from(
    population: Vec<Chromosome>,
    carried: &[(usize, f64)],
    settings: &ExploreSettings<'_>,
    sim: &dyn GroundTruth,
    fitted: Option<DklModel>,
) -> Result<(GenerationLedger, Option<DklModel>)> {
    let ExploreSettings {
        policy,
        dkl,
        generation,
        master_seed,
    } = *settings;
    policy.validate()?;
    let size = population.len();
    let mut ledger = GenerationLedger {
        generation,
        chromosomes: population,
        carried: carried.iter().map(|&(i, _)| i).collect(),
        new_queries: Vec::new(),
        bootstrap: 0,
        al_iterations: 0,
        truth: carried.iter().copied().collect(),
        prediction: None,
        embeddings: None,
        holdout_rmse: None,
        surrogate_lml: None,
        estimated: Vec::new(),
    };
    if ledger.truth.len() != carried.len() || carried.iter().any(|&(i, _)| i >= size) {
        return Err(OrchestratorError::InvalidConfig("carried truths must name distinct members".into()));
    }
    let mut pick_rng = substream(master_seed, rng::ACQUISITION, generation as u64);
    let query = |ledger: &mut GenerationLedger, picks: &[usize]| -> Result<Vec<f64>> {
        let batch: Vec<&Chromosome> = picks.iter().map(|&i| &ledger.chromosomes[i]).collect();
        let truths = sim.evaluate_batch(&batch)?;
        for (&i, &t) in picks.iter().zip(&truths) {
            ledger.truth.insert(i, t);
            ledger.new_queries.push(i);
        }
        Ok(truths)
    };
    let random_unqueried = |ledger: &GenerationLedger, k: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let open = ledger.unqueried();
        let mut picks: Vec<usize> = sample(rng, open.len(), k.min(open.len())).into_iter().map(|j| open[j]).collect();
        picks.sort_unstable();
        picks
    };

    if generation == 0 && carried.is_empty() {
        let picks = random_unqueried(&ledger, policy.bootstrap_count(size), &mut pick_rng);
        query(&mut ledger, &picks)?;
        ledger.bootstrap = picks.len();
    }
    let available = size - ledger.truth.len();
    let budget = match policy.query_budget {
        Budget::Full => available,
        Budget::Count(n) if n > available => {
            return Err(AcquisitionError::ExhaustedPool {
                requested: n,
                available,
            }
            .into())
        }
        Budget::Count(n) => n,
    };
    let mut spent = 0;

    if policy.query_budget == Budget::Full {
        let picks = ledger.unqueried();
        query(&mut ledger, &picks)?;
        return Ok((ledger, None));
    }

    if ledger.truth.len() < MIN_TRAIN {
        let need = (MIN_TRAIN - ledger.truth.len()).min(budget);
        let picks = random_unqueried(&ledger, need, &mut pick_rng);
        query(&mut ledger, &picks)?;
        spent += picks.len();
    }
    if ledger.truth.len() < MIN_TRAIN {
        return Err(DklError::TooFewPoints {
            needed: MIN_TRAIN,
            got: ledger.truth.len(),
        }
        .into());
    }

    let mut model = match fitted {
        Some(model) => {
            let expected: Vec<f64> = ledger.truth.values().copied().collect();
            if model.train_targets() != expected.as_slice() {
                return Err(OrchestratorError::InvalidConfig(
                    "pre-fitted surrogate was not trained on this generation's truths".into(),
                ));
            }
            model
        }
        None => fit_initial_model(&ledger.chromosomes, &ledger.truth, dkl, master_seed, generation)?,
    };

    let (mut sq_err, mut n_err) = (0.0, 0usize);
    while spent < budget {
        let open = ledger.unqueried();
        let cands: Vec<&[f64]> = open.iter().map(|&i| ledger.chromosomes[i].genes()).collect();
        let pred = model.predict(&cands)?;
        let scores = acquisition::score(&policy.acquisition, &pred.means, &pred.stds(), ledger.best_truth())?;
        let k = policy.batch_size.min(budget - spent);
        let chosen = acquisition::select_batch(&scores, &HashSet::new(), k)?;
        let picks: Vec<usize> = chosen.iter().map(|&j| open[j]).collect();
        let truths = query(&mut ledger, &picks)?;
        for (&j, &t) in chosen.iter().zip(&truths) {
            sq_err += (pred.means[j] - t).powi(2);
            n_err += 1;
        }
        let xs: Vec<&[f64]> = picks.iter().map(|&i| ledger.chromosomes[i].genes()).collect();
        model.add_training_data(&xs, &truths)?;
        spent += picks.len();
        ledger.al_iterations += 1;
        // The final batch only conditions the posterior.
        if spent < budget {
            model.train(dkl.train.warm_iterations, dkl.train.network_learning_rate, dkl.train.learning_rate)?;
        }
    }

    let all: Vec<&[f64]> = ledger.chromosomes.iter().map(|c| c.genes()).collect();
    ledger.prediction = Some(model.predict(&all)?);
    ledger.embeddings = Some(model.embed_many(&all)?);
    ledger.holdout_rmse = (n_err > 0).then(|| (sq_err / n_err as f64).sqrt());
    ledger.surrogate_lml = Some(model.log_marginal_likelihood()?);
    Ok((ledger, Some(model)))
}

/// Full-generation fitness from truths plus a surrogate policy.
pub struct FitnessEstimator {
    base: Vec<f64>,
    unqueried: Vec<usize>,
    policy: EstimationPolicy,
    sampler: Option<PosteriorSampler>,
}

impl FitnessEstimator {
    pub fn new(ledger: &GenerationLedger, model: Option<&DklModel>, policy: EstimationPolicy) -> Result<Self> {
        let size = ledger.chromosomes.len();
        let unqueried = ledger.unqueried();
        let mut base = vec![0.0; size];
        for (&i, &t) in &ledger.truth {
            base[i] = t;
        }
        let mut sampler = None;
        if !unqueried.is_empty() {
            let model = model.ok_or_else(|| {
                OrchestratorError::InvalidConfig("unqueried members need a surrogate to estimate".into())
            })?;
            let xs: Vec<&[f64]> = unqueried.iter().map(|&i| ledger.chromosomes[i].genes()).collect();
            match policy {
                EstimationPolicy::MeanOnly | EstimationPolicy::UncertaintyOnly => {
                    let p = match &ledger.prediction {
                        Some(p) if p.means.len() == size => Prediction {
                            means: unqueried.iter().map(|&i| p.means[i]).collect(),
                            variances: unqueried.iter().map(|&i| p.variances[i]).collect(),
                        },
                        _ => model.predict(&xs)?,
                    };
                    for (k, &i) in unqueried.iter().enumerate() {
                        base[i] = match policy {
                            EstimationPolicy::MeanOnly => p.means[k],
                            _ => p.variances[k].sqrt(),
                        };
                    }
                }
                EstimationPolicy::Thompson => sampler = Some(model.posterior_sampler(&xs)?),
            }
        }
        for v in base.iter_mut() {
            *v = v.max(0.0);
        }
        Ok(Self {
            base,
            unqueried,
            policy,
            sampler,
        })
    }

    pub fn policy(&self) -> EstimationPolicy {
        self.policy
    }

    /// One estimate; only Thompson consumes randomness.
    pub fn estimate<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = self.base.clone();
        if let Some(s) = &self.sampler {
            for (&i, v) in self.unqueried.iter().zip(s.sample(rng)) {
                out[i] = v.max(0.0);
            }
        }
        out
    }
}

pub fn estimate_fitness<R: Rng + ?Sized>(
    ledger: &GenerationLedger,
    model: Option<&DklModel>,
    policy: EstimationPolicy,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(FitnessEstimator::new(ledger, model, policy)?.estimate(rng))
}

/// Feeds estimates to the GA, re-sampling per event or once per generation.
struct EstimateProvider<'a, R> {
    estimator: &'a FitnessEstimator,
    measured: Vec<bool>,
    rng: R,
    cadence: ThompsonCadence,
    cached: Option<Vec<f64>>,
    first: Option<Vec<f64>>,
}

impl<R: Rng> FitnessProvider for EstimateProvider<'_, R> {
    fn next_fitness(&mut self) -> std::result::Result<Vec<f64>, GaError> {
        if let (ThompsonCadence::PerGeneration, Some(c)) = (self.cadence, &self.cached) {
            return Ok(c.clone());
        }
        let f = self.estimator.estimate(&mut self.rng);
        self.cached = Some(f.clone());
        if self.first.is_none() {
            self.first = Some(f.clone());
        }
        Ok(f)
    }

    fn is_measured(&self, index: usize) -> bool {
        self.measured[index]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub generations: usize,
    pub ga: GaConfig,
    pub waveform: WaveformConfig,
    pub simulator: SimulatorConfig,
    pub dkl: DklConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            generations: 40,
            ga: GaConfig::default(),
            waveform: WaveformConfig::default(),
            simulator: SimulatorConfig::default(),
            dkl: DklConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ga.validate()?;
        self.dkl.validate()?;
        self.policy.validate()?;
        self.simulator.lattice.validate()?;
        if self.generations == 0 {
            return Err(OrchestratorError::InvalidConfig("generations must be at least 1".into()));
        }
        if self.dkl.net.input_len != waveform::GENE_COUNT {
            return Err(OrchestratorError::InvalidConfig(format!(
                "surrogate input_len must equal the gene count {}",
                waveform::GENE_COUNT
            )));
        }
        Ok(())
    }
}

/// Per-generation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub generation: usize,
    pub population: usize,
    /// Members with a truth, carried or newly queried.
    pub queried: usize,
    pub carried: usize,
    pub new_queries: usize,
    pub bootstrap_queries: usize,
    pub best: f64,
    pub median: f64,
    pub min: f64,
    pub best_so_far: f64,
    pub holdout_rmse: Option<f64>,
    /// Mean predictive standard deviation over the generation.
    pub mean_std: Option<f64>,
    pub wall_clock_s: f64,
}

/// A chromosome whose fitness was measured during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub generation: usize,
    pub chromosome: Chromosome,
    pub fitness: f64,
    /// True for a new simulator call, false for a carried truth.
    pub new: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub generations: Vec<GenerationMetrics>,
    pub archive: Vec<QueryRecord>,
    pub total_queries: usize,
    pub bootstrap_queries: usize,
    pub wall_clock_s: f64,
}

impl RunResult {
    pub fn best_so_far(&self) -> Option<f64> {
        self.generations.last().map(|g| g.best_so_far)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn run(config: &RunConfig, sim: &dyn GroundTruth) -> Result<RunResult> {
    run_with(config, sim, |_, _| {})
}

/// Runs the loop, calling `observe` after each generation's exploration.
pub fn run_with<F>(config: &RunConfig, sim: &dyn GroundTruth, mut observe: F) -> Result<RunResult>
where
    F: FnMut(&GenerationLedger, Option<&DklModel>),
{
    config.validate()?;
    let started = Instant::now();
    let seed = config.master_seed;
    let mut population =
        waveform::seed_population(&mut substream(seed, rng::POPULATION, 0), config.ga.population_size, &config.waveform);
    let mut ids = IdAllocator::after(&population);
    let mut carried: Vec<(usize, f64)> = Vec::new();
    let mut metrics = Vec::new();
    let mut archive = Vec::new();
    let (mut total, mut bootstrap) = (0usize, 0usize);
    let mut best_so_far = f64::NEG_INFINITY;

    for g in 0..config.generations {
        let gen_started = Instant::now();
        let settings = ExploreSettings {
            policy: &config.policy,
            dkl: &config.dkl,
            generation: g,
            master_seed: seed,
        };
        let (mut ledger, model) = explore_generation(population, &carried, &settings, sim)?;

        let estimator = FitnessEstimator::new(&ledger, model.as_ref(), config.policy.estimation)?;
        let mut provider = EstimateProvider {
            estimator: &estimator,
            measured: (0..ledger.chromosomes.len()).map(|i| ledger.is_queried(i)).collect(),
            rng: substream(seed, rng::THOMPSON, g as u64),
            cadence: config.policy.thompson_cadence,
            cached: None,
            first: None,
        };
        let next = genetic::next_generation(
            &ledger.chromosomes,
            &mut provider,
            &config.ga,
            &mut substream(seed, rng::GA, g as u64),
            &mut ids,
        )?;
        ledger.estimated = provider.first.take().unwrap_or_default();
        observe(&ledger, model.as_ref());

        let truths: Vec<f64> = ledger.truth.values().copied().collect();
        let best = truths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        best_so_far = best_so_far.max(best);
        total += ledger.new_queries.len();
        bootstrap += ledger.bootstrap;
        let carried_set: HashSet<usize> = ledger.carried.iter().copied().collect();
        for (&i, &t) in &ledger.truth {
            archive.push(QueryRecord {
                generation: g,
                chromosome: ledger.chromosomes[i].clone(),
                fitness: t,
                new: !carried_set.contains(&i),
            });
        }
        metrics.push(GenerationMetrics {
            generation: g,
            population: ledger.chromosomes.len(),
            queried: truths.len(),
            carried: ledger.carried.len(),
            new_queries: ledger.new_queries.len(),
            bootstrap_queries: ledger.bootstrap,
            best,
            median: median(&truths),
            min: truths.iter().copied().fold(f64::INFINITY, f64::min),
            best_so_far,
            holdout_rmse: ledger.holdout_rmse,
            mean_std: ledger.prediction.as_ref().map(|p| {
                let s = p.stds();
                s.iter().sum::<f64>() / s.len() as f64
            }),
            wall_clock_s: gen_started.elapsed().as_secs_f64(),
        });

        carried = next
            .elite_sources
            .iter()
            .enumerate()
            .filter_map(|(slot, &src)| ledger.truth.get(&src).map(|&t| (slot, t)))
            .collect();
        population = next.chromosomes;
    }
    Ok(RunResult {
        generations: metrics,
        archive,
        total_queries: total,
        bootstrap_queries: bootstrap,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
