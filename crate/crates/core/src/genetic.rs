//! Trajectory-preserving GA operators.
//!
//! Offspring are built only from smooth operations on whole curves: convex
//! combinations of two parents and the addition of a Gaussian bump. Parents
//! are drawn with probability proportional to fitness; the top fraction of a
//! generation is carried over unchanged.

use std::error::Error as StdError;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::{min_max_normalize, Chromosome, Lineage, GENE_COUNT};

#[derive(Debug, Error)]
pub enum GaError {
    #[error("all fitness values are zero")]
    AllZeroFitness,
    #[error("fitness entry {index} is {value}; entries must be finite and non-negative")]
    InvalidFitness { index: usize, value: f64 },
    #[error("fitness vector has {got} entries for a population of {expected}")]
    FitnessLength { expected: usize, got: usize },
    #[error("empty population")]
    EmptyPopulation,
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error("fitness provider failed: {0}")]
    Provider(#[source] Box<dyn StdError + Send + Sync>),
}

/// What to do with genes pushed outside `[-1, 1]` by a mutation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Renorm {
    Clip,
    #[default]
    MinMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population_size: usize,
    pub carryover_fraction: f64,
    /// Probability that an offspring event is a crossover rather than a mutation.
    pub crossover_prob: f64,
    /// Bump centre range, in timesteps.
    pub mu_range: [f64; 2],
    /// Half-normal width: `sigma_loc + |N(0, sigma_scale²)|`, in timesteps.
    pub sigma_loc: f64,
    pub sigma_scale: f64,
    pub weight_range: [f64; 2],
    pub renorm: Renorm,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 1000,
            carryover_fraction: 0.15,
            crossover_prob: 0.5,
            mu_range: [100.0, 800.0],
            sigma_loc: 50.0,
            sigma_scale: 150.0,
            weight_range: [50.0, 150.0],
            renorm: Renorm::MinMax,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let bad = |m: &str| Err(GaError::InvalidConfig(m.to_string()));
        if self.population_size == 0 {
            return bad("population_size must be positive");
        }
        if !(self.carryover_fraction > 0.0 && self.carryover_fraction < 1.0) {
            return bad("carryover_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return bad("crossover_prob must lie in [0, 1]");
        }
        if !(self.mu_range[0] <= self.mu_range[1]) || !(self.weight_range[0] <= self.weight_range[1]) {
            return bad("ranges must be ordered low, high");
        }
        if !(self.sigma_loc > 0.0) || !(self.sigma_scale >= 0.0) {
            return bad("sigma_loc must be positive and sigma_scale non-negative");
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        elite_count(self.population_size, self.carryover_fraction)
    }
}

pub fn elite_count(size: usize, fraction: f64) -> usize {
    ((fraction * size as f64).round() as usize).min(size)
}

/// Hands out run-unique chromosome ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    /// Continues after the largest id in `population`.
    pub fn after(population: &[Chromosome]) -> Self {
        Self {
            next: population.iter().map(|c| c.id() + 1).max().unwrap_or(0),
        }
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }
}

/// Arithmetic crossover `λ·p1 + (1-λ)·p2` and its mirror.
pub fn crossover(
    par1: &Chromosome,
    par2: &Chromosome,
    lambda: f64,
    ids: &mut IdAllocator,
) -> (Chromosome, Chromosome) {
    assert!((0.0..=1.0).contains(&lambda), "lambda {lambda} outside [0, 1]");
    let (a, b) = (par1.genes(), par2.genes());
    let mix = |wa: f64, wb: f64| -> Vec<f64> {
        // Convex combinations stay in [-1, 1]; the clamp only absorbs rounding.
        a.iter()
            .zip(b)
            .map(|(x, y)| (wa * x + wb * y).clamp(-1.0, 1.0))
            .collect()
    };
    let lineage = Lineage::Crossover {
        parents: [par1.id(), par2.id()],
    };
    let c1 = Chromosome::new(ids.next_id(), mix(lambda, 1.0 - lambda), lineage.clone())
        .expect("convex combination of valid chromosomes is valid");
    let c2 = Chromosome::new(ids.next_id(), mix(1.0 - lambda, lambda), lineage)
        .expect("convex combination of valid chromosomes is valid");
    (c1, c2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationParams {
    /// Bump centre (timestep).
    pub mu: f64,
    /// Bump width (timesteps).
    pub sigma: f64,
    pub weight: f64,
    /// +1 or -1.
    pub sign: f64,
}

impl MutationParams {
    /// `sign · w · N(k; μ, σ)` over the gene axis.
    pub fn bump(&self) -> Vec<f64> {
        let norm = self.weight / (self.sigma * (2.0 * PI).sqrt());
        (0..GENE_COUNT)
            .map(|k| {
                let z = (k as f64 - self.mu) / self.sigma;
                self.sign * norm * (-0.5 * z * z).exp()
            })
            .collect()
    }
}

pub fn sample_mutation_params<R: Rng + ?Sized>(rng: &mut R, config: &GaConfig) -> MutationParams {
    let range = |rng: &mut R, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mu = range(rng, config.mu_range);
    let z: f64 = StandardNormal.sample(rng);
    let sigma = config.sigma_loc + config.sigma_scale * z.abs();
    let weight = range(rng, config.weight_range);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    MutationParams {
        mu,
        sigma,
        weight,
        sign,
    }
}

/// Parent plus bump, before any range handling.
pub fn mutation_raw(parent: &Chromosome, params: &MutationParams) -> Vec<f64> {
    parent
        .genes()
        .iter()
        .zip(params.bump())
        .map(|(g, b)| g + b)
        .collect()
}

pub fn mutate(
    parent: &Chromosome,
    params: &MutationParams,
    renorm: Renorm,
    ids: &mut IdAllocator,
) -> Chromosome {
    let raw = mutation_raw(parent, params);
    let genes = match renorm {
        Renorm::MinMax => min_max_normalize(&raw).unwrap_or_else(|_| clip(&raw)),
        Renorm::Clip => clip(&raw),
    };
    Chromosome::new(
        ids.next_id(),
        genes,
        Lineage::Mutation {
            parent: parent.id(),
        },
    )
    .expect("renormalized genes lie in [-1, 1]")
}

fn clip(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|g| g.clamp(-1.0, 1.0)).collect()
}

fn check_fitness(fitness: &[f64]) -> Result<f64, GaError> {
    let mut total = 0.0;
    for (index, &value) in fitness.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(GaError::InvalidFitness { index, value });
        }
        total += value;
    }
    Ok(total)
}

/// Fitness-proportional draw.
pub fn select_parent<R: Rng + ?Sized>(fitness: &[f64], rng: &mut R) -> Result<usize, GaError> {
    if fitness.is_empty() {
        return Err(GaError::EmptyPopulation);
    }
    let total = check_fitness(fitness)?;
    if total <= 0.0 {
        return Err(GaError::AllZeroFitness);
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &f) in fitness.iter().enumerate() {
        if f > 0.0 {
            acc += f;
            last_positive = i;
            if target < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Fitness-proportional draw, uniform when every entry is zero.
fn select_or_uniform<R: Rng + ?Sized>(fitness: &[f64], rng: &mut R) -> Result<usize, GaError> {
    match select_parent(fitness, rng) {
        Err(GaError::AllZeroFitness) => Ok(rng.random_range(0..fitness.len())),
        other => other,
    }
}

/// Indices of the `count` best entries: higher fitness first, then entries
/// flagged in `priority`, then lower id.
pub fn rank_elites(fitness: &[f64], ids: &[u64], priority: Option<&[bool]>, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    let pri = |i: usize| priority.map_or(false, |p| p[i]);
    order.sort_by(|&a, &b| {
        fitness[b]
            .total_cmp(&fitness[a])
            .then_with(|| pri(b).cmp(&pri(a)))
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order.truncate(count);
    order
}

/// The top `round(fraction · size)` chromosomes, copied unmodified.
pub fn carryover(population: &[Chromosome], fitness: &[f64], fraction: f64) -> Vec<Chromosome> {
    let ids: Vec<u64> = population.iter().map(Chromosome::id).collect();
    rank_elites(fitness, &ids, None, elite_count(population.len(), fraction))
        .into_iter()
        .map(|i| population[i].clone())
        .collect()
}

/// Supplies a fitness vector over the current population, once per
/// offspring event.
pub trait FitnessProvider {
    fn next_fitness(&mut self) -> Result<Vec<f64>, GaError>;

    /// Whether entry `index` is a measured value rather than an estimate;
    /// measured entries win ties when ranking elites.
    fn is_measured(&self, _index: usize) -> bool {
        false
    }
}

impl<F> FitnessProvider for F
where
    F: FnMut() -> Result<Vec<f64>, GaError>,
{
    fn next_fitness(&mut self) -> Result<Vec<f64>, GaError> {
        self()
    }
}

/// Offspring of one generation step.
#[derive(Clone, Debug)]
pub struct NextGeneration {
    pub chromosomes: Vec<Chromosome>,
    /// Index in the parent population of each carried-over elite, in the order
    /// they lead `chromosomes`.
    pub elite_sources: Vec<usize>,
}

/// Builds the next population: elites first, then crossover or mutation
/// events until `config.population_size` chromosomes exist.
pub fn next_generation<P, R>(
    population: &[Chromosome],
    provider: &mut P,
    config: &GaConfig,
    rng: &mut R,
    ids: &mut IdAllocator,
) -> Result<NextGeneration, GaError>
where
    P: FitnessProvider + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    if population.is_empty() {
        return Err(GaError::EmptyPopulation);
    }
    let fetch = |provider: &mut P| -> Result<Vec<f64>, GaError> {
        let f = provider.next_fitness()?;
        if f.len() != population.len() {
            return Err(GaError::FitnessLength {
                expected: population.len(),
                got: f.len(),
            });
        }
        check_fitness(&f)?;
        Ok(f)
    };

    let ranking = fetch(provider)?;
    let pop_ids: Vec<u64> = population.iter().map(Chromosome::id).collect();
    let measured: Vec<bool> = (0..population.len()).map(|i| provider.is_measured(i)).collect();
    let n_elite = config.elite_count().min(population.len());
    let elite_sources = rank_elites(&ranking, &pop_ids, Some(&measured), n_elite);

    let target = config.population_size;
    let mut out: Vec<Chromosome> = Vec::with_capacity(target + 1);
    out.extend(
        elite_sources
            .iter()
            .map(|&i| population[i].relabeled(Lineage::Carryover { from: population[i].id() })),
    );

    while out.len() < target {
        let fitness = fetch(provider)?;
        let crossover_event = population.len() > 1 && rng.random_bool(config.crossover_prob);
        if crossover_event {
            let a = select_or_uniform(&fitness, rng)?;
            let b = distinct_partner(&fitness, a, rng)?;
            let lambda = rng.random::<f64>();
            let (c1, c2) = crossover(&population[a], &population[b], lambda, ids);
            out.push(c1);
            if out.len() < target {
                out.push(c2);
            }
        } else {
            let p = select_or_uniform(&fitness, rng)?;
            let params = sample_mutation_params(rng, config);
            out.push(mutate(&population[p], &params, config.renorm, ids));
        }
    }
    Ok(NextGeneration {
        chromosomes: out,
        elite_sources,
    })
}

/// Second parent, different from `first`. Uses the fitness weights with `first`
/// masked out, falling back to uniform when nothing else has positive weight.
fn distinct_partner<R: Rng + ?Sized>(fitness: &[f64], first: usize, rng: &mut R) -> Result<usize, GaError> {
    let mut masked = fitness.to_vec();
    masked[first] = 0.0;
    match select_parent(&masked, rng) {
        Ok(i) => Ok(i),
        Err(GaError::AllZeroFitness) => {
            let k = rng.random_range(0..fitness.len() - 1);
            Ok(if k >= first { k + 1 } else { k })
        }
        Err(e) => Err(e),
    }
}
