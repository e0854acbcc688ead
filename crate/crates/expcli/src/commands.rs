//! Subcommand implementations. Each returns structured results and writes
//! its artifacts under the resolved output directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use gadkl_core::acquisition::{AcquisitionKind, AcquisitionSpec};
use gadkl_core::ferrosim::DisorderField;
use gadkl_core::genetic::elite_count;
use gadkl_core::orchestrator::{
    self, explore_generation_from, fit_initial_model, EstimationPolicy, ExploreSettings, GroundTruth, OrchestratorError, RunResult, Simulator,
};
use gadkl_core::rng::{self, substream};
use gadkl_core::waveform::{self, read_chromosomes_csv, Chromosome};
use rand::seq::index::sample;

use crate::artifacts::{self, Manifest, Snapshot, Stamp};
use crate::config::ExperimentConfig;
use crate::CliError;

const INIT_STREAM: &str = "acquisition-study-init";

fn simulator(config: &ExperimentConfig) -> Result<Simulator, CliError> {
    Ok(Simulator::new(&config.simulator, config.resolved_workers())?)
}

pub struct RunOutcome {
    pub result: RunResult,
    pub dir: PathBuf,
    pub config_hash: String,
}

/// Runs the optimizer and writes manifest, metrics, archive and embeddings.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    run_into(config, &config.resolved_output_dir(), "run")
}

fn run_into(config: &ExperimentConfig, dir: &Path, command: &str) -> Result<RunOutcome, CliError> {
    config.validate()?;
    artifacts::ensure_dir(dir)?;
    let sim = simulator(config)?;
    let stamp = Stamp::of(config);
    let mut files = Vec::new();
    let mut write_error = None;
    let result = orchestrator::run_with(&config.run_config(), &sim, |ledger, model| {
        let best = ledger.best_truth().unwrap_or(f64::NAN);
        let truths: Vec<f64> = ledger.truth.values().copied().collect();
        println!(
            "generation {:>3}  best {best:.4}  median {:.4}  new queries {}",
            ledger.generation,
            orchestrator::median(&truths),
            ledger.new_queries.len()
        );
        if let (Some(model), None) = (model, &write_error) {
            let name = format!("embeddings_g{}.csv", ledger.generation);
            match artifacts::write_embeddings(&dir.join(&name), &stamp, ledger, model) {
                Ok(()) => files.push(name),
                Err(e) => write_error = Some(e),
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    artifacts::write_metrics(&dir.join("metrics.csv"), &stamp, &result.generations)?;
    artifacts::write_queried(&dir.join("queried.csv"), &stamp, &result)?;
    files.splice(0..0, ["metrics.csv".to_string(), "queried.csv".to_string()]);
    let manifest = Manifest {
        schema: artifacts::MANIFEST_SCHEMA,
        command,
        config_hash: stamp.config_hash.clone(),
        master_seed: config.master_seed,
        config,
        workers: sim.workers(),
        total_queries: result.total_queries,
        bootstrap_queries: result.bootstrap_queries,
        wall_clock_s: result.wall_clock_s,
        generations: &result.generations,
        artifacts: files,
    };
    artifacts::write_json(&dir.join("manifest.json"), &manifest)?;
    println!(
        "total queries {} (bootstrap {}), best {:.4}, wrote {}",
        result.total_queries,
        result.bootstrap_queries,
        result.best_so_far().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(RunOutcome {
        result,
        dir: dir.to_path_buf(),
        config_hash: stamp.config_hash,
    })
}

/// The seeded generation-0 population, exhaustively evaluated.
pub fn make_snapshot(config: &ExperimentConfig) -> Result<Snapshot, CliError> {
    config.validate()?;
    let sim = simulator(config)?;
    let chromosomes = waveform::seed_population(
        &mut substream(config.master_seed, rng::POPULATION, 0),
        config.ga.population_size,
        &config.waveform,
    );
    let refs: Vec<&Chromosome> = chromosomes.iter().collect();
    let fitness = sim.evaluate_batch(&refs)?;
    Ok(Snapshot { chromosomes, fitness })
}

pub fn cmd_snapshot(config: &ExperimentConfig, out: Option<&Path>) -> Result<(Snapshot, PathBuf), CliError> {
    let snap = make_snapshot(config)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = config.resolved_output_dir();
            artifacts::ensure_dir(&dir)?;
            dir.join("snapshot.csv")
        }
    };
    artifacts::write_snapshot(&path, &Stamp::of(config), &snap)?;
    println!("evaluated {} chromosomes, wrote {}", snap.fitness.len(), path.display());
    Ok((snap, path))
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    artifacts::read_snapshot(file)
}

/// Ground truth looked up from a snapshot by chromosome id.
struct SnapshotTruth(HashMap<u64, f64>);

impl GroundTruth for SnapshotTruth {
    fn evaluate_batch(&self, batch: &[&Chromosome]) -> Result<Vec<f64>, OrchestratorError> {
        batch
            .iter()
            .map(|c| {
                self.0
                    .get(&c.id())
                    .copied()
                    .ok_or_else(|| OrchestratorError::InvalidConfig(format!("chromosome {} is not in the snapshot", c.id())))
            })
            .collect()
    }
}

/// One acquisition function on one active-learning seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionRow {
    pub kind: AcquisitionKind,
    pub seed: u64,
    /// Posterior-mean RMSE over the whole snapshot.
    pub rmse: f64,
    pub mean_std: f64,
    /// Mean truth of the chromosomes chosen by the acquisition.
    pub mean_truth_queried: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, Default)]
pub struct AcquisitionStudy {
    pub rows: Vec<AcquisitionRow>,
}

impl AcquisitionStudy {
    fn mean_of(&self, kind: AcquisitionKind, f: impl Fn(&AcquisitionRow) -> f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.kind == kind).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_rmse(&self, kind: AcquisitionKind) -> f64 {
        self.mean_of(kind, |r| r.rmse)
    }

    pub fn mean_std(&self, kind: AcquisitionKind) -> f64 {
        self.mean_of(kind, |r| r.mean_std)
    }

    pub fn mean_truth_queried(&self, kind: AcquisitionKind) -> f64 {
        self.mean_of(kind, |r| r.mean_truth_queried)
    }
}

/// Runs the within-generation loop on `snapshot` once per acquisition and
/// seed. Each seed starts every acquisition from the same random initial set
/// (the carryover fraction of the snapshot) and the same fitted surrogate.
pub fn cmd_policy_study_acquisition(
    config: &ExperimentConfig,
    snapshot: &Snapshot,
    dir: &Path,
) -> Result<AcquisitionStudy, CliError> {
    config.validate()?;
    artifacts::ensure_dir(dir)?;
    let stamp = Stamp::of(config);
    let size = snapshot.chromosomes.len();
    let truth = SnapshotTruth(snapshot.chromosomes.iter().map(|c| c.id()).zip(snapshot.fitness.iter().copied()).collect());
    let n_init = elite_count(size, config.ga.carryover_fraction).max(2);
    let mut study = AcquisitionStudy::default();
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary
        .write_record(["acquisition", "seed", "rmse", "mean_std", "mean_truth_queried", "queries"])
        .map_err(|e| CliError::Io(e.to_string()))?;

    for &seed in &config.study.acquisition_seeds {
        let mut init: Vec<usize> = sample(&mut substream(seed, INIT_STREAM, 0), size, n_init).into_vec();
        init.sort_unstable();
        let carried: Vec<(usize, f64)> = init.iter().map(|&i| (i, snapshot.fitness[i])).collect();
        let fitted = fit_initial_model(
            &snapshot.chromosomes,
            &carried.iter().copied().collect(),
            &config.dkl,
            seed,
            0,
        )?;
        for kind in AcquisitionKind::ALL {
            let mut policy = config.policy.clone();
            policy.query_budget = orchestrator::Budget::Count(config.study.acquisition_budget);
            policy.batch_size = config.study.acquisition_batch_size;
            if kind != policy.acquisition.kind {
                policy.acquisition = AcquisitionSpec::new(kind);
            }
            let settings = ExploreSettings {
                policy: &policy,
                dkl: &config.dkl,
                generation: 0,
                master_seed: seed,
            };
            let (ledger, _) =
                explore_generation_from(snapshot.chromosomes.clone(), &carried, &settings, &truth, Some(fitted.clone()))?;
            let (means, vars) = match &ledger.prediction {
                Some(p) => (p.means.clone(), p.variances.clone()),
                None => (snapshot.fitness.clone(), vec![0.0; size]),
            };
            let sq: f64 = means.iter().zip(&snapshot.fitness).map(|(m, t)| (m - t).powi(2)).sum();
            let rmse = (sq / size as f64).sqrt();
            let mean_std = vars.iter().map(|v| v.sqrt()).sum::<f64>() / size as f64;
            let new = &ledger.new_queries;
            let mean_truth_queried = new.iter().map(|&i| snapshot.fitness[i]).sum::<f64>() / new.len().max(1) as f64;

            let path = dir.join(format!("acq_{kind}_seed{seed}.csv"));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["id", "truth", "prediction", "variance", "role"])
                .map_err(|e| CliError::Io(e.to_string()))?;
            for i in 0..size {
                let role = if ledger.carried.contains(&i) {
                    "initial"
                } else if ledger.is_queried(i) {
                    "queried"
                } else {
                    "estimated"
                };
                w.write_record([
                    snapshot.chromosomes[i].id().to_string(),
                    snapshot.fitness[i].to_string(),
                    means[i].to_string(),
                    vars[i].to_string(),
                    role.to_string(),
                ])
                .map_err(|e| CliError::Io(e.to_string()))?;
            }
            write_stamped(&path, &stamp, "gadkl-acquisition-candidates/1", w)?;

            let row = AcquisitionRow {
                kind,
                seed,
                rmse,
                mean_std,
                mean_truth_queried,
                queries: new.len(),
            };
            summary
                .write_record([
                    kind.to_string(),
                    seed.to_string(),
                    rmse.to_string(),
                    mean_std.to_string(),
                    mean_truth_queried.to_string(),
                    row.queries.to_string(),
                ])
                .map_err(|e| CliError::Io(e.to_string()))?;
            study.rows.push(row);
        }
    }
    write_stamped(&dir.join("acquisition_summary.csv"), &stamp, "gadkl-acquisition-summary/1", summary)?;
    println!("{:<12} {:>10} {:>10} {:>12}", "acquisition", "rmse", "mean_std", "queried_mean");
    for kind in AcquisitionKind::ALL {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>12.4}",
            kind.to_string(),
            study.mean_rmse(kind),
            study.mean_std(kind),
            study.mean_truth_queried(kind)
        );
    }
    Ok(study)
}

fn write_stamped(path: &Path, stamp: &Stamp, schema: &str, w: csv::Writer<Vec<u8>>) -> Result<(), CliError> {
    let body = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    let mut text = format!(
        "# schema={schema} config_hash={} master_seed={}\n",
        stamp.config_hash, stamp.master_seed
    )
    .into_bytes();
    text.extend(body);
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug)]
pub struct EstimationRun {
    pub policy: EstimationPolicy,
    pub seed: u64,
    pub result: RunResult,
}

#[derive(Debug, Default)]
pub struct EstimationStudy {
    pub runs: Vec<EstimationRun>,
}

impl EstimationStudy {
    /// Final best-so-far averaged over seeds.
    pub fn mean_final_best(&self, policy: EstimationPolicy) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.policy == policy)
            .filter_map(|r| r.result.best_so_far())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The low-capacity comparison of estimation policies over the configured
/// seed sweep. Each run writes its own artifacts under `dir/<policy>_seed<s>`.
pub fn cmd_policy_study_estimation(config: &ExperimentConfig, dir: &Path) -> Result<EstimationStudy, CliError> {
    config.validate()?;
    artifacts::ensure_dir(dir)?;
    let s = &config.study;
    let mut study = EstimationStudy::default();
    let mut curves = csv::Writer::from_writer(Vec::new());
    curves
        .write_record(["policy", "seed", "generation", "best_so_far", "new_queries"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for policy in EstimationPolicy::ALL {
        for &seed in &s.estimation_seeds {
            let mut c = config.clone();
            c.master_seed = seed;
            c.dkl.net.conv_filters = s.estimation_filters;
            c.policy.batch_size = s.estimation_batch_size;
            c.policy.query_budget = orchestrator::Budget::Count(s.estimation_budget);
            c.policy.estimation = policy;
            let sub = dir.join(format!("{policy}_seed{seed}"));
            c.output_dir = Some(sub.clone());
            println!("policy {policy}, seed {seed}");
            let out = run_into(&c, &sub, "policy-est")?;
            for g in &out.result.generations {
                curves
                    .write_record([
                        policy.to_string(),
                        seed.to_string(),
                        g.generation.to_string(),
                        g.best_so_far.to_string(),
                        g.new_queries.to_string(),
                    ])
                    .map_err(|e| CliError::Io(e.to_string()))?;
            }
            study.runs.push(EstimationRun {
                policy,
                seed,
                result: out.result,
            });
        }
    }
    write_stamped(&dir.join("best_so_far.csv"), &Stamp::of(config), "gadkl-best-so-far/1", curves)?;
    for policy in EstimationPolicy::ALL {
        println!("{:<18} mean final best {:.4}", policy.to_string(), study.mean_final_best(policy));
    }
    Ok(study)
}

/// Ground-truth fitness of every chromosome in a CSV file, optionally with
/// the ⟨p⟩ trace of each.
pub fn cmd_eval(
    config: &ExperimentConfig,
    file: &Path,
    zero_disorder: bool,
    history: Option<&Path>,
) -> Result<Vec<(u64, f64)>, CliError> {
    let text = fs::File::open(file).map_err(|e| CliError::Input(format!("{}: {e}", file.display())))?;
    let chromosomes = read_chromosomes_csv(text).map_err(|e| CliError::Input(format!("{}: {e}", file.display())))?;
    let sim = if zero_disorder {
        let lattice = config.simulator.lattice.clone();
        let n = lattice.n;
        Simulator::with_disorder(lattice, config.simulator.field_scale, DisorderField::zero(n), 1)?
    } else {
        Simulator::new(&config.simulator, 1)?
    };
    let mut out = Vec::new();
    let mut trace = csv::Writer::from_writer(Vec::new());
    trace
        .write_record(["id", "step", "mean_px", "mean_py"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    for c in &chromosomes {
        let (fitness, hist) = sim.run(c, history.is_some())?;
        println!("{},{}", c.id(), fitness);
        for (step, p) in hist.iter().flatten().enumerate() {
            trace
                .write_record([c.id().to_string(), step.to_string(), p[0].to_string(), p[1].to_string()])
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
        out.push((c.id(), fitness));
    }
    if let Some(path) = history {
        let body = trace.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(out)
}
