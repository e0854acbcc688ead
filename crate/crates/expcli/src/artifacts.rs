//! On-disk outputs. Every CSV starts with a `#` line naming its schema,
//! the config hash and the master seed; column order is fixed per schema.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use gadkl_core::dkl::DklModel;
use gadkl_core::orchestrator::{GenerationLedger, GenerationMetrics, RunResult};
use gadkl_core::waveform::{Chromosome, Lineage, GENE_COUNT};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const METRICS_SCHEMA: &str = "gadkl-metrics/1";
pub const QUERIED_SCHEMA: &str = "gadkl-queried/1";
pub const EMBEDDINGS_SCHEMA: &str = "gadkl-embeddings/1";
pub const SNAPSHOT_SCHEMA: &str = "gadkl-snapshot/1";
pub const MANIFEST_SCHEMA: &str = "gadkl-manifest/1";

pub const METRICS_COLUMNS: [&str; 12] = [
    "generation",
    "population",
    "queried",
    "carried",
    "new_queries",
    "bootstrap_queries",
    "best",
    "median",
    "min",
    "best_so_far",
    "holdout_rmse",
    "mean_std",
];

/// Config hash and master seed stamped on every artifact.
#[derive(Clone, Debug)]
pub struct Stamp {
    pub config_hash: String,
    pub master_seed: u64,
}

impl Stamp {
    pub fn of(config: &ExperimentConfig) -> Self {
        Self {
            config_hash: config.hash(),
            master_seed: config.master_seed,
        }
    }

    fn line(&self, schema: &str) -> String {
        format!(
            "# schema={schema} config_hash={} master_seed={}\n",
            self.config_hash, self.master_seed
        )
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_writer(path: &Path, stamp: &Stamp, schema: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(stamp.line(schema).as_bytes()).map_err(|e| io_err(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| io_err(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn metrics_row(m: &GenerationMetrics) -> Vec<String> {
    vec![
        m.generation.to_string(),
        m.population.to_string(),
        m.queried.to_string(),
        m.carried.to_string(),
        m.new_queries.to_string(),
        m.bootstrap_queries.to_string(),
        m.best.to_string(),
        m.median.to_string(),
        m.min.to_string(),
        m.best_so_far.to_string(),
        opt(m.holdout_rmse),
        opt(m.mean_std),
    ]
}

/// Per-generation metrics without timing, so reruns are byte-identical.
pub fn write_metrics(path: &Path, stamp: &Stamp, generations: &[GenerationMetrics]) -> Result<(), CliError> {
    let mut w = csv_writer(path, stamp, METRICS_SCHEMA)?;
    w.write_record(METRICS_COLUMNS).map_err(|e| io_err(path, e))?;
    for m in generations {
        w.write_record(metrics_row(m)).map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

/// Every chromosome with a measured fitness, per generation.
pub fn write_queried(path: &Path, stamp: &Stamp, result: &RunResult) -> Result<(), CliError> {
    let mut w = csv_writer(path, stamp, QUERIED_SCHEMA)?;
    let mut header = vec!["generation".to_string(), "id".into(), "lineage".into(), "new".into(), "fitness".into()];
    header.extend((0..GENE_COUNT).map(|k| format!("g{k}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for q in &result.archive {
        let mut row = vec![
            q.generation.to_string(),
            q.chromosome.id().to_string(),
            q.chromosome.lineage().to_string(),
            u8::from(q.new).to_string(),
            q.fitness.to_string(),
        ];
        row.extend(q.chromosome.genes().iter().map(|g| g.to_string()));
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

/// Embedding coordinates with the posterior and any ground truth.
pub fn write_embeddings(path: &Path, stamp: &Stamp, ledger: &GenerationLedger, model: &DklModel) -> Result<(), CliError> {
    let (Some(z), Some(pred)) = (&ledger.embeddings, &ledger.prediction) else {
        return Ok(());
    };
    let d = model.embedding_dim();
    let mut w = csv_writer(path, stamp, EMBEDDINGS_SCHEMA)?;
    let mut header = vec!["id".to_string()];
    header.extend((1..=d).map(|k| format!("dim{k}")));
    header.extend(["mean", "variance", "ground_truth"].map(String::from));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (i, c) in ledger.chromosomes.iter().enumerate() {
        let mut row = vec![c.id().to_string()];
        row.extend(z[i * d..(i + 1) * d].iter().map(|v| v.to_string()));
        row.push(pred.means[i].to_string());
        row.push(pred.variances[i].to_string());
        row.push(opt(ledger.truth.get(&i).copied()));
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub schema: &'static str,
    pub command: &'a str,
    pub config_hash: String,
    pub master_seed: u64,
    pub config: &'a ExperimentConfig,
    pub workers: usize,
    pub total_queries: usize,
    pub bootstrap_queries: usize,
    pub wall_clock_s: f64,
    pub generations: &'a [GenerationMetrics],
    pub artifacts: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// One exhaustively evaluated generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub chromosomes: Vec<Chromosome>,
    pub fitness: Vec<f64>,
}

pub fn write_snapshot(path: &Path, stamp: &Stamp, snap: &Snapshot) -> Result<(), CliError> {
    let mut w = csv_writer(path, stamp, SNAPSHOT_SCHEMA)?;
    let mut header = vec!["id".to_string(), "lineage".into(), "fitness".into()];
    header.extend((0..GENE_COUNT).map(|k| format!("g{k}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (c, f) in snap.chromosomes.iter().zip(&snap.fitness) {
        let mut row = vec![c.id().to_string(), c.lineage().to_string(), f.to_string()];
        row.extend(c.genes().iter().map(|g| g.to_string()));
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    finish(w, path)
}

pub fn read_snapshot<R: io::Read>(input: R) -> Result<Snapshot, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(input);
    let mut snap = Snapshot {
        chromosomes: Vec::new(),
        fitness: Vec::new(),
    };
    let parse_err = |row: usize, msg: String| CliError::Input(format!("snapshot row {row}: {msg}"));
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != GENE_COUNT + 3 {
            return Err(parse_err(row, format!("expected {} columns, found {}", GENE_COUNT + 3, record.len())));
        }
        let id: u64 = record[0].parse().map_err(|e| parse_err(row, format!("id: {e}")))?;
        let lineage: Lineage = record[1].parse().map_err(|e| parse_err(row, format!("lineage: {e}")))?;
        let fitness: f64 = record[2].parse().map_err(|e| parse_err(row, format!("fitness: {e}")))?;
        let genes = (0..GENE_COUNT)
            .map(|g| {
                record[g + 3]
                    .parse::<f64>()
                    .map_err(|e| parse_err(row, format!("gene {g}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let c = Chromosome::new(id, genes, lineage).map_err(|e| parse_err(row, e.to_string()))?;
        snap.chromosomes.push(c);
        snap.fitness.push(fitness);
    }
    Ok(snap)
}
