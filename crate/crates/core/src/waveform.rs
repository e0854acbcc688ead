//! Field trajectories: sampling, normalization and physical scaling.

use std::fmt;
use std::io;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Genes per chromosome (driven timesteps).
pub const GENE_COUNT: usize = 900;
/// Constant-field steps appended after the driven segment.
pub const EQUILIBRATION_STEPS: usize = 50;
/// Duration of the driven segment in seconds.
pub const DRIVE_SECONDS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum WaveformError {
    #[error("curve is constant (max - min = {spread:e}) and cannot be min-max normalized")]
    DegenerateCurve { spread: f64 },
    #[error("chromosome must have {GENE_COUNT} genes, got {0}")]
    WrongLength(usize),
    #[error("gene {index} = {value} is outside [-1, 1]")]
    GeneOutOfRange { index: usize, value: f64 },
    #[error("invalid render request: {0}")]
    InvalidRender(String),
    #[error("bad lineage tag `{0}`")]
    BadLineage(String),
    #[error("csv row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parameters of `A·exp(αt)·sin(ωt) + B`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformParams {
    pub a: f64,
    pub alpha: f64,
    pub omega: f64,
    pub b: f64,
}

/// Sampling intervals for [`sample_params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformConfig {
    pub a_range: [f64; 2],
    pub alpha_range: [f64; 2],
    pub omega_range: [f64; 2],
    /// Offset range; a constant offset is removed by normalization anyway.
    pub b_range: [f64; 2],
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self {
            a_range: [0.0, 0.75],
            alpha_range: [-2.75, 2.75],
            omega_range: [-2.75, 2.75],
            b_range: [0.0, 0.0],
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, config: &WaveformConfig) -> WaveformParams {
    WaveformParams {
        a: uniform(rng, config.a_range),
        alpha: uniform(rng, config.alpha_range),
        omega: uniform(rng, config.omega_range),
        b: uniform(rng, config.b_range),
    }
}

/// Samples the waveform at left endpoints `t_k = k · t_total / n`.
pub fn render(params: &WaveformParams, n: usize, t_total: f64) -> Result<Vec<f64>, WaveformError> {
    if n < 2 || !(t_total > 0.0) {
        return Err(WaveformError::InvalidRender(format!(
            "need n >= 2 and t_total > 0, got n={n}, t_total={t_total}"
        )));
    }
    let dt = t_total / n as f64;
    Ok((0..n)
        .map(|k| {
            let t = k as f64 * dt;
            params.a * (params.alpha * t).exp() * (params.omega * t).sin() + params.b
        })
        .collect())
}

/// Affine min-max map onto `[-1, 1]`.
pub fn min_max_normalize(raw: &[f64]) -> Result<Vec<f64>, WaveformError> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = hi - lo;
    if !(spread >= 1e-12) {
        return Err(WaveformError::DegenerateCurve { spread });
    }
    Ok(raw
        .iter()
        .map(|&v| {
            if v == hi {
                1.0
            } else if v == lo {
                -1.0
            } else {
                (2.0 * (v - lo) / spread - 1.0).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// How a chromosome came to be.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lineage {
    Seed,
    Carryover { from: u64 },
    Crossover { parents: [u64; 2] },
    Mutation { parent: u64 },
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lineage::Seed => write!(f, "seed"),
            Lineage::Carryover { from } => write!(f, "carryover:{from}"),
            Lineage::Crossover { parents: [a, b] } => write!(f, "crossover:{a}+{b}"),
            Lineage::Mutation { parent } => write!(f, "mutation:{parent}"),
        }
    }
}

impl FromStr for Lineage {
    type Err = WaveformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WaveformError::BadLineage(s.to_string());
        let num = |v: &str| v.parse::<u64>().map_err(|_| bad());
        match s.split_once(':') {
            None if s == "seed" => Ok(Lineage::Seed),
            Some(("carryover", v)) => Ok(Lineage::Carryover { from: num(v)? }),
            Some(("mutation", v)) => Ok(Lineage::Mutation { parent: num(v)? }),
            Some(("crossover", v)) => {
                let (a, b) = v.split_once('+').ok_or_else(bad)?;
                Ok(Lineage::Crossover {
                    parents: [num(a)?, num(b)?],
                })
            }
            _ => Err(bad()),
        }
    }
}

/// A normalized 900-sample field trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    id: u64,
    genes: Vec<f64>,
    lineage: Lineage,
}

impl Chromosome {
    pub fn new(id: u64, genes: Vec<f64>, lineage: Lineage) -> Result<Self, WaveformError> {
        if genes.len() != GENE_COUNT {
            return Err(WaveformError::WrongLength(genes.len()));
        }
        if let Some((index, &value)) = genes
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(WaveformError::GeneOutOfRange { index, value });
        }
        Ok(Self { id, genes, lineage })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn genes(&self) -> &[f64] {
        &self.genes
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    /// Same genes and id, new lineage tag.
    pub fn relabeled(&self, lineage: Lineage) -> Self {
        Self {
            id: self.id,
            genes: self.genes.clone(),
            lineage,
        }
    }
}

/// Min-max normalizes a raw curve into a seed chromosome.
pub fn normalize(raw: &[f64], id: u64) -> Result<Chromosome, WaveformError> {
    if raw.len() != GENE_COUNT {
        return Err(WaveformError::WrongLength(raw.len()));
    }
    Chromosome::new(id, min_max_normalize(raw)?, Lineage::Seed)
}

/// Physical x-field samples: driven segment followed by a constant tail.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSchedule {
    values: Vec<f64>,
    field_scale: f64,
}

impl FieldSchedule {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn field_scale(&self) -> f64 {
        self.field_scale
    }
}

pub fn to_physical(chromosome: &Chromosome, field_scale: f64) -> FieldSchedule {
    let mut values: Vec<f64> = chromosome.genes.iter().map(|g| field_scale * g).collect();
    let last = values[GENE_COUNT - 1];
    values.extend(std::iter::repeat_n(last, EQUILIBRATION_STEPS));
    FieldSchedule {
        values,
        field_scale,
    }
}

/// Generation-0 population; constant draws are redrawn.
pub fn seed_population<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    config: &WaveformConfig,
) -> Vec<Chromosome> {
    let mut population = Vec::with_capacity(size);
    while population.len() < size {
        let params = sample_params(rng, config);
        let raw = render(&params, GENE_COUNT, DRIVE_SECONDS).expect("fixed render arguments are valid");
        if let Ok(c) = normalize(&raw, population.len() as u64) {
            population.push(c);
        }
    }
    population
}

/// Writes chromosomes as `id,lineage,g0..g899` rows with a header.
pub fn write_chromosomes_csv<W: io::Write>(
    out: W,
    chromosomes: &[Chromosome],
) -> Result<(), WaveformError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "lineage".to_string()];
    header.extend((0..GENE_COUNT).map(|k| format!("g{k}")));
    w.write_record(&header)?;
    for c in chromosomes {
        let mut row = vec![c.id.to_string(), c.lineage.to_string()];
        row.extend(c.genes.iter().map(|g| g.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads chromosome rows. Accepts either the archive layout
/// (`id,lineage,<900 genes>`) or bare 900-gene rows, with or without a header.
pub fn read_chromosomes_csv<R: io::Read>(input: R) -> Result<Vec<Chromosome>, WaveformError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = row + 1;
        if record.get(0).is_some_and(|f| f == "id" || f.starts_with('g')) {
            continue;
        }
        let (id, lineage, genes_at) = match record.len() {
            GENE_COUNT => (out.len() as u64, Lineage::Seed, 0),
            n if n == GENE_COUNT + 2 => {
                let id = record[0].parse::<u64>().map_err(|e| WaveformError::Parse {
                    row: row_no,
                    message: format!("column 0 (id): {e}"),
                })?;
                let lineage = record[1].parse::<Lineage>().map_err(|e| WaveformError::Parse {
                    row: row_no,
                    message: format!("column 1 (lineage): {e}"),
                })?;
                (id, lineage, 2)
            }
            n => {
                return Err(WaveformError::Parse {
                    row: row_no,
                    message: format!(
                        "expected {GENE_COUNT} genes or id,lineage plus {GENE_COUNT} genes; found {n} columns"
                    ),
                })
            }
        };
        let mut genes = Vec::with_capacity(GENE_COUNT);
        for k in 0..GENE_COUNT {
            let field = &record[genes_at + k];
            let value = field.parse::<f64>().map_err(|e| WaveformError::Parse {
                row: row_no,
                message: format!("gene {k} (column {}): `{field}`: {e}", genes_at + k),
            })?;
            genes.push(value);
        }
        let chromosome = Chromosome::new(id, genes, lineage).map_err(|e| WaveformError::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        out.push(chromosome);
    }
    Ok(out)
}
