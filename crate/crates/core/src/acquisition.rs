//! Acquisition scores over surrogate posteriors and top-k batch selection.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AcquisitionError {
    #[error("{0} needs the best observed fitness")]
    MissingIncumbent(AcquisitionKind),
    #[error("requested {requested} candidates but only {available} are unqueried")]
    ExhaustedPool { requested: usize, available: usize },
    #[error("means and stds differ in length ({means} vs {stds})")]
    LengthMismatch { means: usize, stds: usize },
    #[error("unknown acquisition `{0}`")]
    UnknownKind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionKind {
    Mean,
    Uncertainty,
    Ucb,
    Ei,
    Poi,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 5] = [
        AcquisitionKind::Mean,
        AcquisitionKind::Uncertainty,
        AcquisitionKind::Ucb,
        AcquisitionKind::Ei,
        AcquisitionKind::Poi,
    ];

    /// Trade-off used when none is configured.
    pub fn default_xi(self) -> f64 {
        match self {
            AcquisitionKind::Ucb => 10.0,
            AcquisitionKind::Ei | AcquisitionKind::Poi => 0.01,
            AcquisitionKind::Mean | AcquisitionKind::Uncertainty => 0.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            AcquisitionKind::Mean => "mean",
            AcquisitionKind::Uncertainty => "uncertainty",
            AcquisitionKind::Ucb => "ucb",
            AcquisitionKind::Ei => "ei",
            AcquisitionKind::Poi => "poi",
        }
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcquisitionKind {
    type Err = AcquisitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AcquisitionError::UnknownKind(s.to_string()))
    }
}

/// A missing `xi` takes the kind's default when deserialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "SpecRepr")]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    pub xi: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRepr {
    kind: AcquisitionKind,
    xi: Option<f64>,
}

impl From<SpecRepr> for AcquisitionSpec {
    fn from(r: SpecRepr) -> Self {
        Self {
            kind: r.kind,
            xi: r.xi.unwrap_or(r.kind.default_xi()),
        }
    }
}

impl AcquisitionSpec {
    pub fn new(kind: AcquisitionKind) -> Self {
        Self {
            kind,
            xi: kind.default_xi(),
        }
    }
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self::new(AcquisitionKind::Ucb)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Scores every candidate; larger is more worth querying.
pub fn score(
    spec: &AcquisitionSpec,
    means: &[f64],
    stds: &[f64],
    best_observed: Option<f64>,
) -> Result<Vec<f64>, AcquisitionError> {
    if means.len() != stds.len() {
        return Err(AcquisitionError::LengthMismatch {
            means: means.len(),
            stds: stds.len(),
        });
    }
    let xi = spec.xi;
    let pairs = means.iter().zip(stds);
    let out = match spec.kind {
        AcquisitionKind::Mean => means.to_vec(),
        AcquisitionKind::Uncertainty => stds.to_vec(),
        AcquisitionKind::Ucb => pairs.map(|(m, s)| m + xi * s).collect(),
        AcquisitionKind::Ei => {
            let best = best_observed.ok_or(AcquisitionError::MissingIncumbent(spec.kind))?;
            pairs
                .map(|(&m, &s)| {
                    let gain = m - best - xi;
                    if s > 0.0 {
                        let z = gain / s;
                        (gain * normal_cdf(z) + s * normal_pdf(z)).max(0.0)
                    } else {
                        gain.max(0.0)
                    }
                })
                .collect()
        }
        AcquisitionKind::Poi => {
            let best = best_observed.ok_or(AcquisitionError::MissingIncumbent(spec.kind))?;
            pairs
                .map(|(&m, &s)| {
                    let gain = m - best - xi;
                    if s > 0.0 {
                        normal_cdf(gain / s)
                    } else if gain > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Ok(out)
}

/// The `k` highest-scoring indices outside `already_queried`, best first;
/// ties go to the lower index and NaN scores rank last.
pub fn select_batch(
    scores: &[f64],
    already_queried: &HashSet<usize>,
    k: usize,
) -> Result<Vec<usize>, AcquisitionError> {
    let mut open: Vec<usize> = (0..scores.len())
        .filter(|i| !already_queried.contains(i))
        .collect();
    if k > open.len() {
        return Err(AcquisitionError::ExhaustedPool {
            requested: k,
            available: open.len(),
        });
    }
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    open.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    open.truncate(k);
    Ok(open)
}
