//! Discrete-lattice ferroelectric model.
//!
//! Each site of an `n × n` grid carries a continuous polarization vector
//! `(px, py)`. The site energy is a Ginzburg-Landau-Devonshire double well
//! coupled to a local field made of the applied field, a uniform
//! depolarization field and a static random disorder field. Neighbouring
//! sites are coupled through squared polarization differences, and the
//! lattice relaxes under Landau-Khalatnikov dynamics `γ dp/dt = -∂F/∂p`,
//! integrated with explicit Euler steps.
//!
//! Array layout: site `(i, j)` lives at `i * n + j`, where `i` indexes the
//! x direction and `j` the y direction.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two-component field or polarization value.
pub type Vec2 = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid lattice configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid disorder parameters: {0}")]
    InvalidDisorder(String),
    #[error("non-finite polarization at timestep {step}")]
    NonFinite { step: usize },
    #[error("state size {got} does not match lattice size {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    /// Grid side length.
    pub n: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Nearest-neighbour coupling strength K.
    pub k_coupling: f64,
    /// Kinetic coefficient γ.
    pub gamma: f64,
    /// Depolarization factor.
    pub alpha_dep: f64,
    /// Timestep in seconds.
    pub dt: f64,
    pub boundary: Boundary,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            n: 20,
            alpha1: -1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            k_coupling: 0.5,
            gamma: 1.0,
            alpha_dep: 0.05,
            dt: 3.0 / 900.0,
            boundary: Boundary::Open,
        }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.alpha1 < 0.0) {
            return bad("alpha1 must be negative (double well)");
        }
        if !(self.alpha2 > 0.0) {
            return bad("alpha2 must be positive (double well)");
        }
        let finite = [self.alpha3, self.k_coupling, self.alpha_dep]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return bad("coefficients must be finite");
        }
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.n * self.n
    }

    /// Neighbour indices of site `(i, j)` in +x, -x, +y, -y order; `None` where
    /// an open boundary cuts the link.
    fn neighbours(&self, i: usize, j: usize) -> [Option<usize>; 4] {
        let n = self.n;
        match self.boundary {
            Boundary::Open => [
                (i + 1 < n).then(|| (i + 1) * n + j),
                (i > 0).then(|| (i - 1) * n + j),
                (j + 1 < n).then(|| i * n + j + 1),
                (j > 0).then(|| i * n + j - 1),
            ],
            Boundary::Periodic => [
                Some(((i + 1) % n) * n + j),
                Some(((i + n - 1) % n) * n + j),
                Some(i * n + (j + 1) % n),
                Some(i * n + (j + n - 1) % n),
            ],
        }
    }
}

/// Static per-site field offsets. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderField {
    n: usize,
    ex: Vec<f64>,
    ey: Vec<f64>,
    fraction: f64,
    magnitude: f64,
}

impl DisorderField {
    /// A disorder-free field for an `n × n` lattice.
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            ex: vec![0.0; n * n],
            ey: vec![0.0; n * n],
            fraction: 0.0,
            magnitude: 0.0,
        }
    }

    /// Builds a field from explicit per-site components.
    pub fn from_components(n: usize, ex: Vec<f64>, ey: Vec<f64>) -> Result<Self, SimError> {
        if ex.len() != n * n || ey.len() != n * n {
            return Err(SimError::ShapeMismatch {
                expected: n * n,
                got: ex.len().min(ey.len()),
            });
        }
        let nonzero = ex.iter().zip(&ey).filter(|(x, y)| **x != 0.0 || **y != 0.0).count();
        let magnitude = ex.iter().chain(&ey).fold(0.0_f64, |m, v| m.max(v.abs()));
        Ok(Self {
            n,
            fraction: nonzero as f64 / (n * n) as f64,
            magnitude,
            ex,
            ey,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, site: usize) -> Vec2 {
        [self.ex[site], self.ey[site]]
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn nonzero_sites(&self) -> usize {
        self.ex
            .iter()
            .zip(&self.ey)
            .filter(|(x, y)| **x != 0.0 || **y != 0.0)
            .count()
    }
}

/// Polarization components on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeState {
    n: usize,
    pub px: Vec<f64>,
    pub py: Vec<f64>,
}

impl LatticeState {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            px: vec![0.0; n * n],
            py: vec![0.0; n * n],
        }
    }

    pub fn from_components(n: usize, px: Vec<f64>, py: Vec<f64>) -> Result<Self, SimError> {
        if px.len() != n * n || py.len() != n * n {
            return Err(SimError::ShapeMismatch {
                expected: n * n,
                got: px.len().min(py.len()),
            });
        }
        Ok(Self { n, px, py })
    }

    /// Builds a state by evaluating `f(i, j)` at every site.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Vec2) -> Self {
        let mut state = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let [x, y] = f(i, j);
                state.px[i * n + j] = x;
                state.py[i * n + j] = y;
            }
        }
        state
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn site(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    pub fn mean_polarization(&self) -> Vec2 {
        let count = self.px.len() as f64;
        [
            self.px.iter().sum::<f64>() / count,
            self.py.iter().sum::<f64>() / count,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.px.iter().chain(&self.py).all(|v| v.is_finite())
    }

    /// The same state with every polarization vector reversed.
    pub fn flipped(&self) -> Self {
        Self {
            n: self.n,
            px: self.px.iter().map(|v| -v).collect(),
            py: self.py.iter().map(|v| -v).collect(),
        }
    }
}

fn check_shape(state: &LatticeState, config: &LatticeConfig) -> Result<(), SimError> {
    if state.n != config.n {
        return Err(SimError::ShapeMismatch {
            expected: config.sites(),
            got: state.px.len(),
        });
    }
    Ok(())
}

/// Random axis-aligned field offsets at `round(fraction · n²)` distinct sites.
pub fn generate_disorder(
    seed: u64,
    config: &LatticeConfig,
    fraction: f64,
    magnitude: f64,
) -> Result<DisorderField, SimError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SimError::InvalidDisorder(format!(
            "fraction {fraction} outside [0, 1]"
        )));
    }
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(SimError::InvalidDisorder(format!(
            "magnitude {magnitude} must be non-negative"
        )));
    }
    let sites = config.sites();
    let count = (fraction * sites as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ex = vec![0.0; sites];
    let mut ey = vec![0.0; sites];
    if magnitude > 0.0 {
        for site in index::sample(&mut rng, sites, count) {
            let amplitude = loop {
                let a = rng.random_range(-magnitude..=magnitude);
                if a != 0.0 {
                    break a;
                }
            };
            if rng.random_bool(0.5) {
                ex[site] = amplitude;
            } else {
                ey[site] = amplitude;
            }
        }
    }
    Ok(DisorderField {
        n: config.n,
        ex,
        ey,
        fraction,
        magnitude,
    })
}

/// Uniform depolarization field `-α_dep ⟨p⟩`.
pub fn depolarization_field(state: &LatticeState, config: &LatticeConfig) -> Vec2 {
    let [mx, my] = state.mean_polarization();
    [-config.alpha_dep * mx, -config.alpha_dep * my]
}

pub fn local_field(
    e_ext: Vec2,
    state: &LatticeState,
    disorder: &DisorderField,
    site: usize,
    config: &LatticeConfig,
) -> Vec2 {
    let dep = depolarization_field(state, config);
    local_field_with_dep(e_ext, dep, disorder, site)
}

fn local_field_with_dep(e_ext: Vec2, dep: Vec2, disorder: &DisorderField, site: usize) -> Vec2 {
    let [dx, dy] = disorder.at(site);
    [e_ext[0] + dep[0] + dx, e_ext[1] + dep[1] + dy]
}

pub fn site_energy(state: &LatticeState, site: usize, e_loc: Vec2, config: &LatticeConfig) -> f64 {
    let (x, y) = (state.px[site], state.py[site]);
    let (x2, y2) = (x * x, y * y);
    config.alpha1 * (x2 + y2) + config.alpha2 * (x2 * x2 + y2 * y2) + config.alpha3 * x2 * y2
        - e_loc[0] * x
        - e_loc[1] * y
}

/// Total free energy with the depolarization field evaluated from `state`.
pub fn total_free_energy(
    state: &LatticeState,
    e_ext: Vec2,
    disorder: &DisorderField,
    config: &LatticeConfig,
) -> f64 {
    let dep = depolarization_field(state, config);
    total_free_energy_frozen(state, e_ext, dep, disorder, config)
}

/// Total free energy with an externally supplied depolarization field.
///
/// This is the potential whose negative gradient [`force`] returns when `dep`
/// is the depolarization field of the state at which the force is taken.
pub fn total_free_energy_frozen(
    state: &LatticeState,
    e_ext: Vec2,
    dep: Vec2,
    disorder: &DisorderField,
    config: &LatticeConfig,
) -> f64 {
    let n = config.n;
    let mut sites = 0.0;
    let mut coupling = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = i * n + j;
            sites += site_energy(state, s, local_field_with_dep(e_ext, dep, disorder, s), config);
            // +x and +y links only, so each undirected link is counted once.
            let nb = config.neighbours(i, j);
            for t in [nb[0], nb[2]].into_iter().flatten() {
                let dx = state.px[s] - state.px[t];
                let dy = state.py[s] - state.py[t];
                coupling += dx * dx + dy * dy;
            }
        }
    }
    sites + config.k_coupling * coupling
}

/// `-∂F/∂p` per site with the local field frozen at the current state.
pub fn force(
    state: &LatticeState,
    e_ext: Vec2,
    disorder: &DisorderField,
    config: &LatticeConfig,
) -> Vec<Vec2> {
    let mut out = vec![[0.0; 2]; config.sites()];
    force_into(state, e_ext, disorder, config, &mut out);
    out
}

fn force_into(
    state: &LatticeState,
    e_ext: Vec2,
    disorder: &DisorderField,
    config: &LatticeConfig,
    out: &mut [Vec2],
) {
    let n = config.n;
    let dep = depolarization_field(state, config);
    let (a1, a2, a3, k) = (config.alpha1, config.alpha2, config.alpha3, config.k_coupling);
    for i in 0..n {
        for j in 0..n {
            let s = i * n + j;
            let (x, y) = (state.px[s], state.py[s]);
            let e_loc = local_field_with_dep(e_ext, dep, disorder, s);
            let mut lap_x = 0.0;
            let mut lap_y = 0.0;
            for t in config.neighbours(i, j).into_iter().flatten() {
                lap_x += x - state.px[t];
                lap_y += y - state.py[t];
            }
            let gx = 2.0 * a1 * x + 4.0 * a2 * x * x * x + 2.0 * a3 * x * y * y - e_loc[0]
                + 2.0 * k * lap_x;
            let gy = 2.0 * a1 * y + 4.0 * a2 * y * y * y + 2.0 * a3 * y * x * x - e_loc[1]
                + 2.0 * k * lap_y;
            out[s] = [-gx, -gy];
        }
    }
}

/// One explicit Euler step `p ← p + (dt/γ)·force`.
pub fn step(
    state: &LatticeState,
    e_ext: Vec2,
    disorder: &DisorderField,
    config: &LatticeConfig,
) -> Result<LatticeState, SimError> {
    check_shape(state, config)?;
    let mut next = state.clone();
    let mut scratch = vec![[0.0; 2]; config.sites()];
    step_in_place(&mut next, e_ext, disorder, config, &mut scratch)
        .then_some(next)
        .ok_or(SimError::NonFinite { step: 0 })
}

fn step_in_place(
    state: &mut LatticeState,
    e_ext: Vec2,
    disorder: &DisorderField,
    config: &LatticeConfig,
    scratch: &mut [Vec2],
) -> bool {
    force_into(state, e_ext, disorder, config, scratch);
    let rate = config.dt / config.gamma;
    let mut finite = true;
    for (s, [fx, fy]) in scratch.iter().enumerate() {
        state.px[s] += rate * fx;
        state.py[s] += rate * fy;
        finite &= state.px[s].is_finite() && state.py[s].is_finite();
    }
    finite
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutcome {
    pub state: LatticeState,
    /// Mean polarization after each step, when recording was requested.
    pub history: Option<Vec<Vec2>>,
}

/// Drives a zero-initialized lattice through `schedule` (x-field per step).
pub fn simulate(
    schedule: &[f64],
    disorder: &DisorderField,
    config: &LatticeConfig,
    record: bool,
) -> Result<SimOutcome, SimError> {
    config.validate()?;
    if disorder.n() != config.n {
        return Err(SimError::ShapeMismatch {
            expected: config.sites(),
            got: disorder.n() * disorder.n(),
        });
    }
    let mut state = LatticeState::zeros(config.n);
    let mut scratch = vec![[0.0; 2]; config.sites()];
    let mut history = record.then(|| Vec::with_capacity(schedule.len()));
    for (t, &e) in schedule.iter().enumerate() {
        if !step_in_place(&mut state, [e, 0.0], disorder, config, &mut scratch) {
            return Err(SimError::NonFinite { step: t });
        }
        if let Some(h) = history.as_mut() {
            h.push(state.mean_polarization());
        }
    }
    Ok(SimOutcome { state, history })
}

/// Sum over interior sites of the absolute central-difference curl.
pub fn curl_fitness(state: &LatticeState) -> f64 {
    let n = state.n;
    let mut total = 0.0;
    for i in 1..n.saturating_sub(1) {
        for j in 1..n - 1 {
            let dpy_dx = (state.py[(i + 1) * n + j] - state.py[(i - 1) * n + j]) / 2.0;
            let dpx_dy = (state.px[i * n + j + 1] - state.px[i * n + j - 1]) / 2.0;
            total += (dpy_dx - dpx_dy).abs();
        }
    }
    total
}
