//! Deep-kernel-learning surrogate: a convolutional embedding network composed
//! with an exact GP, trained jointly by maximizing the log marginal likelihood.
//!
//! Targets are standardized over the current training set; every prediction
//! is reported back in raw fitness units. GP hyperparameters live in the
//! standardized space.

mod gp;
mod linalg;
mod net;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use gp::KernelKind;
pub use net::{Activation, EmbeddingNetConfig};

use gp::{GpParams, GpPosterior};
use linalg::cholesky_with_jitter;
use net::NetLayout;

#[derive(Debug, thiserror::Error)]
pub enum DklError {
    #[error("invalid surrogate configuration: {0}")]
    InvalidConfig(String),
    #[error("ill-conditioned kernel: {0}")]
    IllConditioned(String),
    #[error("need at least {needed} training points, have {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("input {index} has length {got}, expected {expected}")]
    InputLength { index: usize, expected: usize, got: usize },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("posterior variance {0} is negative beyond roundoff")]
    NegativeVariance(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub kernel: KernelKind,
    pub init_lengthscale: f64,
    pub init_output_scale: f64,
    pub init_noise: f64,
    pub noise_floor: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Rbf,
            init_lengthscale: 1.0,
            init_output_scale: 1.0,
            init_noise: 0.1,
            noise_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Iterations for a freshly initialized model.
    pub iterations: usize,
    /// Iterations for a warm-started retrain after new data arrives.
    pub warm_iterations: usize,
    /// Adam step size for the GP hyperparameters.
    pub learning_rate: f64,
    /// Adam step size for the network weights.
    pub network_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            warm_iterations: 50,
            learning_rate: 0.01,
            network_learning_rate: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DklConfig {
    pub net: EmbeddingNetConfig,
    pub gp: GpConfig,
    pub train: TrainConfig,
}

impl DklConfig {
    pub fn validate(&self) -> Result<(), DklError> {
        self.net.validate()?;
        let g = &self.gp;
        let positive = [g.init_lengthscale, g.init_output_scale, g.noise_floor];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DklError::InvalidConfig(
                "initial lengthscale, output scale and noise floor must be positive".into(),
            ));
        }
        if !(g.init_noise.is_finite() && g.init_noise > g.noise_floor) {
            return Err(DklError::InvalidConfig("initial noise must exceed the noise floor".into()));
        }
        let t = &self.train;
        if ![t.learning_rate, t.network_learning_rate].iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(DklError::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// GP hyperparameters in standardized target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub lengthscale: f64,
    pub output_scale: f64,
    pub noise_variance: f64,
    pub mean: f64,
}

/// Posterior means and variances in raw fitness units.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Prediction {
    pub fn stds(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_lml: f64,
    pub best_lml: f64,
    /// Iteration whose parameters were kept (0 is the starting point).
    pub best_iteration: usize,
}

const GP_PARAMS: usize = 4;
const PREDICT_CHUNK: usize = 64;
/// Tolerated negative roundoff in standardized posterior variance.
const NEGATIVE_VARIANCE_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct DklModel {
    config: DklConfig,
    layout: NetLayout,
    /// Network parameters followed by log lengthscale, log output scale,
    /// log excess noise and the constant mean.
    params: Vec<f64>,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    patches: Vec<f64>,
    posterior: Option<GpPosterior>,
}

impl DklModel {
    pub fn new<R: Rng + ?Sized>(config: DklConfig, rng: &mut R) -> Result<Self, DklError> {
        config.validate()?;
        let layout = NetLayout::new(&config.net);
        let mut model = Self {
            params: Vec::new(),
            layout,
            config,
            train_x: Vec::new(),
            train_y: Vec::new(),
            y_mean: 0.0,
            y_std: 1.0,
            patches: Vec::new(),
            posterior: None,
        };
        model.reinitialize(rng)?;
        Ok(model)
    }

    /// Fresh network weights and initial hyperparameters; keeps the data.
    pub fn reinitialize<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), DklError> {
        let mut p = net::init_params(&self.config.net, &self.layout, rng);
        let g = &self.config.gp;
        p.extend([
            g.init_lengthscale.ln(),
            g.init_output_scale.ln(),
            (g.init_noise - g.noise_floor).ln(),
            0.0,
        ]);
        self.params = p;
        self.refresh()
    }

    pub fn config(&self) -> &DklConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.net.embedding_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), DklError> {
        if params.len() != self.params.len() {
            return Err(DklError::LengthMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(DklError::NonFinite("parameters"));
        }
        self.params.copy_from_slice(params);
        self.refresh()
    }

    fn gp_params(&self) -> GpParams {
        let h = &self.params[self.layout.len..];
        GpParams {
            kernel: self.config.gp.kernel,
            log_lengthscale: h[0],
            log_output_scale: h[1],
            log_noise: h[2],
            noise_floor: self.config.gp.noise_floor,
            mean: h[3],
        }
    }

    pub fn hyperparams(&self) -> GpHyperparams {
        let p = self.gp_params();
        GpHyperparams {
            lengthscale: p.lengthscale(),
            output_scale: p.output_scale(),
            noise_variance: p.noise(),
            mean: p.mean,
        }
    }

    pub fn set_hyperparams(&mut self, h: GpHyperparams) -> Result<(), DklError> {
        let floor = self.config.gp.noise_floor;
        if !(h.lengthscale > 0.0 && h.output_scale > 0.0 && h.noise_variance > floor && h.mean.is_finite()) {
            return Err(DklError::InvalidConfig(format!(
                "hyperparameters need positive scales and noise above the floor {floor}"
            )));
        }
        let at = self.layout.len;
        self.params[at..].copy_from_slice(&[
            h.lengthscale.ln(),
            h.output_scale.ln(),
            (h.noise_variance - floor).ln(),
            h.mean,
        ]);
        self.refresh()
    }

    /// Zeroes every network weight and bias.
    pub fn zero_network(&mut self) -> Result<(), DklError> {
        let at = self.layout.len;
        self.params[..at].fill(0.0);
        self.refresh()
    }

    pub fn num_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn train_inputs(&self) -> &[Vec<f64>] {
        &self.train_x
    }

    pub fn train_targets(&self) -> &[f64] {
        &self.train_y
    }

    /// Mean and standard deviation used to standardize targets.
    pub fn standardization(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    fn check_inputs<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<(), DklError> {
        let expected = self.config.net.input_len;
        for (index, x) in xs.iter().enumerate() {
            let x = x.as_ref();
            if x.len() != expected {
                return Err(DklError::InputLength {
                    index,
                    expected,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DklError::NonFinite("input"));
            }
        }
        Ok(())
    }

    /// Replaces the training set.
    pub fn set_training_data<X: AsRef<[f64]>>(&mut self, xs: &[X], ys: &[f64]) -> Result<(), DklError> {
        self.train_x.clear();
        self.train_y.clear();
        self.add_training_data(xs, ys)
    }

    pub fn add_training_data<X: AsRef<[f64]>>(&mut self, xs: &[X], ys: &[f64]) -> Result<(), DklError> {
        if xs.len() != ys.len() {
            return Err(DklError::LengthMismatch {
                expected: xs.len(),
                got: ys.len(),
            });
        }
        self.check_inputs(xs)?;
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(DklError::NonFinite("target"));
        }
        self.train_x.extend(xs.iter().map(|x| x.as_ref().to_vec()));
        self.train_y.extend_from_slice(ys);
        let m = self.train_y.len() as f64;
        self.y_mean = self.train_y.iter().sum::<f64>() / m;
        let var = self.train_y.iter().map(|y| (y - self.y_mean).powi(2)).sum::<f64>() / m;
        self.y_std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        let refs: Vec<&[f64]> = self.train_x.iter().map(|x| x.as_slice()).collect();
        self.patches = net::im2col(&self.config.net, &refs);
        self.refresh()
    }

    fn standardized_targets(&self) -> Vec<f64> {
        self.train_y.iter().map(|y| (y - self.y_mean) / self.y_std).collect()
    }

    fn train_embeddings(&self, params: &[f64]) -> net::ForwardTrace {
        net::forward(&self.config.net, &self.layout, params, &self.patches, self.num_train())
    }

    /// Recomputes the cached factorization from the current state.
    fn refresh(&mut self) -> Result<(), DklError> {
        self.posterior = None;
        if self.train_y.is_empty() {
            return Ok(());
        }
        let z = self.train_embeddings(&self.params).output().to_vec();
        let y = self.standardized_targets();
        self.posterior = Some(GpPosterior::fit(self.gp_params(), z, self.embedding_dim(), &y)?);
        Ok(())
    }

    fn posterior(&self) -> Result<&GpPosterior, DklError> {
        self.posterior.as_ref().ok_or(DklError::TooFewPoints { needed: 1, got: 0 })
    }

    /// Row-major `n × embedding_dim` embeddings.
    pub fn embed_many<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<Vec<f64>, DklError> {
        self.check_inputs(xs)?;
        let mut out = Vec::with_capacity(xs.len() * self.embedding_dim());
        for chunk in xs.chunks(PREDICT_CHUNK) {
            let refs: Vec<&[f64]> = chunk.iter().map(|x| x.as_ref()).collect();
            let patches = net::im2col(&self.config.net, &refs);
            let trace = net::forward(&self.config.net, &self.layout, &self.params, &patches, refs.len());
            out.extend_from_slice(trace.output());
        }
        Ok(out)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>, DklError> {
        self.embed_many(&[x])
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64, DklError> {
        Ok(self.posterior()?.lml)
    }

    /// LML and its gradient with respect to [`Self::params`].
    pub fn lml_gradient(&self) -> Result<(f64, Vec<f64>), DklError> {
        self.lml_gradient_at(&self.params)
    }

    fn lml_gradient_at(&self, params: &[f64]) -> Result<(f64, Vec<f64>), DklError> {
        let mut grad = vec![0.0; params.len()];
        let lml = self.lml_gradient_into(params, &mut net::ForwardTrace::default(), &mut grad)?;
        Ok((lml, grad))
    }

    /// Writes the gradient at `params` into `grad` and returns the LML.
    fn lml_gradient_into(&self, params: &[f64], trace: &mut net::ForwardTrace, grad: &mut [f64]) -> Result<f64, DklError> {
        let m = self.num_train();
        if m == 0 {
            return Err(DklError::TooFewPoints { needed: 1, got: 0 });
        }
        net::forward_into(&self.config.net, &self.layout, params, &self.patches, m, trace);
        let mut gp = self.gp_params();
        let h = &params[self.layout.len..];
        (gp.log_lengthscale, gp.log_output_scale, gp.log_noise, gp.mean) = (h[0], h[1], h[2], h[3]);
        let y = self.standardized_targets();
        let g = gp::lml_grad(&gp, trace.output(), self.embedding_dim(), &y)?;
        net::backward(
            &self.config.net,
            &self.layout,
            params,
            &self.patches,
            m,
            trace,
            &g.dz,
            &mut grad[..self.layout.len],
        );
        grad[self.layout.len..].copy_from_slice(&g.hypers);
        Ok(g.lml)
    }

    /// Full-batch Adam ascent on the LML for a fixed number of iterations,
    /// keeping the best iterate seen. Network weights step with `network_lr`,
    /// the GP hyperparameters with `gp_lr`.
    pub fn train(&mut self, iterations: usize, network_lr: f64, gp_lr: f64) -> Result<TrainReport, DklError> {
        let m = self.num_train();
        if m < 2 {
            return Err(DklError::TooFewPoints { needed: 2, got: m });
        }
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let n = self.params.len();
        let (mut mom, mut vel) = (vec![0.0; n], vec![0.0; n]);
        let mut current = self.params.clone();
        let mut best = current.clone();
        let mut grad = vec![0.0; n];
        let mut trace = net::ForwardTrace::default();
        let (mut initial_lml, mut best_lml, mut best_iteration) = (f64::NAN, f64::NEG_INFINITY, 0);
        for it in 0..=iterations {
            let lml = self.lml_gradient_into(&current, &mut trace, &mut grad)?;
            if it == 0 {
                initial_lml = lml;
            }
            if lml > best_lml {
                best_lml = lml;
                best_iteration = it;
                best.copy_from_slice(&current);
            }
            if it == iterations || grad.iter().any(|g| !g.is_finite()) {
                break;
            }
            let t = (it + 1) as i32;
            let (r1, r2) = (1.0 / (1.0 - B1.powi(t)), 1.0 / (1.0 - B2.powi(t)));
            let split = self.layout.len;
            for (range, lr) in [(0..split, network_lr), (split..n, gp_lr)] {
                let steps = current[range.clone()]
                    .iter_mut()
                    .zip(&mut mom[range.clone()])
                    .zip(&mut vel[range.clone()])
                    .zip(&grad[range]);
                for (((x, m), v), &g) in steps {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *x += lr * (*m * r1) / ((*v * r2).sqrt() + EPS);
                }
            }
        }
        self.params = best;
        self.refresh()?;
        Ok(TrainReport {
            initial_lml,
            best_lml,
            best_iteration,
        })
    }

    fn destandardize(&self, mean: f64, var: f64) -> Result<(f64, f64), DklError> {
        if var < -NEGATIVE_VARIANCE_TOL || !var.is_finite() || !mean.is_finite() {
            return Err(DklError::NegativeVariance(var));
        }
        Ok((self.y_mean + self.y_std * mean, self.y_std * self.y_std * var.max(0.0)))
    }

    /// Posterior mean and latent variance at each candidate.
    pub fn predict<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<Prediction, DklError> {
        let post = self.posterior()?;
        let z = self.embed_many(xs)?;
        let d = self.embedding_dim();
        let mut out = Prediction {
            means: Vec::with_capacity(xs.len()),
            variances: Vec::with_capacity(xs.len()),
        };
        for chunk in z.chunks(PREDICT_CHUNK * d) {
            let (mean, var) = post.marginal(chunk);
            for (m, v) in mean.iter().zip(var.iter()) {
                let (m, v) = self.destandardize(*m, *v)?;
                out.means.push(m);
                out.variances.push(v);
            }
        }
        Ok(out)
    }

    /// Posterior mean and full covariance in raw fitness units.
    pub fn predict_joint<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<(DVector<f64>, DMatrix<f64>), DklError> {
        let post = self.posterior()?;
        let z = self.embed_many(xs)?;
        let (mean, mut cov) = post.joint(&z);
        for i in 0..cov.nrows() {
            self.destandardize(0.0, cov[(i, i)])?;
        }
        let s2 = self.y_std * self.y_std;
        cov *= s2;
        for i in 0..cov.nrows() {
            cov[(i, i)] = cov[(i, i)].max(0.0);
        }
        Ok((mean.map(|m| self.y_mean + self.y_std * m), cov))
    }

    /// Factorizes the joint posterior once for repeated draws.
    pub fn posterior_sampler<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<PosteriorSampler, DklError> {
        let post = self.posterior()?;
        let z = self.embed_many(xs)?;
        let (mean, cov) = post.joint(&z);
        for i in 0..cov.nrows() {
            self.destandardize(0.0, cov[(i, i)])?;
        }
        // Factor in standardized units so the jitter ladder is scale-free.
        let mut sampler = PosteriorSampler::new(mean.map(|m| self.y_mean + self.y_std * m), &cov)?;
        if let Some(l) = sampler.factor.as_mut() {
            *l *= self.y_std;
        }
        Ok(sampler)
    }

    /// One joint draw from the posterior at `xs`.
    pub fn sample_posterior<X: AsRef<[f64]>, R: Rng + ?Sized>(&self, xs: &[X], rng: &mut R) -> Result<Vec<f64>, DklError> {
        Ok(self.posterior_sampler(xs)?.sample(rng))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            params: self.params.clone(),
            train_inputs: self.train_x.clone(),
            train_targets: self.train_y.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, DklError> {
        if ck.config.hash() != ck.config_hash {
            return Err(DklError::Checkpoint("config hash does not match the stored config".into()));
        }
        ck.config.validate()?;
        let layout = NetLayout::new(&ck.config.net);
        if ck.params.len() != layout.len + GP_PARAMS {
            return Err(DklError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len + GP_PARAMS,
                ck.params.len()
            )));
        }
        let mut model = Self {
            config: ck.config,
            layout,
            params: ck.params,
            train_x: Vec::new(),
            train_y: Vec::new(),
            y_mean: 0.0,
            y_std: 1.0,
            patches: Vec::new(),
            posterior: None,
        };
        model.set_training_data(&ck.train_inputs, &ck.train_targets)?;
        Ok(model)
    }
}

/// Serializable model state. Standardization and the factorization are
/// recomputed from the stored training set on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: DklConfig,
    pub params: Vec<f64>,
    pub train_inputs: Vec<Vec<f64>>,
    pub train_targets: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DklError> {
        serde_json::from_str(s).map_err(|e| DklError::Checkpoint(e.to_string()))
    }
}

/// Repeated joint draws `mean + L·z` from a fixed Gaussian.
#[derive(Clone, Debug)]
pub struct PosteriorSampler {
    mean: DVector<f64>,
    /// `None` when the covariance is identically zero.
    factor: Option<DMatrix<f64>>,
}

impl PosteriorSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self, DklError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(DklError::LengthMismatch {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        if cov.iter().all(|&v| v == 0.0) {
            return Ok(Self { mean, factor: None });
        }
        let (chol, _) = cholesky_with_jitter(cov)
            .ok_or_else(|| DklError::IllConditioned("posterior covariance not factorizable".into()))?;
        Ok(Self {
            mean,
            factor: Some(chol.unpack()),
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.factor {
            None => self.mean.iter().copied().collect(),
            Some(l) => {
                let z = DVector::from_iterator(self.len(), (0..self.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
                (&self.mean + l * z).iter().copied().collect()
            }
        }
    }
}

/// One draw from `N(mean, cov)`.
pub fn sample_mvn<R: Rng + ?Sized>(mean: DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>, DklError> {
    Ok(PosteriorSampler::new(mean, cov)?.sample(rng))
}
