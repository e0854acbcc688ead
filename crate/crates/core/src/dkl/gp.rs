//! Exact Gaussian process over embedding points (row-major `m × d`).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::linalg::cholesky_with_jitter;
use super::DklError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Rbf,
    Matern52,
}

/// GP hyperparameters in their unconstrained parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct GpParams {
    pub kernel: KernelKind,
    pub log_lengthscale: f64,
    pub log_output_scale: f64,
    /// Noise variance is `noise_floor + exp(log_noise)`.
    pub log_noise: f64,
    pub noise_floor: f64,
    pub mean: f64,
}

impl GpParams {
    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn output_scale(&self) -> f64 {
        self.log_output_scale.exp()
    }

    pub fn noise(&self) -> f64 {
        self.noise_floor + self.log_noise.exp()
    }

    /// Kernel value and the radial factor `g` with
    /// `∂k/∂zᵢ = −g·(zᵢ − zⱼ)/ℓ²` and `∂k/∂log ℓ = g·r²/ℓ²`.
    fn eval(&self, r2: f64) -> (f64, f64) {
        let os = self.output_scale();
        let l2 = self.lengthscale().powi(2);
        match self.kernel {
            KernelKind::Rbf => {
                let k = os * (-0.5 * r2 / l2).exp();
                (k, k)
            }
            KernelKind::Matern52 => {
                let s = (r2 / l2).sqrt();
                let r5 = 5f64.sqrt() * s;
                let e = (-r5).exp();
                let k = os * (1.0 + r5 + 5.0 / 3.0 * s * s) * e;
                (k, os * 5.0 / 3.0 * (1.0 + r5) * e)
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cross-covariance `k(A, B)` without noise.
pub(crate) fn cross_kernel(p: &GpParams, a: &[f64], b: &[f64], d: usize) -> DMatrix<f64> {
    let (na, nb) = (a.len() / d, b.len() / d);
    DMatrix::from_fn(na, nb, |i, j| p.eval(sq_dist(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d])).0)
}

/// Training covariance `k(Z, Z) + noise·I`.
pub(crate) fn train_kernel(p: &GpParams, z: &[f64], d: usize) -> DMatrix<f64> {
    let mut k = cross_kernel(p, z, z, d);
    let noise = p.noise();
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    k
}

fn factor(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), DklError> {
    cholesky_with_jitter(k).ok_or_else(|| {
        DklError::IllConditioned(format!(
            "kernel matrix of size {} not positive definite after jitter escalation",
            k.nrows()
        ))
    })
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Factorized training covariance and weights `α = K⁻¹(y − c)`.
#[derive(Clone, Debug)]
pub(crate) struct GpPosterior {
    pub params: GpParams,
    pub z: Vec<f64>,
    pub d: usize,
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    pub lml: f64,
}

impl GpPosterior {
    pub fn fit(params: GpParams, z: Vec<f64>, d: usize, y: &[f64]) -> Result<Self, DklError> {
        let k = train_kernel(&params, &z, d);
        let (chol, _) = factor(&k)?;
        let r = DVector::from_iterator(y.len(), y.iter().map(|v| v - params.mean));
        let alpha = chol.solve(&r);
        let m = y.len() as f64;
        let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let lml = -0.5 * r.dot(&alpha) - log_det_half - m * HALF_LOG_2PI;
        Ok(Self {
            params,
            z,
            d,
            chol,
            alpha,
            lml,
        })
    }

    /// Latent posterior mean and covariance at `zs` (standardized units).
    pub fn joint(&self, zs: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let ks = cross_kernel(&self.params, &self.z, zs, self.d);
        let mean = ks.tr_mul(&self.alpha).add_scalar(self.params.mean);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("factor is nonsingular");
        let prior = cross_kernel(&self.params, zs, zs, self.d);
        (mean, prior - v.tr_mul(&v))
    }

    /// Latent posterior mean and marginal variance at `zs` (standardized
    /// units, variance not yet clamped).
    pub fn marginal(&self, zs: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let ks = cross_kernel(&self.params, &self.z, zs, self.d);
        let mean = ks.tr_mul(&self.alpha).add_scalar(self.params.mean);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("factor is nonsingular");
        let os = self.params.output_scale();
        let var = DVector::from_iterator(v.ncols(), v.column_iter().map(|c| os - c.norm_squared()));
        (mean, var)
    }
}

/// Gradient of the log marginal likelihood.
pub(crate) struct LmlGrad {
    pub lml: f64,
    /// Order: log lengthscale, log output scale, log noise, constant mean.
    pub hypers: [f64; 4],
    /// `∂LML/∂Z`, row-major `m × d`.
    pub dz: Vec<f64>,
}

pub(crate) fn lml_grad(p: &GpParams, z: &[f64], d: usize, y: &[f64]) -> Result<LmlGrad, DklError> {
    let post = GpPosterior::fit(*p, z.to_vec(), d, y)?;
    let m = y.len();
    let kinv = post.chol.inverse();
    let a = &post.alpha;
    // G = ½(ααᵀ − K⁻¹) is ∂LML/∂K.
    let g = (a * a.transpose() - kinv) * 0.5;
    let l2 = p.lengthscale().powi(2);

    let (mut d_ls, mut d_os) = (0.0, 0.0);
    let mut dz = vec![0.0; m * d];
    for i in 0..m {
        let zi = &z[i * d..(i + 1) * d];
        for j in 0..m {
            let zj = &z[j * d..(j + 1) * d];
            let r2 = sq_dist(zi, zj);
            let (k, radial) = p.eval(r2);
            let gij = g[(i, j)];
            d_os += gij * k;
            d_ls += gij * radial * r2 / l2;
            if i != j {
                let c = -2.0 * gij * radial / l2;
                for (t, (a, b)) in zi.iter().zip(zj).enumerate() {
                    dz[i * d + t] += c * (a - b);
                }
            }
        }
    }
    let d_noise = p.log_noise.exp() * g.trace();
    let d_mean = a.sum();
    Ok(LmlGrad {
        lml: post.lml,
        hypers: [d_ls, d_os, d_noise, d_mean],
        dz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kernel: KernelKind) -> GpParams {
        GpParams {
            kernel,
            log_lengthscale: 0.2,
            log_output_scale: -0.3,
            log_noise: -2.0,
            noise_floor: 1e-6,
            mean: 0.1,
        }
    }

    fn data() -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = (0..14).map(|i| ((i * 7 % 11) as f64 * 0.31).sin() * 1.5).collect();
        let y: Vec<f64> = (0..7).map(|i| (i as f64 * 0.8).cos()).collect();
        (z, y)
    }

    #[test]
    fn single_point_unit_kernel() {
        let p = GpParams {
            kernel: KernelKind::Rbf,
            log_lengthscale: 0.0,
            log_output_scale: (1.0f64 - 0.5).ln(),
            log_noise: (0.5f64 - 1e-6).ln(),
            noise_floor: 1e-6,
            mean: 0.0,
        };
        let post = GpPosterior::fit(p, vec![0.3, -0.2], 2, &[0.0]).unwrap();
        assert!((post.lml + HALF_LOG_2PI).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (z, y) = data();
        for kernel in [KernelKind::Rbf, KernelKind::Matern52] {
            let p = params(kernel);
            let g = lml_grad(&p, &z, 2, &y).unwrap();
            let f = |p: &GpParams, z: &[f64]| GpPosterior::fit(*p, z.to_vec(), 2, &y).unwrap().lml;
            let h = 1e-6;
            let check = |fd: f64, an: f64, what: &str| {
                assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "{kernel:?} {what}: fd {fd} vs {an}");
            };
            let bump = |k: usize, s: f64| {
                let mut q = p;
                match k {
                    0 => q.log_lengthscale += s,
                    1 => q.log_output_scale += s,
                    2 => q.log_noise += s,
                    _ => q.mean += s,
                }
                q
            };
            for k in 0..4 {
                let fd = (f(&bump(k, h), &z) - f(&bump(k, -h), &z)) / (2.0 * h);
                check(fd, g.hypers[k], &format!("hyper {k}"));
            }
            for t in 0..z.len() {
                let mut up = z.clone();
                up[t] += h;
                let mut down = z.clone();
                down[t] -= h;
                let fd = (f(&p, &up) - f(&p, &down)) / (2.0 * h);
                check(fd, g.dz[t], &format!("z {t}"));
            }
        }
    }

    #[test]
    fn marginal_agrees_with_joint_diagonal() {
        let (z, y) = data();
        let post = GpPosterior::fit(params(KernelKind::Matern52), z, 2, &y).unwrap();
        let zs = [0.1, 0.2, -1.0, 0.4, 3.0, 3.0];
        let (m1, v1) = post.marginal(&zs);
        let (m2, c2) = post.joint(&zs);
        for i in 0..3 {
            assert!((m1[i] - m2[i]).abs() < 1e-12);
            assert!((v1[i] - c2[(i, i)]).abs() < 1e-12);
        }
    }
}
