use gadkl_core::dkl::{sample_mvn, DklConfig, DklModel, EmbeddingNetConfig, GpHyperparams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> DklConfig {
    let mut c = DklConfig::default();
    c.net = EmbeddingNetConfig {
        input_len: 40,
        conv_filters: 4,
        dense_widths: vec![8],
        ..EmbeddingNetConfig::default()
    };
    c
}

fn random_inputs(r: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

fn random_targets(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(5.0..30.0)).collect()
}

/// Model on `n` random points with randomized hyperparameters.
fn random_model(seed: u64, config: DklConfig, n: usize) -> (DklModel, ChaCha8Rng) {
    let mut r = rng(seed);
    let mut model = DklModel::new(config.clone(), &mut r).unwrap();
    let xs = random_inputs(&mut r, n, config.net.input_len);
    let ys = random_targets(&mut r, n);
    model.set_training_data(&xs, &ys).unwrap();
    let h = GpHyperparams {
        lengthscale: r.random_range(0.5..2.0),
        output_scale: r.random_range(0.5..2.0),
        noise_variance: r.random_range(0.01..0.3),
        mean: r.random_range(-0.5..0.5),
    };
    model.set_hyperparams(h).unwrap();
    (model, r)
}

/// Gauss-Jordan inverse with partial pivoting, plus log|det|.
fn dense_inverse(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    let mut log_det = 0.0;
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, p);
        let piv = m[col][col];
        log_det += piv.abs().ln();
        for v in m[col].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    (m.into_iter().map(|r| r[n..].to_vec()).collect(), log_det)
}

fn rbf(h: &GpHyperparams, a: &[f64], b: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    h.output_scale * (-0.5 * r2 / (h.lengthscale * h.lengthscale)).exp()
}

struct Oracle {
    lml: f64,
    means: Vec<f64>,
    variances: Vec<f64>,
}

/// Brute-force GP evaluation from the model's public embeddings.
fn oracle(model: &DklModel, cands: &[Vec<f64>]) -> Oracle {
    let h = model.hyperparams();
    let d = model.embedding_dim();
    let (mu, sd) = model.standardization();
    let zt = model.embed_many(model.train_inputs()).unwrap();
    let zc = model.embed_many(cands).unwrap();
    let m = model.num_train();
    let row = |z: &[f64], i: usize| z[i * d..(i + 1) * d].to_vec();
    let k: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| rbf(&h, &row(&zt, i), &row(&zt, j)) + if i == j { h.noise_variance } else { 0.0 })
                .collect()
        })
        .collect();
    let (kinv, log_det) = dense_inverse(&k);
    let r: Vec<f64> = model.train_targets().iter().map(|y| (y - mu) / sd - h.mean).collect();
    let alpha: Vec<f64> = (0..m).map(|i| (0..m).map(|j| kinv[i][j] * r[j]).sum()).collect();
    let quad: f64 = r.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let lml = -0.5 * quad - 0.5 * log_det - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    let (mut means, mut variances) = (Vec::new(), Vec::new());
    for c in 0..cands.len() {
        let ks: Vec<f64> = (0..m).map(|i| rbf(&h, &row(&zt, i), &row(&zc, c))).collect();
        let mean: f64 = h.mean + ks.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
        let quad: f64 = (0..m).map(|i| (0..m).map(|j| ks[i] * kinv[i][j] * ks[j]).sum::<f64>()).sum();
        means.push(mu + sd * mean);
        variances.push(sd * sd * (h.output_scale - quad));
    }
    Oracle { lml, means, variances }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn embedding_is_deterministic_with_configured_dimension() {
    let mut r = rng(1);
    let model = DklModel::new(DklConfig::default(), &mut r).unwrap();
    let x = random_inputs(&mut r, 1, 900).remove(0);
    let a = model.embed(&x).unwrap();
    assert_eq!(a, model.embed(&x).unwrap());
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn zero_network_maps_everything_to_origin() {
    let mut r = rng(2);
    let mut model = DklModel::new(DklConfig::default(), &mut r).unwrap();
    model.zero_network().unwrap();
    for x in random_inputs(&mut r, 3, 900) {
        assert_eq!(model.embed(&x).unwrap(), vec![0.0, 0.0]);
    }
}

#[test]
fn single_point_lml() {
    let mut r = rng(3);
    let mut model = DklModel::new(small_config(), &mut r).unwrap();
    model.set_training_data(&random_inputs(&mut r, 1, 40), &[0.0]).unwrap();
    model
        .set_hyperparams(GpHyperparams {
            lengthscale: 1.0,
            output_scale: 0.5,
            noise_variance: 0.5,
            mean: 0.0,
        })
        .unwrap();
    let want = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((model.log_marginal_likelihood().unwrap() - want).abs() < 1e-12);
}

#[test]
fn lml_is_permutation_invariant() {
    let (mut model, mut r) = random_model(4, small_config(), 10);
    let before = model.log_marginal_likelihood().unwrap();
    let mut idx: Vec<usize> = (0..10).collect();
    idx.reverse();
    idx.swap(2, 7);
    let _ = r.random::<u8>();
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| model.train_inputs()[i].clone()).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| model.train_targets()[i]).collect();
    model.set_training_data(&xs, &ys).unwrap();
    assert!(rel(before, model.log_marginal_likelihood().unwrap()) < 1e-12);
}

#[test]
fn lml_and_posterior_match_dense_oracle() {
    for seed in 0..5 {
        let (model, mut r) = random_model(100 + seed, DklConfig::default(), 10);
        let cands = random_inputs(&mut r, 6, 900);
        let o = oracle(&model, &cands);
        let lml = model.log_marginal_likelihood().unwrap();
        assert!(rel(lml, o.lml) < 1e-8, "seed {seed}: {lml} vs {}", o.lml);
        let p = model.predict(&cands).unwrap();
        for i in 0..cands.len() {
            assert!(rel(p.means[i], o.means[i]) < 1e-8, "mean {i}: {} vs {}", p.means[i], o.means[i]);
            assert!(rel(p.variances[i], o.variances[i]) < 1e-8, "var {i}: {} vs {}", p.variances[i], o.variances[i]);
        }
    }
}

#[test]
fn lml_gradient_matches_central_differences() {
    let (mut model, mut r) = random_model(7, DklConfig::default(), 10);
    let (_, grad) = model.lml_gradient().unwrap();
    let base = model.params().to_vec();
    let n = base.len();
    let mut picks: Vec<usize> = sample(&mut r, n, 20).into_vec();
    // the GP block is small; make sure it is always covered as well
    picks.extend(n - 4..n);
    let h = 1e-5;
    for k in picks {
        let mut p = base.clone();
        p[k] = base[k] + h;
        model.set_params(&p).unwrap();
        let up = model.log_marginal_likelihood().unwrap();
        p[k] = base[k] - h;
        model.set_params(&p).unwrap();
        let down = model.log_marginal_likelihood().unwrap();
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
        assert!(err < 1e-3, "param {k}: fd {fd} vs analytic {}", grad[k]);
    }
}

#[test]
fn training_never_lowers_lml() {
    let (mut model, _) = random_model(8, small_config(), 12);
    let before = model.log_marginal_likelihood().unwrap();
    let report = model.train(30, 0.01, 0.01).unwrap();
    let after = model.log_marginal_likelihood().unwrap();
    assert!((report.initial_lml - before).abs() < 1e-12);
    assert!(after >= before - 1e-9);
    assert!((after - report.best_lml).abs() < 1e-12);
}

#[test]
fn constant_targets_push_noise_toward_floor() {
    let mut r = rng(9);
    let mut model = DklModel::new(small_config(), &mut r).unwrap();
    let xs = random_inputs(&mut r, 12, 40);
    model.set_training_data(&xs, &[3.5; 12]).unwrap();
    let before = model.hyperparams().noise_variance;
    model.train(200, 0.05, 0.05).unwrap();
    let after = model.hyperparams().noise_variance;
    assert!(after < before / 100.0, "noise {before} -> {after}");
    assert!(after >= model.config().gp.noise_floor);
}

#[test]
fn interpolates_training_points_at_the_noise_floor() {
    let (mut model, _) = random_model(10, DklConfig::default(), 10);
    let floor = model.config().gp.noise_floor;
    let mut h = model.hyperparams();
    h.noise_variance = floor * 1.5;
    h.lengthscale = 0.05;
    model.set_hyperparams(h).unwrap();
    let (_, sd) = model.standardization();
    let p = model.predict(model.train_inputs()).unwrap();
    for (i, y) in model.train_targets().iter().enumerate() {
        assert!((p.means[i] - y).abs() < 1e-3, "point {i}: {} vs {y}", p.means[i]);
        assert!(p.variances[i] / (sd * sd) < floor * 10.0);
    }
}

#[test]
fn far_candidates_revert_to_the_prior() {
    let (mut model, mut r) = random_model(11, DklConfig::default(), 10);
    let mut h = model.hyperparams();
    h.lengthscale = 1e-6;
    model.set_hyperparams(h).unwrap();
    let (mu, sd) = model.standardization();
    let p = model.predict(&random_inputs(&mut r, 4, 900)).unwrap();
    for i in 0..4 {
        assert!((p.means[i] - (mu + sd * h.mean)).abs() < 1e-9);
        assert!(rel(p.variances[i], sd * sd * h.output_scale) < 1e-9);
    }
}

#[test]
fn conditioning_never_increases_variance() {
    for seed in 0..10 {
        let (mut model, mut r) = random_model(200 + seed, DklConfig::default(), 9);
        let h = model.hyperparams();
        let mut cands = random_inputs(&mut r, 8, 900);
        cands.extend(model.train_inputs()[..3].iter().cloned());
        let (_, sd0) = model.standardization();
        let before = model.predict(&cands).unwrap();
        let extra = random_inputs(&mut r, 1, 900);
        model.add_training_data(&extra, &[r.random_range(5.0..30.0)]).unwrap();
        assert_eq!(model.hyperparams(), h);
        let (_, sd1) = model.standardization();
        let after = model.predict(&cands).unwrap();
        let o = oracle(&model, &cands);
        for i in 0..cands.len() {
            // standardized variance depends only on inputs and hyperparameters
            let (v0, v1) = (before.variances[i] / (sd0 * sd0), after.variances[i] / (sd1 * sd1));
            assert!(v1 <= v0 + 1e-12, "seed {seed} cand {i}: {v0} -> {v1}");
            assert!((after.variances[i] - o.variances[i]).abs() <= 1e-8 * o.variances[i].abs().max(sd1 * sd1 * 1e-6));
        }
    }
}

#[test]
fn posterior_samples_match_predictive_moments() {
    let (model, mut r) = random_model(12, small_config(), 10);
    let cand = random_inputs(&mut r, 1, 40);
    let p = model.predict(&cand).unwrap();
    let sampler = model.posterior_sampler(&cand).unwrap();
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|_| sampler.sample(&mut r)[0]).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (m0, v0) = (p.means[0], p.variances[0]);
    assert!((mean - m0).abs() < 3.0 * (v0 / n as f64).sqrt(), "mean {mean} vs {m0}");
    let se_var = v0 * (2.0 / (n - 1) as f64).sqrt();
    assert!((var - v0).abs() < 3.0 * se_var, "var {var} vs {v0}");
}

#[test]
fn sampling_is_seeded_and_exact_without_covariance() {
    let (model, mut r) = random_model(13, small_config(), 10);
    let cands = random_inputs(&mut r, 5, 40);
    let a = model.sample_posterior(&cands, &mut rng(77)).unwrap();
    let b = model.sample_posterior(&cands, &mut rng(77)).unwrap();
    assert_eq!(a, b);
    let mean = DVector::from_vec(vec![1.0, -2.0, 3.5]);
    let s = sample_mvn(mean.clone(), &DMatrix::zeros(3, 3), &mut r).unwrap();
    assert_eq!(s, mean.as_slice());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (model, mut r) = random_model(14, small_config(), 8);
    let cands = random_inputs(&mut r, 3, 40);
    let json = model.checkpoint().to_json();
    let back = DklModel::from_checkpoint(gadkl_core::dkl::Checkpoint::from_json(&json).unwrap()).unwrap();
    assert_eq!(model.predict(&cands).unwrap(), back.predict(&cands).unwrap());
    let mut tampered = model.checkpoint();
    tampered.config.train.iterations += 1;
    assert!(DklModel::from_checkpoint(tampered).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn variances_are_non_negative(seed in 0u64..1000, n in 2usize..12) {
        let (model, mut r) = random_model(seed, small_config(), n);
        let mut cands = random_inputs(&mut r, 5, 40);
        cands.extend(model.train_inputs().iter().cloned());
        let p = model.predict(&cands).unwrap();
        prop_assert!(p.variances.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mean_reproduces_targets_when_noise_is_tiny(seed in 0u64..1000) {
        let (mut model, _) = random_model(seed, small_config(), 6);
        let mut h = model.hyperparams();
        h.noise_variance = 1e-5;
        h.lengthscale = 1e-3;
        model.set_hyperparams(h).unwrap();
        let p = model.predict(model.train_inputs()).unwrap();
        let (_, sd) = model.standardization();
        for (m, y) in p.means.iter().zip(model.train_targets()) {
            prop_assert!((m - y).abs() < 1e-3 * sd.max(1.0));
        }
    }
}
