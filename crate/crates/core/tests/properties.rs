//! Statistical and structural properties checked against independent
//! oracles: brute-force graphs, the analytic kernel, and reference models.

use cgnp_core::gpgen::{
    eq_kernel, grid, sample_function_values, EpisodeGenerator, Episode, EqKernelSpec, ProtocolConfig,
};
use cgnp_core::npmodels::{cnp_params_from_cgnp, init_params, Model, ModelConfig};
use cgnp_core::numkit::ParamStore;
use cgnp_core::rgraph::build_radius_graph;
use cgnp_core::trainer::{evaluate, PriorPredictor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(xin: &[f64], xout: &[f64], rho: f64) -> Vec<Vec<usize>> {
    xout.iter()
        .map(|&o| (0..xin.len()).filter(|&i| (xin[i] - o).abs() <= rho).collect())
        .collect()
}

fn coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                // Lattice values produce exact-distance ties at the radii.
                rng.random_range(-20i32..=20) as f64 * 0.1
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
        .collect()
}

#[test]
fn radius_graph_matches_brute_force_and_nests() {
    let radii = [0.0, 0.3, 0.7, 5.0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let nin = rng.random_range(0..=12);
        let nout = rng.random_range(0..=12);
        let xin = coords(&mut rng, nin);
        let xout = coords(&mut rng, nout);
        let mut prev: Option<Vec<Vec<usize>>> = None;
        for &rho in &radii {
            let g = build_radius_graph(&xin, &xout, rho).unwrap();
            let want = brute_force(&xin, &xout, rho);
            assert_eq!(g.neighbors, want, "rho {rho} in {xin:?} out {xout:?}");
            if let Some(p) = &prev {
                for (small, big) in p.iter().zip(&g.neighbors) {
                    assert!(small.iter().all(|i| big.contains(i)));
                }
            }
            prev = Some(g.neighbors);
        }
    }
}

#[test]
fn gp_samples_match_kernel_moments() {
    let spec = EqKernelSpec::default();
    let xs = grid(-2.0, 2.0, 10);
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sum = [0.0; 10];
    let mut outer = [0.0; 100];
    for _ in 0..n {
        let f = sample_function_values(&xs, &spec, &mut rng).unwrap();
        for i in 0..10 {
            sum[i] += f[i];
            for j in 0..10 {
                outer[i * 10 + j] += f[i] * f[j];
            }
        }
    }
    let nf = n as f64;
    for i in 0..10 {
        let mi = sum[i] / nf;
        assert!(mi.abs() <= 0.05, "mean[{i}] = {mi}");
        for j in 0..10 {
            let cov = outer[i * 10 + j] / nf - mi * (sum[j] / nf);
            // Analytic EQ covariance, written out rather than taken from the library.
            let d = xs[i] - xs[j];
            let want = (-d * d / (2.0 * 0.4 * 0.4)).exp();
            assert!((cov - want).abs() <= 0.05, "cov[{i},{j}] = {cov}, want {want}");
            assert!((eq_kernel(xs[i], xs[j], &spec) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn protocol_draws_always_factor() {
    let gen = EpisodeGenerator::new(ProtocolConfig::desk_scale(99), EqKernelSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut episodes = 0;
    while episodes < 10_000 {
        let b = gen.random_batch(&mut rng).unwrap();
        for ep in &b.episodes {
            ep.validate().unwrap();
        }
        episodes += b.episodes.len();
    }
}

fn random_params(store: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = store.clone();
    for leaf in s.leaves_mut() {
        for v in leaf.value.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let names: Vec<String> = s.batch_norms().map(|(n, _)| n.clone()).collect();
    for n in names {
        let bn = s.batch_norm_mut(&n).unwrap();
        for m in &mut bn.running_mean {
            *m = rng.random_range(-1.0..1.0);
        }
        for v in &mut bn.running_var {
            *v = rng.random_range(0.2..3.0);
        }
    }
    s
}

fn random_episode(rng: &mut ChaCha8Rng) -> Episode {
    let nc = rng.random_range(1..=12);
    let nt = rng.random_range(1..=15);
    let mut draw = |n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    Episode {
        x_c: draw(nc),
        y_c: draw(nc),
        x_t: draw(nt),
        y_t: draw(nt),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[test]
fn zero_radius_graph_model_equals_plain_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = ModelConfig::cgnp(8, 0.0, 5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let params = random_params(&init_params(&cfg).unwrap(), &mut rng);
        let graph = Model {
            config: cfg,
            params: params.clone(),
        };
        let plain = Model {
            config: ModelConfig::cnp(8, 5),
            params: cnp_params_from_cgnp(&params, 8).unwrap(),
        };
        let ep = random_episode(&mut rng);
        let a = graph.predict(&ep).unwrap();
        let b = plain.predict(&ep).unwrap();
        for i in 0..ep.num_target() {
            worst = worst.max(rel(a.mu[i], b.mu[i])).max(rel(a.sigma[i], b.sigma[i]));
        }
    }
    assert!(worst <= 1e-9, "worst relative difference {worst}");
}

#[test]
fn predictions_ignore_context_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for cfg in [ModelConfig::cnp(8, 1), ModelConfig::cgnp(8, 0.7, 1)] {
        for _ in 0..50 {
            let model = Model {
                config: cfg,
                params: random_params(&init_params(&cfg).unwrap(), &mut rng),
            };
            let ep = random_episode(&mut rng);
            let mut order: Vec<usize> = (0..ep.num_context()).collect();
            order.shuffle(&mut rng);
            let shuffled = Episode {
                x_c: order.iter().map(|&i| ep.x_c[i]).collect(),
                y_c: order.iter().map(|&i| ep.y_c[i]).collect(),
                ..ep.clone()
            };
            let a = model.predict(&ep).unwrap();
            let b = model.predict(&shuffled).unwrap();
            for i in 0..ep.num_target() {
                assert!(rel(a.mu[i], b.mu[i]) <= 1e-6, "{:?}", cfg.kind);
                assert!(rel(a.sigma[i], b.sigma[i]) <= 1e-6, "{:?}", cfg.kind);
            }
        }
    }
}

#[test]
fn sigma_never_drops_below_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let gen = EpisodeGenerator::new(ProtocolConfig::desk_scale(51), EqKernelSpec::default()).unwrap();
    let mut count = 0usize;
    let mut idx = 0;
    while count < 100_000 {
        let cfg = if idx % 2 == 0 {
            ModelConfig::cnp(8, idx as u64)
        } else {
            ModelConfig::cgnp(8, 0.7, idx as u64)
        };
        let mut params = random_params(&init_params(&cfg).unwrap(), &mut rng);
        // Push the raw scale output far negative on half the models.
        if idx % 4 < 2 {
            params.leaf_mut("dec2.b").unwrap().value[(0, 1)] = -40.0;
        }
        let model = Model { config: cfg, params };
        let ep = gen.holdout_episode(idx).unwrap();
        let p = model.predict(&ep).unwrap();
        assert!(p.sigma.iter().all(|s| s.is_finite() && *s >= 0.1));
        count += p.sigma.len();
        idx += 1;
    }
}

#[test]
fn prior_baseline_on_test_set() {
    let gen = EpisodeGenerator::new(ProtocolConfig::desk_scale(0), EqKernelSpec::default()).unwrap();
    let m = evaluate(&PriorPredictor, &gen.test_set().unwrap()).unwrap();
    assert!((m.mse - 1.0).abs() <= 0.05, "mse {}", m.mse);
    let want = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * m.mse;
    assert!((m.nll_per_point - want).abs() <= 1e-9);
    assert!((m.nll_per_point - 1.419).abs() <= 0.05);
}
