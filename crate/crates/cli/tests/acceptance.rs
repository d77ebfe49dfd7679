//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Criteria 1-3 and the loss-decrease part of 8 train the three compared
//! models on three seeds at desk scale (2×10^4 batches each), which takes a
//! few minutes in an optimized build.

use std::time::Instant;

use cgnp_cli::commands::{self, mean_std, CompareRun, Comparison};
use cgnp_cli::RunConfig;
use cgnp_core::gpgen::{grid, sample_function_values, Episode, EpisodeGenerator, EqKernelSpec, ProtocolConfig};
use cgnp_core::npmodels::{cnp_params_from_cgnp, forward, init_params, BatchInputs, Model, ModelConfig, ModelKind};
use cgnp_core::numkit::{Matrix, Mode, ParamStore, Tape, Var};
use cgnp_core::rgraph::build_radius_graph;
use cgnp_core::trainer::batch_loss;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_params(store: &ParamStore, rng: &mut ChaCha8Rng, spread: f64) -> ParamStore {
    let mut s = store.clone();
    for leaf in s.leaves_mut() {
        for v in leaf.value.data_mut() {
            *v += rng.random_range(-spread..spread);
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
    let nc = rng.random_range(3..=10);
    let nt = rng.random_range(2..=10);
    let mut draw = |n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    Episode {
        x_c: draw(nc),
        y_c: draw(nc),
        x_t: draw(nt),
        y_t: draw(nt),
    }
}

fn group(c: &Comparison, kind: ModelKind, radius: f64) -> Vec<&CompareRun> {
    c.runs
        .iter()
        .filter(|r| r.config.kind == kind && (kind == ModelKind::Cnp || r.config.radius == radius))
        .collect()
}

fn nlls(runs: &[&CompareRun]) -> Vec<f64> {
    runs.iter().map(|r| r.metrics.nll_per_point).collect()
}

fn criterion_1(c: &Comparison) -> Outcome {
    let (cnp, _) = mean_std(&nlls(&group(c, ModelKind::Cnp, 0.0)));
    let (g7, _) = mean_std(&nlls(&group(c, ModelKind::Cgnp, 0.7)));
    outcome(g7 < cnp, format!("mean NLL/point CGNP(0.7) {g7:.4} vs CNP {cnp:.4}"))
}

fn criterion_2(c: &Comparison) -> Outcome {
    let (cnp, sd) = mean_std(&nlls(&group(c, ModelKind::Cnp, 0.0)));
    let (g0, _) = mean_std(&nlls(&group(c, ModelKind::Cgnp, 0.0)));
    outcome(
        (g0 - cnp).abs() <= 2.0 * sd,
        format!("CGNP(0) {g0:.4}, CNP {cnp:.4} ± {sd:.4}"),
    )
}

fn criterion_3(c: &Comparison) -> Outcome {
    let worst = c.runs.iter().map(|r| r.metrics.mse).fold(f64::MIN, f64::max);
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = c.runs.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    };
    let mut lowest = 0;
    for s in &seeds {
        let at = |kind, radius| {
            c.runs
                .iter()
                .find(|r| r.seed == *s && r.config.kind == kind && (kind == ModelKind::Cnp || r.config.radius == radius))
                .unwrap()
                .metrics
                .mse
        };
        let g7 = at(ModelKind::Cgnp, 0.7);
        if g7 < at(ModelKind::Cnp, 0.0) && g7 < at(ModelKind::Cgnp, 0.0) {
            lowest += 1;
        }
    }
    outcome(
        worst < 0.8 && lowest * 3 >= seeds.len() * 2,
        format!("max MSE {worst:.4}; CGNP(0.7) lowest in {lowest}/{} seeds", seeds.len()),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig::cgnp(8, 0.0, 4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let params = random_params(&init_params(&cfg).unwrap(), &mut rng, 0.5);
        let graph = Model { config: cfg, params: params.clone() };
        let plain = Model {
            config: ModelConfig::cnp(8, 4),
            params: cnp_params_from_cgnp(&params, 8).unwrap(),
        };
        let ep = random_episode(&mut rng);
        let a = graph.predict(&ep).unwrap();
        let b = plain.predict(&ep).unwrap();
        for i in 0..ep.num_target() {
            worst = worst.max(rel(a.mu[i], b.mu[i])).max(rel(a.sigma[i], b.sigma[i]));
        }
    }
    outcome(worst <= 1e-9, format!("worst relative difference {worst:e} over 100 episodes"))
}

/// Training loss of `episodes` as one batch (train-mode batch norm), or the
/// summed per-episode NLL with batch norm in eval mode.
fn loss_var(tape: &mut Tape, cfg: &ModelConfig, store: &ParamStore, episodes: &[Episode], mode: Mode) -> Var {
    match mode {
        Mode::Train => batch_loss(tape, episodes, store, cfg).unwrap().0,
        Mode::Eval => {
            let inputs = BatchInputs::new(episodes, cfg).unwrap();
            let pass = forward(tape, &inputs, store, cfg, Mode::Eval).unwrap();
            let y: Vec<f64> = episodes.iter().flat_map(|e| e.y_t.iter().copied()).collect();
            let y = tape.constant(Matrix::column(&y)).unwrap();
            let w = vec![1.0; inputs.x_t.len()];
            tape.gaussian_nll_weighted(y, pass.mu, pass.sigma, w).unwrap()
        }
    }
}

/// Loss value and ReLU sign pattern.
fn loss_value(cfg: &ModelConfig, store: &ParamStore, episodes: &[Episode], mode: Mode) -> (f64, Vec<bool>) {
    let mut t = Tape::new();
    let l = loss_var(&mut t, cfg, store, episodes, mode);
    (t.value(l)[(0, 0)], t.relu_pattern())
}

fn criterion_5() -> Outcome {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gen = EpisodeGenerator::new(ProtocolConfig::desk_scale(5), EqKernelSpec::default()).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut kinks = 0usize;
    let mut at = String::new();
    for cfg in [ModelConfig::cnp(8, 5), ModelConfig::cgnp(8, 0.7, 5)] {
        let store = random_params(&init_params(&cfg).unwrap(), &mut rng, 0.2);
        let mut episodes = gen.random_batch(&mut rng).unwrap().episodes;
        episodes.truncate(10);
        let mut cases: Vec<(Vec<Episode>, Mode)> = vec![(episodes.clone(), Mode::Train)];
        cases.extend(episodes.iter().map(|e| (vec![e.clone()], Mode::Eval)));
        for (eps, mode) in cases {
            let mut analytic = store.clone();
            let mut tape = Tape::new();
            let loss = loss_var(&mut tape, &cfg, &analytic, &eps, mode);
            tape.backward(loss, &mut analytic).unwrap();
            let pattern = tape.relu_pattern();
            for leaf in analytic.leaves() {
                for k in 0..leaf.value.data().len() {
                    let mut p = store.clone();
                    p.leaf_mut(&leaf.name).unwrap().value.data_mut()[k] += H;
                    let mut m = store.clone();
                    m.leaf_mut(&leaf.name).unwrap().value.data_mut()[k] -= H;
                    let (lp, pp) = loss_value(&cfg, &p, &eps, mode);
                    let (lm, pm) = loss_value(&cfg, &m, &eps, mode);
                    if pp != pattern || pm != pattern {
                        // A ReLU switches inside [θ-h, θ+h]: the difference
                        // quotient averages two slopes and is no oracle here.
                        kinks += 1;
                        continue;
                    }
                    let fd = (lp - lm) / (2.0 * H);
                    let an = leaf.grad.data()[k];
                    let ratio = (fd - an).abs() / (1e-6 + 1e-3 * fd.abs());
                    if ratio > worst {
                        worst = ratio;
                        at = format!("{:?}/{mode:?} {}[{k}] analytic {an:e} fd {fd:e}", cfg.kind, leaf.name);
                    }
                    checked += 1;
                }
            }
        }
    }
    // Kink crossings must stay rare, or the check says little.
    outcome(
        worst <= 1.0 && kinks * 100 <= checked,
        format!(
            "{checked} partials ({kinks} skipped at ReLU kinks), worst |fd-an|/(atol+rtol|fd|) = {worst:.3} at {at}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let spec = EqKernelSpec::default();
    let xs = grid(-2.0, 2.0, 10);
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
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
    let mut mean_err = 0.0f64;
    let mut cov_err = 0.0f64;
    for i in 0..10 {
        mean_err = mean_err.max((sum[i] / nf).abs());
        for j in 0..10 {
            let cov = outer[i * 10 + j] / nf - (sum[i] / nf) * (sum[j] / nf);
            let d = xs[i] - xs[j];
            cov_err = cov_err.max((cov - (-d * d / 0.32).exp()).abs());
        }
    }
    outcome(
        mean_err <= 0.05 && cov_err <= 0.05,
        format!("max |mean| {mean_err:.4}, max |cov - k| {cov_err:.4}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut nest_failures = 0;
    for _ in 0..200 {
        let coords = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..=12);
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        rng.random_range(-20i32..=20) as f64 * 0.1
                    } else {
                        rng.random_range(-2.0..2.0)
                    }
                })
                .collect::<Vec<f64>>()
        };
        let xin = coords(&mut rng);
        let xout = coords(&mut rng);
        let mut prev: Option<Vec<Vec<usize>>> = None;
        for rho in [0.0, 0.3, 0.7, 5.0] {
            let g = build_radius_graph(&xin, &xout, rho).unwrap();
            let oracle: Vec<Vec<usize>> = xout
                .iter()
                .map(|&o| (0..xin.len()).filter(|&i| (xin[i] - o).abs() <= rho).collect())
                .collect();
            if g.neighbors != oracle {
                mismatches += 1;
            }
            if let Some(p) = &prev {
                if p.iter().zip(&g.neighbors).any(|(s, b)| s.iter().any(|i| !b.contains(i))) {
                    nest_failures += 1;
                }
            }
            prev = Some(g.neighbors);
        }
    }
    outcome(
        mismatches == 0 && nest_failures == 0,
        format!("200 trials: {mismatches} oracle mismatches, {nest_failures} nesting failures"),
    )
}

fn criterion_8(c: &Comparison) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut inv_worst = 0.0f64;
    for cfg in [ModelConfig::cnp(8, 8), ModelConfig::cgnp(8, 0.7, 8)] {
        for _ in 0..50 {
            let model = Model {
                config: cfg,
                params: random_params(&init_params(&cfg).unwrap(), &mut rng, 0.5),
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
                inv_worst = inv_worst.max(rel(a.mu[i], b.mu[i])).max(rel(a.sigma[i], b.sigma[i]));
            }
        }
    }

    let gen = EpisodeGenerator::new(ProtocolConfig::desk_scale(8), EqKernelSpec::default()).unwrap();
    let mut sigma_min = f64::INFINITY;
    let mut predictions = 0usize;
    let mut idx = 0;
    while predictions < 100_000 {
        let cfg = if idx % 2 == 0 {
            ModelConfig::cnp(8, idx as u64)
        } else {
            ModelConfig::cgnp(8, 0.7, idx as u64)
        };
        let params = random_params(&init_params(&cfg).unwrap(), &mut rng, 2.0);
        let p = Model { config: cfg, params }.predict(&gen.holdout_episode(idx).unwrap()).unwrap();
        sigma_min = p.sigma.iter().copied().fold(sigma_min, f64::min);
        predictions += p.sigma.len();
        idx += 1;
    }
    let drops: Vec<f64> = c.runs.iter().map(|r| r.loss_drop()).collect();
    let min_drop = drops.iter().copied().fold(f64::INFINITY, f64::min);
    let drop_list = c
        .runs
        .iter()
        .map(|r| {
            let rho = cgnp_cli::formats::rho_field(&r.config);
            format!("{}({rho})/s{}={:.3}", r.config.kind.as_str(), r.seed, r.loss_drop())
        })
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        inv_worst <= 1e-6 && sigma_min >= 0.1 && min_drop >= 0.2,
        format!(
            "permutation worst rel {inv_worst:e}; min sigma {sigma_min:.4} over {predictions} predictions; \
             loss drops {drop_list}"
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, Outcome)> = vec![
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7()),
    ];

    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("", &[]).unwrap();
    let table = dir.path().join("compare.csv");
    let comparison = commands::compare(&cfg, 3, &table, |line| eprintln!("  {line}")).unwrap();
    eprintln!("{}", comparison.table);

    results.push((1, criterion_1(&comparison)));
    results.push((2, criterion_2(&comparison)));
    results.push((3, criterion_3(&comparison)));
    results.push((8, criterion_8(&comparison)));
    results.sort_by_key(|(n, _)| *n);

    let mut failed = 0;
    for (n, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("criterion {n}: {tag} ({})", o.detail);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
