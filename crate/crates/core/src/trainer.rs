//! Training loop and test metrics.

use std::time::Instant;

use crate::gpgen::{EpisodeBatch, EpisodeGenerator, Episode, EqKernelSpec, ProtocolConfig};
use crate::npmodels::{forward, BatchInputs, GaussianPrediction, Model, ModelConfig};
use crate::numkit::{gaussian_nll_point, AdamState, BatchStats, Matrix, Mode, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub protocol: ProtocolConfig,
    pub kernel: EqKernelSpec,
    pub lr: f64,
    /// Held-out evaluation period in batches; 0 disables periodic checks.
    pub eval_every: usize,
    pub holdout_episodes: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, protocol: ProtocolConfig) -> Self {
        TrainConfig {
            model,
            protocol,
            kernel: EqKernelSpec::default(),
            lr: 1e-3,
            eval_every: 2_000,
            holdout_episodes: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.protocol.validate()?;
        self.kernel.validate()?;
        if self.protocol.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean NLL over every target point.
    pub nll_per_point: f64,
    /// Mean over episodes of the summed target NLL.
    pub nll_per_episode: f64,
    pub mse: f64,
    pub episode_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Training loss of every batch, by batch index.
    pub loss_curve: Vec<f64>,
    /// `(batch index, held-out metrics)` at each evaluation point.
    pub holdout: Vec<(usize, Metrics)>,
    pub final_metrics: Metrics,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// Relative drop of the trailing `window`-batch mean loss against the
    /// leading one.
    pub fn moving_average_drop(&self, window: usize) -> f64 {
        let n = self.loss_curve.len();
        let w = window.min(n / 2).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let first = mean(&self.loss_curve[..w]);
        let last = mean(&self.loss_curve[n - w..]);
        (first - last) / first.abs()
    }
}

/// Anything that produces a Gaussian per target.
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<GaussianPrediction>;
}

impl Predictor for Model {
    fn predict(&self, episode: &Episode) -> Result<GaussianPrediction> {
        Model::predict(self, episode)
    }
}

/// The GP prior marginal: μ = 0, σ = 1 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorPredictor;

impl Predictor for PriorPredictor {
    fn predict(&self, episode: &Episode) -> Result<GaussianPrediction> {
        let n = episode.num_target();
        Ok(GaussianPrediction {
            mu: vec![0.0; n],
            sigma: vec![1.0; n],
        })
    }
}

/// Mean over episodes of the per-episode mean target NLL, with batch-norm in
/// train mode. Returns the loss handle and the BN batch statistics.
pub fn batch_loss(
    tape: &mut Tape,
    episodes: &[Episode],
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<(String, BatchStats)>)> {
    let inputs = BatchInputs::new(episodes, cfg)?;
    let pass = forward(tape, &inputs, store, cfg, Mode::Train)?;
    let e = inputs.num_episodes() as f64;
    let mut y = Vec::with_capacity(inputs.x_t.len());
    let mut weights = Vec::with_capacity(inputs.x_t.len());
    for (ep, seg) in episodes.iter().zip(&inputs.target_segments) {
        y.extend_from_slice(&ep.y_t);
        weights.extend(std::iter::repeat_n(1.0 / (e * seg.len() as f64), seg.len()));
    }
    let y = tape.constant(Matrix::column(&y))?;
    let loss = tape.gaussian_nll_weighted(y, pass.mu, pass.sigma, weights)?;
    Ok((loss, pass.batch_stats))
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &EpisodeBatch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, stats) = batch_loss(&mut tape, &batch.episodes, &model.params, &model.config)?;
    let value = tape.value(loss)[(0, 0)];
    model.params.zero_grads();
    tape.backward(loss, &mut model.params)?;
    adam.step(&mut model.params)?;
    model.params.apply_batch_stats(&stats)?;
    Ok(value)
}

pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, test_set: &[Episode]) -> Result<Metrics> {
    if test_set.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty test set".into()));
    }
    let mut nll_total = 0.0;
    let mut se_total = 0.0;
    let mut points = 0usize;
    for ep in test_set {
        let p = predictor.predict(ep)?;
        let mut ep_nll = 0.0;
        for ((y, mu), sigma) in ep.y_t.iter().zip(&p.mu).zip(&p.sigma) {
            ep_nll += gaussian_nll_point(*y, *mu, *sigma);
            se_total += (y - mu) * (y - mu);
        }
        nll_total += ep_nll;
        points += ep.num_target();
    }
    Ok(Metrics {
        nll_per_point: nll_total / points as f64,
        nll_per_episode: nll_total / test_set.len() as f64,
        mse: se_total / points as f64,
        episode_count: test_set.len(),
    })
}

/// Runs the full protocol. `on_progress` is called after every batch with
/// the batch index, its loss and, at evaluation points, the held-out metrics.
pub fn train_with_progress(
    cfg: &TrainConfig,
    mut on_progress: impl FnMut(usize, f64, Option<&Metrics>),
) -> Result<(TrainReport, Model)> {
    cfg.validate()?;
    let started = Instant::now();
    let generator = EpisodeGenerator::new(cfg.protocol.clone(), cfg.kernel)?;
    let holdout: Vec<Episode> = (0..cfg.holdout_episodes)
        .map(|i| generator.holdout_episode(i))
        .collect::<Result<_>>()?;
    let mut model = Model::new(cfg.model)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut loss_curve = Vec::with_capacity(cfg.protocol.train_batches);
    let mut holdout_metrics = Vec::new();

    for b in 0..cfg.protocol.train_batches {
        let batch = generator.train_batch(b)?;
        let loss = match train_step(&mut model, &mut adam, &batch) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                return Err(Error::NonFiniteLoss {
                    batch: b,
                    norms: model.params.norm_summary(),
                })
            }
            Err(e) => return Err(e),
        };
        loss_curve.push(loss);
        let last = b + 1 == cfg.protocol.train_batches;
        if cfg.eval_every > 0 && ((b + 1) % cfg.eval_every == 0 || last) && !holdout.is_empty() {
            let m = evaluate(&model, &holdout)?;
            holdout_metrics.push((b, m));
            on_progress(b, loss, Some(&m));
        } else {
            on_progress(b, loss, None);
        }
    }

    let final_metrics = match holdout_metrics.last() {
        Some((_, m)) => *m,
        None if !holdout.is_empty() => evaluate(&model, &holdout)?,
        None => Metrics {
            nll_per_point: f64::NAN,
            nll_per_episode: f64::NAN,
            mse: f64::NAN,
            episode_count: 0,
        },
    };
    let report = TrainReport {
        config: cfg.clone(),
        loss_curve,
        holdout: holdout_metrics,
        final_metrics,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((report, model))
}

pub fn train(cfg: &TrainConfig) -> Result<(TrainReport, Model)> {
    train_with_progress(cfg, |_, _, _| {})
}
