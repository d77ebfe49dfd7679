//! CNP and CGNP encoder/decoder stacks.
//!
//! Both kinds share one layer schema. With latent width `D`:
//!
//! | block  | CNP                       | CGNP                                          |
//! |--------|---------------------------|-----------------------------------------------|
//! | enc1   | affine 2 → D, BN, ReLU    | conv (2+1) → D over context→context, BN, ReLU |
//! | enc2   | affine D → D, BN, ReLU    | conv (D+1) → D, BN, ReLU                      |
//! | enc3   | affine D → D, BN          | conv (D+1) → D, BN                            |
//! | pool   | mean over contexts        | mean over contexts                            |
//! | dec1   | affine (1+D) → D, BN, ReLU| conv over context→target: neighbours `h` (D+1), self term `[x_t, r]` (1+D); BN, ReLU |
//! | dec2   | affine D → 2              | affine D → 2                                  |
//!
//! Output column 0 is μ, column 1 goes through the bounded softplus to give σ.
//!
//! Weights of corresponding layers draw from the same per-name stream and
//! use the same bound, so a CGNP and a CNP with equal `init_seed` start
//! from corresponding weights (see [`cnp_params_from_cgnp`]).

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gpgen::{stream, Episode, SeedDomain};
use crate::numkit::{BatchStats, Matrix, Mode, ParamStore, Tape, Var};
use crate::rgraph::{bipartite_conv, build_radius_graph, segment_mean_pool, BipartiteGraph, ConvLayerParams};
use crate::{Error, Result};

pub const ENCODER_DEPTH: usize = 3;
pub const DECODER_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnp,
    Cgnp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnp => "cnp",
            ModelKind::Cgnp => "cgnp",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnp" => Ok(ModelKind::Cnp),
            "cgnp" => Ok(ModelKind::Cgnp),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub latent_dim: usize,
    /// Neighbourhood radius; ignored for CNP.
    pub radius: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn cnp(latent_dim: usize, init_seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Cnp,
            latent_dim,
            radius: 0.0,
            init_seed,
        }
    }

    pub fn cgnp(latent_dim: usize, radius: f64, init_seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Cgnp,
            latent_dim,
            radius,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.kind == ModelKind::Cgnp && !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be finite and ≥ 0, got {}", self.radius)));
        }
        Ok(())
    }
}

/// Per-target predictive distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// 64-bit FNV-1a, used to key per-parameter init streams by name.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Uniform(±√(3/fan_in)) weights, `fan_in` being the feature rows. A
/// relative-position row, when requested, is drawn last from the same
/// stream.
fn init_weight(cfg: &ModelConfig, stream_key: &str, fan_in: usize, fan_out: usize, position_row: bool) -> Matrix {
    let mut rng = stream(cfg.init_seed, SeedDomain::Init, name_key(stream_key));
    let bound = (3.0 / fan_in as f64).sqrt();
    let rows = fan_in + usize::from(position_row);
    let data = (0..rows * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, fan_out, data).expect("shape is consistent by construction")
}

pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let graph = cfg.kind == ModelKind::Cgnp;
    let mut store = ParamStore::new();
    let enc_in = [2, d, d];
    for (k, &fan_in) in enc_in.iter().enumerate() {
        let name = format!("enc{}", k + 1);
        store.insert(format!("{name}.w"), init_weight(cfg, &format!("{name}.w"), fan_in, d, graph));
        store.insert(format!("{name}.b"), Matrix::zeros(1, d));
        store.insert_batch_norm(format!("{name}.bn"), d);
    }
    match cfg.kind {
        ModelKind::Cnp => {
            store.insert("dec1.w", init_weight(cfg, "dec1.w", 1 + d, d, false));
        }
        ModelKind::Cgnp => {
            store.insert("dec1.w_self", init_weight(cfg, "dec1.w", 1 + d, d, false));
            store.insert("dec1.w_nbr", init_weight(cfg, "dec1.w_nbr", d, d, true));
        }
    }
    store.insert("dec1.b", Matrix::zeros(1, d));
    store.insert_batch_norm("dec1.bn", d);
    store.insert("dec2.w", init_weight(cfg, "dec2.w", d, 2, false));
    store.insert("dec2.b", Matrix::zeros(1, 2));
    Ok(store)
}

/// Maps CGNP parameters onto the CNP layout: relative-position rows are
/// dropped, `dec1.w_self` becomes `dec1.w`, and `dec1.w_nbr` is discarded.
pub fn cnp_params_from_cgnp(cgnp: &ParamStore, latent_dim: usize) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for k in 1..=ENCODER_DEPTH {
        let name = format!("enc{k}");
        let w = cgnp.value(&format!("{name}.w"))?;
        let rows = w.rows() - 1;
        let kept = Matrix::from_vec(rows, w.cols(), w.data()[..rows * w.cols()].to_vec())?;
        out.insert(format!("{name}.w"), kept);
        out.insert(format!("{name}.b"), cgnp.value(&format!("{name}.b"))?.clone());
    }
    out.insert("dec1.w", cgnp.value("dec1.w_self")?.clone());
    for name in ["dec1.b", "dec2.w", "dec2.b"] {
        out.insert(name, cgnp.value(name)?.clone());
    }
    for bn in ["enc1.bn", "enc2.bn", "enc3.bn", "dec1.bn"] {
        out.insert_batch_norm(bn, latent_dim);
        for part in ["gamma", "beta"] {
            let n = format!("{bn}.{part}");
            out.leaf_mut(&n)?.value = cgnp.value(&n)?.clone();
        }
        *out.batch_norm_mut(bn)? = cgnp.batch_norm(bn)?.clone();
    }
    Ok(out)
}

/// Episodes flattened into stacked rows, with the per-episode segments and
/// (for CGNP) the block-diagonal radius graphs.
pub struct BatchInputs {
    pub x_c: Vec<f64>,
    pub y_c: Vec<f64>,
    pub x_t: Vec<f64>,
    pub context_segments: Vec<Range<usize>>,
    pub target_segments: Vec<Range<usize>>,
    /// Episode index of every stacked target row.
    pub target_episode: Vec<usize>,
    pub context_graph: Option<Rc<BipartiteGraph>>,
    pub target_graph: Option<Rc<BipartiteGraph>>,
}

impl BatchInputs {
    pub fn new(episodes: &[Episode], cfg: &ModelConfig) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut b = BatchInputs {
            x_c: Vec::new(),
            y_c: Vec::new(),
            x_t: Vec::new(),
            context_segments: Vec::with_capacity(episodes.len()),
            target_segments: Vec::with_capacity(episodes.len()),
            target_episode: Vec::new(),
            context_graph: None,
            target_graph: None,
        };
        let mut cc = Vec::new();
        let mut ct = Vec::new();
        for (e, ep) in episodes.iter().enumerate() {
            ep.validate()?;
            let c0 = b.x_c.len();
            b.x_c.extend_from_slice(&ep.x_c);
            b.y_c.extend_from_slice(&ep.y_c);
            b.context_segments.push(c0..b.x_c.len());
            let t0 = b.x_t.len();
            b.x_t.extend_from_slice(&ep.x_t);
            b.target_segments.push(t0..b.x_t.len());
            b.target_episode.extend(std::iter::repeat_n(e, ep.num_target()));
            if cfg.kind == ModelKind::Cgnp {
                cc.push(build_radius_graph(&ep.x_c, &ep.x_c, cfg.radius)?);
                ct.push(build_radius_graph(&ep.x_c, &ep.x_t, cfg.radius)?);
            }
        }
        if cfg.kind == ModelKind::Cgnp {
            b.context_graph = Some(Rc::new(BipartiteGraph::disjoint_union(&cc)));
            b.target_graph = Some(Rc::new(BipartiteGraph::disjoint_union(&ct)));
        }
        Ok(b)
    }

    pub fn num_episodes(&self) -> usize {
        self.context_segments.len()
    }
}

/// Handles and side outputs of one forward pass.
pub struct ForwardPass {
    pub mu: Var,
    pub sigma: Var,
    /// Batch statistics of every BN layer (train mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
}

struct Ctx<'a> {
    store: &'a ParamStore,
    mode: Mode,
    stats: Vec<(String, BatchStats)>,
}

impl Ctx<'_> {
    fn bn(&mut self, tape: &mut Tape, x: Var, layer: &str) -> Result<Var> {
        let name = format!("{layer}.bn");
        let gamma = tape.param(self.store, &format!("{name}.gamma"))?;
        let beta = tape.param(self.store, &format!("{name}.beta"))?;
        let (y, stats) = tape.batch_norm(x, gamma, beta, self.store.batch_norm(&name)?, self.mode)?;
        if let Some(s) = stats {
            self.stats.push((name, s));
        }
        Ok(y)
    }
}

/// Encoded per-context features `h`, `N_c × D` stacked over the batch.
fn encode(tape: &mut Tape, inputs: &BatchInputs, cfg: &ModelConfig, ctx: &mut Ctx) -> Result<Var> {
    let mut rows = Vec::with_capacity(inputs.x_c.len() * 2);
    for (x, y) in inputs.x_c.iter().zip(&inputs.y_c) {
        rows.push(*x);
        rows.push(*y);
    }
    let mut h = tape.constant(Matrix::from_vec(inputs.x_c.len(), 2, rows)?)?;
    for k in 1..=ENCODER_DEPTH {
        let layer = format!("enc{k}");
        let w = tape.param(ctx.store, &format!("{layer}.w"))?;
        let b = tape.param(ctx.store, &format!("{layer}.b"))?;
        h = match cfg.kind {
            ModelKind::Cnp => tape.affine(h, w, b)?,
            ModelKind::Cgnp => {
                let graph = inputs.context_graph.clone().expect("CGNP batch has graphs");
                let params = ConvLayerParams {
                    w_nbr: w,
                    w_self: None,
                    bias: b,
                };
                bipartite_conv(tape, graph, h, None, params)?
            }
        };
        h = ctx.bn(tape, h, &layer)?;
        if k < ENCODER_DEPTH {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

fn decode(
    tape: &mut Tape,
    inputs: &BatchInputs,
    h: Var,
    r: Var,
    cfg: &ModelConfig,
    ctx: &mut Ctx,
) -> Result<(Var, Var)> {
    let r_t = tape.gather_rows(r, inputs.target_episode.clone())?;
    let x_t = tape.constant(Matrix::column(&inputs.x_t))?;
    let query = tape.concat_cols(x_t, r_t)?;
    let b = tape.param(ctx.store, "dec1.b")?;
    let a = match cfg.kind {
        ModelKind::Cnp => {
            let w = tape.param(ctx.store, "dec1.w")?;
            tape.affine(query, w, b)?
        }
        ModelKind::Cgnp => {
            let params = ConvLayerParams {
                w_nbr: tape.param(ctx.store, "dec1.w_nbr")?,
                w_self: Some(tape.param(ctx.store, "dec1.w_self")?),
                bias: b,
            };
            let graph = inputs.target_graph.clone().expect("CGNP batch has graphs");
            bipartite_conv(tape, graph, h, Some(query), params)?
        }
    };
    let a = ctx.bn(tape, a, "dec1")?;
    let a = tape.relu(a)?;
    let w2 = tape.param(ctx.store, "dec2.w")?;
    let b2 = tape.param(ctx.store, "dec2.b")?;
    let out = tape.affine(a, w2, b2)?;
    let mu = tape.column(out, 0)?;
    let raw = tape.column(out, 1)?;
    let sigma = tape.bounded_softplus(raw)?;
    Ok((mu, sigma))
}

/// Context encoder alone; returns `h` and any train-mode BN statistics.
pub fn encode_context(
    tape: &mut Tape,
    inputs: &BatchInputs,
    store: &ParamStore,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(Var, Vec<(String, BatchStats)>)> {
    let mut ctx = Ctx {
        store,
        mode,
        stats: Vec::new(),
    };
    let h = encode(tape, inputs, cfg, &mut ctx)?;
    Ok((h, ctx.stats))
}

/// Per-episode latent `r`: the mean of that episode's encoded contexts.
pub fn pool_latent(tape: &mut Tape, inputs: &BatchInputs, h: Var) -> Result<Var> {
    segment_mean_pool(tape, h, inputs.context_segments.clone())
}

/// Decoder alone, given the encoder output `h` and pooled latents `r`.
pub fn decode_targets(
    tape: &mut Tape,
    inputs: &BatchInputs,
    h: Var,
    r: Var,
    store: &ParamStore,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardPass> {
    let mut ctx = Ctx {
        store,
        mode,
        stats: Vec::new(),
    };
    let (mu, sigma) = decode(tape, inputs, h, r, cfg, &mut ctx)?;
    Ok(ForwardPass {
        mu,
        sigma,
        batch_stats: ctx.stats,
    })
}

/// Full pipeline over a batch. In train mode the BN layers pool statistics
/// across every point of every episode in `inputs`.
pub fn forward(
    tape: &mut Tape,
    inputs: &BatchInputs,
    store: &ParamStore,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardPass> {
    let mut ctx = Ctx {
        store,
        mode,
        stats: Vec::new(),
    };
    let h = encode(tape, inputs, cfg, &mut ctx)?;
    let r = pool_latent(tape, inputs, h)?;
    let (mu, sigma) = decode(tape, inputs, h, r, cfg, &mut ctx)?;
    Ok(ForwardPass {
        mu,
        sigma,
        batch_stats: ctx.stats,
    })
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Model {
            params: init_params(&config)?,
            config,
        })
    }

    /// Eval-mode prediction for one episode's targets.
    pub fn predict(&self, episode: &Episode) -> Result<GaussianPrediction> {
        let inputs = BatchInputs::new(std::slice::from_ref(episode), &self.config)?;
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &inputs, &self.params, &self.config, Mode::Eval)?;
        Ok(GaussianPrediction {
            mu: tape.value(pass.mu).data().to_vec(),
            sigma: tape.value(pass.sigma).data().to_vec(),
        })
    }
}
