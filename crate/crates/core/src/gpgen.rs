//! Episode generation from a zero-mean Gaussian process with an
//! exponentiated quadratic kernel.
//!
//! Every batch and episode is a pure function of `(master_seed, index)`:
//! each one gets its own ChaCha stream keyed by [`derive_seed`], so indices
//! may be generated in any order.

use std::sync::OnceLock;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numkit::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqKernelSpec {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl Default for EqKernelSpec {
    fn default() -> Self {
        EqKernelSpec {
            length_scale: 0.4,
            signal_variance: 1.0,
            jitter: 1e-6,
        }
    }
}

impl EqKernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) || !(self.signal_variance > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config(format!("invalid kernel spec {self:?}")));
        }
        Ok(())
    }
}

/// One function instance split into context and target points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub x_c: Vec<f64>,
    pub y_c: Vec<f64>,
    pub x_t: Vec<f64>,
    pub y_t: Vec<f64>,
}

impl Episode {
    pub fn num_context(&self) -> usize {
        self.x_c.len()
    }

    pub fn num_target(&self) -> usize {
        self.x_t.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_c.len() != self.y_c.len() || self.x_t.len() != self.y_t.len() {
            return Err(Error::dim(
                "Episode",
                "|x_c| = |y_c| and |x_t| = |y_t|",
                format!(
                    "{}/{} context, {}/{} target",
                    self.x_c.len(),
                    self.y_c.len(),
                    self.x_t.len(),
                    self.y_t.len()
                ),
            ));
        }
        if self.x_c.is_empty() || self.x_t.is_empty() {
            return Err(Error::dim(
                "Episode",
                "at least one context and one target",
                format!("{} context, {} target", self.x_c.len(), self.x_t.len()),
            ));
        }
        let all = [&self.x_c, &self.y_c, &self.x_t, &self.y_t];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { op: "Episode" });
        }
        Ok(())
    }
}

/// Episodes sharing one `(N_c, N_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub num_context: usize,
    pub num_target: usize,
    pub episodes: Vec<Episode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub interval: (f64, f64),
    /// Inclusive range of context counts.
    pub context_range: (usize, usize),
    /// Inclusive range of training target counts.
    pub target_range: (usize, usize),
    pub batch_size: usize,
    pub train_batches: usize,
    pub test_grid_size: usize,
    pub test_episodes: usize,
    pub master_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig::desk_scale(0)
    }
}

impl ProtocolConfig {
    pub fn desk_scale(master_seed: u64) -> Self {
        ProtocolConfig {
            interval: (-2.0, 2.0),
            context_range: (3, 10),
            target_range: (2, 10),
            batch_size: 64,
            train_batches: 20_000,
            test_grid_size: 400,
            test_episodes: 1_000,
            master_seed,
        }
    }

    pub fn full_scale(master_seed: u64) -> Self {
        ProtocolConfig {
            train_batches: 200_000,
            test_episodes: 10_000,
            ..ProtocolConfig::desk_scale(master_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.interval;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return bad("interval must be finite with lo < hi");
        }
        if self.context_range.0 == 0 || self.context_range.0 > self.context_range.1 {
            return bad("context range must be nonempty and start at 1 or more");
        }
        if self.target_range.0 == 0 || self.target_range.0 > self.target_range.1 {
            return bad("target range must be nonempty and start at 1 or more");
        }
        if self.test_grid_size < self.context_range.1 + 1 {
            return bad("test grid must exceed the largest context count");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

/// Stream domains keep train, test, held-out and initialization draws
/// disjoint for the same master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedDomain {
    Train = 0x7472_6169_6e00_0001,
    Test = 0x7465_7374_0000_0002,
    Holdout = 0x686f_6c64_0000_0003,
    Init = 0x696e_6974_0000_0004,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stream for `(master, domain, index)`: three chained
/// splitmix64 rounds.
pub fn derive_seed(master: u64, domain: SeedDomain, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ domain as u64) ^ index)
}

pub fn stream(master: u64, domain: SeedDomain, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}

pub fn eq_kernel(x1: f64, x2: f64, spec: &EqKernelSpec) -> f64 {
    let d = x1 - x2;
    spec.signal_variance * (-d * d / (2.0 * spec.length_scale * spec.length_scale)).exp()
}

pub fn kernel_matrix(xs: &[f64], spec: &EqKernelSpec) -> Matrix {
    let n = xs.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = eq_kernel(xs[i], xs[i], spec) + spec.jitter;
        for j in 0..i {
            let v = eq_kernel(xs[i], xs[j], spec);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Lower-triangular `L` with `L·Lᵀ = K` (Cholesky–Banachiewicz).
pub fn cholesky(k: &Matrix) -> Result<Matrix> {
    let n = k.rows();
    if k.cols() != n {
        return Err(Error::dim("cholesky", "square matrix", format!("{:?}", k.shape())));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = k[(i, j)];
            let (li, lj) = (l.row(i), l.row(j));
            for p in 0..j {
                s -= li[p] * lj[p];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Cholesky factor of the kernel matrix; on failure retries once with the
/// jitter raised by 100×.
pub fn kernel_factor(xs: &[f64], spec: &EqKernelSpec) -> Result<Matrix> {
    match cholesky(&kernel_matrix(xs, spec)) {
        Ok(l) => Ok(l),
        Err(Error::NotPositiveDefinite { .. }) => {
            let retry = EqKernelSpec {
                jitter: spec.jitter * 100.0,
                ..*spec
            };
            cholesky(&kernel_matrix(xs, &retry))
        }
        Err(e) => Err(e),
    }
}

fn apply_factor<R: Rng + ?Sized>(l: &Matrix, rng: &mut R) -> Vec<f64> {
    let n = l.rows();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|i| l.row(i)[..=i].iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect()
}

/// One joint draw `y = L·z` of the GP at `xs`.
pub fn sample_function_values<R: Rng + ?Sized>(
    xs: &[f64],
    spec: &EqKernelSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "sample_function_values",
        });
    }
    let l = kernel_factor(xs, spec)?;
    Ok(apply_factor(&l, rng))
}

/// `n` evenly spaced points covering `[lo, hi]`, both ends included.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            let mut g: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
            g[n - 1] = hi;
            g
        }
    }
}

/// Train-batch and test-episode generator for one protocol and kernel.
/// Caches the Cholesky factor of the test grid, which is shared by every
/// test episode.
#[derive(Debug)]
pub struct EpisodeGenerator {
    protocol: ProtocolConfig,
    kernel: EqKernelSpec,
    grid_factor: OnceLock<Result<(Vec<f64>, Matrix)>>,
}

impl EpisodeGenerator {
    pub fn new(protocol: ProtocolConfig, kernel: EqKernelSpec) -> Result<Self> {
        protocol.validate()?;
        kernel.validate()?;
        Ok(EpisodeGenerator {
            protocol,
            kernel,
            grid_factor: OnceLock::new(),
        })
    }

    pub fn protocol(&self) -> &ProtocolConfig {
        &self.protocol
    }

    pub fn kernel(&self) -> &EqKernelSpec {
        &self.kernel
    }

    pub fn train_batch(&self, batch_index: usize) -> Result<EpisodeBatch> {
        let p = &self.protocol;
        if batch_index >= p.train_batches {
            return Err(Error::IndexOutOfRange {
                what: "train batch",
                index: batch_index,
                limit: p.train_batches,
            });
        }
        let mut rng = stream(p.master_seed, SeedDomain::Train, batch_index as u64);
        self.random_batch(&mut rng)
    }

    /// A training-style batch from an arbitrary stream (used for held-out
    /// checks and tests).
    pub fn random_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EpisodeBatch> {
        let p = &self.protocol;
        let nc = rng.random_range(p.context_range.0..=p.context_range.1);
        let nt = rng.random_range(p.target_range.0..=p.target_range.1);
        let (lo, hi) = p.interval;
        let mut episodes = Vec::with_capacity(p.batch_size);
        for _ in 0..p.batch_size {
            let xs: Vec<f64> = (0..nc + nt).map(|_| rng.random_range(lo..=hi)).collect();
            let ys = sample_function_values(&xs, &self.kernel, rng)?;
            episodes.push(Episode {
                x_c: xs[..nc].to_vec(),
                y_c: ys[..nc].to_vec(),
                x_t: xs[nc..].to_vec(),
                y_t: ys[nc..].to_vec(),
            });
        }
        Ok(EpisodeBatch {
            num_context: nc,
            num_target: nt,
            episodes,
        })
    }

    fn grid_factor(&self) -> Result<&(Vec<f64>, Matrix)> {
        self.grid_factor
            .get_or_init(|| {
                let (lo, hi) = self.protocol.interval;
                let xs = grid(lo, hi, self.protocol.test_grid_size);
                let l = kernel_factor(&xs, &self.kernel)?;
                Ok((xs, l))
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn test_episode(&self, episode_index: usize) -> Result<Episode> {
        let p = &self.protocol;
        if episode_index >= p.test_episodes {
            return Err(Error::IndexOutOfRange {
                what: "test episode",
                index: episode_index,
                limit: p.test_episodes,
            });
        }
        let rng = stream(p.master_seed, SeedDomain::Test, episode_index as u64);
        self.grid_episode(rng)
    }

    /// Grid episode from the held-out stream, disjoint from the test set.
    pub fn holdout_episode(&self, index: usize) -> Result<Episode> {
        let rng = stream(self.protocol.master_seed, SeedDomain::Holdout, index as u64);
        self.grid_episode(rng)
    }

    fn grid_episode(&self, mut rng: ChaCha8Rng) -> Result<Episode> {
        let p = &self.protocol;
        let (xs, l) = self.grid_factor()?;
        let ys = apply_factor(l, &mut rng);
        let nc = rng.random_range(p.context_range.0..=p.context_range.1);
        let mut is_context = vec![false; xs.len()];
        for i in index::sample(&mut rng, xs.len(), nc) {
            is_context[i] = true;
        }
        let mut ep = Episode {
            x_c: Vec::with_capacity(nc),
            y_c: Vec::with_capacity(nc),
            x_t: Vec::with_capacity(xs.len() - nc),
            y_t: Vec::with_capacity(xs.len() - nc),
        };
        for (i, &c) in is_context.iter().enumerate() {
            if c {
                ep.x_c.push(xs[i]);
                ep.y_c.push(ys[i]);
            } else {
                ep.x_t.push(xs[i]);
                ep.y_t.push(ys[i]);
            }
        }
        Ok(ep)
    }

    pub fn test_set(&self) -> Result<Vec<Episode>> {
        (0..self.protocol.test_episodes)
            .map(|i| self.test_episode(i))
            .collect()
    }
}

/// Batch `batch_index` of the training stream. Prefer a shared
/// [`EpisodeGenerator`] in loops.
pub fn make_train_batch(
    protocol: &ProtocolConfig,
    spec: &EqKernelSpec,
    batch_index: usize,
) -> Result<EpisodeBatch> {
    EpisodeGenerator::new(protocol.clone(), *spec)?.train_batch(batch_index)
}

/// Test episode `episode_index`. Factorizes the grid kernel on every call;
/// prefer [`EpisodeGenerator::test_episode`] in loops.
pub fn make_test_episode(
    protocol: &ProtocolConfig,
    spec: &EqKernelSpec,
    episode_index: usize,
) -> Result<Episode> {
    EpisodeGenerator::new(protocol.clone(), *spec)?.test_episode(episode_index)
}
