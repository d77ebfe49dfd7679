//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or named parameters copied out of a [`ParamStore`];
//! [`Tape::backward`] walks the record in reverse and accumulates
//! `∂loss/∂param` into the matching [`ParamLeaf`](super::ParamLeaf) gradients.
//!
//! Operations that live outside this module (the graph convolution, pooling)
//! plug in through [`BackwardRule`].

use std::f64::consts::PI;

use super::{BatchNormState, BatchStats, Matrix, ParamStore};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Backward rule for an operation defined outside the tape.
pub trait BackwardRule {
    /// Tape inputs, in the order [`BackwardRule::backward`] returns their
    /// gradients.
    fn inputs(&self) -> Vec<Var>;

    /// Gradients w.r.t. each input given the gradient of the output.
    fn backward(&self, tape: &Tape, grad_out: &Matrix) -> Result<Vec<Matrix>>;
}

enum Node {
    Constant,
    Param(String),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    BoundedSoftplus {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    GaussianNll {
        y: Var,
        mu: Var,
        sigma: Var,
        weights: Vec<f64>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Column {
        x: Var,
        col: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Custom(Box<dyn BackwardRule>),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Matrix>,
    nodes: Vec<Node>,
}

pub const SIGMA_FLOOR: f64 = 0.1;
const SIGMA_SCALE: f64 = 1.0 - SIGMA_FLOOR;

/// `ln(1 + eˢ)` without overflow for large `|s|`.
pub fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `0.1 + 0.9·softplus(s)`: the σ parameterization of every prediction head.
pub fn bounded_softplus(s: f64) -> f64 {
    SIGMA_FLOOR + SIGMA_SCALE * softplus(s)
}

/// Per-point Gaussian negative log-likelihood.
pub fn gaussian_nll_point(y: f64, mu: f64, sigma: f64) -> f64 {
    let r = y - mu;
    0.5 * (2.0 * PI * sigma * sigma).ln() + r * r / (2.0 * sigma * sigma)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// `input > 0` for every ReLU element on the tape, in recording order.
    /// Two recordings of the same graph with equal patterns lie on the same
    /// linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Node::Relu { x } = node {
                out.extend(self.value(*x).data().iter().map(|v| *v > 0.0));
            }
        }
        out
    }

    fn push(&mut self, op: &'static str, value: Matrix, node: Node) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.values.push(value);
        self.nodes.push(node);
        Ok(Var(self.values.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push("constant", value, Node::Constant)
    }

    /// Copies the named parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.push("param", value, Node::Param(name.to_string()))
    }

    /// Records an externally computed value with its backward rule.
    pub fn custom(
        &mut self,
        op: &'static str,
        value: Matrix,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        self.push(op, value, Node::Custom(rule))
    }

    /// `x·W + b` with `b` a `1 × d_out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() || bv.shape() != (1, wv.cols()) {
            return Err(Error::dim(
                "affine",
                format!("x[n×{}], b[1×{}]", wv.rows(), wv.cols()),
                format!("x{:?}, W{:?}, b{:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.matmul(wv)?;
        let bias = bv.data();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push("affine", out, Node::Affine { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Node::Relu { x })
    }

    pub fn bounded_softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(bounded_softplus);
        self.push("bounded_softplus", out, Node::BoundedSoftplus { x })
    }

    /// Batch normalization over rows, per column.
    ///
    /// Train mode normalizes with the batch mean and biased variance and
    /// returns those statistics so the caller can fold them into `state`;
    /// eval mode uses `state`'s running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if state.width() != d || gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(Error::dim(
                "batch_norm",
                format!("width {}", state.width()),
                format!("x{:?}, gamma{:?}, beta{:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch { rows: n });
                }
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let h = (xv[(i, j)] - mean[j]) * inv_std[j];
                xhat[(i, j)] = h;
                out[(i, j)] = gv[(0, j)] * h + bv[(0, j)];
            }
        }
        let stats = (mode == Mode::Train).then_some(BatchStats { mean, var });
        let var = self.push(
            "batch_norm",
            out,
            Node::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        )?;
        Ok((var, stats))
    }

    /// Mean Gaussian NLL over all entries.
    pub fn gaussian_nll(&mut self, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        let n = self.value(y).data().len();
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        self.gaussian_nll_weighted(y, mu, sigma, vec![w; n])
    }

    /// `Σᵢ wᵢ·nll(yᵢ, μᵢ, σᵢ)` over the flattened entries.
    pub fn gaussian_nll_weighted(
        &mut self,
        y: Var,
        mu: Var,
        sigma: Var,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let (yv, mv, sv) = (self.value(y), self.value(mu), self.value(sigma));
        if yv.shape() != mv.shape() || yv.shape() != sv.shape() || weights.len() != yv.data().len()
        {
            return Err(Error::dim(
                "gaussian_nll",
                format!("all shapes {:?}", yv.shape()),
                format!(
                    "mu{:?}, sigma{:?}, {} weights",
                    mv.shape(),
                    sv.shape(),
                    weights.len()
                ),
            ));
        }
        if let Some(s) = sv.data().iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain {
                op: "gaussian_nll",
                detail: format!("sigma must be positive, got {s}"),
            });
        }
        let total = yv
            .data()
            .iter()
            .zip(mv.data())
            .zip(sv.data())
            .zip(&weights)
            .map(|(((y, m), s), w)| w * gaussian_nll_point(*y, *m, *s))
            .sum();
        self.push(
            "gaussian_nll",
            Matrix::scalar(total),
            Node::GaussianNll {
                y,
                mu,
                sigma,
                weights,
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::dim(
                "concat_cols",
                format!("{} rows", av.rows()),
                format!("{} rows", bv.rows()),
            ));
        }
        let mut out = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for i in 0..av.rows() {
            let row = out.row_mut(i);
            row[..av.cols()].copy_from_slice(av.row(i));
            row[av.cols()..].copy_from_slice(bv.row(i));
        }
        self.push("concat_cols", out, Node::ConcatCols { a, b })
    }

    /// Column `col` as an `n × 1` matrix.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        if col >= xv.cols() {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: col,
                limit: xv.cols(),
            });
        }
        let out = Matrix::column(&xv.col_values(col));
        self.push("column", out, Node::Column { x, col })
    }

    /// Row `k` of the output is row `index[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Matrix::zeros(index.len(), xv.cols());
        for (k, &i) in index.iter().enumerate() {
            if i >= xv.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    index: i,
                    limit: xv.rows(),
                });
            }
            out.row_mut(k).copy_from_slice(xv.row(i));
        }
        self.push("gather_rows", out, Node::GatherRows { x, index })
    }

    /// Propagates `∂loss/∂·` back through the tape and adds the result into
    /// the gradient of every parameter leaf reached. Leaves not reached are
    /// left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions: Vec<(Var, Matrix)> = match &self.nodes[idx] {
                Node::Constant => Vec::new(),
                Node::Param(name) => {
                    store.leaf_mut(name)?.grad.add_assign(&g)?;
                    Vec::new()
                }
                Node::Affine { x, w, b } => {
                    let dx = g.matmul_nt(self.value(*w))?;
                    let dw = self.value(*x).matmul_tn(&g)?;
                    vec![(*x, dx), (*w, dw), (*b, g.col_sums())]
                }
                Node::Relu { x } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    vec![(*x, dx)]
                }
                Node::BoundedSoftplus { x } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= SIGMA_SCALE * sigmoid(*v);
                    }
                    vec![(*x, dx)]
                }
                Node::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let gv = self.value(*gamma);
                    let (n, d) = g.shape();
                    let mut dgamma = Matrix::zeros(1, d);
                    let dbeta = g.col_sums();
                    for i in 0..n {
                        for j in 0..d {
                            dgamma[(0, j)] += g[(i, j)] * xhat[(i, j)];
                        }
                    }
                    let mut dx = Matrix::zeros(n, d);
                    match mode {
                        Mode::Eval => {
                            for i in 0..n {
                                for j in 0..d {
                                    dx[(i, j)] = g[(i, j)] * gv[(0, j)] * inv_std[j];
                                }
                            }
                        }
                        Mode::Train => {
                            // dx = γ/(nσ) · (n·g − Σg − x̂·Σ(g·x̂))
                            let nf = n as f64;
                            for j in 0..d {
                                let scale = gv[(0, j)] * inv_std[j] / nf;
                                let (sg, sgx) = (dbeta[(0, j)], dgamma[(0, j)]);
                                for i in 0..n {
                                    dx[(i, j)] =
                                        scale * (nf * g[(i, j)] - sg - xhat[(i, j)] * sgx);
                                }
                            }
                        }
                    }
                    vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
                }
                Node::GaussianNll {
                    y,
                    mu,
                    sigma,
                    weights,
                } => {
                    let scale = g[(0, 0)];
                    let (yv, mv, sv) = (self.value(*y), self.value(*mu), self.value(*sigma));
                    let mut dmu = Matrix::zeros(mv.rows(), mv.cols());
                    let mut dsigma = Matrix::zeros(sv.rows(), sv.cols());
                    for (k, w) in weights.iter().enumerate() {
                        let (yk, mk, sk) = (yv.data()[k], mv.data()[k], sv.data()[k]);
                        let r = yk - mk;
                        let s2 = sk * sk;
                        dmu.data_mut()[k] = -scale * w * r / s2;
                        dsigma.data_mut()[k] = scale * w * (1.0 / sk - r * r / (s2 * sk));
                    }
                    vec![(*mu, dmu), (*sigma, dsigma), (*y, Matrix::zeros(yv.rows(), yv.cols()))]
                }
                Node::ConcatCols { a, b } => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    let mut da = Matrix::zeros(g.rows(), ac);
                    let mut db = Matrix::zeros(g.rows(), bc);
                    for i in 0..g.rows() {
                        da.row_mut(i).copy_from_slice(&g.row(i)[..ac]);
                        db.row_mut(i).copy_from_slice(&g.row(i)[ac..]);
                    }
                    vec![(*a, da), (*b, db)]
                }
                Node::Column { x, col } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        dx[(i, *col)] = g[(i, 0)];
                    }
                    vec![(*x, dx)]
                }
                Node::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, &i) in index.iter().enumerate() {
                        for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    vec![(*x, dx)]
                }
                Node::Custom(rule) => {
                    let inputs = rule.inputs();
                    let gs = rule.backward(self, &g)?;
                    inputs.into_iter().zip(gs).collect()
                }
            };
            for (v, dv) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv)?,
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }
}
