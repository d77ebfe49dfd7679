//! Radius-neighbourhood bipartite graphs over 1-D coordinates, the bipartite
//! graph convolution and mean pooling.
//!
//! Output node `o` aggregates the set
//! `{ W_nbr·[f_i, x_i − x_o] + b : i ∈ N(o) } ∪ { W_self·s_o + b }` (the
//! self element only when a self term is configured) by arithmetic mean.
//! One `W_nbr` is shared by all edges of a layer; the relative position is
//! its last input row.

use std::ops::Range;
use std::rc::Rc;

use crate::numkit::{BackwardRule, Matrix, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub coords_in: Vec<f64>,
    pub coords_out: Vec<f64>,
    pub radius: f64,
    /// Input indices adjacent to each output node, ascending.
    pub neighbors: Vec<Vec<usize>>,
}

/// Closed-ball radius graph: `i ∈ N(o) ⇔ |x_i − x_o| ≤ ρ`.
///
/// Inputs are sorted once; each output node's candidates are the contiguous
/// run found by two binary searches on the same predicate.
pub fn build_radius_graph(coords_in: &[f64], coords_out: &[f64], radius: f64) -> Result<BipartiteGraph> {
    if !(radius >= 0.0) {
        return Err(Error::Domain {
            op: "build_radius_graph",
            detail: format!("radius must be ≥ 0, got {radius}"),
        });
    }
    if coords_in.iter().chain(coords_out).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "build_radius_graph",
        });
    }
    let mut order: Vec<usize> = (0..coords_in.len()).collect();
    order.sort_by(|&a, &b| coords_in[a].total_cmp(&coords_in[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| coords_in[i]).collect();

    let neighbors = coords_out
        .iter()
        .map(|&xo| {
            // |x − xo| is xo − x left of xo and x − xo right of it; both
            // are monotone in x, so the ball is one contiguous run.
            let start = sorted.partition_point(|&x| x < xo && xo - x > radius);
            let end = sorted.partition_point(|&x| x < xo || x - xo <= radius);
            let mut nbrs: Vec<usize> = order[start..end].to_vec();
            nbrs.sort_unstable();
            nbrs
        })
        .collect();

    Ok(BipartiteGraph {
        coords_in: coords_in.to_vec(),
        coords_out: coords_out.to_vec(),
        radius,
        neighbors,
    })
}

impl BipartiteGraph {
    pub fn num_in(&self) -> usize {
        self.coords_in.len()
    }

    pub fn num_out(&self) -> usize {
        self.coords_out.len()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Block-diagonal union: node indices of later graphs are offset past
    /// the earlier ones. The distance predicate holds within each block;
    /// there are no edges between blocks.
    pub fn disjoint_union(graphs: &[BipartiteGraph]) -> BipartiteGraph {
        let mut out = BipartiteGraph {
            coords_in: Vec::new(),
            coords_out: Vec::new(),
            radius: graphs.first().map_or(0.0, |g| g.radius),
            neighbors: Vec::new(),
        };
        for g in graphs {
            let offset = out.coords_in.len();
            out.coords_in.extend_from_slice(&g.coords_in);
            out.coords_out.extend_from_slice(&g.coords_out);
            out.neighbors.extend(
                g.neighbors
                    .iter()
                    .map(|n| n.iter().map(|i| i + offset).collect()),
            );
        }
        out
    }
}

/// Tape handles of one convolution layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayerParams {
    /// `(d_in + 1) × d_out`; the last row multiplies `x_i − x_o`.
    pub w_nbr: Var,
    /// `d_self × d_out`, present exactly when the layer has a self term.
    pub w_self: Option<Var>,
    /// `1 × d_out`.
    pub bias: Var,
}

struct ConvRule {
    graph: Rc<BipartiteGraph>,
    feats: Var,
    self_feats: Option<Var>,
    params: ConvLayerParams,
}

impl ConvRule {
    fn set_size(&self, o: usize) -> usize {
        self.graph.neighbors[o].len() + usize::from(self.params.w_self.is_some())
    }
}

/// Bipartite graph convolution with mean reduction.
pub fn bipartite_conv(
    tape: &mut Tape,
    graph: Rc<BipartiteGraph>,
    feats: Var,
    self_feats: Option<Var>,
    params: ConvLayerParams,
) -> Result<Var> {
    let fv = tape.value(feats);
    let wv = tape.value(params.w_nbr);
    let bv = tape.value(params.bias);
    let d = fv.cols();
    let d_out = wv.cols();
    if fv.rows() != graph.num_in() || wv.rows() != d + 1 || bv.shape() != (1, d_out) {
        return Err(Error::dim(
            "bipartite_conv",
            format!("feats[{}×d], W_nbr[(d+1)×d_out], b[1×d_out]", graph.num_in()),
            format!("feats{:?}, W_nbr{:?}, b{:?}", fv.shape(), wv.shape(), bv.shape()),
        ));
    }
    let self_proj = match (self_feats, params.w_self) {
        (Some(s), Some(w)) => {
            let (sv, ws) = (tape.value(s), tape.value(w));
            if sv.rows() != graph.num_out() || ws.rows() != sv.cols() || ws.cols() != d_out {
                return Err(Error::dim(
                    "bipartite_conv",
                    format!("self_feats[{}×d_s], W_self[d_s×{d_out}]", graph.num_out()),
                    format!("self_feats{:?}, W_self{:?}", sv.shape(), ws.shape()),
                ));
            }
            Some(sv.matmul(ws)?)
        }
        (None, None) => None,
        _ => {
            return Err(Error::dim(
                "bipartite_conv",
                "self features and W_self together",
                "only one of them",
            ))
        }
    };

    // Shared feature projection f_i·W_nbr[..d]; the relative-position row
    // is added per edge.
    let mut w_feat = Matrix::zeros(d, d_out);
    for k in 0..d {
        w_feat.row_mut(k).copy_from_slice(wv.row(k));
    }
    let proj = fv.matmul(&w_feat)?;
    let w_pos = wv.row(d);

    let mut out = Matrix::zeros(graph.num_out(), d_out);
    for o in 0..graph.num_out() {
        let nbrs = &graph.neighbors[o];
        let count = nbrs.len() + usize::from(self_proj.is_some());
        if count == 0 {
            return Err(Error::IsolatedNode { node: o });
        }
        let xo = graph.coords_out[o];
        let acc = out.row_mut(o);
        for &i in nbrs {
            let dx = graph.coords_in[i] - xo;
            for ((a, p), w) in acc.iter_mut().zip(proj.row(i)).zip(w_pos) {
                *a += p + dx * w;
            }
        }
        if let Some(sp) = &self_proj {
            for (a, s) in acc.iter_mut().zip(sp.row(o)) {
                *a += s;
            }
        }
        let n = count as f64;
        for (a, b) in acc.iter_mut().zip(bv.data()) {
            *a = *a / n + b;
        }
    }

    let rule = ConvRule {
        graph,
        feats,
        self_feats,
        params,
    };
    tape.custom("bipartite_conv", out, Box::new(rule))
}

impl BackwardRule for ConvRule {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.feats, self.params.w_nbr, self.params.bias];
        if let (Some(s), Some(w)) = (self.self_feats, self.params.w_self) {
            v.push(s);
            v.push(w);
        }
        v
    }

    fn backward(&self, tape: &Tape, grad_out: &Matrix) -> Result<Vec<Matrix>> {
        let g = &self.graph;
        let fv = tape.value(self.feats);
        let wv = tape.value(self.params.w_nbr);
        let (n_in, d) = fv.shape();
        let d_out = wv.cols();

        // Gradient of each set element is grad_out[o] / |set(o)|.
        let mut g_elem = grad_out.clone();
        for o in 0..g.num_out() {
            let c = self.set_size(o) as f64;
            g_elem.row_mut(o).iter_mut().for_each(|v| *v /= c);
        }

        let mut d_proj = Matrix::zeros(n_in, d_out);
        let mut d_wpos = vec![0.0; d_out];
        for o in 0..g.num_out() {
            let xo = g.coords_out[o];
            let ge = g_elem.row(o);
            for &i in &g.neighbors[o] {
                let dx = g.coords_in[i] - xo;
                for ((dp, dw), v) in d_proj.row_mut(i).iter_mut().zip(&mut d_wpos).zip(ge) {
                    *dp += v;
                    *dw += dx * v;
                }
            }
        }

        let mut w_feat = Matrix::zeros(d, d_out);
        for k in 0..d {
            w_feat.row_mut(k).copy_from_slice(wv.row(k));
        }
        let d_feats = d_proj.matmul_nt(&w_feat)?;
        let d_wfeat = fv.matmul_tn(&d_proj)?;
        let mut d_wnbr = Matrix::zeros(d + 1, d_out);
        for k in 0..d {
            d_wnbr.row_mut(k).copy_from_slice(d_wfeat.row(k));
        }
        d_wnbr.row_mut(d).copy_from_slice(&d_wpos);

        let mut grads = vec![d_feats, d_wnbr, grad_out.col_sums()];
        if let (Some(s), Some(w)) = (self.self_feats, self.params.w_self) {
            grads.push(g_elem.matmul_nt(tape.value(w))?);
            grads.push(tape.value(s).matmul_tn(&g_elem)?);
        }
        Ok(grads)
    }
}

/// Column-wise mean of the rows.
pub fn mean_pool(feats: &Matrix) -> Result<Vec<f64>> {
    if feats.rows() == 0 {
        return Err(Error::EmptyPool);
    }
    let n = feats.rows() as f64;
    Ok(feats.col_sums().data().iter().map(|s| s / n).collect())
}

struct SegmentMeanRule {
    x: Var,
    segments: Vec<Range<usize>>,
}

/// Mean over each contiguous row segment; one output row per segment.
pub fn segment_mean_pool(tape: &mut Tape, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
    let xv = tape.value(x);
    let mut out = Matrix::zeros(segments.len(), xv.cols());
    for (s, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::EmptyPool);
        }
        if seg.end > xv.rows() {
            return Err(Error::IndexOutOfRange {
                what: "pool segment end",
                index: seg.end,
                limit: xv.rows(),
            });
        }
        let n = seg.len() as f64;
        let row = out.row_mut(s);
        for i in seg.clone() {
            for (o, v) in row.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o /= n);
    }
    tape.custom("segment_mean_pool", out, Box::new(SegmentMeanRule { x, segments }))
}

impl BackwardRule for SegmentMeanRule {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, tape: &Tape, grad_out: &Matrix) -> Result<Vec<Matrix>> {
        let xv = tape.value(self.x);
        let mut dx = Matrix::zeros(xv.rows(), xv.cols());
        for (s, seg) in self.segments.iter().enumerate() {
            let n = seg.len() as f64;
            for i in seg.clone() {
                for (d, g) in dx.row_mut(i).iter_mut().zip(grad_out.row(s)) {
                    *d = g / n;
                }
            }
        }
        Ok(vec![dx])
    }
}
