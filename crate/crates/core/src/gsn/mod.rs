//! Graph Spring Network propagation.
//!
//! For a node with unit embedding `h_i` and unit neighbor embeddings `h_j`,
//! one iteration computes softmax weights `α_j ∝ exp(h_jᵀ c)` and moves the
//! center to `c ← UN(h_i + Σ α_j h_j)`, starting from `c = h_i`. A layer runs
//! this for `T` iterations at every node against a fixed snapshot of the
//! layer input, and the item embedding is the sum of the normalized input and
//! every layer output.
//!
//! Two implementations live here: a plain `f64` path that also records the
//! per-iteration trace, and a tape path used for training. [`vmf`] holds an
//! independent EM formulation used to certify the iteration.

pub mod vmf;

use rayon::prelude::*;

use crate::autodiff::{dot, norm, Tape, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::graph::SampledAdjacency;

/// Default number of inner iterations.
pub const DEFAULT_ITERATIONS: usize = 4;

pub fn unit_normalize(h: &[f64]) -> Result<Vec<f64>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("unit_normalize input".into()));
    }
    let n = norm(h);
    if n <= NORM_EPS {
        return Err(Error::DegenerateVector(n));
    }
    Ok(h.iter().map(|v| v / n).collect())
}

/// State after one iteration: the weights used and the resulting center.
#[derive(Clone, Debug, PartialEq)]
pub struct GsnIterate {
    pub alphas: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeUpdate {
    pub embedding: Vec<f64>,
    pub alphas: Vec<f64>,
    pub trace: Vec<GsnIterate>,
}

/// Runs `iterations` spring iterations for one node. Inputs must already be
/// unit vectors. A node without neighbors is returned unchanged.
pub fn gsn_node_update(h_i: &[f64], neighbors: &[&[f64]], iterations: usize) -> Result<NodeUpdate> {
    if iterations == 0 {
        return Err(Error::invalid("GSN needs at least one iteration"));
    }
    if let Some(bad) = neighbors.iter().find(|h| h.len() != h_i.len()) {
        return Err(Error::Shape {
            op: "gsn_node_update",
            lhs: (1, h_i.len()),
            rhs: (1, bad.len()),
        });
    }
    if neighbors.is_empty() {
        return Ok(NodeUpdate {
            embedding: h_i.to_vec(),
            alphas: Vec::new(),
            trace: Vec::new(),
        });
    }

    let mut c = h_i.to_vec();
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut alphas: Vec<f64> = neighbors.iter().map(|h_j| dot(h_j, &c).exp()).collect();
        let w: f64 = alphas.iter().sum();
        alphas.iter_mut().for_each(|a| *a /= w);

        let mut next = h_i.to_vec();
        for (a, h_j) in alphas.iter().zip(neighbors) {
            for (n, v) in next.iter_mut().zip(h_j.iter()) {
                *n += a * v;
            }
        }
        c = unit_normalize(&next)?;
        trace.push(GsnIterate {
            alphas,
            c: c.clone(),
        });
    }
    let alphas = trace.last().map(|t| t.alphas.clone()).unwrap_or_default();
    Ok(NodeUpdate {
        embedding: c,
        alphas,
        trace,
    })
}

/// Output of one layer. `alphas[i]` is aligned with node `i`'s neighbors
/// sorted by ascending index (see [`canonical_neighbors`]).
#[derive(Clone, Debug, PartialEq)]
pub struct GsnLayerOutput {
    pub h: Tensor,
    pub alphas: Vec<Vec<f64>>,
}

/// Neighbor indices in ascending order; summation follows this order so a
/// layer's output does not depend on how the adjacency lists are ordered.
pub fn canonical_neighbors(adjacency: &SampledAdjacency, node: usize) -> Vec<usize> {
    let mut nb = adjacency.neighbors(node).to_vec();
    nb.sort_unstable();
    nb
}

fn check_adjacency(h: &Tensor, adjacency: &SampledAdjacency) -> Result<()> {
    if adjacency.n_nodes() != h.rows() {
        return Err(Error::Shape {
            op: "gsn_layer",
            lhs: h.shape(),
            rhs: (adjacency.n_nodes(), h.cols()),
        });
    }
    Ok(())
}

pub fn normalize_rows(h: &Tensor) -> Result<Tensor> {
    let mut out = h.clone();
    for r in 0..h.rows() {
        let u = unit_normalize(h.row(r))?;
        out.row_mut(r).copy_from_slice(&u);
    }
    Ok(out)
}

/// Normalizes every row, then updates every node against that snapshot.
pub fn gsn_layer(h: &Tensor, adjacency: &SampledAdjacency, iterations: usize) -> Result<GsnLayerOutput> {
    check_adjacency(h, adjacency)?;
    let snapshot = normalize_rows(h)?;
    propagate(&snapshot, adjacency, iterations)
}

fn propagate(snapshot: &Tensor, adjacency: &SampledAdjacency, iterations: usize) -> Result<GsnLayerOutput> {
    let updates: Vec<NodeUpdate> = (0..snapshot.rows())
        .into_par_iter()
        .map(|i| {
            let nb = canonical_neighbors(adjacency, i);
            let rows: Vec<&[f64]> = nb.iter().map(|&j| snapshot.row(j)).collect();
            gsn_node_update(snapshot.row(i), &rows, iterations)
        })
        .collect::<Result<_>>()?;
    let mut out = Tensor::zeros(snapshot.rows(), snapshot.cols());
    let mut alphas = Vec::with_capacity(updates.len());
    for (i, u) in updates.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&u.embedding);
        alphas.push(u.alphas);
    }
    Ok(GsnLayerOutput { h: out, alphas })
}

/// `H_a = H⁽⁰⁾ + H⁽¹⁾ + … + H⁽ᴸ⁾` with `H⁽⁰⁾` the row-normalized table.
pub fn item_embeddings(
    h0: &Tensor,
    adjacency: &SampledAdjacency,
    layers: usize,
    iterations: usize,
) -> Result<Tensor> {
    check_adjacency(h0, adjacency)?;
    let mut current = normalize_rows(h0)?;
    let mut sum = current.clone();
    for _ in 0..layers {
        current = propagate(&current, adjacency, iterations)?.h;
        sum.add_assign(&current);
    }
    Ok(sum)
}

/// Tape version of [`gsn_node_update`]. `h_i` is `1 x d`, `neighbors` is
/// `k x d` with `k ≥ 1`. Returns the final center and the last weights
/// (`1 x k`).
pub fn gsn_node_update_tape(
    tape: &mut Tape,
    h_i: Var,
    neighbors: Var,
    iterations: usize,
) -> Result<(Var, Var)> {
    if iterations == 0 {
        return Err(Error::invalid("GSN needs at least one iteration"));
    }
    let mut c = h_i;
    let mut alphas = None;
    for _ in 0..iterations {
        let logits = tape.matmul_nt(c, neighbors)?;
        let a = tape.softmax_rows(logits)?;
        let pulled = tape.matmul(a, neighbors)?;
        let moved = tape.add(h_i, pulled)?;
        c = tape.normalize_rows(moved)?;
        alphas = Some(a);
    }
    Ok((c, alphas.expect("at least one iteration")))
}

/// Tape version of [`gsn_layer`].
pub fn gsn_layer_tape(tape: &mut Tape, h: Var, adjacency: &SampledAdjacency, iterations: usize) -> Result<Var> {
    check_adjacency(tape.value(h), adjacency)?;
    let snapshot = tape.normalize_rows(h)?;
    propagate_tape(tape, snapshot, adjacency, iterations)
}

fn propagate_tape(tape: &mut Tape, snapshot: Var, adjacency: &SampledAdjacency, iterations: usize) -> Result<Var> {
    let n = tape.value(snapshot).rows();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let h_i = tape.index_rows(snapshot, &[i])?;
        let nb = canonical_neighbors(adjacency, i);
        if nb.is_empty() {
            rows.push(h_i);
            continue;
        }
        let g = tape.index_rows(snapshot, &nb)?;
        let (c, _) = gsn_node_update_tape(tape, h_i, g, iterations)?;
        rows.push(c);
    }
    tape.concat_rows(&rows)
}

/// Tape version of [`item_embeddings`].
pub fn item_embeddings_tape(
    tape: &mut Tape,
    h0: Var,
    adjacency: &SampledAdjacency,
    layers: usize,
    iterations: usize,
) -> Result<Var> {
    check_adjacency(tape.value(h0), adjacency)?;
    let mut current = tape.normalize_rows(h0)?;
    let mut sum = current;
    for _ in 0..layers {
        current = propagate_tape(tape, current, adjacency, iterations)?;
        sum = tape.add(sum, current)?;
    }
    Ok(sum)
}
