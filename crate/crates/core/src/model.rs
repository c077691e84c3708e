//! Shared-GRU session encoder, the two score heads, decision fusion and the
//! training loss.
//!
//! Matrices use the row-vector convention: a gate reads `σ(x·W + h·U + b)`.

use rand::Rng;

use crate::anchors::{item_encodings_tape, AnchorEncoderParams, AnchorEncoderVars, AnchorSet, EncodingVars};
use crate::autodiff::{sigmoid, softmax_in_place, Tape, Tensor, Var};
use crate::corpus::TrainingExample;
use crate::error::{Error, Result};
use crate::graph::SampledAdjacency;
use crate::gsn::item_embeddings_tape;

/// Lower clamp applied to probabilities before taking logs in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Update, reset and candidate weights; one set serves both input streams.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        let mut m = || Tensor::uniform(d, d, b, rng);
        let (w_z, u_z, w_r, u_r, w_h, u_h) = (m(), m(), m(), m(), m(), m());
        let mut v = || Tensor::uniform(1, d, b, rng);
        let (b_z, b_r, b_h) = (v(), v(), v());
        Self { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h }
    }

    pub fn zeros(d: usize) -> Self {
        let m = || Tensor::zeros(d, d);
        let v = || Tensor::zeros(1, d);
        Self {
            w_z: m(),
            u_z: m(),
            b_z: v(),
            w_r: m(),
            u_r: m(),
            b_r: v(),
            w_h: m(),
            u_h: m(),
            b_h: v(),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h,
            &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

fn gru_cell(tape: &mut Tape, g: &GruVars, x: Var, h: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, hin: Var| -> Result<Var> {
        let a = tape.matmul(x, w)?;
        let c = tape.matmul(hin, u)?;
        let s = tape.add(a, c)?;
        tape.add_row(s, b)
    };
    let z = gate(tape, g.w_z, g.u_z, g.b_z, h)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, g.w_r, g.u_r, g.b_r, h)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let cand = gate(tape, g.w_h, g.u_h, g.b_h, rh)?;
    let cand = tape.tanh(cand)?;
    // (1 - z)⊙h + z⊙h̃ = h + z⊙(h̃ - h)
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// Runs the GRU over the rows of `sequence` (`len x d`) from a zero state and
/// returns the last hidden state (`1 x d`).
pub fn gru_forward_tape(tape: &mut Tape, gru: &GruVars, sequence: Var) -> Result<Var> {
    let (len, _) = tape.value(sequence).shape();
    if len == 0 {
        return Err(Error::invalid("GRU over an empty sequence"));
    }
    let d = tape.value(gru.w_z).cols();
    let mut h = tape.constant(Tensor::zeros(1, d));
    for t in 0..len {
        let x = tape.index_rows(sequence, &[t])?;
        h = gru_cell(tape, gru, x, h)?;
    }
    Ok(h)
}

/// Batched GRU. `steps[t]` holds row `b`'s input at time `t` (padding rows
/// are ignored); `lengths[b]` is the number of valid steps of row `b`. The
/// state of a finished row is frozen, so the result holds each row's last
/// valid state.
pub fn gru_forward_batch(tape: &mut Tape, gru: &GruVars, steps: &[Var], lengths: &[usize]) -> Result<Var> {
    let rows = lengths.len();
    if lengths.iter().any(|&l| l == 0 || l > steps.len()) {
        return Err(Error::invalid("every sequence needs 1..=steps valid positions"));
    }
    let d = tape.value(gru.w_z).cols();
    let mut h = tape.constant(Tensor::zeros(rows, d));
    for (t, &x) in steps.iter().enumerate() {
        if tape.value(x).rows() != rows {
            return Err(Error::Shape {
                op: "gru_forward_batch",
                lhs: tape.value(x).shape(),
                rhs: (rows, d),
            });
        }
        let next = gru_cell(tape, gru, x, h)?;
        if lengths.iter().all(|&l| t < l) {
            h = next;
        } else {
            let mut mask = Tensor::zeros(rows, d);
            for (b, &l) in lengths.iter().enumerate() {
                if t < l {
                    mask.row_mut(b).iter_mut().for_each(|v| *v = 1.0);
                }
            }
            let mask = tape.constant(mask);
            let delta = tape.sub(next, h)?;
            let kept = tape.mul(mask, delta)?;
            h = tape.add(h, kept)?;
        }
    }
    Ok(h)
}

/// Plain evaluation of the GRU over a sequence of `d`-vectors.
pub fn gru_forward(params: &GruParams, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return Err(Error::invalid("GRU over an empty sequence"));
    }
    let mut tape = Tape::new();
    let vars = bind_gru(&mut tape, params, false);
    let seq = tape.constant(Tensor::from_rows(sequence)?);
    let h = gru_forward_tape(&mut tape, &vars, seq)?;
    Ok(tape.value(h).data().to_vec())
}

fn bind_gru(tape: &mut Tape, g: &GruParams, trainable: bool) -> GruVars {
    let mut put = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    GruVars {
        w_z: put(&g.w_z),
        u_z: put(&g.u_z),
        b_z: put(&g.b_z),
        w_r: put(&g.w_r),
        u_r: put(&g.u_r),
        b_r: put(&g.b_r),
        w_h: put(&g.w_h),
        u_h: put(&g.u_h),
        b_h: put(&g.b_h),
    }
}

/// `softmax(H·s)` for each row of `s` (`B x d`) against `h` (`N x d`).
pub fn predict_tape(tape: &mut Tape, h: Var, s: Var) -> Result<Var> {
    let logits = tape.matmul_nt(s, h)?;
    tape.softmax_rows(logits)
}

/// Plain `softmax(H·s)`.
pub fn predict(h: &Tensor, s: &[f64]) -> Result<Vec<f64>> {
    if s.len() != h.cols() {
        return Err(Error::Shape {
            op: "predict",
            lhs: h.shape(),
            rhs: (1, s.len()),
        });
    }
    let mut y: Vec<f64> = (0..h.rows()).map(|i| crate::autodiff::dot(h.row(i), s)).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction logits".into()));
    }
    softmax_in_place(&mut y);
    Ok(y)
}

/// Trainable fusion logits; the weights are `σ(ω_a)` and `σ(ω_b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub omega_a: f64,
    pub omega_b: f64,
}

impl FusionWeights {
    pub fn weights(&self) -> (f64, f64) {
        (sigmoid(self.omega_a), sigmoid(self.omega_b))
    }
}

/// `σ(ω_a)·y_a + σ(ω_b)·y_b`.
pub fn fuse(y_a: &[f64], y_b: &[f64], weights: FusionWeights) -> Result<Vec<f64>> {
    if y_a.len() != y_b.len() {
        return Err(Error::Shape {
            op: "fuse",
            lhs: (1, y_a.len()),
            rhs: (1, y_b.len()),
        });
    }
    let (wa, wb) = weights.weights();
    Ok(y_a.iter().zip(y_b).map(|(a, b)| wa * a + wb * b).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub y_a: Vec<f64>,
    pub y_b: Vec<f64>,
    pub y_fused: Vec<f64>,
}

/// `-ln ŷ_a[t] - ln ŷ_b[t] - ln ŷ[t]`, each probability clamped at
/// [`PROB_FLOOR`]. The fused term can be negative since `ŷ` is not
/// normalized.
pub fn loss(bundle: &PredictionBundle, target: usize) -> Result<f64> {
    if target >= bundle.y_a.len() {
        return Err(Error::invalid(format!(
            "target {target} outside {} items",
            bundle.y_a.len()
        )));
    }
    let nll = |y: &[f64]| -y[target].max(PROB_FLOOR).ln();
    Ok(nll(&bundle.y_a) + nll(&bundle.y_b) + nll(&bundle.y_fused))
}

/// Shape of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub n_items: usize,
    pub dim: usize,
    pub n_anchors: usize,
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Initial item embedding table `H⁽⁰⁾`, `N x d`.
    pub h0: Tensor,
    pub encoder: AnchorEncoderParams,
    pub gru: GruParams,
    pub omega_a: Tensor,
    pub omega_b: Tensor,
}

/// Names of [`ModelParams::tensors`], in order.
pub const PARAM_NAMES: [&str; 18] = [
    "h0", "enc.w_c", "enc.b_c", "enc.w_p1", "enc.b_p1", "enc.w_p2", "enc.b_p2", "gru.w_z", "gru.u_z",
    "gru.b_z", "gru.w_r", "gru.u_r", "gru.b_r", "gru.w_h", "gru.u_h", "gru.b_h", "fusion.omega_a",
    "fusion.omega_b",
];

impl ModelParams {
    /// Uniform `[-1/√d, 1/√d]` for every tensor except the fusion logits,
    /// which start at zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        if arch.dim < 2 {
            return Err(Error::invalid("embedding size must be at least 2"));
        }
        if arch.n_anchors == 0 || arch.n_anchors > arch.n_items {
            return Err(Error::invalid(format!(
                "need 1 <= M <= N, got M = {}, N = {}",
                arch.n_anchors, arch.n_items
            )));
        }
        let b = 1.0 / (arch.dim as f64).sqrt();
        Ok(Self {
            h0: Tensor::uniform(arch.n_items, arch.dim, b, rng),
            encoder: AnchorEncoderParams::init(arch.dim, arch.n_anchors, rng),
            gru: GruParams::init(arch.dim, rng),
            omega_a: Tensor::scalar(0.0),
            omega_b: Tensor::scalar(0.0),
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            n_items: self.h0.rows(),
            dim: self.h0.cols(),
            n_anchors: self.encoder.n_anchors(),
        }
    }

    pub fn fusion(&self) -> FusionWeights {
        FusionWeights {
            omega_a: self.omega_a.data()[0],
            omega_b: self.omega_b.data()[0],
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.h0];
        out.extend(self.encoder.tensors());
        out.extend(self.gru.tensors());
        out.push(&self.omega_a);
        out.push(&self.omega_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.h0];
        out.extend(self.encoder.tensors_mut());
        out.extend(self.gru.tensors_mut());
        out.push(&mut self.omega_a);
        out.push(&mut self.omega_b);
        out
    }

    /// Rebuilds parameters from tensors ordered as in [`ModelParams::tensors`].
    pub fn from_tensors(mut t: Vec<Tensor>) -> Result<Self> {
        if t.len() != 18 {
            return Err(Error::invalid(format!("expected 18 tensors, got {}", t.len())));
        }
        let mut next = t.drain(..);
        let mut take = || next.next().expect("length checked");
        let h0 = take();
        let encoder = AnchorEncoderParams {
            w_c: take(),
            b_c: take(),
            w_p1: take(),
            b_p1: take(),
            w_p2: take(),
            b_p2: take(),
        };
        let gru = GruParams {
            w_z: take(),
            u_z: take(),
            b_z: take(),
            w_r: take(),
            u_r: take(),
            b_r: take(),
            w_h: take(),
            u_h: take(),
            b_h: take(),
        };
        let (omega_a, omega_b) = (take(), take());
        let params = Self { h0, encoder, gru, omega_a, omega_b };
        params.check_shapes()?;
        Ok(params)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let Architecture { n_items: n, dim: d, n_anchors: m } = self.architecture();
        let expected = [
            (n, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, m),
            (1, m),
            (d, d),
            (d, d),
            (1, d),
            (d, d),
            (d, d),
            (1, d),
            (d, d),
            (d, d),
            (1, d),
            (1, 1),
            (1, 1),
        ];
        for ((t, want), name) in self.tensors().into_iter().zip(expected).zip(PARAM_NAMES) {
            if t.shape() != want {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Model parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub h0: Var,
    pub encoder: AnchorEncoderVars,
    pub gru: GruVars,
    pub omega_a: Var,
    pub omega_b: Var,
}

impl ModelVars {
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let h0 = if trainable {
            tape.param(params.h0.clone())
        } else {
            tape.constant(params.h0.clone())
        };
        let encoder = AnchorEncoderVars::bind(tape, &params.encoder, trainable);
        let gru = bind_gru(tape, &params.gru, trainable);
        let (omega_a, omega_b) = if trainable {
            (tape.param(params.omega_a.clone()), tape.param(params.omega_b.clone()))
        } else {
            (tape.constant(params.omega_a.clone()), tape.constant(params.omega_b.clone()))
        };
        Self { h0, encoder, gru, omega_a, omega_b }
    }

    /// Wraps vars ordered as in [`ModelParams::tensors`].
    pub fn from_vars(v: &[Var]) -> Result<Self> {
        if v.len() != 18 {
            return Err(Error::invalid(format!("expected 18 vars, got {}", v.len())));
        }
        Ok(Self {
            h0: v[0],
            encoder: AnchorEncoderVars {
                w_c: v[1],
                b_c: v[2],
                w_p1: v[3],
                b_p1: v[4],
                w_p2: v[5],
                b_p2: v[6],
            },
            gru: GruVars {
                w_z: v[7],
                u_z: v[8],
                b_z: v[9],
                w_r: v[10],
                u_r: v[11],
                b_r: v[12],
                w_h: v[13],
                u_h: v[14],
                b_h: v[15],
            },
            omega_a: v[16],
            omega_b: v[17],
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let g = &self.gru;
        let mut out = vec![self.h0];
        out.extend(self.encoder.vars());
        out.extend([g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h]);
        out.push(self.omega_a);
        out.push(self.omega_b);
        out
    }
}

/// Propagation settings needed to build the item tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Propagation {
    pub layers: usize,
    pub iterations: usize,
}

/// `H_a` and the anchor encoding outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ItemTables {
    pub h_a: Var,
    pub encoding: EncodingVars,
}

pub fn item_tables_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    adjacency: &SampledAdjacency,
    anchors: &AnchorSet,
    prop: Propagation,
) -> Result<ItemTables> {
    let h_a = item_embeddings_tape(tape, vars.h0, adjacency, prop.layers, prop.iterations)?;
    let encoding = item_encodings_tape(tape, h_a, anchors, &vars.encoder)?;
    Ok(ItemTables { h_a, encoding })
}

/// Batched forward outputs: `B x N` distributions for both heads.
#[derive(Clone, Copy, Debug)]
pub struct BatchOutput {
    pub y_a: Var,
    pub y_b: Var,
}

/// Runs both streams of every prefix through the shared GRU in one padded
/// batch (`2B` rows: item-embedding streams first, encoding streams after).
pub fn batch_forward(
    tape: &mut Tape,
    gru: &GruVars,
    h_a: Var,
    h_b: Var,
    prefixes: &[&[usize]],
) -> Result<BatchOutput> {
    let b = prefixes.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let n = tape.value(h_a).rows();
    let lengths: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
    if let Some(bad) = prefixes.iter().flat_map(|p| p.iter()).find(|&&i| i >= n) {
        return Err(Error::invalid(format!("item {bad} outside {n} items")));
    }
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut steps = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let idx: Vec<usize> = prefixes.iter().map(|p| p.get(t).copied().unwrap_or(0)).collect();
        let xa = tape.index_rows(h_a, &idx)?;
        let xb = tape.index_rows(h_b, &idx)?;
        steps.push(tape.concat_rows(&[xa, xb])?);
    }
    let both: Vec<usize> = lengths.iter().chain(lengths.iter()).copied().collect();
    let s = gru_forward_batch(tape, gru, &steps, &both)?;
    let idx_a: Vec<usize> = (0..b).collect();
    let idx_b: Vec<usize> = (b..2 * b).collect();
    let s_a = tape.index_rows(s, &idx_a)?;
    let s_b = tape.index_rows(s, &idx_b)?;
    let y_a = predict_tape(tape, h_a, s_a)?;
    let y_b = predict_tape(tape, h_b, s_b)?;
    Ok(BatchOutput { y_a, y_b })
}

/// Mean over the batch of `ℒ_a + ℒ_b + ℒ_c`.
pub fn batch_loss(
    tape: &mut Tape,
    out: &BatchOutput,
    omega_a: Var,
    omega_b: Var,
    targets: &[usize],
) -> Result<Var> {
    let pa = tape.pick_cols(out.y_a, targets)?;
    let pb = tape.pick_cols(out.y_b, targets)?;
    let wa = tape.sigmoid(omega_a)?;
    let wb = tape.sigmoid(omega_b)?;
    let fa = tape.mul_scalar(pa, wa)?;
    let fb = tape.mul_scalar(pb, wb)?;
    let pf = tape.add(fa, fb)?;
    let mut total = None;
    for p in [pa, pb, pf] {
        let l = tape.clamp_log(p, PROB_FLOOR)?;
        let s = tape.sum(l)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.expect("three terms");
    tape.scale(total, -1.0 / targets.len() as f64)
}

/// Full training objective for a batch of examples, recomputing the item
/// tables from the current parameters.
pub fn examples_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    adjacency: &SampledAdjacency,
    anchors: &AnchorSet,
    prop: Propagation,
    examples: &[&TrainingExample],
) -> Result<Var> {
    let tables = item_tables_tape(tape, vars, adjacency, anchors, prop)?;
    loss_with_tables(tape, vars, tables.h_a, tables.encoding.h_b, examples)
}

pub fn loss_with_tables(
    tape: &mut Tape,
    vars: &ModelVars,
    h_a: Var,
    h_b: Var,
    examples: &[&TrainingExample],
) -> Result<Var> {
    let prefixes: Vec<&[usize]> = examples.iter().map(|e| e.prefix.as_slice()).collect();
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    let out = batch_forward(tape, &vars.gru, h_a, h_b, &prefixes)?;
    batch_loss(tape, &out, vars.omega_a, vars.omega_b, &targets)
}

/// Single-prefix forward pass: the shared GRU runs separately over the
/// prefix rows of `h_a` and of `h_b`, each head scores against its own
/// table, and the two distributions are fused.
pub fn forward_session(
    params: &ModelParams,
    prefix: &[usize],
    h_a: &Tensor,
    h_b: &Tensor,
) -> Result<PredictionBundle> {
    if prefix.is_empty() {
        return Err(Error::invalid("empty prefix"));
    }
    if h_a.shape() != h_b.shape() {
        return Err(Error::Shape {
            op: "forward_session",
            lhs: h_a.shape(),
            rhs: h_b.shape(),
        });
    }
    let mut tape = Tape::new();
    let gru = bind_gru(&mut tape, &params.gru, false);
    let ta = tape.constant(h_a.clone());
    let tb = tape.constant(h_b.clone());
    let sa = tape.index_rows(ta, prefix)?;
    let sb = tape.index_rows(tb, prefix)?;
    let s_a = gru_forward_tape(&mut tape, &gru, sa)?;
    let s_b = gru_forward_tape(&mut tape, &gru, sb)?;
    let y_a = predict(h_a, tape.value(s_a).data())?;
    let y_b = predict(h_b, tape.value(s_b).data())?;
    let y_fused = fuse(&y_a, &y_b, params.fusion())?;
    Ok(PredictionBundle { y_a, y_b, y_fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_stays_at_origin() {
        let h = gru_forward(&GruParams::zeros(3), &[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(gru_forward(&GruParams::zeros(3), &[]).is_err());
    }

    #[test]
    fn single_step_matches_cell_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GruParams::init(2, &mut rng);
        let x = [0.3, -0.8];
        let h = gru_forward(&g, &[x.to_vec()]).unwrap();
        // h_prev = 0 so U terms vanish
        let lin = |w: &Tensor, b: &Tensor, k: usize| x[0] * w.get(0, k) + x[1] * w.get(1, k) + b.get(0, k);
        for k in 0..2 {
            let z = sigmoid(lin(&g.w_z, &g.b_z, k));
            let cand = lin(&g.w_h, &g.b_h, k).tanh();
            assert!((h[k] - z * cand).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_gru_matches_unbatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GruParams::init(4, &mut rng);
        let seqs: Vec<Vec<Vec<f64>>> = vec![
            (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            (0..1).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            (0..2).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        ];
        let mut tape = Tape::new();
        let vars = bind_gru(&mut tape, &g, false);
        let steps: Vec<Var> = (0..3)
            .map(|t| {
                let rows: Vec<Vec<f64>> = seqs
                    .iter()
                    .map(|s| s.get(t).cloned().unwrap_or_else(|| vec![9.0; 4]))
                    .collect();
                tape.constant(Tensor::from_rows(&rows).unwrap())
            })
            .collect();
        let out = gru_forward_batch(&mut tape, &vars, &steps, &[3, 1, 2]).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let single = gru_forward(&g, s).unwrap();
            for (x, y) in tape.value(out).row(b).iter().zip(&single) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_examples() {
        let h = Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let y = predict(&h, &[0.0, 0.0]).unwrap();
        assert!(y.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let s = [0.4, -1.1];
        let y = predict(&h, &s).unwrap();
        let logits = [0.4, -1.1, -0.35];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for (v, l) in y.iter().zip(logits) {
            assert!((v - l.exp() / z).abs() < 1e-12);
        }
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_examples() {
        let ya = [0.2, 0.3, 0.5];
        let yb = [0.6, 0.1, 0.3];
        let half = fuse(&ya, &yb, FusionWeights { omega_a: 0.0, omega_b: 0.0 }).unwrap();
        for k in 0..3 {
            assert!((half[k] - 0.5 * (ya[k] + yb[k])).abs() < 1e-15);
        }
        let w = FusionWeights { omega_a: 1.3, omega_b: -0.4 };
        let same = fuse(&ya, &ya, w).unwrap();
        let (wa, wb) = w.weights();
        for k in 0..3 {
            assert!((same[k] - (wa + wb) * ya[k]).abs() < 1e-15);
        }
        assert!((fuse(&ya, &yb, w).unwrap().iter().sum::<f64>() - (wa + wb)).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let n = 7usize;
        let u = vec![1.0 / n as f64; n];
        let bundle = PredictionBundle {
            y_a: u.clone(),
            y_b: u.clone(),
            y_fused: fuse(&u, &u, FusionWeights { omega_a: 0.0, omega_b: 0.0 }).unwrap(),
        };
        assert!((loss(&bundle, 3).unwrap() - 3.0 * (n as f64).ln()).abs() < 1e-12);

        // perfect heads with saturated fusion weights approach -ln 2
        let mut one = vec![0.0; n];
        one[2] = 1.0;
        let big = FusionWeights { omega_a: 40.0, omega_b: 40.0 };
        let bundle = PredictionBundle {
            y_a: one.clone(),
            y_b: one.clone(),
            y_fused: fuse(&one, &one, big).unwrap(),
        };
        assert!((loss(&bundle, 2).unwrap() + 2f64.ln()).abs() < 1e-12);
        assert!(loss(&bundle, n).is_err());

        // zero probability is clamped instead of producing infinity
        assert!((loss(&bundle, 0).unwrap() - 3.0 * -(PROB_FLOOR.ln())).abs() < 1e-9);
    }

    /// Straight-line GRU over plain vectors, written from the cell equations.
    fn scalar_gru(g: &GruParams, xs: &[Vec<f64>]) -> Vec<f64> {
        let d = g.hidden_size();
        let lin = |x: &[f64], w: &Tensor, h: &[f64], u: &Tensor, b: &Tensor, k: usize| {
            let mut acc = b.get(0, k);
            for i in 0..d {
                acc += x[i] * w.get(i, k) + h[i] * u.get(i, k);
            }
            acc
        };
        let mut h = vec![0.0; d];
        for x in xs {
            let z: Vec<f64> = (0..d).map(|k| sigmoid(lin(x, &g.w_z, &h, &g.u_z, &g.b_z, k))).collect();
            let r: Vec<f64> = (0..d).map(|k| sigmoid(lin(x, &g.w_r, &h, &g.u_r, &g.b_r, k))).collect();
            let rh: Vec<f64> = (0..d).map(|k| r[k] * h[k]).collect();
            let cand: Vec<f64> = (0..d).map(|k| lin(x, &g.w_h, &rh, &g.u_h, &g.b_h, k).tanh()).collect();
            h = (0..d).map(|k| (1.0 - z[k]) * h[k] + z[k] * cand[k]).collect();
        }
        h
    }

    fn scalar_softmax_scores(table: &Tensor, s: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..table.rows())
            .map(|i| table.row(i).iter().zip(s).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / z).collect()
    }

    fn tiny_model(seed: u64) -> (ModelParams, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture { n_items: 5, dim: 3, n_anchors: 2 };
        let mut p = ModelParams::init(arch, &mut rng).unwrap();
        p.omega_a = Tensor::scalar(0.7);
        p.omega_b = Tensor::scalar(-1.2);
        let h_a = Tensor::uniform(5, 3, 1.0, &mut rng);
        let h_b = Tensor::uniform(5, 3, 1.0, &mut rng);
        (p, h_a, h_b)
    }

    #[test]
    fn forward_session_matches_straight_line_oracle() {
        let (p, h_a, h_b) = tiny_model(9);
        for prefix in [vec![3], vec![0, 4, 4, 1], vec![2, 1]] {
            let got = forward_session(&p, &prefix, &h_a, &h_b).unwrap();
            let xa: Vec<Vec<f64>> = prefix.iter().map(|&i| h_a.row(i).to_vec()).collect();
            let xb: Vec<Vec<f64>> = prefix.iter().map(|&i| h_b.row(i).to_vec()).collect();
            let ya = scalar_softmax_scores(&h_a, &scalar_gru(&p.gru, &xa));
            let yb = scalar_softmax_scores(&h_b, &scalar_gru(&p.gru, &xb));
            let (wa, wb) = (1.0 / (1.0 + (-0.7f64).exp()), 1.0 / (1.0 + 1.2f64.exp()));
            for i in 0..5 {
                assert!((got.y_a[i] - ya[i]).abs() < 1e-10);
                assert!((got.y_b[i] - yb[i]).abs() < 1e-10);
                assert!((got.y_fused[i] - (wa * ya[i] + wb * yb[i])).abs() < 1e-10);
            }
            let total: f64 = got.y_fused.iter().sum();
            assert!((total - (wa + wb)).abs() < 1e-9);
            assert!((got.y_a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let (p, h_a, h_b) = tiny_model(10);
        let bundle = forward_session(&p, &[1, 3], &h_a, &h_b).unwrap();
        for t in 0..5 {
            let direct = -bundle.y_a[t].ln() - bundle.y_b[t].ln() - bundle.y_fused[t].ln();
            assert!((loss(&bundle, t).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_streams_give_identical_heads() {
        let (p, h_a, _) = tiny_model(11);
        let b = forward_session(&p, &[4, 0], &h_a, &h_a).unwrap();
        assert_eq!(b.y_a, b.y_b);
    }

    #[test]
    fn one_gru_drives_both_streams() {
        let (mut p, h_a, h_b) = tiny_model(12);
        let before = forward_session(&p, &[2, 3], &h_a, &h_b).unwrap();
        p.gru.b_h.data_mut()[0] += 0.5;
        let after = forward_session(&p, &[2, 3], &h_a, &h_b).unwrap();
        assert_ne!(before.y_a, after.y_a);
        assert_ne!(before.y_b, after.y_b);
    }

    #[test]
    fn batch_loss_matches_per_example_loss() {
        let (p, h_a, h_b) = tiny_model(13);
        let examples = [
            TrainingExample { prefix: vec![0, 1, 2], target: 4 },
            TrainingExample { prefix: vec![3], target: 0 },
            TrainingExample { prefix: vec![2, 2], target: 2 },
        ];
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, &p, false);
        let ta = tape.constant(h_a.clone());
        let tb = tape.constant(h_b.clone());
        let refs: Vec<&TrainingExample> = examples.iter().collect();
        let l = loss_with_tables(&mut tape, &vars, ta, tb, &refs).unwrap();
        let mean: f64 = examples
            .iter()
            .map(|e| loss(&forward_session(&p, &e.prefix, &h_a, &h_b).unwrap(), e.target).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(l).data()[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn params_round_trip_through_tensor_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = Architecture { n_items: 6, dim: 3, n_anchors: 2 };
        let p = ModelParams::init(arch, &mut rng).unwrap();
        let list: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        assert_eq!(list.len(), PARAM_NAMES.len());
        assert_eq!(ModelParams::from_tensors(list).unwrap(), p);
        assert!(ModelParams::init(Architecture { n_anchors: 7, ..arch }, &mut rng).is_err());
    }
}
