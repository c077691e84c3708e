//! Item entropy, anchor selection and anchor-based item encodings.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::SessionCorpus;
use crate::error::{Error, Result};

/// Slope of the LeakyReLU inside the item-to-anchor encoder.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyTable {
    pub entropy: Vec<f64>,
    /// Number of sessions containing each item.
    pub session_count: Vec<usize>,
    pub total_clicks: usize,
    pub total_sessions: usize,
}

impl EntropyTable {
    /// Item indices sorted by entropy descending, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entropy.len()).collect();
        idx.sort_by(|&a, &b| self.entropy[b].total_cmp(&self.entropy[a]).then(a.cmp(&b)));
        idx
    }
}

/// For item `i` and every session `s` containing it,
/// `P = (|s| / total clicks) · (n_i / #sessions)` and `H(i) = -Σ P ln P`.
/// Natural log. A session that clicks an item several times contributes
/// one term.
pub fn item_entropy(corpus: &SessionCorpus) -> Result<EntropyTable> {
    let total_sessions = corpus.sessions.len();
    let total_clicks = corpus.total_clicks();
    if total_sessions == 0 || total_clicks == 0 {
        return Err(Error::Empty("entropy of an empty corpus".into()));
    }
    let n = corpus.n_items();
    let mut seen = vec![usize::MAX; n];
    let mut session_count = vec![0usize; n];
    for (j, s) in corpus.sessions.iter().enumerate() {
        for &i in &s.items {
            if seen[i] != j {
                seen[i] = j;
                session_count[i] += 1;
            }
        }
    }
    seen.iter_mut().for_each(|v| *v = usize::MAX);
    let mut entropy = vec![0.0; n];
    for (j, s) in corpus.sessions.iter().enumerate() {
        let session_share = s.items.len() as f64 / total_clicks as f64;
        for &i in &s.items {
            if seen[i] == j {
                continue;
            }
            seen[i] = j;
            let p = session_share * (session_count[i] as f64 / total_sessions as f64);
            entropy[i] -= p * p.ln();
        }
    }
    // -1·ln(1) evaluates to -0.0
    entropy.iter_mut().for_each(|h| *h += 0.0);
    Ok(EntropyTable {
        entropy,
        session_count,
        total_clicks,
        total_sessions,
    })
}

/// The `M` highest-entropy items, in ranking order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    indices: Vec<usize>,
}

impl AnchorSet {
    pub fn from_indices(indices: Vec<usize>, n_items: usize) -> Result<Self> {
        let mut seen = vec![false; n_items];
        for &i in &indices {
            if i >= n_items || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("invalid or repeated anchor {i}")));
            }
        }
        if indices.is_empty() {
            return Err(Error::invalid("anchor set is empty"));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn select_anchors(table: &EntropyTable, m: usize) -> Result<AnchorSet> {
    let n = table.entropy.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("need 1 <= M <= N, got M = {m}, N = {n}")));
    }
    let mut ranking = table.ranking();
    ranking.truncate(m);
    Ok(AnchorSet { indices: ranking })
}

/// Anchor transform `C = A·W_c + b_c` and the two-layer encoder
/// `β = LeakyReLU(h·W_p1 + b_p1)·W_p2 + b_p2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorEncoderParams {
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_p1: Tensor,
    pub b_p1: Tensor,
    pub w_p2: Tensor,
    pub b_p2: Tensor,
}

impl AnchorEncoderParams {
    /// Uniform in `[-1/√d, 1/√d]`.
    pub fn init<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        Self {
            w_c: Tensor::uniform(d, d, b, rng),
            b_c: Tensor::uniform(1, d, b, rng),
            w_p1: Tensor::uniform(d, d, b, rng),
            b_p1: Tensor::uniform(1, d, b, rng),
            w_p2: Tensor::uniform(d, m, b, rng),
            b_p2: Tensor::uniform(1, m, b, rng),
        }
    }

    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            w_c: Tensor::zeros(d, d),
            b_c: Tensor::zeros(1, d),
            w_p1: Tensor::zeros(d, d),
            b_p1: Tensor::zeros(1, d),
            w_p2: Tensor::zeros(d, m),
            b_p2: Tensor::zeros(1, m),
        }
    }

    pub fn n_anchors(&self) -> usize {
        self.w_p2.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_c, &self.b_c, &self.w_p1, &self.b_p1, &self.w_p2, &self.b_p2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_c,
            &mut self.b_c,
            &mut self.w_p1,
            &mut self.b_p1,
            &mut self.w_p2,
            &mut self.b_p2,
        ]
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AnchorEncoderVars {
    pub w_c: Var,
    pub b_c: Var,
    pub w_p1: Var,
    pub b_p1: Var,
    pub w_p2: Var,
    pub b_p2: Var,
}

impl AnchorEncoderVars {
    pub fn bind(tape: &mut Tape, p: &AnchorEncoderParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            w_c: put(&p.w_c),
            b_c: put(&p.b_c),
            w_p1: put(&p.w_p1),
            b_p1: put(&p.b_p1),
            w_p2: put(&p.w_p2),
            b_p2: put(&p.b_p2),
        }
    }

    pub fn vars(&self) -> [Var; 6] {
        [self.w_c, self.b_c, self.w_p1, self.b_p1, self.w_p2, self.b_p2]
    }
}

/// Tape outputs of [`item_encodings_tape`].
#[derive(Clone, Copy, Debug)]
pub struct EncodingVars {
    /// `N x M` item-anchor distribution.
    pub p: Var,
    /// `M x d` anchor encodings.
    pub c: Var,
    /// `N x d` item encodings `P·C`.
    pub h_b: Var,
}

pub fn item_encodings_tape(
    tape: &mut Tape,
    h_a: Var,
    anchors: &AnchorSet,
    params: &AnchorEncoderVars,
) -> Result<EncodingVars> {
    let m = tape.value(params.w_p2).cols();
    if m != anchors.len() {
        return Err(Error::invalid(format!(
            "encoder expects {m} anchors, anchor set has {}",
            anchors.len()
        )));
    }
    let a = tape.index_rows(h_a, anchors.indices())?;
    let aw = tape.matmul(a, params.w_c)?;
    let c = tape.add_row(aw, params.b_c)?;

    let hidden = tape.matmul(h_a, params.w_p1)?;
    let hidden = tape.add_row(hidden, params.b_p1)?;
    let hidden = tape.leaky_relu(hidden, LEAKY_SLOPE)?;
    let logits = tape.matmul(hidden, params.w_p2)?;
    let logits = tape.add_row(logits, params.b_p2)?;
    if !tape.value(logits).is_finite() {
        return Err(Error::NonFinite("item-anchor logits".into()));
    }
    let p = tape.softmax_rows(logits)?;
    let h_b = tape.matmul(p, c)?;
    if !tape.value(h_b).is_finite() {
        return Err(Error::NonFinite("item encodings".into()));
    }
    Ok(EncodingVars { p, c, h_b })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemEncoding {
    pub p: Tensor,
    pub c: Tensor,
    pub h_b: Tensor,
}

/// Plain evaluation of [`item_encodings_tape`].
pub fn item_encodings(h_a: &Tensor, anchors: &AnchorSet, params: &AnchorEncoderParams) -> Result<ItemEncoding> {
    let mut tape = Tape::new();
    let ha = tape.constant(h_a.clone());
    let vars = AnchorEncoderVars::bind(&mut tape, params, false);
    let out = item_encodings_tape(&mut tape, ha, anchors, &vars)?;
    Ok(ItemEncoding {
        p: tape.value(out.p).clone(),
        c: tape.value(out.c).clone(),
        h_b: tape.value(out.h_b).clone(),
    })
}
