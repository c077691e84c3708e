//! Mini-batch training with step-decayed Adam.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{item_entropy, select_anchors, AnchorSet};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::{augment, SessionCorpus, TrainingExample, Vocab, DEFAULT_MAX_SESSION_LEN};
use crate::error::{Error, Result};
use crate::graph::{build_graph, sample_neighbors, SampledAdjacency};
use crate::gsn::{item_embeddings, normalize_rows};
use crate::model::{loss_with_tables, item_tables_tape, Architecture, ModelParams, ModelVars, Propagation};
use crate::optim::{adam_step, step_decay_lr, AdamConfig, AdamState};

/// When the propagated item embeddings are recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefreshMode {
    /// Full propagation on the tape for every mini-batch.
    PerStep,
    /// Propagated layers are computed once per epoch and held fixed; only the
    /// normalized base table stays differentiable within the epoch.
    PerEpoch,
}

impl fmt::Display for RefreshMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefreshMode::PerStep => "per_step",
            RefreshMode::PerEpoch => "per_epoch",
        })
    }
}

impl FromStr for RefreshMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" => Ok(RefreshMode::PerStep),
            "per_epoch" => Ok(RefreshMode::PerEpoch),
            other => Err(Error::Config(format!(
                "unknown refresh mode {other:?} (expected per_step or per_epoch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub l2: f64,
    /// Co-occurrence window radius.
    pub window: usize,
    /// Propagation iterations per layer.
    pub iterations: usize,
    pub layers: usize,
    pub anchors: usize,
    /// Sampled neighbors per node.
    pub neighbors: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_session_len: usize,
    pub refresh: RefreshMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            batch_size: 100,
            lr: 0.01,
            lr_decay: 0.1,
            decay_every: 3,
            l2: 1e-5,
            window: 3,
            iterations: 4,
            layers: 2,
            anchors: 50,
            neighbors: 12,
            epochs: 10,
            seed: 42,
            max_session_len: DEFAULT_MAX_SESSION_LEN,
            refresh: RefreshMode::PerStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_items: usize) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("decay_every", self.decay_every),
            ("window", self.window),
            ("iterations", self.iterations),
            ("anchors", self.anchors),
            ("neighbors", self.neighbors),
            ("max_session_len", self.max_session_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be nonnegative, got {}", self.l2)));
        }
        if self.anchors > n_items {
            return Err(Error::Config(format!(
                "anchors ({}) exceeds the number of items ({n_items})",
                self.anchors
            )));
        }
        Ok(())
    }

    pub fn propagation(&self) -> Propagation {
        Propagation {
            layers: self.layers,
            iterations: self.iterations,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: self.l2,
            ..AdamConfig::default()
        }
    }
}

/// Everything needed to score sessions or resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub anchors: AnchorSet,
    pub adjacency: SampledAdjacency,
    /// Training click count per item, used by the popularity baselines.
    pub item_counts: Vec<usize>,
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub epochs_trained: usize,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

impl Checkpoint {
    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    /// Seeded initialization: graph, sampled neighbors and anchors come from
    /// `corpus`; parameters are drawn from the config seed.
    pub fn initialize(config: &TrainConfig, corpus: &SessionCorpus) -> Result<Self> {
        let n = corpus.n_items();
        if corpus.sessions.is_empty() || n == 0 {
            return Err(Error::Empty("training corpus".into()));
        }
        config.validate(n)?;
        let graph = build_graph(corpus, config.window)?;
        let adjacency = sample_neighbors(&graph, config.neighbors)?;
        let anchors = select_anchors(&item_entropy(corpus)?, config.anchors)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(
            Architecture {
                n_items: n,
                dim: config.dim,
                n_anchors: config.anchors,
            },
            &mut rng,
        )?;
        let optimizer = AdamState::new(params.tensors().iter().map(|t| t.shape()));
        Ok(Self {
            config: config.clone(),
            vocab: corpus.vocab.clone(),
            anchors,
            adjacency,
            item_counts: corpus.item_counts(),
            params,
            optimizer,
            epochs_trained: 0,
            epoch_losses: Vec::new(),
        })
    }
}

/// Progress of one finished epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
}

pub fn train(config: &TrainConfig, corpus: &SessionCorpus) -> Result<Checkpoint> {
    train_with_progress(config, corpus, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    corpus: &SessionCorpus,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::initialize(config, corpus)?;
    let examples = augment(corpus, config.max_session_len);
    if examples.is_empty() && config.epochs > 0 {
        return Err(Error::Empty("no training examples (every session has one click)".into()));
    }
    // shuffling draws from a stream separate from initialization
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let report = run_epoch(&mut ckpt, &examples, &order, epoch)?;
        ckpt.epochs_trained += 1;
        ckpt.epoch_losses.push(report.mean_loss);
        on_epoch(&report);
    }
    Ok(ckpt)
}

fn run_epoch(
    ckpt: &mut Checkpoint,
    examples: &[TrainingExample],
    order: &[usize],
    epoch: usize,
) -> Result<EpochReport> {
    let cfg = ckpt.config.clone();
    let lr = step_decay_lr(cfg.lr, cfg.lr_decay, cfg.decay_every, epoch);
    let adam = cfg.adam(lr);
    let prop = cfg.propagation();

    // propagated layers (without the base table) for per-epoch refresh
    let frozen_layers = match cfg.refresh {
        RefreshMode::PerStep => None,
        RefreshMode::PerEpoch => {
            let full = item_embeddings(&ckpt.params.h0, &ckpt.adjacency, prop.layers, prop.iterations)?;
            let base = normalize_rows(&ckpt.params.h0)?;
            let data = full.data().iter().zip(base.data()).map(|(f, b)| f - b).collect();
            Some(Tensor::new(full.rows(), full.cols(), data)?)
        }
    };

    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, &ckpt.params, true);
        let loss = match &frozen_layers {
            None => {
                let tables = item_tables_tape(&mut tape, &vars, &ckpt.adjacency, &ckpt.anchors, prop)?;
                loss_with_tables(&mut tape, &vars, tables.h_a, tables.encoding.h_b, &batch)?
            }
            Some(layers) => {
                let base = tape.normalize_rows(vars.h0)?;
                let fixed = tape.constant(layers.clone());
                let h_a = tape.add(base, fixed)?;
                let enc = crate::anchors::item_encodings_tape(&mut tape, h_a, &ckpt.anchors, &vars.encoder)?;
                loss_with_tables(&mut tape, &vars, h_a, enc.h_b, &batch)?
            }
        };
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: b,
                loss: value,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .vars()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).rows(), tape.value(v).cols()))
            })
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params = ckpt.params.tensors_mut();
        adam_step(&mut params, &grad_refs, &mut ckpt.optimizer, &adam)?;
        total += value * batch.len() as f64;
        batches += 1;
    }
    Ok(EpochReport {
        epoch,
        lr,
        mean_loss: total / examples.len() as f64,
        batches,
    })
}
