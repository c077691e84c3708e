//! Checkpoint file: magic line, text manifest, then raw tensors.
//!
//! ```text
//! GSNIAS1
//! config <key> <value>          (one line per TrainConfig field)
//! epochs_trained <n>
//! epoch_losses <f> <f> ...
//! adam_step <t>
//! anchors <i> <i> ...
//! counts <c> <c> ...
//! vocab <n>
//! <label>                        (n lines)
//! adjacency <n>
//! <j> <j> ...                    (n lines, sampled neighbors of node i)
//! tensor <name> <rows> <cols>    (one line per tensor, in payload order)
//! end
//! <payload: row-major f64 little-endian>
//! ```
//!
//! Floats in the manifest use the shortest representation that parses back
//! to the same value.

use std::path::Path;

use crate::anchors::AnchorSet;
use crate::autodiff::Tensor;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::graph::SampledAdjacency;
use crate::model::{ModelParams, PARAM_NAMES};
use crate::optim::AdamState;
use crate::train::{Checkpoint, TrainConfig};

pub const MAGIC: &[u8] = b"GSNIAS1\n";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn config_lines(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("dim", c.dim.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("lr", c.lr.to_string()),
        ("lr_decay", c.lr_decay.to_string()),
        ("decay_every", c.decay_every.to_string()),
        ("l2", c.l2.to_string()),
        ("window", c.window.to_string()),
        ("iterations", c.iterations.to_string()),
        ("layers", c.layers.to_string()),
        ("anchors", c.anchors.to_string()),
        ("neighbors", c.neighbors.to_string()),
        ("epochs", c.epochs.to_string()),
        ("seed", c.seed.to_string()),
        ("max_session_len", c.max_session_len.to_string()),
        ("refresh", c.refresh.to_string()),
    ]
}

fn set_config(c: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| bad(format!("bad value {v:?} for config {key}")))
    }
    match key {
        "dim" => c.dim = num(key, value)?,
        "batch_size" => c.batch_size = num(key, value)?,
        "lr" => c.lr = num(key, value)?,
        "lr_decay" => c.lr_decay = num(key, value)?,
        "decay_every" => c.decay_every = num(key, value)?,
        "l2" => c.l2 = num(key, value)?,
        "window" => c.window = num(key, value)?,
        "iterations" => c.iterations = num(key, value)?,
        "layers" => c.layers = num(key, value)?,
        "anchors" => c.anchors = num(key, value)?,
        "neighbors" => c.neighbors = num(key, value)?,
        "epochs" => c.epochs = num(key, value)?,
        "seed" => c.seed = num(key, value)?,
        "max_session_len" => c.max_session_len = num(key, value)?,
        "refresh" => c.refresh = value.parse().map_err(|_| bad(format!("bad refresh {value:?}")))?,
        other => return Err(bad(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

fn tensor_list(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = PARAM_NAMES
        .iter()
        .zip(ckpt.params.tensors())
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    for (n, t) in PARAM_NAMES.iter().zip(&ckpt.optimizer.m) {
        out.push((format!("adam.m.{n}"), t));
    }
    for (n, t) in PARAM_NAMES.iter().zip(&ckpt.optimizer.v) {
        out.push((format!("adam.v.{n}"), t));
    }
    out
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut text = String::new();
    for (k, v) in config_lines(&ckpt.config) {
        text += &format!("config {k} {v}\n");
    }
    text += &format!("epochs_trained {}\n", ckpt.epochs_trained);
    text += &format!("epoch_losses {}\n", join(&ckpt.epoch_losses));
    text += &format!("adam_step {}\n", ckpt.optimizer.t);
    text += &format!("anchors {}\n", join(ckpt.anchors.indices()));
    text += &format!("counts {}\n", join(&ckpt.item_counts));
    text += &format!("vocab {}\n", ckpt.vocab.len());
    for label in ckpt.vocab.labels() {
        if label.contains('\n') || label.contains('\r') {
            return Err(bad(format!("item label {label:?} contains a line break")));
        }
        text += label;
        text.push('\n');
    }
    text += &format!("adjacency {}\n", ckpt.adjacency.n_nodes());
    for list in ckpt.adjacency.lists() {
        text += &join(list);
        text.push('\n');
    }
    let tensors = tensor_list(ckpt);
    for (name, t) in &tensors {
        text += &format!("tensor {name} {} {}\n", t.rows(), t.cols());
    }
    text += "end\n";

    let mut bytes = MAGIC.to_vec();
    bytes.extend_from_slice(text.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

struct Lines<'a> {
    rest: &'a [u8],
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let pos = self
            .rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest"))?;
        let line = std::str::from_utf8(&self.rest[..pos]).map_err(|_| bad("manifest is not UTF-8"))?;
        self.rest = &self.rest[pos + 1..];
        self.line_no += 1;
        Ok(line)
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            None if line == key => Ok(""),
            _ => Err(bad(format!("line {}: expected {key:?}, got {line:?}", self.line_no))),
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|x| x.parse().map_err(|_| bad(format!("bad {what} entry {x:?}"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| bad(format!("bad {what} {s:?}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let body = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing GSNIAS1 magic"))?;
    let mut lines = Lines { rest: body, line_no: 1 };

    let mut config = TrainConfig::default();
    let n_config = config_lines(&config).len();
    for _ in 0..n_config {
        let rest = lines.keyed("config")?;
        let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("malformed config {rest:?}")))?;
        set_config(&mut config, k, v)?;
    }
    let epochs_trained = parse_one(lines.keyed("epochs_trained")?, "epochs_trained")?;
    let epoch_losses = parse_list(lines.keyed("epoch_losses")?, "epoch_losses")?;
    let adam_t = parse_one(lines.keyed("adam_step")?, "adam_step")?;
    let anchor_idx: Vec<usize> = parse_list(lines.keyed("anchors")?, "anchors")?;
    let item_counts: Vec<usize> = parse_list(lines.keyed("counts")?, "counts")?;

    let n_vocab: usize = parse_one(lines.keyed("vocab")?, "vocab size")?;
    let mut labels = Vec::with_capacity(n_vocab);
    for _ in 0..n_vocab {
        labels.push(lines.next()?.to_string());
    }
    let vocab = Vocab::from_labels(labels).map_err(|e| bad(e.to_string()))?;

    let n_adj: usize = parse_one(lines.keyed("adjacency")?, "adjacency size")?;
    let mut lists = Vec::with_capacity(n_adj);
    for _ in 0..n_adj {
        lists.push(parse_list(lines.next()?, "adjacency")?);
    }
    let adjacency = SampledAdjacency::from_lists(lists).map_err(|e| bad(e.to_string()))?;

    let mut shapes = Vec::new();
    loop {
        let line = lines.next()?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["tensor", name, r, c] => {
                shapes.push((name.to_string(), parse_one::<usize>(r, "rows")?, parse_one::<usize>(c, "cols")?))
            }
            _ => return Err(bad(format!("line {}: unexpected {line:?}", lines.line_no))),
        }
    }
    let n_params = PARAM_NAMES.len();
    if shapes.len() != 3 * n_params {
        return Err(bad(format!("expected {} tensors, found {}", 3 * n_params, shapes.len())));
    }

    let mut payload = lines.rest;
    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, (name, r, c)) in shapes.iter().enumerate() {
        let expected = match i / n_params {
            0 => PARAM_NAMES[i].to_string(),
            1 => format!("adam.m.{}", PARAM_NAMES[i % n_params]),
            _ => format!("adam.v.{}", PARAM_NAMES[i % n_params]),
        };
        if *name != expected {
            return Err(bad(format!("tensor {i} is {name:?}, expected {expected:?}")));
        }
        let len = r * c;
        if payload.len() < len * 8 {
            return Err(bad(format!("payload truncated in tensor {name}")));
        }
        let data: Vec<f64> = payload[..len * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        payload = &payload[len * 8..];
        tensors.push(Tensor::new(*r, *c, data)?);
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing bytes after payload", payload.len())));
    }

    let v = tensors.split_off(2 * n_params);
    let m = tensors.split_off(n_params);
    let params = ModelParams::from_tensors(tensors).map_err(|e| bad(e.to_string()))?;
    for (p, (mm, vv)) in params.tensors().iter().zip(m.iter().zip(&v)) {
        if p.shape() != mm.shape() || p.shape() != vv.shape() {
            return Err(bad("optimizer moment shapes disagree with parameters"));
        }
    }
    let n = params.architecture().n_items;
    if vocab.len() != n || adjacency.n_nodes() != n || item_counts.len() != n {
        return Err(bad(format!(
            "inconsistent item counts: vocab {}, adjacency {}, counts {}, embeddings {n}",
            vocab.len(),
            adjacency.n_nodes(),
            item_counts.len()
        )));
    }
    let anchors = AnchorSet::from_indices(anchor_idx, n).map_err(|e| bad(e.to_string()))?;
    if anchors.len() != params.architecture().n_anchors {
        return Err(bad("anchor count disagrees with encoder shape"));
    }
    Ok(Checkpoint {
        config,
        vocab,
        anchors,
        adjacency,
        item_counts,
        params,
        optimizer: AdamState { m, v, t: adam_t },
        epochs_trained,
        epoch_losses,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
