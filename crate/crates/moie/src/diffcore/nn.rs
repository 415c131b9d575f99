//! Dense layers, MLP stacks, checkpoint serialization, parameter hashing.
//!
//! Host-side inference (`forward_host`) and graph wiring share the same
//! kernels, so both routes produce bit-identical outputs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::graph::{Graph, NodeId};
use crate::diffcore::tensor::{affine, relu, sigmoid, softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    /// He-initialized layer (gaussian weights scaled by sqrt(2/fan_in)).
    pub fn init(din: usize, dout: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / din as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f64> = (0..din * dout).map(|_| normal.sample(rng)).collect();
        Dense {
            w: Tensor::from_rows(din, dout, data).unwrap(),
            b: Tensor::zeros(1, dout),
        }
    }

    pub fn forward_host(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), self.w.cols());
        affine(x, &self.w, &self.b, &mut out);
        out
    }
}

/// Fully-connected stack with ReLU between layers and a linear (or ReLU,
/// for feature trunks) output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_output: bool,
}

impl Mlp {
    pub fn init(dims: &[usize], relu_output: bool, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            relu_output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    /// Add this MLP's parameters and ops to a graph; returns the output
    /// node and the parameter nodes in layer order (w0, b0, w1, b1, ...).
    pub fn wire(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<(NodeId, Vec<NodeId>)> {
        let mut params = Vec::new();
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(&format!("{prefix}.{i}.w"), layer.w.clone());
            let b = g.param(&format!("{prefix}.{i}.b"), layer.b.clone());
            params.push(w);
            params.push(b);
            cur = g.affine(cur, w, b)?;
            g.rename(cur, &format!("{prefix}.{i}.affine"));
            if i < last || self.relu_output {
                cur = g.relu(cur);
            }
        }
        Ok((cur, params))
    }

    /// Copy trained parameter values back out of a graph wired by `wire`.
    pub fn read_back(&mut self, g: &Graph, params: &[NodeId]) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.w = g.param_tensor(params[2 * i]).clone();
            layer.b = g.param_tensor(params[2 * i + 1]).clone();
        }
    }

    pub fn forward_host(&self, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward_host(&cur);
            if i < last || self.relu_output {
                let mut act = Tensor::zeros(out.rows(), out.cols());
                relu(&out.data, &mut act.data);
                out = act;
            }
            cur = out;
        }
        cur
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), layer.w.clone()));
            out.push((format!("{prefix}.{i}.b"), layer.b.clone()));
        }
        out
    }

    pub fn load_params(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let wkey = format!("{prefix}.{i}.w");
            let bkey = format!("{prefix}.{i}.b");
            layer.w = map
                .get(&wkey)
                .cloned()
                .ok_or_else(|| Error::MissingArtifact(format!("checkpoint entry {wkey}")))?;
            layer.b = map
                .get(&bkey)
                .cloned()
                .ok_or_else(|| Error::MissingArtifact(format!("checkpoint entry {bkey}")))?;
        }
        Ok(())
    }
}

// ── Host-side activation helpers ─────────────────────────────────────

pub fn softmax_host(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    softmax_rows(x, &mut out);
    out
}

pub fn sigmoid_host(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    sigmoid(&x.data, &mut out.data);
    out
}

// ── Graph loss composites ────────────────────────────────────────────

/// Mean softmax cross-entropy against a one-hot target input.
pub fn wire_softmax_ce(g: &mut Graph, logits: NodeId, onehot: NodeId) -> Result<NodeId> {
    let ls = g.log_softmax(logits);
    let picked = g.mul(ls, onehot)?;
    let per_row = g.row_sum(picked);
    let neg = g.scale(per_row, -1.0);
    Ok(g.mean_all(neg))
}

/// Per-sample temperature-softened distillation loss (an [N,1] column):
///   alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T))
///   + (1 - alpha) * CE(y, student)
/// `teacher_probs` and `teacher_plogp` are precomputed constants bound as
/// inputs; gradients flow only through the student logits.
pub fn wire_kd_per_sample(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_probs: NodeId,
    teacher_plogp: NodeId,
    onehot: NodeId,
    alpha_kd: f64,
    t_kd: f64,
) -> Result<NodeId> {
    let scaled = g.scale(student_logits, 1.0 / t_kd);
    let ls_t = g.log_softmax(scaled);
    let cross = g.mul(teacher_probs, ls_t)?;
    let cross_row = g.row_sum(cross);
    let kl = g.sub(teacher_plogp, cross_row)?;
    let soft = g.scale(kl, alpha_kd * t_kd * t_kd);

    let ls = g.log_softmax(student_logits);
    let picked = g.mul(ls, onehot)?;
    let ce_row = g.row_sum(picked);
    let hard = g.scale(ce_row, -(1.0 - alpha_kd));

    g.add(soft, hard)
}

/// Teacher-side constants for `wire_kd_per_sample`: softened probabilities
/// and their entropy term sum(p ln p) per row.
pub fn kd_teacher_constants(teacher_logits: &Tensor, t_kd: f64) -> (Tensor, Tensor) {
    let mut scaled = teacher_logits.clone();
    scaled.data.iter_mut().for_each(|v| *v /= t_kd);
    let probs = softmax_host(&scaled);
    let plogp: Vec<f64> = (0..probs.rows())
        .map(|i| probs.row(i).iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum())
        .collect();
    (probs, Tensor::column(plogp))
}

/// One-hot encoding of binary labels into an [N,2] tensor.
pub fn one_hot(labels: &[u8]) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), 2);
    for (i, &y) in labels.iter().enumerate() {
        t.data[i * 2 + y as usize] = 1.0;
    }
    t
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Write named parameters as JSON {name -> {shape, row-major values}}.
/// f64 values round-trip bit-exactly through serde_json.
pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let map: BTreeMap<&str, CheckpointEntry> = entries
        .iter()
        .map(|(name, t)| {
            (
                name.as_str(),
                CheckpointEntry {
                    shape: t.shape.clone(),
                    values: t.data.clone(),
                },
            )
        })
        .collect();
    let json = serde_json::to_string_pretty(&map)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(format!("checkpoint {}", path.display())))?;
    let map: BTreeMap<String, CheckpointEntry> = serde_json::from_str(&text)?;
    map.into_iter()
        .map(|(name, e)| Ok((name, Tensor::new(e.shape, e.values)?)))
        .collect()
}

/// Content hash of named parameters (order-independent: names are sorted).
pub fn param_hash(entries: &[(String, Tensor)]) -> String {
    let mut sorted: Vec<&(String, Tensor)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, t) in sorted {
        hasher.update(name.as_bytes());
        for &d in &t.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic index shuffle for minibatching.
pub fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn host_and_graph_forward_agree_bitwise() {
        let mut rng = Rng::seed_from_u64(7);
        let mlp = Mlp::init(&[4, 8, 2], false, &mut rng);
        let x = Tensor::from_rows(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();

        let host = mlp.forward_host(&x);

        let mut g = Graph::new();
        let xin = g.input("x", 4);
        let (out, _) = mlp.wire(&mut g, xin, "m").unwrap();
        g.bind("x", x).unwrap();
        g.forward().unwrap();

        assert_eq!(host.data, g.output(out).data);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = Rng::seed_from_u64(3);
        let mlp = Mlp::init(&[5, 3], false, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let entries = mlp.named_params("net");
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (name, t) in &entries {
            let l = &loaded[name];
            assert_eq!(l.shape, t.shape);
            for (a, b) in l.data.iter().zip(&t.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn param_hash_changes_with_values() {
        let mut rng = Rng::seed_from_u64(3);
        let mlp = Mlp::init(&[5, 3], false, &mut rng);
        let h1 = param_hash(&mlp.named_params("net"));
        let mut mlp2 = mlp.clone();
        mlp2.layers[0].w.data[0] += 1e-12;
        let h2 = param_hash(&mlp2.named_params("net"));
        assert_ne!(h1, h2);
        assert_eq!(h1, param_hash(&mlp.named_params("net")));
    }

    #[test]
    fn kd_loss_is_zero_for_identical_logits_at_alpha_one() {
        let teacher = Tensor::from_rows(2, 2, vec![1.0, -1.0, 0.3, 0.7]).unwrap();
        let (probs, plogp) = kd_teacher_constants(&teacher, 20.0);

        let mut g = Graph::new();
        let student = g.input("s", 2);
        let tp = g.input("tp", 2);
        let tpl = g.input("tpl", 1);
        let oh = g.input("oh", 2);
        let per = wire_kd_per_sample(&mut g, student, tp, tpl, oh, 1.0, 20.0).unwrap();
        g.bind("s", teacher.clone()).unwrap();
        g.bind("tp", probs).unwrap();
        g.bind("tpl", plogp).unwrap();
        g.bind("oh", one_hot(&[0, 1])).unwrap();
        g.forward().unwrap();
        for &v in &g.output(per).data {
            assert!(v.abs() < 1e-12, "kd loss {v}");
        }
    }

    #[test]
    fn kd_alpha_zero_is_plain_cross_entropy() {
        let teacher = Tensor::from_rows(1, 2, vec![5.0, -5.0]).unwrap();
        let (probs, plogp) = kd_teacher_constants(&teacher, 4.0);
        let student_logits = Tensor::from_rows(1, 2, vec![0.2, 0.9]).unwrap();

        let mut g = Graph::new();
        let student = g.input("s", 2);
        let tp = g.input("tp", 2);
        let tpl = g.input("tpl", 1);
        let oh = g.input("oh", 2);
        let per = wire_kd_per_sample(&mut g, student, tp, tpl, oh, 0.0, 4.0).unwrap();
        g.bind("s", student_logits.clone()).unwrap();
        g.bind("tp", probs).unwrap();
        g.bind("tpl", plogp).unwrap();
        g.bind("oh", one_hot(&[1])).unwrap();
        g.forward().unwrap();

        let p = softmax_host(&student_logits);
        let expect = -p.at(0, 1).ln();
        assert!((g.output(per).data[0] - expect).abs() < 1e-12);
    }
}
