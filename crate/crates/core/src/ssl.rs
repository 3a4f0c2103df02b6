//! Benign-client self-supervised training: the contrastive objective over
//! augmented view pairs, cosine similarity, and the local training loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::error::{Error, Result};
use crate::models::{encoder_features, encoder_projection, EncoderState};
use crate::tensor::{Graph, Tensor, Var};

/// Threshold past which a local training loop aborts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub local_epochs: usize,
    /// Momentum-encoder decay hook; present for algorithm variants that use
    /// a momentum target network. The default contrastive objective ignores
    /// it.
    pub momentum_decay: Option<f64>,
    pub augment: AugmentConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            batch_size: 32,
            learning_rate: 0.001,
            temperature: 0.5,
            local_epochs: 3,
            momentum_decay: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::contract("temperature must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::contract(
                "batch_size must be at least 2 (the contrastive loss needs negatives)",
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::contract("learning_rate must be non-negative"));
        }
        if let Some(m) = self.momentum_decay {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::contract("momentum_decay must lie in [0,1]"));
            }
        }
        self.augment.validate()
    }
}

/// Cosine similarity with the degenerate-input convention: zero-norm inputs
/// yield value 0 and a raised flag instead of NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSim {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<CosineSim> {
    if u.len() != v.len() {
        return Err(Error::contract(format!(
            "cosine_similarity length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::contract("cosine_similarity on empty vectors"));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(CosineSim {
            value: 0.0,
            degenerate: true,
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    Ok(CosineSim {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Row-normalize a `[n,d]` node to unit length (epsilon-guarded).
pub fn normalize_rows_node(g: &mut Graph, x: Var) -> Var {
    let sq = g.mul(x, x);
    let rs = g.row_sum(sq);
    let rse = g.add_scalar(rs, 1e-12);
    let inv = g.rsqrt(rse);
    g.row_scale(x, inv)
}

/// Normalized-temperature cross-entropy over `2n` views; `z1[i]` and `z2[i]`
/// are positives. Embeddings are L2-normalized internally.
pub fn nt_xent_node(g: &mut Graph, z1: Var, z2: Var, temperature: f64) -> Var {
    let n = g.value(z1).shape()[0];
    let u = g.concat_rows(z1, z2);
    let un = normalize_rows_node(g, u);
    let sims = g.matmul_nt(un, un);
    let scaled = g.scale(sims, 1.0 / temperature);
    // Exclude self-similarity from every softmax.
    let two_n = 2 * n;
    let mut mask = Tensor::zeros(vec![two_n, two_n]);
    for i in 0..two_n {
        mask.data_mut()[i * two_n + i] = -1e9;
    }
    let maskv = g.input(mask);
    let masked = g.add(scaled, maskv);
    let ls = g.log_softmax_rows(masked);
    let mut idx = Vec::with_capacity(two_n);
    for i in 0..n {
        idx.push((i, i + n));
    }
    for i in 0..n {
        idx.push((i + n, i));
    }
    let pos = g.select_elems(ls, idx);
    let mean = g.mean_all(pos);
    g.scale(mean, -1.0)
}

/// Contrastive loss over two embedding batches of shape `[n,d]`, `n >= 2`.
pub fn contrastive_loss(z1: &Tensor, z2: &Tensor, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::contract("temperature must be positive"));
    }
    if z1.ndim() != 2 || z2.ndim() != 2 || z1.shape() != z2.shape() {
        return Err(Error::contract(format!(
            "contrastive_loss expects equal [n,d] batches, got {:?} vs {:?}",
            z1.shape(),
            z2.shape()
        )));
    }
    if z1.shape()[0] < 2 {
        return Err(Error::contract(
            "contrastive_loss needs a batch of at least 2 (no negatives otherwise)",
        ));
    }
    let mut g = Graph::new();
    let a = g.input(z1.clone());
    let b = g.input(z2.clone());
    let l = nt_xent_node(&mut g, a, b, temperature);
    Ok(g.scalar(l))
}

/// Outcome of a local training pass.
#[derive(Debug, Clone)]
pub struct LocalTrainReport {
    pub encoder: EncoderState,
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

/// Fisher–Yates shuffle driven by the caller's stream (stable across rand
/// crate versions).
pub fn shuffle_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// `e` epochs of mini-batch SGD on the contrastive objective over augmented
/// pairs. Returns the updated encoder and its loss trace.
pub fn benign_local_train(
    encoder: &EncoderState,
    images: &[Tensor],
    cfg: &SslConfig,
    rng: &mut impl Rng,
) -> Result<LocalTrainReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::contract("benign_local_train on empty dataset"));
    }
    let mut state = encoder.clone();
    let mut history = Vec::new();
    let mut steps = 0usize;
    for _epoch in 0..cfg.local_epochs {
        let order = shuffle_indices(images.len(), rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // no negatives in a singleton batch
            }
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pair = augment_pair(&images[i], &cfg.augment, rng)?;
                v1.push(pair.view1);
                v2.push(pair.view2);
            }
            let b1 = Tensor::stack(&v1.iter().collect::<Vec<_>>());
            let b2 = Tensor::stack(&v2.iter().collect::<Vec<_>>());

            let mut g = Graph::new();
            let bound = state.params.bind(&mut g);
            let x1 = g.input(b1);
            let x2 = g.input(b2);
            let f1 = encoder_features(&mut g, &bound, &state.config, x1);
            let f2 = encoder_features(&mut g, &bound, &state.config, x2);
            let p1 = encoder_projection(&mut g, &bound, &f1);
            let p2 = encoder_projection(&mut g, &bound, &f2);
            let loss = nt_xent_node(&mut g, p1, p2, cfg.temperature);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: steps,
                    value,
                });
            }
            if value > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    last: value,
                    steps,
                    threshold: DIVERGENCE_THRESHOLD,
                });
            }
            g.backward(loss);
            state.params.sgd_step(&g, &bound, cfg.learning_rate);
            history.push(value);
            steps += 1;
        }
    }
    Ok(LocalTrainReport {
        encoder: state,
        loss_history: history,
        steps,
    })
}
