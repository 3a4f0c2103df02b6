//! Downstream probing and metrics: frozen-encoder classifier heads,
//! clean/backdoored accuracy and attack success rate, image quality
//! (windowed SSIM, PSNR, a feature-space perceptual proxy), the
//! poisoned-vs-augmented separability probe, and PCA embedding dumps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::Trigger;
use crate::error::{Error, Result};
use crate::models::{head_logits, init_head, EncoderState, HeadConfig};
use crate::ssl::{shuffle_indices, DIVERGENCE_THRESHOLD};
use crate::tensor::nn::{Adam, ParamSet};
use crate::tensor::{Graph, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 60,
            learning_rate: 0.01,
            batch_size: 64,
        }
    }
}

/// A frozen encoder plus a trained two-layer classification head. Features
/// are centered on the training mean before the head; the mean is part of
/// the probe.
#[derive(Debug, Clone)]
pub struct DownstreamProbe {
    pub encoder: EncoderState,
    pub head: ParamSet,
    pub head_cfg: HeadConfig,
    pub feature_mean: Vec<f64>,
    /// Training accuracy per epoch.
    pub accuracy_history: Vec<f64>,
}

impl DownstreamProbe {
    pub fn classes(&self) -> usize {
        self.head_cfg.classes
    }

    /// Head logits over encoder features of an image batch.
    pub fn logits(&self, images: &Tensor) -> Tensor {
        let feats = self.encoder.features(images);
        self.logits_from_features(&feats)
    }

    pub fn logits_from_features(&self, features: &Tensor) -> Tensor {
        let mut centered = features.clone();
        let d = self.feature_mean.len();
        for (i, v) in centered.data_mut().iter_mut().enumerate() {
            *v -= self.feature_mean[i % d];
        }
        let mut g = Graph::new();
        let bound = self.head.bind_frozen(&mut g);
        let x = g.input(centered);
        let l = head_logits(&mut g, &bound, x);
        g.value(l).clone()
    }

    pub fn predict(&self, images: &Tensor) -> Vec<usize> {
        argmax_rows(&self.logits(images))
    }

    /// Softmax probabilities per sample.
    pub fn probabilities(&self, images: &Tensor) -> Tensor {
        let logits = self.logits(images);
        softmax_rows(&logits)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..k {
            out[i * k + j] = (row[j] - mx).exp();
            denom += out[i * k + j];
        }
        for j in 0..k {
            out[i * k + j] /= denom;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Train a two-layer head on precomputed `[n,d]` features with
/// cross-entropy. Features are centered on their mean first (one-sided
/// activations otherwise leave hidden units dead for every sample at once);
/// the mean is returned with the head.
pub fn train_head_on_features(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    rng: &mut impl Rng,
) -> Result<(ParamSet, Vec<f64>, Vec<f64>)> {
    if features.ndim() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::contract("features and labels must align"));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::contract("label outside the configured class range"));
    }
    let n = labels.len();
    let d = features.shape()[1];
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += features.data()[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered = {
        let mut c = features.clone();
        for (i, v) in c.data_mut().iter_mut().enumerate() {
            *v -= mean[i % d];
        }
        c
    };
    let features = &centered;
    let head_cfg = HeadConfig {
        hidden: cfg.hidden,
        classes,
    };
    let mut head = init_head(&head_cfg, d, rng);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let order = shuffle_indices(n, rng);
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * d);
            let mut idx = Vec::with_capacity(chunk.len());
            for (pos, &i) in chunk.iter().enumerate() {
                batch.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
                idx.push((pos, labels[i]));
            }
            let mut g = Graph::new();
            let bound = head.bind(&mut g);
            let x = g.input(Tensor::new(vec![chunk.len(), d], batch));
            let logits = head_logits(&mut g, &bound, x);
            let preds = argmax_rows(g.value(logits));
            correct += preds
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == labels[i])
                .count();
            let ls = g.log_softmax_rows(logits);
            let sel = g.select_elems(ls, idx);
            let mean = g.mean_all(sel);
            let loss = g.scale(mean, -1.0);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { batch: 0, value });
            }
            if value > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    last: value,
                    steps: history.len(),
                    threshold: DIVERGENCE_THRESHOLD,
                });
            }
            g.backward(loss);
            head.adam_step(&g, &bound, &mut adam);
        }
        history.push(correct as f64 / n as f64);
    }
    Ok((head, history, mean))
}

/// Train a downstream probe on a frozen encoder with labeled data.
pub fn train_probe(
    encoder: &EncoderState,
    images: &[Tensor],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    rng: &mut impl Rng,
) -> Result<DownstreamProbe> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::contract("probe needs aligned nonempty images/labels"));
    }
    let batch = Tensor::stack(&images.iter().collect::<Vec<_>>());
    let features = encoder.features(&batch);
    let (head, accuracy_history, feature_mean) =
        train_head_on_features(&features, labels, classes, cfg, rng)?;
    Ok(DownstreamProbe {
        encoder: encoder.clone(),
        head,
        head_cfg: HeadConfig {
            hidden: cfg.hidden,
            classes,
        },
        feature_mean,
        accuracy_history,
    })
}

/// One line of the per-sample prediction log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct PredictionRecord {
    pub id: usize,
    pub true_label: usize,
    pub predicted: usize,
    pub triggered: bool,
}

/// Classification accuracy as a percentage.
pub fn accuracy_percent(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    100.0 * records.iter().filter(|r| r.predicted == r.true_label).count() as f64
        / records.len() as f64
}

/// Predict a labeled set, producing the authoritative per-sample log.
pub fn predict_with_log(
    probe: &DownstreamProbe,
    images: &[Tensor],
    labels: &[usize],
    triggered: bool,
) -> Result<Vec<PredictionRecord>> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::contract("prediction needs aligned nonempty inputs"));
    }
    let batch = Tensor::stack(&images.iter().collect::<Vec<_>>());
    let preds = probe.predict(&batch);
    Ok(preds
        .into_iter()
        .enumerate()
        .map(|(i, p)| PredictionRecord {
            id: i,
            true_label: labels[i],
            predicted: p,
            triggered,
        })
        .collect())
}

/// Attack success rate: the percentage of triggered non-target-class test
/// samples classified as the target. Genuine target-class samples are
/// excluded first.
pub fn compute_asr(
    probe: &DownstreamProbe,
    test_images: &[Tensor],
    test_labels: &[usize],
    trigger: &Trigger,
    target_class: usize,
) -> Result<(f64, Vec<PredictionRecord>)> {
    if test_images.is_empty() || test_images.len() != test_labels.len() {
        return Err(Error::contract("compute_asr needs aligned nonempty inputs"));
    }
    let keep: Vec<usize> = (0..test_images.len())
        .filter(|&i| test_labels[i] != target_class)
        .collect();
    if keep.is_empty() {
        return Err(Error::contract(
            "test set contains only target-class samples",
        ));
    }
    let refs: Vec<&Tensor> = keep.iter().map(|&i| &test_images[i]).collect();
    let clean = Tensor::stack(&refs);
    let poisoned = trigger.apply(&clean)?;
    let preds = probe.predict(&poisoned);
    let records: Vec<PredictionRecord> = preds
        .iter()
        .zip(&keep)
        .map(|(&p, &i)| PredictionRecord {
            id: i,
            true_label: test_labels[i],
            predicted: p,
            triggered: true,
        })
        .collect();
    let hits = preds.iter().filter(|&&p| p == target_class).count();
    Ok((100.0 * hits as f64 / keep.len() as f64, records))
}

// ---- image quality ----

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (K1 * L)^2 for L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mean structural similarity over valid 11x11 Gaussian windows and all
/// channels of two `[3,h,w]` images in `[0,1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.ndim() != 3 {
        return Err(Error::contract("ssim expects [c,h,w] images"));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let kernel = gaussian_kernel();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        // Separable weighted moments.
        let mua = filter2(pa, h, w, &kernel);
        let mub = filter2(pb, h, w, &kernel);
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let saa = filter2(&paa, h, w, &kernel);
        let sbb = filter2(&pbb, h, w, &kernel);
        let sab = filter2(&pab, h, w, &kernel);
        for y in 0..oh {
            for x in 0..ow {
                let i = y * ow + x;
                let (ma, mb) = (mua[i], mub[i]);
                let va = saa[i] - ma * ma;
                let vb = sbb[i] - mb * mb;
                let cov = sab[i] - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Valid-mode separable Gaussian filter, returning `(h-10) x (w-10)` values.
fn filter2(img: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * img[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB for `[0,1]` images; identical images
/// report the documented cap instead of infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Feature-space distance proxy for perceptual difference: L2 distance of
/// backbone features normalized by the feature dimension.
pub fn perceptual_proxy(encoder: &EncoderState, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract("perceptual_proxy shape mismatch"));
    }
    let batch_a = Tensor::stack(&[a]);
    let batch_b = Tensor::stack(&[b]);
    let fa = encoder.features(&batch_a);
    let fb = encoder.features(&batch_b);
    perceptual_proxy_features(&fa, &fb)
}

/// The same proxy on precomputed single-row feature matrices.
pub fn perceptual_proxy_features(fa: &Tensor, fb: &Tensor) -> Result<f64> {
    if fa.shape() != fb.shape() {
        return Err(Error::contract("feature shape mismatch"));
    }
    let d = fa.len() as f64;
    let dist = fa
        .data()
        .iter()
        .zip(fb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(dist / d)
}

// ---- separability probes ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntanglementReport {
    /// Held-out accuracy of the binary separator: near 0.5 means the two
    /// sets are entangled, high means decoupled.
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Train a linear separator on raw pixels to distinguish set A (poisoned)
/// from set B (augmented); report held-out accuracy over a disjoint split.
pub fn entanglement_probe(
    set_a: &[Tensor],
    set_b: &[Tensor],
    rng: &mut impl Rng,
) -> Result<EntanglementReport> {
    if set_a.len() < 50 || set_b.len() < 50 {
        return Err(Error::contract(
            "entanglement probe needs at least 50 samples per set",
        ));
    }
    let ratio = set_a.len().max(set_b.len()) as f64 / set_a.len().min(set_b.len()) as f64;
    if ratio > 4.0 {
        return Err(Error::contract(format!(
            "class imbalance {ratio:.2}:1 exceeds 4:1"
        )));
    }
    let d = set_a[0].len();
    if set_b[0].len() != d {
        return Err(Error::contract("sets must share an image shape"));
    }
    fn split_by(
        set: &[Tensor],
        order: &[usize],
        d: usize,
    ) -> (Vec<Tensor>, Vec<Tensor>) {
        let flat = |t: &Tensor| Tensor::new(vec![1, d], t.data().to_vec());
        let half = set.len() / 2;
        let train = order[..half].iter().map(|&i| flat(&set[i])).collect();
        let test = order[half..].iter().map(|&i| flat(&set[i])).collect();
        (train, test)
    }
    // Equal-size sets share one position permutation, so identical sets
    // split identically and every image lands wholly in train or test.
    let order_a = shuffle_indices(set_a.len(), rng);
    let order_b = if set_b.len() == set_a.len() {
        order_a.clone()
    } else {
        shuffle_indices(set_b.len(), rng)
    };
    let (train_a, test_a) = split_by(set_a, &order_a, d);
    let (train_b, test_b) = split_by(set_b, &order_b, d);

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for t in train_a.iter() {
        rows.push(t.data().to_vec());
        labels.push(0usize);
    }
    for t in train_b.iter() {
        rows.push(t.data().to_vec());
        labels.push(1usize);
    }
    let features = Tensor::from_rows(&rows);
    let cfg = ProbeConfig {
        hidden: 8,
        epochs: 40,
        learning_rate: 0.02,
        batch_size: 64,
    };
    let (head, _, mean) = train_head_on_features(&features, &labels, 2, &cfg, rng)?;

    let eval = |set: &[Tensor], label: usize, head: &ParamSet| -> usize {
        let rows: Vec<Vec<f64>> = set
            .iter()
            .map(|t| {
                t.data()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v - mean[j % mean.len()])
                    .collect()
            })
            .collect();
        let f = Tensor::from_rows(&rows);
        let mut g = Graph::new();
        let bound = head.bind_frozen(&mut g);
        let x = g.input(f);
        let logits = head_logits(&mut g, &bound, x);
        argmax_rows(g.value(logits))
            .into_iter()
            .filter(|&p| p == label)
            .count()
    };
    let correct = eval(&test_a, 0, &head) + eval(&test_b, 1, &head);
    let test_size = test_a.len() + test_b.len();
    Ok(EntanglementReport {
        accuracy: correct as f64 / test_size as f64,
        train_size: train_a.len() + train_b.len(),
        test_size,
    })
}

// ---- PCA ----

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// `[n, k]` projected coordinates.
    pub coords: Tensor,
    /// `[k, d]` orthonormal principal directions (sign-fixed: the largest
    /// magnitude coordinate of each direction is positive).
    pub components: Tensor,
    pub explained_variance_ratio: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Mean-centered projection onto the top-`k` principal directions via a
/// Jacobi eigendecomposition of the covariance.
pub fn pca_embed(features: &Tensor, k: usize) -> Result<PcaResult> {
    if features.ndim() != 2 {
        return Err(Error::contract("pca_embed expects [n,d] features"));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n <= k {
        return Err(Error::contract(format!(
            "pca_embed needs more samples ({n}) than components ({k})"
        )));
    }
    if k == 0 || k > d {
        return Err(Error::contract("component count must be in [1, d]"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += features.data()[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] = features.data()[i * d + j] - mean[j];
        }
    }
    // Covariance (sample normalization).
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for p in 0..d {
            if row[p] == 0.0 {
                continue;
            }
            for q in p..d {
                cov[p * d + q] += row[p] * row[q];
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for p in 0..d {
        for q in p..d {
            cov[p * d + q] *= norm;
            cov[q * d + p] = cov[p * d + q];
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&cov, d);
    let total: f64 = eigvals.iter().map(|v| v.max(0.0)).sum();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).expect("finite"));

    let mut components = vec![0.0; k * d];
    let mut ratios = Vec::with_capacity(k);
    for (ci, &ei) in order.iter().take(k).enumerate() {
        let mut col: Vec<f64> = (0..d).map(|r| eigvecs[r * d + ei]).collect();
        // Deterministic sign: largest-magnitude coordinate positive.
        let mut arg = 0usize;
        for (j, v) in col.iter().enumerate() {
            if v.abs() > col[arg].abs() {
                arg = j;
            }
        }
        if col[arg] < 0.0 {
            for v in col.iter_mut() {
                *v = -*v;
            }
        }
        components[ci * d..(ci + 1) * d].copy_from_slice(&col);
        ratios.push(if total > 0.0 {
            eigvals[ei].max(0.0) / total
        } else {
            0.0
        });
    }
    // coords = centered * components^T
    let mut coords = vec![0.0; n * k];
    for i in 0..n {
        for ci in 0..k {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[i * d + j] * components[ci * d + j];
            }
            coords[i * k + ci] = acc;
        }
    }
    Ok(PcaResult {
        coords: Tensor::new(vec![n, k], coords),
        components: Tensor::new(vec![k, d], components),
        explained_variance_ratio: ratios,
        mean,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(m: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() < 1e-13 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for j in 0..d {
                    let ajp = a[j * d + p];
                    let ajq = a[j * d + q];
                    a[j * d + p] = c * ajp - s * ajq;
                    a[j * d + q] = s * ajp + c * ajq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for j in 0..d {
                    let vjp = v[j * d + p];
                    let vjq = v[j * d + q];
                    v[j * d + p] = c * vjp - s * vjq;
                    v[j * d + q] = s * vjp + c * vjq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

/// Centroid separation of two coordinate clouds in pooled-standard-
/// deviation units.
pub fn centroid_separation(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::contract("coordinate clouds must share width"));
    }
    let k = a.shape()[1];
    let stats = |t: &Tensor| {
        let n = t.shape()[0];
        let mut mean = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                mean[j] += t.data()[i * k + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = 0.0;
        for i in 0..n {
            for j in 0..k {
                let dv = t.data()[i * k + j] - mean[j];
                var += dv * dv;
            }
        }
        (mean, var / (n as f64))
    };
    let (ma, va) = stats(a);
    let (mb, vb) = stats(b);
    let dist = ma
        .iter()
        .zip(&mb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let pooled = ((va + vb) / 2.0).sqrt().max(1e-12);
    Ok(dist / pooled)
}

/// Summary metrics of one evaluated experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub ca: f64,
    pub ba: f64,
    pub asr: f64,
    pub ssim_mean: f64,
    pub psnr_mean: f64,
    pub perceptual_proxy_mean: f64,
    pub entanglement_accuracy: f64,
    pub pca_centroid_separation: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = crate::rng::derive(seed, &[0xee]);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen()).collect())
    }

    #[test]
    fn separable_features_reach_full_training_accuracy() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = crate::rng::derive(91, &[1]);
        for i in 0..80 {
            let cls = i % 2;
            let base = if cls == 0 { -2.0 } else { 2.0 };
            rows.push(vec![
                base + rng.gen_range(-0.1..0.1),
                -base + rng.gen_range(-0.1..0.1),
            ]);
            labels.push(cls);
        }
        let features = Tensor::from_rows(&rows);
        let cfg = ProbeConfig {
            hidden: 8,
            epochs: 60,
            learning_rate: 0.05,
            batch_size: 16,
        };
        let (_, history, _) =
            train_head_on_features(&features, &labels, 2, &cfg, &mut rng).unwrap();
        assert!(
            (history.last().unwrap() - 1.0).abs() < 1e-9,
            "history tail {:?}",
            &history[history.len().saturating_sub(3)..]
        );
    }

    #[test]
    fn zero_epochs_predicts_at_chance() {
        let mut rng = crate::rng::derive(91, &[2]);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let features = Tensor::from_rows(&rows);
        let cfg = ProbeConfig {
            hidden: 8,
            epochs: 0,
            learning_rate: 0.05,
            batch_size: 32,
        };
        let (head, history, _mean) =
            train_head_on_features(&features, &labels, 2, &cfg, &mut rng).unwrap();
        assert!(history.is_empty());
        // Random head on random features: accuracy near 1/2.
        let mut g = Graph::new();
        let bound = head.bind_frozen(&mut g);
        let x = g.input(features.clone());
        let logits = head_logits(&mut g, &bound, x);
        let preds = argmax_rows(g.value(logits));
        let acc = preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count() as f64
            / 400.0;
        assert!((0.3..=0.7).contains(&acc), "chance-level check: {acc}");
    }

    #[test]
    fn probe_training_is_deterministic() {
        let mut rng = crate::rng::derive(91, &[3]);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let features = Tensor::from_rows(&rows);
        let cfg = ProbeConfig::default();
        let run = || {
            let mut r = crate::rng::derive(5, &[4]);
            train_head_on_features(&features, &labels, 3, &cfg, &mut r).unwrap()
        };
        let (h1, a1, m1) = run();
        let (h2, a2, m2) = run();
        assert_eq!(m1, m2);
        assert_eq!(h1.flatten(), h2.flatten());
        assert_eq!(a1, a2);
    }

    #[test]
    fn asr_is_hundred_for_constant_target_probe() {
        // Head biased so class `target` always wins.
        let enc = EncoderState::init(
            crate::models::EncoderConfig {
                base_channels: 2,
                proj_hidden: 4,
                proj_dim: 4,
                ..crate::models::EncoderConfig::default()
            },
            &mut crate::rng::derive(91, &[5]),
        );
        let mut head = init_head(
            &HeadConfig {
                hidden: 4,
                classes: 3,
            },
            enc.config.feature_dim(),
            &mut crate::rng::derive(91, &[6]),
        );
        head.get_mut("h2.b").data_mut()[1] = 100.0;
        let feat_dim = enc.config.feature_dim();
        let probe = DownstreamProbe {
            encoder: enc,
            head,
            head_cfg: HeadConfig {
                hidden: 4,
                classes: 3,
            },
            feature_mean: vec![0.0; feat_dim],
            accuracy_history: vec![],
        };
        let images: Vec<Tensor> = (0..6).map(|i| rand_image(100 + i, 8, 8)).collect();
        let labels = vec![0, 0, 2, 2, 1, 0];
        let (asr, records) =
            compute_asr(&probe, &images, &labels, &Trigger::Identity, 1).unwrap();
        assert_eq!(asr, 100.0);
        // Target-class samples excluded: 5 records, none with true label 1.
        assert_eq!(records.len(), 5);
        assert!(records.iter().all(|r| r.true_label != 1));
    }

    #[test]
    fn identity_trigger_asr_equals_confusion_rate() {
        let enc = EncoderState::init(
            crate::models::EncoderConfig {
                base_channels: 2,
                proj_hidden: 4,
                proj_dim: 4,
                ..crate::models::EncoderConfig::default()
            },
            &mut crate::rng::derive(91, &[7]),
        );
        let head = init_head(
            &HeadConfig {
                hidden: 4,
                classes: 3,
            },
            enc.config.feature_dim(),
            &mut crate::rng::derive(91, &[8]),
        );
        let feat_dim = enc.config.feature_dim();
        let probe = DownstreamProbe {
            encoder: enc,
            head,
            head_cfg: HeadConfig {
                hidden: 4,
                classes: 3,
            },
            feature_mean: vec![0.0; feat_dim],
            accuracy_history: vec![],
        };
        let images: Vec<Tensor> = (0..20).map(|i| rand_image(200 + i, 8, 8)).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let target = 2usize;
        let (asr, _) = compute_asr(&probe, &images, &labels, &Trigger::Identity, target).unwrap();
        // Confusion column: clean predictions of non-target samples equal to
        // the target class.
        let keep: Vec<usize> = (0..20).filter(|&i| labels[i] != target).collect();
        let refs: Vec<&Tensor> = keep.iter().map(|&i| &images[i]).collect();
        let preds = probe.predict(&Tensor::stack(&refs));
        let expect =
            100.0 * preds.iter().filter(|&&p| p == target).count() as f64 / keep.len() as f64;
        assert_eq!(asr, expect);
    }

    #[test]
    fn accuracy_recomputable_from_prediction_log() {
        let records = vec![
            PredictionRecord { id: 0, true_label: 1, predicted: 1, triggered: false },
            PredictionRecord { id: 1, true_label: 0, predicted: 1, triggered: false },
            PredictionRecord { id: 2, true_label: 2, predicted: 2, triggered: false },
            PredictionRecord { id: 3, true_label: 2, predicted: 0, triggered: false },
        ];
        assert_eq!(accuracy_percent(&records), 50.0);
    }

    /// Direct nested-loop SSIM over valid windows, written independently of
    /// the separable implementation.
    fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let kernel = gaussian_kernel();
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for oy in 0..=(h - SSIM_WINDOW) {
                for ox in 0..=(w - SSIM_WINDOW) {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let wgt = kernel[ky] * kernel[kx];
                            let va = a.data()[(ch * h + oy + ky) * w + ox + kx];
                            let vb = b.data()[(ch * h + oy + ky) * w + ox + kx];
                            ma += wgt * va;
                            mb += wgt * vb;
                            saa += wgt * va * va;
                            sbb += wgt * vb * vb;
                            sab += wgt * va * vb;
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_identical_images_is_one() {
        let a = rand_image(300, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_reference_and_is_symmetric() {
        let a = rand_image(301, 16, 16);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = 1.0 - *v;
        }
        let got = ssim(&a, &b).unwrap();
        assert!(got < 1.0);
        let expect = ssim_reference(&a, &b);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        assert!((ssim(&b, &a).unwrap() - got).abs() < 1e-12);

        let c = rand_image(302, 16, 16);
        let got2 = ssim(&a, &c).unwrap();
        let expect2 = ssim_reference(&a, &c);
        assert!((got2 - expect2).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = rand_image(303, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn psnr_closed_form_and_cap() {
        let a = Tensor::full(vec![3, 4, 4], 0.5);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += 0.1; // MSE = 0.01 exactly
        }
        let got = psnr(&a, &b).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "psnr {got}");
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&b, &a).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn proxy_zero_and_homogeneous() {
        let fa = Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(perceptual_proxy_features(&fa, &fa).unwrap(), 0.0);
        let fb = Tensor::new(vec![1, 4], vec![0.0, 1.0, 2.0, -1.0]);
        let base = perceptual_proxy_features(&fa, &fb).unwrap();
        // Hand value: ||diff|| / d.
        let expect = (1.0f64 + 9.0 + 2.25 + 16.0).sqrt() / 4.0;
        assert!((base - expect).abs() < 1e-12);
        let scale = |t: &Tensor, c: f64| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| c * v).collect(),
            )
        };
        let scaled = perceptual_proxy_features(&scale(&fa, 2.5), &scale(&fb, 2.5)).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-12);
    }

    #[test]
    fn entanglement_identical_sets_sit_at_chance() {
        let imgs: Vec<Tensor> = (0..60).map(|i| rand_image(400 + i, 6, 6)).collect();
        let mut rng = crate::rng::derive(91, &[9]);
        let report = entanglement_probe(&imgs, &imgs, &mut rng).unwrap();
        assert!(
            (report.accuracy - 0.5).abs() <= 0.05,
            "identical sets should be inseparable: {}",
            report.accuracy
        );
    }

    #[test]
    fn entanglement_bright_patch_is_separable() {
        let plain: Vec<Tensor> = (0..60).map(|i| rand_image(500 + i, 12, 12)).collect();
        let patched: Vec<Tensor> = plain
            .iter()
            .map(|t| {
                let mut p = t.clone();
                for c in 0..3 {
                    for y in 0..8 {
                        for x in 0..8 {
                            p.data_mut()[(c * 12 + y) * 12 + x] = 1.0;
                        }
                    }
                }
                p
            })
            .collect();
        let mut rng = crate::rng::derive(91, &[10]);
        let report = entanglement_probe(&patched, &plain, &mut rng).unwrap();
        assert!(
            report.accuracy >= 0.95,
            "patched vs plain should separate: {}",
            report.accuracy
        );
    }

    #[test]
    fn entanglement_rejects_imbalance() {
        let a: Vec<Tensor> = (0..50).map(|i| rand_image(600 + i, 6, 6)).collect();
        let b: Vec<Tensor> = (0..250).map(|i| rand_image(700 + i, 6, 6)).collect();
        let mut rng = crate::rng::derive(91, &[11]);
        assert!(entanglement_probe(&a, &b, &mut rng).is_err());
    }

    #[test]
    fn pca_plane_reconstructs_exactly() {
        // Points on a 2-D plane embedded in 5-D.
        let mut rng = crate::rng::derive(91, &[12]);
        let u = [1.0, 0.0, 2.0, 0.0, -1.0];
        let v = [0.0, 3.0, 1.0, 0.5, 0.0];
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                (0..5).map(|j| a * u[j] + b * v[j]).collect()
            })
            .collect();
        let features = Tensor::from_rows(&rows);
        let pca = pca_embed(&features, 2).unwrap();
        // Reconstruction: mean + coords * components.
        for i in 0..40 {
            for j in 0..5 {
                let mut rec = pca.mean[j];
                for c in 0..2 {
                    rec += pca.coords.data()[i * 2 + c] * pca.components.data()[c * 5 + j];
                }
                assert!(
                    (rec - rows[i][j]).abs() < 1e-6,
                    "reconstruction error at ({i},{j})"
                );
            }
        }
        let ev: f64 = pca.explained_variance_ratio.iter().sum();
        assert!(ev > 1.0 - 1e-9);
    }

    #[test]
    fn pca_isotropic_gaussian_spreads_variance() {
        let mut rng = crate::rng::derive(91, &[13]);
        let d = 5;
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen();
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect()
            })
            .collect();
        let features = Tensor::from_rows(&rows);
        let pca = pca_embed(&features, 2).unwrap();
        for r in &pca.explained_variance_ratio {
            assert!((r - 1.0 / d as f64).abs() < 0.02, "ratio {r}");
        }
    }

    #[test]
    fn pca_components_orthonormal_and_deterministic() {
        let mut rng = crate::rng::derive(91, &[14]);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let features = Tensor::from_rows(&rows);
        let a = pca_embed(&features, 3).unwrap();
        let b = pca_embed(&features, 3).unwrap();
        assert_eq!(a.coords, b.coords);
        for p in 0..3 {
            for q in 0..3 {
                let dot: f64 = (0..6)
                    .map(|j| a.components.data()[p * 6 + j] * a.components.data()[q * 6 + j])
                    .sum();
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-9, "component dot ({p},{q}) = {dot}");
            }
        }
    }

    #[test]
    fn centroid_separation_scales_with_distance() {
        let near_a = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.2, -0.1], vec![-0.1, 0.1]]);
        let near_b = Tensor::from_rows(&[vec![0.1, 0.0], vec![0.0, 0.1], vec![-0.2, 0.0]]);
        let far_b = Tensor::from_rows(&[vec![5.0, 5.0], vec![5.2, 4.9], vec![4.9, 5.1]]);
        let close = centroid_separation(&near_a, &near_b).unwrap();
        let far = centroid_separation(&near_a, &far_b).unwrap();
        assert!(close < 1.0);
        assert!(far > 2.0);
    }
}
