//! Malicious-client local training: dual target alignment, clean-encoder
//! utility preservation, and the combined backdoor objective over the
//! trainable encoder.
//!
//! Alignment pulls poisoned-sample features toward target-class features
//! under the trainable encoder while anchoring the target features to the
//! clean reference; utility keeps clean-sample features pointing the way the
//! clean encoder points them. Both are (negated) means of cosine terms, so
//! alignment lies in [-2,2] and utility in [-1,1].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{patch_trigger, PatchBaselineConfig};
use crate::error::{Error, Result};
use crate::injector::{inject, TargetExemplars};
use crate::models::{encoder_features, EncoderState, InjectorState};
use crate::ssl::{normalize_rows_node, shuffle_indices, SslConfig, DIVERGENCE_THRESHOLD};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Downstream class triggered inputs should be classified as.
    pub target_class: usize,
    pub lambda_align: f64,
    pub lambda_uti: f64,
    /// Fraction of the malicious client's local samples passed through the
    /// trigger during encoder training.
    pub poison_ratio: f64,
    pub exemplar_count: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            target_class: 0,
            lambda_align: 1.0,
            lambda_uti: 1.0,
            poison_ratio: 0.1,
            exemplar_count: 8,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_align < 0.0 || self.lambda_uti < 0.0 {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if self.lambda_align + self.lambda_uti <= 0.0 {
            return Err(Error::contract(
                "at least one of lambda_align/lambda_uti must be positive",
            ));
        }
        if !(self.poison_ratio > 0.0 && self.poison_ratio <= 1.0) {
            return Err(Error::contract("poison_ratio must be in (0,1]"));
        }
        if self.exemplar_count == 0 {
            return Err(Error::contract("exemplar_count must be at least 1"));
        }
        Ok(())
    }
}

/// The trainable backdoored encoder plus the frozen clean snapshot of the
/// received global model.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub backdoored: EncoderState,
    pub clean: EncoderState,
}

impl EncoderPair {
    pub fn new(backdoored: EncoderState, clean: EncoderState) -> Result<Self> {
        if !backdoored.params.same_layout(&clean.params) {
            return Err(Error::contract(
                "encoder pair must share an identical architecture",
            ));
        }
        Ok(EncoderPair { backdoored, clean })
    }

    /// Start a round: both sides initialized from the received global model.
    pub fn from_global(global: &EncoderState) -> Self {
        EncoderPair {
            backdoored: global.clone().with_role(crate::models::EncoderRole::Backdoored),
            clean: global.clone(),
        }
    }
}

/// How the malicious client perturbs its samples.
pub enum Trigger<'a> {
    Injector(&'a InjectorState),
    Patch(&'a PatchBaselineConfig),
    /// Pass-through control: poisoned samples equal clean samples.
    Identity,
}

impl Trigger<'_> {
    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        match self {
            Trigger::Injector(inj) => Ok(inject(inj, batch)),
            Trigger::Patch(cfg) => patch_trigger(batch, cfg),
            Trigger::Identity => Ok(batch.clone()),
        }
    }
}

/// Row-wise cosine similarity node between two `[n,d]` feature matrices.
fn row_cosine_node(g: &mut Graph, a: Var, b: Var) -> Var {
    let na = normalize_rows_node(g, a);
    let nb = normalize_rows_node(g, b);
    let prod = g.mul(na, nb);
    g.row_sum(prod)
}

/// Alignment loss over features:
/// `-(1/n) * sum_i [ s(fp_i, ftb_i) - s(ftb_i, ftc_i) ]`
/// where `fp` are poisoned-sample features and `ftb`/`ftc` are target
/// exemplar features under the backdoored and clean encoders.
pub fn align_loss_node(g: &mut Graph, fp: Var, ftb: Var, ftc: Var) -> Var {
    let s1 = row_cosine_node(g, fp, ftb);
    let s2 = row_cosine_node(g, ftb, ftc);
    let diff = g.sub(s1, s2);
    let m = g.mean_all(diff);
    g.scale(m, -1.0)
}

/// Utility loss over features: `-(1/n) * sum_i s(fb_i, fc_i)`.
pub fn utility_loss_node(g: &mut Graph, fb: Var, fc: Var) -> Var {
    let s = row_cosine_node(g, fb, fc);
    let m = g.mean_all(s);
    g.scale(m, -1.0)
}

fn check_feature_batch(name: &str, t: &Tensor) -> Result<()> {
    if t.ndim() != 2 || t.shape()[0] == 0 {
        return Err(Error::contract(format!(
            "{name} must be a nonempty [n,d] feature matrix, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Feature-level alignment loss (the image-level op computes features and
/// delegates here).
pub fn align_loss_features(fp: &Tensor, ftb: &Tensor, ftc: &Tensor) -> Result<f64> {
    check_feature_batch("poisoned features", fp)?;
    check_feature_batch("target features (backdoored)", ftb)?;
    check_feature_batch("target features (clean)", ftc)?;
    if fp.shape() != ftb.shape() || ftb.shape() != ftc.shape() {
        return Err(Error::contract("alignment feature shapes must match"));
    }
    let mut g = Graph::new();
    let a = g.input(fp.clone());
    let b = g.input(ftb.clone());
    let c = g.input(ftc.clone());
    let node = align_loss_node(&mut g, a, b, c);
    Ok(g.scalar(node))
}

pub fn utility_loss_features(fb: &Tensor, fc: &Tensor) -> Result<f64> {
    check_feature_batch("backdoored features", fb)?;
    check_feature_batch("clean features", fc)?;
    if fb.shape() != fc.shape() {
        return Err(Error::contract("utility feature shapes must match"));
    }
    let mut g = Graph::new();
    let a = g.input(fb.clone());
    let b = g.input(fc.clone());
    let node = utility_loss_node(&mut g, a, b);
    Ok(g.scalar(node))
}

/// Alignment loss for a poisoned image batch against cycled target
/// exemplars.
pub fn align_loss(
    pair: &EncoderPair,
    poisoned_batch: &Tensor,
    targets: &TargetExemplars,
) -> Result<f64> {
    if poisoned_batch.ndim() != 4 || poisoned_batch.shape()[0] == 0 {
        return Err(Error::contract("poisoned batch must be nonempty [n,3,h,w]"));
    }
    let n = poisoned_batch.shape()[0];
    let target_batch = targets.batch_for(n);
    let fp = pair.backdoored.features(poisoned_batch);
    let ftb = pair.backdoored.features(&target_batch);
    let ftc = pair.clean.features(&target_batch);
    align_loss_features(&fp, &ftb, &ftc)
}

/// Utility loss for a clean image batch.
pub fn utility_loss(pair: &EncoderPair, clean_batch: &Tensor) -> Result<f64> {
    if clean_batch.ndim() != 4 || clean_batch.shape()[0] == 0 {
        return Err(Error::contract("clean batch must be nonempty [n,3,h,w]"));
    }
    let fb = pair.backdoored.features(clean_batch);
    let fc = pair.clean.features(clean_batch);
    utility_loss_features(&fb, &fc)
}

/// Per-step loss record of malicious training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaliciousLossRecord {
    pub align: f64,
    pub utility: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct MaliciousTrainReport {
    pub encoder: EncoderState,
    pub loss_history: Vec<MaliciousLossRecord>,
    pub steps: usize,
}

/// `e` local epochs of gradient descent on
/// `lambda_align * L_align + lambda_uti * L_uti` over the trainable encoder.
///
/// A fixed poison subset (`poison_ratio` of the local samples, at least one)
/// is drawn once per call; only those samples ever pass through the trigger.
/// Each step draws a utility batch from all local samples and an alignment
/// batch cycled from the poison subset.
pub fn malicious_local_train(
    pair: &EncoderPair,
    images: &[Tensor],
    trigger: &Trigger,
    targets: &TargetExemplars,
    attack: &AttackConfig,
    ssl: &SslConfig,
    rng: &mut impl Rng,
) -> Result<MaliciousTrainReport> {
    attack.validate()?;
    ssl.validate()?;
    if images.is_empty() {
        return Err(Error::contract("malicious_local_train on empty dataset"));
    }
    let n = images.len();
    let poison_count = ((attack.poison_ratio * n as f64).ceil() as usize).clamp(1, n);
    let poison_set: Vec<usize> = shuffle_indices(n, rng)[..poison_count].to_vec();

    let mut state = pair.backdoored.clone();
    let cfg = &pair.backdoored.config;
    let mut history = Vec::new();
    let mut steps = 0usize;

    for _epoch in 0..ssl.local_epochs {
        let order = shuffle_indices(n, rng);
        let mut poison_cursor = 0usize;
        for chunk in order.chunks(ssl.batch_size) {
            let b = chunk.len();
            let clean_refs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let clean_batch = Tensor::stack(&clean_refs);

            let poison_refs: Vec<&Tensor> = (0..b)
                .map(|k| &images[poison_set[(poison_cursor + k) % poison_count]])
                .collect();
            poison_cursor = (poison_cursor + b) % poison_count;
            let poison_src = Tensor::stack(&poison_refs);
            let poisoned = trigger.apply(&poison_src)?;
            let target_batch = targets.batch_for(b);

            let mut g = Graph::new();
            let bd = state.params.bind(&mut g);
            let cl = pair.clean.params.bind_frozen(&mut g);
            let xp = g.input(poisoned);
            let xt = g.input(target_batch);
            let xc = g.input(clean_batch);
            let fp = encoder_features(&mut g, &bd, cfg, xp);
            let ftb = encoder_features(&mut g, &bd, cfg, xt);
            let ftc = encoder_features(&mut g, &cl, &pair.clean.config, xt);
            let fb = encoder_features(&mut g, &bd, cfg, xc);
            let fc = encoder_features(&mut g, &cl, &pair.clean.config, xc);
            let align = align_loss_node(&mut g, fp, ftb, ftc);
            let uti = utility_loss_node(&mut g, fb, fc);
            let wa = g.scale(align, attack.lambda_align);
            let wu = g.scale(uti, attack.lambda_uti);
            let total = g.add(wa, wu);

            let record = MaliciousLossRecord {
                align: g.scalar(align),
                utility: g.scalar(uti),
                total: g.scalar(total),
            };
            if !record.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: steps,
                    value: record.total,
                });
            }
            if record.total > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    last: record.total,
                    steps,
                    threshold: DIVERGENCE_THRESHOLD,
                });
            }
            g.backward(total);
            state.params.sgd_step(&g, &bd, ssl.learning_rate);
            history.push(record);
            steps += 1;
        }
    }
    Ok(MaliciousTrainReport {
        encoder: state,
        loss_history: history,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EncoderConfig;
    use rand::Rng;

    fn hand_cosine(a: &[f64], b: &[f64]) -> f64 {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    }

    #[test]
    fn align_perfect_alignment_fixed_point() {
        let f = Tensor::from_rows(&[vec![0.4, 0.3], vec![-0.2, 0.9]]);
        let got = align_loss_features(&f, &f, &f).unwrap();
        assert!(got.abs() < 1e-9, "expected 0, got {got}");
    }

    #[test]
    fn align_matches_hand_computation() {
        let fp = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let ftb = vec![vec![0.6, 0.8], vec![1.0, 1.0]];
        let ftc = vec![vec![0.0, 1.0], vec![-1.0, 0.5]];
        let mut expect = 0.0;
        for i in 0..2 {
            expect += hand_cosine(&fp[i], &ftb[i]) - hand_cosine(&ftb[i], &ftc[i]);
        }
        expect /= -2.0;
        let got = align_loss_features(
            &Tensor::from_rows(&fp),
            &Tensor::from_rows(&ftb),
            &Tensor::from_rows(&ftc),
        )
        .unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn align_sign_flips_with_negated_outputs() {
        let fp = vec![vec![0.5, 0.2], vec![0.1, -0.7]];
        let ftb = vec![vec![0.6, 0.8], vec![0.3, 0.4]];
        let ftc = vec![vec![0.2, 0.9], vec![0.8, -0.1]];
        let neg = |rows: &[Vec<f64>]| {
            rows.iter()
                .map(|r| r.iter().map(|v| -v).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        // Negating every backdoored-encoder output flips both cosine terms
        // (s1 keeps sign: both args negated; s2 flips: one arg negated).
        let mut expect = 0.0;
        for i in 0..2 {
            expect += hand_cosine(&fp[i], &ftb[i]) + hand_cosine(&ftb[i], &ftc[i]);
        }
        expect /= -2.0;
        let got = align_loss_features(
            &Tensor::from_rows(&neg(&fp)),
            &Tensor::from_rows(&neg(&ftb)),
            &Tensor::from_rows(&ftc),
        )
        .unwrap();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn utility_canonical_values() {
        let f = Tensor::from_rows(&[vec![0.3, 0.4], vec![-0.5, 0.1]]);
        assert!((utility_loss_features(&f, &f).unwrap() + 1.0).abs() < 1e-9);

        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(utility_loss_features(&a, &b).unwrap().abs() < 1e-9);

        let neg = Tensor::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]);
        assert!((utility_loss_features(&a, &neg).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn losses_respect_cosine_bounds() {
        let mut rng = crate::rng::derive(41, &[1]);
        for _ in 0..50 {
            let n = rng.gen_range(1..5);
            let d = rng.gen_range(2..6);
            let mk = |rng: &mut rand_chacha::ChaCha12Rng| {
                Tensor::from_rows(
                    &(0..n)
                        .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                        .collect::<Vec<_>>(),
                )
            };
            let (fp, ftb, ftc) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let align = align_loss_features(&fp, &ftb, &ftc).unwrap();
            assert!((-2.0..=2.0).contains(&align));
            let uti = utility_loss_features(&fp, &ftb).unwrap();
            assert!((-1.0..=1.0).contains(&uti));
        }
    }

    fn tiny_encoder(seed: u64) -> EncoderState {
        let cfg = EncoderConfig {
            base_channels: 2,
            proj_hidden: 4,
            proj_dim: 4,
            ..EncoderConfig::default()
        };
        EncoderState::init(cfg, &mut crate::rng::derive(seed, &[7]))
    }

    fn toy_images(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = crate::rng::derive(seed, &[8]);
        (0..n)
            .map(|_| Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.gen()).collect()))
            .collect()
    }

    fn toy_targets(seed: u64) -> TargetExemplars {
        TargetExemplars::new(toy_images(3, seed)).unwrap()
    }

    #[test]
    fn combined_objective_gradients_pass_spot_checks() {
        let enc = tiny_encoder(1);
        let pair = EncoderPair::from_global(&enc);
        let imgs = toy_images(4, 2);
        let targets = toy_targets(3);
        let poisoned = Tensor::stack(&imgs.iter().collect::<Vec<_>>());
        let target_batch = targets.batch_for(4);
        let clean_batch = poisoned.clone();

        let eval = |params: &crate::tensor::nn::ParamSet| -> f64 {
            let mut g = Graph::new();
            let bd = params.bind_frozen(&mut g);
            let cl = pair.clean.params.bind_frozen(&mut g);
            let xp = g.input(poisoned.clone());
            let xt = g.input(target_batch.clone());
            let xc = g.input(clean_batch.clone());
            let cfg = &pair.backdoored.config;
            let fp = encoder_features(&mut g, &bd, cfg, xp);
            let ftb = encoder_features(&mut g, &bd, cfg, xt);
            let ftc = encoder_features(&mut g, &cl, cfg, xt);
            let fb = encoder_features(&mut g, &bd, cfg, xc);
            let fc = encoder_features(&mut g, &cl, cfg, xc);
            let align = align_loss_node(&mut g, fp, ftb, ftc);
            let uti = utility_loss_node(&mut g, fb, fc);
            let wa = g.scale(align, 0.7);
            let wu = g.scale(uti, 0.3);
            let total = g.add(wa, wu);
            g.scalar(total)
        };

        let mut g = Graph::new();
        let bd = pair.backdoored.params.bind(&mut g);
        let cl = pair.clean.params.bind_frozen(&mut g);
        let xp = g.input(poisoned.clone());
        let xt = g.input(target_batch.clone());
        let xc = g.input(clean_batch.clone());
        let cfg = &pair.backdoored.config;
        let fp = encoder_features(&mut g, &bd, cfg, xp);
        let ftb = encoder_features(&mut g, &bd, cfg, xt);
        let ftc = encoder_features(&mut g, &cl, cfg, xt);
        let fb = encoder_features(&mut g, &bd, cfg, xc);
        let fc = encoder_features(&mut g, &cl, cfg, xc);
        let align = align_loss_node(&mut g, fp, ftb, ftc);
        let uti = utility_loss_node(&mut g, fb, fc);
        let wa = g.scale(align, 0.7);
        let wu = g.scale(uti, 0.3);
        let total = g.add(wa, wu);
        g.backward(total);

        let flat = pair.backdoored.params.flatten();
        let mut rng = crate::rng::derive(41, &[2]);
        for _ in 0..10 {
            let idx = rng.gen_range(0..flat.len());
            let h = 1e-5;
            let mut ps = pair.backdoored.params.clone();
            let mut fv = flat.clone();
            fv[idx] += h;
            ps.assign_flat(&fv);
            let up = eval(&ps);
            fv[idx] = flat[idx] - h;
            ps.assign_flat(&fv);
            let dn = eval(&ps);
            let numeric = (up - dn) / (2.0 * h);

            let mut off = 0;
            let mut analytic = f64::NAN;
            for (i, (_, t)) in pair.backdoored.params.iter().enumerate() {
                if idx < off + t.len() {
                    // Parameters outside this loss (projection head) carry
                    // no gradient entry; their gradient is zero.
                    analytic = g
                        .grad(bd.vars()[i])
                        .map_or(0.0, |gr| gr[idx - off]);
                    break;
                }
                off += t.len();
            }
            let scale = analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (analytic - numeric).abs() / scale < 1e-3,
                "objective grad mismatch at {idx}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn clean_reference_is_bitwise_unchanged() {
        let enc = tiny_encoder(4);
        let pair = EncoderPair::from_global(&enc);
        let before: Vec<u64> = pair.clean.params.flatten().iter().map(|v| v.to_bits()).collect();
        let imgs = toy_images(6, 5);
        let targets = toy_targets(6);
        let mut rng = crate::rng::derive(41, &[3]);
        let ssl = SslConfig {
            batch_size: 3,
            local_epochs: 1,
            learning_rate: 0.05,
            ..SslConfig::default()
        };
        let report = malicious_local_train(
            &pair,
            &imgs,
            &Trigger::Identity,
            &targets,
            &AttackConfig::default(),
            &ssl,
            &mut rng,
        )
        .unwrap();
        let after: Vec<u64> = pair.clean.params.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert!(report.steps > 0);
    }

    #[test]
    fn fixed_seed_replay_identical_update() {
        let enc = tiny_encoder(7);
        let pair = EncoderPair::from_global(&enc);
        let imgs = toy_images(6, 8);
        let targets = toy_targets(9);
        let ssl = SslConfig {
            batch_size: 3,
            local_epochs: 2,
            learning_rate: 0.05,
            ..SslConfig::default()
        };
        let run = || {
            let mut rng = crate::rng::derive(41, &[4]);
            malicious_local_train(
                &pair,
                &imgs,
                &Trigger::Identity,
                &targets,
                &AttackConfig::default(),
                &ssl,
                &mut rng,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.encoder.params.flatten(), b.encoder.params.flatten());
    }

    #[test]
    fn pure_utility_training_imitates_clean_encoder() {
        // lambda_align = 0: training reduces to imitation; the utility loss
        // may not increase.
        let mut init_rng = crate::rng::derive(41, &[5]);
        let bd = tiny_encoder(10);
        let mut clean = tiny_encoder(11);
        // Perturb so the pair starts disagreeing.
        let mut flat = clean.params.flatten();
        for v in flat.iter_mut() {
            *v += 0.2 * (init_rng.gen::<f64>() - 0.5);
        }
        clean.params.assign_flat(&flat);
        let pair = EncoderPair::new(bd, clean).unwrap();

        let imgs = toy_images(8, 12);
        let targets = toy_targets(13);
        let attack = AttackConfig {
            lambda_align: 0.0,
            lambda_uti: 1.0,
            ..AttackConfig::default()
        };
        let ssl = SslConfig {
            batch_size: 4,
            local_epochs: 3,
            learning_rate: 0.1,
            ..SslConfig::default()
        };
        let mut rng = crate::rng::derive(41, &[6]);
        let report =
            malicious_local_train(&pair, &imgs, &Trigger::Identity, &targets, &attack, &ssl, &mut rng)
                .unwrap();
        let first = report.loss_history.first().unwrap().utility;
        let last = report.loss_history.last().unwrap().utility;
        assert!(last <= first + 1e-9, "utility did not improve: {first} -> {last}");
    }
}
