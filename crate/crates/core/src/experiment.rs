//! Staged experiment pipeline: pretrain, attack, evaluate, defend, report.
//!
//! Every stage reads and writes a self-describing artifacts directory: the
//! resolved config, one JSON-lines metrics record per round, checkpoints,
//! per-sample prediction logs, CSV dumps, and PNG triplets. `report`
//! re-renders all tables from those files without retraining anything.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::Trigger;
use crate::augment::augment_view;
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::convergence::{
    bound_report, descent_check, estimate_smoothness, ConvergenceRecord, TheoremParams,
};
use crate::data::{load_dataset, Dataset};
use crate::defense::{
    activation_clustering, detection_auc, strip_entropy, ClassClusterReport, DefenseVerdict,
};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_percent, centroid_separation, compute_asr, entanglement_probe, pca_embed,
    perceptual_proxy, predict_with_log, psnr, ssim, train_probe,
};
use crate::federation::{
    AttackSetup, Federation, MonitorConfig, RoundMetrics, TriggerKind,
};
use crate::injector::TargetExemplars;
use crate::models::{EncoderRole, EncoderState, InjectorState};
use crate::rng::{self, tag};
use crate::ssl::shuffle_indices;
use crate::tensor::Tensor;

/// Evaluation artifacts of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    /// Accuracy of the clean-encoder probe on clean test data.
    pub ca: f64,
    /// Accuracy of the backdoored-encoder probe on clean test data.
    pub ba: Option<f64>,
    /// Share of triggered non-target test inputs classified as the target.
    pub asr: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub perceptual_proxy_mean: Option<f64>,
    pub entanglement_accuracy: Option<f64>,
    pub pca_centroid_separation: Option<f64>,
    pub clean_probe_train_accuracy: f64,
    pub dataset_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseSummary {
    pub strip_auc: f64,
    pub strip_mean_entropy_clean: f64,
    pub strip_mean_entropy_poisoned: f64,
    pub target_class_silhouette: Option<f64>,
    pub clustering: Vec<ClassClusterReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub residual_min: f64,
    pub residual_rounds: usize,
    pub bound_dominates: bool,
    pub bound_margin: f64,
    pub epsilon_max: f64,
    pub caveat: String,
}

/// Everything a finished experiment produced, with file-backed artifacts
/// under `root`.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub root: PathBuf,
    pub evaluation: Option<EvaluationSummary>,
    pub defense: Option<DefenseSummary>,
    pub convergence: Option<ConvergenceSummary>,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for item in items {
        let line = serde_json::to_string(item)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn stage_err(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    }
}

/// Build the attacker-side setup from the config and dataset.
fn build_attack_setup(cfg: &ExperimentConfig, data: &Dataset) -> Result<AttackSetup> {
    let target = cfg.attack.params.target_class;
    if target >= data.downstream_classes {
        return Err(Error::Config(format!(
            "target_class {target} outside downstream label space ({})",
            data.downstream_classes
        )));
    }
    // Attacker-held exemplars: the first `exemplar_count` target-class
    // images of the attacker pool under a derived shuffle.
    let candidates: Vec<usize> = (0..data.attacker_pool_images.len())
        .filter(|&i| data.attacker_pool_labels[i] == target)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Config(format!(
            "no target-class ({target}) images available for exemplars"
        )));
    }
    let mut stream = rng::derive(cfg.run.seed, &[tag::INJECTOR, 0xe8]);
    let order = shuffle_indices(candidates.len(), &mut stream);
    let picked: Vec<Tensor> = order
        .iter()
        .take(cfg.attack.params.exemplar_count.max(1))
        .map(|&i| data.attacker_pool_images[candidates[i]].clone())
        .collect();
    Ok(AttackSetup {
        attack: cfg.attack.params.clone(),
        injector_cfg: cfg.injector.clone(),
        trigger: cfg.attack.trigger.clone(),
        targets: TargetExemplars::new(picked)?,
        injector: None,
        attacked_rounds: 0,
    })
}

fn init_global(cfg: &ExperimentConfig) -> EncoderState {
    let mut stream = rng::derive(cfg.run.seed, &[tag::MODEL_INIT]);
    EncoderState::init(cfg.encoder, &mut stream)
}

fn run_federation(
    cfg: &ExperimentConfig,
    data: &Dataset,
    global: EncoderState,
    attack: Option<AttackSetup>,
    monitor: MonitorConfig,
) -> Result<(Federation, Vec<RoundMetrics>)> {
    let mut fed = Federation::new(
        cfg.federation.clone(),
        cfg.ssl.clone(),
        &data.pretrain_images,
        &data.pretrain_labels,
        global,
        attack,
        monitor,
    )?;
    let metrics = fed.run_all()?;
    Ok((fed, metrics))
}

/// Stage 1: clean federated pre-training (no malicious behavior). Produces
/// the clean global encoder used for CA and as the attack reference point.
pub fn stage_pretrain(cfg: &ExperimentConfig, root: &Path) -> Result<EncoderState> {
    let inner = || -> Result<EncoderState> {
        let data = load_dataset(&cfg.dataset)?;
        let mut clean_cfg = cfg.clone();
        clean_cfg.federation.n_malicious = 0;
        let global = init_global(cfg);
        let (fed, metrics) = run_federation(&clean_cfg, &data, global, None, cfg.monitor)?;
        write_jsonl(&root.join("pretrain/metrics.jsonl"), &metrics)?;
        checkpoint::save(&fed.global().params, &root.join("pretrain/encoder.ckpt"))?;
        Ok(fed.global().clone())
    };
    inner().map_err(stage_err("pretrain"))
}

/// Stage 2: federated training with the malicious client active. Produces
/// the backdoored global encoder, the trained injector, and (with the
/// monitor on) the convergence artifacts.
pub fn stage_attack(
    cfg: &ExperimentConfig,
    root: &Path,
) -> Result<(EncoderState, Option<InjectorState>)> {
    let inner = || -> Result<(EncoderState, Option<InjectorState>)> {
        if !cfg.attack.enabled {
            return Err(Error::Config("attack stage requires attack.enabled".into()));
        }
        let data = load_dataset(&cfg.dataset)?;
        let setup = build_attack_setup(cfg, &data)?;
        // The attack phase continues federated training from the clean
        // pretrained encoder; the malicious client joins an ongoing
        // federation.
        let global = encoder_from_ckpt(cfg, &root.join("pretrain/encoder.ckpt"), EncoderRole::Clean)?;
        let (fed, metrics) = run_federation(cfg, &data, global, Some(setup), cfg.monitor)?;
        write_jsonl(&root.join("attack/metrics.jsonl"), &metrics)?;
        checkpoint::save(&fed.global().params, &root.join("attack/encoder.ckpt"))?;
        let injector = fed.injector().cloned();
        if let Some(inj) = &injector {
            checkpoint::save(&inj.params, &root.join("attack/injector.ckpt"))?;
        }
        if cfg.monitor.enabled {
            write_convergence_artifacts(cfg, &fed, &metrics, root)?;
        }
        let mut global = fed.global().clone();
        global.role = EncoderRole::Backdoored;
        Ok((global, injector))
    };
    inner().map_err(stage_err("attack"))
}

fn write_convergence_artifacts(
    cfg: &ExperimentConfig,
    fed: &Federation,
    metrics: &[RoundMetrics],
    root: &Path,
) -> Result<()> {
    let records: Vec<ConvergenceRecord> = metrics
        .iter()
        .filter_map(|m| {
            Some(ConvergenceRecord {
                round: m.round,
                loss: m.probe_loss?,
                grad_norm: m.probe_grad_norm?,
                epsilon: m.epsilon.unwrap_or(0.0),
            })
        })
        .collect();
    if records.len() < 2 {
        return Ok(());
    }
    write_jsonl(&root.join("convergence/records.jsonl"), &records)?;

    // Estimated constants: smoothness probed around the final parameters,
    // gradient bound from the observed trajectory.
    let handle = fed
        .monitor_loss_handle()
        .expect("monitor enabled implies views");
    let theta = fed.global().params.flatten();
    let mut srng = rng::derive(cfg.run.seed, &[tag::CONVERGENCE, 2]);
    let smoothness = estimate_smoothness(&handle, &[theta], &mut srng)?;
    let grad_bound = records
        .iter()
        .map(|r| r.grad_norm)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let malicious_weight = {
        let sizes: Vec<usize> = fed.state.partitions.iter().map(|p| p.len()).collect();
        let total: usize = sizes.iter().sum();
        *sizes.last().expect("clients exist") as f64 / total as f64
    };
    let params = TheoremParams {
        smoothness: smoothness.value.max(1e-9),
        grad_bound,
        learning_rate: cfg.ssl.learning_rate,
        malicious_weight,
    };
    let check = descent_check(&records, &params)?;
    let mut csv = String::from("round,residual,epsilon,loss,grad_norm\n");
    for (r, rec) in check.residuals.iter().zip(&records) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.round, r.residual, rec.epsilon, rec.loss, rec.grad_norm
        );
    }
    fs::write(root.join("convergence/residuals.csv"), csv)?;

    let bound = bound_report(&records, &params)?;
    write_json(&root.join("convergence/bound.json"), &bound)?;
    let summary = ConvergenceSummary {
        residual_min: check
            .residuals
            .iter()
            .map(|r| r.residual)
            .fold(f64::INFINITY, f64::min),
        residual_rounds: check.residuals.len(),
        bound_dominates: bound.dominated,
        bound_margin: bound.margin,
        epsilon_max: records.iter().map(|r| r.epsilon).fold(0.0, f64::max),
        caveat: bound.caveat.clone(),
    };
    write_json(&root.join("convergence/summary.json"), &summary)?;
    let mut report = String::new();
    let _ = writeln!(report, "convergence check ({} rounds)", records.len());
    let _ = writeln!(
        report,
        "  estimated smoothness (lower bound): {:.6}",
        params.smoothness
    );
    let _ = writeln!(report, "  gradient-norm bound: {:.6}", params.grad_bound);
    let _ = writeln!(report, "  malicious weight rho: {:.4}", malicious_weight);
    let _ = writeln!(report, "  min descent residual: {:.6}", summary.residual_min);
    let _ = writeln!(
        report,
        "  min grad norm^2 {:.6} vs bound {:.6} (dominated: {})",
        bound.min_grad_norm_sq, bound.bound, bound.dominated
    );
    let _ = writeln!(report, "  note: {}", bound.caveat);
    fs::write(root.join("convergence/report.txt"), report)?;
    Ok(())
}

fn encoder_from_ckpt(cfg: &ExperimentConfig, path: &Path, role: EncoderRole) -> Result<EncoderState> {
    let params = checkpoint::load(path)?;
    let template = init_global(cfg);
    if !template.params.same_layout(&params) {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured encoder architecture",
            path.display()
        )));
    }
    Ok(EncoderState {
        config: cfg.encoder,
        params,
        role,
    })
}

fn trigger_from<'a>(
    kind: &'a TriggerKind,
    injector: Option<&'a InjectorState>,
) -> Result<Trigger<'a>> {
    Ok(match kind {
        TriggerKind::Injector => Trigger::Injector(
            injector.ok_or_else(|| Error::Config("injector checkpoint missing".into()))?,
        ),
        TriggerKind::Patch(p) => Trigger::Patch(p),
        TriggerKind::Identity => Trigger::Identity,
    })
}

fn load_attack_artifacts(
    cfg: &ExperimentConfig,
    root: &Path,
) -> Result<(EncoderState, Option<InjectorState>)> {
    let enc = encoder_from_ckpt(cfg, &root.join("attack/encoder.ckpt"), EncoderRole::Backdoored)?;
    let inj_path = root.join("attack/injector.ckpt");
    let injector = if inj_path.exists() {
        let params = checkpoint::load(&inj_path)?;
        Some(InjectorState {
            config: cfg.injector.unet,
            params,
        })
    } else {
        None
    };
    Ok((enc, injector))
}

/// Evaluation sample count for image-quality metrics.
const QUALITY_SAMPLES: usize = 64;

/// Stage 3: probes and metrics over the artifacts produced so far.
pub fn stage_evaluate(cfg: &ExperimentConfig, root: &Path) -> Result<EvaluationSummary> {
    let inner = || -> Result<EvaluationSummary> {
        let data = load_dataset(&cfg.dataset)?;
        let clean = encoder_from_ckpt(cfg, &root.join("pretrain/encoder.ckpt"), EncoderRole::Clean)?;

        let mut probe_rng = rng::derive(cfg.run.seed, &[tag::PROBE, 1]);
        let clean_probe = train_probe(
            &clean,
            &data.labeled_images,
            &data.labeled_labels,
            data.downstream_classes,
            &cfg.probe,
            &mut probe_rng,
        )?;
        let clean_log = predict_with_log(&clean_probe, &data.test_images, &data.test_labels, false)?;
        write_jsonl(&root.join("evaluate/predictions_clean.jsonl"), &clean_log)?;
        let ca = accuracy_percent(&clean_log);

        let mut summary = EvaluationSummary {
            ca,
            ba: None,
            asr: None,
            ssim_mean: None,
            psnr_mean: None,
            perceptual_proxy_mean: None,
            entanglement_accuracy: None,
            pca_centroid_separation: None,
            clean_probe_train_accuracy: clean_probe
                .accuracy_history
                .last()
                .copied()
                .unwrap_or(0.0),
            dataset_checksum: format!("{:016x}", data.checksum),
        };

        if cfg.attack.enabled {
            let (backdoored, injector) = load_attack_artifacts(cfg, root)?;
            let trigger = trigger_from(&cfg.attack.trigger, injector.as_ref())?;

            let mut bd_rng = rng::derive(cfg.run.seed, &[tag::PROBE, 2]);
            let bd_probe = train_probe(
                &backdoored,
                &data.labeled_images,
                &data.labeled_labels,
                data.downstream_classes,
                &cfg.probe,
                &mut bd_rng,
            )?;
            let ba_log = predict_with_log(&bd_probe, &data.test_images, &data.test_labels, false)?;
            write_jsonl(&root.join("evaluate/predictions_ba.jsonl"), &ba_log)?;
            summary.ba = Some(accuracy_percent(&ba_log));

            let (asr, asr_log) = compute_asr(
                &bd_probe,
                &data.test_images,
                &data.test_labels,
                &trigger,
                cfg.attack.params.target_class,
            )?;
            write_jsonl(&root.join("evaluate/predictions_triggered.jsonl"), &asr_log)?;
            summary.asr = Some(asr);

            // Image quality on a fixed evaluation sample.
            let mut eval_rng = rng::derive(cfg.run.seed, &[tag::EVAL, 1]);
            let order = shuffle_indices(data.test_images.len(), &mut eval_rng);
            let sample: Vec<&Tensor> = order
                .iter()
                .take(QUALITY_SAMPLES.min(data.test_images.len()))
                .map(|&i| &data.test_images[i])
                .collect();
            let clean_batch = Tensor::stack(&sample);
            let poisoned_batch = trigger.apply(&clean_batch)?;
            let (mut s_acc, mut p_acc, mut x_acc) = (0.0, 0.0, 0.0);
            for (i, img) in sample.iter().enumerate() {
                let poisoned = poisoned_batch.index(i);
                s_acc += ssim(img, &poisoned)?;
                p_acc += psnr(img, &poisoned)?;
                x_acc += perceptual_proxy(&clean, img, &poisoned)?;
            }
            let n = sample.len() as f64;
            summary.ssim_mean = Some(s_acc / n);
            summary.psnr_mean = Some(p_acc / n);
            summary.perceptual_proxy_mean = Some(x_acc / n);

            // Poisoned-vs-augmented separability (needs at least 50 test
            // samples per set).
            if data.test_images.len() >= 50 {
                let probe_n = data.test_images.len().min(120);
                let mut aug_rng = rng::derive(cfg.run.seed, &[tag::EVAL, 2]);
                let base: Vec<&Tensor> = data.test_images.iter().take(probe_n).collect();
                let poisoned_set: Vec<Tensor> = {
                    let batch = Tensor::stack(&base);
                    let pb = trigger.apply(&batch)?;
                    (0..base.len()).map(|i| pb.index(i)).collect()
                };
                let augmented_set: Vec<Tensor> = base
                    .iter()
                    .map(|img| augment_view(img, &cfg.ssl.augment, &mut aug_rng).map(|v| v.0))
                    .collect::<Result<_>>()?;
                let ent = entanglement_probe(&poisoned_set, &augmented_set, &mut aug_rng)?;
                summary.entanglement_accuracy = Some(ent.accuracy);
            }

            // Feature-space PCA of clean vs poisoned embeddings under the
            // backdoored encoder.
            let clean_feats = backdoored.features(&clean_batch);
            let poisoned_feats = backdoored.features(&poisoned_batch);
            let mut all_rows = Vec::new();
            for i in 0..clean_feats.shape()[0] {
                all_rows.push(clean_feats.index(i).into_data());
            }
            for i in 0..poisoned_feats.shape()[0] {
                all_rows.push(poisoned_feats.index(i).into_data());
            }
            let stackf = Tensor::from_rows(&all_rows);
            let pca = pca_embed(&stackf, 2)?;
            let n_clean = clean_feats.shape()[0];
            let mut csv = String::from("x,y,poisoned\n");
            for i in 0..pca.coords.shape()[0] {
                let _ = writeln!(
                    csv,
                    "{},{},{}",
                    pca.coords.data()[i * 2],
                    pca.coords.data()[i * 2 + 1],
                    usize::from(i >= n_clean)
                );
            }
            fs::write(root.join("evaluate/pca.csv"), csv)?;
            let coords_clean = Tensor::new(
                vec![n_clean, 2],
                pca.coords.data()[..n_clean * 2].to_vec(),
            );
            let coords_poisoned = Tensor::new(
                vec![pca.coords.shape()[0] - n_clean, 2],
                pca.coords.data()[n_clean * 2..].to_vec(),
            );
            summary.pca_centroid_separation =
                Some(centroid_separation(&coords_clean, &coords_poisoned)?);

            if cfg.export.triplets > 0 {
                export_triplets(cfg, root, &sample, &poisoned_batch)?;
            }
        }
        write_json(&root.join("evaluate/evaluation.json"), &summary)?;
        Ok(summary)
    };
    inner().map_err(stage_err("evaluate"))
}

fn export_triplets(
    cfg: &ExperimentConfig,
    root: &Path,
    clean: &[&Tensor],
    poisoned: &Tensor,
) -> Result<()> {
    let dir = root.join("evaluate/triplets");
    fs::create_dir_all(&dir)?;
    let to_png = |t: &Tensor, path: &Path| -> Result<()> {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| {
                    (t.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
                };
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        img.save(path)
            .map_err(|e| Error::Serde(format!("png write failed: {e}")))?;
        Ok(())
    };
    for (i, img) in clean.iter().take(cfg.export.triplets).enumerate() {
        let p = poisoned.index(i);
        // Residual displayed at twice the amplitude.
        let mut residual = Tensor::zeros(img.shape().to_vec());
        for (r, (a, b)) in residual
            .data_mut()
            .iter_mut()
            .zip(img.data().iter().zip(p.data()))
        {
            *r = ((a - b).abs() * 2.0).clamp(0.0, 1.0);
        }
        to_png(img, &dir.join(format!("{i:03}_clean.png")))?;
        to_png(&p, &dir.join(format!("{i:03}_poisoned.png")))?;
        to_png(&residual, &dir.join(format!("{i:03}_residual.png")))?;
    }
    Ok(())
}

/// Stage 4: defense probes against the backdoored model.
pub fn stage_defend(cfg: &ExperimentConfig, root: &Path) -> Result<DefenseSummary> {
    let inner = || -> Result<DefenseSummary> {
        if !cfg.attack.enabled {
            return Err(Error::Config("defend stage requires attack.enabled".into()));
        }
        let data = load_dataset(&cfg.dataset)?;
        let (backdoored, injector) = load_attack_artifacts(cfg, root)?;
        let trigger = trigger_from(&cfg.attack.trigger, injector.as_ref())?;

        // Deterministic probe identical to the evaluation stage's.
        let mut bd_rng = rng::derive(cfg.run.seed, &[tag::PROBE, 2]);
        let bd_probe = train_probe(
            &backdoored,
            &data.labeled_images,
            &data.labeled_labels,
            data.downstream_classes,
            &cfg.probe,
            &mut bd_rng,
        )?;

        let n = cfg.defense.samples.min(data.test_images.len());
        let mut drng = rng::derive(cfg.run.seed, &[tag::DEFENSE, 1]);
        let order = shuffle_indices(data.test_images.len(), &mut drng);
        let sample: Vec<&Tensor> = order.iter().take(n).map(|&i| &data.test_images[i]).collect();
        let clean_batch = Tensor::stack(&sample);
        let poisoned_batch = trigger.apply(&clean_batch)?;

        // Overlay pool: a disjoint slice of test images.
        let pool: Vec<Tensor> = order
            .iter()
            .skip(n)
            .take(32.min(data.test_images.len().saturating_sub(n)).max(1))
            .map(|&i| data.test_images[i].clone())
            .collect();
        let pool = if pool.is_empty() {
            vec![data.test_images[0].clone()]
        } else {
            pool
        };

        let mut clean_entropy = Vec::with_capacity(n);
        let mut poisoned_entropy = Vec::with_capacity(n);
        for i in 0..n {
            let x = sample[i];
            clean_entropy.push(strip_entropy(&bd_probe, x, &pool, &cfg.defense.strip, &mut drng)?);
            let p = poisoned_batch.index(i);
            poisoned_entropy.push(strip_entropy(
                &bd_probe,
                &p,
                &pool,
                &cfg.defense.strip,
                &mut drng,
            )?);
        }
        let auc = detection_auc(&poisoned_entropy, &clean_entropy)?;
        let strip_verdict = DefenseVerdict {
            probe: "strip".to_string(),
            detection_auc: Some(auc),
            per_class: Vec::new(),
            flagged_samples: Vec::new(),
        };
        strip_verdict.validate()?;
        write_json(&root.join("defend/strip.json"), &strip_verdict)?;
        let mut scores_csv = String::from("sample,clean_entropy,poisoned_entropy\n");
        for i in 0..n {
            let _ = writeln!(scores_csv, "{i},{},{}", clean_entropy[i], poisoned_entropy[i]);
        }
        fs::write(root.join("defend/strip_scores.csv"), scores_csv)?;

        // Activation clustering over predicted classes of a mixed
        // clean+poisoned set (poison share matching the attack's ratio).
        let poison_share = ((n as f64 * cfg.attack.params.poison_ratio).ceil() as usize).max(2);
        let mut mixed: Vec<Tensor> = sample.iter().map(|t| (*t).clone()).collect();
        for i in 0..poison_share.min(n) {
            mixed.push(poisoned_batch.index(i));
        }
        let mixed_batch = Tensor::stack(&mixed.iter().collect::<Vec<_>>());
        let feats = backdoored.features(&mixed_batch);
        let preds = bd_probe.predict(&mixed_batch);
        let mut by_class: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
        for class in 0..data.downstream_classes {
            let rows: Vec<Vec<f64>> = preds
                .iter()
                .enumerate()
                .filter(|(_, &p)| p == class)
                .map(|(i, _)| feats.index(i).into_data())
                .collect();
            if rows.len() >= 4 {
                by_class.push((class, rows));
            }
        }
        let grouped: Vec<(usize, Tensor)> = by_class
            .into_iter()
            .map(|(c, rows)| (c, Tensor::from_rows(&rows)))
            .collect();
        let clustering = activation_clustering(&grouped, &mut drng)?;
        let target_class_silhouette = clustering
            .iter()
            .find(|r| r.class == cfg.attack.params.target_class)
            .map(|r| r.silhouette);
        let ac_verdict = DefenseVerdict {
            probe: "activation-clustering".to_string(),
            detection_auc: None,
            per_class: clustering.clone(),
            flagged_samples: Vec::new(),
        };
        write_json(&root.join("defend/activation_clustering.json"), &ac_verdict)?;

        let summary = DefenseSummary {
            strip_auc: auc,
            strip_mean_entropy_clean: clean_entropy.iter().sum::<f64>() / n as f64,
            strip_mean_entropy_poisoned: poisoned_entropy.iter().sum::<f64>() / n as f64,
            target_class_silhouette,
            clustering,
        };
        write_json(&root.join("defend/defense.json"), &summary)?;
        Ok(summary)
    };
    inner().map_err(stage_err("defend"))
}

/// Stage 5: render the report purely from saved artifacts.
pub fn stage_report(root: &Path) -> Result<String> {
    let inner = || -> Result<String> {
        let cfg = ExperimentConfig::load(&root.join("config.resolved.toml"))?;
        let mut out = String::new();
        let _ = writeln!(out, "experiment: {} (seed {})", cfg.run.name, cfg.run.seed);
        let _ = writeln!(
            out,
            "federation: {} clients ({} malicious), {} rounds, {} local epochs",
            cfg.federation.n_clients,
            cfg.federation.n_malicious,
            cfg.federation.rounds,
            cfg.federation.local_epochs
        );
        let eval_path = root.join("evaluate/evaluation.json");
        if eval_path.exists() {
            let ev: EvaluationSummary = read_json(&eval_path)?;
            let _ = writeln!(out, "\naccuracy (%)");
            let _ = writeln!(out, "  {:<24} {:>8}", "metric", "value");
            let _ = writeln!(out, "  {:<24} {:>8.2}", "clean accuracy (CA)", ev.ca);
            if let Some(ba) = ev.ba {
                let _ = writeln!(out, "  {:<24} {:>8.2}", "backdoored accuracy (BA)", ba);
            }
            if let Some(asr) = ev.asr {
                let _ = writeln!(out, "  {:<24} {:>8.2}", "attack success rate (ASR)", asr);
            }
            if ev.ssim_mean.is_some() {
                let _ = writeln!(out, "\nstealth");
                if let Some(v) = ev.ssim_mean {
                    let _ = writeln!(out, "  {:<24} {:>8.4}", "SSIM", v);
                }
                if let Some(v) = ev.psnr_mean {
                    let _ = writeln!(out, "  {:<24} {:>8.2}", "PSNR (dB)", v);
                }
                if let Some(v) = ev.perceptual_proxy_mean {
                    let _ = writeln!(out, "  {:<24} {:>8.4}", "feature-space proxy", v);
                }
                if let Some(v) = ev.entanglement_accuracy {
                    let _ = writeln!(out, "  {:<24} {:>8.4}", "separability probe acc", v);
                }
                if let Some(v) = ev.pca_centroid_separation {
                    let _ = writeln!(out, "  {:<24} {:>8.4}", "PCA centroid gap (sd)", v);
                }
            }
            let _ = writeln!(out, "  dataset checksum: {}", ev.dataset_checksum);
        }
        let defense_path = root.join("defend/defense.json");
        if defense_path.exists() {
            let df: DefenseSummary = read_json(&defense_path)?;
            let _ = writeln!(out, "\ndefenses");
            let _ = writeln!(out, "  {:<24} {:>8.4}", "STRIP detection AUC", df.strip_auc);
            if let Some(s) = df.target_class_silhouette {
                let _ = writeln!(out, "  {:<24} {:>8.4}", "target-class silhouette", s);
            }
        }
        let conv_path = root.join("convergence/summary.json");
        if conv_path.exists() {
            let cv: ConvergenceSummary = read_json(&conv_path)?;
            let _ = writeln!(out, "\nconvergence monitor");
            let _ = writeln!(out, "  {:<24} {:>8.4}", "min residual", cv.residual_min);
            let _ = writeln!(out, "  {:<24} {:>8}", "bound dominates", cv.bound_dominates);
            let _ = writeln!(out, "  {:<24} {:>8.4}", "max epsilon", cv.epsilon_max);
        }
        fs::write(root.join("report.txt"), &out)?;
        Ok(out)
    };
    inner().map_err(stage_err("report"))
}

/// Full pipeline. With `dry_run` the config is validated and echoed without
/// touching the filesystem. The artifacts directory is
/// `<out_dir>/<name>-<seed>` unless an explicit root is supplied.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    explicit_root: Option<&Path>,
    dry_run: bool,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let root = match explicit_root {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(&cfg.run.out_dir).join(format!(
            "{}-s{}-{}",
            cfg.run.name,
            cfg.run.seed,
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        )),
    };
    if dry_run {
        return Ok(ExperimentOutcome {
            root,
            evaluation: None,
            defense: None,
            convergence: None,
        });
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("config.resolved.toml"), cfg.to_toml()?)?;

    stage_pretrain(cfg, &root)?;
    if cfg.attack.enabled {
        stage_attack(cfg, &root)?;
    }
    let evaluation = Some(stage_evaluate(cfg, &root)?);
    let defense = if cfg.attack.enabled {
        Some(stage_defend(cfg, &root)?)
    } else {
        None
    };
    stage_report(&root)?;
    let convergence = {
        let p = root.join("convergence/summary.json");
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    Ok(ExperimentOutcome {
        root,
        evaluation,
        defense,
        convergence,
    })
}

/// Re-read a finished experiment's metric stream.
pub fn load_metrics(root: &Path, stage: &str) -> Result<Vec<RoundMetrics>> {
    read_jsonl(&root.join(format!("{stage}/metrics.jsonl")))
}
