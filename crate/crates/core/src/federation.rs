//! The three-step federated round loop: broadcast the global encoder, run
//! local training on every selected client, aggregate size-weighted updates.
//!
//! Client tasks run in parallel; every client draws from its own
//! round-and-id-derived stream and aggregation accumulates in client-id
//! order, so results are independent of scheduling and update ordering.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{malicious_local_train, AttackConfig, EncoderPair, Trigger};
use crate::baseline::PatchBaselineConfig;
use crate::defense;
use crate::error::{Error, Result};
use crate::injector::{
    identity_pretrain, train_injector, InjectorConfig, InjectorLossParts,
    TargetExemplars,
};
use crate::models::{encoder_features, encoder_projection, EncoderState, InjectorState};
use crate::rng::{self, tag};
use crate::ssl::{benign_local_train, nt_xent_node, shuffle_indices, SslConfig};
use crate::tensor::nn::ParamSet;
use crate::tensor::{Graph, Tensor};

/// Client data heterogeneity: uniform split or Dirichlet-concentrated class
/// proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirichletAlpha {
    #[serde(with = "iid_token")]
    Iid,
    Concentration(f64),
}

mod iid_token {
    pub fn serialize<S: serde::Serializer>(s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str("iid")
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<(), D::Error> {
        let v: String = serde::Deserialize::deserialize(d)?;
        if v == "iid" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"iid\""))
        }
    }
}

/// Server-side aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum AggregationRule {
    FedAvg,
    /// Select the single update closest to its neighbors assuming `f`
    /// byzantine clients.
    Krum { f: usize },
    /// Coordinate-wise mean after trimming the `k` largest and smallest.
    TrimmedMean { k: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub n_malicious: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub dirichlet_alpha: DirichletAlpha,
    /// Overwritten by the experiment's run seed at load time.
    #[serde(default)]
    pub seed: u64,
    /// Attack every k-th round (rounds where `t % k == 0`).
    pub attack_interval: usize,
    pub aggregation: AggregationRule,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 5,
            n_malicious: 1,
            rounds: 30,
            local_epochs: 3,
            client_fraction: 1.0,
            dirichlet_alpha: DirichletAlpha::Iid,
            seed: 0,
            attack_interval: 1,
            aggregation: AggregationRule::FedAvg,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::contract(
                "n_clients, rounds, local_epochs must be positive",
            ));
        }
        if self.n_malicious >= self.n_clients {
            return Err(Error::contract("n_malicious must be < n_clients"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0)
            || self.client_fraction * (self.n_clients as f64) < 1.0
        {
            return Err(Error::contract(
                "client_fraction must be in (0,1] with client_fraction * n_clients >= 1",
            ));
        }
        if self.attack_interval == 0 {
            return Err(Error::contract("attack_interval must be >= 1"));
        }
        if let DirichletAlpha::Concentration(a) = self.dirichlet_alpha {
            if !(a > 0.0) {
                return Err(Error::contract("dirichlet alpha must be positive"));
            }
        }
        Ok(())
    }

    /// Malicious ids occupy the tail of the client range.
    pub fn is_malicious(&self, client: usize) -> bool {
        client >= self.n_clients - self.n_malicious
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientRole {
    Benign,
    Malicious,
}

/// One client's uploaded update.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamSet,
    pub sample_count: usize,
    pub role: ClientRole,
}

/// Mutable round state of the federation.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub round: usize,
    pub global: EncoderState,
    pub partitions: Vec<Vec<usize>>,
}

const PARTITION_RETRIES: usize = 100;

/// Split sample indices across clients with per-class Dirichlet proportions
/// (or an exact uniform deal in IID mode). Every client receives at least
/// one sample; the split is a pure function of `(labels, n_clients, alpha,
/// seed)`.
pub fn partition_dirichlet(
    labels: &[usize],
    n_clients: usize,
    alpha: &DirichletAlpha,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::contract("n_clients must be >= 1"));
    }
    if labels.is_empty() {
        return Err(Error::contract("cannot partition an empty dataset"));
    }
    if labels.len() < n_clients {
        return Err(Error::contract(format!(
            "{} samples cannot cover {} clients",
            labels.len(),
            n_clients
        )));
    }
    let n_classes = labels.iter().copied().max().expect("nonempty") + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut stream = rng::derive(seed, &[tag::PARTITION]);

    for _attempt in 0..PARTITION_RETRIES {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for (class, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut idx = members.clone();
            // Shuffle within the class, then split by the drawn counts.
            for i in (1..idx.len()).rev() {
                let j = stream.gen_range(0..=i);
                idx.swap(i, j);
            }
            let counts = match alpha {
                DirichletAlpha::Iid => iid_counts(idx.len(), n_clients, class),
                DirichletAlpha::Concentration(a) => {
                    dirichlet_counts(idx.len(), n_clients, *a, &mut stream)
                }
            };
            let mut off = 0;
            for (client, &cnt) in counts.iter().enumerate() {
                parts[client].extend_from_slice(&idx[off..off + cnt]);
                off += cnt;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            for p in parts.iter_mut() {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    // Report the first client that stayed empty across the budget.
    let parts: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let empty = parts.iter().position(|p| p.is_empty()).unwrap_or(0);
    Err(Error::Partition {
        client: empty,
        attempts: PARTITION_RETRIES,
    })
}

/// Round-robin deal with a class-rotated start: per-class proportions equal
/// within one sample.
fn iid_counts(m: usize, n_clients: usize, class: usize) -> Vec<usize> {
    let mut counts = vec![m / n_clients; n_clients];
    let rem = m % n_clients;
    for r in 0..rem {
        counts[(class + r) % n_clients] += 1;
    }
    counts
}

/// Gamma draws normalized to proportions, converted to counts by largest
/// remainder (ties to the lower client index).
fn dirichlet_counts(m: usize, n_clients: usize, alpha: f64, rng: &mut impl Rng) -> Vec<usize> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    let props: Vec<f64> = draws.iter().map(|d| d / total).collect();
    largest_remainder(m, &props)
}

pub(crate) fn largest_remainder(m: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * m as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite fractions").then(a.cmp(&b))
    });
    for i in 0..m - assigned {
        counts[order[i % props.len()]] += 1;
    }
    counts
}

/// Size-weighted average of client updates (the plain aggregation rule).
/// Accumulates in client-id order, so the result is independent of list
/// order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::contract("fedavg_aggregate needs at least one update"));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let first = &updates[order[0]];
    for &i in &order {
        if !updates[i].params.same_layout(&first.params) {
            return Err(Error::Aggregation {
                client: updates[i].client_id,
                detail: "parameter shapes do not match the other updates".to_string(),
            });
        }
    }
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    if total <= 0.0 {
        return Err(Error::contract("total sample count must be positive"));
    }
    let mut acc = vec![0.0f64; first.params.num_scalars()];
    for &i in &order {
        let w = updates[i].sample_count as f64 / total;
        for (a, v) in acc.iter_mut().zip(updates[i].params.flatten()) {
            *a += w * v;
        }
    }
    let mut out = first.params.clone();
    out.assign_flat(&acc);
    Ok(out)
}

/// What the malicious clients do on attacked rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TriggerKind {
    Injector,
    Patch(PatchBaselineConfig),
    /// Control: the malicious objective runs with an identity trigger.
    Identity,
}

/// Attack-side setup held by the orchestrator.
pub struct AttackSetup {
    pub attack: AttackConfig,
    pub injector_cfg: InjectorConfig,
    pub trigger: TriggerKind,
    pub targets: TargetExemplars,
    /// Persistent attacker state, created lazily on the first attacked
    /// round for the injector trigger.
    pub injector: Option<InjectorState>,
    /// Attacked rounds completed so far (gates the injector schedule).
    pub attacked_rounds: usize,
}

/// Convergence-monitor settings: per-round probe loss / gradient-norm
/// measurement and deviation measurement on attacked rounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub enabled: bool,
    pub probe_batch: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            enabled: false,
            probe_batch: 32,
        }
    }
}

/// One structured record per round; the metrics log is a JSON-lines stream
/// of these.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub attacked: bool,
    pub benign_loss_mean: Option<f64>,
    pub malicious_align: Option<f64>,
    pub malicious_utility: Option<f64>,
    pub injector_losses: Option<InjectorLossParts>,
    /// Effective-direction deviation of the malicious update from the
    /// benign-objective reference (monitor only).
    pub epsilon: Option<f64>,
    /// Contrastive loss of the global model on the fixed monitor batch.
    pub probe_loss: Option<f64>,
    /// Gradient norm of that loss at the round-start parameters.
    pub probe_grad_norm: Option<f64>,
}

/// Orchestrates rounds over one dataset with optional attack and monitor.
pub struct Federation {
    pub cfg: FederationConfig,
    pub ssl: SslConfig,
    pub state: FederationState,
    pub attack: Option<AttackSetup>,
    pub monitor: MonitorConfig,
    client_data: Vec<Vec<Tensor>>,
    /// Fixed augmented view pair for monitor measurements.
    monitor_views: Option<(Tensor, Tensor)>,
}

impl Federation {
    pub fn new(
        cfg: FederationConfig,
        ssl: SslConfig,
        images: &[Tensor],
        labels: &[usize],
        global: EncoderState,
        attack: Option<AttackSetup>,
        monitor: MonitorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ssl = ssl;
        ssl.local_epochs = cfg.local_epochs;
        ssl.validate()?;
        if images.len() != labels.len() {
            return Err(Error::contract("images and labels must align"));
        }
        if let Some(setup) = &attack {
            setup.attack.validate()?;
            setup.injector_cfg.validate()?;
            if cfg.n_malicious == 0 {
                return Err(Error::contract(
                    "attack setup provided but n_malicious is zero",
                ));
            }
        }
        let partitions = partition_dirichlet(labels, cfg.n_clients, &cfg.dirichlet_alpha, cfg.seed)?;
        let client_data: Vec<Vec<Tensor>> = partitions
            .iter()
            .map(|p| p.iter().map(|&i| images[i].clone()).collect())
            .collect();
        let monitor_views = if monitor.enabled {
            let mut mrng = rng::derive(cfg.seed, &[tag::CONVERGENCE]);
            let k = monitor.probe_batch.min(images.len()).max(2);
            let order = shuffle_indices(images.len(), &mut mrng);
            let mut v1 = Vec::with_capacity(k);
            let mut v2 = Vec::with_capacity(k);
            for &i in order.iter().take(k) {
                let pair = crate::augment::augment_pair(&images[i], &ssl.augment, &mut mrng)?;
                v1.push(pair.view1);
                v2.push(pair.view2);
            }
            Some((
                Tensor::stack(&v1.iter().collect::<Vec<_>>()),
                Tensor::stack(&v2.iter().collect::<Vec<_>>()),
            ))
        } else {
            None
        };
        Ok(Federation {
            cfg,
            ssl,
            state: FederationState {
                round: 0,
                global,
                partitions,
            },
            attack,
            monitor,
            client_data,
            monitor_views,
        })
    }

    pub fn global(&self) -> &EncoderState {
        &self.state.global
    }

    pub fn injector(&self) -> Option<&InjectorState> {
        self.attack.as_ref().and_then(|a| a.injector.as_ref())
    }

    /// A pure (loss, gradient) handle over flattened encoder parameters,
    /// evaluated on the fixed monitor batch. Available when the monitor is
    /// enabled.
    pub fn monitor_loss_handle(&self) -> Option<impl Fn(&[f64]) -> (f64, Vec<f64>)> {
        let (v1, v2) = self.monitor_views.as_ref()?;
        let template = self.state.global.clone();
        let temperature = self.ssl.temperature;
        let (v1, v2) = (v1.clone(), v2.clone());
        Some(move |flat: &[f64]| {
            let mut enc = template.clone();
            enc.params.assign_flat(flat);
            let mut g = Graph::new();
            let bound = enc.params.bind(&mut g);
            let x1 = g.input(v1.clone());
            let x2 = g.input(v2.clone());
            let f1 = encoder_features(&mut g, &bound, &enc.config, x1);
            let f2 = encoder_features(&mut g, &bound, &enc.config, x2);
            let p1 = encoder_projection(&mut g, &bound, &f1);
            let p2 = encoder_projection(&mut g, &bound, &f2);
            let loss = nt_xent_node(&mut g, p1, p2, temperature);
            let value = g.scalar(loss);
            g.backward(loss);
            let mut grad = Vec::with_capacity(flat.len());
            for (i, (_, t)) in enc.params.iter().enumerate() {
                match g.grad(bound.vars()[i]) {
                    Some(gr) => grad.extend_from_slice(gr),
                    None => grad.extend(std::iter::repeat(0.0).take(t.len())),
                }
            }
            (value, grad)
        })
    }

    fn select_clients(&self, round: usize) -> Vec<usize> {
        let n = self.cfg.n_clients;
        if self.cfg.client_fraction >= 1.0 {
            return (0..n).collect();
        }
        let k = ((self.cfg.client_fraction * n as f64).floor() as usize).max(1);
        let mut stream = rng::derive(self.cfg.seed, &[tag::SELECTION, round as u64]);
        // Uniform without replacement; a nonempty selection by construction.
        let mut ids = shuffle_indices(n, &mut stream);
        ids.truncate(k);
        ids.sort_unstable();
        ids
    }

    /// Contrastive loss and gradient norm of the global model on the fixed
    /// monitor batch.
    fn probe_measurement(&self) -> Option<(f64, f64)> {
        let (v1, v2) = self.monitor_views.as_ref()?;
        let mut g = Graph::new();
        let bound = self.state.global.params.bind(&mut g);
        let x1 = g.input(v1.clone());
        let x2 = g.input(v2.clone());
        let cfg = &self.state.global.config;
        let f1 = encoder_features(&mut g, &bound, cfg, x1);
        let f2 = encoder_features(&mut g, &bound, cfg, x2);
        let p1 = encoder_projection(&mut g, &bound, &f1);
        let p2 = encoder_projection(&mut g, &bound, &f2);
        let loss = nt_xent_node(&mut g, p1, p2, self.ssl.temperature);
        let value = g.scalar(loss);
        g.backward(loss);
        let mut norm2 = 0.0;
        for v in bound.vars() {
            if let Some(gr) = g.grad(*v) {
                norm2 += gr.iter().map(|x| x * x).sum::<f64>();
            }
        }
        Some((value, norm2.sqrt()))
    }

    fn malicious_round(
        &mut self,
        client: usize,
        round: usize,
    ) -> Result<(ClientUpdate, f64, f64, Option<InjectorLossParts>, usize)> {
        let setup = self.attack.as_mut().expect("attack setup checked");
        let data = &self.client_data[client];
        let mut stream = rng::derive(self.cfg.seed, &[tag::CLIENT_ROUND, round as u64, client as u64]);

        // Lazily build and identity-pretrain the injector.
        if matches!(setup.trigger, TriggerKind::Injector) && setup.injector.is_none() {
            let mut init_rng = rng::derive(self.cfg.seed, &[tag::INJECTOR, client as u64]);
            let mut inj = InjectorState::init(setup.injector_cfg.unet, &mut init_rng);
            identity_pretrain(&mut inj, data, &setup.injector_cfg, &mut init_rng)?;
            setup.injector = Some(inj);
        }

        let mut pair = EncoderPair::from_global(&self.state.global);
        let one_epoch_ssl = SslConfig {
            local_epochs: 1,
            ..self.ssl.clone()
        };
        let mut last_align = 0.0;
        let mut last_uti = 0.0;
        let mut inj_parts = None;
        let mut steps = 0usize;

        // Stage 1 (injector) and stage 2 (encoder) alternate once per local
        // epoch; past the configured schedule the trigger stays frozen.
        let stage1_active = setup.attacked_rounds < setup.injector_cfg.train_rounds;
        for _epoch in 0..self.ssl.local_epochs {
            if stage1_active && matches!(setup.trigger, TriggerKind::Injector) {
                let ctx = crate::injector::InjectorContext {
                    stealth_extractor: &pair.clean,
                    clean_encoder: &pair.clean,
                    backdoored_encoder: &pair.backdoored,
                    targets: &setup.targets,
                };
                let stage1_cfg = InjectorConfig {
                    epochs: 1,
                    ..setup.injector_cfg.clone()
                };
                let report = train_injector(
                    setup.injector.as_ref().expect("initialized above"),
                    data,
                    &self.ssl.augment,
                    &ctx,
                    &stage1_cfg,
                    &mut stream,
                )?;
                if let Some(last) = report.loss_history.last() {
                    inj_parts = Some(*last);
                }
                setup.injector = Some(report.injector);
            }

            let trigger = match &setup.trigger {
                TriggerKind::Injector => Trigger::Injector(setup.injector.as_ref().expect("set")),
                TriggerKind::Patch(cfg) => Trigger::Patch(cfg),
                TriggerKind::Identity => Trigger::Identity,
            };
            let report = malicious_local_train(
                &pair,
                data,
                &trigger,
                &setup.targets,
                &setup.attack,
                &one_epoch_ssl,
                &mut stream,
            )?;
            if let Some(last) = report.loss_history.last() {
                last_align = last.align;
                last_uti = last.utility;
            }
            steps += report.steps;
            pair.backdoored = report.encoder;
        }

        setup.attacked_rounds += 1;
        let update = ClientUpdate {
            client_id: client,
            params: pair.backdoored.params.clone(),
            sample_count: data.len(),
            role: ClientRole::Malicious,
        };
        Ok((update, last_align, last_uti, inj_parts, steps))
    }

    /// Run one full round: broadcast, local training (parallel over benign
    /// clients), aggregation, monitor measurements.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.state.round;
        if round >= self.cfg.rounds {
            return Err(Error::contract(format!(
                "round {round} exceeds configured rounds {}",
                self.cfg.rounds
            )));
        }
        let selected = self.select_clients(round);
        let attack_due = self.attack.is_some() && round % self.cfg.attack_interval == 0;

        let (probe_loss, probe_grad_norm) = match self.probe_measurement() {
            Some((l, n)) => (Some(l), Some(n)),
            None => (None, None),
        };

        // Benign side: parallel, order-stable.
        let benign_ids: Vec<usize> = selected
            .iter()
            .copied()
            .filter(|&c| !(self.cfg.is_malicious(c) && attack_due))
            .collect();
        let global = self.state.global.clone();
        let ssl = self.ssl.clone();
        let seed = self.cfg.seed;
        let benign_results: Vec<Result<(ClientUpdate, f64)>> = benign_ids
            .par_iter()
            .map(|&client| {
                let data = &self.client_data[client];
                let mut stream =
                    rng::derive(seed, &[tag::CLIENT_ROUND, round as u64, client as u64]);
                let report = benign_local_train(&global, data, &ssl, &mut stream)
                    .map_err(|e| e.in_client(client, round))?;
                let mean_last = if report.loss_history.is_empty() {
                    0.0
                } else {
                    let per_epoch = report.loss_history.len() / ssl.local_epochs.max(1);
                    let tail = &report.loss_history[report.loss_history.len() - per_epoch.max(1)..];
                    tail.iter().sum::<f64>() / tail.len() as f64
                };
                let role = if self.cfg.is_malicious(client) {
                    ClientRole::Malicious
                } else {
                    ClientRole::Benign
                };
                Ok((
                    ClientUpdate {
                        client_id: client,
                        params: report.encoder.params,
                        sample_count: data.len(),
                        role,
                    },
                    mean_last,
                ))
            })
            .collect();

        let mut updates = Vec::with_capacity(selected.len());
        let mut benign_losses = Vec::new();
        for r in benign_results {
            let (u, l) = r?;
            benign_losses.push(l);
            updates.push(u);
        }

        // Malicious side (at most a handful; sequential keeps the injector
        // state simple).
        let mut malicious_align = None;
        let mut malicious_utility = None;
        let mut injector_losses = None;
        let mut epsilon = None;
        if attack_due {
            let malicious_ids: Vec<usize> = selected
                .iter()
                .copied()
                .filter(|&c| self.cfg.is_malicious(c))
                .collect();
            for client in malicious_ids {
                let (update, align, uti, parts, steps) = self
                    .malicious_round(client, round)
                    .map_err(|e| e.in_client(client, round))?;
                malicious_align = Some(align);
                malicious_utility = Some(uti);
                injector_losses = parts;

                if self.monitor.enabled && self.ssl.learning_rate > 0.0 && steps > 0 {
                    // Reference: the benign update this client would have
                    // produced from the same stream.
                    let mut ref_stream =
                        rng::derive(seed, &[tag::CLIENT_ROUND, round as u64, client as u64]);
                    let reference = benign_local_train(
                        &self.state.global,
                        &self.client_data[client],
                        &self.ssl,
                        &mut ref_stream,
                    )
                    .map_err(|e| e.in_client(client, round))?;
                    let g0 = self.state.global.params.flatten();
                    let gm = crate::convergence::effective_direction(
                        &g0,
                        &update.params.flatten(),
                        self.ssl.learning_rate,
                        steps,
                    )?;
                    let gc = crate::convergence::effective_direction(
                        &g0,
                        &reference.encoder.params.flatten(),
                        self.ssl.learning_rate,
                        reference.steps,
                    )?;
                    epsilon = Some(crate::convergence::measure_epsilon(&gm, &gc)?);
                }
                updates.push(update);
            }
        }

        let weights = {
            let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
            let mut by_id = updates.iter().map(|u| (u.client_id, u.sample_count as f64 / total)).collect::<Vec<_>>();
            by_id.sort_by_key(|&(id, _)| id);
            by_id.into_iter().map(|(_, w)| w).collect::<Vec<f64>>()
        };
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let aggregated = match self.cfg.aggregation {
            AggregationRule::FedAvg => fedavg_aggregate(&updates)?,
            AggregationRule::Krum { f } => defense::krum_aggregate(&updates, f)?,
            AggregationRule::TrimmedMean { k } => defense::trimmed_mean_aggregate(&updates, k)?,
        };
        self.state.global.params = aggregated;
        self.state.round += 1;

        let benign_loss_mean = if benign_losses.is_empty() {
            None
        } else {
            Some(benign_losses.iter().sum::<f64>() / benign_losses.len() as f64)
        };
        Ok(RoundMetrics {
            round,
            selected,
            weights,
            attacked: attack_due,
            benign_loss_mean,
            malicious_align,
            malicious_utility,
            injector_losses,
            epsilon,
            probe_loss,
            probe_grad_norm,
        })
    }

    /// Run all configured rounds, returning the metric stream.
    pub fn run_all(&mut self) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        while self.state.round < self.cfg.rounds {
            out.push(self.run_round()?);
        }
        Ok(out)
    }
}
