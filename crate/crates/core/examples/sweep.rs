//! Attack-dynamics sweep: runs the federated attack round by round and
//! probes ASR / BA / SSIM along the way. Handy for tuning loss weights on
//! new datasets.
//!
//! Usage: cargo run --example sweep -- <alpha> <beta> <lambda> <rounds> [seed] [inj_lr] [train_rounds]

use std::path::PathBuf;

use fsslsim_core::attack::Trigger;
use fsslsim_core::config::ExperimentConfig;
use fsslsim_core::data::load_dataset;
use fsslsim_core::eval::{accuracy_percent, compute_asr, predict_with_log, ssim, train_probe};
use fsslsim_core::federation::{AttackSetup, Federation, MonitorConfig, TriggerKind};
use fsslsim_core::injector::TargetExemplars;
use fsslsim_core::models::EncoderState;
use fsslsim_core::rng::{self, tag};
use fsslsim_core::ssl::shuffle_indices;
use fsslsim_core::tensor::Tensor;

const BASE: &str = r#"
[run]
name = "sweep"
seed = 0

[dataset]
source = "synthetic"
image_size = 16
classes = 8
train = 1200
test = 400
downstream_label_fraction = 0.1
mode = "disjoint-classes"

[encoder]
base_channels = 8
proj_hidden = 32
proj_dim = 16

[federation]
n_clients = 5
n_malicious = 1
rounds = 30
local_epochs = 3
attack_interval = 1

[ssl]
batch_size = 32
learning_rate = 0.05

[attack]
enabled = true
target_class = 0
poison_ratio = 0.1
exemplar_count = 8
trigger = { kind = "injector" }

[injector]
batch_size = 16
n_slices = 64
identity_pretrain_steps = 200

[probe]
epochs = 40
"#;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let alpha: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let beta: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(6.0);
    let rounds: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(30);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let inj_lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let train_rounds: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1_000_000);

    let mut cfg = ExperimentConfig::from_toml(BASE).unwrap();
    cfg.run.seed = seed;
    cfg.dataset.seed = seed;
    cfg.federation.seed = seed;
    cfg.federation.rounds = rounds;
    cfg.injector.alpha = alpha;
    cfg.injector.beta = beta;
    cfg.attack.params.lambda_align = lambda;
    cfg.attack.params.lambda_uti = lambda;
    cfg.injector.learning_rate = inj_lr;
    cfg.injector.train_rounds = train_rounds;

    let data = load_dataset(&cfg.dataset).unwrap();
    eprintln!(
        "sweep alpha={alpha} beta={beta} lambda={lambda} rounds={rounds} seed={seed}"
    );

    // Cached clean pretraining per seed.
    let cache: PathBuf = std::env::temp_dir().join(format!("sweep-pretrain-s{seed}.ckpt"));
    let clean = if cache.exists() {
        let params = fsslsim_core::checkpoint::load(&cache).unwrap();
        EncoderState {
            config: cfg.encoder,
            params,
            role: fsslsim_core::models::EncoderRole::Clean,
        }
    } else {
        let init = EncoderState::init(cfg.encoder, &mut rng::derive(seed, &[tag::MODEL_INIT]));
        let mut fed_cfg = cfg.federation.clone();
        fed_cfg.n_malicious = 0;
        let mut fed = Federation::new(
            fed_cfg,
            cfg.ssl.clone(),
            &data.pretrain_images,
            &data.pretrain_labels,
            init,
            None,
            MonitorConfig::default(),
        )
        .unwrap();
        fed.run_all().unwrap();
        fsslsim_core::checkpoint::save(&fed.global().params, &cache).unwrap();
        fed.global().clone()
    };

    // Attack setup mirroring the experiment stage.
    let target = cfg.attack.params.target_class;
    let cands: Vec<usize> = (0..data.attacker_pool_images.len())
        .filter(|&i| data.attacker_pool_labels[i] == target)
        .collect();
    let mut stream = rng::derive(seed, &[tag::INJECTOR, 0xe8]);
    let order = shuffle_indices(cands.len(), &mut stream);
    let exemplars: Vec<Tensor> = order
        .iter()
        .take(cfg.attack.params.exemplar_count)
        .map(|&i| data.attacker_pool_images[cands[i]].clone())
        .collect();
    let setup = AttackSetup {
        attack: cfg.attack.params.clone(),
        injector_cfg: cfg.injector.clone(),
        trigger: TriggerKind::Injector,
        targets: TargetExemplars::new(exemplars).unwrap(),
        injector: None,
        attacked_rounds: 0,
    };
    let mut fed = Federation::new(
        cfg.federation.clone(),
        cfg.ssl.clone(),
        &data.pretrain_images,
        &data.pretrain_labels,
        clean,
        Some(setup),
        MonitorConfig::default(),
    )
    .unwrap();

    println!("{:>5} {:>7} {:>7} {:>7} {:>9} {:>9}", "round", "ASR%", "BA%", "SSIM", "mal_align", "mal_uti");
    for r in 0..rounds {
        let m = fed.run_round().unwrap();
        if (r + 1) % 3 == 0 || r + 1 == rounds {
            let global = fed.global().clone();
            let injector = fed.injector().cloned().expect("injector trained");
            let mut prng = rng::derive(seed, &[tag::PROBE, 2]);
            let probe = train_probe(
                &global,
                &data.labeled_images,
                &data.labeled_labels,
                data.downstream_classes,
                &cfg.probe,
                &mut prng,
            )
            .unwrap();
            let trigger = Trigger::Injector(&injector);
            let (asr, _) = compute_asr(
                &probe,
                &data.test_images,
                &data.test_labels,
                &trigger,
                target,
            )
            .unwrap();
            let log =
                predict_with_log(&probe, &data.test_images, &data.test_labels, false).unwrap();
            let ba = accuracy_percent(&log);
            let mut ssim_sum = 0.0;
            for img in data.test_images.iter().take(24) {
                let poisoned = fsslsim_core::injector::inject(&injector, img);
                ssim_sum += ssim(img, &poisoned).unwrap();
            }
            println!(
                "{:>5} {:>7.2} {:>7.2} {:>7.4} {:>9.4} {:>9.4}",
                r + 1,
                asr,
                ba,
                ssim_sum / 24.0,
                m.malicious_align.unwrap_or(f64::NAN),
                m.malicious_utility.unwrap_or(f64::NAN),
            );
        }
    }
}
