//! Runtime oracle self-checks: each derived quantity is recomputed through
//! an independent route (exhaustive enumeration, closed forms, brute-force
//! comparisons) and compared at a pinned tolerance. The CLI exposes this as
//! `oracle-check`.

use std::fmt::Write as _;

use rand::Rng;

use crate::defense::detection_auc;
use crate::error::Result;
use crate::federation::{fedavg_aggregate, ClientRole, ClientUpdate};
use crate::ot::{
    exact_wasserstein_small, sliced_wasserstein, wasserstein_1d, EmpiricalDistribution,
    SlicedWdConfig,
};
use crate::ssl::contrastive_loss;
use crate::tensor::nn::ParamSet;
use crate::tensor::Tensor;

pub struct OracleCheckLine {
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub struct OracleCheckReport {
    pub lines: Vec<OracleCheckLine>,
}

impl OracleCheckReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<44} {:>12} {:>10} result", "check", "deviation", "tol");
        for l in &self.lines {
            let _ = writeln!(
                out,
                "{:<44} {:>12.3e} {:>10.1e} {}",
                l.name,
                l.deviation,
                l.tolerance,
                if l.pass { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

fn line(name: &str, deviation: f64, tolerance: f64) -> OracleCheckLine {
    OracleCheckLine {
        name: name.to_string(),
        deviation,
        tolerance,
        pass: deviation.is_finite() && deviation <= tolerance,
    }
}

/// Run every oracle comparison; pure and seeded.
pub fn run_oracle_checks(seed: u64) -> Result<OracleCheckReport> {
    let mut lines = Vec::new();
    let mut rng = crate::rng::derive(seed, &[0x0c]);

    // Sliced Wasserstein lower-bounds the exhaustive oracle.
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..40 {
        let n = rng.gen_range(2..=6);
        let d = rng.gen_range(1..=4);
        let mk = |rng: &mut rand_chacha::ChaCha12Rng| {
            EmpiricalDistribution::from_rows(
                &(0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .expect("valid rows")
        };
        let p = mk(&mut rng);
        let q = mk(&mut rng);
        let cfg = SlicedWdConfig::new(512, seed ^ trial).expect("positive slices");
        let swd = sliced_wasserstein(&p, &q, &cfg)?;
        let exact = exact_wasserstein_small(&p, &q)?;
        worst = worst.max(swd - exact);
    }
    lines.push(line("swd <= exact wasserstein (40 instances)", worst.max(0.0), 1e-6));

    // One-dimensional projection identity.
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p = EmpiricalDistribution::new(Tensor::new(vec![7, 1], a.clone())).expect("valid");
        let q = EmpiricalDistribution::new(Tensor::new(vec![7, 1], b.clone())).expect("valid");
        let cfg = SlicedWdConfig::new(16, rng.gen()).expect("positive slices");
        let swd = sliced_wasserstein(&p, &q, &cfg)?;
        let w1 = wasserstein_1d(&a, &b)?;
        worst = worst.max((swd - w1).abs());
    }
    lines.push(line("swd equals 1-d closed form at d=1", worst, 1e-9));

    // Contrastive loss vs direct softmax enumeration.
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.gen_range(2..5);
        let d = rng.gen_range(2..5);
        let mk = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let z1 = mk(&mut rng);
        let z2 = mk(&mut rng);
        let got = contrastive_loss(&Tensor::from_rows(&z1), &Tensor::from_rows(&z2), 0.5)?;
        let expect = nt_xent_enumeration(&z1, &z2, 0.5);
        worst = worst.max((got - expect).abs());
    }
    lines.push(line("contrastive loss vs softmax enumeration", worst, 1e-9));

    // Size-weighted aggregation vs the hand-computed case.
    let updates: Vec<ClientUpdate> = [(1usize, 1.0f64), (2, 2.0), (3, 3.0)]
        .iter()
        .enumerate()
        .map(|(i, &(count, value))| {
            let mut ps = ParamSet::new();
            ps.insert("w", Tensor::new(vec![1], vec![value]));
            ClientUpdate {
                client_id: i,
                params: ps,
                sample_count: count,
                role: ClientRole::Benign,
            }
        })
        .collect();
    let agg = fedavg_aggregate(&updates)?;
    lines.push(line(
        "fedavg weighted sum (counts 1,2,3 / params 1,2,3)",
        (agg.flatten()[0] - 14.0 / 6.0).abs(),
        1e-12,
    ));

    // Rank-based AUC vs brute-force pairwise comparison.
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let np = rng.gen_range(3..30);
        let nc = rng.gen_range(3..30);
        let p: Vec<f64> = (0..np)
            .map(|_| (rng.gen_range(0.0f64..2.0) * 4.0).round() / 4.0)
            .collect();
        let c: Vec<f64> = (0..nc)
            .map(|_| (rng.gen_range(0.0f64..2.0) * 4.0).round() / 4.0)
            .collect();
        let fast = detection_auc(&p, &c)?;
        let mut acc = 0.0;
        for &a in &p {
            for &b in &c {
                acc += if a < b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        worst = worst.max((fast - acc / (np * nc) as f64).abs());
    }
    lines.push(line("detection AUC vs pairwise oracle", worst, 1e-9));

    // Color transform vs the textbook scalar formulas.
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (r, g, b) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
        let img = Tensor::new(vec![3, 1, 1], vec![r, g, b]);
        let hsv = crate::color::rgb_to_hsv(&img)?;
        let (h, s, v) = reference_hsv(r, g, b);
        worst = worst
            .max((hsv.data()[0] - h).abs())
            .max((hsv.data()[1] - s).abs())
            .max((hsv.data()[2] - v).abs());
    }
    lines.push(line("hsv transform vs scalar reference", worst, 1e-6));

    Ok(OracleCheckReport { lines })
}

fn nt_xent_enumeration(z1: &[Vec<f64>], z2: &[Vec<f64>], t: f64) -> f64 {
    let normalize = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let views: Vec<Vec<f64>> = z1.iter().chain(z2.iter()).map(normalize).collect();
    let m = views.len();
    let n = z1.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for k in 0..m {
        let pos = if k < n { k + n } else { k - n };
        let mut denom = 0.0;
        for j in 0..m {
            if j != k {
                denom += (dot(&views[k], &views[j]) / t).exp();
            }
        }
        total += -((dot(&views[k], &views[pos]) / t).exp() / denom).ln();
    }
    total / m as f64
}

fn reference_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let c = mx - mn;
    let v = mx;
    let s = if mx == 0.0 { 0.0 } else { c / mx };
    let h = if c == 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / c).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / c + 2.0) / 6.0
    } else {
        ((r - g) / c + 4.0) / 6.0
    };
    (h, s, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_checks_pass_and_render() {
        let report = run_oracle_checks(17).unwrap();
        assert!(report.all_pass(), "\n{}", report.render());
        let text = report.render();
        assert!(text.contains("pass"));
        assert!(!text.contains("FAIL"));
    }
}
