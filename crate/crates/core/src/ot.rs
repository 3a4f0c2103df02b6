//! Wasserstein machinery: the closed-form 1-D 2-Wasserstein distance, an
//! exhaustive small-instance oracle, and the differentiable sliced
//! Wasserstein distance (SWD) over empirical measures.
//!
//! All three treat point sets as uniform empirical measures with equal
//! counts. SWD projects onto random unit directions, applies the sorted 1-D
//! closed form per slice, and places the square root outside the slice
//! average; gradients flow through the sort as the permutation frozen at the
//! evaluated point.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// A finite set of points in `R^d` with uniform weights `1/n`.
#[derive(Debug, Clone)]
pub struct EmpiricalDistribution {
    points: Tensor,
}

impl EmpiricalDistribution {
    /// `points` must be `[n, d]`, nonempty and finite.
    pub fn new(points: Tensor) -> Result<Self> {
        if points.ndim() != 2 || points.shape()[0] == 0 {
            return Err(Error::contract(format!(
                "empirical distribution needs a nonempty [n,d] matrix, got {:?}",
                points.shape()
            )));
        }
        if !points.all_finite() {
            return Err(Error::contract(
                "empirical distribution coordinates must be finite".to_string(),
            ));
        }
        Ok(EmpiricalDistribution { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        EmpiricalDistribution::new(Tensor::from_rows(rows))
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }
}

/// Configuration for the sliced distance: slice count and the seed the
/// projection directions are drawn from.
#[derive(Debug, Clone, Copy)]
pub struct SlicedWdConfig {
    pub n_slices: usize,
    pub seed: u64,
}

impl SlicedWdConfig {
    pub fn new(n_slices: usize, seed: u64) -> Result<Self> {
        if n_slices == 0 {
            return Err(Error::contract("n_slices must be at least 1".to_string()));
        }
        Ok(SlicedWdConfig { n_slices, seed })
    }
}

/// Closed-form 1-D 2-Wasserstein distance between equal-length samples:
/// `sqrt((1/n) * sum_i (a_(i) - b_(i))^2)` over sorted order statistics.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("empty samples".to_string()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("NaN in wasserstein_1d"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("NaN in wasserstein_1d"));
    let n = sa.len() as f64;
    let sum: f64 = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sum / n).sqrt())
}

/// Maximum point count the exhaustive oracle accepts.
pub const EXACT_ORACLE_MAX: usize = 8;

/// Exact 2-Wasserstein distance by enumerating all bijective couplings.
/// Refuses instances larger than [`EXACT_ORACLE_MAX`].
pub fn exact_wasserstein_small(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "point count mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.dim() != q.dim() {
        return Err(Error::contract(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let n = p.len();
    if n > EXACT_ORACLE_MAX {
        return Err(Error::contract(format!(
            "exact oracle refuses n={n} > {EXACT_ORACLE_MAX} (combinatorial)"
        )));
    }
    let d = p.dim();
    let pd = p.points().data();
    let qd = q.points().data();
    // Pairwise squared distances.
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..d {
                let diff = pd[i * d + t] - qd[j * d + t];
                s += diff * diff;
            }
            cost[i * n + j] = s;
        }
    }
    // Heap's algorithm over assignments of q-indices.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut stack = vec![0usize; n];
    let eval = |perm: &[usize], cost: &[f64]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum()
    };
    best = best.min(eval(&perm, &cost));
    let mut i = 0;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(eval(&perm, &cost));
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).sqrt())
}

/// Unit directions drawn from the sphere in `R^d` (normalized Gaussians),
/// returned as a `[d, n_slices]` projection matrix.
pub fn sample_directions(dim: usize, n_slices: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = vec![0.0; dim * n_slices];
    for s in 0..n_slices {
        let mut norm2 = 0.0;
        let mut col = vec![0.0; dim];
        for c in col.iter_mut() {
            // Box-Muller from two uniform draws.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            *c = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            norm2 += *c * *c;
        }
        let inv = 1.0 / norm2.sqrt().max(1e-12);
        for (r, c) in col.iter().enumerate() {
            data[r * n_slices + s] = c * inv;
        }
    }
    Tensor::new(vec![dim, n_slices], data)
}

/// Differentiable SWD between two `[n,d]` point-set nodes, given a `[d,S]`
/// direction matrix node. With uniform weights and equal counts, the slice
/// average of squared 1-D distances equals the mean over all sorted
/// projection differences.
pub fn swd_node(g: &mut Graph, p: Var, q: Var, dirs: Var) -> Var {
    let pp = g.matmul(p, dirs);
    let pq = g.matmul(q, dirs);
    let sp = g.sort_cols(pp);
    let sq = g.sort_cols(pq);
    let diff = g.sub(sp, sq);
    let sqd = g.mul(diff, diff);
    let mean = g.mean_all(sqd);
    g.sqrt_eps(mean, 1e-24)
}

/// Sliced Wasserstein distance between two equal-count, equal-dimension
/// empirical distributions.
pub fn sliced_wasserstein(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cfg: &SlicedWdConfig,
) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "point count mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.dim() != q.dim() {
        return Err(Error::contract(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let mut stream = rng::derive(cfg.seed, &[rng::tag::SLICES]);
    let dirs = sample_directions(p.dim(), cfg.n_slices, &mut stream);
    let mut g = Graph::new();
    let pv = g.input(p.points().clone());
    let qv = g.input(q.points().clone());
    let dv = g.input(dirs);
    let out = swd_node(&mut g, pv, qv, dv);
    Ok(g.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_dist(n: usize, d: usize, rng: &mut impl Rng) -> EmpiricalDistribution {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        EmpiricalDistribution::from_rows(&rows).unwrap()
    }

    #[test]
    fn w1d_identity_any_order() {
        let a = [3.0, -1.0, 2.0];
        let b = [2.0, 3.0, -1.0];
        assert_eq!(wasserstein_1d(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn w1d_single_translated_atom() {
        assert!((wasserstein_1d(&[0.0], &[1.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1d_sorted_matching_is_optimal() {
        // a={0,2}, b={1,3}: sorted pairing costs (1+1)/2 -> 1; the crossed
        // pairing costs (9+1)/2 -> sqrt(5). Brute force both couplings.
        let sorted_cost = ((1.0 + 1.0f64) / 2.0).sqrt();
        let crossed_cost = ((9.0 + 1.0f64) / 2.0).sqrt();
        let got = wasserstein_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((got - sorted_cost).abs() < 1e-15);
        assert!(got <= crossed_cost);
        assert!((got - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1d_length_mismatch_rejected() {
        assert!(wasserstein_1d(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exact_identity_distribution() {
        let mut rng = crate::rng::derive(21, &[1]);
        let p = rand_dist(5, 3, &mut rng);
        assert!(exact_wasserstein_small(&p, &p).unwrap() < 1e-12);
    }

    #[test]
    fn exact_two_point_translation() {
        let p = EmpiricalDistribution::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = EmpiricalDistribution::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        // Vertical translation by 1: both perms enumerate; identity pairing
        // costs (1+1)/2 = 1, crossed costs (2+2)/2 = 2.
        let got = exact_wasserstein_small(&p, &q).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_beats_heuristic_matchings() {
        let mut rng = crate::rng::derive(21, &[2]);
        let p = rand_dist(5, 3, &mut rng);
        let q = rand_dist(5, 3, &mut rng);
        let exact = exact_wasserstein_small(&p, &q).unwrap();
        // Any fixed matching (e.g. index order) upper-bounds the infimum.
        let n = p.len();
        let d = p.dim();
        let mut idx_cost = 0.0;
        for i in 0..n {
            for t in 0..d {
                let diff = p.points().data()[i * d + t] - q.points().data()[i * d + t];
                idx_cost += diff * diff;
            }
        }
        let idx_cost = (idx_cost / n as f64).sqrt();
        assert!(exact <= idx_cost + 1e-12);
    }

    #[test]
    fn exact_refuses_large_instances() {
        let mut rng = crate::rng::derive(21, &[3]);
        let p = rand_dist(9, 2, &mut rng);
        let q = rand_dist(9, 2, &mut rng);
        assert!(exact_wasserstein_small(&p, &q).is_err());
    }

    #[test]
    fn swd_zero_on_identical() {
        let mut rng = crate::rng::derive(21, &[4]);
        let p = rand_dist(6, 3, &mut rng);
        let cfg = SlicedWdConfig::new(64, 7).unwrap();
        assert!(sliced_wasserstein(&p, &p, &cfg).unwrap() < 1e-10);
    }

    #[test]
    fn swd_equals_w1d_in_one_dimension() {
        let mut rng = crate::rng::derive(21, &[5]);
        for _ in 0..20 {
            let a: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p =
                EmpiricalDistribution::new(Tensor::new(vec![7, 1], a.clone())).unwrap();
            let q =
                EmpiricalDistribution::new(Tensor::new(vec![7, 1], b.clone())).unwrap();
            let cfg = SlicedWdConfig::new(16, rng.gen()).unwrap();
            let swd = sliced_wasserstein(&p, &q, &cfg).unwrap();
            let w1 = wasserstein_1d(&a, &b).unwrap();
            assert!(
                (swd - w1).abs() < 1e-9,
                "d=1 projection identity violated: {swd} vs {w1}"
            );
        }
    }

    #[test]
    fn swd_lower_bounds_exact_distance() {
        let mut rng = crate::rng::derive(21, &[6]);
        for trial in 0..30 {
            let n = rng.gen_range(2..=6);
            let d = rng.gen_range(1..=4);
            let p = rand_dist(n, d, &mut rng);
            let q = rand_dist(n, d, &mut rng);
            let cfg = SlicedWdConfig::new(512, trial).unwrap();
            let swd = sliced_wasserstein(&p, &q, &cfg).unwrap();
            let exact = exact_wasserstein_small(&p, &q).unwrap();
            assert!(
                swd <= exact + 1e-6,
                "SWD {swd} exceeded exact {exact} (n={n}, d={d})"
            );
        }
    }

    #[test]
    fn swd_symmetric_under_same_seed() {
        let mut rng = crate::rng::derive(21, &[7]);
        let p = rand_dist(5, 3, &mut rng);
        let q = rand_dist(5, 3, &mut rng);
        let cfg = SlicedWdConfig::new(128, 99).unwrap();
        let pq = sliced_wasserstein(&p, &q, &cfg).unwrap();
        let qp = sliced_wasserstein(&q, &p, &cfg).unwrap();
        assert!((pq - qp).abs() < 1e-12);
    }

    #[test]
    fn all_three_distances_translation_invariant() {
        let mut rng = crate::rng::derive(21, &[8]);
        let p = rand_dist(5, 3, &mut rng);
        let q = rand_dist(5, 3, &mut rng);
        let shift = [0.7, -1.3, 2.1];
        let translate = |e: &EmpiricalDistribution| {
            let mut t = e.points().clone();
            let d = e.dim();
            for i in 0..e.len() {
                for c in 0..d {
                    t.data_mut()[i * d + c] += shift[c];
                }
            }
            EmpiricalDistribution::new(t).unwrap()
        };
        let (pt, qt) = (translate(&p), translate(&q));
        let cfg = SlicedWdConfig::new(256, 5).unwrap();

        let swd = sliced_wasserstein(&p, &q, &cfg).unwrap();
        let swd_t = sliced_wasserstein(&pt, &qt, &cfg).unwrap();
        assert!((swd - swd_t).abs() < 1e-9);

        let ex = exact_wasserstein_small(&p, &q).unwrap();
        let ex_t = exact_wasserstein_small(&pt, &qt).unwrap();
        assert!((ex - ex_t).abs() < 1e-9);

        let a: Vec<f64> = (0..p.len()).map(|i| p.points().data()[i * 3]).collect();
        let b: Vec<f64> = (0..q.len()).map(|i| q.points().data()[i * 3]).collect();
        let at: Vec<f64> = a.iter().map(|v| v + shift[0]).collect();
        let bt: Vec<f64> = b.iter().map(|v| v + shift[0]).collect();
        let w = wasserstein_1d(&a, &b).unwrap();
        let wt = wasserstein_1d(&at, &bt).unwrap();
        assert!((w - wt).abs() < 1e-9);
    }

    #[test]
    fn swd_gradient_matches_finite_differences() {
        let mut rng = crate::rng::derive(21, &[9]);
        let n = 5;
        let d = 3;
        let p0: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q0: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dirs = sample_directions(d, 64, &mut rng);

        let eval = |pdata: &[f64]| {
            let mut g = Graph::new();
            let p = g.input(Tensor::new(vec![n, d], pdata.to_vec()));
            let q = g.input(Tensor::new(vec![n, d], q0.clone()));
            let dv = g.input(dirs.clone());
            let out = swd_node(&mut g, p, q, dv);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![n, d], p0.clone()));
        let q = g.input(Tensor::new(vec![n, d], q0.clone()));
        let dv = g.input(dirs.clone());
        let out = swd_node(&mut g, p, q, dv);
        g.backward(out);
        let analytic = g.grad(p).unwrap().to_vec();

        for i in 0..n * d {
            let h = 1e-6;
            let mut pp = p0.clone();
            pp[i] += h;
            let fp = eval(&pp);
            pp[i] = p0[i] - h;
            let fm = eval(&pp);
            let numeric = (fp - fm) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic[i] - numeric).abs() / scale < 1e-4,
                "swd grad mismatch at {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }
}
