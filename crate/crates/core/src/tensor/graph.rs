//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Nodes are appended in topological order as the forward computation runs;
//! `backward` walks the tape in reverse. Branchy ops (sorting, channel
//! argmax in color transforms) freeze their control decisions at the
//! evaluated point, which is exactly the subgradient convention the loss
//! definitions assume.

use rayon::prelude::*;

use super::{mm, mm_nt_acc, mm_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Guard threshold below which color-space denominators are treated as
/// degenerate (achromatic pixels, black pixels).
pub const COLOR_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// a [m,k] * b [n,k]^T
    MatMulNT(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    /// ln((x+eps)/(1+eps-x)): epsilon-guarded inverse sigmoid on [0,1].
    Logit(Var, f64),
    /// x^(-1/2); inputs must be strictly positive (callers add an epsilon).
    Rsqrt(Var),
    /// sqrt(x + eps)
    SqrtEps(Var),
    Abs(Var),
    MinElem(Var, Var),
    MaxElem(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// [n,d] -> [n]
    RowSum(Var),
    /// y[i,j] = x[i,j] * s[i]
    RowScale(Var, Var),
    LogSoftmaxRows(Var),
    /// Gather entries (row, col) of a matrix into a vector.
    SelectElems(Var, Vec<(usize, usize)>),
    /// Sort each column ascending; `perm[i + j*n]` is the source row of
    /// output row i in column j.
    SortCols(Var, Vec<u32>),
    /// Concatenate along rows: [n1,d] ++ [n2,d].
    ConcatRows(Var, Var),
    /// Concatenate along channels: [n,c1,h,w] ++ [n,c2,h,w].
    ConcatChannels(Var, Var),
    Reshape(Var),
    /// Channels [from, to) of a [n,c,h,w] tensor.
    SliceChannels(Var, usize, usize),
    /// x [n,d] + b [d]
    BiasAdd2(Var, Var),
    /// x [n,c,h,w] + b [c]
    BiasAdd4(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        /// im2col buffers, one per sample: [K, oh*ow] with K = cin*kh*kw.
        cols: Vec<Vec<f64>>,
    },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// (mean, inv_std) per (sample, group).
        stats: Vec<(f64, f64)>,
    },
    RgbToHsv(Var),
    RgbToHsl(Var),
}

const GROUP_NORM_EPS: f64 = 1e-5;

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward evaluation's computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; `grad` is available after `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on non-scalar node");
        t.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ---- elementwise / arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn logit(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| ((x + eps) / (1.0 + eps - x)).ln())
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Logit(a, eps), ng)
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| {
                debug_assert!(x > 0.0, "rsqrt needs positive input, got {x}");
                1.0 / x.sqrt()
            })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Rsqrt(a), ng)
    }

    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| (x + eps).sqrt()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::SqrtEps(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Abs(a), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "min shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::MinElem(a, b), ng)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "max shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::MaxElem(a, b), ng)
    }

    // ---- reductions / shaping ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.ndim(), 2, "row_sum expects a matrix");
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = ta.data()[i * d..(i + 1) * d].iter().sum();
        }
        let ng = self.needs(a);
        self.push(Tensor::new(vec![n], out), Op::RowSum(a), ng)
    }

    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        assert_eq!(tx.ndim(), 2, "row_scale expects a matrix");
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        assert_eq!(ts.shape(), &[n], "row_scale scale length mismatch");
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let sv = ts.data()[i];
            for j in 0..d {
                out[i * d + j] = tx.data()[i * d + j] * sv;
            }
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(Tensor::new(vec![n, d], out), Op::RowScale(x, s), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.ndim(), 2, "log_softmax expects a matrix");
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &ta.data()[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                out[i * k + j] = row[j] - lse;
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(vec![n, k], out), Op::LogSoftmaxRows(a), ng)
    }

    pub fn select_elems(&mut self, m: Var, idx: Vec<(usize, usize)>) -> Var {
        let tm = self.value(m);
        assert_eq!(tm.ndim(), 2, "select_elems expects a matrix");
        let (n, k) = (tm.shape()[0], tm.shape()[1]);
        let data: Vec<f64> = idx
            .iter()
            .map(|&(r, c)| {
                assert!(r < n && c < k, "select index out of bounds");
                tm.data()[r * k + c]
            })
            .collect();
        let t = Tensor::new(vec![idx.len()], data);
        let ng = self.needs(m);
        self.push(t, Op::SelectElems(m, idx), ng)
    }

    /// Sort each column ascending (stable); gradient flows through the
    /// permutation frozen at this evaluation.
    pub fn sort_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.ndim(), 2, "sort_cols expects a matrix");
        let (n, s) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n * s];
        let mut perm = vec![0u32; n * s];
        let mut order: Vec<u32> = Vec::with_capacity(n);
        for j in 0..s {
            order.clear();
            order.extend(0..n as u32);
            // Stable: equal keys keep ascending row order.
            order.sort_by(|&p, &q| {
                ta.data()[p as usize * s + j]
                    .partial_cmp(&ta.data()[q as usize * s + j])
                    .expect("NaN in sort_cols input")
            });
            for (i, &src) in order.iter().enumerate() {
                out[i * s + j] = ta.data()[src as usize * s + j];
                perm[i + j * n] = src;
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(vec![n, s], out), Op::SortCols(a, perm), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.ndim(), 2);
        assert_eq!(tb.ndim(), 2);
        assert_eq!(ta.shape()[1], tb.shape()[1], "concat_rows width mismatch");
        let (n1, n2, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity((n1 + n2) * d);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![n1 + n2, d], data),
            Op::ConcatRows(a, b),
            ng,
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.ndim(), 4);
        assert_eq!(tb.ndim(), 4);
        let (n, c1, h, w) = dims4(ta.shape());
        let (n2, c2, h2, w2) = dims4(tb.shape());
        assert!(
            n == n2 && h == h2 && w == w2,
            "concat_channels spatial mismatch"
        );
        let hw = h * w;
        let mut out = vec![0.0; n * (c1 + c2) * hw];
        for i in 0..n {
            let dst = &mut out[i * (c1 + c2) * hw..];
            dst[..c1 * hw].copy_from_slice(&ta.data()[i * c1 * hw..(i + 1) * c1 * hw]);
            dst[c1 * hw..(c1 + c2) * hw]
                .copy_from_slice(&tb.data()[i * c2 * hw..(i + 1) * c2 * hw]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![n, c1 + c2, h, w], out),
            Op::ConcatChannels(a, b),
            ng,
        )
    }

    pub fn slice_channels(&mut self, a: Var, from: usize, to: usize) -> Var {
        let ta = self.value(a);
        let (n, c, h, w) = dims4(ta.shape());
        assert!(from < to && to <= c, "slice_channels range out of bounds");
        let hw = h * w;
        let cs = to - from;
        let mut out = vec![0.0; n * cs * hw];
        for i in 0..n {
            let src = &ta.data()[(i * c + from) * hw..(i * c + to) * hw];
            out[i * cs * hw..(i + 1) * cs * hw].copy_from_slice(src);
        }
        let ng = self.needs(a);
        self.push(
            Tensor::new(vec![n, cs, h, w], out),
            Op::SliceChannels(a, from, to),
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let ta = self.value(a);
        let expect: usize = shape.iter().product();
        assert_eq!(ta.len(), expect, "reshape length mismatch");
        let t = Tensor::new(shape, ta.data().to_vec());
        let ng = self.needs(a);
        self.push(t, Op::Reshape(a), ng)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.ndim(), 2);
        assert_eq!(tb.ndim(), 2);
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        mm(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a [m,k] * b[n,k]^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.ndim(), 2);
        assert_eq!(tb.ndim(), 2);
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (n, k2) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        mm_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNT(a, b), ng)
    }

    pub fn bias_add2(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!(tx.ndim(), 2);
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        assert_eq!(tb.shape(), &[d], "bias_add2 width mismatch");
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += tb.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::new(vec![n, d], out), Op::BiasAdd2(x, b), ng)
    }

    pub fn bias_add4(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, c, h, w) = dims4(tx.shape());
        assert_eq!(tb.shape(), &[c], "bias_add4 channel mismatch");
        let hw = h * w;
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let bv = tb.data()[ch];
                let base = (i * c + ch) * hw;
                for v in &mut out[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::BiasAdd4(x, b), ng)
    }

    // ---- convolution / spatial ----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, cin, h, wdt) = dims4(tx.shape());
        let (cout, cin2, kh, kw) = dims4(tw.shape());
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert!(stride >= 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let ohw = oh * ow;

        let xs = tx.data();
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &xs[i * cin * h * wdt..(i + 1) * cin * h * wdt];
                let cols = im2col(xi, cin, h, wdt, kh, kw, stride, pad, oh, ow);
                let mut oi = vec![0.0; cout * ohw];
                mm(tw.data(), &cols, &mut oi, cout, k, ohw);
                (cols, oi)
            })
            .collect();

        let mut out = vec![0.0; n * cout * ohw];
        let mut cols_all = Vec::with_capacity(n);
        for (i, (cols, oi)) in per_sample.into_iter().enumerate() {
            out[i * cout * ohw..(i + 1) * cout * ohw].copy_from_slice(&oi);
            cols_all.push(cols);
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(
            Tensor::new(vec![n, cout, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols: cols_all,
            },
            ng,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = dims4(tx.shape());
        let hw = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                out[i * c + ch] = tx.data()[base..base + h * w].iter().sum::<f64>() / hw;
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = dims4(tx.shape());
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for i in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xp in 0..ow {
                        out[((i * c + ch) * oh + y) * ow + xp] =
                            tx.data()[((i * c + ch) * h + y / 2) * w + xp / 2];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Upsample2x(x), ng)
    }

    /// Group normalization over `[n,c,h,w]` with per-channel affine
    /// parameters. Stateless (no running statistics), so behavior is
    /// identical in training and evaluation.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = dims4(tx.shape());
        assert!(groups >= 1 && c % groups == 0, "channels must divide groups");
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let cpg = c / groups;
        let m = cpg * h * w;
        let hw = h * w;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![0.0; tx.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for i in 0..n {
            for gr in 0..groups {
                let base = (i * c + gr * cpg) * hw;
                let chunk = &tx.data()[base..base + m];
                let mean = chunk.iter().sum::<f64>() / m as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                stats.push((mean, inv));
                for cc in 0..cpg {
                    let ch = gr * cpg + cc;
                    for p in 0..hw {
                        let idx = base + cc * hw + p;
                        out[idx] = (tx.data()[idx] - mean) * inv * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        )
    }

    // ---- color transforms ----

    /// RGB \[n,3,h,w\] in \[0,1\] to (H, S, V) channels. Hue is 0 at
    /// achromatic pixels and the guarded branches give zero gradient there.
    pub fn rgb_to_hsv(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = dims4(tx.shape());
        assert_eq!(c, 3, "rgb_to_hsv expects 3 channels");
        let hw = h * w;
        let mut out = vec![0.0; n * 3 * hw];
        for i in 0..n {
            let base = i * 3 * hw;
            for p in 0..hw {
                let r = tx.data()[base + p];
                let g = tx.data()[base + hw + p];
                let b = tx.data()[base + 2 * hw + p];
                let (hv, sv, vv) = hsv_forward(r, g, b);
                out[base + p] = hv;
                out[base + hw + p] = sv;
                out[base + 2 * hw + p] = vv;
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, 3, h, w], out), Op::RgbToHsv(x), ng)
    }

    /// RGB \[n,3,h,w\] in \[0,1\] to (H, S_hsl, L) channels.
    pub fn rgb_to_hsl(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = dims4(tx.shape());
        assert_eq!(c, 3, "rgb_to_hsl expects 3 channels");
        let hw = h * w;
        let mut out = vec![0.0; n * 3 * hw];
        for i in 0..n {
            let base = i * 3 * hw;
            for p in 0..hw {
                let r = tx.data()[base + p];
                let g = tx.data()[base + hw + p];
                let b = tx.data()[base + 2 * hw + p];
                let (hv, sv, lv) = hsl_forward(r, g, b);
                out[base + p] = hv;
                out[base + hw + p] = sv;
                out[base + 2 * hw + p] = lv;
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, 3, h, w], out), Op::RgbToHsl(x), ng)
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss node. Gradients of all contributing
    /// `param` leaves (and intermediates) become available via `grad`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let gout = self.grads[i].take().expect("grad just checked");
            self.step_backward(i, &gout);
            self.grads[i] = Some(gout);
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        f(slot.as_mut().expect("slot initialized"));
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, i: usize, gout: &[f64]) {
        // Ops are cheap to match; context buffers are borrowed from the node.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
                self.acc(b, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
                self.acc(b, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, y), bq) in g.iter_mut().zip(gout).zip(&bv) {
                        *x += y * bq;
                    }
                });
                self.acc(b, |g| {
                    for ((x, y), aq) in g.iter_mut().zip(gout).zip(&av) {
                        *x += y * aq;
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.acc(a, |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.acc(a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let av = ta.data().to_vec();
                let bv = tb.data().to_vec();
                // da += gout [m,n] * b^T  -> mm_nt(gout, b[k,n] as rows of len n)
                self.acc(a, |g| {
                    // g[m,k] += gout * b^T: treat b as [k,n]; need gout[m,n] x b^T[n,k]
                    // mm_nt_acc expects rhs in [k_out, shared]; here rows of b^T are columns of b.
                    for i2 in 0..m {
                        let grow = &gout[i2 * n..(i2 + 1) * n];
                        let orow = &mut g[i2 * k..(i2 + 1) * k];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (x, y) in grow.iter().zip(brow.iter()) {
                                acc += x * y;
                            }
                            orow[p] += acc;
                        }
                    }
                });
                self.acc(b, |g| {
                    // g[k,n] += a^T * gout
                    mm_tn_acc(&av, gout, g, k, m, n);
                });
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                let av = ta.data().to_vec();
                let bv = tb.data().to_vec();
                self.acc(a, |g| {
                    // da [m,k] += gout [m,n] * b [n,k]
                    let mut tmp = vec![0.0; m * k];
                    mm(gout, &bv, &mut tmp, m, n, k);
                    g.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                });
                self.acc(b, |g| {
                    // db [n,k] += gout^T [n,m] * a [m,k]
                    mm_tn_acc(gout, &av, g, n, m, k);
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let av = self.nodes[a.0].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, y), &v) in g.iter_mut().zip(gout).zip(&av) {
                        if v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let av = self.nodes[a.0].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, y), &v) in g.iter_mut().zip(gout).zip(&av) {
                        *x += if v > 0.0 { *y } else { slope * y };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let yv = self.nodes[i].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, gy), &y) in g.iter_mut().zip(gout).zip(&yv) {
                        *x += gy * y * (1.0 - y);
                    }
                });
            }
            Op::Logit(a, eps) => {
                let (a, eps) = (*a, *eps);
                let av = self.nodes[a.0].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, gy), &v) in g.iter_mut().zip(gout).zip(&av) {
                        *x += gy * (1.0 / (v + eps) + 1.0 / (1.0 + eps - v));
                    }
                });
            }
            Op::Rsqrt(a) => {
                let a = *a;
                let yv = self.nodes[i].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, gy), &y) in g.iter_mut().zip(gout).zip(&yv) {
                        *x += gy * (-0.5) * y * y * y;
                    }
                });
            }
            Op::SqrtEps(a) => {
                let a = *a;
                let yv = self.nodes[i].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, gy), &y) in g.iter_mut().zip(gout).zip(&yv) {
                        *x += gy * 0.5 / y.max(1e-300);
                    }
                });
            }
            Op::Abs(a) => {
                let a = *a;
                let av = self.nodes[a.0].value.data().to_vec();
                self.acc(a, |g| {
                    for ((x, gy), &v) in g.iter_mut().zip(gout).zip(&av) {
                        *x += gy * if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::MinElem(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |g| {
                    for (idx, (x, gy)) in g.iter_mut().zip(gout).enumerate() {
                        if av[idx] <= bv[idx] {
                            *x += gy;
                        }
                    }
                });
                self.acc(b, |g| {
                    for (idx, (x, gy)) in g.iter_mut().zip(gout).enumerate() {
                        if av[idx] > bv[idx] {
                            *x += gy;
                        }
                    }
                });
            }
            Op::MaxElem(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |g| {
                    for (idx, (x, gy)) in g.iter_mut().zip(gout).enumerate() {
                        if av[idx] >= bv[idx] {
                            *x += gy;
                        }
                    }
                });
                self.acc(b, |g| {
                    for (idx, (x, gy)) in g.iter_mut().zip(gout).enumerate() {
                        if av[idx] < bv[idx] {
                            *x += gy;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let a = *a;
                let gy = gout[0];
                self.acc(a, |g| g.iter_mut().for_each(|x| *x += gy));
            }
            Op::MeanAll(a) => {
                let a = *a;
                let len = self.nodes[a.0].value.len() as f64;
                let gy = gout[0] / len;
                self.acc(a, |g| g.iter_mut().for_each(|x| *x += gy));
            }
            Op::RowSum(a) => {
                let a = *a;
                let d = self.nodes[a.0].value.shape()[1];
                self.acc(a, |g| {
                    for (i2, gy) in gout.iter().enumerate() {
                        for x in &mut g[i2 * d..(i2 + 1) * d] {
                            *x += gy;
                        }
                    }
                });
            }
            Op::RowScale(x, s) => {
                let (x, s) = (*x, *s);
                let xv = self.nodes[x.0].value.data().to_vec();
                let sv = self.nodes[s.0].value.data().to_vec();
                let d = self.nodes[x.0].value.shape()[1];
                self.acc(x, |g| {
                    for (idx, (gx, gy)) in g.iter_mut().zip(gout).enumerate() {
                        *gx += gy * sv[idx / d];
                    }
                });
                self.acc(s, |g| {
                    for (i2, gs) in g.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += gout[i2 * d + j] * xv[i2 * d + j];
                        }
                        *gs += acc;
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let a = *a;
                let yv = self.nodes[i].value.data().to_vec();
                let k = self.nodes[a.0].value.shape()[1];
                self.acc(a, |g| {
                    let n = g.len() / k;
                    for i2 in 0..n {
                        let gy = &gout[i2 * k..(i2 + 1) * k];
                        let sum_g: f64 = gy.iter().sum();
                        for j in 0..k {
                            let sm = yv[i2 * k + j].exp();
                            g[i2 * k + j] += gy[j] - sm * sum_g;
                        }
                    }
                });
            }
            Op::SelectElems(m, idx) => {
                let m = *m;
                let idx = idx.clone();
                let k = self.nodes[m.0].value.shape()[1];
                self.acc(m, |g| {
                    for (out_i, &(r, c)) in idx.iter().enumerate() {
                        g[r * k + c] += gout[out_i];
                    }
                });
            }
            Op::SortCols(a, perm) => {
                let a = *a;
                let perm = perm.clone();
                let s = self.nodes[a.0].value.shape()[1];
                let n = self.nodes[a.0].value.shape()[0];
                self.acc(a, |g| {
                    for j in 0..s {
                        for i2 in 0..n {
                            let src = perm[i2 + j * n] as usize;
                            g[src * s + j] += gout[i2 * s + j];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let la = self.nodes[a.0].value.len();
                self.acc(a, |g| {
                    g.iter_mut().zip(&gout[..la]).for_each(|(x, y)| *x += y)
                });
                self.acc(b, |g| {
                    g.iter_mut().zip(&gout[la..]).for_each(|(x, y)| *x += y)
                });
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let (n, c1, h, w) = dims4(self.nodes[a.0].value.shape());
                let c2 = self.nodes[b.0].value.shape()[1];
                let hw = h * w;
                self.acc(a, |g| {
                    for i2 in 0..n {
                        let src = &gout[i2 * (c1 + c2) * hw..];
                        for (x, y) in g[i2 * c1 * hw..(i2 + 1) * c1 * hw]
                            .iter_mut()
                            .zip(&src[..c1 * hw])
                        {
                            *x += y;
                        }
                    }
                });
                self.acc(b, |g| {
                    for i2 in 0..n {
                        let src = &gout[i2 * (c1 + c2) * hw + c1 * hw..];
                        for (x, y) in g[i2 * c2 * hw..(i2 + 1) * c2 * hw]
                            .iter_mut()
                            .zip(&src[..c2 * hw])
                        {
                            *x += y;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                self.acc(a, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
            }
            Op::SliceChannels(a, from, to) => {
                let (a, from, to) = (*a, *from, *to);
                let (n, c, h, w) = dims4(self.nodes[a.0].value.shape());
                let hw = h * w;
                let cs = to - from;
                self.acc(a, |g| {
                    for i2 in 0..n {
                        let dst = &mut g[(i2 * c + from) * hw..(i2 * c + to) * hw];
                        let src = &gout[i2 * cs * hw..(i2 + 1) * cs * hw];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::BiasAdd2(x, b) => {
                let (x, b) = (*x, *b);
                let d = self.nodes[b.0].value.len();
                self.acc(x, |g| g.iter_mut().zip(gout).for_each(|(p, q)| *p += q));
                self.acc(b, |g| {
                    for (idx, gy) in gout.iter().enumerate() {
                        g[idx % d] += gy;
                    }
                });
            }
            Op::BiasAdd4(x, b) => {
                let (x, b) = (*x, *b);
                let (n, c, h, w) = dims4(self.nodes[x.0].value.shape());
                let hw = h * w;
                self.acc(x, |g| g.iter_mut().zip(gout).for_each(|(p, q)| *p += q));
                self.acc(b, |g| {
                    for i2 in 0..n {
                        for ch in 0..c {
                            let base = (i2 * c + ch) * hw;
                            g[ch] += gout[base..base + hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let (n, cin, h, wdt) = dims4(self.nodes[x.0].value.shape());
                let (cout, _, kh, kw) = dims4(self.nodes[w.0].value.shape());
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wdt + 2 * pad - kw) / stride + 1;
                let k = cin * kh * kw;
                let ohw = oh * ow;
                let wv = self.nodes[w.0].value.data().to_vec();

                if self.nodes[w.0].needs_grad {
                    // Per-sample contributions computed in parallel, reduced
                    // in sample order so results do not depend on scheduling.
                    let contribs: Vec<Vec<f64>> = (0..n)
                        .into_par_iter()
                        .map(|i2| {
                            let mut gw = vec![0.0; cout * k];
                            let go = &gout[i2 * cout * ohw..(i2 + 1) * cout * ohw];
                            mm_nt_acc(go, &cols[i2], &mut gw, cout, ohw, k);
                            gw
                        })
                        .collect();
                    self.acc(w, |g| {
                        for cb in &contribs {
                            g.iter_mut().zip(cb).for_each(|(p, q)| *p += q);
                        }
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let gxs: Vec<Vec<f64>> = (0..n)
                        .into_par_iter()
                        .map(|i2| {
                            let go = &gout[i2 * cout * ohw..(i2 + 1) * cout * ohw];
                            let mut gcols = vec![0.0; k * ohw];
                            mm_tn_acc(&wv, go, &mut gcols, k, cout, ohw);
                            col2im(&gcols, cin, h, wdt, kh, kw, stride, pad, oh, ow)
                        })
                        .collect();
                    self.acc(x, |g| {
                        let per = cin * h * wdt;
                        for (i2, gx) in gxs.iter().enumerate() {
                            g[i2 * per..(i2 + 1) * per]
                                .iter_mut()
                                .zip(gx)
                                .for_each(|(p, q)| *p += q);
                        }
                    });
                }
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let (n, c, h, w) = dims4(self.nodes[x.0].value.shape());
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                self.acc(x, |g| {
                    for i2 in 0..n {
                        for ch in 0..c {
                            let gy = gout[i2 * c + ch] * inv;
                            let base = (i2 * c + ch) * hw;
                            for v in &mut g[base..base + hw] {
                                *v += gy;
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let x = *x;
                let (n, c, h, w) = dims4(self.nodes[x.0].value.shape());
                let (oh, ow) = (2 * h, 2 * w);
                self.acc(x, |g| {
                    for i2 in 0..n {
                        for ch in 0..c {
                            for y in 0..oh {
                                for xp in 0..ow {
                                    g[((i2 * c + ch) * h + y / 2) * w + xp / 2] +=
                                        gout[((i2 * c + ch) * oh + y) * ow + xp];
                                }
                            }
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let stats = stats.clone();
                let (n, c, h, w) = dims4(self.nodes[x.0].value.shape());
                let cpg = c / groups;
                let hw = h * w;
                let m = cpg * hw;
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gamma.0].value.data().to_vec();

                // Accumulate per-channel affine grads.
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i2 in 0..n {
                    for gr in 0..groups {
                        let (mean, inv) = stats[i2 * groups + gr];
                        let base = (i2 * c + gr * cpg) * hw;
                        for cc in 0..cpg {
                            let ch = gr * cpg + cc;
                            for p in 0..hw {
                                let idx = base + cc * hw + p;
                                let xhat = (xv[idx] - mean) * inv;
                                dgamma[ch] += gout[idx] * xhat;
                                dbeta[ch] += gout[idx];
                            }
                        }
                    }
                }
                self.acc(gamma, |g| {
                    g.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b)
                });
                self.acc(beta, |g| {
                    g.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b)
                });
                self.acc(x, |g| {
                    for i2 in 0..n {
                        for gr in 0..groups {
                            let (mean, inv) = stats[i2 * groups + gr];
                            let base = (i2 * c + gr * cpg) * hw;
                            // dxhat = gout * gamma; reduce means over the group.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for cc in 0..cpg {
                                let ch = gr * cpg + cc;
                                for p in 0..hw {
                                    let idx = base + cc * hw + p;
                                    let dxh = gout[idx] * gv[ch];
                                    let xhat = (xv[idx] - mean) * inv;
                                    sum_dxhat += dxh;
                                    sum_dxhat_xhat += dxh * xhat;
                                }
                            }
                            let mean_dxhat = sum_dxhat / m as f64;
                            let mean_dxhat_xhat = sum_dxhat_xhat / m as f64;
                            for cc in 0..cpg {
                                let ch = gr * cpg + cc;
                                for p in 0..hw {
                                    let idx = base + cc * hw + p;
                                    let dxh = gout[idx] * gv[ch];
                                    let xhat = (xv[idx] - mean) * inv;
                                    g[idx] += inv * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
                                }
                            }
                        }
                    }
                });
            }
            Op::RgbToHsv(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                let (n, _, h, w) = dims4(self.nodes[x.0].value.shape());
                let hw = h * w;
                self.acc(x, |g| {
                    for i2 in 0..n {
                        let base = i2 * 3 * hw;
                        for p in 0..hw {
                            let r = xv[base + p];
                            let gr = xv[base + hw + p];
                            let b = xv[base + 2 * hw + p];
                            let gh = gout[base + p];
                            let gs = gout[base + hw + p];
                            let gv = gout[base + 2 * hw + p];
                            let j = hsv_jacobian(r, gr, b);
                            for ch in 0..3 {
                                g[base + ch * hw + p] +=
                                    gh * j[0][ch] + gs * j[1][ch] + gv * j[2][ch];
                            }
                        }
                    }
                });
            }
            Op::RgbToHsl(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                let (n, _, h, w) = dims4(self.nodes[x.0].value.shape());
                let hw = h * w;
                self.acc(x, |g| {
                    for i2 in 0..n {
                        let base = i2 * 3 * hw;
                        for p in 0..hw {
                            let r = xv[base + p];
                            let gr = xv[base + hw + p];
                            let b = xv[base + 2 * hw + p];
                            let gh = gout[base + p];
                            let gs = gout[base + hw + p];
                            let gl = gout[base + 2 * hw + p];
                            let j = hsl_jacobian(r, gr, b);
                            for ch in 0..3 {
                                g[base + ch * hw + p] +=
                                    gh * j[0][ch] + gs * j[1][ch] + gl * j[2][ch];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ohw = oh * ow;
    let mut cols = vec![0.0; cin * kh * kw * ohw];
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = x[src + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ohw = oh * ow;
    let mut x = vec![0.0; cin * h * w];
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[dst + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Max/min over (r, g, b) with deterministic tie-breaking (lowest channel
/// index wins), returning (value, channel).
fn channel_extrema(r: f64, g: f64, b: f64) -> ((f64, usize), (f64, usize)) {
    let vals = [r, g, b];
    let mut mx = (r, 0usize);
    let mut mn = (r, 0usize);
    for (ch, &v) in vals.iter().enumerate().skip(1) {
        if v > mx.0 {
            mx = (v, ch);
        }
        if v < mn.0 {
            mn = (v, ch);
        }
    }
    (mx, mn)
}

/// Hue in [0,1) plus sector info: (hue, d_num/d_r, d_num/d_g, d_num/d_b)
/// where hue = num/(6*chroma) + offset (mod 1).
fn hue_forward(r: f64, g: f64, b: f64, max_ch: usize, chroma: f64) -> f64 {
    let h6 = match max_ch {
        0 => {
            let x = (g - b) / chroma;
            if x < 0.0 {
                x + 6.0
            } else {
                x
            }
        }
        1 => (b - r) / chroma + 2.0,
        _ => (r - g) / chroma + 4.0,
    };
    let h = h6 / 6.0;
    // Guard against h == 1.0 from rounding; hue is cyclic in [0,1).
    if h >= 1.0 {
        h - 1.0
    } else {
        h
    }
}

fn hsv_forward(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let ((mx, mxc), (mn, _)) = channel_extrema(r, g, b);
    let chroma = mx - mn;
    let v = mx;
    let s = if mx > COLOR_EPS { chroma / mx } else { 0.0 };
    let h = if chroma > COLOR_EPS {
        hue_forward(r, g, b, mxc, chroma)
    } else {
        0.0
    };
    (h, s, v)
}

fn hsl_forward(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let ((mx, mxc), (mn, _)) = channel_extrema(r, g, b);
    let chroma = mx - mn;
    let l = 0.5 * (mx + mn);
    let denom = 1.0 - (2.0 * l - 1.0).abs();
    let s = if chroma > COLOR_EPS && denom > COLOR_EPS {
        chroma / denom
    } else {
        0.0
    };
    let h = if chroma > COLOR_EPS {
        hue_forward(r, g, b, mxc, chroma)
    } else {
        0.0
    };
    (h, s, l)
}

/// d hue / d (r,g,b) in the sector frozen at this point.
fn hue_gradient(r: f64, g: f64, b: f64, mxc: usize, mnc: usize, chroma: f64) -> [f64; 3] {
    // hue = num/(6C) + const; d = (dnum*C - num*dC) / (6 C^2)
    let (num, dnum): (f64, [f64; 3]) = match mxc {
        0 => (g - b, [0.0, 1.0, -1.0]),
        1 => (b - r, [-1.0, 0.0, 1.0]),
        _ => (r - g, [1.0, -1.0, 0.0]),
    };
    let mut dc = [0.0; 3];
    dc[mxc] += 1.0;
    dc[mnc] -= 1.0;
    let c2 = chroma * chroma;
    let mut out = [0.0; 3];
    for ch in 0..3 {
        out[ch] = (dnum[ch] * chroma - num * dc[ch]) / (6.0 * c2);
    }
    out
}

/// Rows: d(H,S,V)/d(r,g,b) at the evaluated point.
fn hsv_jacobian(r: f64, g: f64, b: f64) -> [[f64; 3]; 3] {
    let ((mx, mxc), (mn, mnc)) = channel_extrema(r, g, b);
    let chroma = mx - mn;
    let mut j = [[0.0; 3]; 3];
    // V = max
    j[2][mxc] = 1.0;
    // S = C / max (guarded)
    if mx > COLOR_EPS {
        let mut dc = [0.0; 3];
        dc[mxc] += 1.0;
        dc[mnc] -= 1.0;
        for ch in 0..3 {
            let dmax = if ch == mxc { 1.0 } else { 0.0 };
            j[1][ch] = (dc[ch] * mx - chroma * dmax) / (mx * mx);
        }
    }
    if chroma > COLOR_EPS {
        j[0] = hue_gradient(r, g, b, mxc, mnc, chroma);
    }
    j
}

/// Rows: d(H,S_hsl,L)/d(r,g,b) at the evaluated point.
fn hsl_jacobian(r: f64, g: f64, b: f64) -> [[f64; 3]; 3] {
    let ((mx, mxc), (mn, mnc)) = channel_extrema(r, g, b);
    let chroma = mx - mn;
    let l = 0.5 * (mx + mn);
    let denom = 1.0 - (2.0 * l - 1.0).abs();
    let mut j = [[0.0; 3]; 3];
    // L = (max+min)/2
    let mut dl = [0.0; 3];
    dl[mxc] += 0.5;
    dl[mnc] += 0.5;
    j[2] = dl;
    // S = C / (1 - |2L-1|) guarded
    if chroma > COLOR_EPS && denom > COLOR_EPS {
        let sgn = if 2.0 * l - 1.0 > 0.0 {
            1.0
        } else if 2.0 * l - 1.0 < 0.0 {
            -1.0
        } else {
            0.0
        };
        let mut dc = [0.0; 3];
        dc[mxc] += 1.0;
        dc[mnc] -= 1.0;
        for ch in 0..3 {
            let ddenom = -sgn * 2.0 * dl[ch];
            j[1][ch] = (dc[ch] * denom - chroma * ddenom) / (denom * denom);
        }
    }
    if chroma > COLOR_EPS {
        j[0] = hue_gradient(r, g, b, mxc, mnc, chroma);
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central finite difference of `f` w.r.t. entry `idx` of `x`.
    fn fd<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], idx: usize) -> f64 {
        let h = 1e-6 * x[idx].abs().max(1.0);
        let mut xp = x.to_vec();
        xp[idx] += h;
        let fp = f(&xp);
        xp[idx] = x[idx] - h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }

    fn check_grad<F: Fn(&[f64]) -> f64, G: Fn(&[f64]) -> Vec<f64>>(
        f: F,
        grad: G,
        x: &[f64],
        tol: f64,
    ) {
        let g = grad(x);
        for i in 0..x.len() {
            let num = fd(&f, x, i);
            let diff = (g[i] - num).abs();
            let scale = g[i].abs().max(num.abs()).max(1e-8);
            assert!(
                diff / scale < tol,
                "grad mismatch at {i}: analytic {} vs numeric {}",
                g[i],
                num
            );
        }
    }

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn backward_matmul_chain() {
        let mut rng = crate::rng::derive(1, &[99]);
        let a0 = rand_vec(6, &mut rng);
        let b0 = rand_vec(12, &mut rng);
        let x = [a0.clone(), b0.clone()].concat();
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![2, 3], x[..6].to_vec()));
            let b = g.param(Tensor::new(vec![3, 4], x[6..].to_vec()));
            let c = g.matmul(a, b);
            let c2 = g.mul(c, c);
            let l = g.mean_all(c2);
            g.scalar(l)
        };
        let grad = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![2, 3], x[..6].to_vec()));
            let b = g.param(Tensor::new(vec![3, 4], x[6..].to_vec()));
            let c = g.matmul(a, b);
            let c2 = g.mul(c, c);
            let l = g.mean_all(c2);
            g.backward(l);
            let mut out = g.grad(a).unwrap().to_vec();
            out.extend_from_slice(g.grad(b).unwrap());
            out
        };
        check_grad(eval, grad, &x, 1e-6);
    }

    #[test]
    fn backward_conv_pool_sigmoid() {
        let mut rng = crate::rng::derive(2, &[99]);
        let xlen = 1 * 2 * 5 * 5;
        let wlen = 3 * 2 * 3 * 3;
        let x0 = rand_vec(xlen + wlen, &mut rng);
        let build = |x: &[f64], g: &mut Graph| -> Var {
            let xin = g.param(Tensor::new(vec![1, 2, 5, 5], x[..xlen].to_vec()));
            let w = g.param(Tensor::new(vec![3, 2, 3, 3], x[xlen..].to_vec()));
            let c = g.conv2d(xin, w, 2, 1);
            let s = g.sigmoid(c);
            let p = g.global_avg_pool(s);
            g.mean_all(p)
        };
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let l = build(x, &mut g);
            g.scalar(l)
        };
        let grad = |x: &[f64]| {
            let mut g = Graph::new();
            let xin = g.param(Tensor::new(vec![1, 2, 5, 5], x[..xlen].to_vec()));
            let w = g.param(Tensor::new(vec![3, 2, 3, 3], x[xlen..].to_vec()));
            let c = g.conv2d(xin, w, 2, 1);
            let s = g.sigmoid(c);
            let p = g.global_avg_pool(s);
            let l = g.mean_all(p);
            g.backward(l);
            let mut out = g.grad(xin).unwrap().to_vec();
            out.extend_from_slice(g.grad(w).unwrap());
            out
        };
        check_grad(eval, grad, &x0, 1e-5);
    }

    #[test]
    fn backward_sort_logsoftmax_select() {
        let mut rng = crate::rng::derive(3, &[99]);
        let x0 = rand_vec(12, &mut rng);
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![4, 3], x.to_vec()));
            let s = g.sort_cols(a);
            let ls = g.log_softmax_rows(s);
            let sel = g.select_elems(ls, vec![(0, 0), (1, 2), (3, 1)]);
            let m = g.mean_all(sel);
            g.scalar(m)
        };
        let grad = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![4, 3], x.to_vec()));
            let s = g.sort_cols(a);
            let ls = g.log_softmax_rows(s);
            let sel = g.select_elems(ls, vec![(0, 0), (1, 2), (3, 1)]);
            let m = g.mean_all(sel);
            g.backward(m);
            g.grad(a).unwrap().to_vec()
        };
        check_grad(eval, grad, &x0, 1e-6);
    }

    #[test]
    fn backward_unet_style_ops() {
        let mut rng = crate::rng::derive(4, &[99]);
        let x0 = rand_vec(2 * 2 * 2 * 2 + 2 * 2 * 4 * 4, &mut rng);
        let split = 2 * 2 * 2 * 2;
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![2, 2, 2, 2], x[..split].to_vec()));
            let b = g.param(Tensor::new(vec![2, 2, 4, 4], x[split..].to_vec()));
            let up = g.upsample2x(a);
            let cat = g.concat_channels(up, b);
            let lr = g.leaky_relu(cat, 0.1);
            let l = g.mean_all(lr);
            g.scalar(l)
        };
        let grad = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![2, 2, 2, 2], x[..split].to_vec()));
            let b = g.param(Tensor::new(vec![2, 2, 4, 4], x[split..].to_vec()));
            let up = g.upsample2x(a);
            let cat = g.concat_channels(up, b);
            let lr = g.leaky_relu(cat, 0.1);
            let l = g.mean_all(lr);
            g.backward(l);
            let mut out = g.grad(a).unwrap().to_vec();
            out.extend_from_slice(g.grad(b).unwrap());
            out
        };
        check_grad(eval, grad, &x0, 1e-6);
    }

    #[test]
    fn backward_row_norm_pattern() {
        // The row-normalization composite used by cosine similarity.
        let mut rng = crate::rng::derive(5, &[99]);
        let x0 = rand_vec(6, &mut rng);
        let run = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![2, 3], x.to_vec()));
            let sq = g.mul(a, a);
            let rs = g.row_sum(sq);
            let rse = g.add_scalar(rs, 1e-12);
            let inv = g.rsqrt(rse);
            let nrm = g.row_scale(a, inv);
            let s = g.sum_all(nrm);
            if want_grad {
                g.backward(s);
                (g.scalar(s), g.grad(a).unwrap().to_vec())
            } else {
                (g.scalar(s), vec![])
            }
        };
        check_grad(|x| run(x, false).0, |x| run(x, true).1, &x0, 1e-6);
    }

    #[test]
    fn backward_group_norm() {
        let mut rng = crate::rng::derive(6, &[99]);
        let xl = 2 * 4 * 2 * 2;
        let x0: Vec<f64> = {
            let mut v = rand_vec(xl + 8, &mut rng);
            // keep gamma/beta away from zero for a meaningful check
            for g in v[xl..xl + 4].iter_mut() {
                *g += 1.5;
            }
            v
        };
        let run = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xin = g.param(Tensor::new(vec![2, 4, 2, 2], x[..xl].to_vec()));
            let gamma = g.param(Tensor::new(vec![4], x[xl..xl + 4].to_vec()));
            let beta = g.param(Tensor::new(vec![4], x[xl + 4..].to_vec()));
            let y = g.group_norm(xin, gamma, beta, 2);
            let sq = g.mul(y, y);
            let l = g.mean_all(sq);
            if want_grad {
                g.backward(l);
                let mut out = g.grad(xin).unwrap().to_vec();
                out.extend_from_slice(g.grad(gamma).unwrap());
                out.extend_from_slice(g.grad(beta).unwrap());
                (g.scalar(l), out)
            } else {
                (g.scalar(l), vec![])
            }
        };
        check_grad(|x| run(x, false).0, |x| run(x, true).1, &x0, 1e-5);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        // 1x1 input channel, known kernel, no padding.
        let mut g = Graph::new();
        let x = g.input(Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let w = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let c = g.conv2d(x, w, 1, 0);
        assert_eq!(c.0 > 0, true);
        assert_eq!(g.value(c).shape(), &[1, 1, 2, 2]);
        // out[y][x] = x[y][x] + x[y+1][x+1]
        assert_eq!(g.value(c).data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn gradients_do_not_flow_into_inputs() {
        let mut g = Graph::new();
        let frozen = g.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let p = g.param(Tensor::new(vec![2, 2], vec![0.5; 4]));
        let y = g.matmul(p, frozen);
        let l = g.mean_all(y);
        g.backward(l);
        assert!(g.grad(p).is_some());
        assert!(g.grad(frozen).is_none());
    }
}
