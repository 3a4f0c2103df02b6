//! Model definitions: the feature encoders, the encoder–decoder trigger
//! injector, and the downstream probe head.
//!
//! Encoders expose two surfaces: pooled backbone features (used by probes,
//! attack alignment, and feature-space metrics) and the projection-head
//! output (used by the contrastive objective).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::nn::{self, Bound, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

/// Whether an encoder currently plays the clean or the backdoored role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderRole {
    Clean,
    Backdoored,
}

/// Backbone family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Four stride-2/1 conv blocks with global average pooling.
    Conv4,
    /// Basic-block residual net (18 layers) with group normalization.
    Resnet18,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub arch: ArchKind,
    /// Channel width of the first block; later conv4 blocks double it.
    pub base_channels: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            arch: ArchKind::Conv4,
            base_channels: 8,
            proj_hidden: 32,
            proj_dim: 16,
        }
    }
}

impl EncoderConfig {
    /// Backbone feature dimension after pooling.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            ArchKind::Conv4 => 4 * self.base_channels,
            ArchKind::Resnet18 => 8 * self.base_channels,
        }
    }
}

/// Parameters of a feature encoder plus its role.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub role: EncoderRole,
}

impl EncoderState {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut ps = ParamSet::new();
        let c = config.base_channels;
        match config.arch {
            ArchKind::Conv4 => {
                nn::init_conv(&mut ps, "enc1", c, 3, 3, rng);
                nn::init_conv(&mut ps, "enc2", 2 * c, c, 3, rng);
                nn::init_conv(&mut ps, "enc3", 4 * c, 2 * c, 3, rng);
                nn::init_conv(&mut ps, "enc4", 4 * c, 4 * c, 3, rng);
            }
            ArchKind::Resnet18 => {
                nn::init_conv(&mut ps, "stem", c, 3, 3, rng);
                init_gn(&mut ps, "stem_gn", c);
                let widths = [c, 2 * c, 4 * c, 8 * c];
                let mut cin = c;
                for (li, &cout) in widths.iter().enumerate() {
                    for bi in 0..2 {
                        let name = format!("l{li}b{bi}");
                        let downsample = bi == 0 && li > 0;
                        let block_in = if bi == 0 { cin } else { cout };
                        nn::init_conv(&mut ps, &format!("{name}.c1"), cout, block_in, 3, rng);
                        init_gn(&mut ps, &format!("{name}.gn1"), cout);
                        nn::init_conv(&mut ps, &format!("{name}.c2"), cout, cout, 3, rng);
                        init_gn(&mut ps, &format!("{name}.gn2"), cout);
                        if downsample {
                            nn::init_conv(&mut ps, &format!("{name}.sc"), cout, block_in, 1, rng);
                            init_gn(&mut ps, &format!("{name}.scgn"), cout);
                        }
                    }
                    cin = cout;
                }
            }
        }
        let fd = config.feature_dim();
        nn::init_dense(&mut ps, "proj1", fd, config.proj_hidden, rng);
        nn::init_dense(&mut ps, "proj2", config.proj_hidden, config.proj_dim, rng);
        EncoderState {
            config,
            params: ps,
            role: EncoderRole::Clean,
        }
    }

    pub fn with_role(mut self, role: EncoderRole) -> Self {
        self.role = role;
        self
    }

    /// Pooled backbone features for an image batch, outside any training
    /// graph.
    pub fn features(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let f = encoder_features(&mut g, &bound, &self.config, x);
        g.value(f).clone()
    }

    /// Projection-head embeddings for an image batch.
    pub fn project(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let f = encoder_features(&mut g, &bound, &self.config, x);
        let p = encoder_projection(&mut g, &bound, &f);
        g.value(p).clone()
    }
}

fn init_gn(ps: &mut ParamSet, name: &str, channels: usize) {
    ps.insert(format!("{name}.g"), Tensor::full(vec![channels], 1.0));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![channels]));
}

fn gn(g: &mut Graph, bound: &Bound, name: &str, x: Var, channels: usize) -> Var {
    let groups = if channels % 8 == 0 { 8 } else { 1 };
    g.group_norm(
        x,
        bound.var(&format!("{name}.g")),
        bound.var(&format!("{name}.b")),
        groups,
    )
}

/// Backbone forward: `[n,3,h,w]` images to pooled `[n, feature_dim]`
/// features.
pub fn encoder_features(g: &mut Graph, bound: &Bound, cfg: &EncoderConfig, x: Var) -> Var {
    match cfg.arch {
        ArchKind::Conv4 => {
            let c1 = nn::conv_layer(g, bound, "enc1", x, 2, 1);
            let r1 = g.relu(c1);
            let c2 = nn::conv_layer(g, bound, "enc2", r1, 2, 1);
            let r2 = g.relu(c2);
            let c3 = nn::conv_layer(g, bound, "enc3", r2, 2, 1);
            let r3 = g.relu(c3);
            // The last block stays pre-activation: signed pooled features
            // keep cosine similarities from saturating toward 1.
            let c4 = nn::conv_layer(g, bound, "enc4", r3, 1, 1);
            g.global_avg_pool(c4)
        }
        ArchKind::Resnet18 => {
            let c = cfg.base_channels;
            let stem = nn::conv_layer(g, bound, "stem", x, 1, 1);
            let sg = gn(g, bound, "stem_gn", stem, c);
            let mut h = g.relu(sg);
            let widths = [c, 2 * c, 4 * c, 8 * c];
            for (li, &cout) in widths.iter().enumerate() {
                for bi in 0..2 {
                    let name = format!("l{li}b{bi}");
                    let downsample = bi == 0 && li > 0;
                    let stride = if downsample { 2 } else { 1 };
                    let c1 = nn::conv_layer(g, bound, &format!("{name}.c1"), h, stride, 1);
                    let n1 = gn(g, bound, &format!("{name}.gn1"), c1, cout);
                    let a1 = g.relu(n1);
                    let c2 = nn::conv_layer(g, bound, &format!("{name}.c2"), a1, 1, 1);
                    let n2 = gn(g, bound, &format!("{name}.gn2"), c2, cout);
                    let shortcut = if downsample {
                        let sc = nn::conv_layer(g, bound, &format!("{name}.sc"), h, 2, 0);
                        gn(g, bound, &format!("{name}.scgn"), sc, cout)
                    } else {
                        h
                    };
                    let sum = g.add(n2, shortcut);
                    h = g.relu(sum);
                }
            }
            g.global_avg_pool(h)
        }
    }
}

/// Projection head: features to the contrastive embedding space.
pub fn encoder_projection(g: &mut Graph, bound: &Bound, features: &Var) -> Var {
    let h = nn::dense_layer(g, bound, "proj1", *features);
    let r = g.relu(h);
    nn::dense_layer(g, bound, "proj2", r)
}

/// U-Net style image-to-image injector: skip-connected encoder–decoder with
/// a sigmoid-bounded output in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub base_channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig { base_channels: 8 }
    }
}

/// Parameters of the trigger injector network.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectorState {
    pub config: UnetConfig,
    pub params: ParamSet,
}

impl InjectorState {
    pub fn init(config: UnetConfig, rng: &mut impl Rng) -> Self {
        let c = config.base_channels;
        let mut ps = ParamSet::new();
        nn::init_conv(&mut ps, "in", c, 3, 3, rng);
        nn::init_conv(&mut ps, "down1", 2 * c, c, 3, rng);
        nn::init_conv(&mut ps, "down2", 4 * c, 2 * c, 3, rng);
        nn::init_conv(&mut ps, "mid", 4 * c, 4 * c, 3, rng);
        nn::init_conv(&mut ps, "up1", 2 * c, 4 * c + 2 * c, 3, rng);
        nn::init_conv(&mut ps, "up2", c, 2 * c + c, 3, rng);
        nn::init_conv(&mut ps, "out", 3, c, 3, rng);
        // The output conv produces a logit-space residual on top of the
        // input; shrinking it keeps the initial map near the identity.
        for v in ps.get_mut("out.w").data_mut() {
            *v *= 0.05;
        }
        InjectorState { config, params: ps }
    }
}

/// Injector forward pass: `[n,3,h,w]` in `[0,1]` to the same shape in
/// `(0,1)`. `h` and `w` must be divisible by 4.
///
/// The decoder emits a logit-space residual added to the (guarded) logit of
/// the input before the bounding sigmoid, so a zero residual is the
/// identity map up to the guard epsilon and the output always lies in
/// `(0,1)`.
pub fn unet_forward(g: &mut Graph, bound: &Bound, x: Var) -> Var {
    let e0 = nn::conv_layer(g, bound, "in", x, 1, 1);
    let a0 = g.leaky_relu(e0, 0.1);
    let e1 = nn::conv_layer(g, bound, "down1", a0, 2, 1);
    let a1 = g.leaky_relu(e1, 0.1);
    let e2 = nn::conv_layer(g, bound, "down2", a1, 2, 1);
    let a2 = g.leaky_relu(e2, 0.1);
    let mid = nn::conv_layer(g, bound, "mid", a2, 1, 1);
    let am = g.leaky_relu(mid, 0.1);

    let u1 = g.upsample2x(am);
    let cat1 = g.concat_channels(u1, a1);
    let d1 = nn::conv_layer(g, bound, "up1", cat1, 1, 1);
    let ad1 = g.leaky_relu(d1, 0.1);

    let u2 = g.upsample2x(ad1);
    let cat2 = g.concat_channels(u2, a0);
    let d2 = nn::conv_layer(g, bound, "up2", cat2, 1, 1);
    let ad2 = g.leaky_relu(d2, 0.1);

    let residual = nn::conv_layer(g, bound, "out", ad2, 1, 1);
    let base = g.logit(x, 1e-3);
    let pre = g.add(base, residual);
    g.sigmoid(pre)
}

/// Two-layer perceptron head over frozen features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub classes: usize,
}

pub fn init_head(cfg: &HeadConfig, feature_dim: usize, rng: &mut impl Rng) -> ParamSet {
    let mut ps = ParamSet::new();
    nn::init_dense(&mut ps, "h1", feature_dim, cfg.hidden, rng);
    nn::init_dense(&mut ps, "h2", cfg.hidden, cfg.classes, rng);
    ps
}

/// Head forward: `[n, feature_dim]` to `[n, classes]` logits.
pub fn head_logits(g: &mut Graph, bound: &Bound, features: Var) -> Var {
    let h = nn::dense_layer(g, bound, "h1", features);
    let r = g.relu(h);
    nn::dense_layer(g, bound, "h2", r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::derive(seed, &[0xbb]);
        Tensor::new(
            vec![n, 3, size, size],
            (0..n * 3 * size * size).map(|_| rng.gen()).collect(),
        )
    }

    #[test]
    fn conv4_shapes() {
        let cfg = EncoderConfig::default();
        let mut rng = crate::rng::derive(1, &[1]);
        let enc = EncoderState::init(cfg, &mut rng);
        let imgs = rand_images(4, 16, 2);
        let f = enc.features(&imgs);
        assert_eq!(f.shape(), &[4, cfg.feature_dim()]);
        let p = enc.project(&imgs);
        assert_eq!(p.shape(), &[4, cfg.proj_dim]);
    }

    #[test]
    fn resnet18_shapes() {
        let cfg = EncoderConfig {
            arch: ArchKind::Resnet18,
            base_channels: 8,
            proj_hidden: 32,
            proj_dim: 16,
        };
        let mut rng = crate::rng::derive(1, &[2]);
        let enc = EncoderState::init(cfg, &mut rng);
        let imgs = rand_images(2, 16, 3);
        let f = enc.features(&imgs);
        assert_eq!(f.shape(), &[2, cfg.feature_dim()]);
    }

    #[test]
    fn unet_preserves_shape_and_range() {
        let mut rng = crate::rng::derive(1, &[3]);
        let inj = InjectorState::init(UnetConfig::default(), &mut rng);
        let imgs = rand_images(3, 16, 4);
        let mut g = Graph::new();
        let bound = inj.params.bind_frozen(&mut g);
        let x = g.input(imgs.clone());
        let y = unet_forward(&mut g, &bound, x);
        assert_eq!(g.value(y).shape(), imgs.shape());
        assert!(g
            .value(y)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encoder_params_gradcheck_through_features() {
        // Small finite-difference sweep over a few conv4 parameters.
        let cfg = EncoderConfig {
            arch: ArchKind::Conv4,
            base_channels: 2,
            proj_hidden: 4,
            proj_dim: 3,
        };
        let mut rng = crate::rng::derive(1, &[4]);
        let enc = EncoderState::init(cfg, &mut rng);
        let imgs = rand_images(2, 8, 5);

        let eval = |params: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let bound = params.bind_frozen(&mut g);
            let x = g.input(imgs.clone());
            let f = encoder_features(&mut g, &bound, &cfg, x);
            let p = encoder_projection(&mut g, &bound, &f);
            let sq = g.mul(p, p);
            let l = g.mean_all(sq);
            g.scalar(l)
        };

        let mut g = Graph::new();
        let bound = enc.params.bind(&mut g);
        let x = g.input(imgs.clone());
        let f = encoder_features(&mut g, &bound, &cfg, x);
        let p = encoder_projection(&mut g, &bound, &f);
        let sq = g.mul(p, p);
        let l = g.mean_all(sq);
        g.backward(l);

        let mut check_rng = crate::rng::derive(1, &[5]);
        let flat = enc.params.flatten();
        for _ in 0..10 {
            let idx = check_rng.gen_range(0..flat.len());
            let h = 1e-5;
            let mut pp = enc.params.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            pp.assign_flat(&fp);
            let up = eval(&pp);
            fp[idx] = flat[idx] - h;
            pp.assign_flat(&fp);
            let dn = eval(&pp);
            let numeric = (up - dn) / (2.0 * h);

            // Find which named tensor idx falls into.
            let mut off = 0;
            let mut analytic = f64::NAN;
            for (i, (_, t)) in enc.params.iter().enumerate() {
                if idx < off + t.len() {
                    analytic = g.grad(bound.vars()[i]).unwrap()[idx - off];
                    break;
                }
                off += t.len();
            }
            let scale = analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "param grad mismatch at {idx}: {analytic} vs {numeric}"
            );
        }
    }
}
