//! Differentiable RGB to HSV / HSL transforms and the channel
//! disentanglement distance.
//!
//! The disentanglement distance sums, over the hue / saturation / value /
//! lightness channels, the per-pixel mean squared difference between two
//! images. Hue lives on a cycle, so its difference is `min(|d|, 1-|d|)`.
//! The distance is a quantity the injector *maximizes*: it enters the
//! injector objective with a negative coefficient.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-pixel hue/saturation/value/lightness planes of one image or batch.
///
/// `h` is cyclic in `[0,1)`; the rest are in `[0,1]`. Hue is 0 by convention
/// at achromatic pixels.
#[derive(Debug, Clone)]
pub struct ColorChannels {
    pub h: Tensor,
    pub s: Tensor,
    pub v: Tensor,
    pub l: Tensor,
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match image.ndim() {
        3 => {
            let s = image.shape().to_vec();
            Ok(image.clone().reshaped(vec![1, s[0], s[1], s[2]]))
        }
        4 => Ok(image.clone()),
        _ => Err(Error::contract(format!(
            "expected [3,h,w] or [n,3,h,w] image, got {:?}",
            image.shape()
        ))),
    }
}

fn validate_rgb(image: &Tensor) -> Result<Tensor> {
    let batch = as_batch(image)?;
    if batch.shape()[1] != 3 {
        return Err(Error::contract(format!(
            "expected 3 color channels, got {}",
            batch.shape()[1]
        )));
    }
    if !batch.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(Error::contract(
            "image values must lie in [0,1]".to_string(),
        ));
    }
    Ok(batch)
}

fn keep_shape(out: Tensor, like: &Tensor) -> Tensor {
    if like.ndim() == 3 {
        let s = out.shape().to_vec();
        out.reshaped(vec![s[1], s[2], s[3]])
    } else {
        out
    }
}

/// Hexcone HSV with degeneracy-guarded saturation and hue.
pub fn rgb_to_hsv(image: &Tensor) -> Result<Tensor> {
    let batch = validate_rgb(image)?;
    let mut g = Graph::new();
    let x = g.input(batch);
    let y = g.rgb_to_hsv(x);
    Ok(keep_shape(g.value(y).clone(), image))
}

/// HSL with lightness `(max+min)/2` and the matching saturation.
pub fn rgb_to_hsl(image: &Tensor) -> Result<Tensor> {
    let batch = validate_rgb(image)?;
    let mut g = Graph::new();
    let x = g.input(batch);
    let y = g.rgb_to_hsl(x);
    Ok(keep_shape(g.value(y).clone(), image))
}

/// Extract all four channels used by the disentanglement distance.
pub fn color_channels(image: &Tensor) -> Result<ColorChannels> {
    let hsv = rgb_to_hsv(image)?;
    let hsl = rgb_to_hsl(image)?;
    let batch = as_batch(&hsv)?;
    let (n, _, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let hw = h * w;
    let plane = |src: &Tensor, c: usize| {
        let b = as_batch(src).expect("validated above");
        let mut out = vec![0.0; n * hw];
        for i in 0..n {
            out[i * hw..(i + 1) * hw]
                .copy_from_slice(&b.data()[(i * 3 + c) * hw..(i * 3 + c + 1) * hw]);
        }
        Tensor::new(vec![n, h, w], out)
    };
    Ok(ColorChannels {
        h: plane(&hsv, 0),
        s: plane(&hsv, 1),
        v: plane(&hsv, 2),
        l: plane(&hsl, 2),
    })
}

/// Build the disentanglement distance between two image batches already in
/// a graph: sum over channels {H,S,V,L} of the per-pixel mean squared
/// channel difference, hue taken on the cycle.
pub fn disentangle_node(g: &mut Graph, poisoned: Var, augmented: Var) -> Var {
    let hsv_p = g.rgb_to_hsv(poisoned);
    let hsv_a = g.rgb_to_hsv(augmented);
    let hsl_p = g.rgb_to_hsl(poisoned);
    let hsl_a = g.rgb_to_hsl(augmented);

    // Hue: cyclic squared distance.
    let hp = g.slice_channels(hsv_p, 0, 1);
    let ha = g.slice_channels(hsv_a, 0, 1);
    let hd = g.sub(hp, ha);
    let habs = g.abs(hd);
    let neg = g.scale(habs, -1.0);
    let wrap = g.add_scalar(neg, 1.0);
    let hmin = g.min_elem(habs, wrap);
    let hsq = g.mul(hmin, hmin);
    let hue_term = g.mean_all(hsq);

    let mut total = hue_term;
    for (src_p, src_a, c) in [(hsv_p, hsv_a, 1), (hsv_p, hsv_a, 2), (hsl_p, hsl_a, 2)] {
        let cp = g.slice_channels(src_p, c, c + 1);
        let ca = g.slice_channels(src_a, c, c + 1);
        let d = g.sub(cp, ca);
        let sq = g.mul(d, d);
        let term = g.mean_all(sq);
        total = g.add(total, term);
    }
    total
}

/// Disentanglement distance between two images / batches of equal shape.
pub fn disentangle_loss(poisoned: &Tensor, augmented: &Tensor) -> Result<f64> {
    if poisoned.shape() != augmented.shape() {
        return Err(Error::contract(format!(
            "shape mismatch: {:?} vs {:?}",
            poisoned.shape(),
            augmented.shape()
        )));
    }
    let bp = validate_rgb(poisoned)?;
    let ba = validate_rgb(augmented)?;
    let mut g = Graph::new();
    let p = g.input(bp);
    let a = g.input(ba);
    let node = disentangle_node(&mut g, p, a);
    Ok(g.scalar(node))
}
