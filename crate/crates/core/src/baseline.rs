//! Patch-trigger baseline: a solid square stamped at a fixed corner, the
//! visible-trigger comparison point for the optimized injector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchBaselineConfig {
    pub size: usize,
    pub position: PatchPosition,
    pub color: [f64; 3],
}

impl Default for PatchBaselineConfig {
    fn default() -> Self {
        PatchBaselineConfig {
            size: 4,
            position: PatchPosition::BottomRight,
            color: [1.0, 1.0, 1.0],
        }
    }
}

impl PatchBaselineConfig {
    fn origin(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.size > h || self.size > w {
            return Err(Error::contract(format!(
                "patch {}x{} does not fit a {h}x{w} image",
                self.size, self.size
            )));
        }
        Ok(match self.position {
            PatchPosition::TopLeft => (0, 0),
            PatchPosition::TopRight => (0, w - self.size),
            PatchPosition::BottomLeft => (h - self.size, 0),
            PatchPosition::BottomRight => (h - self.size, w - self.size),
        })
    }
}

/// Stamp the solid patch onto a `[3,h,w]` image or `[n,3,h,w]` batch; all
/// other pixels are untouched.
pub fn patch_trigger(image: &Tensor, cfg: &PatchBaselineConfig) -> Result<Tensor> {
    if cfg.size == 0 {
        return Err(Error::contract("patch size must be at least 1"));
    }
    match image.ndim() {
        3 => stamp_one(image, cfg),
        4 => {
            let mut out = image.clone();
            let (n, c, h, w) = (
                image.shape()[0],
                image.shape()[1],
                image.shape()[2],
                image.shape()[3],
            );
            let (oy, ox) = cfg.origin(h, w)?;
            for i in 0..n {
                for ch in 0..c.min(3) {
                    for y in oy..oy + cfg.size {
                        for x in ox..ox + cfg.size {
                            out.set4(i, ch, y, x, cfg.color[ch]);
                        }
                    }
                }
            }
            Ok(out)
        }
        _ => Err(Error::contract(format!(
            "patch_trigger expects [3,h,w] or [n,3,h,w], got {:?}",
            image.shape()
        ))),
    }
}

fn stamp_one(image: &Tensor, cfg: &PatchBaselineConfig) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (oy, ox) = cfg.origin(h, w)?;
    let mut out = image.clone();
    for ch in 0..3 {
        for y in oy..oy + cfg.size {
            for x in ox..ox + cfg.size {
                out.data_mut()[(ch * h + y) * w + x] = cfg.color[ch];
            }
        }
    }
    Ok(out)
}
