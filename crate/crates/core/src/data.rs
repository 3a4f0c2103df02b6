//! Dataset synthesis and loading: class-colored blob images for desk-scale
//! runs and the standard binary-batch directory format for CIFAR-10-style
//! data. Images are `[3,h,w]` in `[0,1]`; loading logs a content checksum.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::ssl::shuffle_indices;
use crate::tensor::Tensor;

/// How downstream labels relate to the pre-training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownstreamMode {
    /// Pre-training uses one half of the classes unlabeled; the downstream
    /// task lives on the other half (cheap stand-in for cross-dataset
    /// transfer).
    DisjointClasses,
    /// Pre-training and downstream share classes but not samples.
    Shared,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10Dir { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DatasetSource,
    pub image_size: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Fraction of downstream training samples that carry labels for probe
    /// training.
    pub downstream_label_fraction: f64,
    pub mode: DownstreamMode,
    /// Overwritten by the experiment's run seed at load time.
    #[serde(default)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DatasetSource::Synthetic,
            image_size: 32,
            classes: 8,
            train: 2000,
            test: 400,
            downstream_label_fraction: 0.1,
            mode: DownstreamMode::DisjointClasses,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("class count must be at least 2"));
        }
        if self.image_size < 11 {
            return Err(Error::contract(
                "image_size must be at least 11 (SSIM window)",
            ));
        }
        if self.image_size % 4 != 0 {
            return Err(Error::contract(
                "image_size must be divisible by 4 (injector downsampling)",
            ));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::contract("train and test sizes must be positive"));
        }
        if !(self.downstream_label_fraction > 0.0 && self.downstream_label_fraction <= 1.0) {
            return Err(Error::contract(
                "downstream_label_fraction must be in (0,1]",
            ));
        }
        if self.mode == DownstreamMode::DisjointClasses && self.classes < 4 {
            return Err(Error::contract(
                "disjoint-classes mode needs at least 4 classes",
            ));
        }
        Ok(())
    }
}

/// A loaded dataset split into the surfaces the experiment consumes.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Unlabeled pre-training pool (labels retained for partitioning
    /// diagnostics only).
    pub pretrain_images: Vec<Tensor>,
    pub pretrain_labels: Vec<usize>,
    /// Downstream-task class count (labels are re-indexed from 0).
    pub downstream_classes: usize,
    /// Labeled subset for probe training.
    pub labeled_images: Vec<Tensor>,
    pub labeled_labels: Vec<usize>,
    /// Downstream test set.
    pub test_images: Vec<Tensor>,
    pub test_labels: Vec<usize>,
    /// Unlabeled downstream-distribution pool the attacker draws exemplars
    /// from.
    pub attacker_pool_images: Vec<Tensor>,
    pub attacker_pool_labels: Vec<usize>,
    /// FNV-1a checksum of all loaded pixel bytes, logged for reproducibility.
    pub checksum: u64,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn checksum_images(images: &[Tensor]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for img in images {
        for v in img.data() {
            for &b in v.to_le_bytes().iter() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    hash
}

/// Load or synthesize per the spec, then carve the downstream surfaces.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (train_images, train_labels, test_images, test_labels, classes) = match &spec.source {
        DatasetSource::Synthetic => {
            let (ti, tl) = synthesize(spec, spec.train, 0x5459_4e54_u64)?;
            let (vi, vl) = synthesize(spec, spec.test, 0x7465_7374_u64)?;
            (ti, tl, vi, vl, spec.classes)
        }
        DatasetSource::Cifar10Dir { path } => {
            let (ti, tl, vi, vl) = load_cifar10(Path::new(path))?;
            (ti, tl, vi, vl, 10)
        }
    };
    split_surfaces(spec, train_images, train_labels, test_images, test_labels, classes)
}

fn split_surfaces(
    spec: &DatasetSpec,
    train_images: Vec<Tensor>,
    train_labels: Vec<usize>,
    test_images: Vec<Tensor>,
    test_labels: Vec<usize>,
    classes: usize,
) -> Result<Dataset> {
    let checksum = checksum_images(&train_images) ^ checksum_images(&test_images).rotate_left(1);
    let mut srng = rng::derive(spec.seed, &[tag::DATASET, 2]);

    match spec.mode {
        DownstreamMode::DisjointClasses => {
            // Lower half of the classes pre-trains; upper half is the
            // downstream task.
            let split_at = classes / 2;
            let mut pre_i = Vec::new();
            let mut pre_l = Vec::new();
            let mut down_i = Vec::new();
            let mut down_l = Vec::new();
            for (img, &lab) in train_images.iter().zip(&train_labels) {
                if lab < split_at {
                    pre_i.push(img.clone());
                    pre_l.push(lab);
                } else {
                    down_i.push(img.clone());
                    down_l.push(lab - split_at);
                }
            }
            let mut test_i = Vec::new();
            let mut test_l = Vec::new();
            for (img, &lab) in test_images.iter().zip(&test_labels) {
                if lab >= split_at {
                    test_i.push(img.clone());
                    test_l.push(lab - split_at);
                }
            }
            if pre_i.is_empty() || down_i.is_empty() || test_i.is_empty() {
                return Err(Error::Dataset(
                    "class-disjoint split produced an empty surface".to_string(),
                ));
            }
            // Labeled subset of the downstream pool.
            let order = shuffle_indices(down_i.len(), &mut srng);
            let k = ((spec.downstream_label_fraction * down_i.len() as f64).ceil() as usize)
                .clamp(1, down_i.len());
            let labeled: Vec<usize> = order[..k].to_vec();
            Ok(Dataset {
                pretrain_labels: pre_l,
                pretrain_images: pre_i,
                downstream_classes: classes - split_at,
                labeled_images: labeled.iter().map(|&i| down_i[i].clone()).collect(),
                labeled_labels: labeled.iter().map(|&i| down_l[i]).collect(),
                test_images: test_i,
                test_labels: test_l,
                attacker_pool_images: down_i,
                attacker_pool_labels: down_l,
                checksum,
            })
        }
        DownstreamMode::Shared => {
            let order = shuffle_indices(train_images.len(), &mut srng);
            let k = ((spec.downstream_label_fraction * train_images.len() as f64).ceil() as usize)
                .clamp(1, train_images.len());
            let labeled: Vec<usize> = order[..k].to_vec();
            Ok(Dataset {
                labeled_images: labeled.iter().map(|&i| train_images[i].clone()).collect(),
                labeled_labels: labeled.iter().map(|&i| train_labels[i]).collect(),
                downstream_classes: classes,
                attacker_pool_images: train_images.clone(),
                attacker_pool_labels: train_labels.clone(),
                pretrain_images: train_images,
                pretrain_labels: train_labels,
                test_images,
                test_labels,
                checksum,
            })
        }
    }
}

/// Class-colored Gaussian blobs on textured backgrounds; a pure function of
/// `(spec, count, stream_tag)`.
fn synthesize(spec: &DatasetSpec, count: usize, stream: u64) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut rng = rng::derive(spec.seed, &[tag::DATASET, stream]);
    let s = spec.image_size;
    let palette = class_palette(spec.classes);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % spec.classes;
        let color = palette[class];
        let mut img = Tensor::zeros(vec![3, s, s]);

        // Textured background: three random oriented sinusoids plus pixel
        // noise, so local window variance resembles natural images.
        let mut waves = Vec::with_capacity(3);
        for _ in 0..3 {
            let freq: f64 = rng.gen_range(1.0..5.0);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.gen_range(0.04..0.10);
            waves.push((freq, angle.cos(), angle.sin(), phase, amp));
        }
        let base: f64 = rng.gen_range(0.30..0.50);

        // Blob geometry.
        let cx: f64 = rng.gen_range(0.25..0.75) * s as f64;
        let cy: f64 = rng.gen_range(0.25..0.75) * s as f64;
        let sigma: f64 = rng.gen_range(0.14..0.24) * s as f64;
        let strength: f64 = rng.gen_range(0.75..0.95);

        for y in 0..s {
            for x in 0..s {
                let mut tex = base;
                for &(freq, ca, sa, phase, amp) in &waves {
                    let u = (x as f64 * ca + y as f64 * sa) / s as f64;
                    tex += amp * (freq * u * std::f64::consts::TAU + phase).sin();
                }
                let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2))
                    / (2.0 * sigma * sigma);
                let blob = strength * (-d2).exp();
                for c in 0..3 {
                    let v = tex * (1.0 - blob) + color[c] * blob;
                    let noise: f64 = rng.gen_range(-0.03..0.03);
                    img.data_mut()[(c * s + y) * s + x] = (v + noise).clamp(0.0, 1.0);
                }
            }
        }
        images.push(img);
        labels.push(class);
    }
    Ok((images, labels))
}

/// Well-separated hues around the color wheel at full saturation.
fn class_palette(classes: usize) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|c| {
            let h = c as f64 / classes as f64;
            let h6 = h * 6.0;
            let f = h6 - h6.floor();
            match h6.floor() as usize % 6 {
                0 => [1.0, f, 0.0],
                1 => [1.0 - f, 1.0, 0.0],
                2 => [0.0, 1.0, f],
                3 => [0.0, 1.0 - f, 1.0],
                4 => [f, 0.0, 1.0],
                _ => [1.0, 0.0, 1.0 - f],
            }
        })
        .collect()
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

fn load_cifar_file(path: &Path, images: &mut Vec<Tensor>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{} is not a multiple of the {CIFAR_RECORD}-byte record size",
            path.display()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Dataset(format!(
                "{}: label byte {label} out of range",
                path.display()
            )));
        }
        let mut img = Tensor::zeros(vec![3, CIFAR_SIDE, CIFAR_SIDE]);
        for (i, &b) in rec[1..].iter().enumerate() {
            img.data_mut()[i] = b as f64 / 255.0;
        }
        images.push(img);
        labels.push(label);
    }
    Ok(())
}

/// Load the binary-batch directory layout: five train batches plus one test
/// batch of 3073-byte records (label + planar RGB).
pub fn load_cifar10(dir: &Path) -> Result<(Vec<Tensor>, Vec<usize>, Vec<Tensor>, Vec<usize>)> {
    let mut train_i = Vec::new();
    let mut train_l = Vec::new();
    for b in 1..=5 {
        load_cifar_file(&dir.join(format!("data_batch_{b}.bin")), &mut train_i, &mut train_l)?;
    }
    let mut test_i = Vec::new();
    let mut test_l = Vec::new();
    load_cifar_file(&dir.join("test_batch.bin"), &mut test_i, &mut test_l)?;
    Ok((train_i, train_l, test_i, test_l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_counts_and_label_histogram_match_spec() {
        let spec = DatasetSpec {
            image_size: 16,
            classes: 8,
            train: 160,
            test: 40,
            ..DatasetSpec::default()
        };
        let ds = load_dataset(&spec).unwrap();
        let total = ds.pretrain_images.len() + ds.attacker_pool_images.len();
        assert_eq!(total, 160);
        // Round-robin class assignment: every class appears train/classes
        // times across the two halves.
        let mut histogram = vec![0usize; 4];
        for &l in &ds.pretrain_labels {
            histogram[l] += 1;
        }
        assert!(histogram.iter().all(|&h| h == 20), "{histogram:?}");
        assert_eq!(ds.downstream_classes, 4);
        assert!(ds
            .test_labels
            .iter()
            .all(|&l| l < ds.downstream_classes));
        assert!(ds.pretrain_images.iter().all(|img| img
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn synthesis_is_a_pure_function_of_the_seed() {
        let spec = DatasetSpec {
            image_size: 16,
            train: 24,
            test: 8,
            ..DatasetSpec::default()
        };
        let a = load_dataset(&spec).unwrap();
        let b = load_dataset(&spec).unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.pretrain_images[0], b.pretrain_images[0]);

        let other = DatasetSpec { seed: 1, ..spec };
        let c = load_dataset(&other).unwrap();
        assert_ne!(a.checksum, c.checksum);
    }

    #[test]
    fn cifar_directory_counts() {
        // Fabricate a miniature directory in the real record format.
        let dir = tempfile::tempdir().unwrap();
        let write_batch = |name: &str, records: usize, label: u8| {
            let mut f = fs::File::create(dir.path().join(name)).unwrap();
            let mut rec = vec![0u8; CIFAR_RECORD];
            rec[0] = label;
            for (i, b) in rec[1..].iter_mut().enumerate() {
                *b = (i % 251) as u8;
            }
            for _ in 0..records {
                f.write_all(&rec).unwrap();
            }
        };
        for b in 1..=5 {
            write_batch(&format!("data_batch_{b}.bin"), 4, (b - 1) as u8);
        }
        write_batch("test_batch.bin", 6, 9);
        let (ti, tl, vi, vl) = load_cifar10(dir.path()).unwrap();
        assert_eq!(ti.len(), 20);
        assert_eq!(tl.len(), 20);
        assert_eq!(vi.len(), 6);
        assert!(vl.iter().all(|&l| l == 9));
        assert!(ti[0].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn corrupt_cifar_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
    }

    #[test]
    fn missing_directory_is_a_dataset_error() {
        let err = load_cifar10(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn shared_mode_keeps_all_classes() {
        let spec = DatasetSpec {
            image_size: 16,
            classes: 4,
            train: 40,
            test: 12,
            mode: DownstreamMode::Shared,
            ..DatasetSpec::default()
        };
        let ds = load_dataset(&spec).unwrap();
        assert_eq!(ds.downstream_classes, 4);
        assert_eq!(ds.pretrain_images.len(), 40);
        assert_eq!(ds.labeled_images.len(), 4); // ceil(0.1 * 40)
        assert_eq!(ds.test_images.len(), 12);
    }
}
