//! Dataset loading.
//!
//! The on-disk format is the CIFAR-10 binary layout: 3073-byte records, one
//! label byte (0..=9) followed by 3072 pixel bytes as three 1024-byte planes
//! (red, green, blue), each plane row-major. Pixel byte v maps to the real
//! value v/256, which is exact in Q8.8.
//!
//! The synthetic source generates class-separable images in the same
//! geometry (10 classes, per-class template plus noise) and feeds them
//! through the identical record decoder, so both sources exercise one path.

use super::{DatasetConfig, DatasetSource};
use crate::fxp::{QFormat, Rounder};
use crate::golden::tensor::FxpTensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

pub const IMG_X: usize = 32;
pub const IMG_Y: usize = 32;
pub const IMG_C: usize = 3;
pub const RECORD_BYTES: usize = 1 + IMG_X * IMG_Y * IMG_C;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<FxpTensor>,
    pub labels: Vec<u8>,
    /// Human-readable provenance for logs and reports.
    pub source: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads one split, honoring the configured per-split limits.
pub fn load_dataset(cfg: &DatasetConfig, split: Split, act_fmt: QFormat) -> Result<Dataset> {
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    };
    match &cfg.source {
        DatasetSource::Cifar10 { path } => load_cifar(path, split, limit, act_fmt),
        DatasetSource::Synthetic { seed, count } => {
            // Both splits share the class templates (one distribution); the
            // held-out split draws a disjoint sample stream.
            let (sample_seed, count, source) = match split {
                Split::Train => (*seed, *count, format!("synthetic seed {seed}")),
                Split::Test => (
                    seed ^ 0x7465_7374,
                    (*count / 4).max(1),
                    format!("synthetic seed {seed} (held-out)"),
                ),
            };
            let n = limit.map_or(count, |l| l.min(count));
            let records = synthetic_records(*seed, sample_seed, n);
            decode_records(&records, n, act_fmt, source)
        }
    }
}

fn load_cifar(
    path: &Path,
    split: Split,
    limit: Option<usize>,
    act_fmt: QFormat,
) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut found = Vec::new();
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let want = match split {
                Split::Train => name.starts_with("data_batch_") && name.ends_with(".bin"),
                Split::Test => name == "test_batch.bin",
            };
            if want {
                found.push(p);
            }
        }
        found.sort();
        if found.is_empty() {
            return Err(Error::Config(format!(
                "no {} files under {}",
                match split {
                    Split::Train => "data_batch_*.bin",
                    Split::Test => "test_batch.bin",
                },
                path.display()
            )));
        }
        found
    } else {
        vec![path.to_path_buf()]
    };

    let mut bytes = Vec::new();
    for f in &files {
        let b = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        if b.len() % RECORD_BYTES != 0 {
            return Err(Error::Config(format!(
                "{}: size {} is not a multiple of the {RECORD_BYTES}-byte record",
                f.display(),
                b.len()
            )));
        }
        bytes.extend_from_slice(&b);
        if let Some(l) = limit {
            if bytes.len() / RECORD_BYTES >= l {
                break;
            }
        }
    }
    let total = bytes.len() / RECORD_BYTES;
    let n = limit.map_or(total, |l| l.min(total));
    decode_records(&bytes, n, act_fmt, format!("cifar10 {}", path.display()))
}

fn decode_records(bytes: &[u8], n: usize, act_fmt: QFormat, source: String) -> Result<Dataset> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut r = Rounder::nearest_even();
    let plane = IMG_X * IMG_Y;
    for i in 0..n {
        let rec = &bytes[i * RECORD_BYTES..(i + 1) * RECORD_BYTES];
        let label = rec[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::Config(format!("record {i}: label {label} out of range")));
        }
        let mut img = FxpTensor::zeros3(IMG_X, IMG_Y, IMG_C, act_fmt);
        // Record plane order matches tensor order (x fastest, then y, then
        // channel), so pixels decode in linear order.
        for (j, px) in rec[1..].iter().enumerate() {
            debug_assert!(j < IMG_C * plane);
            img.raw_mut()[j] = r.from_real(*px as f64 / 256.0, act_fmt).raw();
        }
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset { images, labels, source })
}

/// Deterministic 10-class image records: a smooth per-class template plus
/// bounded pixel noise, labels cycling round-robin so every batch is
/// class-balanced. Template and sample seeds are separate so that distinct
/// splits can share one distribution while drawing distinct samples.
fn synthetic_records(template_seed: u64, sample_seed: u64, count: usize) -> Vec<u8> {
    let mut tpl_rng = ChaCha8Rng::seed_from_u64(template_seed);
    let coarse = 8usize;
    let mut templates = vec![[0u8; IMG_X * IMG_Y * IMG_C]; NUM_CLASSES];
    for t in templates.iter_mut() {
        let mut grid = [[0u8; 8 * 8]; IMG_C];
        for c in grid.iter_mut() {
            for v in c.iter_mut() {
                *v = tpl_rng.gen_range(50..=205);
            }
        }
        for c in 0..IMG_C {
            for y in 0..IMG_Y {
                for x in 0..IMG_X {
                    let g = grid[c][(y / (IMG_Y / coarse)) * coarse + x / (IMG_X / coarse)];
                    t[c * IMG_X * IMG_Y + y * IMG_X + x] = g;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed.wrapping_add(1));
    let mut out = Vec::with_capacity(count * RECORD_BYTES);
    for i in 0..count {
        let label = (i % NUM_CLASSES) as u8;
        out.push(label);
        for &t in templates[label as usize].iter() {
            let noise: i16 = rng.gen_range(-30..=30);
            out.push((t as i16 + noise).clamp(0, 255) as u8);
        }
    }
    out
}

/// Writes synthetic data as CIFAR-10 binary files (`data_batch_1.bin` plus
/// `test_batch.bin`) so the file loader path can be exercised end to end.
pub fn write_cifar_binary(dir: &Path, seed: u64, train: usize, test: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, s, n) in
        [("data_batch_1.bin", seed, train), ("test_batch.bin", seed ^ 0x7465_7374, test)]
    {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(&synthetic_records(seed, s, n)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(source: DatasetSource) -> DatasetConfig {
        DatasetConfig { source, train_limit: None, test_limit: None }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let c = cfg(DatasetSource::Synthetic { seed: 5, count: 40 });
        let a = load_dataset(&c, Split::Train, QFormat::Q8_8).unwrap();
        let b = load_dataset(&c, Split::Train, QFormat::Q8_8).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images[7].raw(), b.images[7].raw());
        assert_eq!(a.len(), 40);
        // Round-robin labels: four of each class.
        for class in 0..10u8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 4);
        }
        // Pixels land in [0, 1).
        for img in &a.images {
            assert!(img.raw().iter().all(|&p| (0..256).contains(&p)));
        }
        // Test split differs from train.
        let t = load_dataset(&c, Split::Test, QFormat::Q8_8).unwrap();
        assert_eq!(t.len(), 10);
        assert_ne!(t.images[0].raw(), a.images[0].raw());
    }

    #[test]
    fn binary_files_round_trip_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_binary(dir.path(), 11, 25, 10).unwrap();
        let c = cfg(DatasetSource::Cifar10 { path: dir.path().to_path_buf() });
        let train = load_dataset(&c, Split::Train, QFormat::Q8_8).unwrap();
        let test = load_dataset(&c, Split::Test, QFormat::Q8_8).unwrap();
        assert_eq!(train.len(), 25);
        assert_eq!(test.len(), 10);

        // File contents equal the in-memory synthetic stream.
        let mem = load_dataset(
            &cfg(DatasetSource::Synthetic { seed: 11, count: 25 }),
            Split::Train,
            QFormat::Q8_8,
        )
        .unwrap();
        assert_eq!(mem.labels, train.labels);
        assert_eq!(mem.images[3].raw(), train.images[3].raw());
    }

    #[test]
    fn limits_and_plane_order() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_binary(dir.path(), 3, 12, 4).unwrap();
        let mut c = cfg(DatasetSource::Cifar10 { path: dir.path().to_path_buf() });
        c.train_limit = Some(5);
        let d = load_dataset(&c, Split::Train, QFormat::Q8_8).unwrap();
        assert_eq!(d.len(), 5);

        // Hand-decode record 0 and compare one pixel per plane.
        let bytes = std::fs::read(dir.path().join("data_batch_1.bin")).unwrap();
        for (cix, x, y) in [(0usize, 3usize, 2usize), (1, 0, 0), (2, 31, 31)] {
            let byte = bytes[1 + cix * 1024 + y * 32 + x];
            assert_eq!(d.images[0].raw()[d.images[0].idx(x, y, cix, 0)], byte as i16, "plane {cix}");
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        std::fs::write(&p, vec![0u8; 100]).unwrap(); // not a record multiple
        let c = cfg(DatasetSource::Cifar10 { path: p.clone() });
        assert!(load_dataset(&c, Split::Train, QFormat::Q8_8).is_err());

        let mut rec = vec![0u8; RECORD_BYTES];
        rec[0] = 11; // label out of range
        std::fs::write(&p, rec).unwrap();
        let err = load_dataset(&c, Split::Train, QFormat::Q8_8).unwrap_err().to_string();
        assert!(err.contains("label 11"), "{err}");

        let c = cfg(DatasetSource::Cifar10 { path: dir.path().join("missing") });
        assert!(load_dataset(&c, Split::Train, QFormat::Q8_8).is_err());
    }
}
