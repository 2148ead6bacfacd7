//! Image sources: CIFAR-10 binary batches, a PNG folder, or a seeded
//! synthetic texture generator for offline runs.
//!
//! All pixel data is `[N, H, W, C]` with values in `[0, 1]`. Dataset
//! acquisition is an explicit, documented step: nothing here downloads.

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "SEMCOM_DATA_ROOT";

pub const IMG_SIDE: usize = 32;
pub const IMG_CHANNELS: usize = 3;

/// Where images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Standard CIFAR-10 binary batches under the dataset root.
    Cifar10,
    /// 32x32 RGB PNG files under the dataset root (`train/` and `test/`).
    ImageFolder,
    /// Seeded texture generator; no files needed.
    Synthetic,
}

/// Dataset section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Root directory for file-backed sources; falls back to
    /// `SEMCOM_DATA_ROOT` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub train_images: usize,
    pub test_images: usize,
}

/// Training and held-out test images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Array4<f64>,
    pub test: Array4<f64>,
}

pub fn load_dataset(cfg: &DatasetConfig, master_seed: u64) -> Result<Dataset> {
    if cfg.train_images == 0 || cfg.test_images == 0 {
        return Err(Error::Config("train_images and test_images must be positive".into()));
    }
    match cfg.source {
        DataSource::Synthetic => Ok(Dataset {
            train: synthetic_textures(cfg.train_images, rng::derive_seed(master_seed, "synthetic-train")),
            test: synthetic_textures(cfg.test_images, rng::derive_seed(master_seed, "synthetic-test")),
        }),
        DataSource::Cifar10 => {
            let root = resolve_root(&cfg.root)?;
            load_cifar10(&root, cfg.train_images, cfg.test_images)
        }
        DataSource::ImageFolder => {
            let root = resolve_root(&cfg.root)?;
            let train = load_png_folder(&root.join("train"), cfg.train_images)?;
            let test = load_png_folder(&root.join("test"), cfg.test_images)?;
            Ok(Dataset { train, test })
        }
    }
}

fn resolve_root(root: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(r) = root {
        return Ok(r.clone());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| {
            Error::Dataset(format!(
                "no dataset root: set io.dataset.root or the {DATA_ROOT_ENV} environment variable"
            ))
        })
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary layout
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 1 + 3072;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

/// Load `train_n`/`test_n` images from the standard binary batches
/// (`data_batch_*.bin`, `test_batch.bin`, 1 label byte + 3x1024 plane bytes
/// per record). Also accepts the batches inside a `cifar-10-batches-bin/`
/// subdirectory.
pub fn load_cifar10(root: &Path, train_n: usize, test_n: usize) -> Result<Dataset> {
    let base = if root.join(CIFAR_TRAIN_FILES[0]).exists() {
        root.to_path_buf()
    } else {
        root.join("cifar-10-batches-bin")
    };
    if !base.join(CIFAR_TRAIN_FILES[0]).exists() {
        return Err(Error::Dataset(format!(
            "CIFAR-10 binary batches not found under {}",
            root.display()
        )));
    }
    let mut train = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        if train.len() >= train_n {
            break;
        }
        let path = base.join(f);
        if !path.exists() {
            continue;
        }
        train.extend(read_cifar_file(&path, train_n - train.len())?);
    }
    if train.len() < train_n {
        return Err(Error::Dataset(format!(
            "requested {train_n} training images, found {}",
            train.len()
        )));
    }
    let test = read_cifar_file(&base.join("test_batch.bin"), test_n)?;
    if test.len() < test_n {
        return Err(Error::Dataset(format!(
            "requested {test_n} test images, found {}",
            test.len()
        )));
    }
    Ok(Dataset {
        train: stack(&train),
        test: stack(&test),
    })
}

fn read_cifar_file(path: &Path, limit: usize) -> Result<Vec<Array4<f64>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            reason: format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = (bytes.len() / CIFAR_RECORD).min(limit);
    let mut out = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        let mut img = Array4::zeros((1, IMG_SIDE, IMG_SIDE, IMG_CHANNELS));
        // record: label byte, then R, G, B planes row-major
        for c in 0..IMG_CHANNELS {
            for y in 0..IMG_SIDE {
                for x in 0..IMG_SIDE {
                    let v = rec[1 + c * 1024 + y * IMG_SIDE + x];
                    img[[0, y, x, c]] = v as f64 / 255.0;
                }
            }
        }
        out.push(img);
    }
    Ok(out)
}

fn stack(images: &[Array4<f64>]) -> Array4<f64> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform shapes")
}

/// Write images out in the CIFAR binary layout (label byte 0), 10000
/// records per file: `data_batch_1.bin`, ... plus `test_batch.bin`.
pub fn write_cifar_batches(dir: &Path, train: &Array4<f64>, test: &Array4<f64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let encode = |imgs: &Array4<f64>| -> Vec<u8> {
        let n = imgs.dim().0;
        let mut buf = Vec::with_capacity(n * CIFAR_RECORD);
        for i in 0..n {
            buf.push(0u8);
            for c in 0..IMG_CHANNELS {
                for y in 0..IMG_SIDE {
                    for x in 0..IMG_SIDE {
                        buf.push((imgs[[i, y, x, c]] * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        buf
    };
    let train_bytes = encode(train);
    for (fi, chunk) in train_bytes.chunks(10_000 * CIFAR_RECORD).enumerate() {
        if fi >= CIFAR_TRAIN_FILES.len() {
            return Err(Error::Config("too many training images for the 5-batch layout".into()));
        }
        std::fs::write(dir.join(CIFAR_TRAIN_FILES[fi]), chunk)?;
    }
    std::fs::write(dir.join("test_batch.bin"), encode(test))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PNG folder
// ---------------------------------------------------------------------------

fn load_png_folder(dir: &Path, limit: usize) -> Result<Array4<f64>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.len() < limit {
        return Err(Error::Dataset(format!(
            "requested {limit} images, {} PNG files in {}",
            paths.len(),
            dir.display()
        )));
    }
    let mut imgs = Vec::with_capacity(limit);
    for p in paths.iter().take(limit) {
        let img = image::open(p).map_err(|e| Error::Malformed {
            path: p.display().to_string(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        if rgb.width() as usize != IMG_SIDE || rgb.height() as usize != IMG_SIDE {
            return Err(Error::Dataset(format!(
                "{} is {}x{}, expected {IMG_SIDE}x{IMG_SIDE}",
                p.display(),
                rgb.width(),
                rgb.height()
            )));
        }
        let mut arr = Array4::zeros((1, IMG_SIDE, IMG_SIDE, IMG_CHANNELS));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                arr[[0, y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
            }
        }
        imgs.push(arr);
    }
    Ok(stack(&imgs))
}

// ---------------------------------------------------------------------------
// Synthetic textures
// ---------------------------------------------------------------------------

/// Deterministic texture images: a few low-frequency color sinusoids plus
/// soft gaussian blobs, squashed into `[0, 1]`. Amplitude falls with
/// frequency so the spectra lean natural.
pub fn synthetic_textures(n: usize, seed: u64) -> Array4<f64> {
    let mut out = Array4::zeros((n, IMG_SIDE, IMG_SIDE, IMG_CHANNELS));
    for i in 0..n {
        let mut r = rng::stream(seed, &format!("texture/{i}"));
        let mut field = [[[0.0f64; IMG_CHANNELS]; IMG_SIDE]; IMG_SIDE];
        let waves = r.random_range(2..=4);
        for _ in 0..waves {
            let fx: f64 = r.random_range(0.3..3.0);
            let fy: f64 = r.random_range(0.3..3.0);
            let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let freq = (fx * fx + fy * fy).sqrt();
            let amp = r.random_range(0.4..1.0) / freq;
            let color: [f64; 3] = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ];
            for y in 0..IMG_SIDE {
                for x in 0..IMG_SIDE {
                    let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64)
                        / IMG_SIDE as f64
                        + phase;
                    let v = amp * t.sin();
                    for c in 0..IMG_CHANNELS {
                        field[y][x][c] += v * color[c];
                    }
                }
            }
        }
        let blobs = r.random_range(1..=2);
        for _ in 0..blobs {
            let cx: f64 = r.random_range(4.0..28.0);
            let cy: f64 = r.random_range(4.0..28.0);
            let sigma: f64 = r.random_range(2.5..7.0);
            let amp: f64 = r.random_range(0.5..1.2);
            let color: [f64; 3] = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ];
            for y in 0..IMG_SIDE {
                for x in 0..IMG_SIDE {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..IMG_CHANNELS {
                        field[y][x][c] += v * color[c];
                    }
                }
            }
        }
        let brightness: f64 = r.random_range(-0.15..0.15);
        for y in 0..IMG_SIDE {
            for x in 0..IMG_SIDE {
                for c in 0..IMG_CHANNELS {
                    let v = 0.5 + brightness + 0.35 * field[y][x][c];
                    out[[i, y, x, c]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_textures(8, 5);
        let b = synthetic_textures(8, 5);
        assert_eq!(a, b);
        let c = synthetic_textures(8, 6);
        assert_ne!(a, c);
        for v in a.iter() {
            assert!((0.0..=1.0).contains(v));
        }
        // not degenerate: some contrast within each image
        for i in 0..8 {
            let img = a.index_axis(Axis(0), i);
            let mn = img.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(mx - mn > 0.1, "image {i} nearly constant");
        }
    }

    #[test]
    fn cifar_round_trip_through_binary_layout() {
        let dir = tempfile::tempdir().unwrap();
        let train = synthetic_textures(24, 1);
        let test = synthetic_textures(8, 2);
        write_cifar_batches(dir.path(), &train, &test).unwrap();
        let ds = load_cifar10(dir.path(), 20, 8).unwrap();
        assert_eq!(ds.train.dim(), (20, 32, 32, 3));
        assert_eq!(ds.test.dim(), (8, 32, 32, 3));
        // 8-bit quantized round trip
        for (a, b) in ds.train.iter().zip(train.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        let err = load_cifar10(dir.path(), 100, 8).unwrap_err();
        assert_eq!(err.class(), "dataset");
    }

    #[test]
    fn missing_root_is_a_dataset_error() {
        let cfg = DatasetConfig {
            source: DataSource::Cifar10,
            root: Some(PathBuf::from("/nonexistent/semcom-data")),
            train_images: 4,
            test_images: 4,
        };
        assert_eq!(load_dataset(&cfg, 0).unwrap_err().class(), "dataset");
    }
}
