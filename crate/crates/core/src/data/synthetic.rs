//! Deterministic synthetic fundus images for tests and examples.
//!
//! A bright disc plays the field of view; vessels are dark polylines that
//! wander across it. The statistics are nothing like real fundus photos, but
//! the task has the same shape: thin dark structures on a red background,
//! with a strong class imbalance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{fnv1a, write_sample};
use super::netpbm::PnmImage;
use super::Sample;
use crate::error::{Error, Result};
use crate::map::BinaryMap;
use crate::tensor::Tensor;

/// Generates one `[3, height, width]` sample, unpadded.
pub fn synthetic_sample(id: &str, height: usize, width: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id));
    let (h, w) = (height, width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = 0.47 * h.min(w) as f64;

    let mut fov = BinaryMap::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            fov.set(y, x, d2 <= radius * radius);
        }
    }

    let mut label = BinaryMap::filled(h, w, false);
    let vessels = 3 + (h.min(w) / 24).min(6);
    for _ in 0..vessels {
        let mut y = cy + rng.gen_range(-0.2..0.2) * radius;
        let mut x = cx + rng.gen_range(-0.2..0.2) * radius;
        let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let thick = rng.gen_bool(0.4);
        for _ in 0..(2 * h.max(w)) {
            heading += rng.gen_range(-0.15..0.15);
            y += heading.sin() * 0.5;
            x += heading.cos() * 0.5;
            let (yi, xi) = (y.round() as isize, x.round() as isize);
            if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                break;
            }
            let r = if thick { 1 } else { 0 };
            for dy in -r..=r {
                for dx in -r..=r {
                    let (py, px) = (yi + dy, xi + dx);
                    if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                        let (py, px) = (py as usize, px as usize);
                        if fov.get(py, px) {
                            label.set(py, px, true);
                        }
                    }
                }
            }
        }
    }

    let mut data = vec![0.0f32; 3 * h * w];
    let base = [0.75f32, 0.42, 0.18];
    let vessel = [0.45f32, 0.12, 0.08];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let noise: f32 = rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                data[c * h * w + i] = if !fov.get(y, x) {
                    0.02
                } else if label.get(y, x) {
                    vessel[c] + noise
                } else {
                    base[c] + noise
                };
            }
        }
    }
    let image = Tensor::new(&[3, h, w], data).expect("shape matches");
    Sample::new(id, image, label, fov).expect("dims match")
}

/// `count` samples with ids `<prefix>00`, `<prefix>01`, ...
pub fn synthetic_samples(
    prefix: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Vec<Sample> {
    (0..count)
        .map(|i| synthetic_sample(&format!("{prefix}{i:02}"), height, width, seed))
        .collect()
}

fn create_dirs(root: &Path, subs: &[&str]) -> Result<()> {
    for sub in subs {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}

/// Writes a DRIVE-shaped dataset (`train/` and `test/`) under `root`.
pub fn write_drive_layout(
    root: impl AsRef<Path>,
    train: usize,
    test: usize,
    dims: (usize, usize),
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    for (part, n, prefix) in [("train", train, "tr"), ("test", test, "te")] {
        let dir = root.join(part);
        create_dirs(&dir, &["images", "labels", "masks"])?;
        for s in synthetic_samples(prefix, n, dims.0, dims.1, seed) {
            write_sample(&s, &dir)?;
        }
    }
    Ok(())
}

/// Writes a STARE-shaped dataset (images and `.ah.pgm` labels, no masks).
pub fn write_stare_layout(
    root: impl AsRef<Path>,
    count: usize,
    dims: (usize, usize),
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    create_dirs(root, &["images", "labels"])?;
    let scratch = root.join(".masks");
    create_dirs(&scratch, &["images", "labels", "masks"])?;
    for s in synthetic_samples("im", count, dims.0, dims.1, seed) {
        write_sample(&s, &scratch)?;
        let (h, w) = s.dims();
        let rename =
            |from: &Path, to: &Path| std::fs::rename(from, to).map_err(|e| Error::io(from, e));
        rename(
            &scratch.join("images").join(format!("{}.ppm", s.id)),
            &root.join("images").join(format!("{}.ppm", s.id)),
        )?;
        PnmImage::gray(
            w,
            h,
            255,
            s.label.data().iter().map(|&v| v as u16 * 255).collect(),
        )
        .save(root.join("labels").join(format!("{}.ah.pgm", s.id)))?;
    }
    std::fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_drive_with, load_stare_with, LoadOptions, Protocol};

    #[test]
    fn deterministic_and_id_dependent() {
        let a = synthetic_sample("a", 32, 40, 1);
        assert_eq!(a, synthetic_sample("a", 32, 40, 1));
        assert_ne!(a.label, synthetic_sample("b", 32, 40, 1).label);
        let ones = a.label.count_ones();
        assert!(ones > 0 && ones < 32 * 40 / 2, "{ones}");
        // vessels only inside the field of view
        assert!(a
            .label
            .data()
            .iter()
            .zip(a.fov.data())
            .all(|(&l, &f)| l <= f));
    }

    #[test]
    fn layouts_load_back() {
        let dir = tempfile::tempdir().unwrap();
        write_drive_layout(dir.path().join("drive"), 2, 1, (22, 19), 3).unwrap();
        let split = load_drive_with(dir.path().join("drive"), &LoadOptions::unchecked()).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (2, 1));
        assert_eq!(split.train[0].dims(), (24, 20));
        assert_eq!(split.train[0].original, (22, 19));
        let orig = synthetic_sample("tr00", 22, 19, 3);
        assert_eq!(split.train[0].label.cropped(22, 19), orig.label);

        write_stare_layout(dir.path().join("stare"), 4, (20, 24), 3).unwrap();
        let split = load_stare_with(
            dir.path().join("stare"),
            Protocol::Stare5050,
            &LoadOptions::unchecked(),
        )
        .unwrap();
        assert_eq!((split.train.len(), split.test.len()), (2, 2));
        assert!(split.test[0].fov.count_ones() > 0);
    }
}
