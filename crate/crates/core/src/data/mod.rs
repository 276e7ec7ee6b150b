//! Retinal datasets: samples, splits, loaders and augmentation.
//!
//! Loaders read binary Netpbm files only. Each sample is zero-padded at the
//! bottom/right to the next multiple of 4 so it survives two 2×2 poolings;
//! the padded region lies outside the field of view and the original size is
//! kept for cropping predictions back.
//!
//! DRIVE layout:
//!
//! ```text
//! <root>/train/images/<id>.ppm   <root>/train/labels/<id>.pgm   <root>/train/masks/<id>.pgm
//! <root>/test/images/<id>.ppm    <root>/test/labels/<id>.pgm    <root>/test/masks/<id>.pgm
//! ```
//!
//! STARE layout (first-expert "ah" annotations, no masks):
//!
//! ```text
//! <root>/images/<id>.ppm   <root>/labels/<id>.ah.pgm
//! ```

pub mod augment;
pub mod fov;
pub mod netpbm;
pub mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::map::BinaryMap;
use crate::tensor::Tensor;

pub use augment::{AugmentPlan, AugmentedSet, Variant};
pub use netpbm::PnmImage;

pub const DRIVE_DIMS: (usize, usize) = (584, 565);
pub const DRIVE_SPLIT_SIZE: usize = 20;
pub const STARE_DIMS: (usize, usize) = (605, 700);
pub const STARE_SIZE: usize = 20;

/// One fundus image with its vessel labels and field-of-view mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: BinaryMap,
    pub fov: BinaryMap,
    /// `(height, width)` before padding.
    pub original: (usize, usize),
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Tensor<f32>,
        label: BinaryMap,
        fov: BinaryMap,
    ) -> Result<Self> {
        let id = id.into();
        let &[3, h, w] = image.shape() else {
            return Err(Error::Dataset(format!(
                "{id}: image must be [3, H, W], got {:?}",
                image.shape()
            )));
        };
        if label.dims() != (h, w) || fov.dims() != (h, w) {
            return Err(Error::Dataset(format!(
                "{id}: image {h}x{w}, label {:?}, fov {:?}",
                label.dims(),
                fov.dims()
            )));
        }
        Ok(Sample {
            id,
            image,
            label,
            fov,
            original: (h, w),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.label.dims()
    }

    /// Zero-pads to the next multiple of `multiple` in both dims.
    pub fn padded_to_multiple(&self, multiple: usize) -> Sample {
        let (h, w) = self.dims();
        let (ph, pw) = (
            h.div_ceil(multiple) * multiple,
            w.div_ceil(multiple) * multiple,
        );
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        Sample {
            id: self.id.clone(),
            image: pad_image(&self.image, ph, pw),
            label: self.label.padded(ph, pw),
            fov: self.fov.padded(ph, pw),
            original: self.original,
        }
    }
}

pub(crate) fn pad_image(image: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &image.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    Tensor::new(&[c, ph, pw], out).expect("padded shape is valid")
}

/// Crops a `[C, H, W]` map to its top-left `h × w` window.
pub fn crop_image(image: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (c, ih, iw) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    assert!(h <= ih && w <= iw);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            out.extend_from_slice(&image.data()[(ch * ih + y) * iw..(ch * ih + y) * iw + w]);
        }
    }
    Tensor::new(&[c, h, w], out).expect("cropped shape is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    DriveFixed,
    Stare5050,
    /// Leave-one-out with the given holdout index (0..20, lexicographic id order).
    StareLoo(usize),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::DriveFixed => write!(f, "drive-fixed"),
            Protocol::Stare5050 => write!(f, "stare-50-50"),
            Protocol::StareLoo(k) => write!(f, "stare-loo({k})"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drive-fixed" => Ok(Protocol::DriveFixed),
            "stare-50-50" => Ok(Protocol::Stare5050),
            _ => s
                .strip_prefix("stare-loo(")
                .and_then(|r| r.strip_suffix(')'))
                .or_else(|| s.strip_prefix("stare-loo-"))
                .and_then(|k| k.parse().ok())
                .map(Protocol::StareLoo)
                .ok_or_else(|| {
                    Error::Usage(format!(
                        "unknown protocol {s:?} (drive-fixed, stare-50-50, stare-loo(K))"
                    ))
                }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub protocol: Protocol,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn is_disjoint(&self) -> bool {
        self.train
            .iter()
            .all(|a| self.test.iter().all(|b| a.id != b.id))
    }
}

/// Reads a PPM as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = netpbm::read(path)?;
    if img.channels != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "expected an RGB (P6) image".into(),
        });
    }
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = img.normalized(y, x, c);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a PGM and thresholds it at half of its maxval.
pub fn read_binary(path: &Path) -> Result<BinaryMap> {
    let img = netpbm::read(path)?;
    if img.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "expected a grayscale (P5) image".into(),
        });
    }
    let data = (0..img.height * img.width)
        .map(|i| (img.normalized(i / img.width, i % img.width, 0) >= 0.5) as u8)
        .collect();
    BinaryMap::new(img.height, img.width, data)
}

/// Sorted file stems in `dir` whose names end with `suffix`.
fn ids_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(id) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix(suffix))
        {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Dataset(format!("missing file {}", path.display())))
    }
}

/// Size and count checks applied while loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Expected `(height, width)` of every file, if any.
    pub dims: Option<(usize, usize)>,
    /// Expected number of images per directory, if any.
    pub count: Option<usize>,
    /// STARE only: use the whole image as field of view instead of a
    /// synthesized mask.
    pub whole_image_fov: bool,
}

impl LoadOptions {
    pub fn drive() -> Self {
        LoadOptions {
            dims: Some(DRIVE_DIMS),
            count: Some(DRIVE_SPLIT_SIZE),
            whole_image_fov: false,
        }
    }

    pub fn stare() -> Self {
        LoadOptions {
            dims: Some(STARE_DIMS),
            count: Some(STARE_SIZE),
            whole_image_fov: false,
        }
    }

    pub fn unchecked() -> Self {
        LoadOptions {
            dims: None,
            count: None,
            whole_image_fov: false,
        }
    }

    fn check_dims(&self, id: &str, what: &str, dims: (usize, usize)) -> Result<()> {
        match self.dims {
            Some(expected) if expected != dims => Err(Error::Dataset(format!(
                "{id}: {what} is {}x{} (HxW), expected {}x{}",
                dims.0, dims.1, expected.0, expected.1
            ))),
            _ => Ok(()),
        }
    }

    fn check_count(&self, dir: &Path, n: usize) -> Result<()> {
        match self.count {
            Some(expected) if expected != n => Err(Error::Dataset(format!(
                "{}: found {n} images, expected {expected}",
                dir.display()
            ))),
            _ => Ok(()),
        }
    }
}

fn load_drive_part(dir: &Path, opts: &LoadOptions) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let ids = ids_with_suffix(&images, ".ppm")?;
    opts.check_count(&images, ids.len())?;
    ids.iter()
        .map(|id| {
            let image = read_rgb(&images.join(format!("{id}.ppm")))?;
            let label = read_binary(&require(dir.join("labels").join(format!("{id}.pgm")))?)?;
            let fov = read_binary(&require(dir.join("masks").join(format!("{id}.pgm")))?)?;
            opts.check_dims(id, "image", (image.shape()[1], image.shape()[2]))?;
            opts.check_dims(id, "label", label.dims())?;
            opts.check_dims(id, "mask", fov.dims())?;
            Ok(Sample::new(id.clone(), image, label, fov)?.padded_to_multiple(4))
        })
        .collect()
}

pub fn load_drive(root: impl AsRef<Path>) -> Result<DatasetSplit> {
    load_drive_with(root, &LoadOptions::drive())
}

pub fn load_drive_with(root: impl AsRef<Path>, opts: &LoadOptions) -> Result<DatasetSplit> {
    let root = root.as_ref();
    Ok(DatasetSplit {
        protocol: Protocol::DriveFixed,
        train: load_drive_part(&root.join("train"), opts)?,
        test: load_drive_part(&root.join("test"), opts)?,
    })
}

/// All STARE samples in lexicographic id order.
pub fn load_stare_samples(root: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let images = root.join("images");
    let ids = ids_with_suffix(&images, ".ppm")?;
    opts.check_count(&images, ids.len())?;
    ids.iter()
        .map(|id| {
            let image = read_rgb(&images.join(format!("{id}.ppm")))?;
            let label = read_binary(&require(root.join("labels").join(format!("{id}.ah.pgm")))?)?;
            opts.check_dims(id, "image", (image.shape()[1], image.shape()[2]))?;
            opts.check_dims(id, "label", label.dims())?;
            let (h, w) = label.dims();
            let fov = if opts.whole_image_fov {
                BinaryMap::filled(h, w, true)
            } else {
                fov::synthesize_fov(&image)?
            };
            Ok(Sample::new(id.clone(), image, label, fov)?.padded_to_multiple(4))
        })
        .collect()
}

pub fn load_stare(root: impl AsRef<Path>, protocol: Protocol) -> Result<DatasetSplit> {
    load_stare_with(root, protocol, &LoadOptions::stare())
}

pub fn load_stare_with(
    root: impl AsRef<Path>,
    protocol: Protocol,
    opts: &LoadOptions,
) -> Result<DatasetSplit> {
    split_stare(load_stare_samples(root, opts)?, protocol)
}

/// Applies a STARE protocol to samples already in id order.
pub fn split_stare(mut samples: Vec<Sample>, protocol: Protocol) -> Result<DatasetSplit> {
    let n = samples.len();
    match protocol {
        Protocol::Stare5050 => {
            let test = samples.split_off(n / 2);
            Ok(DatasetSplit {
                protocol,
                train: samples,
                test,
            })
        }
        Protocol::StareLoo(k) => {
            if k >= n {
                return Err(Error::Usage(format!("holdout index {k} outside 0..{n}")));
            }
            let held = samples.remove(k);
            Ok(DatasetSplit {
                protocol,
                train: samples,
                test: vec![held],
            })
        }
        Protocol::DriveFixed => Err(Error::Usage("drive-fixed is not a STARE protocol".into())),
    }
}

/// Random access to training samples, materialized on demand.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize) -> Result<Sample>;

    /// The un-augmented samples this source derives from.
    fn base_samples(&self) -> &[Sample];
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("sample index {index} out of range")))
    }

    fn base_samples(&self) -> &[Sample] {
        self
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.as_slice().sample(index)
    }

    fn base_samples(&self) -> &[Sample] {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: &str) -> Sample {
        let image = Tensor::full(&[3, 3, 5], 0.5).unwrap();
        let label = BinaryMap::filled(3, 5, false);
        let fov = BinaryMap::filled(3, 5, true);
        Sample::new(id, image, label, fov).unwrap()
    }

    #[test]
    fn padding_keeps_original_dims() {
        let s = tiny("a").padded_to_multiple(4);
        assert_eq!(s.dims(), (4, 8));
        assert_eq!(s.original, (3, 5));
        assert_eq!(s.fov.count_ones(), 15);
        assert_eq!(crop_image(&s.image, 3, 5), tiny("a").image);
    }

    #[test]
    fn sample_rejects_mismatched_maps() {
        let image = Tensor::zeros(&[3, 2, 2]).unwrap();
        let label = BinaryMap::filled(2, 3, false);
        assert!(Sample::new("x", image, label.clone(), label).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [
            Protocol::DriveFixed,
            Protocol::Stare5050,
            Protocol::StareLoo(7),
        ] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("stare-loo(x)".parse::<Protocol>().is_err());
    }

    #[test]
    fn stare_protocols() {
        let samples: Vec<Sample> = (0..20).map(|i| tiny(&format!("im{i:02}"))).collect();
        let half = split_stare(samples.clone(), Protocol::Stare5050).unwrap();
        assert_eq!((half.train.len(), half.test.len()), (10, 10));
        assert!(half.is_disjoint());
        assert_eq!(half.test[0].id, "im10");

        let loo = split_stare(samples.clone(), Protocol::StareLoo(0)).unwrap();
        assert_eq!((loo.train.len(), loo.test.len()), (19, 1));
        assert_eq!(loo.test[0].id, "im00");

        let mut held: Vec<String> = (0..20)
            .map(|k| {
                split_stare(samples.clone(), Protocol::StareLoo(k))
                    .unwrap()
                    .test[0]
                    .id
                    .clone()
            })
            .collect();
        held.sort();
        held.dedup();
        assert_eq!(held.len(), 20);

        assert!(matches!(
            split_stare(samples, Protocol::StareLoo(20)),
            Err(Error::Usage(_))
        ));
    }
}
