//! Rotation and brightness augmentation.
//!
//! The default plan gives each training image 360 rotations in 1° steps
//! (including the identity) plus 20 brightness variants, 380 samples per
//! image. Images are resampled bilinearly; labels and masks use nearest
//! neighbour so they stay binary. Pixels rotated in from outside the frame
//! are zero and fall outside the rotated field of view.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::netpbm::PnmImage;
use super::{Sample, SampleSource};
use crate::error::{Error, Result};
use crate::map::BinaryMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Degrees between successive rotations; must divide 360.
    pub rotation_step: u32,
    pub brightness_variants: usize,
    pub brightness_min: f32,
    pub brightness_max: f32,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            rotation_step: 1,
            brightness_variants: 20,
            brightness_min: 0.8,
            brightness_max: 1.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Rotation { degrees: u32 },
    Brightness { index: usize, factor: f32 },
}

impl Variant {
    /// `id_rNNN` for rotations, `id_bNN` for brightness variants.
    pub fn suffix(&self) -> String {
        match self {
            Variant::Rotation { degrees } => format!("r{degrees:03}"),
            Variant::Brightness { index, .. } => format!("b{index:02}"),
        }
    }
}

/// FNV-1a, used to derive stable per-sample seeds.
pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rotation_step == 0 || 360 % self.rotation_step != 0 {
            return Err(Error::Usage(format!(
                "rotation step {} does not divide 360",
                self.rotation_step
            )));
        }
        if !(self.brightness_min > 0.0 && self.brightness_min <= self.brightness_max) {
            return Err(Error::Usage(format!(
                "invalid brightness range [{}, {}]",
                self.brightness_min, self.brightness_max
            )));
        }
        Ok(())
    }

    pub fn rotations(&self) -> usize {
        (360 / self.rotation_step) as usize
    }

    pub fn per_sample(&self) -> usize {
        self.rotations() + self.brightness_variants
    }

    /// Variant `index` of the sample with id `id`. Brightness factors are
    /// drawn from a generator seeded by `seed ^ hash(id)`, so they do not
    /// depend on the order samples are processed in.
    pub fn variant(&self, id: &str, index: usize) -> Variant {
        let rotations = self.rotations();
        if index < rotations {
            return Variant::Rotation {
                degrees: index as u32 * self.rotation_step,
            };
        }
        let b = index - rotations;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(id));
        let mut factor = 1.0;
        for _ in 0..=b {
            factor = rng.gen_range(self.brightness_min..=self.brightness_max);
        }
        Variant::Brightness { index: b, factor }
    }

    pub fn variants(&self, id: &str) -> Vec<Variant> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(id));
        let mut out: Vec<Variant> = (0..self.rotations())
            .map(|i| Variant::Rotation {
                degrees: i as u32 * self.rotation_step,
            })
            .collect();
        out.extend(
            (0..self.brightness_variants).map(|index| Variant::Brightness {
                index,
                factor: rng.gen_range(self.brightness_min..=self.brightness_max),
            }),
        );
        out
    }
}

pub fn apply(sample: &Sample, variant: Variant) -> Sample {
    let mut out = match variant {
        Variant::Rotation { degrees } => rotate(sample, degrees as f64),
        Variant::Brightness { factor, .. } => brighten(sample, factor),
    };
    out.id = format!("{}_{}", sample.id, variant.suffix());
    out
}

/// Eagerly expands every sample with every variant of `plan`.
pub fn augment(samples: &[Sample], plan: &AugmentPlan) -> Result<Vec<Sample>> {
    plan.validate()?;
    Ok(samples
        .iter()
        .flat_map(|s| plan.variants(&s.id).into_iter().map(move |v| apply(s, v)))
        .collect())
}

/// `clamp(factor · image, 0, 1)`; labels and mask unchanged.
pub fn brighten(sample: &Sample, factor: f32) -> Sample {
    Sample {
        image: sample.image.map(|v| (factor * v).clamp(0.0, 1.0)),
        ..sample.clone()
    }
}

/// Exact sine and cosine at multiples of 90° so right-angle rotations map
/// pixel centres onto pixel centres.
fn sin_cos_degrees(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    match d {
        0.0 => (0.0, 1.0),
        90.0 => (1.0, 0.0),
        180.0 => (0.0, -1.0),
        270.0 => (-1.0, 0.0),
        _ => d.to_radians().sin_cos(),
    }
}

/// Inverse mapping from output pixel to source coordinates for a rotation
/// of `degrees` counter-clockwise about the image centre.
struct Rotation {
    sin: f64,
    cos: f64,
    cx: f64,
    cy: f64,
}

impl Rotation {
    fn new(degrees: f64, h: usize, w: usize) -> Self {
        let (sin, cos) = sin_cos_degrees(degrees);
        Rotation {
            sin,
            cos,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        // image rows grow downwards, so a visual counter-clockwise turn
        // uses the transposed rotation
        let sx = self.cos * dx - self.sin * dy + self.cx;
        let sy = self.sin * dx + self.cos * dy + self.cy;
        (sy, sx)
    }
}

const SUPPORT_SLACK: f64 = 1e-9;

fn bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let (maxy, maxx) = ((h - 1) as f64, (w - 1) as f64);
    if sy < -SUPPORT_SLACK
        || sx < -SUPPORT_SLACK
        || sy > maxy + SUPPORT_SLACK
        || sx > maxx + SUPPORT_SLACK
    {
        return 0.0;
    }
    let (sy, sx) = (sy.clamp(0.0, maxy), sx.clamp(0.0, maxx));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    if fy == 0.0 && fx == 0.0 {
        return plane[y0 * w + x0];
    }
    let at = |y: usize, x: usize| plane[y * w + x] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn nearest(map: &BinaryMap, sy: f64, sx: f64) -> u8 {
    let (y, x) = (sy.round(), sx.round());
    if y < 0.0 || x < 0.0 || y >= map.height() as f64 || x >= map.width() as f64 {
        return 0;
    }
    map.get(y as usize, x as usize) as u8
}

/// Rotates a sample about its centre; identity for 0°.
pub fn rotate(sample: &Sample, degrees: f64) -> Sample {
    if degrees.rem_euclid(360.0) == 0.0 {
        return sample.clone();
    }
    let (h, w) = sample.dims();
    let rot = Rotation::new(degrees, h, w);
    let coords: Vec<(f64, f64)> = (0..h * w).map(|i| rot.source(i / w, i % w)).collect();

    let mut image = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let plane = &sample.image.data()[c * h * w..(c + 1) * h * w];
        for (i, &(sy, sx)) in coords.iter().enumerate() {
            image[c * h * w + i] = bilinear(plane, h, w, sy, sx);
        }
    }
    let label = coords
        .iter()
        .map(|&(sy, sx)| nearest(&sample.label, sy, sx))
        .collect();
    let fov = coords
        .iter()
        .map(|&(sy, sx)| nearest(&sample.fov, sy, sx))
        .collect();
    Sample {
        id: sample.id.clone(),
        image: Tensor::new(&[3, h, w], image).expect("same shape"),
        label: BinaryMap::new(h, w, label).expect("binary by construction"),
        fov: BinaryMap::new(h, w, fov).expect("binary by construction"),
        original: sample.original,
    }
}

/// Training samples expanded by an [`AugmentPlan`], generated on access.
#[derive(Clone, Debug)]
pub struct AugmentedSet {
    sources: Vec<Sample>,
    plan: AugmentPlan,
}

impl AugmentedSet {
    pub fn new(sources: Vec<Sample>, plan: AugmentPlan) -> Result<Self> {
        plan.validate()?;
        Ok(AugmentedSet { sources, plan })
    }

    pub fn plan(&self) -> &AugmentPlan {
        &self.plan
    }

    pub fn id(&self, index: usize) -> Option<String> {
        let (src, v) = self.locate(index)?;
        Some(format!("{}_{}", src.id, v.suffix()))
    }

    fn locate(&self, index: usize) -> Option<(&Sample, Variant)> {
        let per = self.plan.per_sample();
        let src = self.sources.get(index / per)?;
        Some((src, self.plan.variant(&src.id, index % per)))
    }

    /// Writes every augmented sample under `out_dir/{images,labels,masks}/`.
    pub fn materialize(&self, out_dir: impl AsRef<Path>) -> Result<usize> {
        let out = out_dir.as_ref();
        for sub in ["images", "labels", "masks"] {
            let dir = out.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for i in 0..SampleSource::len(self) {
            let s = self.sample(i)?;
            write_sample(&s, out)?;
        }
        Ok(SampleSource::len(self))
    }
}

/// Saves image, label and mask of a sample as Netpbm files.
pub fn write_sample(s: &Sample, out: &Path) -> Result<()> {
    let (h, w) = s.dims();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            rgb.push(
                (s.image.data()[c * h * w + i] * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8,
            );
        }
    }
    PnmImage::rgb(w, h, rgb).save(out.join("images").join(format!("{}.ppm", s.id)))?;
    let as_pgm = |m: &BinaryMap| {
        PnmImage::gray(
            w,
            h,
            255,
            m.data().iter().map(|&v| v as u16 * 255).collect(),
        )
    };
    as_pgm(&s.label).save(out.join("labels").join(format!("{}.pgm", s.id)))?;
    as_pgm(&s.fov).save(out.join("masks").join(format!("{}.pgm", s.id)))
}

impl SampleSource for AugmentedSet {
    fn len(&self) -> usize {
        self.sources.len() * self.plan.per_sample()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        let (src, v) = self
            .locate(index)
            .ok_or_else(|| Error::Dataset(format!("augmented index {index} out of range")))?;
        Ok(apply(src, v))
    }

    fn base_samples(&self) -> &[Sample] {
        &self.sources
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_2x2() -> Sample {
        let image = Tensor::from_fn(&[3, 2, 2], |i| i as f32 / 12.0).unwrap();
        let label = BinaryMap::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let fov = BinaryMap::filled(2, 2, true);
        Sample::new("s", image, label, fov).unwrap()
    }

    #[test]
    fn zero_rotation_and_unit_brightness_are_identities() {
        let s = sample_2x2();
        assert_eq!(rotate(&s, 0.0), s);
        assert_eq!(brighten(&s, 1.0), s);
    }

    #[test]
    fn right_angle_rotation_permutes_pixels() {
        let s = sample_2x2();
        let r = rotate(&s, 90.0);
        let mut before: Vec<u32> = s.image.data().iter().map(|v| v.to_bits()).collect();
        let mut after: Vec<u32> = r.image.data().iter().map(|v| v.to_bits()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
        assert_eq!(r.label.count_ones(), 1);
        assert_eq!(r.fov.count_ones(), 4);
        // four quarter turns come back exactly
        let mut t = s.clone();
        for _ in 0..4 {
            t = rotate(&t, 90.0);
        }
        assert_eq!(t.image, s.image);
    }

    #[test]
    fn brightness_clamps() {
        let s = sample_2x2();
        let b = brighten(&s, 1.2);
        assert!(b.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(
            b.image.data()[35 % 12],
            (1.2f32 * 11.0 / 12.0).clamp(0.0, 1.0)
        );
    }

    #[test]
    fn plan_counts_and_ids() {
        let plan = AugmentPlan::default();
        assert_eq!(plan.per_sample(), 380);
        let v = plan.variants("21_training");
        assert_eq!(v.len(), 380);
        assert_eq!(v[0], Variant::Rotation { degrees: 0 });
        for (i, var) in v.iter().enumerate() {
            assert_eq!(*var, plan.variant("21_training", i));
            if let Variant::Brightness { factor, .. } = var {
                assert!((0.8..=1.2).contains(factor));
            }
        }
        assert_eq!(v[361].suffix(), "b01");
        assert_eq!(v[359].suffix(), "r359");
    }

    #[test]
    fn brightness_factors_depend_on_id_not_order() {
        let plan = AugmentPlan::default();
        assert_eq!(plan.variants("a"), plan.variants("a"));
        assert_ne!(plan.variants("a")[370], plan.variants("b")[370]);
    }

    #[test]
    fn rejects_steps_not_dividing_360() {
        let plan = AugmentPlan {
            rotation_step: 7,
            ..Default::default()
        };
        assert!(plan.validate().is_err());
        assert!(augment(&[sample_2x2()], &plan).is_err());
    }

    #[test]
    fn lazy_set_matches_eager_expansion() {
        let plan = AugmentPlan {
            rotation_step: 90,
            brightness_variants: 2,
            ..Default::default()
        };
        let eager = augment(&[sample_2x2()], &plan).unwrap();
        let lazy = AugmentedSet::new(vec![sample_2x2()], plan).unwrap();
        assert_eq!(SampleSource::len(&lazy), eager.len());
        for (i, e) in eager.iter().enumerate() {
            assert_eq!(&lazy.sample(i).unwrap(), e);
            assert_eq!(lazy.id(i).unwrap(), e.id);
        }
    }
}
