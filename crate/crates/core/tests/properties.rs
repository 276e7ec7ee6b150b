//! Property tests across modules.

use proptest::prelude::*;
use rcnet::data::augment::{brighten, rotate};
use rcnet::data::synthetic::synthetic_sample;
use rcnet::data::Sample;
use rcnet::layers::conv2d;
use rcnet::metrics::{auc_from_scores, confusion, scalar_metrics};
use rcnet::{BinaryMap, Tensor};

fn tensor(shape: &[usize], values: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, values[..shape.iter().product::<usize>()].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        scores in prop::collection::vec(0.0f64..1.0, 4..120),
        labels in prop::collection::vec(any::<bool>(), 120),
    ) {
        let mut positive = labels[..scores.len()].to_vec();
        positive[0] = true;
        positive[1] = false;
        let auc = auc_from_scores(&scores, &positive).unwrap();
        let squared: Vec<f64> = scores.iter().map(|s| s * s).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s - 1.0).collect();
        prop_assert_eq!(auc_from_scores(&squared, &positive).unwrap(), auc);
        prop_assert_eq!(auc_from_scores(&shifted, &positive).unwrap(), auc);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn perfect_prediction_gives_ones(bits in prop::collection::vec(any::<bool>(), 36)) {
        let mut data: Vec<u8> = bits.iter().map(|&b| b as u8).collect();
        data[0] = 1;
        data[1] = 0;
        let gt = BinaryMap::new(6, 6, data).unwrap();
        let m = scalar_metrics(&confusion(&gt, &gt, &BinaryMap::filled(6, 6, true)).unwrap());
        prop_assert_eq!([m.se, m.sp, m.acc, m.f1], [Some(1.0); 4]);
    }

    #[test]
    fn conv_is_linear(
        xs in prop::collection::vec(-1.0f32..1.0, 2 * 5 * 5),
        ys in prop::collection::vec(-1.0f32..1.0, 2 * 5 * 5),
        ks in prop::collection::vec(-1.0f32..1.0, 3 * 2 * 9),
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
    ) {
        let (x, y) = (tensor(&[1, 2, 5, 5], &xs), tensor(&[1, 2, 5, 5], &ys));
        let k = tensor(&[3, 2, 3, 3], &ks);
        let zero = Tensor::zeros(&[3]).unwrap();
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&mix, &k, &zero, 1).unwrap();
        let rhs = conv2d(&x, &k, &zero, 1).unwrap().scale(a).add(&conv2d(&y, &k, &zero, 1).unwrap().scale(b)).unwrap();
        let scale = rhs.max_abs().max(1.0);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() <= 1e-5 * scale, "{} vs {}", l, r);
        }
    }

    #[test]
    fn right_angle_rotations_invert_exactly(seed in 0u64..1000, h in 3usize..12, w in 3usize..12, quarter in 1u32..4) {
        let s = synthetic_sample("p", h, w, seed);
        let deg = 90.0 * quarter as f64;
        if h == w || quarter == 2 {
            let back = rotate(&rotate(&s, deg), -deg);
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn augmentation_keeps_labels_binary(seed in 0u64..1000, deg in 0.0f64..360.0, factor in 0.8f32..1.2) {
        let s = synthetic_sample("q", 17, 19, seed);
        for t in [rotate(&s, deg), brighten(&s, factor)] {
            prop_assert!(t.label.data().iter().all(|&v| v <= 1));
            prop_assert!(t.fov.data().iter().all(|&v| v <= 1));
            prop_assert!(t.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

/// Mean absolute image error inside the FOV after rotating by `deg` and back.
fn round_trip_error(s: &Sample, deg: f64) -> f64 {
    let back = rotate(&rotate(s, deg), -deg);
    let (h, w) = s.dims();
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..3 {
        for i in 0..h * w {
            if back.fov.data()[i] == 1 && s.fov.data()[i] == 1 {
                total +=
                    (back.image.data()[c * h * w + i] - s.image.data()[c * h * w + i]).abs() as f64;
                count += 1;
            }
        }
    }
    total / count as f64
}

/// 3×3 box blur per channel. The synthetic generator adds independent
/// per-pixel noise, which is the worst case for interpolation; photographs
/// are band-limited by the optics, and the blur stands in for that.
fn band_limited(s: &Sample) -> Sample {
    let (h, w) = s.dims();
    let src = s.image.data();
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (mut sum, mut n) = (0.0, 0.0);
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                sum += src[(c * h + yy) * w + xx];
                n += 1.0;
            }
        }
        sum / n
    })
    .unwrap();
    Sample::new(s.id.clone(), image, s.label.clone(), s.fov.clone()).unwrap()
}

#[test]
fn arbitrary_rotation_round_trip_is_close() {
    let s = band_limited(&synthetic_sample("r", 96, 96, 3));
    for deg in [1.0, 7.5, 33.0, 45.0, 137.0, 271.0] {
        let err = round_trip_error(&s, deg);
        assert!(err < 0.02, "{deg}°: {err}");
    }
}
