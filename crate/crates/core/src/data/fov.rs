//! Field-of-view masks for datasets that ship without them.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::map::BinaryMap;
use crate::tensor::Tensor;

/// Red-channel threshold, relative to the brightest red value.
pub const RED_THRESHOLD: f32 = 0.15;

/// Thresholds the red channel at 15% of its maximum, keeps the largest
/// 4-connected component and fills its holes.
pub fn synthesize_fov(image: &Tensor<f32>) -> Result<BinaryMap> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Dataset(format!(
            "FOV synthesis needs a [3, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let red = &image.data()[..h * w];
    let max = red.iter().copied().fold(0.0f32, f32::max);
    let cut = RED_THRESHOLD * max;
    let bright: Vec<bool> = red.iter().map(|&v| max > 0.0 && v > cut).collect();

    let largest = largest_component(&bright, h, w);
    Ok(fill_holes(&largest, h, w))
}

fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0u32; mask.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(i, h, w) {
                if mask[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// Background pixels not reachable from the border become foreground.
fn fill_holes(mask: &[bool], h: usize, w: usize) -> BinaryMap {
    let mut outside = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for i in 0..mask.len() {
        let (y, x) = (i / w, i % w);
        let border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
        if border && !mask[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, h, w) {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    let data = outside.iter().map(|&o| (!o) as u8).collect();
    BinaryMap::new(h, w, data).expect("dims match")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_image(h: usize, w: usize, red: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(
            &[3, h, w],
            |i| {
                if i < h * w {
                    red(i / w, i % w)
                } else {
                    0.0
                }
            },
        )
        .unwrap()
    }

    #[test]
    fn keeps_disc_and_fills_dark_hole() {
        let (h, w) = (21, 21);
        let img = red_image(h, w, |y, x| {
            let d2 = (y as f32 - 10.0).powi(2) + (x as f32 - 10.0).powi(2);
            if d2 <= 1.0 {
                0.0 // dark spot inside the disc
            } else if d2 <= 64.0 {
                0.8
            } else if y == 0 && x == 0 {
                0.9 // isolated speck
            } else {
                0.05
            }
        });
        let fov = synthesize_fov(&img).unwrap();
        assert!(fov.get(10, 10), "hole filled");
        assert!(fov.get(10, 3));
        assert!(!fov.get(0, 0), "speck dropped");
        assert!(!fov.get(20, 20));
    }

    #[test]
    fn black_image_has_empty_fov() {
        let img = Tensor::zeros(&[3, 4, 4]).unwrap();
        assert_eq!(synthesize_fov(&img).unwrap().count_ones(), 0);
    }
}
