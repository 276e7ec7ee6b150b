use crate::error::{Error, Result};

/// A `height × width` map of 0/1 values: vessel labels, field-of-view masks
/// and thresholded predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("BinaryMap", "empty map"));
        }
        if data.len() != height * width {
            return Err(Error::DataLength {
                len: data.len(),
                shape: vec![height, width],
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(
                "BinaryMap",
                format!("value {v} is not binary"),
            ));
        }
        Ok(BinaryMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryMap {
            height,
            width,
            data: vec![value as u8; height * width],
        }
    }

    /// Binarizes `values` with `v >= threshold`.
    pub fn from_threshold<T: PartialOrd + Copy>(
        height: usize,
        width: usize,
        values: &[T],
        threshold: T,
    ) -> Result<Self> {
        let data = values.iter().map(|&v| (v >= threshold) as u8).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn expect_dims(&self, other: &BinaryMap, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// Zero-extends the map to `height × width` (bottom/right padding).
    pub fn padded(&self, height: usize, width: usize) -> BinaryMap {
        assert!(height >= self.height && width >= self.width);
        let mut data = vec![0u8; height * width];
        for y in 0..self.height {
            data[y * width..y * width + self.width]
                .copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        BinaryMap {
            height,
            width,
            data,
        }
    }

    /// The top-left `height × width` window.
    pub fn cropped(&self, height: usize, width: usize) -> BinaryMap {
        assert!(height <= self.height && width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            data.extend_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        BinaryMap {
            height,
            width,
            data,
        }
    }
}
