use crate::error::{config_err, Result};

/// One pyramid level: feature map size and the box-side range it is
/// responsible for. The range is half-open, `lo <= max(l, t, r, b) < hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub range: (f64, f64),
}

impl Level {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image-space center of the pixel at (`row`, `col`).
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<Level>,
}

pub const DEFAULT_STRIDES: [usize; 3] = [4, 8, 16];
pub const DEFAULT_RANGES: [(f64, f64); 3] = [(0.0, 32.0), (32.0, 64.0), (64.0, f64::INFINITY)];

impl PyramidGeometry {
    pub fn new(image_height: usize, image_width: usize, strides: &[usize], ranges: &[(f64, f64)]) -> Result<Self> {
        if strides.is_empty() || strides.len() != ranges.len() {
            return Err(config_err("need one regression range per stride"));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) || strides[0] == 0 {
            return Err(config_err(format!("strides {strides:?} must be positive and strictly increasing")));
        }
        let coarsest = *strides.last().unwrap();
        if image_height % coarsest != 0 || image_width % coarsest != 0 {
            return Err(config_err(format!(
                "image {image_height}x{image_width} not divisible by the coarsest stride {coarsest}"
            )));
        }
        let levels = strides
            .iter()
            .zip(ranges)
            .map(|(&stride, &range)| Level {
                stride,
                height: image_height / stride,
                width: image_width / stride,
                range,
            })
            .collect();
        Ok(Self {
            image_height,
            image_width,
            levels,
        })
    }

    /// Strides 4, 8, 16 with ranges 0-32, 32-64, 64-inf.
    pub fn standard(image_height: usize, image_width: usize) -> Result<Self> {
        Self::new(image_height, image_width, &DEFAULT_STRIDES, &DEFAULT_RANGES)
    }

    pub fn coarsest_stride(&self) -> usize {
        self.levels.last().map_or(1, |l| l.stride)
    }

    pub fn num_pixels(&self) -> usize {
        self.levels.iter().map(Level::len).sum()
    }
}
