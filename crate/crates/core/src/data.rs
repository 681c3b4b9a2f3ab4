//! Labeled, session-tagged grayscale images.

use crate::tensor::Tensor;

/// Axis-aligned box in pixel coordinates, `x0 <= x < x1`, `y0 <= y < y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn dilated(&self, by: f64) -> Self {
        Self { x0: self.x0 - by, y0: self.y0 - by, x1: self.x1 + by, y1: self.y1 + by }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub identity: usize,
    pub session: Option<u8>,
    pub index: usize,
    pub size: usize,
    /// Row-major `size × size` pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// Location of the planted core patch, when known.
    pub core_box: Option<BoundingBox>,
}

impl Sample {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.size, self.size], self.pixels.clone()).expect("sample pixels match their size")
    }
}

/// Stack same-sized samples into an `[N, 1, S, S]` tensor.
pub fn stack<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Tensor<f32> {
    let mut values = Vec::new();
    let mut n = 0;
    let mut size = 0;
    for s in samples {
        assert!(n == 0 || s.size == size, "cannot stack {}-pixel and {size}-pixel images", s.size);
        size = s.size;
        values.extend_from_slice(&s.pixels);
        n += 1;
    }
    assert!(n > 0, "cannot stack an empty batch");
    Tensor::new(vec![n, 1, size, size], values).expect("stacked sizes are consistent")
}

/// Mean pixel value over a set of samples.
pub fn mean_pixel(samples: &[Sample]) -> f32 {
    let total: f64 = samples.iter().flat_map(|s| &s.pixels).map(|&v| v as f64).sum();
    let count: usize = samples.iter().map(|s| s.pixels.len()).sum();
    if count == 0 {
        0.0
    } else {
        (total / count as f64) as f32
    }
}
