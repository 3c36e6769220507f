use crate::error::{Error, Result};

/// Row-major boolean grid; `true` is foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Invalid(format!(
                "mask {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Foreground where `values > threshold`.
    pub fn threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| v > threshold).collect(),
        )
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn check_same_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }

    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other, "xor")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a ^ b)
                .collect(),
        })
    }

    /// Pools `factor × factor` cells; a cell is foreground when at least half
    /// of its pixels are.
    pub fn downsample_majority(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::Invalid(format!(
                "cannot pool {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let area = factor * factor;
        Ok(Self::from_fn(h, w, |cx, cy| {
            let mut n = 0;
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    n += usize::from(self.get(x, y));
                }
            }
            2 * n >= area
        }))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    /// Nearest-neighbour resize to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        Self::from_fn(height, width, |x, y| {
            let sx = (x * self.width / width).min(self.width - 1);
            let sy = (y * self.height / height).min(self.height - 1);
            self.get(sx, sy)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_pool_ties_go_to_foreground() {
        let m = BinaryMask::from_fn(4, 4, |x, y| {
            x < 1 && y < 2 || (x >= 2 && y >= 2 && x + y < 6)
        });
        let d = m.downsample_majority(2).unwrap();
        assert_eq!(d.dims(), (2, 2));
        assert!(d.get(0, 0));
        assert!(!d.get(1, 0));
        assert!(d.get(1, 1));
    }

    #[test]
    fn nearest_resize_round_trip() {
        let m = BinaryMask::from_fn(3, 5, |x, y| (x + y) % 2 == 0);
        let up = m.resize_nearest(6, 10);
        assert_eq!(up.resize_nearest(3, 5), m);
    }
}
