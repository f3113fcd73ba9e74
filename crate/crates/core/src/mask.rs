//! Binary per-pixel masks (0 = unchanged, 1 = changed).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    /// Validates that every value is 0 or 1.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Data(format!(
                "mask value {} at pixel (row {}, col {}) is not binary",
                data[i],
                i / width,
                i % width
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value as u8; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    /// Reads an `(H, W)` tensor whose entries must be exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Data(format!("mask tensor must be (H, W), got {s:?}")));
        }
        let mut data = Vec::with_capacity(t.numel());
        for (i, &v) in t.data().iter().enumerate() {
            if v == T::zero() {
                data.push(0);
            } else if v == T::one() {
                data.push(1);
            } else {
                return Err(Error::Data(format!(
                    "mask value {v} at pixel (row {}, col {}) is not binary",
                    i / s[1],
                    i % s[1]
                )));
            }
        }
        Ok(Mask {
            height: s[0],
            width: s[1],
            data,
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width],
            self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask extent")
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
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    /// Quarter turn counter-clockwise.
    pub fn rot90(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        Mask::from_fn(w, h, |y, x| self.get(x, w - 1 - y))
    }

    /// Same-size check used by every pairwise operation.
    pub fn check_same(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }
}

/// Summed-area table of a mask: `at(y, x)` counts ones in rows `< y`, cols `< x`.
pub(crate) struct IntegralImage {
    width: usize,
    table: Vec<u32>,
}

impl IntegralImage {
    pub(crate) fn new(mask: &Mask) -> Self {
        let (h, w) = mask.dims();
        let stride = w + 1;
        let mut table = vec![0u32; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask.data[y * w + x] as u32;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        IntegralImage { width: w, table }
    }

    /// Ones inside rows `y0..y1`, columns `x0..x1`.
    pub(crate) fn count(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> u32 {
        let s = self.width + 1;
        self.table[y1 * s + x1] + self.table[y0 * s + x0] - self.table[y0 * s + x1] - self.table[y1 * s + x0]
    }
}

/// Clipped square window of radius `r` around `(y, x)`: `(y0, y1, x0, x1)`, exclusive ends.
pub(crate) fn window(h: usize, w: usize, y: usize, x: usize, r: usize) -> (usize, usize, usize, usize) {
    (y.saturating_sub(r), (y + r + 1).min(h), x.saturating_sub(r), (x + r + 1).min(w))
}
