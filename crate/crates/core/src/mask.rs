//! Binary H×W maps used for ground truth, predictions and priors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|b| *b)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data.iter().enumerate().filter(|(_, b)| **b).map(move |(i, _)| (i / w, i % w))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height * self.width], |i| {
            if self.data[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}
