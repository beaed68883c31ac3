//! 2D image, mask and label-map containers shared by the image-processing
//! modules. All are row-major `height × width`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{shape_err, Error, Result};

/// A scalar 2D image.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{}x{} image from {} values", height, width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Mean over the pixels selected by `mask` (`None` if none are).
    pub fn masked_mean(&self, mask: &BinaryMask) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .zip(&mask.data)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn same_shape<T>(&self, other: &Grid<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `[1, 1, H, W]` tensor for the networks.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .unwrap()
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
            return Err(shape_err!("expected a single-image tensor, got {:?}", s));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok(Self {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        })
    }
}

/// A generic 2D grid; [`BinaryMask`] and [`LabelImage`] are instances.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type BinaryMask = Grid<bool>;
pub type LabelImage = Grid<u8>;

impl<T: Copy + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{}x{} grid from {} values", height, width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err!(
                "{}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ))
        }
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert!(self.same_shape(other));
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert!(self.same_shape(other));
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect(),
        }
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert!(self.same_shape(other));
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

impl LabelImage {
    /// Label 0 background, 1 brain, 2 vessel. Vessel takes precedence over
    /// brain, brain over background.
    pub fn from_masks(brain: &BinaryMask, vessel: &BinaryMask) -> Result<Self> {
        brain.check_shape(vessel)?;
        Ok(Grid {
            height: brain.height,
            width: brain.width,
            data: brain
                .data
                .iter()
                .zip(&vessel.data)
                .map(|(&b, &v)| if v { 2 } else if b { 1 } else { 0 })
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.iter().find(|&&v| v > 2) {
            Some(&v) => Err(Error::InvalidLabel(v)),
            None => Ok(()),
        }
    }

    /// Pixels whose label is at least `class` (brain region includes vessels).
    pub fn at_least(&self, class: u8) -> BinaryMask {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v >= class).collect(),
        }
    }

    pub fn equal_to(&self, class: u8) -> BinaryMask {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }
}
