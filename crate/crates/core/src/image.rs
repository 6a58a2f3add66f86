//! Dense row-major images used for frames, renders and adjoints.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image<P> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<P>,
}

pub type RgbImage = Image<[f64; 3]>;
pub type DepthImage = Image<f64>;
pub type FlowImage = Image<[f64; 2]>;
/// Boolean per-pixel mask.
pub type Mask = Image<bool>;

impl<P: Copy + Default> Image<P> {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, P::default())
    }
}

impl<P: Copy> Image<P> {
    pub fn filled(width: usize, height: usize, value: P) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: P) {
        self.data[y * self.width + x] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<Q>(&self, other: &Image<Q>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<Q>(&self, f: impl Fn(P) -> Q) -> Image<Q> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }
}

pub(crate) fn check_shape<P, Q>(a: &Image<P>, b: &Image<Q>, what: &str) -> Result<()> {
    if a.width == b.width && a.height == b.height {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn invert(&self) -> Mask {
        self.map(|b| !b)
    }

    /// Intersection over union of the true pixels; two empty masks have IoU 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl RgbImage {
    pub fn to_gray(&self) -> Image<f64> {
        self.map(|c| (c[0] + c[1] + c[2]) / 3.0)
    }
}
