//! Per-pixel maps. `NaN` marks an invalid pixel.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                what: "grid",
                expected: vec![height * width],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        !self.data[i].is_nan()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|v| !v.is_nan()).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn same_shape(&self, other: &Grid, what: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                what,
                expected: vec![self.height, self.width],
                got: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// First valid pixel that is not strictly positive, if any.
    pub(crate) fn check_positive(&self, what: &'static str) -> Result<()> {
        match self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_nan() && **v <= 0.0)
        {
            Some((index, &value)) => Err(Error::NonPositive { what, index, value }),
            None => Ok(()),
        }
    }
}

macro_rules! grid_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub Grid);

        impl Deref for $name {
            type Target = Grid;
            fn deref(&self) -> &Grid {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Grid {
                &mut self.0
            }
        }
    };
}

grid_newtype!(
    /// Metric depth in meters.
    DepthMap
);
grid_newtype!(
    /// Disparity in pixels.
    DisparityMap
);
grid_newtype!(
    /// Per-pixel branch uncertainty in (0, 1).
    UncertaintyMap
);
