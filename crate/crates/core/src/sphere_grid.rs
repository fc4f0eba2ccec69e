//! Equirectangular parameterization of the sphere.
//!
//! Latitude samples sit at cell centers strictly inside (0, pi), so every row
//! carries a strictly positive area weight sin(theta). Longitude is periodic.
//! All loss terms use the sin(theta)-weighted inner product defined here to
//! correct the area distortion of the parameterization.

use crate::error::{Error, Result};
use crate::field::Field;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Dimensions of the latitude x longitude grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    height: usize,
    width: usize,
}

impl GridSpec {
    /// Minimum rows; fewer leaves no room for cell-centered latitudes.
    pub const MIN_HEIGHT: usize = 4;
    /// Minimum columns; width must also be even so a pole crossing can shift
    /// longitude by exactly half a turn.
    pub const MIN_WIDTH: usize = 8;

    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < Self::MIN_HEIGHT || width < Self::MIN_WIDTH || !width.is_multiple_of(2) {
            return Err(Error::GridTooSmall { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of grid cells.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Latitude of row `i`, theta_i = (i + 0.5) * pi / height.
    pub fn theta(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * PI / self.height as f64
    }

    /// Longitude of column `j`, phi_j = j * 2 pi / width.
    pub fn phi(&self, j: usize) -> f64 {
        j as f64 * 2.0 * PI / self.width as f64
    }

    /// Latitude extent of one cell, radians.
    pub fn d_theta(&self) -> f64 {
        PI / self.height as f64
    }

    /// Longitude extent of one cell, radians.
    pub fn d_phi(&self) -> f64 {
        2.0 * PI / self.width as f64
    }
}

/// Per-pixel sin(theta) area weights; constant along each latitude row.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaWeights {
    grid: GridSpec,
    w: Vec<f64>,
}

impl AreaWeights {
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.grid.width() + j]
    }

    /// Sum of all weights.
    pub fn total(&self) -> f64 {
        self.w.iter().sum()
    }
}

pub fn make_grid(height: usize, width: usize) -> Result<GridSpec> {
    GridSpec::new(height, width)
}

/// Raw sin(theta) weights, one per pixel.
pub fn area_weights(grid: GridSpec) -> AreaWeights {
    let mut w = Vec::with_capacity(grid.len());
    for i in 0..grid.height() {
        let s = grid.theta(i).sin();
        for _ in 0..grid.width() {
            w.push(s);
        }
    }
    AreaWeights { grid, w }
}

/// Unit weights on the same grid, for deliberately unweighted comparisons.
pub fn uniform_weights(grid: GridSpec) -> AreaWeights {
    AreaWeights {
        grid,
        w: vec![1.0; grid.len()],
    }
}

/// sum_p w(p) * image(p)^2, over all channels of `image`.
pub fn weighted_norm_sq(image: &Field, weights: &AreaWeights) -> Result<f64> {
    if image.grid() != weights.grid {
        return Err(Error::ShapeMismatch(format!(
            "weighted_norm_sq: image {}x{} vs weights {}x{}",
            image.grid().height(),
            image.grid().width(),
            weights.grid.height(),
            weights.grid.width()
        )));
    }
    let mut acc = 0.0;
    for c in 0..image.channels() {
        for (w, v) in weights.w.iter().zip(image.plane(c)) {
            acc += w * v * v;
        }
    }
    Ok(acc)
}

/// Weighted mean over all channels and pixels.
pub fn weighted_mean(image: &Field, weights: &AreaWeights) -> Result<f64> {
    if image.grid() != weights.grid {
        return Err(Error::ShapeMismatch("weighted_mean".into()));
    }
    let mut num = 0.0;
    for c in 0..image.channels() {
        for (w, v) in weights.w.iter().zip(image.plane(c)) {
            num += w * v;
        }
    }
    Ok(num / (weights.total() * image.channels() as f64))
}

/// Weighted standard deviation over all channels and pixels.
pub fn weighted_std(image: &Field, weights: &AreaWeights) -> Result<f64> {
    let mean = weighted_mean(image, weights)?;
    let mut num = 0.0;
    for c in 0..image.channels() {
        for (w, v) in weights.w.iter().zip(image.plane(c)) {
            let d = v - mean;
            num += w * d * d;
        }
    }
    Ok((num / (weights.total() * image.channels() as f64)).sqrt())
}
