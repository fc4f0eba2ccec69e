//! Multi-channel scalar fields on a spherical grid.
//!
//! A [`Field`] stores `channels` planes of `height x width` samples in
//! channel-major, row-major order. Images, velocity fields and displacement
//! fields are all fields; the vector-valued types in [`crate::deform`] wrap a
//! two-channel field (channel 0 = row component, channel 1 = column
//! component).

use crate::error::{Error, Result};
use crate::sphere_grid::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; channels * grid.len()],
        }
    }

    pub fn from_vec(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "field data has {} values, expected {} ({} channels on {}x{})",
                data.len(),
                channels * grid.len(),
                channels,
                grid.height(),
                grid.width()
            )));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    /// Builds a field by evaluating `f(channel, row, col)` at every sample.
    pub fn from_fn(grid: GridSpec, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(grid, channels);
        for c in 0..channels {
            for i in 0..grid.height() {
                for j in 0..grid.width() {
                    out.data[c * grid.len() + i * grid.width() + j] = f(c, i, j);
                }
            }
        }
        out
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[c * self.grid.len() + i * self.grid.width() + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let idx = c * self.grid.len() + i * self.grid.width() + j;
        self.data[idx] = v;
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.grid == other.grid && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Field, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}ch {}x{} vs {}ch {}x{}",
                self.channels,
                self.grid.height(),
                self.grid.width(),
                other.channels,
                other.grid.height(),
                other.grid.width()
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Field {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn negated(&self) -> Field {
        self.scaled(-1.0)
    }

    /// `self += s * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Field, s: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.ensure_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Field::from_vec(self.grid, self.channels, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Separable Gaussian blur with periodic wrap along columns and mirror
/// reflection along rows. Used to shape random fields; not part of the
/// deformation machinery.
pub fn gaussian_blur(field: &Field, sigma: f64) -> Field {
    if sigma <= 0.0 {
        return field.clone();
    }
    let grid = field.grid();
    let (h, w) = (grid.height(), grid.width());
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut norm = 0.0;
    for k in -radius..=radius {
        let v = (-0.5 * (k as f64 / sigma).powi(2)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in &mut kernel {
        *v /= norm;
    }

    let mut out = field.clone();
    for c in 0..field.channels() {
        let src = field.plane(c);
        // rows: mirror at the top/bottom edge
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let mut ii = i as isize + ki as isize - radius;
                    loop {
                        if ii < 0 {
                            ii = -ii - 1;
                        } else if ii >= h as isize {
                            ii = 2 * h as isize - 1 - ii;
                        } else {
                            break;
                        }
                    }
                    acc += kv * src[ii as usize * w + j];
                }
                tmp[i * w + j] = acc;
            }
        }
        // columns: periodic
        let dst = out.plane_mut(c);
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let jj = (j as isize + ki as isize - radius).rem_euclid(w as isize) as usize;
                    acc += kv * tmp[i * w + jj];
                }
                dst[i * w + j] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere_grid::GridSpec;

    #[test]
    fn plane_layout_is_channel_major() {
        let grid = GridSpec::new(4, 8).unwrap();
        let mut f = Field::zeros(grid, 2);
        f.set(1, 2, 3, 7.0);
        assert_eq!(f.plane(1)[2 * 8 + 3], 7.0);
        assert_eq!(f.plane(0).iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        let grid = GridSpec::new(4, 8).unwrap();
        assert!(Field::from_vec(grid, 2, vec![0.0; 10]).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let grid = GridSpec::new(8, 16).unwrap();
        let f = Field::from_fn(grid, 1, |_, _, _| 3.5);
        let g = gaussian_blur(&f, 2.0);
        for v in g.data() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_reduces_variance_of_noise() {
        let grid = GridSpec::new(16, 32).unwrap();
        // deterministic pseudo-noise
        let f = Field::from_fn(grid, 1, |_, i, j| ((i * 31 + j * 17) % 7) as f64 - 3.0);
        let g = gaussian_blur(&f, 2.0);
        let var = |x: &Field| {
            let m = x.data().iter().sum::<f64>() / x.len() as f64;
            x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
        };
        assert!(var(&g) < var(&f));
    }
}
