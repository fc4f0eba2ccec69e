//! Stationary-velocity-field deformations on the parameterized sphere.
//!
//! A velocity field is exponentiated into a diffeomorphic displacement by
//! scaling-and-squaring; deformations act on images by bilinear pullback
//! sampling and compose by resampling. Every operation here has a matching
//! adjoint so the fit loop can push loss gradients back onto velocities and
//! atlas channels without automatic differentiation.
//!
//! Boundary rules: longitude wraps periodically. Latitude continues across
//! the poles: a virtual row beyond a pole resolves to the reflected physical
//! row on the antipodal meridian, so interpolation stays continuous and
//! flows remain invertible there. Vector components are resampled as
//! independent scalars (no spherical transport).

use crate::error::{Error, Result};
use crate::field::Field;
use crate::sphere_grid::GridSpec;

/// Channel index of the row (latitude) component of a vector field.
pub const ROW: usize = 0;
/// Channel index of the column (longitude) component of a vector field.
pub const COL: usize = 1;

/// Stationary velocity in grid units per unit flow time.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    field: Field,
}

impl VelocityField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            field: Field::zeros(grid, 2),
        }
    }

    pub fn from_field(field: Field) -> Result<Self> {
        if field.channels() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "velocity field needs 2 components, got {}",
                field.channels()
            )));
        }
        if !field.all_finite() {
            return Err(Error::NonFinite("velocity field"));
        }
        Ok(Self { field })
    }

    pub fn grid(&self) -> GridSpec {
        self.field.grid()
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn field_mut(&mut self) -> &mut Field {
        &mut self.field
    }

    pub fn into_field(self) -> Field {
        self.field
    }

    pub fn negated(&self) -> VelocityField {
        Self {
            field: self.field.negated(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.field.data().iter().all(|v| *v == 0.0)
    }
}

/// Dense displacement u with phi = Id + u, in grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    u: Field,
}

impl DeformationField {
    pub fn identity(grid: GridSpec) -> Self {
        Self {
            u: Field::zeros(grid, 2),
        }
    }

    pub fn from_displacement(u: Field) -> Result<Self> {
        if u.channels() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "displacement field needs 2 components, got {}",
                u.channels()
            )));
        }
        if !u.all_finite() {
            return Err(Error::NonFinite("displacement field"));
        }
        Ok(Self { u })
    }

    pub fn grid(&self) -> GridSpec {
        self.u.grid()
    }

    pub fn displacement(&self) -> &Field {
        &self.u
    }

    pub fn into_displacement(self) -> Field {
        self.u
    }

    pub fn max_displacement(&self) -> f64 {
        self.u.max_abs()
    }
}

// --- bilinear sampling with spherical boundary rules ---------------------

/// Flat indices of the four interpolation corners plus fractional weights.
/// Rows beyond a pole resolve to reflected physical rows on the antipodal
/// meridian, so each corner row carries its own columns.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fr: f64,
    fc: f64,
}

/// Virtual row index -> (physical row, half-turn longitude shift).
#[inline]
fn map_row(mut m: i64, h: i64) -> (usize, bool) {
    let mut shift = false;
    loop {
        if m < 0 {
            m = -1 - m;
            shift = !shift;
        } else if m >= h {
            m = 2 * h - 1 - m;
            shift = !shift;
        } else {
            return (m as usize, shift);
        }
    }
}

fn resolve(h: usize, w: usize, r: f64, c: f64) -> Tap {
    debug_assert!(r.is_finite() && c.is_finite());
    let wf = w as f64;
    let m0 = r.floor();
    let fr = r - m0;
    let m0 = m0 as i64;
    let (p0, s0) = map_row(m0, h as i64);
    let (p1, s1) = map_row(m0 + 1, h as i64);
    let mut c = c.rem_euclid(wf);
    if c >= wf {
        c = 0.0;
    }
    let c0 = (c.floor() as usize).min(w - 1);
    let fc = c - c0 as f64;
    let c1 = if c0 + 1 == w { 0 } else { c0 + 1 };
    let half = w / 2;
    let (c00, c01) = if s0 {
        ((c0 + half) % w, (c1 + half) % w)
    } else {
        (c0, c1)
    };
    let (c10, c11) = if s1 {
        ((c0 + half) % w, (c1 + half) % w)
    } else {
        (c0, c1)
    };
    Tap {
        i00: p0 * w + c00,
        i01: p0 * w + c01,
        i10: p1 * w + c10,
        i11: p1 * w + c11,
        fr,
        fc,
    }
}

#[inline]
fn sample(plane: &[f64], t: &Tap) -> f64 {
    let top = plane[t.i00] + t.fc * (plane[t.i01] - plane[t.i00]);
    let bot = plane[t.i10] + t.fc * (plane[t.i11] - plane[t.i10]);
    top + t.fr * (bot - top)
}

/// Value plus derivatives of the interpolant w.r.t. the requested (r, c).
#[inline]
fn sample_grad(plane: &[f64], t: &Tap) -> (f64, f64, f64) {
    let v00 = plane[t.i00];
    let v01 = plane[t.i01];
    let v10 = plane[t.i10];
    let v11 = plane[t.i11];
    let top = v00 + t.fc * (v01 - v00);
    let bot = v10 + t.fc * (v11 - v10);
    let val = top + t.fr * (bot - top);
    let d_dr = bot - top;
    let d_dc = (1.0 - t.fr) * (v01 - v00) + t.fr * (v11 - v10);
    (val, d_dr, d_dc)
}

/// Adjoint of [`sample`]: distributes `g` onto the four source cells.
#[inline]
fn scatter(plane: &mut [f64], t: &Tap, g: f64) {
    plane[t.i00] += g * (1.0 - t.fr) * (1.0 - t.fc);
    plane[t.i01] += g * (1.0 - t.fr) * t.fc;
    plane[t.i10] += g * t.fr * (1.0 - t.fc);
    plane[t.i11] += g * t.fr * t.fc;
}

fn taps_for(u: &Field) -> Vec<Tap> {
    let grid = u.grid();
    let (h, w) = (grid.height(), grid.width());
    let ur = u.plane(ROW);
    let uc = u.plane(COL);
    let mut taps = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            taps.push(resolve(h, w, i as f64 + ur[k], j as f64 + uc[k]));
        }
    }
    taps
}

// --- warp -----------------------------------------------------------------

/// Pullback warp: out(p) = image(p + u(p)) per channel.
pub fn warp(image: &Field, phi: &DeformationField) -> Result<Field> {
    if image.grid() != phi.grid() {
        return Err(Error::ShapeMismatch("warp: image vs deformation grid".into()));
    }
    let grid = image.grid();
    let taps = taps_for(&phi.u);
    let mut out = Field::zeros(grid, image.channels());
    for c in 0..image.channels() {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for (k, t) in taps.iter().enumerate() {
            dst[k] = sample(src, t);
        }
    }
    Ok(out)
}

/// Adjoint of [`warp`] w.r.t. both inputs. `grad_out` has the shape of the
/// warped image; returns (d/d image, d/d displacement).
pub fn warp_backward(image: &Field, phi: &DeformationField, grad_out: &Field) -> (Field, Field) {
    debug_assert!(image.grid() == phi.grid());
    let grid = image.grid();
    let taps = taps_for(&phi.u);
    let mut g_image = Field::zeros(grid, image.channels());
    let mut g_u = Field::zeros(grid, 2);
    for c in 0..image.channels() {
        let src = image.plane(c);
        let go = grad_out.plane(c);
        let gi = g_image.plane_mut(c);
        for (k, t) in taps.iter().enumerate() {
            let g = go[k];
            if g == 0.0 {
                continue;
            }
            let (_, d_dr, d_dc) = sample_grad(src, t);
            scatter(gi, t, g);
            g_u.plane_mut(ROW)[k] += g * d_dr;
            g_u.plane_mut(COL)[k] += g * d_dc;
        }
    }
    (g_image, g_u)
}

// --- composition ------------------------------------------------------------

fn compose_displacements(outer: &Field, inner: &Field) -> Field {
    let grid = inner.grid();
    let taps = taps_for(inner);
    let mut out = Field::zeros(grid, 2);
    for comp in [ROW, COL] {
        let src = outer.plane(comp);
        let base = inner.plane(comp);
        let dst = out.plane_mut(comp);
        for (k, t) in taps.iter().enumerate() {
            dst[k] = base[k] + sample(src, t);
        }
    }
    out
}

/// Adjoint of [`compose_displacements`]; returns (d/d outer, d/d inner).
fn compose_displacements_backward(outer: &Field, inner: &Field, grad_out: &Field) -> (Field, Field) {
    let grid = inner.grid();
    let taps = taps_for(inner);
    let mut g_outer = Field::zeros(grid, 2);
    let mut g_inner = Field::zeros(grid, 2);
    let outer_r = outer.plane(ROW);
    let outer_c = outer.plane(COL);
    for (k, t) in taps.iter().enumerate() {
        let gr = grad_out.plane(ROW)[k];
        let gc = grad_out.plane(COL)[k];
        if gr == 0.0 && gc == 0.0 {
            continue;
        }
        let (_, drr, drc) = sample_grad(outer_r, t);
        let (_, dcr, dcc) = sample_grad(outer_c, t);
        // u_out(p) = u_in(p) + S(p + u_in(p)): identity plus sampled Jacobian
        g_inner.plane_mut(ROW)[k] += gr * (1.0 + drr) + gc * dcr;
        g_inner.plane_mut(COL)[k] += gr * drc + gc * (1.0 + dcc);
        scatter(g_outer.plane_mut(ROW), t, gr);
        scatter(g_outer.plane_mut(COL), t, gc);
    }
    (g_outer, g_inner)
}

/// psi(p) = outer(inner(p)); displacement u_psi(p) = u_in(p) + u_out(p + u_in(p)).
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    if outer.grid() != inner.grid() {
        return Err(Error::ShapeMismatch("compose: grids differ".into()));
    }
    Ok(DeformationField {
        u: compose_displacements(&outer.u, &inner.u),
    })
}

/// Adjoint of [`compose`]; returns gradients w.r.t. the outer and inner
/// displacements.
pub fn compose_backward(
    outer: &DeformationField,
    inner: &DeformationField,
    grad_out: &Field,
) -> (Field, Field) {
    compose_displacements_backward(&outer.u, &inner.u, grad_out)
}

// --- scaling and squaring ---------------------------------------------------

/// Default number of squaring steps (2^7 flow subdivisions).
pub const DEFAULT_STEPS: u32 = 7;

/// Intermediate displacements recorded by [`integrate_with_tape`], consumed by
/// [`integrate_backward`].
#[derive(Debug, Clone)]
pub struct IntegrationTape {
    stages: Vec<Field>,
}

impl IntegrationTape {
    pub fn steps(&self) -> u32 {
        self.stages.len() as u32
    }
}

/// phi = exp(v) by scaling-and-squaring, keeping every intermediate stage for
/// the reverse pass.
pub fn integrate_with_tape(v: &VelocityField, steps: u32) -> Result<(DeformationField, IntegrationTape)> {
    assert!(steps >= 1, "integration needs at least one squaring step");
    if !v.field.all_finite() {
        return Err(Error::NonFinite("velocity field"));
    }
    let mut u = v.field.scaled(0.5f64.powi(steps as i32));
    let mut stages = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let next = compose_displacements(&u, &u);
        stages.push(u);
        u = next;
    }
    Ok((DeformationField { u }, IntegrationTape { stages }))
}

/// phi = exp(v).
pub fn integrate(v: &VelocityField, steps: u32) -> Result<DeformationField> {
    integrate_with_tape(v, steps).map(|(phi, _)| phi)
}

/// Pulls a gradient w.r.t. the final displacement back to the velocity.
pub fn integrate_backward(tape: &IntegrationTape, grad_final: &Field) -> Field {
    let mut g = grad_final.clone();
    for stage in tape.stages.iter().rev() {
        let (g_outer, g_inner) = compose_displacements_backward(stage, stage, &g);
        g = g_outer;
        g.add_scaled(&g_inner, 1.0);
    }
    g.scale(0.5f64.powi(tape.steps() as i32));
    g
}

/// Group inverse of [`integrate`]: exp(-v).
pub fn invert(v: &VelocityField, steps: u32) -> Result<DeformationField> {
    integrate(&v.negated(), steps)
}

// --- diagnostics ------------------------------------------------------------

/// Fraction of pixels whose deformation Jacobian determinant is <= 0.
/// Central differences; longitude is periodic, latitude one-sided at the
/// boundary rows.
pub fn jacobian_negative_fraction(phi: &DeformationField) -> f64 {
    let grid = phi.grid();
    let (h, w) = (grid.height(), grid.width());
    let ur = phi.u.plane(ROW);
    let uc = phi.u.plane(COL);
    let diff_row = |p: &[f64], i: usize, j: usize| -> f64 {
        if i == 0 {
            p[w + j] - p[j]
        } else if i == h - 1 {
            p[i * w + j] - p[(i - 1) * w + j]
        } else {
            0.5 * (p[(i + 1) * w + j] - p[(i - 1) * w + j])
        }
    };
    let diff_col = |p: &[f64], i: usize, j: usize| -> f64 {
        let jp = (j + 1) % w;
        let jm = (j + w - 1) % w;
        0.5 * (p[i * w + jp] - p[i * w + jm])
    };
    let mut neg = 0usize;
    for i in 0..h {
        for j in 0..w {
            let a = 1.0 + diff_row(ur, i, j);
            let b = diff_col(ur, i, j);
            let c = diff_row(uc, i, j);
            let d = 1.0 + diff_col(uc, i, j);
            if a * d - b * c <= 0.0 {
                neg += 1;
            }
        }
    }
    neg as f64 / (h * w) as f64
}

/// All first partials of every channel: output channel 2c is d/d row of input
/// channel c, channel 2c+1 is d/d col. Same stencil as the Jacobian
/// diagnostic.
pub fn spatial_gradient(field: &Field) -> Field {
    let grid = field.grid();
    let (h, w) = (grid.height(), grid.width());
    let mut out = Field::zeros(grid, 2 * field.channels());
    for c in 0..field.channels() {
        let p = field.plane(c);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let dr = if i == 0 {
                    p[w + j] - p[j]
                } else if i == h - 1 {
                    p[k] - p[k - w]
                } else {
                    0.5 * (p[k + w] - p[k - w])
                };
                let jp = (j + 1) % w;
                let jm = (j + w - 1) % w;
                let dc = 0.5 * (p[i * w + jp] - p[i * w + jm]);
                out.plane_mut(2 * c)[k] = dr;
                out.plane_mut(2 * c + 1)[k] = dc;
            }
        }
    }
    out
}

/// Transpose of [`spatial_gradient`]: maps a gradient w.r.t. the stacked
/// partials back to a gradient w.r.t. the field.
pub fn spatial_gradient_adjoint(grad: &Field) -> Field {
    let grid = grad.grid();
    let (h, w) = (grid.height(), grid.width());
    assert!(grad.channels().is_multiple_of(2), "expected stacked partials");
    let channels = grad.channels() / 2;
    let mut out = Field::zeros(grid, channels);
    for c in 0..channels {
        let gr = grad.plane(2 * c);
        let gc = grad.plane(2 * c + 1);
        let dst = out.plane_mut(c);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let g = gr[k];
                if g != 0.0 {
                    if i == 0 {
                        dst[w + j] += g;
                        dst[j] -= g;
                    } else if i == h - 1 {
                        dst[k] += g;
                        dst[k - w] -= g;
                    } else {
                        dst[k + w] += 0.5 * g;
                        dst[k - w] -= 0.5 * g;
                    }
                }
                let g = gc[k];
                if g != 0.0 {
                    let jp = (j + 1) % w;
                    let jm = (j + w - 1) % w;
                    dst[i * w + jp] += 0.5 * g;
                    dst[i * w + jm] -= 0.5 * g;
                }
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use crate::field::gaussian_blur;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Smooth random velocity with max component magnitude `amp` pixels.
    /// Magnitudes are modulated by sin(theta) so the field vanishes toward
    /// the poles, matching what every producer in this crate emits.
    pub fn smooth_velocity(grid: GridSpec, amp: f64, smooth: f64, seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Field::from_fn(grid, 2, |_, _, _| rng.random_range(-1.0..1.0));
        let mut sm = gaussian_blur(&noise, smooth);
        for c in 0..2 {
            for i in 0..grid.height() {
                let s = grid.theta(i).sin();
                for j in 0..grid.width() {
                    let v = sm.at(c, i, j) * s;
                    sm.set(c, i, j, v);
                }
            }
        }
        let max = sm.max_abs().max(1e-12);
        sm.scale(amp / max);
        VelocityField::from_field(sm).unwrap()
    }

    /// Fixed-point numerical inverse of a deformation, independent of the
    /// velocity representation.
    pub fn fixed_point_inverse(phi: &DeformationField, iters: usize) -> DeformationField {
        let grid = phi.grid();
        let mut inv = DeformationField::identity(grid);
        for _ in 0..iters {
            let taps = taps_for(&inv.u);
            let mut next = Field::zeros(grid, 2);
            for comp in [ROW, COL] {
                let src = phi.u.plane(comp);
                let dst = next.plane_mut(comp);
                for (k, t) in taps.iter().enumerate() {
                    dst[k] = -sample(src, t);
                }
            }
            inv = DeformationField::from_displacement(next).unwrap();
        }
        inv
    }
}
