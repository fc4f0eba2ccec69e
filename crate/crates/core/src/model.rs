//! The generative model: atlas and subject types, deformation priors, data
//! likelihood terms and their bidirectional evaluation, feature
//! standardization, training-time augmentation, and a Monte-Carlo check of
//! the marginalized two-stage likelihood.
//!
//! Each subject i is explained as
//!   geom_i ~ N(atlas_geom warped by (phi_g o phi_j), 2 sigma^2)
//!   func_i ~ N(atlas_func warped by (phi_f o phi_j), 2 sigma^2)
//! with smoothness priors on all three displacement fields and a centrality
//! prior on the batch-mean joint displacement. The noise scale is folded into
//! the geometric/functional data-term weights.

use crate::deform::{
    compose, integrate, invert, spatial_gradient, warp, DeformationField, VelocityField,
};
use crate::error::{Error, Result};
use crate::field::{gaussian_blur, Field};
use crate::sphere_grid::{area_weights, weighted_norm_sq, AreaWeights, GridSpec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Learnable multi-channel feature image on the grid. Geometric and
/// functional channels are stored separately; both live in atlas space.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub geom: Field,
    pub func: Field,
}

impl Atlas {
    pub fn new(geom: Field, func: Field) -> Result<Self> {
        if geom.grid() != func.grid() {
            return Err(Error::ShapeMismatch("atlas geom vs func grid".into()));
        }
        if !geom.all_finite() || !func.all_finite() {
            return Err(Error::NonFinite("atlas"));
        }
        Ok(Self { geom, func })
    }

    pub fn grid(&self) -> GridSpec {
        self.geom.grid()
    }
}

/// Per-subject observations and latent velocity fields. Functional features
/// are optional: a subject without them still trains through the geometric
/// term and the priors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub geom: Field,
    pub func: Option<Field>,
    pub v_j: VelocityField,
    pub v_g: VelocityField,
    pub v_f: VelocityField,
}

impl SubjectRecord {
    /// Fresh record with identity (zero-velocity) latents.
    pub fn new(id: impl Into<String>, geom: Field, func: Option<Field>) -> Result<Self> {
        if let Some(f) = &func {
            if f.grid() != geom.grid() {
                return Err(Error::ShapeMismatch("subject geom vs func grid".into()));
            }
        }
        let grid = geom.grid();
        Ok(Self {
            id: id.into(),
            geom,
            func,
            v_j: VelocityField::zeros(grid),
            v_g: VelocityField::zeros(grid),
            v_f: VelocityField::zeros(grid),
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.geom.grid()
    }
}

/// Model weights and augmentation scales. Defaults are the published
/// operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Smoothness weight of the joint (large) deformation.
    pub lambda_j: f64,
    /// Smoothness weight of the geometric modality deformation.
    pub lambda_g: f64,
    /// Smoothness weight of the functional modality deformation.
    pub lambda_f: f64,
    /// Centrality weight on the batch-mean joint displacement.
    pub alpha_j: f64,
    /// Functional data-term weight.
    pub w_func: f64,
    /// Geometric data-term weight.
    pub w_geom: f64,
    /// Displacement std of augmentation deformations, pixels.
    pub sigma_aug_deform: f64,
    /// Smoothing kernel std shaping augmentation velocities, pixels.
    pub aug_smooth_std: f64,
    /// Additive noise std on geometric channels during augmentation.
    pub sigma_noise_geom: f64,
    /// Additive noise std on functional channels during augmentation.
    pub sigma_noise_func: f64,
    /// Scaling-and-squaring depth.
    pub steps: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_j: 0.1,
            lambda_g: 0.2,
            lambda_f: 0.2,
            alpha_j: 0.01,
            w_func: 0.7,
            w_geom: 0.3,
            sigma_aug_deform: 4.0,
            aug_smooth_std: 8.0,
            sigma_noise_geom: 1.0,
            sigma_noise_func: 6.0,
            steps: 7,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.lambda_j,
            self.lambda_g,
            self.lambda_f,
            self.alpha_j,
            self.w_func,
            self.w_geom,
            self.sigma_aug_deform,
            self.aug_smooth_std,
            self.sigma_noise_geom,
            self.sigma_noise_func,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("hyperparameters must be nonnegative".into()));
        }
        if (self.w_func + self.w_geom - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data-term weights must sum to 1, got {} + {}",
                self.w_func, self.w_geom
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// A deformation together with its stationary-velocity inverse.
#[derive(Debug, Clone)]
pub struct FieldPair {
    pub fwd: DeformationField,
    pub inv: DeformationField,
}

impl FieldPair {
    /// Integrates v and -v.
    pub fn from_velocity(v: &VelocityField, steps: u32) -> Result<Self> {
        Ok(Self {
            fwd: integrate(v, steps)?,
            inv: invert(v, steps)?,
        })
    }

    pub fn identity(grid: GridSpec) -> Self {
        Self {
            fwd: DeformationField::identity(grid),
            inv: DeformationField::identity(grid),
        }
    }
}

// --- standardization --------------------------------------------------------

fn median_of(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per channel: subtract the median, divide by the standard deviation.
pub fn standardize(features: &Field) -> Result<Field> {
    let mut out = features.clone();
    for c in 0..features.channels() {
        let plane = features.plane(c);
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std < 1e-12 {
            return Err(Error::DegenerateChannel { channel: c, std });
        }
        let med = median_of(plane);
        for v in out.plane_mut(c) {
            *v = (*v - med) / std;
        }
    }
    Ok(out)
}

// --- loss terms ---------------------------------------------------------------

/// Symmetric data term for one modality. The atlas is pulled into subject
/// space through phi_modality o phi_j, the subject into atlas space through
/// the inverse factors in reverse order; both residuals are weighted equally.
pub fn data_loss(
    subject_img: &Field,
    atlas_img: &Field,
    phi_modality: &FieldPair,
    phi_j: &FieldPair,
    weights: &AreaWeights,
) -> Result<f64> {
    subject_img.ensure_same_shape(atlas_img, "data_loss subject vs atlas")?;
    let psi = compose(&phi_modality.fwd, &phi_j.fwd)?;
    let atlas_in_subject = warp(atlas_img, &psi)?;
    let r_subject_space = subject_img.sub(&atlas_in_subject)?;

    let psi_inv = compose(&phi_j.inv, &phi_modality.inv)?;
    let subject_in_atlas = warp(subject_img, &psi_inv)?;
    let r_atlas_space = subject_in_atlas.sub(atlas_img)?;

    Ok(0.5 * weighted_norm_sq(&r_subject_space, weights)?
        + 0.5 * weighted_norm_sq(&r_atlas_space, weights)?)
}

/// Area-weighted squared gradient energy of a displacement field.
pub fn grad_energy(u: &Field, weights: &AreaWeights) -> f64 {
    weighted_norm_sq(&spatial_gradient(u), weights).expect("gradient shares the grid")
}

/// Smoothness priors of the three displacement fields.
pub fn reg_loss(
    u_j: &Field,
    u_g: &Field,
    u_f: &Field,
    hp: &Hyperparams,
    weights: &AreaWeights,
) -> f64 {
    hp.lambda_j * grad_energy(u_j, weights)
        + hp.lambda_g * grad_energy(u_g, weights)
        + hp.lambda_f * grad_energy(u_f, weights)
}

/// Centrality prior: alpha_j times the weighted norm of the mean joint
/// displacement over the batch.
pub fn centrality_loss(u_j_all: &[&Field], alpha_j: f64, weights: &AreaWeights) -> Result<f64> {
    let first = u_j_all.first().ok_or(Error::EmptyBatch)?;
    let mut mean = Field::zeros(first.grid(), first.channels());
    for u in u_j_all {
        mean.add_scaled(u, 1.0);
    }
    mean.scale(1.0 / u_j_all.len() as f64);
    Ok(alpha_j * weighted_norm_sq(&mean, weights)?)
}

/// Labeled values of every term in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub geom: f64,
    pub func: f64,
    pub reg_j: f64,
    pub reg_g: f64,
    pub reg_f: f64,
    pub centrality: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.geom + self.func + self.reg_j + self.reg_g + self.reg_f + self.centrality
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.geom += other.geom;
        self.func += other.func;
        self.reg_j += other.reg_j;
        self.reg_g += other.reg_g;
        self.reg_f += other.reg_f;
        self.centrality += other.centrality;
    }
}

/// Full objective over a batch: weighted data terms per subject (functional
/// term skipped where functional data is absent), smoothness priors per
/// subject, one centrality term over the batch mean.
pub fn total_loss(
    batch: &[SubjectRecord],
    atlas: &Atlas,
    hp: &Hyperparams,
) -> Result<(f64, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let grid = atlas.grid();
    let weights = area_weights(grid);
    let mut bd = LossBreakdown::default();
    let mut u_js: Vec<Field> = Vec::with_capacity(batch.len());
    for s in batch {
        s.geom.ensure_same_shape(&atlas.geom, "subject geom vs atlas")?;
        let pair_j = FieldPair::from_velocity(&s.v_j, hp.steps)?;
        let pair_g = FieldPair::from_velocity(&s.v_g, hp.steps)?;
        let pair_f = FieldPair::from_velocity(&s.v_f, hp.steps)?;
        bd.geom += hp.w_geom * data_loss(&s.geom, &atlas.geom, &pair_g, &pair_j, &weights)?;
        if let Some(func) = &s.func {
            func.ensure_same_shape(&atlas.func, "subject func vs atlas")?;
            bd.func += hp.w_func * data_loss(func, &atlas.func, &pair_f, &pair_j, &weights)?;
        }
        bd.reg_j += hp.lambda_j * grad_energy(pair_j.fwd.displacement(), &weights);
        bd.reg_g += hp.lambda_g * grad_energy(pair_g.fwd.displacement(), &weights);
        bd.reg_f += hp.lambda_f * grad_energy(pair_f.fwd.displacement(), &weights);
        u_js.push(pair_j.fwd.into_displacement());
    }
    let refs: Vec<&Field> = u_js.iter().collect();
    bd.centrality = centrality_loss(&refs, hp.alpha_j, &weights)?;
    Ok((bd.total(), bd))
}

// --- random smooth fields and augmentation ------------------------------------

/// One standard normal draw (Box-Muller over the generator's uniforms).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Smoothed white noise, modulated by sin(theta) so magnitudes vanish toward
/// the poles, then rescaled per channel to the target area-weighted std.
/// A zero target yields an exactly zero field.
pub fn random_smooth_field(
    grid: GridSpec,
    channels: usize,
    smooth_std: f64,
    target_std: f64,
    rng: &mut impl Rng,
) -> Field {
    if target_std == 0.0 {
        return Field::zeros(grid, channels);
    }
    let noise = Field::from_fn(grid, channels, |_, _, _| standard_normal(rng));
    let mut sm = gaussian_blur(&noise, smooth_std);
    for c in 0..channels {
        for i in 0..grid.height() {
            let s = grid.theta(i).sin();
            for j in 0..grid.width() {
                let v = sm.at(c, i, j) * s;
                sm.set(c, i, j, v);
            }
        }
    }
    let weights = area_weights(grid);
    let total_w = weights.total();
    for c in 0..channels {
        let plane = sm.plane(c);
        let mut mean = 0.0;
        for (w, v) in weights.values().iter().zip(plane) {
            mean += w * v;
        }
        mean /= total_w;
        let mut var = 0.0;
        for (w, v) in weights.values().iter().zip(plane) {
            var += w * (v - mean) * (v - mean);
        }
        var /= total_w;
        if var > 0.0 {
            let scale = target_std / var.sqrt();
            for v in sm.plane_mut(c) {
                *v *= scale;
            }
        }
    }
    sm
}

/// Training-time augmentation: a random smooth deformation applied to every
/// present channel group, then i.i.d. Gaussian noise per group. Deterministic
/// for a given seed; all-zero scales return the subject unchanged.
pub fn augment(subject: &SubjectRecord, hp: &Hyperparams, seed: u64) -> Result<SubjectRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = subject.grid();
    let mut out = subject.clone();
    if hp.sigma_aug_deform > 0.0 {
        let v_field =
            random_smooth_field(grid, 2, hp.aug_smooth_std, hp.sigma_aug_deform, &mut rng);
        let v = VelocityField::from_field(v_field)?;
        let phi = integrate(&v, hp.steps)?;
        out.geom = warp(&out.geom, &phi)?;
        if let Some(func) = &out.func {
            out.func = Some(warp(func, &phi)?);
        }
    }
    if hp.sigma_noise_geom > 0.0 {
        for v in out.geom.data_mut() {
            *v += hp.sigma_noise_geom * standard_normal(&mut rng);
        }
    }
    if hp.sigma_noise_func > 0.0 {
        if let Some(func) = &mut out.func {
            for v in func.data_mut() {
                *v += hp.sigma_noise_func * standard_normal(&mut rng);
            }
        }
    }
    Ok(out)
}

// --- marginal likelihood check ----------------------------------------------

/// Outcome of the Monte-Carlo composite-variance check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalCheckReport {
    pub sigma: f64,
    pub trials: usize,
    pub expected_variance: f64,
    pub empirical_variance: f64,
    pub rel_error: f64,
}

/// Simulates the two-stage observation process with an identity modality
/// deformation and measures the per-pixel variance of the observations about
/// the warped mean. Marginalizing the latent image doubles the variance, so
/// the empirical value should approach 2 sigma^2.
pub fn verify_marginal_likelihood(sigma: f64, trials: usize, seed: u64) -> MarginalCheckReport {
    assert!(sigma > 0.0, "sigma must be positive");
    assert!(trials >= 1000, "need at least 1000 trials");
    let grid = GridSpec::new(8, 16).expect("static grid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atlas_img = Field::from_fn(grid, 1, |_, i, j| {
        (2.0 * grid.theta(i)).sin() + grid.phi(j).cos()
    });
    let v_field = random_smooth_field(grid, 2, 2.0, 1.0, &mut rng);
    let phi_j = integrate(&VelocityField::from_field(v_field).expect("finite"), 7).expect("finite");
    let mean_img = warp(&atlas_img, &phi_j).expect("same grid");
    let phi_id = DeformationField::identity(grid);

    let n = mean_img.len();
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let mut latent = mean_img.clone();
        for v in latent.data_mut() {
            *v += sigma * standard_normal(&mut rng);
        }
        let mut observed = warp(&latent, &phi_id).expect("same grid");
        for v in observed.data_mut() {
            *v += sigma * standard_normal(&mut rng);
        }
        for (o, m) in observed.data().iter().zip(mean_img.data()) {
            sum_sq += (o - m) * (o - m);
        }
    }
    let empirical = sum_sq / (trials * n) as f64;
    let expected = 2.0 * sigma * sigma;
    MarginalCheckReport {
        sigma,
        trials,
        expected_variance: expected,
        empirical_variance: empirical,
        rel_error: (empirical - expected).abs() / expected,
    }
}
