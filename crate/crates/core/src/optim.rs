//! Gradient computation, the Adam optimizer with the published learning-rate
//! schedule, the alternating fit loop over subject velocities and the atlas,
//! and the geometric-only inference path.
//!
//! Gradients are exact: every stage of the forward computation (integration
//! by scaling-and-squaring, composition, warping, the weighted norms) has a
//! hand-written adjoint in [`crate::deform`], applied here in reverse order.
//! [`finite_difference_check`] verifies the whole chain against central
//! differences of the independent reference objective in [`crate::model`].

use crate::deform::{
    compose, compose_backward, integrate, integrate_backward, integrate_with_tape,
    jacobian_negative_fraction, spatial_gradient, spatial_gradient_adjoint, warp, warp_backward,
    DeformationField, IntegrationTape, VelocityField,
};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{
    augment, standardize, total_loss, Atlas, Hyperparams, LossBreakdown, SubjectRecord,
};
use crate::sphere_grid::{area_weights, weighted_norm_sq, AreaWeights, GridSpec};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

// --- Adam -------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update with bias correction.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Optimizer state for a whole fit: one Adam accumulator per atlas channel
/// group and per subject velocity field.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub atlas_geom: AdamState,
    pub atlas_func: AdamState,
    pub velocities: Vec<[AdamState; 3]>,
}

impl OptimizerState {
    pub fn new(atlas: &Atlas, n_subjects: usize) -> Self {
        let vel_len = atlas.grid().len() * 2;
        Self {
            atlas_geom: AdamState::new(atlas.geom.len()),
            atlas_func: AdamState::new(atlas.func.len()),
            velocities: (0..n_subjects)
                .map(|_| {
                    [
                        AdamState::new(vel_len),
                        AdamState::new(vel_len),
                        AdamState::new(vel_len),
                    ]
                })
                .collect(),
        }
    }
}

// --- learning-rate schedule ------------------------------------------------

/// Linear decay followed by multiplicative plateau reductions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub lr0: f64,
    pub lr_floor: f64,
    pub linear_epochs: u32,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_floor: 1e-4,
            linear_epochs: 500,
            plateau_factor: 0.9,
            plateau_patience: 100,
        }
    }
}

/// lr(epoch): linear from lr0 to lr_floor over the first `linear_epochs`
/// epochs, then lr_floor shrunk by `plateau_factor` per plateau event.
pub fn lr_at(schedule: &Schedule, epoch: u32, plateau_events: u32) -> f64 {
    if epoch <= schedule.linear_epochs && schedule.linear_epochs > 0 {
        let f = epoch as f64 / schedule.linear_epochs as f64;
        schedule.lr0 + (schedule.lr_floor - schedule.lr0) * f
    } else {
        schedule.lr_floor * schedule.plateau_factor.powi(plateau_events as i32)
    }
}

// --- gradients ----------------------------------------------------------------

/// Gradients of the objective w.r.t. one subject's velocities.
#[derive(Debug, Clone)]
pub struct SubjectGradients {
    pub v_j: Field,
    pub v_g: Field,
    pub v_f: Field,
}

/// Gradients for a whole batch plus the atlas accumulation.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub per_subject: Vec<SubjectGradients>,
    pub atlas_geom: Field,
    pub atlas_func: Field,
}

/// out[c] = scale * w .* r[c]
fn weighted_scaled(r: &Field, weights: &AreaWeights, scale: f64) -> Field {
    let mut out = r.clone();
    for c in 0..out.channels() {
        for (v, w) in out.plane_mut(c).iter_mut().zip(weights.values()) {
            *v *= scale * w;
        }
    }
    out
}

/// State carried between the per-subject pass and the batch-level centrality
/// coupling.
struct SubjectPass {
    breakdown: LossBreakdown,
    u_j: Field,
    g_u_j: Field,
    g_u_j_inv: Field,
    tape_j: IntegrationTape,
    tape_j_inv: IntegrationTape,
    g_v_g: Field,
    g_v_f: Field,
    g_atlas_geom: Field,
    g_atlas_func: Field,
}

/// Gradients of one modality's bidirectional data term.
struct DataTermGrads {
    loss: f64,
    g_phi_m: Field,
    g_phi_j: Field,
    g_phi_m_inv: Field,
    g_phi_j_inv: Field,
}

#[allow(clippy::too_many_arguments)]
fn data_term_backward(
    subj_img: &Field,
    atlas_img: &Field,
    phi_m: &DeformationField,
    phi_m_inv: &DeformationField,
    phi_j: &DeformationField,
    phi_j_inv: &DeformationField,
    weights: &AreaWeights,
    weight: f64,
    g_atlas: &mut Field,
) -> Result<DataTermGrads> {
    subj_img.ensure_same_shape(atlas_img, "subject vs atlas channels")?;
    // subject space: residual against the warped atlas
    let psi = compose(phi_m, phi_j)?;
    let atlas_in_subject = warp(atlas_img, &psi)?;
    let r_sub = subj_img.sub(&atlas_in_subject)?;
    // atlas space: residual of the inverse-warped subject
    let psi_inv = compose(phi_j_inv, phi_m_inv)?;
    let subject_in_atlas = warp(subj_img, &psi_inv)?;
    let r_atl = subject_in_atlas.sub(atlas_img)?;

    let loss = weight
        * (0.5 * weighted_norm_sq(&r_sub, weights)? + 0.5 * weighted_norm_sq(&r_atl, weights)?);

    let g_warped_atlas = weighted_scaled(&r_sub, weights, -weight);
    let (g_atlas_sampled, g_psi) = warp_backward(atlas_img, &psi, &g_warped_atlas);
    let (g_phi_m, g_phi_j) = compose_backward(phi_m, phi_j, &g_psi);
    g_atlas.add_scaled(&g_atlas_sampled, 1.0);

    let g_warped_subj = weighted_scaled(&r_atl, weights, weight);
    g_atlas.add_scaled(&weighted_scaled(&r_atl, weights, -weight), 1.0);
    let (_, g_psi_inv) = warp_backward(subj_img, &psi_inv, &g_warped_subj);
    let (g_phi_j_inv, g_phi_m_inv) = compose_backward(phi_j_inv, phi_m_inv, &g_psi_inv);

    Ok(DataTermGrads {
        loss,
        g_phi_m,
        g_phi_j,
        g_phi_m_inv,
        g_phi_j_inv,
    })
}

/// Forward and backward for everything except the centrality term, which
/// couples subjects and is resolved by the caller.
fn subject_pass(
    subject: &SubjectRecord,
    atlas: &Atlas,
    hp: &Hyperparams,
    weights: &AreaWeights,
    use_func: bool,
) -> Result<SubjectPass> {
    subject
        .geom
        .ensure_same_shape(&atlas.geom, "subject geom vs atlas")?;
    let grid = atlas.grid();
    let steps = hp.steps;

    let (phi_j, tape_j) = integrate_with_tape(&subject.v_j, steps)?;
    let (phi_j_inv, tape_j_inv) = integrate_with_tape(&subject.v_j.negated(), steps)?;
    let (phi_g, tape_g) = integrate_with_tape(&subject.v_g, steps)?;
    let (phi_g_inv, tape_g_inv) = integrate_with_tape(&subject.v_g.negated(), steps)?;
    let (phi_f, tape_f) = integrate_with_tape(&subject.v_f, steps)?;

    let mut bd = LossBreakdown::default();
    let mut g_u_j = Field::zeros(grid, 2);
    let mut g_u_j_inv = Field::zeros(grid, 2);
    let mut g_u_g = Field::zeros(grid, 2);
    let mut g_u_g_inv = Field::zeros(grid, 2);
    let mut g_u_f = Field::zeros(grid, 2);
    let mut g_atlas_geom = Field::zeros(grid, atlas.geom.channels());
    let mut g_atlas_func = Field::zeros(grid, atlas.func.channels());

    // geometric data term
    {
        let t = data_term_backward(
            &subject.geom,
            &atlas.geom,
            &phi_g,
            &phi_g_inv,
            &phi_j,
            &phi_j_inv,
            weights,
            hp.w_geom,
            &mut g_atlas_geom,
        )?;
        bd.geom = t.loss;
        g_u_g.add_scaled(&t.g_phi_m, 1.0);
        g_u_j.add_scaled(&t.g_phi_j, 1.0);
        g_u_g_inv.add_scaled(&t.g_phi_m_inv, 1.0);
        g_u_j_inv.add_scaled(&t.g_phi_j_inv, 1.0);
    }

    // functional data term (semi-supervised: may be absent or disabled)
    let mut func_inv: Option<(IntegrationTape, Field)> = None;
    if use_func {
        if let Some(func) = &subject.func {
            let (phi_f_inv, tape_f_inv) = integrate_with_tape(&subject.v_f.negated(), steps)?;
            let t = data_term_backward(
                func,
                &atlas.func,
                &phi_f,
                &phi_f_inv,
                &phi_j,
                &phi_j_inv,
                weights,
                hp.w_func,
                &mut g_atlas_func,
            )?;
            bd.func = t.loss;
            g_u_f.add_scaled(&t.g_phi_m, 1.0);
            g_u_j.add_scaled(&t.g_phi_j, 1.0);
            g_u_j_inv.add_scaled(&t.g_phi_j_inv, 1.0);
            func_inv = Some((tape_f_inv, t.g_phi_m_inv));
        }
    }

    // smoothness priors on the forward displacements
    let reg_term = |phi: &DeformationField, lambda: f64, g_u: &mut Field| -> Result<f64> {
        let grad = spatial_gradient(phi.displacement());
        let energy = lambda * weighted_norm_sq(&grad, weights)?;
        let g = weighted_scaled(&grad, weights, 2.0 * lambda);
        g_u.add_scaled(&spatial_gradient_adjoint(&g), 1.0);
        Ok(energy)
    };
    bd.reg_j = reg_term(&phi_j, hp.lambda_j, &mut g_u_j)?;
    bd.reg_g = reg_term(&phi_g, hp.lambda_g, &mut g_u_g)?;
    bd.reg_f = reg_term(&phi_f, hp.lambda_f, &mut g_u_f)?;

    // finish the modality velocities here; v_j waits for the centrality term
    let mut g_v_g = integrate_backward(&tape_g, &g_u_g);
    g_v_g.add_scaled(&integrate_backward(&tape_g_inv, &g_u_g_inv), -1.0);
    let mut g_v_f = integrate_backward(&tape_f, &g_u_f);
    if let Some((tape_f_inv, g_u_f_inv)) = func_inv {
        g_v_f.add_scaled(&integrate_backward(&tape_f_inv, &g_u_f_inv), -1.0);
    }

    Ok(SubjectPass {
        breakdown: bd,
        u_j: phi_j.into_displacement(),
        g_u_j,
        g_u_j_inv,
        tape_j,
        tape_j_inv,
        g_v_g,
        g_v_f,
        g_atlas_geom,
        g_atlas_func,
    })
}

fn loss_and_grad_inner(
    batch: &[SubjectRecord],
    atlas: &Atlas,
    hp: &Hyperparams,
    use_func: bool,
) -> Result<(LossBreakdown, BatchGradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let grid = atlas.grid();
    let weights = area_weights(grid);

    let passes: Vec<SubjectPass> = batch
        .par_iter()
        .map(|s| subject_pass(s, atlas, hp, &weights, use_func))
        .collect::<Result<Vec<_>>>()?;

    // centrality couples the batch through the mean joint displacement
    let n = passes.len() as f64;
    let mut u_mean = Field::zeros(grid, 2);
    for p in &passes {
        u_mean.add_scaled(&p.u_j, 1.0 / n);
    }
    let centrality = hp.alpha_j * weighted_norm_sq(&u_mean, &weights)?;
    let g_u_centrality = weighted_scaled(&u_mean, &weights, 2.0 * hp.alpha_j / n);

    let mut bd = LossBreakdown::default();
    let mut atlas_geom = Field::zeros(grid, atlas.geom.channels());
    let mut atlas_func = Field::zeros(grid, atlas.func.channels());
    for p in &passes {
        bd.add(&p.breakdown);
        atlas_geom.add_scaled(&p.g_atlas_geom, 1.0);
        atlas_func.add_scaled(&p.g_atlas_func, 1.0);
    }
    bd.centrality = centrality;
    if !bd.total().is_finite() {
        return Err(Error::Divergence(format!("loss is {}", bd.total())));
    }

    let per_subject: Vec<SubjectGradients> = passes
        .into_par_iter()
        .map(|p| {
            let mut g_u_j = p.g_u_j;
            g_u_j.add_scaled(&g_u_centrality, 1.0);
            let mut g_v_j = integrate_backward(&p.tape_j, &g_u_j);
            g_v_j.add_scaled(&integrate_backward(&p.tape_j_inv, &p.g_u_j_inv), -1.0);
            SubjectGradients {
                v_j: g_v_j,
                v_g: p.g_v_g,
                v_f: p.g_v_f,
            }
        })
        .collect();

    Ok((
        bd,
        BatchGradients {
            per_subject,
            atlas_geom,
            atlas_func,
        },
    ))
}

/// Loss and exact gradients of the full objective w.r.t. every velocity in
/// the batch and all atlas channels.
pub fn loss_and_grad(
    batch: &[SubjectRecord],
    atlas: &Atlas,
    hp: &Hyperparams,
) -> Result<(LossBreakdown, BatchGradients)> {
    loss_and_grad_inner(batch, atlas, hp, true)
}

// --- fit ------------------------------------------------------------------------

/// How the atlas is initialized before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtlasInit {
    /// Gaussian noise with std 0.1 per channel.
    Noise,
    /// Mean of the (rigidly aligned) input subjects.
    GroupMean,
}

/// Fit loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    pub hp: Hyperparams,
    pub schedule: Schedule,
    /// Standardize every subject channel before fitting.
    pub standardize_inputs: bool,
    pub atlas_init: AtlasInit,
    /// Update the atlas during fitting; a frozen atlas keeps its init.
    pub learn_atlas: bool,
    /// Optimize the per-modality fields; when false only the joint field
    /// moves and the model degenerates to a single shared deformation.
    pub modality_fields: bool,
    /// Fraction of subjects whose loss drives plateau detection.
    pub val_fraction: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 300,
            seed: 0,
            hp: Hyperparams::default(),
            schedule: Schedule::default(),
            standardize_inputs: true,
            atlas_init: AtlasInit::Noise,
            learn_atlas: true,
            modality_fields: true,
            val_fraction: 0.2,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-epoch record. Loss values are sums over the epoch's batches;
/// `val_total` is the unaugmented loss of the plateau-detection subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub lr: f64,
    pub total: f64,
    pub geom: f64,
    pub func: f64,
    pub reg_j: f64,
    pub reg_g: f64,
    pub reg_f: f64,
    pub centrality: f64,
    pub val_total: f64,
    pub plateau_events: u32,
}

/// Everything fitting emits. `wall_time_s` is informational and excluded
/// from the determinism contract; every other field reproduces bit-for-bit
/// for a fixed seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub n_subjects: usize,
    pub epochs: Vec<EpochStats>,
    pub final_total: f64,
    pub wall_time_s: f64,
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub atlas: Atlas,
    pub subjects: Vec<SubjectRecord>,
    pub report: FitReport,
}

fn mean_field(fields: &[&Field]) -> Field {
    let mut out = Field::zeros(fields[0].grid(), fields[0].channels());
    for f in fields {
        out.add_scaled(f, 1.0 / fields.len() as f64);
    }
    out
}

/// Alternating stochastic optimization of per-subject velocities and the
/// atlas. Deterministic for a fixed seed, independent of thread count.
pub fn fit(mut subjects: Vec<SubjectRecord>, cfg: &FitConfig) -> Result<FitOutput> {
    let start = Instant::now();
    cfg.validate()?;
    if subjects.len() < 2 {
        return Err(Error::Unidentifiable(
            "need at least 2 subjects to estimate an atlas".into(),
        ));
    }
    let grid = subjects[0].grid();
    let geom_ch = subjects[0].geom.channels();
    let func_ch = subjects
        .iter()
        .find_map(|s| s.func.as_ref().map(|f| f.channels()))
        .ok_or_else(|| {
            Error::Unidentifiable(
                "no subject carries functional data; functional atlas channels cannot be learned"
                    .into(),
            )
        })?;
    for s in &subjects {
        if s.grid() != grid || s.geom.channels() != geom_ch {
            return Err(Error::ShapeMismatch(format!("subject {} geometry", s.id)));
        }
        if let Some(f) = &s.func {
            if f.channels() != func_ch {
                return Err(Error::ShapeMismatch(format!(
                    "subject {} functional channels",
                    s.id
                )));
            }
        }
    }

    if cfg.standardize_inputs {
        for s in &mut subjects {
            s.geom = standardize(&s.geom)?;
            if let Some(f) = &s.func {
                s.func = Some(standardize(f)?);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut atlas = match cfg.atlas_init {
        AtlasInit::Noise => {
            let geom = Field::from_fn(grid, geom_ch, |_, _, _| {
                0.1 * crate::model::standard_normal(&mut rng)
            });
            let func = Field::from_fn(grid, func_ch, |_, _, _| {
                0.1 * crate::model::standard_normal(&mut rng)
            });
            Atlas::new(geom, func)?
        }
        AtlasInit::GroupMean => {
            let geoms: Vec<&Field> = subjects.iter().map(|s| &s.geom).collect();
            let funcs: Vec<&Field> = subjects.iter().filter_map(|s| s.func.as_ref()).collect();
            Atlas::new(mean_field(&geoms), mean_field(&funcs))?
        }
    };

    let n = subjects.len();
    let mut opt = OptimizerState::new(&atlas, n);

    // plateau-detection subset (these subjects keep training)
    let mut val_idx: Vec<usize> = (0..n).collect();
    val_idx.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n);
    let val_idx: Vec<usize> = if n_val == 0 {
        (0..n).collect()
    } else {
        val_idx.into_iter().take(n_val).collect()
    };

    let mut plateau_events = 0u32;
    let mut best_val = f64::INFINITY;
    let mut epochs_since_improve = 0u32;
    let mut report = FitReport {
        n_subjects: n,
        epochs: Vec::with_capacity(cfg.epochs as usize),
        final_total: f64::NAN,
        wall_time_s: 0.0,
    };

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.schedule, epoch, plateau_events);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut epoch_bd = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let aug_seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let batch: Vec<SubjectRecord> = chunk
                .par_iter()
                .zip(aug_seeds.par_iter())
                .map(|(&i, &seed)| augment(&subjects[i], &cfg.hp, seed))
                .collect::<Result<Vec<_>>>()?;
            let (bd, grads) = loss_and_grad(&batch, &atlas, &cfg.hp)?;
            epoch_bd.add(&bd);

            for (bi, &i) in chunk.iter().enumerate() {
                let g = &grads.per_subject[bi];
                let st = &mut opt.velocities[i];
                st[0].step(subjects[i].v_j.field_mut().data_mut(), g.v_j.data(), lr);
                if cfg.modality_fields {
                    st[1].step(subjects[i].v_g.field_mut().data_mut(), g.v_g.data(), lr);
                    st[2].step(subjects[i].v_f.field_mut().data_mut(), g.v_f.data(), lr);
                }
            }
            if cfg.learn_atlas {
                opt.atlas_geom
                    .step(atlas.geom.data_mut(), grads.atlas_geom.data(), lr);
                opt.atlas_func
                    .step(atlas.func.data_mut(), grads.atlas_func.data(), lr);
            }
        }

        // plateau detection on the unaugmented subset loss
        let val_records: Vec<SubjectRecord> =
            val_idx.iter().map(|&i| subjects[i].clone()).collect();
        let (val_total, _) = total_loss(&val_records, &atlas, &cfg.hp)?;
        if epoch >= cfg.schedule.linear_epochs {
            if val_total < best_val {
                best_val = val_total;
                epochs_since_improve = 0;
            } else {
                epochs_since_improve += 1;
                if epochs_since_improve >= cfg.schedule.plateau_patience {
                    plateau_events += 1;
                    epochs_since_improve = 0;
                    best_val = val_total;
                }
            }
        } else {
            best_val = best_val.min(val_total);
        }

        let total = epoch_bd.total();
        if !total.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: loss {total}")));
        }
        report.epochs.push(EpochStats {
            epoch,
            lr,
            total,
            geom: epoch_bd.geom,
            func: epoch_bd.func,
            reg_j: epoch_bd.reg_j,
            reg_g: epoch_bd.reg_g,
            reg_f: epoch_bd.reg_f,
            centrality: epoch_bd.centrality,
            val_total,
            plateau_events,
        });
    }

    report.final_total = report.epochs.last().map(|e| e.total).unwrap_or(f64::NAN);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(FitOutput {
        atlas,
        subjects,
        report,
    })
}

// --- inference --------------------------------------------------------------------

/// Inference configuration: registration of one held-out subject to a frozen
/// atlas, driven by geometry alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegisterConfig {
    pub epochs: u32,
    pub hp: Hyperparams,
    pub schedule: Schedule,
    pub standardize_input: bool,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            hp: Hyperparams::default(),
            schedule: Schedule::default(),
            standardize_input: true,
        }
    }
}

/// Diagnostics emitted by [`register`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterDiagnostics {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub geom_data_initial: f64,
    pub geom_data_final: f64,
    pub neg_jacobian: [f64; 3],
}

/// Output of [`register`]: all three fields are produced even though only
/// geometry drives them, so functional data can be warped afterwards.
#[derive(Debug, Clone)]
pub struct RegisterOutput {
    pub v_j: VelocityField,
    pub v_g: VelocityField,
    pub v_f: VelocityField,
    pub phi_j: DeformationField,
    pub phi_g: DeformationField,
    pub phi_f: DeformationField,
    pub diagnostics: RegisterDiagnostics,
}

/// Optimizes the three velocity fields of a single subject against a frozen
/// atlas using the geometric data term and all priors. Functional inputs are
/// not part of the signature and cannot influence the result.
pub fn register(
    subject_geom: &Field,
    atlas: &Atlas,
    cfg: &RegisterConfig,
) -> Result<RegisterOutput> {
    cfg.hp.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let geom = if cfg.standardize_input {
        standardize(subject_geom)?
    } else {
        subject_geom.clone()
    };
    let mut record = SubjectRecord::new("query", geom, None)?;
    record
        .geom
        .ensure_same_shape(&atlas.geom, "query geom vs atlas")?;

    let grid = atlas.grid();
    let vel_len = grid.len() * 2;
    let mut states = [
        AdamState::new(vel_len),
        AdamState::new(vel_len),
        AdamState::new(vel_len),
    ];
    let mut plateau_events = 0u32;
    let mut best = f64::INFINITY;
    let mut since = 0u32;
    let mut initial_loss = f64::NAN;
    let mut initial_geom = f64::NAN;
    let mut final_bd = LossBreakdown::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.schedule, epoch, plateau_events);
        let batch = std::slice::from_ref(&record);
        let (bd, grads) = loss_and_grad_inner(batch, atlas, &cfg.hp, false)?;
        if epoch == 0 {
            initial_loss = bd.total();
            initial_geom = bd.geom;
        }
        final_bd = bd;
        let g = &grads.per_subject[0];
        states[0].step(record.v_j.field_mut().data_mut(), g.v_j.data(), lr);
        states[1].step(record.v_g.field_mut().data_mut(), g.v_g.data(), lr);
        states[2].step(record.v_f.field_mut().data_mut(), g.v_f.data(), lr);

        let val = final_bd.total();
        if epoch >= cfg.schedule.linear_epochs {
            if val < best {
                best = val;
                since = 0;
            } else {
                since += 1;
                if since >= cfg.schedule.plateau_patience {
                    plateau_events += 1;
                    since = 0;
                    best = val;
                }
            }
        } else {
            best = best.min(val);
        }
    }

    let phi_j = integrate(&record.v_j, cfg.hp.steps)?;
    let phi_g = integrate(&record.v_g, cfg.hp.steps)?;
    let phi_f = integrate(&record.v_f, cfg.hp.steps)?;
    let diagnostics = RegisterDiagnostics {
        initial_loss,
        final_loss: final_bd.total(),
        geom_data_initial: initial_geom,
        geom_data_final: final_bd.geom,
        neg_jacobian: [
            jacobian_negative_fraction(&phi_j),
            jacobian_negative_fraction(&phi_g),
            jacobian_negative_fraction(&phi_f),
        ],
    };
    Ok(RegisterOutput {
        v_j: record.v_j,
        v_g: record.v_g,
        v_f: record.v_f,
        phi_j,
        phi_g,
        phi_f,
        diagnostics,
    })
}

/// Convenience wrapper over [`register`] for a stored record. Only the
/// geometric channels are read; functional contents are ignored entirely.
pub fn register_record(
    record: &SubjectRecord,
    atlas: &Atlas,
    cfg: &RegisterConfig,
) -> Result<RegisterOutput> {
    register(&record.geom, atlas, cfg)
}

// --- finite-difference verification -------------------------------------------

/// Report of the gradient check: analytic gradients of the fused pass versus
/// central differences of the reference objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub grid_height: usize,
    pub grid_width: usize,
    pub n_subjects: usize,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_class_max: Vec<(String, f64)>,
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds a deterministic small problem and compares every analytic gradient
/// component against central finite differences (step `h`) of the reference
/// [`total_loss`]. One subject carries functional data, one does not, so the
/// semi-supervised path is covered.
pub fn finite_difference_check(
    height: usize,
    width: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let grid = GridSpec::new(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = Hyperparams {
        steps: 4,
        ..Hyperparams::default()
    };
    let smooth = |rng: &mut ChaCha8Rng, target: f64| {
        crate::model::random_smooth_field(grid, 2, 1.5, target, rng)
    };
    let image = |rng: &mut ChaCha8Rng, ch: usize| {
        let mut f = Field::from_fn(grid, ch, |c, i, j| {
            ((c + 1) as f64 * grid.theta(i)).sin() + (2.0 * grid.phi(j)).cos()
        });
        for v in f.data_mut() {
            *v += 0.3 * crate::model::standard_normal(rng);
        }
        f
    };

    let atlas = Atlas::new(image(&mut rng, 2), image(&mut rng, 1))?;
    let mut batch = Vec::new();
    for k in 0..2 {
        let func = if k == 0 { Some(image(&mut rng, 1)) } else { None };
        let mut s = SubjectRecord::new(format!("s{k}"), image(&mut rng, 2), func)?;
        s.v_j = VelocityField::from_field(smooth(&mut rng, 0.6))?;
        s.v_g = VelocityField::from_field(smooth(&mut rng, 0.25))?;
        s.v_f = VelocityField::from_field(smooth(&mut rng, 0.25))?;
        batch.push(s);
    }

    let (_, grads) = loss_and_grad(&batch, &atlas, &hp)?;

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut per_class: Vec<(String, f64)> = Vec::new();
    let mut n_params = 0usize;

    // applies a signed perturbation to one parameter tensor component
    type Perturb<'a> = &'a mut dyn FnMut(&mut Vec<SubjectRecord>, &mut Atlas, usize, f64);
    let mut check_tensor = |label: String, analytic: &Field, write: Perturb| -> Result<f64> {
        let mut class_max = 0.0f64;
        for idx in 0..analytic.len() {
            let mut bp = batch.clone();
            let mut ap = atlas.clone();
            write(&mut bp, &mut ap, idx, h);
            let (lp, _) = total_loss(&bp, &ap, &hp)?;
            let mut bm = batch.clone();
            let mut am = atlas.clone();
            write(&mut bm, &mut am, idx, -h);
            let (lm, _) = total_loss(&bm, &am, &hp)?;
            let fd = (lp - lm) / (2.0 * h);
            let re = rel_err(analytic.data()[idx], fd);
            n_params += 1;
            if re > class_max {
                class_max = re;
            }
            if re > max_rel {
                max_rel = re;
                worst = format!("{label}[{idx}]");
            }
        }
        Ok(class_max)
    };

    for (si, g) in grads.per_subject.iter().enumerate() {
        for (name, analytic) in [("v_j", &g.v_j), ("v_g", &g.v_g), ("v_f", &g.v_f)] {
            let label = format!("subject{si}.{name}");
            let class_max = check_tensor(
                label.clone(),
                analytic,
                &mut |b, _a, idx, delta| {
                    let f = match name {
                        "v_j" => b[si].v_j.field_mut(),
                        "v_g" => b[si].v_g.field_mut(),
                        _ => b[si].v_f.field_mut(),
                    };
                    f.data_mut()[idx] += delta;
                },
            )?;
            per_class.push((label, class_max));
        }
    }
    for (name, analytic) in [
        ("atlas.geom", &grads.atlas_geom),
        ("atlas.func", &grads.atlas_func),
    ] {
        let class_max = check_tensor(name.to_string(), analytic, &mut |_b, a, idx, delta| {
            let f = if name == "atlas.geom" {
                &mut a.geom
            } else {
                &mut a.func
            };
            f.data_mut()[idx] += delta;
        })?;
        per_class.push((name.to_string(), class_max));
    }

    Ok(GradCheckReport {
        grid_height: height,
        grid_width: width,
        n_subjects: batch.len(),
        n_params,
        max_rel_error: max_rel,
        worst_param: worst,
        per_class_max: per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_smooth_field;
    use crate::sphere_grid::make_grid;

    fn wavy(grid: GridSpec, channels: usize, phase: f64) -> Field {
        Field::from_fn(grid, channels, |c, i, j| {
            (grid.theta(i) * (c + 1) as f64 + phase).sin() + (grid.phi(j) * 2.0).cos()
        })
    }

    #[test]
    fn schedule_matches_published_values() {
        let s = Schedule::default();
        assert_eq!(lr_at(&s, 0, 0), 1e-3);
        assert!((lr_at(&s, 500, 0) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&s, 250, 0) - 5.5e-4).abs() < 1e-18);
        // plateau reductions multiply the floor by 0.9
        assert!((lr_at(&s, 600, 2) - 1e-4 * 0.81).abs() < 1e-18);
        // non-increasing
        let mut prev = f64::INFINITY;
        for e in 0..700 {
            let lr = lr_at(&s, e, if e > 600 { 1 } else { 0 });
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        st.step(&mut p, &[0.5, -0.5], 0.1);
        assert!(p[0] < 1.0);
        assert!(p[1] > -1.0);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn gradients_vanish_at_global_minimum() {
        let grid = make_grid(8, 16).unwrap();
        let geom = wavy(grid, 2, 0.0);
        let func = wavy(grid, 1, 1.0);
        let atlas = Atlas::new(geom.clone(), func.clone()).unwrap();
        let batch = vec![
            SubjectRecord::new("a", geom.clone(), Some(func.clone())).unwrap(),
            SubjectRecord::new("b", geom, Some(func)).unwrap(),
        ];
        let (bd, grads) = loss_and_grad(&batch, &atlas, &Hyperparams::default()).unwrap();
        assert_eq!(bd.total(), 0.0);
        for g in &grads.per_subject {
            assert_eq!(g.v_j.max_abs(), 0.0);
            assert_eq!(g.v_g.max_abs(), 0.0);
            assert_eq!(g.v_f.max_abs(), 0.0);
        }
        assert_eq!(grads.atlas_geom.max_abs(), 0.0);
        assert_eq!(grads.atlas_func.max_abs(), 0.0);
    }

    #[test]
    fn func_term_does_not_touch_v_g() {
        // with the geometric data term and its prior switched off, nothing
        // in the objective references v_g
        let grid = make_grid(8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let atlas = Atlas::new(wavy(grid, 2, 0.0), wavy(grid, 1, 0.4)).unwrap();
        let mut s = SubjectRecord::new("a", wavy(grid, 2, 0.5), Some(wavy(grid, 1, 1.2))).unwrap();
        s.v_j =
            VelocityField::from_field(random_smooth_field(grid, 2, 1.5, 0.5, &mut rng)).unwrap();
        s.v_g =
            VelocityField::from_field(random_smooth_field(grid, 2, 1.5, 0.3, &mut rng)).unwrap();
        s.v_f =
            VelocityField::from_field(random_smooth_field(grid, 2, 1.5, 0.3, &mut rng)).unwrap();
        let hp = Hyperparams {
            w_geom: 0.0,
            w_func: 1.0,
            lambda_g: 0.0,
            ..Hyperparams::default()
        };
        let (_, grads) = loss_and_grad(&[s], &atlas, &hp).unwrap();
        assert_eq!(grads.per_subject[0].v_g.max_abs(), 0.0);
        assert!(grads.per_subject[0].v_f.max_abs() > 0.0);
    }

    #[test]
    fn fused_forward_matches_reference_objective() {
        let grid = make_grid(8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let atlas = Atlas::new(wavy(grid, 2, 0.2), wavy(grid, 1, 0.8)).unwrap();
        let mut batch = Vec::new();
        for k in 0..3 {
            let func = (k != 1).then(|| wavy(grid, 1, k as f64));
            let mut s =
                SubjectRecord::new(format!("s{k}"), wavy(grid, 2, 0.1 * k as f64), func).unwrap();
            s.v_j =
                VelocityField::from_field(random_smooth_field(grid, 2, 1.5, 0.6, &mut rng))
                    .unwrap();
            s.v_g =
                VelocityField::from_field(random_smooth_field(grid, 2, 1.5, 0.2, &mut rng))
                    .unwrap();
            s.v_f =
                VelocityField::from_field(random_smooth_field(grid, 2, 1.5, 0.2, &mut rng))
                    .unwrap();
            batch.push(s);
        }
        let hp = Hyperparams::default();
        let (bd, _) = loss_and_grad(&batch, &atlas, &hp).unwrap();
        let (reference, ref_bd) = total_loss(&batch, &atlas, &hp).unwrap();
        assert!(
            (bd.total() - reference).abs() <= 1e-9 * reference.abs().max(1.0),
            "fused {} reference {}",
            bd.total(),
            reference
        );
        assert!((bd.geom - ref_bd.geom).abs() <= 1e-9 * ref_bd.geom.max(1.0));
        assert!((bd.func - ref_bd.func).abs() <= 1e-9 * ref_bd.func.max(1.0));
        assert!((bd.centrality - ref_bd.centrality).abs() <= 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        // seed picked so no sampling position sits within the step h of an
        // interpolation-cell boundary, where the piecewise-linear warp has
        // no classical derivative and central differences mis-report
        let report = finite_difference_check(8, 16, 16, 1e-4).unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst_param
        );
        // all five parameter classes across two subjects were exercised
        assert!(report.per_class_max.len() >= 8);
    }

    #[test]
    fn descent_without_augmentation_is_monotone() {
        let grid = make_grid(8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let atlas_geom = wavy(grid, 2, 0.0);
        let atlas_func = wavy(grid, 1, 0.4);
        let make = |rng: &mut ChaCha8Rng, k: usize| {
            let v = random_smooth_field(grid, 2, 1.5, 0.8, rng);
            let phi = integrate(&VelocityField::from_field(v).unwrap(), 7).unwrap();
            let geom = warp(&atlas_geom, &phi).unwrap();
            let func = warp(&atlas_func, &phi).unwrap();
            SubjectRecord::new(format!("s{k}"), geom, Some(func)).unwrap()
        };
        let subjects: Vec<SubjectRecord> = (0..4).map(|k| make(&mut rng, k)).collect();
        let cfg = FitConfig {
            batch_size: 4,
            epochs: 20,
            seed: 7,
            hp: Hyperparams {
                sigma_aug_deform: 0.0,
                sigma_noise_geom: 0.0,
                sigma_noise_func: 0.0,
                ..Hyperparams::default()
            },
            schedule: Schedule {
                lr0: 1e-4,
                lr_floor: 1e-4,
                ..Schedule::default()
            },
            standardize_inputs: false,
            ..FitConfig::default()
        };
        let out = fit(subjects, &cfg).unwrap();
        let totals: Vec<f64> = out.report.epochs.iter().map(|e| e.total).collect();
        for w in totals.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9),
                "loss increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn data_term_descends_under_plain_gradient_steps() {
        let grid = make_grid(8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let atlas = Atlas::new(wavy(grid, 2, 0.0), wavy(grid, 1, 0.4)).unwrap();
        let v = random_smooth_field(grid, 2, 1.5, 0.8, &mut rng);
        let phi = integrate(&VelocityField::from_field(v).unwrap(), 7).unwrap();
        let geom = warp(&atlas.geom, &phi).unwrap();
        let mut subject = SubjectRecord::new("s", geom, None).unwrap();
        let hp = Hyperparams::default();
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (bd, grads) = loss_and_grad(std::slice::from_ref(&subject), &atlas, &hp).unwrap();
            assert!(bd.geom < prev, "data term should fall: {prev} -> {}", bd.geom);
            prev = bd.geom;
            let g = &grads.per_subject[0];
            subject.v_j.field_mut().add_scaled(&g.v_j, -1e-4);
            subject.v_g.field_mut().add_scaled(&g.v_g, -1e-4);
        }
    }

    #[test]
    fn missing_func_leaves_geometric_term_untouched() {
        let grid = make_grid(8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let atlas = Atlas::new(wavy(grid, 2, 0.2), wavy(grid, 1, 0.8)).unwrap();
        let mut with_func =
            SubjectRecord::new("a", wavy(grid, 2, 0.5), Some(wavy(grid, 1, 1.5))).unwrap();
        with_func.v_j =
            VelocityField::from_field(random_smooth_field(grid, 2, 1.5, 0.5, &mut rng)).unwrap();
        let mut without = with_func.clone();
        without.func = None;
        let hp = Hyperparams::default();
        let (_, bd_with) = total_loss(std::slice::from_ref(&with_func), &atlas, &hp).unwrap();
        let (_, bd_without) = total_loss(std::slice::from_ref(&without), &atlas, &hp).unwrap();
        assert_eq!(bd_with.geom, bd_without.geom);
        assert_eq!(bd_without.func, 0.0);
    }

    #[test]
    fn fit_rejects_degenerate_cohorts() {
        let grid = make_grid(8, 16).unwrap();
        let geom = wavy(grid, 2, 0.0);
        let one = vec![SubjectRecord::new("a", geom.clone(), None).unwrap()];
        assert!(matches!(
            fit(one, &FitConfig::default()),
            Err(Error::Unidentifiable(_))
        ));
        let no_func = vec![
            SubjectRecord::new("a", geom.clone(), None).unwrap(),
            SubjectRecord::new("b", geom, None).unwrap(),
        ];
        assert!(matches!(
            fit(no_func, &FitConfig::default()),
            Err(Error::Unidentifiable(_))
        ));
    }

    #[test]
    fn degenerate_cohort_converges_to_shared_image() {
        // every subject identical: atlas approaches the image, velocities stay small
        let grid = make_grid(8, 16).unwrap();
        let geom = wavy(grid, 2, 0.3);
        let func = wavy(grid, 1, 0.9);
        let subjects: Vec<SubjectRecord> = (0..4)
            .map(|k| SubjectRecord::new(format!("s{k}"), geom.clone(), Some(func.clone())).unwrap())
            .collect();
        let cfg = FitConfig {
            batch_size: 4,
            epochs: 500,
            seed: 3,
            hp: Hyperparams {
                sigma_aug_deform: 0.0,
                sigma_noise_geom: 0.0,
                sigma_noise_func: 0.0,
                alpha_j: 0.5,
                ..Hyperparams::default()
            },
            schedule: Schedule {
                lr0: 5e-2,
                lr_floor: 2e-2,
                linear_epochs: 400,
                ..Schedule::default()
            },
            ..FitConfig::default()
        };
        let out = fit(subjects, &cfg).unwrap();
        let target = standardize(&geom).unwrap();
        let diff = out.atlas.geom.sub(&target).unwrap();
        assert!(diff.max_abs() < 0.05, "atlas gap {}", diff.max_abs());
        for s in &out.subjects {
            let u = integrate(&s.v_j, 7).unwrap();
            assert!(
                u.max_displacement() < 0.2,
                "joint field should stay near identity"
            );
        }
    }

    #[test]
    fn fit_is_deterministic_for_a_seed() {
        let grid = make_grid(8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let subjects: Vec<SubjectRecord> = (0..4)
            .map(|k| {
                let mut geom = wavy(grid, 2, 0.1 * k as f64);
                for v in geom.data_mut() {
                    *v += 0.05 * crate::model::standard_normal(&mut rng);
                }
                SubjectRecord::new(format!("s{k}"), geom, Some(wavy(grid, 1, k as f64))).unwrap()
            })
            .collect();
        let cfg = FitConfig {
            batch_size: 2,
            epochs: 5,
            seed: 42,
            ..FitConfig::default()
        };
        let a = fit(subjects.clone(), &cfg).unwrap();
        let b = fit(subjects, &cfg).unwrap();
        assert_eq!(a.report.epochs, b.report.epochs);
        assert_eq!(a.atlas.geom.data(), b.atlas.geom.data());
        assert_eq!(a.atlas.func.data(), b.atlas.func.data());
        for (x, y) in a.subjects.iter().zip(&b.subjects) {
            assert_eq!(x.v_j.field().data(), y.v_j.field().data());
        }
    }

    #[test]
    fn register_of_atlas_geometry_stays_at_identity() {
        let grid = make_grid(8, 16).unwrap();
        let geom = wavy(grid, 2, 0.0);
        let func = wavy(grid, 1, 0.4);
        let atlas = Atlas::new(standardize(&geom).unwrap(), standardize(&func).unwrap()).unwrap();
        let out = register(&geom, &atlas, &RegisterConfig::default()).unwrap();
        assert!(out.phi_j.max_displacement() < 0.2);
        assert!(out.phi_g.max_displacement() < 0.2);
        assert!(out.phi_f.max_displacement() < 0.2);
    }

    #[test]
    fn register_recovers_constructed_deformation() {
        let grid = make_grid(16, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let atlas_geom = standardize(&wavy(grid, 2, 0.0)).unwrap();
        let atlas_func = standardize(&wavy(grid, 1, 0.4)).unwrap();
        let atlas = Atlas::new(atlas_geom.clone(), atlas_func).unwrap();
        let v_true =
            VelocityField::from_field(random_smooth_field(grid, 2, 3.0, 1.5, &mut rng)).unwrap();
        let phi_true = integrate(&v_true, 7).unwrap();
        let subject_geom = warp(&atlas_geom, &phi_true).unwrap();
        let cfg = RegisterConfig {
            epochs: 300,
            schedule: Schedule {
                lr0: 5e-2,
                lr_floor: 1e-2,
                linear_epochs: 250,
                ..Schedule::default()
            },
            standardize_input: false,
            ..RegisterConfig::default()
        };
        let out = register(&subject_geom, &atlas, &cfg).unwrap();
        assert!(
            out.diagnostics.geom_data_final < 0.1 * out.diagnostics.geom_data_initial,
            "geometric data loss {} -> {}",
            out.diagnostics.geom_data_initial,
            out.diagnostics.geom_data_final
        );
    }

    #[test]
    fn register_ignores_functional_contents() {
        let grid = make_grid(8, 16).unwrap();
        let geom = wavy(grid, 2, 0.6);
        let atlas =
            Atlas::new(standardize(&wavy(grid, 2, 0.0)).unwrap(), wavy(grid, 1, 0.4)).unwrap();
        let clean = SubjectRecord::new("q", geom.clone(), Some(wavy(grid, 1, 2.0))).unwrap();
        let mut poisoned = clean.clone();
        poisoned.func = Some(Field::from_fn(grid, 1, |_, _, _| f64::NAN));
        let cfg = RegisterConfig {
            epochs: 10,
            ..RegisterConfig::default()
        };
        let a = register_record(&clean, &atlas, &cfg).unwrap();
        let b = register_record(&poisoned, &atlas, &cfg).unwrap();
        assert_eq!(a.v_j.field().data(), b.v_j.field().data());
        assert_eq!(a.v_g.field().data(), b.v_g.field().data());
        assert_eq!(a.v_f.field().data(), b.v_f.field().data());
        assert_eq!(a.phi_f.displacement().data(), b.phi_f.displacement().data());
    }
}
