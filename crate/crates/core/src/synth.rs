//! Synthetic cortical-like cohorts with known ground truth: a generated
//! atlas, per-subject deformations drawn from the model's own priors at
//! controlled scales, and the exact forward observation model. Replaces
//! private imaging data for testing and evaluation.
//!
//! Ground truth travels next to the observations in the cohort directory but
//! through a separate loader, so fitting and inference can never read it.

use crate::deform::{compose, integrate, invert, warp, DeformationField, VelocityField};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{random_smooth_field, standard_normal, standardize, Atlas, SubjectRecord};
use crate::sphere_grid::GridSpec;
use crate::io;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Generator parameters. The joint-deformation scale must dominate the
/// modality scales: between-subject variability is large, within-subject
/// geometry/function discrepancy is small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_subjects: usize,
    /// Displacement std of the joint field, pixels.
    pub scale_j: f64,
    /// Displacement std of the geometric modality field, pixels.
    pub scale_g: f64,
    /// Displacement std of the functional modality field, pixels.
    pub scale_f: f64,
    /// Smoothing kernel std shaping all drawn velocities, pixels.
    pub velocity_smooth: f64,
    /// Observation noise std on geometric channels.
    pub noise_geom: f64,
    /// Observation noise std on functional channels.
    pub noise_func: f64,
    pub geom_channels: usize,
    pub func_channels: usize,
    /// Gaussian activation blobs per functional channel.
    pub blob_count: usize,
    /// Blob width as chord distance on the unit sphere.
    pub blob_width: f64,
    /// Fraction of subjects that carry functional observations.
    pub func_fraction: f64,
    /// Fraction of subjects whose functional field is drawn independently of
    /// the geometric one; the rest share it (function moves with geometry).
    pub offset_fraction: f64,
    pub seed: u64,
    pub steps: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            n_subjects: 16,
            scale_j: 6.0,
            scale_g: 1.5,
            scale_f: 1.5,
            velocity_smooth: 8.0,
            noise_geom: 0.1,
            noise_func: 0.3,
            geom_channels: 2,
            func_channels: 1,
            blob_count: 12,
            blob_width: 0.35,
            func_fraction: 1.0,
            offset_fraction: 1.0,
            seed: 0,
            steps: 7,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be >= 1".into()));
        }
        if self.scale_j <= self.scale_g.max(self.scale_f) && self.scale_j > 0.0 {
            return Err(Error::Config(
                "joint deformation scale must exceed the modality scales".into(),
            ));
        }
        if self.geom_channels == 0 || self.func_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.func_fraction) || !(0.0..=1.0).contains(&self.offset_fraction)
        {
            return Err(Error::Config("fractions must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The generating deformations of one subject; evaluation-only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub v_j: VelocityField,
    pub v_g: VelocityField,
    pub v_f: VelocityField,
}

impl GroundTruth {
    /// Composite field that pulls this subject's data of the given modality
    /// into atlas space (the inverse of the generating warp).
    pub fn to_atlas(&self, modality_v: &VelocityField, steps: u32) -> Result<DeformationField> {
        compose(&invert(&self.v_j, steps)?, &invert(modality_v, steps)?)
    }

    pub fn to_atlas_geom(&self, steps: u32) -> Result<DeformationField> {
        let v_g = self.v_g.clone();
        self.to_atlas(&v_g, steps)
    }

    pub fn to_atlas_func(&self, steps: u32) -> Result<DeformationField> {
        let v_f = self.v_f.clone();
        self.to_atlas(&v_f, steps)
    }
}

/// One generated subject: observations plus its generating fields.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub record: SubjectRecord,
    pub truth: GroundTruth,
}

/// A full synthetic dataset.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub config: SynthConfig,
    pub atlas: Atlas,
    pub subjects: Vec<SynthSubject>,
}

impl Cohort {
    pub fn records(&self) -> Vec<SubjectRecord> {
        self.subjects.iter().map(|s| s.record.clone()).collect()
    }
}

/// splitmix64; decorrelates per-subject seeds from the master seed.
fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Atlas with stripe-like geometric channels (low-order harmonics plus
/// smoothed noise) and blob-structured functional channels, standardized.
/// With `blob_count` 0 the functional channels fall back to a faint latitude
/// ramp so standardization stays defined.
pub fn make_atlas(cfg: &SynthConfig) -> Result<Atlas> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));

    let mut geom = Field::zeros(grid, cfg.geom_channels);
    for c in 0..cfg.geom_channels {
        let mut terms: Vec<(f64, f64, f64, bool)> = Vec::new();
        for _ in 0..3 {
            // longitude harmonic, damped toward the poles
            terms.push((
                rng.random_range(0.5..1.2),
                rng.random_range(2..6) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                true,
            ));
        }
        for _ in 0..2 {
            // latitude harmonic
            terms.push((
                rng.random_range(0.5..1.2),
                rng.random_range(1..4) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                false,
            ));
        }
        let noise = random_smooth_field(grid, 1, 4.0, 0.4, &mut rng);
        for i in 0..grid.height() {
            let theta = grid.theta(i);
            for j in 0..grid.width() {
                let phi = grid.phi(j);
                let mut v = noise.at(0, i, j);
                for (amp, k, ph, longitudinal) in &terms {
                    v += if *longitudinal {
                        amp * (k * phi + ph).cos() * theta.sin()
                    } else {
                        amp * (k * theta + ph).cos()
                    };
                }
                geom.set(c, i, j, v);
            }
        }
    }

    let mut func = Field::zeros(grid, cfg.func_channels);
    for c in 0..cfg.func_channels {
        if cfg.blob_count == 0 {
            for i in 0..grid.height() {
                for j in 0..grid.width() {
                    func.set(c, i, j, 1e-3 * grid.theta(i));
                }
            }
            continue;
        }
        let mut blobs = Vec::with_capacity(cfg.blob_count);
        for _ in 0..cfg.blob_count {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let center = [r * phi.cos(), r * phi.sin(), z];
            let amp: f64 = rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            blobs.push((center, amp));
        }
        let inv_two_s2 = 1.0 / (2.0 * cfg.blob_width * cfg.blob_width);
        for i in 0..grid.height() {
            let theta = grid.theta(i);
            for j in 0..grid.width() {
                let phi = grid.phi(j);
                let p = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                let mut v = 0.0;
                for (center, amp) in &blobs {
                    let d2 = (p[0] - center[0]).powi(2)
                        + (p[1] - center[1]).powi(2)
                        + (p[2] - center[2]).powi(2);
                    v += amp * (-d2 * inv_two_s2).exp();
                }
                func.set(c, i, j, v);
            }
        }
    }

    Atlas::new(standardize(&geom)?, standardize(&func)?)
}

/// Draws one subject from the generative model: velocities from the smooth
/// prior at configured scales, observations as noisy warps of the atlas.
pub fn sample_subject(
    atlas: &Atlas,
    cfg: &SynthConfig,
    subject_seed: u64,
    id: impl Into<String>,
    with_func: bool,
) -> Result<SynthSubject> {
    let grid = atlas.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let v_j = VelocityField::from_field(random_smooth_field(
        grid,
        2,
        cfg.velocity_smooth,
        cfg.scale_j,
        &mut rng,
    ))?;
    let v_g = VelocityField::from_field(random_smooth_field(
        grid,
        2,
        cfg.velocity_smooth,
        cfg.scale_g,
        &mut rng,
    ))?;
    let v_f_own = VelocityField::from_field(random_smooth_field(
        grid,
        2,
        cfg.velocity_smooth,
        cfg.scale_f,
        &mut rng,
    ))?;
    let offset: bool = rng.random::<f64>() < cfg.offset_fraction;
    let v_f = if offset { v_f_own } else { v_g.clone() };

    let phi_j = integrate(&v_j, cfg.steps)?;
    let phi_g = integrate(&v_g, cfg.steps)?;
    let phi_f = integrate(&v_f, cfg.steps)?;
    let psi_g = compose(&phi_g, &phi_j)?;
    let psi_f = compose(&phi_f, &phi_j)?;

    let mut geom = warp(&atlas.geom, &psi_g)?;
    if cfg.noise_geom > 0.0 {
        for v in geom.data_mut() {
            *v += cfg.noise_geom * standard_normal(&mut rng);
        }
    }
    let func = if with_func {
        let mut f = warp(&atlas.func, &psi_f)?;
        if cfg.noise_func > 0.0 {
            for v in f.data_mut() {
                *v += cfg.noise_func * standard_normal(&mut rng);
            }
        }
        Some(f)
    } else {
        None
    };

    Ok(SynthSubject {
        record: SubjectRecord::new(id, geom, func)?,
        truth: GroundTruth { v_j, v_g, v_f },
    })
}

/// Generates the full cohort deterministically from the config seed.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let atlas = make_atlas(cfg)?;
    let n_func = (cfg.func_fraction * cfg.n_subjects as f64).round() as usize;
    let subjects = (0..cfg.n_subjects)
        .map(|i| {
            sample_subject(
                &atlas,
                cfg,
                derive_seed(cfg.seed, 1 + i as u64),
                format!("sub_{i:03}"),
                i < n_func,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        config: cfg.clone(),
        atlas,
        subjects,
    })
}

// --- cohort directory ------------------------------------------------------

/// On-disk cohort description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub config: SynthConfig,
    pub subjects: Vec<SubjectEntry>,
    pub geom_channel_names: Vec<String>,
    pub func_channel_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub file: String,
    pub has_func: bool,
}

/// Writes manifest, per-subject containers (observations plus ground truth)
/// and the generating atlas.
pub fn write_cohort(dir: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in &cohort.subjects {
        let file = format!("{}.josa", s.record.id);
        let mut tensors = vec![io::Tensor::from_field("geom", &s.record.geom)];
        if let Some(func) = &s.record.func {
            tensors.push(io::Tensor::from_field("func", func));
        }
        tensors.push(io::Tensor::from_field("gt_v_j", s.truth.v_j.field()));
        tensors.push(io::Tensor::from_field("gt_v_g", s.truth.v_g.field()));
        tensors.push(io::Tensor::from_field("gt_v_f", s.truth.v_f.field()));
        io::write_container(dir.join(&file), &tensors)?;
        entries.push(SubjectEntry {
            id: s.record.id.clone(),
            file,
            has_func: s.record.func.is_some(),
        });
    }
    io::write_container(
        dir.join("atlas_truth.josa"),
        &[
            io::Tensor::from_field("geom", &cohort.atlas.geom),
            io::Tensor::from_field("func", &cohort.atlas.func),
        ],
    )?;
    let manifest = CohortManifest {
        config: cohort.config.clone(),
        subjects: entries,
        geom_channel_names: (0..cohort.config.geom_channels)
            .map(|c| format!("geom{c}"))
            .collect(),
        func_channel_names: (0..cohort.config.func_channels)
            .map(|c| format!("func{c}"))
            .collect(),
    };
    io::save_json(dir.join("manifest.json"), &manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<CohortManifest> {
    io::load_json(dir.as_ref().join("manifest.json"))
}

/// Observations only; this is all that fitting and inference may see.
pub fn load_cohort_records(dir: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let tensors = io::read_container(dir.join(&entry.file))?;
        let geom = io::find_tensor(&tensors, "geom")?.to_field()?;
        let func = if entry.has_func {
            Some(io::find_tensor(&tensors, "func")?.to_field()?)
        } else {
            None
        };
        records.push(SubjectRecord::new(entry.id.clone(), geom, func)?);
    }
    Ok(records)
}

/// Ground-truth deformations, keyed by subject id; evaluation-only.
pub fn load_cohort_truth(dir: impl AsRef<Path>) -> Result<Vec<(String, GroundTruth)>> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let tensors = io::read_container(dir.join(&entry.file))?;
        let truth = GroundTruth {
            v_j: VelocityField::from_field(io::find_tensor(&tensors, "gt_v_j")?.to_field()?)?,
            v_g: VelocityField::from_field(io::find_tensor(&tensors, "gt_v_g")?.to_field()?)?,
            v_f: VelocityField::from_field(io::find_tensor(&tensors, "gt_v_f")?.to_field()?)?,
        };
        out.push((entry.id.clone(), truth));
    }
    Ok(out)
}

/// The generating atlas; evaluation-only reference.
pub fn load_cohort_atlas(dir: impl AsRef<Path>) -> Result<Atlas> {
    let tensors = io::read_container(dir.as_ref().join("atlas_truth.josa"))?;
    Atlas::new(
        io::find_tensor(&tensors, "geom")?.to_field()?,
        io::find_tensor(&tensors, "func")?.to_field()?,
    )
}
