//! Registration-quality metrics and statistics: area-weighted correlation to
//! the group mean, per-subject improvement, a one-tailed Wilcoxon signed-rank
//! test (exact by enumeration for small n, normal approximation above), and
//! the ablation harness comparing model variants on a synthetic cohort.

use crate::deform::{
    compose, invert, jacobian_negative_fraction, warp, DeformationField,
};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::SubjectRecord;
use crate::optim::{fit, FitConfig, FitOutput};
use crate::sphere_grid::{area_weights, AreaWeights};
use serde::{Deserialize, Serialize};
use std::time::Instant;

// --- correlation ------------------------------------------------------------

fn weighted_pearson(a: &Field, b: &Field, weights: &AreaWeights) -> Result<f64> {
    a.ensure_same_shape(b, "correlation inputs")?;
    if a.grid() != weights.grid() {
        return Err(Error::ShapeMismatch("correlation vs weights grid".into()));
    }
    let wsum = weights.total() * a.channels() as f64;
    let n = weights.values().len();
    let mut mean_a = 0.0;
    let mut mean_b = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for k in 0..n {
            mean_a += weights.values()[k] * pa[k];
            mean_b += weights.values()[k] * pb[k];
        }
    }
    mean_a /= wsum;
    mean_b /= wsum;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for k in 0..n {
            let w = weights.values()[k];
            let da = pa[k] - mean_a;
            let db = pb[k] - mean_b;
            var_a += w * da * da;
            var_b += w * db * db;
            cov += w * da * db;
        }
    }
    if var_a < 1e-24 || var_b < 1e-24 {
        return Err(Error::ZeroVariance);
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Area-weighted Pearson correlation of each image with the group mean over
/// all images, channels pooled.
pub fn corr_to_group_mean(images: &[Field], weights: &AreaWeights) -> Result<Vec<f64>> {
    if images.len() < 2 {
        return Err(Error::TooFewSamples {
            got: images.len(),
            need: 2,
        });
    }
    let mut mean = Field::zeros(images[0].grid(), images[0].channels());
    for img in images {
        img.ensure_same_shape(&mean, "group images")?;
        mean.add_scaled(img, 1.0 / images.len() as f64);
    }
    images
        .iter()
        .map(|img| weighted_pearson(img, &mean, weights))
        .collect()
}

/// Correlation series aligned by subject id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSeries {
    pub ids: Vec<String>,
    pub values: Vec<f64>,
}

/// after - before, per subject; ids must align.
pub fn improvement(before: &EvalSeries, after: &EvalSeries) -> Result<Vec<f64>> {
    if before.ids.len() != after.ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "improvement: {} vs {} subjects",
            before.ids.len(),
            after.ids.len()
        )));
    }
    for (i, (l, r)) in before.ids.iter().zip(&after.ids).enumerate() {
        if l != r {
            return Err(Error::IdMismatch {
                index: i,
                left: l.clone(),
                right: r.clone(),
            });
        }
    }
    Ok(after
        .values
        .iter()
        .zip(&before.values)
        .map(|(a, b)| a - b)
        .collect())
}

// --- Wilcoxon signed-rank ------------------------------------------------------

/// Largest n for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

fn midranks(sorted_abs: &[f64]) -> Vec<f64> {
    let n = sorted_abs.len();
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted_abs[j + 1] == sorted_abs[i] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = rank;
        }
        i = j + 1;
    }
    ranks
}

/// P(W+ >= observed) by enumerating all sign assignments through a count
/// table over doubled (integer) ranks. Exact, including mid-rank ties.
fn exact_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0.0f64; total + 1];
    ways[0] = 1.0;
    let mut reach = 0usize;
    for &r in &doubled {
        reach += r;
        for s in (r..=reach).rev() {
            ways[s] += ways[s - r];
        }
    }
    let threshold = (2.0 * w_plus).round() as usize;
    let favorable: f64 = ways[threshold.min(total)..].iter().sum();
    favorable / 2.0f64.powi(ranks.len() as i32)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc_approx(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function via the Abramowitz-Stegun rational fit
/// (absolute error below 1.5e-7).
fn erfc_approx(x: f64) -> f64 {
    let ax = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * ax);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erfc_pos = poly * (-ax * ax).exp();
    if x >= 0.0 {
        erfc_pos
    } else {
        2.0 - erfc_pos
    }
}

/// One-tailed (greater) Wilcoxon signed-rank test. Zero deltas are excluded,
/// ties receive mid-ranks. Returns (W+ statistic, p-value).
pub fn wilcoxon_one_tailed(deltas: &[f64]) -> Result<(f64, f64)> {
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.len() < 5 {
        return Err(Error::TooFewSamples {
            got: nonzero.len(),
            need: 5,
        });
    }
    let n = nonzero.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        nonzero[a]
            .abs()
            .partial_cmp(&nonzero[b].abs())
            .expect("finite deltas")
    });
    let sorted_abs: Vec<f64> = order.iter().map(|&i| nonzero[i].abs()).collect();
    let ranks_sorted = midranks(&sorted_abs);
    let mut w_plus = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if nonzero[i] > 0.0 {
            w_plus += ranks_sorted[pos];
        }
    }

    let p = if n <= WILCOXON_EXACT_MAX_N {
        exact_upper_tail(&ranks_sorted, w_plus)
    } else {
        // normal approximation with tie correction and continuity correction
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted_abs[j + 1] == sorted_abs[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean - 0.5) / var.sqrt();
        1.0 - normal_cdf(z)
    };
    Ok((w_plus, p.clamp(f64::MIN_POSITIVE, 1.0)))
}

/// Normal-approximation p-value regardless of n; used to cross-check the
/// exact enumeration.
pub fn wilcoxon_normal_p(deltas: &[f64]) -> Result<f64> {
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.len() < 5 {
        return Err(Error::TooFewSamples {
            got: nonzero.len(),
            need: 5,
        });
    }
    let n = nonzero.len();
    let mut abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ranks = midranks(&abs);
    let mut w_plus = 0.0;
    for d in &nonzero {
        if *d > 0.0 {
            let pos = abs.partition_point(|x| *x < d.abs());
            w_plus += ranks[pos];
        }
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[j + 1] == abs[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    Ok((1.0 - normal_cdf(z)).clamp(f64::MIN_POSITIVE, 1.0))
}

// --- registration evaluation ------------------------------------------------

/// Per-subject composite fields mapping data into atlas space; the common
/// currency between our fits and externally produced deformations.
#[derive(Debug, Clone)]
pub struct SubjectFields {
    pub id: String,
    pub to_atlas_geom: DeformationField,
    pub to_atlas_func: Option<DeformationField>,
}

/// Inverse composite fields from fitted velocities.
pub fn fields_from_fit(subjects: &[SubjectRecord], steps: u32) -> Result<Vec<SubjectFields>> {
    subjects
        .iter()
        .map(|s| {
            let j_inv = invert(&s.v_j, steps)?;
            let g_inv = invert(&s.v_g, steps)?;
            let f_inv = invert(&s.v_f, steps)?;
            Ok(SubjectFields {
                id: s.id.clone(),
                to_atlas_geom: compose(&j_inv, &g_inv)?,
                to_atlas_func: Some(compose(&j_inv, &f_inv)?),
            })
        })
        .collect()
}

/// Metrics for one modality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityEval {
    pub ids: Vec<String>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub improvement: Vec<f64>,
    /// One-tailed signed-rank test of improvement > 0.
    pub wilcoxon_stat: f64,
    pub p_improvement: f64,
}

/// Registration-quality report for one method on one cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub geom: ModalityEval,
    pub func: Option<ModalityEval>,
    /// Max negative-Jacobian fraction over all supplied fields.
    pub max_neg_jacobian: f64,
    pub runtime_s: f64,
}

/// Group-mean images before and after registration, for dumps.
#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub report: EvalReport,
    pub geom_mean_before: Field,
    pub geom_mean_after: Field,
    pub func_mean_before: Option<Field>,
    pub func_mean_after: Option<Field>,
}

fn mean_of(fields: &[Field]) -> Field {
    let mut out = Field::zeros(fields[0].grid(), fields[0].channels());
    for f in fields {
        out.add_scaled(f, 1.0 / fields.len() as f64);
    }
    out
}

fn modality_eval(
    ids: &[String],
    raw: &[Field],
    warped: &[Field],
    weights: &AreaWeights,
) -> Result<ModalityEval> {
    let before = corr_to_group_mean(raw, weights)?;
    let after = corr_to_group_mean(warped, weights)?;
    let imp: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    let (stat, p) = wilcoxon_one_tailed(&imp)?;
    Ok(ModalityEval {
        ids: ids.to_vec(),
        before,
        after,
        improvement: imp,
        wilcoxon_stat: stat,
        p_improvement: p,
    })
}

/// Evaluates registration quality: correlation of each subject's data to the
/// group mean before (rigid-only) and after applying the supplied fields.
pub fn evaluate_registration(
    subjects: &[SubjectRecord],
    fields: &[SubjectFields],
    weights: &AreaWeights,
) -> Result<EvalArtifacts> {
    let start = Instant::now();
    if subjects.len() != fields.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} subjects vs {} field sets",
            subjects.len(),
            fields.len()
        )));
    }
    for (i, (s, f)) in subjects.iter().zip(fields).enumerate() {
        if s.id != f.id {
            return Err(Error::IdMismatch {
                index: i,
                left: s.id.clone(),
                right: f.id.clone(),
            });
        }
    }

    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let raw_geom: Vec<Field> = subjects.iter().map(|s| s.geom.clone()).collect();
    let warped_geom: Vec<Field> = subjects
        .iter()
        .zip(fields)
        .map(|(s, f)| warp(&s.geom, &f.to_atlas_geom))
        .collect::<Result<Vec<_>>>()?;
    let geom = modality_eval(&ids, &raw_geom, &warped_geom, weights)?;

    let mut func_ids = Vec::new();
    let mut raw_func = Vec::new();
    let mut warped_func = Vec::new();
    for (s, f) in subjects.iter().zip(fields) {
        if let (Some(img), Some(to_atlas)) = (&s.func, &f.to_atlas_func) {
            func_ids.push(s.id.clone());
            raw_func.push(img.clone());
            warped_func.push(warp(img, to_atlas)?);
        }
    }
    let func = if func_ids.len() >= 5 {
        Some(modality_eval(&func_ids, &raw_func, &warped_func, weights)?)
    } else {
        None
    };

    let mut max_neg = 0.0f64;
    for f in fields {
        max_neg = max_neg.max(jacobian_negative_fraction(&f.to_atlas_geom));
        if let Some(ff) = &f.to_atlas_func {
            max_neg = max_neg.max(jacobian_negative_fraction(ff));
        }
    }

    let func_mean_before = (!raw_func.is_empty()).then(|| mean_of(&raw_func));
    let func_mean_after = (!warped_func.is_empty()).then(|| mean_of(&warped_func));
    Ok(EvalArtifacts {
        report: EvalReport {
            geom,
            func,
            max_neg_jacobian: max_neg,
            runtime_s: start.elapsed().as_secs_f64(),
        },
        geom_mean_before: mean_of(&raw_geom),
        geom_mean_after: mean_of(&warped_geom),
        func_mean_before,
        func_mean_after,
    })
}

// --- ablation ---------------------------------------------------------------

/// Model variants compared by [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Joint plus per-modality deformations, learned atlas.
    Full,
    /// One shared deformation per subject, learned atlas.
    SharedFieldOnly,
    /// Joint plus per-modality deformations, atlas frozen at the group mean.
    FixedAverageAtlas,
}

impl Variant {
    pub fn all() -> [Variant; 3] {
        [
            Variant::Full,
            Variant::SharedFieldOnly,
            Variant::FixedAverageAtlas,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SharedFieldOnly => "shared_field_only",
            Variant::FixedAverageAtlas => "fixed_average_atlas",
        }
    }

    /// Applies the variant's switches to a base configuration.
    pub fn configure(&self, base: &FitConfig) -> FitConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::SharedFieldOnly => cfg.modality_fields = false,
            Variant::FixedAverageAtlas => {
                cfg.learn_atlas = false;
                cfg.atlas_init = crate::optim::AtlasInit::GroupMean;
            }
        }
        cfg
    }
}

/// One variant's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantEval {
    pub variant: Variant,
    pub report: EvalReport,
    pub fit_final_loss: f64,
    pub fit_wall_s: f64,
}

/// Paired comparison of two variants on one modality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub lhs: Variant,
    pub rhs: Variant,
    pub modality: String,
    /// Per-subject improvement difference, lhs minus rhs.
    pub deltas: Vec<f64>,
    pub median_delta: f64,
    pub wilcoxon_stat: f64,
    /// One-tailed p for "lhs improves more than rhs".
    pub p_value: f64,
}

/// Comparative ablation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantEval>,
    /// Functional improvement, full versus shared-field-only.
    pub func_full_vs_shared: PairedComparison,
    /// Geometric improvement, full (learned atlas) versus fixed group mean.
    pub geom_full_vs_fixed_atlas: PairedComparison,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn paired(
    lhs: &VariantEval,
    rhs: &VariantEval,
    modality: &str,
) -> Result<PairedComparison> {
    let (a, b) = match modality {
        "func" => (
            lhs.report.func.as_ref().ok_or(Error::EmptyBatch)?,
            rhs.report.func.as_ref().ok_or(Error::EmptyBatch)?,
        ),
        _ => (&lhs.report.geom, &rhs.report.geom),
    };
    let a_series = EvalSeries {
        ids: a.ids.clone(),
        values: a.improvement.clone(),
    };
    let b_series = EvalSeries {
        ids: b.ids.clone(),
        values: b.improvement.clone(),
    };
    let deltas = improvement(&b_series, &a_series)?;
    let (stat, p) = wilcoxon_one_tailed(&deltas)?;
    Ok(PairedComparison {
        lhs: lhs.variant,
        rhs: rhs.variant,
        modality: modality.to_string(),
        median_delta: median(&deltas),
        deltas,
        wilcoxon_stat: stat,
        p_value: p,
    })
}

/// Fits every variant on the same cohort with a shared base configuration
/// and seed, evaluates each, and runs the paired comparisons.
pub fn ablate(subjects: &[SubjectRecord], base_cfg: &FitConfig) -> Result<AblationReport> {
    let grid = subjects
        .first()
        .ok_or(Error::EmptyBatch)?
        .grid();
    let weights = area_weights(grid);
    let mut variants = Vec::new();
    for variant in Variant::all() {
        let cfg = variant.configure(base_cfg);
        let FitOutput {
            subjects: fitted,
            report,
            ..
        } = fit(subjects.to_vec(), &cfg)?;
        let fields = fields_from_fit(&fitted, cfg.hp.steps)?;
        // evaluate on the same standardized observations the fit consumed
        let arts = evaluate_registration(&fitted, &fields, &weights)?;
        variants.push(VariantEval {
            variant,
            report: arts.report,
            fit_final_loss: report.final_total,
            fit_wall_s: report.wall_time_s,
        });
    }
    let func_full_vs_shared = paired(&variants[0], &variants[1], "func")?;
    let geom_full_vs_fixed_atlas = paired(&variants[0], &variants[2], "geom")?;
    Ok(AblationReport {
        variants,
        func_full_vs_shared,
        geom_full_vs_fixed_atlas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere_grid::make_grid;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_correlate_perfectly() {
        let grid = make_grid(8, 16).unwrap();
        let w = area_weights(grid);
        let img = Field::from_fn(grid, 1, |_, i, j| (i as f64 - j as f64).sin());
        let corrs = corr_to_group_mean(&[img.clone(), img.clone(), img], &w).unwrap();
        for c in corrs {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_images_give_zero_variance_error() {
        let grid = make_grid(8, 16).unwrap();
        let w = area_weights(grid);
        let img = Field::from_fn(grid, 1, |_, i, j| (i * 16 + j) as f64);
        let neg = img.negated();
        assert!(matches!(
            corr_to_group_mean(&[img, neg], &w),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn correlation_matches_loop_oracle() {
        let grid = make_grid(8, 16).unwrap();
        let w = area_weights(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images: Vec<Field> = (0..3)
            .map(|_| Field::from_fn(grid, 2, |_, _, _| rng.random_range(-1.0..1.0)))
            .collect();
        let got = corr_to_group_mean(&images, &w).unwrap();

        // independent brute-force weighted covariance
        let n_img = images.len() as f64;
        for (idx, img) in images.iter().enumerate() {
            let mut pairs: Vec<(f64, f64, f64)> = Vec::new();
            for c in 0..2 {
                for i in 0..8 {
                    for j in 0..16 {
                        let m: f64 =
                            images.iter().map(|x| x.at(c, i, j)).sum::<f64>() / n_img;
                        pairs.push((grid.theta(i).sin(), img.at(c, i, j), m));
                    }
                }
            }
            let wsum: f64 = pairs.iter().map(|p| p.0).sum();
            let ma: f64 = pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / wsum;
            let mb: f64 = pairs.iter().map(|p| p.0 * p.2).sum::<f64>() / wsum;
            let cov: f64 = pairs.iter().map(|p| p.0 * (p.1 - ma) * (p.2 - mb)).sum();
            let va: f64 = pairs.iter().map(|p| p.0 * (p.1 - ma) * (p.1 - ma)).sum();
            let vb: f64 = pairs.iter().map(|p| p.0 * (p.2 - mb) * (p.2 - mb)).sum();
            let expect = cov / (va * vb).sqrt();
            assert!(
                (got[idx] - expect).abs() < 1e-12,
                "subject {idx}: {} vs {}",
                got[idx],
                expect
            );
        }
    }

    #[test]
    fn correlation_invariant_under_positive_affine_maps() {
        let grid = make_grid(8, 16).unwrap();
        let w = area_weights(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Field::from_fn(grid, 1, |_, _, _| rng.random_range(-1.0..1.0));
        let b = Field::from_fn(grid, 1, |_, _, _| rng.random_range(-1.0..1.0));
        let base = weighted_pearson(&a, &b, &w).unwrap();
        let mut scaled = a.scaled(3.7);
        for v in scaled.data_mut() {
            *v += 11.0;
        }
        let moved = weighted_pearson(&scaled, &b, &w).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn improvement_basics() {
        let before = EvalSeries {
            ids: vec!["a".into(), "b".into()],
            values: vec![0.4, 0.5],
        };
        let same = improvement(&before, &before).unwrap();
        assert_eq!(same, vec![0.0, 0.0]);

        let after = EvalSeries {
            ids: before.ids.clone(),
            values: vec![0.5, 0.6],
        };
        let imp = improvement(&before, &after).unwrap();
        assert!((imp[0] - 0.1).abs() < 1e-15 && (imp[1] - 0.1).abs() < 1e-15);

        // antisymmetry
        let rev = improvement(&after, &before).unwrap();
        for (x, y) in imp.iter().zip(&rev) {
            assert!((x + y).abs() < 1e-15);
        }

        let shuffled = EvalSeries {
            ids: vec!["b".into(), "a".into()],
            values: vec![0.5, 0.6],
        };
        assert!(matches!(
            improvement(&before, &shuffled),
            Err(Error::IdMismatch { .. })
        ));
    }

    #[test]
    fn wilcoxon_all_positive_n5_is_exact() {
        // brute force over 2^5 sign patterns: only the all-positive pattern
        // reaches W+ = 15, so p = 1/32
        let (stat, p) = wilcoxon_one_tailed(&[0.3, 0.1, 0.7, 0.2, 0.5]).unwrap();
        assert_eq!(stat, 15.0);
        assert!((p - 1.0 / 32.0).abs() < 1e-15, "p = {p}");
    }

    #[test]
    fn wilcoxon_symmetric_deltas_are_insignificant() {
        let (_, p) = wilcoxon_one_tailed(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]).unwrap();
        assert!(p >= 0.5, "p = {p}");
    }

    #[test]
    fn wilcoxon_drops_zeros_and_requires_five() {
        assert!(matches!(
            wilcoxon_one_tailed(&[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]),
            Err(Error::TooFewSamples { got: 4, need: 5 })
        ));
    }

    #[test]
    fn wilcoxon_handles_ties_with_midranks() {
        // |deltas| = {1,1,2,2,3}: midranks 1.5,1.5,3.5,3.5,5
        let (stat, p) = wilcoxon_one_tailed(&[1.0, -1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((stat - (1.5 + 3.5 + 3.5 + 5.0)).abs() < 1e-12);
        assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn exact_and_normal_agree_at_n20() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let deltas: Vec<f64> = (0..20)
                .map(|_| rng.random_range(-1.0..1.0) + 0.2)
                .collect();
            let (_, exact) = wilcoxon_one_tailed(&deltas).unwrap();
            let approx = wilcoxon_normal_p(&deltas).unwrap();
            assert!(
                (exact - approx).abs() <= 0.02,
                "exact {exact} vs normal {approx}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn exact_vs_normal_property(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let deltas: Vec<f64> = (0..20).map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if v == 0.0 { 0.1 } else { v }
            }).collect();
            let (_, exact) = wilcoxon_one_tailed(&deltas).unwrap();
            let approx = wilcoxon_normal_p(&deltas).unwrap();
            prop_assert!((exact - approx).abs() <= 0.02);
        }
    }

    #[test]
    fn normal_cdf_sanity() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 2e-7);
        assert!(normal_cdf(-8.0) < 1e-14);
    }
}
