//! Operator-facing command line: cohort synthesis, fitting, registration,
//! evaluation, the variant ablation, and the two numerical self-checks.
//!
//! Every command writes its outputs into a run directory together with the
//! resolved configuration, so experiments are self-describing and
//! reproducible. Identical configurations and seeds produce identical
//! tensors regardless of thread count.

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use josa_core::deform::{DeformationField, VelocityField};
use josa_core::error::Error;
use josa_core::model::Atlas;
use josa_core::optim::{
    finite_difference_check, fit, register, FitConfig, RegisterConfig, RegisterOutput,
};
use josa_core::sphere_grid::{area_weights, uniform_weights};
use josa_core::synth::{generate_cohort, load_cohort_records, write_cohort, SynthConfig};
use josa_core::model::verify_marginal_likelihood;
use josa_core::{eval, io};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// One config file drives every command; each section has full defaults and
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    synth: SynthConfig,
    fit: FitConfig,
    register: RegisterConfig,
}

#[derive(Parser)]
#[command(
    name = "josa",
    version,
    about = "Joint diffeomorphic registration and atlas estimation on the sphere"
)]
struct Cli {
    /// Worker threads (fallback: JOSA_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort with known ground truth
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the synth seed from the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the atlas and per-subject deformations to a cohort
    Fit {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register one subject's geometry to a fitted atlas (functional data is
    /// never read)
    Register {
        /// Subject container; only its "geom" tensor is used
        #[arg(long)]
        subject: PathBuf,
        /// Atlas container with "geom" and "func" tensors
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate registration quality of a fit run or of externally produced
    /// deformation fields
    Eval {
        #[arg(long)]
        cohort: PathBuf,
        /// Run directory produced by `fit`
        #[arg(long, conflicts_with = "external_fields")]
        run: Option<PathBuf>,
        /// Directory of per-subject containers with "u_geom" (and optional
        /// "u_func") subject-to-atlas displacement tensors
        #[arg(long)]
        external_fields: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use unit weights instead of the spherical area weights
        #[arg(long)]
        unweighted: bool,
    },
    /// Fit and compare the model variants on one cohort
    Ablate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences
    CheckGrad {
        /// Grid as HxW
        #[arg(long, default_value = "8x16")]
        grid: String,
        #[arg(long, default_value_t = 16)]
        seed: u64,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Monte-Carlo check that the composite observation variance doubles
    CheckLikelihood {
        #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [0.5, 1.0])]
        sigma: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Maximum tolerated relative error of the empirical variance
        #[arg(long, default_value_t = 0.05)]
        tol: f64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::GridTooSmall { .. } => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        Error::DegenerateChannel { .. }
        | Error::Unidentifiable(_)
        | Error::EmptyBatch
        | Error::ZeroVariance
        | Error::TooFewSamples { .. }
        | Error::IdMismatch { .. }
        | Error::ShapeMismatch(_) => 5,
        Error::CorruptMagic
        | Error::Truncated(_)
        | Error::UnsupportedVersion(_)
        | Error::UnsupportedDtype(_)
        | Error::Corrupt(_)
        | Error::MissingTensor(_) => 6,
        Error::Io(_) => 1,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => {
            require_path(p)?;
            io::load_json(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn require_path(p: &Path) -> Result<(), Error> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("path not found: {}", p.display()),
        )))
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    io::save_json(dir.join("config.json"), cfg)
}

fn load_atlas(path: &Path) -> Result<Atlas, Error> {
    let tensors = io::read_container(path)?;
    Atlas::new(
        io::find_tensor(&tensors, "geom")?.to_field()?,
        io::find_tensor(&tensors, "func")?.to_field()?,
    )
}

fn save_atlas(path: &Path, atlas: &Atlas) -> Result<(), Error> {
    io::write_container(
        path,
        &[
            io::Tensor::from_field("geom", &atlas.geom),
            io::Tensor::from_field("func", &atlas.func),
        ],
    )
}

fn run_synth(out: &Path, config: &Option<PathBuf>, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    let cohort = generate_cohort(&cfg.synth)?;
    write_cohort(out, &cohort)?;
    echo_config(out, &cfg)?;
    println!(
        "wrote cohort of {} subjects ({}x{}) to {}",
        cohort.subjects.len(),
        cfg.synth.height,
        cfg.synth.width,
        out.display()
    );
    Ok(())
}

fn run_fit(cohort: &Path, out: &Path, config: &Option<PathBuf>) -> Result<(), Error> {
    require_path(cohort)?;
    let cfg = load_config(config)?;
    let records = load_cohort_records(cohort)?;
    let output = fit(records, &cfg.fit)?;
    std::fs::create_dir_all(out.join("fields"))?;
    echo_config(out, &cfg)?;
    io::save_json(out.join("report.json"), &output.report)?;
    save_atlas(&out.join("atlas.josa"), &output.atlas)?;
    for s in &output.subjects {
        io::write_container(
            out.join("fields").join(format!("{}.josa", s.id)),
            &[
                io::Tensor::from_field("v_j", s.v_j.field()),
                io::Tensor::from_field("v_g", s.v_g.field()),
                io::Tensor::from_field("v_f", s.v_f.field()),
            ],
        )?;
    }
    println!(
        "fit {} subjects for {} epochs: loss {:.3e} -> {:.3e} ({:.1}s)",
        output.report.n_subjects,
        output.report.epochs.len(),
        output.report.epochs.first().map(|e| e.total).unwrap_or(f64::NAN),
        output.report.final_total,
        output.report.wall_time_s
    );
    Ok(())
}

fn run_register(
    subject: &Path,
    atlas_path: &Path,
    out: &Path,
    config: &Option<PathBuf>,
) -> Result<(), Error> {
    require_path(subject)?;
    require_path(atlas_path)?;
    let cfg = load_config(config)?;
    let tensors = io::read_container(subject)?;
    let geom = io::find_tensor(&tensors, "geom")?.to_field()?;
    let atlas = load_atlas(atlas_path)?;
    let result: RegisterOutput = register(&geom, &atlas, &cfg.register)?;
    std::fs::create_dir_all(out)?;
    echo_config(out, &cfg)?;
    io::write_container(
        out.join("fields.josa"),
        &[
            io::Tensor::from_field("v_j", result.v_j.field()),
            io::Tensor::from_field("v_g", result.v_g.field()),
            io::Tensor::from_field("v_f", result.v_f.field()),
            io::Tensor::from_field("u_j", result.phi_j.displacement()),
            io::Tensor::from_field("u_g", result.phi_g.displacement()),
            io::Tensor::from_field("u_f", result.phi_f.displacement()),
        ],
    )?;
    io::save_json(out.join("diagnostics.json"), &result.diagnostics)?;
    println!(
        "registered: geometric data loss {:.4e} -> {:.4e}, max neg-jacobian {:.2e}",
        result.diagnostics.geom_data_initial,
        result.diagnostics.geom_data_final,
        result
            .diagnostics
            .neg_jacobian
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
    );
    Ok(())
}

fn load_run_fields(
    run: &Path,
    records: &mut [josa_core::model::SubjectRecord],
) -> Result<(Vec<eval::SubjectFields>, RunConfig), Error> {
    require_path(run)?;
    let cfg: RunConfig = io::load_json(run.join("config.json"))?;
    if cfg.fit.standardize_inputs {
        for r in records.iter_mut() {
            r.geom = josa_core::model::standardize(&r.geom)?;
            if let Some(f) = &r.func {
                r.func = Some(josa_core::model::standardize(f)?);
            }
        }
    }
    for r in records.iter_mut() {
        let tensors = io::read_container(run.join("fields").join(format!("{}.josa", r.id)))?;
        r.v_j = VelocityField::from_field(io::find_tensor(&tensors, "v_j")?.to_field()?)?;
        r.v_g = VelocityField::from_field(io::find_tensor(&tensors, "v_g")?.to_field()?)?;
        r.v_f = VelocityField::from_field(io::find_tensor(&tensors, "v_f")?.to_field()?)?;
    }
    let fields = eval::fields_from_fit(records, cfg.fit.hp.steps)?;
    Ok((fields, cfg))
}

fn load_external_fields(
    dir: &Path,
    records: &[josa_core::model::SubjectRecord],
) -> Result<Vec<eval::SubjectFields>, Error> {
    require_path(dir)?;
    records
        .iter()
        .map(|r| {
            let tensors = io::read_container(dir.join(format!("{}.josa", r.id)))?;
            let to_atlas_geom =
                DeformationField::from_displacement(io::find_tensor(&tensors, "u_geom")?.to_field()?)?;
            let to_atlas_func = match io::find_tensor(&tensors, "u_func") {
                Ok(t) => Some(DeformationField::from_displacement(t.to_field()?)?),
                Err(Error::MissingTensor(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(eval::SubjectFields {
                id: r.id.clone(),
                to_atlas_geom,
                to_atlas_func,
            })
        })
        .collect()
}

fn write_eval_outputs(out: &Path, arts: &eval::EvalArtifacts) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    io::save_json(out.join("report.json"), &arts.report)?;

    let geom = &arts.report.geom;
    let func = arts.report.func.as_ref();
    let mut rows = Vec::new();
    for (k, id) in geom.ids.iter().enumerate() {
        let (fb, fa, fi) = match func {
            Some(f) => match f.ids.iter().position(|x| x == id) {
                Some(p) => (
                    format!("{:.6}", f.before[p]),
                    format!("{:.6}", f.after[p]),
                    format!("{:.6}", f.improvement[p]),
                ),
                None => (String::new(), String::new(), String::new()),
            },
            None => (String::new(), String::new(), String::new()),
        };
        rows.push(vec![
            id.clone(),
            format!("{:.6}", geom.before[k]),
            format!("{:.6}", geom.after[k]),
            format!("{:.6}", geom.improvement[k]),
            fb,
            fa,
            fi,
        ]);
    }
    io::write_csv(
        out.join("subjects.csv"),
        &[
            "id",
            "geom_before",
            "geom_after",
            "geom_improvement",
            "func_before",
            "func_after",
            "func_improvement",
        ],
        &rows,
    )?;

    let mut means = vec![
        io::Tensor::from_field("geom_mean_before", &arts.geom_mean_before),
        io::Tensor::from_field("geom_mean_after", &arts.geom_mean_after),
    ];
    io::write_pgm16(out.join("geom_mean_before.pgm"), &arts.geom_mean_before, 0)?;
    io::write_pgm16(out.join("geom_mean_after.pgm"), &arts.geom_mean_after, 0)?;
    if let (Some(b), Some(a)) = (&arts.func_mean_before, &arts.func_mean_after) {
        io::write_pgm16(out.join("func_mean_before.pgm"), b, 0)?;
        io::write_pgm16(out.join("func_mean_after.pgm"), a, 0)?;
        means.push(io::Tensor::from_field("func_mean_before", b));
        means.push(io::Tensor::from_field("func_mean_after", a));
    }
    io::write_container(out.join("means.josa"), &means)?;
    Ok(())
}

fn run_eval(
    cohort: &Path,
    run: &Option<PathBuf>,
    external: &Option<PathBuf>,
    out: &Path,
    unweighted: bool,
) -> Result<(), Error> {
    require_path(cohort)?;
    let mut records = load_cohort_records(cohort)?;
    let fields = match (run, external) {
        (Some(run), None) => load_run_fields(run, &mut records)?.0,
        (None, Some(dir)) => load_external_fields(dir, &records)?,
        _ => {
            return Err(Error::Config(
                "eval needs exactly one of --run or --external-fields".into(),
            ))
        }
    };
    let grid = records[0].grid();
    let weights = if unweighted {
        uniform_weights(grid)
    } else {
        area_weights(grid)
    };
    let arts = eval::evaluate_registration(&records, &fields, &weights)?;
    write_eval_outputs(out, &arts)?;
    println!(
        "geom improvement p = {:.3e}; func improvement p = {}",
        arts.report.geom.p_improvement,
        arts.report
            .func
            .as_ref()
            .map(|f| format!("{:.3e}", f.p_improvement))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn run_ablate(cohort: &Path, out: &Path, config: &Option<PathBuf>) -> Result<(), Error> {
    require_path(cohort)?;
    let cfg = load_config(config)?;
    let records = load_cohort_records(cohort)?;
    let report = eval::ablate(&records, &cfg.fit)?;
    std::fs::create_dir_all(out)?;
    echo_config(out, &cfg)?;
    io::save_json(out.join("ablation.json"), &report)?;

    let mut rows = Vec::new();
    for v in &report.variants {
        let func = v.report.func.as_ref();
        rows.push(vec![
            v.variant.name().to_string(),
            format!("{:.6}", median(&v.report.geom.improvement)),
            func.map(|f| format!("{:.6}", median(&f.improvement)))
                .unwrap_or_default(),
            format!("{:.3e}", v.report.max_neg_jacobian),
            format!("{:.4e}", v.fit_final_loss),
        ]);
    }
    io::write_csv(
        out.join("variants.csv"),
        &[
            "variant",
            "median_geom_improvement",
            "median_func_improvement",
            "max_neg_jacobian",
            "final_loss",
        ],
        &rows,
    )?;
    println!(
        "func full vs shared: median delta {:+.4}, p = {:.4}",
        report.func_full_vs_shared.median_delta, report.func_full_vs_shared.p_value
    );
    println!(
        "geom learned vs fixed atlas: median delta {:+.4}, p = {:.4}",
        report.geom_full_vs_fixed_atlas.median_delta, report.geom_full_vs_fixed_atlas.p_value
    );
    Ok(())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn run_check_grad(grid: &str, seed: u64, step: f64, tol: f64) -> Result<bool, Error> {
    let (h, w) = grid
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::Config(format!("bad --grid {grid:?}, expected HxW")))?;
    let report = finite_difference_check(h, w, seed, step)?;
    for (label, err) in &report.per_class_max {
        println!("  {label:<18} max rel error {err:.3e}");
    }
    println!(
        "checked {} parameters on {}x{}: max relative error {:.3e} at {}",
        report.n_params, report.grid_height, report.grid_width, report.max_rel_error, report.worst_param
    );
    Ok(report.max_rel_error <= tol)
}

fn run_check_likelihood(sigmas: &[f64], trials: usize, seed: u64, tol: f64) -> bool {
    let mut ok = true;
    for (k, &sigma) in sigmas.iter().enumerate() {
        let rep = verify_marginal_likelihood(sigma, trials, seed + k as u64);
        println!(
            "sigma {:.3}: empirical variance {:.4} vs expected {:.4} (rel error {:.3e})",
            sigma, rep.empirical_variance, rep.expected_variance, rep.rel_error
        );
        ok &= rep.rel_error <= tol;
    }
    ok
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Cmd::Synth { out, config, seed } => {
            run_synth(out, config, *seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Fit { cohort, out, config } => {
            run_fit(cohort, out, config)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Register {
            subject,
            atlas,
            out,
            config,
        } => {
            run_register(subject, atlas, out, config)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            cohort,
            run,
            external_fields,
            out,
            unweighted,
        } => {
            run_eval(cohort, run, external_fields, out, *unweighted)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ablate { cohort, out, config } => {
            run_ablate(cohort, out, config)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::CheckGrad {
            grid,
            seed,
            step,
            tol,
        } => {
            if run_check_grad(grid, *seed, *step, *tol)? {
                println!("gradient check passed (tolerance {tol:.1e})");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradient check FAILED (tolerance {tol:.1e})");
                Ok(ExitCode::from(4))
            }
        }
        Cmd::CheckLikelihood {
            sigma,
            trials,
            seed,
            tol,
        } => {
            if run_check_likelihood(sigma, *trials, *seed, *tol) {
                println!("likelihood check passed (tolerance {tol:.1e})");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("likelihood check FAILED (tolerance {tol:.1e})");
                Ok(ExitCode::from(4))
            }
        }
    }
}

fn config_help() -> String {
    format!(
        "CONFIG FILE (JSON, pass with --config; unknown keys are rejected).\n\
         Every key with its default:\n{}",
        serde_json::to_string_pretty(&RunConfig::default()).expect("defaults serialize")
    )
}

fn main() -> ExitCode {
    let help = config_help();
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("JOSA_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }

    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
