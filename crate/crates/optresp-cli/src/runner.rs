//! Experiment execution: assembles the operator, computes the requested
//! quantity, and writes machine-readable outputs.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use optresp::discretization::{
    assemble_transfer_matrix, discrete_inner_product, fmt_float, AssemblyMetadata, DensityVector,
    Grid, TransferMatrix,
};
use optresp::dynamics::MapModel;
use optresp::optimal::{
    certify_kernel_optimality, certify_map_optimality, expectation_kernel_gradient,
    expectation_map_gradient, optimal_kernel_for_expectation, optimal_kernel_for_mixing,
    optimal_map_for_expectation, optimal_map_for_mixing, random_feasible_kernel,
    random_feasible_map, KernelFeasibility, MapFeasibility,
};
use optresp::response::{
    build_e_field, expectation_derivative, mixing_rate_derivative, verify_density_response_kernel,
    verify_density_response_map, verify_eigenvalue_response_kernel, verify_eigenvalue_response_map,
    KernelPerturbation, MapPerturbation, MapSensitivity,
};
use optresp::spectral::{invariant_density, mixing_check, subdominant_from_set, SpectralSet};

use crate::config::{Problem, ValidatedConfig};

/// Failure classes mapped to process exit codes.
pub enum RunFailure {
    /// Exit 3: a numeric or spectral computation failed.
    Numeric(optresp::Error),
    /// Exit 4: a verification check failed.
    Verification(String),
}

impl From<optresp::Error> for RunFailure {
    fn from(e: optresp::Error) -> Self {
        RunFailure::Numeric(e)
    }
}

pub type RunResult<T> = std::result::Result<T, RunFailure>;

pub fn run(cfg: &ValidatedConfig) -> RunResult<i32> {
    let t_start = Instant::now();
    let out_dir = &cfg.raw.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| RunFailure::Numeric(e.into()))?;

    let mut timings: BTreeMap<String, u128> = BTreeMap::new();
    let mut outputs: Vec<String> = Vec::new();
    let mut report = serde_json::Map::new();
    report.insert(
        "config".into(),
        serde_json::to_value(&cfg.raw).expect("config serializes"),
    );

    let grid = Grid::new(cfg.raw.n)?;
    let noise = optresp::dynamics::NoiseModel::bump(cfg.raw.epsilon)?;

    // assembly, with optional binary cache
    let t = Instant::now();
    let (a, cache_hit) = assemble_with_cache(cfg, grid, &noise)?;
    timings.insert("assemble_ms".into(), t.elapsed().as_millis());
    report.insert(
        "assembly".into(),
        json!({
            "raw_colsum_max_dev": a.metadata.raw_colsum_max_dev,
            "clamped_mass_max": a.metadata.clamped_mass_max,
            "cache_hit": cache_hit,
        }),
    );

    // spectrum and invariant density are part of every run
    let t = Instant::now();
    let set = SpectralSet::compute(&a)?;
    timings.insert("eigendecomposition_ms".into(), t.elapsed().as_millis());
    let f0 = invariant_density(&a)?;

    let spectrum_path = out_dir.join("spectrum.csv");
    set.write_csv(&spectrum_path)?;
    outputs.push(file_name(&spectrum_path));
    let density_path = out_dir.join("invariant_density.csv");
    f0.write_csv(&density_path, "invariant density")?;
    outputs.push(file_name(&density_path));

    report.insert(
        "lambda_top".into(),
        json!({"re": set.eigenvalues()[0].re, "im": set.eigenvalues()[0].im}),
    );

    let c = optresp::discretization::project_observable(grid, cfg.observable_fn())?;

    match cfg.problem {
        Problem::InvariantDensity => {}
        Problem::Spectrum => {
            // export the selected subdominant pair when one exists
            if let Ok(pair) = subdominant_from_set(&set, cfg.selector) {
                report.insert(
                    "lambda_selected".into(),
                    json!({"re": pair.lambda.re, "im": pair.lambda.im}),
                );
                let pair_path = out_dir.join("eigenpair.csv");
                pair.write_csv(&pair_path)?;
                outputs.push(file_name(&pair_path));
            }
        }
        Problem::ExpectationKernel => {
            let feas = kernel_feasibility(cfg, &a)?;
            let kdot = optimal_kernel_for_expectation(&a, &f0, &c, &feas)?;
            let objective = expectation_derivative(&a, &f0, &kdot, &c)?;
            report.insert("objective_value".into(), json!(objective));
            write_kernel_outputs(out_dir, cfg, &kdot, &mut outputs)?;
        }
        Problem::MixingKernel => {
            let pair = subdominant_from_set(&set, cfg.selector)?;
            report.insert(
                "lambda_selected".into(),
                json!({"re": pair.lambda.re, "im": pair.lambda.im}),
            );
            let feas = kernel_feasibility(cfg, &a)?;
            let kdot = optimal_kernel_for_mixing(&pair, &feas)?;
            let objective = mixing_rate_derivative(&pair, &kdot)?;
            report.insert("objective_value".into(), json!(objective));
            write_kernel_outputs(out_dir, cfg, &kdot, &mut outputs)?;
        }
        Problem::ExpectationMap => {
            let sens = MapSensitivity::assemble(grid, &cfg.map, &noise, &cfg.quad)?;
            let feas = MapFeasibility::new(grid, &cfg.map, cfg.raw.interior_margin)?;
            let tdot = optimal_map_for_expectation(&a, &f0, &c, &sens, &feas)?;
            let resp = optresp::response::density_response_map(&a, &f0, &sens, &tdot)?;
            let c_proj = c.project_against(&f0)?;
            let objective = discrete_inner_product(&c_proj, &resp)?;
            report.insert("objective_value".into(), json!(objective));
            write_map_outputs(out_dir, cfg, &tdot, &mut outputs)?;
        }
        Problem::MixingMap => {
            let pair = subdominant_from_set(&set, cfg.selector)?;
            report.insert(
                "lambda_selected".into(),
                json!({"re": pair.lambda.re, "im": pair.lambda.im}),
            );
            let sens = MapSensitivity::assemble(grid, &cfg.map, &noise, &cfg.quad)?;
            let feas = MapFeasibility::new(grid, &cfg.map, cfg.raw.interior_margin)?;
            let tdot = optimal_map_for_mixing(&pair, &sens, &feas)?;
            let ehat = sens.ehat_field(&pair)?;
            let tdot_vec = DensityVector::new(grid, tdot.values.clone())?;
            let objective = discrete_inner_product(&tdot_vec, &ehat)? / pair.lambda.norm_sqr();
            report.insert("objective_value".into(), json!(objective));
            write_map_outputs(out_dir, cfg, &tdot, &mut outputs)?;
        }
        Problem::VerifyResponse => {
            let (checks, all_pass) = verify_suite(cfg, &a, &f0, &set, &c, &noise)?;
            report.insert("verification".into(), checks);
            report.insert("verification_pass".into(), json!(all_pass));
            if !all_pass {
                // still write the report so the failure is inspectable
                finalize_report(cfg, report, outputs, timings, t_start)?;
                return Err(RunFailure::Verification(
                    "one or more verification checks failed; see report.json".into(),
                ));
            }
        }
    }

    finalize_report(cfg, report, outputs, timings, t_start)?;
    Ok(0)
}

fn finalize_report(
    cfg: &ValidatedConfig,
    mut report: serde_json::Map<String, serde_json::Value>,
    outputs: Vec<String>,
    mut timings: BTreeMap<String, u128>,
    t_start: Instant,
) -> RunResult<()> {
    let mut outputs = outputs;
    outputs.push("report.json".into());
    report.insert("outputs".into(), json!(outputs));
    timings.insert("total_ms".into(), t_start.elapsed().as_millis());
    report.insert("timings_ms".into(), json!(timings));
    let path = cfg.raw.output_dir.join("report.json");
    let mut f = std::fs::File::create(&path).map_err(optresp::Error::from)?;
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(report))
        .expect("report serializes");
    f.write_all(text.as_bytes()).map_err(optresp::Error::from)?;
    f.write_all(b"\n").map_err(optresp::Error::from)?;
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap().to_string_lossy().into_owned()
}

fn kernel_feasibility(
    cfg: &ValidatedConfig,
    a: &TransferMatrix,
) -> Result<KernelFeasibility, optresp::Error> {
    let k0 = a.kernel_values();
    if cfg.raw.kernel_threshold > 0.0 {
        KernelFeasibility::new(&k0, cfg.raw.kernel_threshold)
    } else {
        KernelFeasibility::with_default_threshold(&k0)
    }
}

fn write_kernel_outputs(
    out_dir: &Path,
    cfg: &ValidatedConfig,
    kdot: &KernelPerturbation,
    outputs: &mut Vec<String>,
) -> RunResult<()> {
    let path = out_dir.join("perturbation_matrix.csv");
    let label = format!(
        "optimal kernel perturbation map={} epsilon={}",
        cfg.map.description, cfg.raw.epsilon
    );
    kdot.as_kernel_grid().write_csv(&path, &label)?;
    outputs.push(file_name(&path));
    Ok(())
}

fn write_map_outputs(
    out_dir: &Path,
    cfg: &ValidatedConfig,
    tdot: &MapPerturbation,
    outputs: &mut Vec<String>,
) -> RunResult<()> {
    let path = out_dir.join("perturbation.csv");
    let label = format!(
        "optimal map perturbation map={} epsilon={}",
        cfg.map.description, cfg.raw.epsilon
    );
    DensityVector::new(tdot.grid, tdot.values.clone())?.write_csv(&path, &label)?;
    outputs.push(file_name(&path));
    let overlay = out_dir.join("overlay.csv");
    emit_overlay(&cfg.map, tdot, cfg.raw.overlay_scale, &overlay)?;
    outputs.push(file_name(&overlay));
    Ok(())
}

/// Three-column CSV (x, T0(x), T0(x) + scale * Tdot(x)) at cell centers.
pub fn emit_overlay(
    map: &MapModel,
    tdot: &MapPerturbation,
    scale: f64,
    path: &Path,
) -> Result<(), optresp::Error> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "# map overlay n={} scale={} centers=(i+1/2)/n",
        tdot.grid.n(),
        scale
    )?;
    writeln!(w, "x,map,perturbed")?;
    for i in 0..tdot.grid.n() {
        let x = tdot.grid.center(i);
        let t0 = map.eval(x);
        writeln!(
            w,
            "{},{},{}",
            x,
            fmt_float(t0),
            fmt_float(t0 + scale * tdot.values[i])
        )?;
    }
    Ok(())
}

fn assemble_with_cache(
    cfg: &ValidatedConfig,
    grid: Grid,
    noise: &optresp::dynamics::NoiseModel,
) -> Result<(TransferMatrix, bool), optresp::Error> {
    if !cfg.raw.use_cache {
        return Ok((
            assemble_transfer_matrix(grid, &cfg.map, noise, &cfg.quad)?,
            false,
        ));
    }
    let expected = AssemblyMetadata {
        map: cfg.map.description.clone(),
        parameters: cfg.map.parameters.clone(),
        epsilon: noise.epsilon,
        quad_order: cfg.quad.order,
        raw_colsum_max_dev: 0.0,
        clamped_mass_max: 0.0,
    };
    let path = cache_path(cfg, grid, &expected);
    if path.exists() {
        if let Ok(a) = TransferMatrix::read_cache(&path, &expected) {
            if a.grid == grid {
                return Ok((a, true));
            }
        }
    }
    let a = assemble_transfer_matrix(grid, &cfg.map, noise, &cfg.quad)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    a.write_cache(&path)?;
    Ok((a, false))
}

fn cache_path(cfg: &ValidatedConfig, grid: Grid, meta: &AssemblyMetadata) -> PathBuf {
    let mut h = DefaultHasher::new();
    meta.map.hash(&mut h);
    for (k, v) in &meta.parameters {
        k.hash(&mut h);
        v.to_bits().hash(&mut h);
    }
    meta.epsilon.to_bits().hash(&mut h);
    meta.quad_order.hash(&mut h);
    grid.n().hash(&mut h);
    cfg.raw
        .output_dir
        .join("cache")
        .join(format!("ulam-{:016x}.bin", h.finish()))
}

// ---------------------------------------------------------------------------
// Verification suite.
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Check {
    name: String,
    pass: bool,
    detail: serde_json::Value,
}

fn verify_suite(
    cfg: &ValidatedConfig,
    a: &TransferMatrix,
    f0: &DensityVector,
    set: &SpectralSet,
    _c: &DensityVector,
    noise: &optresp::dynamics::NoiseModel,
) -> Result<(serde_json::Value, bool), optresp::Error> {
    let grid = a.grid;
    let seed = cfg.raw.seed;
    let mut checks: Vec<Check> = Vec::new();
    let push = |name: &str, pass: bool, detail: serde_json::Value, checks: &mut Vec<Check>| {
        checks.push(Check {
            name: name.into(),
            pass,
            detail,
        });
    };

    let kfeas = kernel_feasibility(cfg, a)?;
    let mfeas = MapFeasibility::new(grid, &cfg.map, cfg.raw.interior_margin)?;
    let sens = MapSensitivity::assemble(grid, &cfg.map, noise, &cfg.quad)?;
    let pair = subdominant_from_set(set, cfg.selector)?;

    let kdot = random_feasible_kernel(&kfeas, seed)?;
    let tdot = random_feasible_map(&mfeas, seed.wrapping_add(1))?;

    // finite-difference convergence of every response formula
    for &delta in &cfg.raw.verification_deltas {
        let r = verify_density_response_kernel(a, f0, &kdot, delta)?;
        push(
            &format!("density-response-kernel@{delta}"),
            r.pass,
            json!({"ratio": r.convergence_ratio, "err": r.error_delta}),
            &mut checks,
        );
        let r =
            verify_density_response_map(a, f0, &sens, &cfg.map, noise, &cfg.quad, &tdot, delta)?;
        push(
            &format!("density-response-map@{delta}"),
            r.pass,
            json!({"ratio": r.convergence_ratio, "err": r.error_delta}),
            &mut checks,
        );
        let r = verify_eigenvalue_response_kernel(a, &pair, &kdot, delta)?;
        push(
            &format!("eigenvalue-response-kernel@{delta}"),
            r.pass,
            json!({"ratio": r.convergence_ratio, "err": r.error_delta}),
            &mut checks,
        );
        let r = verify_eigenvalue_response_map(
            a, &pair, &sens, &cfg.map, noise, &cfg.quad, &tdot, delta,
        )?;
        push(
            &format!("eigenvalue-response-map@{delta}"),
            r.pass,
            json!({"ratio": r.convergence_ratio, "err": r.error_delta}),
            &mut checks,
        );
    }

    // brute-force optimality certification at desk scale
    let cert_n = cfg.raw.n.min(12);
    let (cert_a, cert_f0, cert_pair, cert_sens) = if cert_n == cfg.raw.n {
        (a.clone(), f0.clone(), pair.clone(), sens.clone())
    } else {
        let cgrid = Grid::new(cert_n)?;
        let ca = assemble_transfer_matrix(cgrid, &cfg.map, noise, &cfg.quad)?;
        let cf0 = invariant_density(&ca)?;
        let cset = SpectralSet::compute(&ca)?;
        let cpair = subdominant_from_set(&cset, cfg.selector)?;
        let csens = MapSensitivity::assemble(cgrid, &cfg.map, noise, &cfg.quad)?;
        (ca, cf0, cpair, csens)
    };
    let cgrid = cert_a.grid;
    let ckfeas = kernel_feasibility(cfg, &cert_a)?;
    let cmfeas = MapFeasibility::new(cgrid, &cfg.map, cfg.raw.interior_margin)?;
    let cc = optresp::discretization::project_observable(cgrid, cfg.observable_fn())?;
    let candidates = cfg.raw.verification_candidates;

    {
        let opt = optimal_kernel_for_expectation(&cert_a, &cert_f0, &cc, &ckfeas)?;
        let grad = expectation_kernel_gradient(&cert_a, &cert_f0, &cc)?;
        let cert = certify_kernel_optimality(&grad, &ckfeas, &opt, candidates, seed)?;
        push(
            "optimality-expectation-kernel",
            cert.strictly_beats_all && cert.kkt_cosine >= 1.0 - 1e-8,
            serde_json::to_value(&cert).unwrap(),
            &mut checks,
        );
    }
    {
        let opt = optimal_kernel_for_mixing(&cert_pair, &ckfeas)?;
        let neg_e = build_e_field(&cert_pair).values.mapv(|v| -v);
        let cert = certify_kernel_optimality(&neg_e, &ckfeas, &opt, candidates, seed + 1)?;
        push(
            "optimality-mixing-kernel",
            cert.strictly_beats_all && cert.kkt_cosine >= 1.0 - 1e-8,
            serde_json::to_value(&cert).unwrap(),
            &mut checks,
        );
    }
    {
        let opt = optimal_map_for_expectation(&cert_a, &cert_f0, &cc, &cert_sens, &cmfeas)?;
        let grad = expectation_map_gradient(&cert_a, &cert_f0, &cc, &cert_sens)?;
        let cert = certify_map_optimality(&grad, &cmfeas, &opt, candidates, seed + 2)?;
        push(
            "optimality-expectation-map",
            cert.strictly_beats_all && cert.kkt_cosine >= 1.0 - 1e-8,
            serde_json::to_value(&cert).unwrap(),
            &mut checks,
        );
    }
    {
        let opt = optimal_map_for_mixing(&cert_pair, &cert_sens, &cmfeas)?;
        let neg_ehat = cert_sens.ehat_field(&cert_pair)?.coeffs.mapv(|v| -v);
        let cert = certify_map_optimality(&neg_ehat, &cmfeas, &opt, candidates, seed + 3)?;
        push(
            "optimality-mixing-map",
            cert.strictly_beats_all && cert.kkt_cosine >= 1.0 - 1e-8,
            serde_json::to_value(&cert).unwrap(),
            &mut checks,
        );
    }

    // mixing diagnostic
    {
        let l2 = set.eigenvalues().get(1).map(|z| z.norm()).unwrap_or(0.0);
        let horizon = if l2 > 1e-8 && l2 < 1.0 {
            ((3.0 / -l2.log10()).ceil() as usize + 10).min(2000)
        } else {
            20
        };
        let rep = mixing_check(a, 5, horizon, seed)?;
        push(
            "mixing-diagnostic",
            rep.passes,
            serde_json::to_value(&rep).unwrap(),
            &mut checks,
        );
    }

    // negative controls: the gates must reject corrupted inputs
    {
        let mut broken = kdot.clone();
        broken.support_mask = None;
        broken.values[[0, 0]] += 0.5;
        let rejected = matches!(
            optresp::response::density_response_kernel(a, f0, &broken),
            Err(optresp::Error::Precondition(_))
        );
        push(
            "corrupted-perturbation-rejected",
            rejected,
            json!({"expects": "precondition error for broken column means"}),
            &mut checks,
        );
    }
    {
        // a wrong prediction (scaled response) must land outside the ratio band
        let delta = cfg.raw.verification_deltas[0];
        let honest = verify_density_response_kernel(a, f0, &kdot, delta)?;
        let flagged = match honest.predicted {
            optresp::response::ResponseValue::Vector(ref v) => {
                // double the prediction: error stops shrinking linearly
                let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
                let err = |fd: &optresp::response::ResponseValue| -> f64 {
                    if let optresp::response::ResponseValue::Vector(f) = fd {
                        (f.iter()
                            .zip(&doubled)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            / f.len() as f64)
                            .sqrt()
                    } else {
                        f64::NAN
                    }
                };
                let e1 = err(&honest.fd_delta);
                let e2 = err(&honest.fd_half_delta);
                let ratio = e1 / e2.max(1e-300);
                !(optresp::response::RATIO_BAND.0..=optresp::response::RATIO_BAND.1)
                    .contains(&ratio)
            }
            _ => false,
        };
        push(
            "wrong-formula-detected",
            flagged,
            json!({"expects": "ratio outside the first-order band for a doubled prediction"}),
            &mut checks,
        );
    }

    let all_pass = checks.iter().all(|c| c.pass);
    Ok((serde_json::to_value(&checks).unwrap(), all_pass))
}
