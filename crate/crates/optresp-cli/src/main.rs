//! Config-driven experiment runner for transfer operators of noisy interval
//! maps: spectra, invariant densities, linear-response verification, and the
//! optimal kernel/map perturbations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric/spectral error,
//! 4 verification failure.

mod config;
mod runner;

use clap::Parser;

use config::{ExperimentConfig, MapSpec, Problem};
use runner::RunFailure;

#[derive(Parser, Debug)]
#[command(
    name = "optresp",
    about = "Spectral data and optimal perturbations of noisy interval maps",
    version
)]
struct Args {
    /// TOML configuration file; flags below override its fields.
    #[arg(long)]
    config: Option<std::path::PathBuf>,

    /// Problem selector: expectation-kernel | mixing-kernel | expectation-map
    /// | mixing-map | spectrum | invariant-density | verify-response.
    #[arg(long)]
    problem: Option<String>,

    /// Map name: pomeau-manneville | interval-exchange | affine | table.
    #[arg(long)]
    map: Option<String>,

    /// Intermittency exponent for the pomeau-manneville map.
    #[arg(long)]
    alpha: Option<f64>,

    /// Noise support radius.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Grid resolution (number of cells).
    #[arg(long)]
    n: Option<usize>,

    /// Gauss-Legendre order for matrix assembly.
    #[arg(long)]
    quad_order: Option<usize>,

    /// Kernel support threshold (0 = automatic).
    #[arg(long)]
    kernel_threshold: Option<f64>,

    /// Interior margin for map perturbations.
    #[arg(long)]
    interior_margin: Option<f64>,

    /// Eigenvalue selector: largest-modulus | largest-modulus-real.
    #[arg(long)]
    selector: Option<String>,

    /// Output directory.
    #[arg(long)]
    out: Option<std::path::PathBuf>,

    /// RNG seed for verification sampling.
    #[arg(long)]
    seed: Option<u64>,

    /// Observable name: neg-cos | cos | sin | x | indicator.
    #[arg(long)]
    observable: Option<String>,

    /// Reuse cached transfer matrices from the output directory.
    #[arg(long)]
    use_cache: bool,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let args = Args::parse();

    let mut cfg = match &args.config {
        Some(path) => match ExperimentConfig::from_toml_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("configuration error: {e}");
                return 2;
            }
        },
        None => ExperimentConfig::default(),
    };

    // flag overrides
    if let Some(p) = &args.problem {
        cfg.problem = Some(p.clone());
    }
    if let Some(name) = &args.map {
        match cfg.map.as_mut() {
            Some(m) if &m.name == name => {}
            Some(m) => {
                *m = blank_map_spec(name);
            }
            None => cfg.map = Some(blank_map_spec(name)),
        }
    }
    if let Some(alpha) = args.alpha {
        if let Some(m) = cfg.map.as_mut() {
            m.alpha = Some(alpha);
        }
    }
    if let Some(eps) = args.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(q) = args.quad_order {
        cfg.quad_order = q;
    }
    if let Some(t) = args.kernel_threshold {
        cfg.kernel_threshold = t;
    }
    if let Some(m) = args.interior_margin {
        cfg.interior_margin = m;
    }
    if let Some(s) = &args.selector {
        cfg.eig_selector = s.clone();
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(obs) = &args.observable {
        cfg.observable.name = obs.clone();
    }
    if args.use_cache {
        cfg.use_cache = true;
    }

    let validated = match cfg.validate() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return 2;
        }
    };

    match runner::run(&validated) {
        Ok(code) => {
            let problem_name = match validated.problem {
                Problem::VerifyResponse => "verification suite",
                _ => "experiment",
            };
            eprintln!(
                "{problem_name} finished; outputs in {}",
                validated.raw.output_dir.display()
            );
            code
        }
        Err(RunFailure::Numeric(e)) => {
            eprintln!("numeric error: {e}");
            3
        }
        Err(RunFailure::Verification(msg)) => {
            eprintln!("verification failure: {msg}");
            4
        }
    }
}

fn blank_map_spec(name: &str) -> MapSpec {
    MapSpec {
        name: name.to_string(),
        alpha: None,
        lengths: None,
        order: None,
        a: None,
        b: None,
        wrap: None,
        file: None,
    }
}
