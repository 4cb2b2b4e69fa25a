//! Experiment configuration: a TOML file plus command-line overrides.
//!
//! Every field has a default except the map and the problem selector.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use optresp::discretization::{read_table_csv, QuadratureSpec};
use optresp::dynamics::{AffineWrap, MapModel};
use optresp::spectral::EigSelector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    ExpectationKernel,
    MixingKernel,
    ExpectationMap,
    MixingMap,
    Spectrum,
    InvariantDensity,
    VerifyResponse,
}

impl Problem {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "expectation-kernel" => Some(Self::ExpectationKernel),
            "mixing-kernel" => Some(Self::MixingKernel),
            "expectation-map" => Some(Self::ExpectationMap),
            "mixing-map" => Some(Self::MixingMap),
            "spectrum" => Some(Self::Spectrum),
            "invariant-density" => Some(Self::InvariantDensity),
            "verify-response" => Some(Self::VerifyResponse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub name: String,
    /// Intermittency exponent of the "pomeau-manneville" map.
    pub alpha: Option<f64>,
    /// Interval lengths for "interval-exchange" (default: the built-in four
    /// intervals from the leading eigenvector of the reference matrix).
    pub lengths: Option<Vec<f64>>,
    /// Rearranged order of the original intervals, 1-based, left to right.
    pub order: Option<Vec<usize>>,
    /// Slope and offset of the "affine" map.
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// "clamp" (default) or "mod" for the affine map.
    pub wrap: Option<String>,
    /// Sample file (two-column CSV x,T(x)) for the "table" map.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub name: String,
    /// Interval endpoints for the "indicator" observable.
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl Default for ObservableSpec {
    fn default() -> Self {
        Self {
            name: "neg-cos".into(),
            a: None,
            b: None,
        }
    }
}

fn default_n() -> usize {
    500
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_quad_order() -> usize {
    8
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_deltas() -> Vec<f64> {
    vec![1e-3]
}
fn default_overlay_scale() -> f64 {
    0.01
}
fn default_candidates() -> usize {
    2000
}
fn default_selector() -> String {
    "largest-modulus-real".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Option<String>,
    pub map: Option<MapSpec>,
    #[serde(default)]
    pub observable: ObservableSpec,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_quad_order")]
    pub quad_order: usize,
    /// Support threshold for kernel perturbations; 0 selects the default
    /// (one thousandth of the kernel maximum).
    #[serde(default)]
    pub kernel_threshold: f64,
    /// Interior margin for map perturbations.
    #[serde(default)]
    pub interior_margin: f64,
    #[serde(default = "default_selector")]
    pub eig_selector: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Finite-difference steps used by response verification; each step is
    /// compared against its half.
    #[serde(default = "default_deltas")]
    pub verification_deltas: Vec<f64>,
    /// Random feasible candidates per brute-force optimality certificate.
    #[serde(default = "default_candidates")]
    pub verification_candidates: usize,
    #[serde(default = "default_overlay_scale")]
    pub overlay_scale: f64,
    /// Reuse a cached transfer matrix from the output directory when the
    /// assembly key matches.
    #[serde(default)]
    pub use_cache: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: None,
            map: None,
            observable: ObservableSpec::default(),
            n: default_n(),
            epsilon: default_epsilon(),
            quad_order: default_quad_order(),
            kernel_threshold: 0.0,
            interior_margin: 0.0,
            eig_selector: default_selector(),
            output_dir: default_output_dir(),
            seed: 0,
            verification_deltas: default_deltas(),
            verification_candidates: default_candidates(),
            overlay_scale: default_overlay_scale(),
            use_cache: false,
        }
    }
}

/// A configuration error with the offending field named.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

/// Fully validated experiment inputs ready to run.
pub struct ValidatedConfig {
    pub raw: ExperimentConfig,
    pub problem: Problem,
    pub map: MapModel,
    pub quad: QuadratureSpec,
    pub selector: EigSelector,
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("config", format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| bad("config", e.to_string()))
    }

    pub fn validate(self) -> Result<ValidatedConfig, ConfigError> {
        let problem_name = self
            .problem
            .as_deref()
            .ok_or_else(|| bad("problem", "missing; pick one of expectation-kernel, mixing-kernel, expectation-map, mixing-map, spectrum, invariant-density, verify-response"))?;
        let problem = Problem::parse(problem_name)
            .ok_or_else(|| bad("problem", format!("unknown problem '{problem_name}'")))?;

        if self.n < 1 {
            return Err(bad("n", "grid needs at least one cell"));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(bad("epsilon", "noise support radius must lie in (0, 1]"));
        }
        if self.quad_order == 0 {
            return Err(bad("quad_order", "quadrature order must be at least 1"));
        }
        if self.kernel_threshold < 0.0 {
            return Err(bad(
                "kernel_threshold",
                "must be nonnegative (0 = automatic)",
            ));
        }
        if !(0.0..=0.5).contains(&self.interior_margin) {
            return Err(bad("interior_margin", "must lie in [0, 0.5]"));
        }
        if self.verification_deltas.is_empty() || self.verification_deltas.iter().any(|&d| d <= 0.0)
        {
            return Err(bad("verification_deltas", "need positive steps"));
        }
        let selector =
            match self.eig_selector.as_str() {
                "largest-modulus" => EigSelector::LargestModulus,
                "largest-modulus-real" => EigSelector::LargestModulusReal,
                other => return Err(bad(
                    "eig_selector",
                    format!(
                        "unknown selector '{other}'; use largest-modulus or largest-modulus-real"
                    ),
                )),
            };

        let map_spec = self
            .map
            .as_ref()
            .ok_or_else(|| bad("map", "missing; set map.name"))?;
        let map = build_map(map_spec)?;

        match self.observable.name.as_str() {
            "neg-cos" | "cos" | "sin" | "x" => {}
            "indicator" => {
                let a = self.observable.a.unwrap_or(0.0);
                let b = self.observable.b.unwrap_or(1.0);
                if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a >= b {
                    return Err(bad("observable", "indicator needs 0 <= a < b <= 1"));
                }
            }
            other => {
                return Err(bad(
                    "observable.name",
                    format!("unknown observable '{other}'; use neg-cos, cos, sin, x, or indicator"),
                ))
            }
        }

        let quad = QuadratureSpec {
            order: self.quad_order,
            ..QuadratureSpec::default()
        };
        Ok(ValidatedConfig {
            problem,
            map,
            quad,
            selector,
            raw: self,
        })
    }
}

impl ValidatedConfig {
    pub fn observable_fn(&self) -> impl Fn(f64) -> f64 + '_ {
        let spec = &self.raw.observable;
        let a = spec.a.unwrap_or(0.0);
        let b = spec.b.unwrap_or(1.0);
        let name = spec.name.clone();
        move |x: f64| match name.as_str() {
            "neg-cos" => -x.cos(),
            "cos" => x.cos(),
            "sin" => x.sin(),
            "x" => x,
            "indicator" => {
                if x >= a && x <= b {
                    1.0
                } else {
                    0.0
                }
            }
            _ => unreachable!("validated"),
        }
    }
}

fn build_map(spec: &MapSpec) -> Result<MapModel, ConfigError> {
    match spec.name.as_str() {
        "pomeau-manneville" => {
            let alpha = spec.alpha.unwrap_or(0.5);
            if alpha <= 0.0 {
                return Err(bad("map.alpha", "must be positive"));
            }
            Ok(MapModel::pomeau_manneville(alpha))
        }
        "interval-exchange" => match (&spec.lengths, &spec.order) {
            (None, None) => Ok(MapModel::interval_exchange_default()),
            (Some(lengths), order) => {
                let k = lengths.len();
                let order0: Vec<usize> = match order {
                    Some(o) => {
                        if o.iter().any(|&i| i == 0 || i > k) {
                            return Err(bad(
                                "map.order",
                                "entries must be 1-based interval indices",
                            ));
                        }
                        o.iter().map(|&i| i - 1).collect()
                    }
                    None => (0..k).rev().collect(),
                };
                MapModel::interval_exchange(lengths.clone(), order0)
                    .map_err(|e| bad("map", e.to_string()))
            }
            (None, Some(_)) => Err(bad("map.lengths", "order given without lengths")),
        },
        "affine" => {
            let a = spec.a.unwrap_or(1.0);
            let b = spec.b.unwrap_or(0.0);
            let wrap = match spec.wrap.as_deref().unwrap_or("clamp") {
                "clamp" => AffineWrap::Clamp,
                "mod" => AffineWrap::Mod,
                other => return Err(bad("map.wrap", format!("unknown wrap '{other}'"))),
            };
            Ok(MapModel::affine(a, b, wrap))
        }
        "table" => {
            let file = spec
                .file
                .as_ref()
                .ok_or_else(|| bad("map.file", "table map needs a sample file"))?;
            let pts = read_table_csv(file).map_err(|e| bad("map.file", e.to_string()))?;
            MapModel::table(pts).map_err(|e| bad("map.file", e.to_string()))
        }
        other => Err(bad(
            "map.name",
            format!(
                "unknown map '{other}'; use pomeau-manneville, interval-exchange, affine, or table"
            ),
        )),
    }
}
