//! Noise models, interval maps, and the reflecting-boundary kernel.
//!
//! The stochastic dynamics is `x_{n+1} = reflect(T(x_n) + w_n)` where `w_n`
//! is i.i.d. with a compactly supported Lipschitz density and `reflect` folds
//! the real line onto [0, 1] by the tent map `pi(x) = min_i |x - 2i|`.
//! The transfer operator of this process is an integral operator whose kernel
//! is the folded, shifted noise density; this module evaluates that kernel
//! and its derivative with respect to the map.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

/// Shift indices beyond this bound indicate a malformed support declaration.
const FOLD_INDEX_CAP: i64 = 4;

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Additive-noise density `rho` with support radius `epsilon`.
///
/// Immutable after construction; `density` and `density_deriv` are plain
/// functions of the offset from the shift point.
#[derive(Clone)]
pub struct NoiseModel {
    pub epsilon: f64,
    density: RealFn,
    density_deriv: RealFn,
    /// Lipschitz constant of the density, recorded for documentation only.
    pub lipschitz_hint: Option<f64>,
}

impl std::fmt::Debug for NoiseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoiseModel")
            .field("epsilon", &self.epsilon)
            .field("lipschitz_hint", &self.lipschitz_hint)
            .finish()
    }
}

/// Normalization constant `N(eps)` of the smooth bump density
/// `rho_eps(x) = N(eps) * exp(-eps^2 / (eps^2 - x^2))` on `(-eps, eps)`.
///
/// Computed by adaptive quadrature of the unnormalized bump to absolute
/// tolerance 1e-12; there is no closed form.
pub fn bump_normalization(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "noise support radius must lie in (0, 1], got {epsilon}"
        )));
    }
    let raw = adaptive_simpson(|x| unnormalized_bump(x, epsilon), -epsilon, epsilon, 1e-12);
    Ok(1.0 / raw)
}

fn unnormalized_bump(x: f64, epsilon: f64) -> f64 {
    let d = epsilon * epsilon - x * x;
    if d <= 0.0 {
        0.0
    } else {
        (-epsilon * epsilon / d).exp()
    }
}

impl NoiseModel {
    /// The smooth bump noise `rho_eps(x) = N(eps) exp(-eps^2/(eps^2 - x^2))`.
    ///
    /// The derivative is analytic, `rho_eps(x) * (-2 eps^2 x) / (eps^2 - x^2)^2`,
    /// clamped to zero at |x| >= eps where the exponential factor dominates.
    pub fn bump(epsilon: f64) -> Result<Self> {
        let norm = bump_normalization(epsilon)?;
        let density: RealFn = {
            let eps = epsilon;
            Arc::new(move |x| norm * unnormalized_bump(x, eps))
        };
        let density_deriv: RealFn = {
            let eps = epsilon;
            Arc::new(move |x| {
                let d = eps * eps - x * x;
                if d <= 0.0 {
                    0.0
                } else {
                    norm * (-eps * eps / d).exp() * (-2.0 * eps * eps * x) / (d * d)
                }
            })
        };
        Ok(Self {
            epsilon,
            density,
            density_deriv,
            lipschitz_hint: None,
        })
    }

    /// A custom noise model from explicit density and derivative closures.
    pub fn custom<F, G>(epsilon: f64, density: F, density_deriv: G) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "noise support radius must lie in (0, 1], got {epsilon}"
            )));
        }
        Ok(Self {
            epsilon,
            density: Arc::new(density),
            density_deriv: Arc::new(density_deriv),
            lipschitz_hint: None,
        })
    }

    pub fn with_lipschitz_hint(mut self, k: f64) -> Self {
        self.lipschitz_hint = Some(k);
        self
    }

    pub fn density(&self, x: f64) -> f64 {
        (self.density)(x)
    }

    pub fn density_deriv(&self, x: f64) -> f64 {
        (self.density_deriv)(x)
    }
}

/// A pointwise-evaluable interval map T: [0,1] -> [0,1].
#[derive(Clone)]
pub struct MapModel {
    eval: RealFn,
    pub description: String,
    pub parameters: Vec<(String, f64)>,
}

impl std::fmt::Debug for MapModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MapModel")
            .field("description", &self.description)
            .field("parameters", &self.parameters)
            .finish()
    }
}

impl MapModel {
    pub fn new<F>(eval: F, description: impl Into<String>, parameters: Vec<(String, f64)>) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            eval: Arc::new(eval),
            description: description.into(),
            parameters,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    /// Intermittent map with a neutral fixed point at 0:
    /// `x (1 + (2x)^alpha)` on [0, 1/2), `2x - 1` on [1/2, 1].
    pub fn pomeau_manneville(alpha: f64) -> Self {
        Self::new(
            move |x| {
                if x < 0.5 {
                    x * (1.0 + (2.0 * x).powf(alpha))
                } else {
                    2.0 * x - 1.0
                }
            },
            "pomeau-manneville",
            vec![("alpha".into(), alpha)],
        )
    }

    /// Interval exchange: intervals of the given lengths are rearranged in
    /// the order listed in `order` (0-based original indices, left to right).
    pub fn interval_exchange(lengths: Vec<f64>, order: Vec<usize>) -> Result<Self> {
        let k = lengths.len();
        if k == 0 || order.len() != k {
            return Err(Error::InvalidParameter(
                "interval exchange needs matching, nonempty lengths and order".into(),
            ));
        }
        let mut seen = vec![false; k];
        for &o in &order {
            if o >= k || seen[o] {
                return Err(Error::InvalidParameter(format!(
                    "order must be a permutation of 0..{k}"
                )));
            }
            seen[o] = true;
        }
        let total: f64 = lengths.iter().sum();
        if lengths.iter().any(|&l| l <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "interval lengths must be positive and sum to 1".into(),
            ));
        }
        // start of each original interval in the domain
        let mut starts = vec![0.0; k];
        for i in 1..k {
            starts[i] = starts[i - 1] + lengths[i - 1];
        }
        // start of each original interval in the image
        let mut image_starts = vec![0.0; k];
        let mut acc = 0.0;
        for &o in &order {
            image_starts[o] = acc;
            acc += lengths[o];
        }
        let lengths_c = lengths.clone();
        let starts_c = starts.clone();
        Ok(Self::new(
            move |x| {
                let mut i = k - 1;
                for j in 0..k {
                    if x < starts_c[j] + lengths_c[j] {
                        i = j;
                        break;
                    }
                }
                (x - starts_c[i] + image_starts[i]).clamp(0.0, 1.0)
            },
            "interval-exchange",
            lengths
                .iter()
                .enumerate()
                .map(|(i, &l)| (format!("length{i}"), l))
                .collect(),
        ))
    }

    /// The four-interval exchange used throughout the experiments: permutation
    /// (1234) -> (4321) with lengths given by the normalized leading
    /// eigenvector of a fixed positive integer matrix.
    pub fn interval_exchange_default() -> Self {
        let m = [
            [13.0, 37.0, 77.0, 47.0],
            [10.0, 30.0, 60.0, 37.0],
            [3.0, 10.0, 24.0, 14.0],
            [4.0, 10.0, 19.0, 12.0],
        ];
        // leading eigenvector of a positive matrix by power iteration
        let mut v = [1.0_f64; 4];
        for _ in 0..200 {
            let mut w = [0.0_f64; 4];
            for i in 0..4 {
                for j in 0..4 {
                    w[i] += m[i][j] * v[j];
                }
            }
            let s: f64 = w.iter().sum();
            for i in 0..4 {
                v[i] = w[i] / s;
            }
        }
        Self::interval_exchange(v.to_vec(), vec![3, 2, 1, 0])
            .expect("built-in interval exchange data is valid")
    }

    /// Affine map `a x + b`, brought back into [0,1] either by clamping or mod 1.
    pub fn affine(a: f64, b: f64, wrap: AffineWrap) -> Self {
        Self::new(
            move |x| {
                let y = a * x + b;
                match wrap {
                    AffineWrap::Clamp => y.clamp(0.0, 1.0),
                    AffineWrap::Mod => {
                        let r = y.rem_euclid(1.0);
                        if r == 0.0 && y >= 1.0 {
                            1.0
                        } else {
                            r
                        }
                    }
                }
            },
            "affine",
            vec![("a".into(), a), ("b".into(), b)],
        )
    }

    /// Piecewise-linear interpolation through sample points (x, T(x)).
    /// Points are sorted by x; evaluation clamps to the sampled range.
    pub fn table(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter(
                "table map needs at least two sample points".into(),
            ));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points
            .iter()
            .any(|&(x, t)| !x.is_finite() || !t.is_finite())
        {
            return Err(Error::InvalidInput(
                "table map samples must be finite".into(),
            ));
        }
        if points.iter().any(|&(_, t)| !(0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidInput(
                "table map values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self::new(
            move |x| {
                let first = points[0];
                let last = points[points.len() - 1];
                if x <= first.0 {
                    return first.1;
                }
                if x >= last.0 {
                    return last.1;
                }
                let idx = points.partition_point(|&(px, _)| px <= x);
                let (x0, t0) = points[idx - 1];
                let (x1, t1) = points[idx];
                if x1 == x0 {
                    t0
                } else {
                    t0 + (t1 - t0) * (x - x0) / (x1 - x0)
                }
            },
            "table",
            vec![],
        ))
    }
}

/// How an affine map is brought back into the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineWrap {
    Clamp,
    Mod,
}

/// The tent fold of the real line onto [0, 1]: `pi(x) = min_i |x - 2i|`.
pub fn reflect(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    if r <= 1.0 {
        r
    } else {
        2.0 - r
    }
}

/// Image of an interval under the tent fold, as a subinterval of [0, 1].
pub fn fold_interval(a: f64, b: f64) -> (f64, f64) {
    debug_assert!(a <= b);
    if b - a >= 2.0 {
        return (0.0, 1.0);
    }
    let pa = reflect(a);
    let pb = reflect(b);
    // minima of pi occur at even integers, maxima at odd integers
    let contains_even = (a / 2.0).ceil() * 2.0 <= b;
    let contains_odd = ((a - 1.0) / 2.0).ceil() * 2.0 + 1.0 <= b;
    let lo = if contains_even { 0.0 } else { pa.min(pb) };
    let hi = if contains_odd { 1.0 } else { pa.max(pb) };
    (lo, hi)
}

/// Result of folding a compactly supported function onto [0, 1].
#[derive(Debug, Clone)]
pub struct ReflectedDensity {
    pub eval_points: Vec<f64>,
    pub values: Vec<f64>,
    /// Human-readable note on which function was folded.
    pub provenance: String,
}

/// Apply the transfer operator of the fold to `f`, evaluated at `eval_points`.
///
/// `support` declares an interval containing supp(f); it must lie inside
/// [-3, 3]. The shift-index range of the defining sum is derived from this
/// declaration, so the finite sum is exact.
pub fn reflect_fold<F: Fn(f64) -> f64>(
    f: F,
    support: (f64, f64),
    eval_points: &[f64],
    provenance: impl Into<String>,
) -> Result<ReflectedDensity> {
    let indices = fold_indices(support)?;
    let values = eval_points
        .iter()
        .map(|&x| fold_sum(&f, &indices, x))
        .collect();
    Ok(ReflectedDensity {
        eval_points: eval_points.to_vec(),
        values,
        provenance: provenance.into(),
    })
}

/// Even shift indices i with [i - 1, i + 1] possibly meeting the support,
/// so that `sum_i f(i + x) + f(i - x)` over them is exact for x in [0, 1].
fn fold_indices(support: (f64, f64)) -> Result<Vec<i64>> {
    let (lo, hi) = support;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidInput(
            "support must be a finite interval".into(),
        ));
    }
    if lo < -3.0 || hi > 3.0 {
        return Err(Error::InvalidInput(format!(
            "support [{lo}, {hi}] exceeds the admissible range [-3, 3]"
        )));
    }
    // f(i + x) != 0 for some x in [0,1] requires i in [lo - 1, hi];
    // f(i - x) != 0 requires i in [lo, hi + 1].
    let min_i = ((lo - 1.0) / 2.0).floor() as i64 * 2;
    let max_i = ((hi + 1.0) / 2.0).ceil() as i64 * 2;
    let mut out = Vec::new();
    let mut i = min_i;
    while i <= max_i {
        if i.abs() > FOLD_INDEX_CAP {
            return Err(Error::InvalidInput(format!(
                "derived shift index {i} exceeds cap {FOLD_INDEX_CAP}; support looks malformed"
            )));
        }
        out.push(i);
        i += 2;
    }
    Ok(out)
}

fn fold_sum<F: Fn(f64) -> f64>(f: &F, indices: &[i64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &i in indices {
        let i = i as f64;
        acc += f(i + x) + f(i - x);
    }
    acc
}

/// Offsets from a shift point `t`, precomputed for fast folded evaluation of
/// a density supported in [t - eps, t + eps].
#[derive(Debug, Clone)]
pub struct FoldedShift {
    t: f64,
    indices: Vec<i64>,
    /// Folded support as a subinterval of [0, 1].
    pub support: (f64, f64),
}

impl FoldedShift {
    /// Prepare a folded evaluation of a profile shifted to `t`.
    /// Valid for shift points in [-1, 2] (maps may overshoot [0,1] slightly
    /// under perturbation).
    pub fn new(t: f64, epsilon: f64) -> Result<Self> {
        let indices = fold_indices((t - epsilon, t + epsilon))?;
        Ok(Self {
            t,
            indices,
            support: fold_interval(t - epsilon, t + epsilon),
        })
    }

    /// Evaluate `sum_i g(i + x - t) + g(i - x - t)` at x.
    pub fn eval<F: Fn(f64) -> f64>(&self, g: F, x: f64) -> f64 {
        let mut acc = 0.0;
        for &i in &self.indices {
            let i = i as f64;
            acc += g(i + x - self.t) + g(i - x - self.t);
        }
        acc
    }
}

/// Transfer-operator kernel `k(x, y)` of the reflected noisy dynamics:
/// the noise density shifted to T(y) and folded onto [0, 1], evaluated at x.
pub fn kernel_value(map: &MapModel, noise: &NoiseModel, x: f64, y: f64) -> Result<f64> {
    let t = map.eval(y);
    let fold = FoldedShift::new(t, noise.epsilon)?;
    Ok(fold.eval(|z| noise.density(z), x))
}

/// The x-dependent factor of the kernel's derivative with respect to the map:
/// the folded, shifted `d rho / dx` evaluated at x. The full derivative kernel
/// is `-factor(x, y) * Tdot(y)`.
pub fn kernel_map_derivative_factor(
    map: &MapModel,
    noise: &NoiseModel,
    x: f64,
    y: f64,
) -> Result<f64> {
    let t = map.eval(y);
    let fold = FoldedShift::new(t, noise.epsilon)?;
    Ok(fold.eval(|z| noise.density_deriv(z), x))
}
