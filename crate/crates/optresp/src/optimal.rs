//! The four closed-form optimal perturbations with their feasibility sets,
//! normalization, and brute-force optimality certification.
//!
//! Each optimum maximizes a continuous linear objective over the unit sphere
//! of a feasible subspace, so it is the normalized orthogonal projection of
//! the objective's Riesz representative onto that subspace:
//!   - kernel problems project onto {supported on the mask, zero column
//!     means over the mask},
//!   - map problems project onto {supported on the mask}.
//!
//! Mixing problems minimize, which flips the sign of the field.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discretization::{
    assemble_transfer_matrix, DensityVector, Grid, KernelGrid, QuadratureSpec, TransferMatrix,
};
use crate::dynamics::{MapModel, NoiseModel};
use crate::error::{Error, Result};
use crate::response::{build_e_field, KernelPerturbation, MapPerturbation, MapSensitivity};
use crate::spectral::{resolvent_solve_adjoint, EigenPair};

/// Fields with discrete norm below this are a vanishing objective.
pub const DEGENERATE_FIELD_TOL: f64 = 1e-13;

/// Feasible support for kernel perturbations: cells where the unperturbed
/// kernel stays above a threshold, so small perturbations keep it a kernel.
#[derive(Debug, Clone)]
pub struct KernelFeasibility {
    pub grid: Grid,
    pub threshold: f64,
    pub mask: Array2<bool>,
    /// Number of masked cells per column (n times the column-slice measure).
    pub column_counts: Vec<usize>,
}

impl KernelFeasibility {
    pub fn new(k0: &KernelGrid, threshold: f64) -> Result<Self> {
        if threshold <= 0.0 {
            return Err(Error::InvalidParameter(
                "feasibility threshold must be positive".into(),
            ));
        }
        let n = k0.grid.n();
        let mask = k0.values.mapv(|v| v >= threshold);
        let column_counts = (0..n)
            .map(|j| mask.column(j).iter().filter(|&&m| m).count())
            .collect();
        Ok(Self {
            grid: k0.grid,
            threshold,
            mask,
            column_counts,
        })
    }

    /// Threshold at one thousandth of the kernel's maximum: keeps the mask
    /// close to the kernel's full support while excluding its zero set.
    pub fn with_default_threshold(k0: &KernelGrid) -> Result<Self> {
        let max = k0.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= 0.0 {
            return Err(Error::Infeasible("kernel is nonpositive everywhere".into()));
        }
        Self::new(k0, 1e-3 * max)
    }

    /// Column-slice measure of the mask at column j.
    pub fn column_measure(&self, j: usize) -> f64 {
        self.column_counts[j] as f64 / self.grid.n() as f64
    }

    /// Columns whose mask slice has positive measure.
    pub fn active_columns(&self) -> Vec<usize> {
        (0..self.grid.n())
            .filter(|&j| self.column_counts[j] > 0)
            .collect()
    }

    /// Orthogonal projection onto the feasible subspace: zero off the mask,
    /// zero mean over each masked column slice.
    pub fn project(&self, field: &Array2<f64>) -> Array2<f64> {
        let n = self.grid.n();
        let mut out = Array2::zeros((n, n));
        for j in 0..n {
            let count = self.column_counts[j];
            if count == 0 {
                continue;
            }
            let mut sum = 0.0;
            for i in 0..n {
                if self.mask[[i, j]] {
                    sum += field[[i, j]];
                }
            }
            let mean = sum / count as f64;
            for i in 0..n {
                if self.mask[[i, j]] {
                    out[[i, j]] = field[[i, j]] - mean;
                }
            }
        }
        out
    }
}

/// Feasible support for map perturbations: cells whose image stays at least
/// `ell` away from the boundary. `ell = 0` admits every cell.
#[derive(Debug, Clone)]
pub struct MapFeasibility {
    pub grid: Grid,
    pub ell: f64,
    pub mask: Array1<bool>,
}

impl MapFeasibility {
    pub fn new(grid: Grid, map: &MapModel, ell: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&ell) {
            return Err(Error::InvalidParameter(
                "interior margin must lie in [0, 0.5]".into(),
            ));
        }
        let mask = Array1::from_shape_fn(grid.n(), |j| {
            let t = map.eval(grid.center(j));
            t >= ell && t <= 1.0 - ell
        });
        Ok(Self { grid, ell, mask })
    }

    /// Zero a field off the mask.
    pub fn project(&self, field: &Array1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(self.grid.n(), |j| if self.mask[j] { field[j] } else { 0.0 })
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn kernel_field_norm(grid: Grid, field: &Array2<f64>) -> f64 {
    let n = grid.n() as f64;
    (field.iter().map(|v| v * v).sum::<f64>() / (n * n)).sqrt()
}

fn vector_field_norm(grid: Grid, field: &Array1<f64>) -> f64 {
    (field.iter().map(|v| v * v).sum::<f64>() / grid.n() as f64).sqrt()
}

fn normalized_kernel(
    grid: Grid,
    field: Array2<f64>,
    mask: Array2<bool>,
    context: &str,
) -> Result<KernelPerturbation> {
    let alpha = kernel_field_norm(grid, &field);
    if alpha <= DEGENERATE_FIELD_TOL {
        return Err(Error::DegenerateObjective(format!(
            "{context}: objective field vanishes on the feasible set"
        )));
    }
    KernelPerturbation::new(grid, field / alpha, Some(mask))
}

fn normalized_map(
    grid: Grid,
    field: Array1<f64>,
    mask: Array1<bool>,
    context: &str,
) -> Result<MapPerturbation> {
    let alpha = vector_field_norm(grid, &field);
    if alpha <= DEGENERATE_FIELD_TOL {
        return Err(Error::DegenerateObjective(format!(
            "{context}: objective field vanishes on the feasible set"
        )));
    }
    MapPerturbation::new(grid, field / alpha, Some(mask))
}

/// Unit-norm feasible kernel perturbation maximizing the derivative of the
/// expectation of `c`: per masked column, the adjoint-resolvent image of `c`
/// minus its column mean, weighted by the invariant density.
pub fn optimal_kernel_for_expectation(
    a: &TransferMatrix,
    f0: &DensityVector,
    c: &DensityVector,
    feas: &KernelFeasibility,
) -> Result<KernelPerturbation> {
    if feas.active_columns().is_empty() {
        return Err(Error::Infeasible("feasible mask is empty".into()));
    }
    let y = resolvent_solve_adjoint(a, c, f0)?;
    let n = a.grid.n();
    let field = Array2::from_shape_fn((n, n), |(i, j)| y.coeffs[i] * f0.coeffs[j]);
    let projected = feas.project(&field);
    normalized_kernel(
        a.grid,
        projected,
        feas.mask.clone(),
        "expectation objective",
    )
}

/// Unit-norm feasible kernel perturbation maximally increasing the mixing
/// rate: minimizes the pairing with the eigenvalue-derivative field.
pub fn optimal_kernel_for_mixing(
    pair: &EigenPair,
    feas: &KernelFeasibility,
) -> Result<KernelPerturbation> {
    if feas.active_columns().is_empty() {
        return Err(Error::Infeasible("feasible mask is empty".into()));
    }
    let e = build_e_field(pair);
    let projected = feas.project(&e.values.mapv(|v| -v));
    normalized_kernel(pair.grid, projected, feas.mask.clone(), "mixing objective")
}

/// Unit-norm feasible map perturbation maximizing the derivative of the
/// expectation of `c`.
pub fn optimal_map_for_expectation(
    a: &TransferMatrix,
    f0: &DensityVector,
    c: &DensityVector,
    sens: &MapSensitivity,
    feas: &MapFeasibility,
) -> Result<MapPerturbation> {
    if feas.active_count() == 0 {
        return Err(Error::Infeasible("feasible mask is empty".into()));
    }
    let y = resolvent_solve_adjoint(a, c, f0)?;
    let g = sens.apply(&y)?;
    let field = Array1::from_shape_fn(a.grid.n(), |j| -f0.coeffs[j] * g.coeffs[j]);
    let projected = feas.project(&field);
    normalized_map(
        a.grid,
        projected,
        feas.mask.clone(),
        "expectation objective",
    )
}

/// Unit-norm feasible map perturbation maximally increasing the mixing rate:
/// anti-parallel to the y-space mixing field on the mask.
pub fn optimal_map_for_mixing(
    pair: &EigenPair,
    sens: &MapSensitivity,
    feas: &MapFeasibility,
) -> Result<MapPerturbation> {
    if feas.active_count() == 0 {
        return Err(Error::Infeasible("feasible mask is empty".into()));
    }
    let ehat = sens.ehat_field(pair)?;
    let projected = feas.project(&ehat.coeffs.mapv(|v| -v));
    normalized_map(pair.grid, projected, feas.mask.clone(), "mixing objective")
}

/// Transfer matrix of the kernel path `k0 + delta * kdot`, renormalized only
/// to absorb round-off.
///
/// Fails when the step leaves the nonnegativity range of the kernel; the
/// error reports the largest admissible step in the requested direction.
pub fn perturbed_operator_kernel(
    a: &TransferMatrix,
    kdot: &KernelPerturbation,
    delta: f64,
) -> Result<TransferMatrix> {
    if kdot.grid != a.grid {
        return Err(Error::GridMismatch(
            "matrix and perturbation grids differ".into(),
        ));
    }
    let n = a.grid.n();
    if delta != 0.0 {
        // kernel-scale nonnegativity: n*entries + delta*kdot >= 0
        let mut max_step = f64::INFINITY;
        for (idx, &kd) in kdot.values.indexed_iter() {
            let directional = if delta > 0.0 { kd } else { -kd };
            if directional < 0.0 {
                let k0 = n as f64 * a.entries[idx];
                max_step = max_step.min(k0 / -directional);
            }
        }
        if delta.abs() > max_step * (1.0 + 1e-12) {
            return Err(Error::StepTooLarge {
                requested: delta,
                max_admissible: max_step,
            });
        }
    }
    let mut entries = &a.entries + &(delta / n as f64 * &kdot.values);
    let mut max_dev = 0.0_f64;
    for j in 0..n {
        let mut sum = 0.0;
        for i in 0..n {
            entries[[i, j]] = entries[[i, j]].max(0.0);
            sum += entries[[i, j]];
        }
        let dev = (sum - 1.0).abs();
        max_dev = max_dev.max(dev);
        if dev > 1e-10 {
            return Err(Error::Precondition(format!(
                "perturbed column {j} sums to {sum}; the perturbation does not have zero column means"
            )));
        }
        for i in 0..n {
            entries[[i, j]] /= sum;
        }
    }
    let mut metadata = a.metadata.clone();
    metadata.raw_colsum_max_dev = max_dev;
    Ok(TransferMatrix {
        grid: a.grid,
        entries,
        metadata,
    })
}

/// The map moved along a piecewise-constant perturbation direction. The
/// perturbed map may overshoot [0, 1] slightly; the reflecting boundary of
/// the kernel absorbs this.
pub fn perturbed_map_model(map: &MapModel, tdot: &MapPerturbation, delta: f64) -> MapModel {
    let base = map.clone();
    let dir = tdot.clone();
    MapModel::new(
        move |y| base.eval(y) + delta * dir.eval(y),
        format!("{}+step", map.description),
        map.parameters.clone(),
    )
}

/// Transfer matrix of the map path `T0 + delta * Tdot`, reassembled with the
/// same quadrature.
pub fn perturbed_operator_map(
    grid: Grid,
    map: &MapModel,
    noise: &NoiseModel,
    quad: &QuadratureSpec,
    tdot: &MapPerturbation,
    delta: f64,
) -> Result<TransferMatrix> {
    let moved = perturbed_map_model(map, tdot, delta);
    assemble_transfer_matrix(grid, &moved, noise, quad)
}

// ---------------------------------------------------------------------------
// Brute-force optimality certification.
// ---------------------------------------------------------------------------

/// Outcome of comparing an optimum against random feasible candidates.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OptimalityCertificate {
    pub candidates: usize,
    pub optimum_objective: f64,
    pub best_random_objective: f64,
    /// Fraction of candidates the optimum strictly beats.
    pub beaten_fraction: f64,
    pub strictly_beats_all: bool,
    /// Cosine between the optimum and the projected objective gradient.
    pub kkt_cosine: f64,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniform draws
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Certify a kernel-perturbation optimum against random feasible unit-norm
/// candidates. `gradient` is the Riesz field of the objective being
/// maximized (negate it for minimization problems before calling).
pub fn certify_kernel_optimality(
    gradient: &Array2<f64>,
    feas: &KernelFeasibility,
    optimum: &KernelPerturbation,
    candidates: usize,
    seed: u64,
) -> Result<OptimalityCertificate> {
    let n = feas.grid.n() as f64;
    let inner = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (n * n)
    };
    let opt_obj = inner(&optimum.values, gradient);
    let projected = feas.project(gradient);
    let pnorm = kernel_field_norm(feas.grid, &projected);
    let onorm = optimum.norm();
    if pnorm <= DEGENERATE_FIELD_TOL || onorm <= DEGENERATE_FIELD_TOL {
        return Err(Error::DegenerateObjective(
            "certification needs a nonvanishing projected gradient".into(),
        ));
    }
    let kkt_cosine = inner(&optimum.values, &projected) / (pnorm * onorm);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = feas.grid.n();
    let mut best = f64::NEG_INFINITY;
    let mut beaten = 0usize;
    let mut used = 0usize;
    while used < candidates {
        let raw = Array2::from_shape_fn((dims, dims), |_| standard_normal(&mut rng));
        let mut cand = feas.project(&raw);
        let norm = kernel_field_norm(feas.grid, &cand);
        if norm <= 1e-12 {
            continue;
        }
        cand.mapv_inplace(|v| v / norm);
        let obj = inner(&cand, gradient);
        if obj > best {
            best = obj;
        }
        if opt_obj > obj {
            beaten += 1;
        }
        used += 1;
    }
    Ok(OptimalityCertificate {
        candidates,
        optimum_objective: opt_obj,
        best_random_objective: best,
        beaten_fraction: beaten as f64 / candidates as f64,
        strictly_beats_all: opt_obj > best,
        kkt_cosine,
    })
}

/// Certify a map-perturbation optimum against random feasible unit-norm
/// candidates; same conventions as the kernel version.
pub fn certify_map_optimality(
    gradient: &Array1<f64>,
    feas: &MapFeasibility,
    optimum: &MapPerturbation,
    candidates: usize,
    seed: u64,
) -> Result<OptimalityCertificate> {
    let n = feas.grid.n() as f64;
    let inner = |a: &Array1<f64>, b: &Array1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / n
    };
    let opt_obj = inner(&optimum.values, gradient);
    let projected = feas.project(gradient);
    let pnorm = vector_field_norm(feas.grid, &projected);
    let onorm = optimum.norm();
    if pnorm <= DEGENERATE_FIELD_TOL || onorm <= DEGENERATE_FIELD_TOL {
        return Err(Error::DegenerateObjective(
            "certification needs a nonvanishing projected gradient".into(),
        ));
    }
    let kkt_cosine = inner(&optimum.values, &projected) / (pnorm * onorm);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = feas.grid.n();
    let mut best = f64::NEG_INFINITY;
    let mut beaten = 0usize;
    let mut used = 0usize;
    while used < candidates {
        let raw = Array1::from_shape_fn(dims, |_| standard_normal(&mut rng));
        let mut cand = feas.project(&raw);
        let norm = vector_field_norm(feas.grid, &cand);
        if norm <= 1e-12 {
            continue;
        }
        cand.mapv_inplace(|v| v / norm);
        let obj = inner(&cand, gradient);
        if obj > best {
            best = obj;
        }
        if opt_obj > obj {
            beaten += 1;
        }
        used += 1;
    }
    Ok(OptimalityCertificate {
        candidates,
        optimum_objective: opt_obj,
        best_random_objective: best,
        beaten_fraction: beaten as f64 / candidates as f64,
        strictly_beats_all: opt_obj > best,
        kkt_cosine,
    })
}

/// A random feasible unit-norm kernel perturbation: a standard-normal field
/// projected onto the feasible subspace and normalized.
pub fn random_feasible_kernel(feas: &KernelFeasibility, seed: u64) -> Result<KernelPerturbation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = feas.grid.n();
    for _ in 0..64 {
        let raw = Array2::from_shape_fn((n, n), |_| standard_normal(&mut rng));
        let mut cand = feas.project(&raw);
        let norm = kernel_field_norm(feas.grid, &cand);
        if norm > 1e-12 {
            cand.mapv_inplace(|v| v / norm);
            return KernelPerturbation::new(feas.grid, cand, Some(feas.mask.clone()));
        }
    }
    Err(Error::Infeasible(
        "feasible subspace of kernel perturbations is trivial".into(),
    ))
}

/// A random feasible unit-norm map perturbation.
pub fn random_feasible_map(feas: &MapFeasibility, seed: u64) -> Result<MapPerturbation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = feas.grid.n();
    for _ in 0..64 {
        let raw = Array1::from_shape_fn(n, |_| standard_normal(&mut rng));
        let mut cand = feas.project(&raw);
        let norm = vector_field_norm(feas.grid, &cand);
        if norm > 1e-12 {
            cand.mapv_inplace(|v| v / norm);
            return MapPerturbation::new(feas.grid, cand, Some(feas.mask.clone()));
        }
    }
    Err(Error::Infeasible(
        "feasible subspace of map perturbations is trivial".into(),
    ))
}

/// Riesz field of the expectation objective for kernel perturbations:
/// gradient[i][j] = y_i f0_j with y the adjoint-resolvent image of c.
pub fn expectation_kernel_gradient(
    a: &TransferMatrix,
    f0: &DensityVector,
    c: &DensityVector,
) -> Result<Array2<f64>> {
    let y = resolvent_solve_adjoint(a, c, f0)?;
    let n = a.grid.n();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        y.coeffs[i] * f0.coeffs[j]
    }))
}

/// Riesz field of the expectation objective for map perturbations:
/// gradient[j] = -f0_j * (G y)_j.
pub fn expectation_map_gradient(
    a: &TransferMatrix,
    f0: &DensityVector,
    c: &DensityVector,
    sens: &MapSensitivity,
) -> Result<Array1<f64>> {
    let y = resolvent_solve_adjoint(a, c, f0)?;
    let g = sens.apply(&y)?;
    Ok(Array1::from_shape_fn(a.grid.n(), |j| {
        -f0.coeffs[j] * g.coeffs[j]
    }))
}
