//! Linear-response formulas: density response to kernel and map
//! perturbations, eigenvalue response, the mixing-rate derivative, and
//! finite-difference verification oracles.
//!
//! A kernel perturbation acts on density coefficients through the
//! (1/n)-weighted sum, the discrete integral operator with that kernel. Map
//! perturbations are converted to kernel perturbations through the
//! `MapSensitivity` factor matrix, which is assembled with the same
//! quadrature as the transfer matrix; this makes the two-path identities
//! (map response vs. converted kernel response) hold to round-off.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::Serialize;

use crate::discretization::{
    assemble_map_derivative_kernel, discrete_inner_product, discrete_kernel_inner, DensityVector,
    Grid, KernelGrid, QuadratureSpec, TransferMatrix,
};
use crate::dynamics::{MapModel, NoiseModel};
use crate::error::{Error, Result};
use crate::spectral::{self, EigenPair, SpectralSet};

/// Tolerance on per-column means for membership in the zero-column-mean
/// space of kernel perturbations.
pub const VKER_TOL: f64 = 1e-9;

/// Acceptance band for first-order finite-difference convergence ratios.
pub const RATIO_BAND: (f64, f64) = (1.3, 2.7);

/// Infinitesimal kernel perturbation on the grid (kernel scale).
#[derive(Debug, Clone)]
pub struct KernelPerturbation {
    pub grid: Grid,
    pub values: Array2<f64>,
    pub support_mask: Option<Array2<bool>>,
}

impl KernelPerturbation {
    pub fn new(
        grid: Grid,
        values: Array2<f64>,
        support_mask: Option<Array2<bool>>,
    ) -> Result<Self> {
        let n = grid.n();
        if values.dim() != (n, n) {
            return Err(Error::GridMismatch(format!(
                "kernel perturbation shape {:?} does not match grid size {n}",
                values.dim()
            )));
        }
        if let Some(mask) = &support_mask {
            if mask.dim() != (n, n) {
                return Err(Error::GridMismatch("mask shape mismatch".into()));
            }
            for ((i, j), &m) in mask.indexed_iter() {
                if !m && values[[i, j]] != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "kernel perturbation is nonzero off its support mask at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            grid,
            values,
            support_mask,
        })
    }

    /// Check zero column means (the discrete "zero average in x" condition).
    pub fn check_zero_column_means(&self) -> Result<()> {
        let n = self.grid.n();
        for j in 0..n {
            let mean = self.values.column(j).sum() / n as f64;
            if mean.abs() > VKER_TOL {
                return Err(Error::Precondition(format!(
                    "kernel perturbation column {j} has mean {mean:e}, not zero"
                )));
            }
        }
        Ok(())
    }

    /// Discrete L2([0,1]^2) norm.
    pub fn norm(&self) -> f64 {
        let n = self.grid.n() as f64;
        (self.values.iter().map(|v| v * v).sum::<f64>() / (n * n)).sqrt()
    }

    pub fn as_kernel_grid(&self) -> KernelGrid {
        KernelGrid {
            grid: self.grid,
            values: self.values.clone(),
        }
    }

    /// Action of the associated integral operator on density coefficients.
    pub fn apply(&self, f: &DensityVector) -> Result<DensityVector> {
        if f.grid != self.grid {
            return Err(Error::GridMismatch(
                "perturbation and vector grids differ".into(),
            ));
        }
        Ok(DensityVector {
            grid: self.grid,
            coeffs: self.values.dot(&f.coeffs) / self.grid.n() as f64,
        })
    }
}

/// Infinitesimal map perturbation: values of Tdot at cell centers,
/// extended piecewise-constantly over the cells.
#[derive(Debug, Clone)]
pub struct MapPerturbation {
    pub grid: Grid,
    pub values: Array1<f64>,
    pub support_mask: Option<Array1<bool>>,
}

impl MapPerturbation {
    pub fn new(
        grid: Grid,
        values: Array1<f64>,
        support_mask: Option<Array1<bool>>,
    ) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(Error::GridMismatch(
                "map perturbation length mismatch".into(),
            ));
        }
        if let Some(mask) = &support_mask {
            if mask.len() != grid.n() {
                return Err(Error::GridMismatch("mask length mismatch".into()));
            }
            for (j, &m) in mask.iter().enumerate() {
                if !m && values[j] != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "map perturbation is nonzero off its support mask at {j}"
                    )));
                }
            }
        }
        Ok(Self {
            grid,
            values,
            support_mask,
        })
    }

    /// Discrete L2 norm.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.grid.n() as f64).sqrt()
    }

    /// Piecewise-constant evaluation at a point of [0, 1].
    pub fn eval(&self, y: f64) -> f64 {
        self.values[self.grid.cell_of(y.clamp(0.0, 1.0))]
    }
}

/// The kernel's sensitivity to map perturbations: cell averages of the
/// folded, shifted noise-density derivative, assembled once per system.
///
/// Houses the conversion map-perturbation -> kernel-perturbation and the
/// y-space fields pairing map perturbations with eigenvalue derivatives.
#[derive(Debug, Clone)]
pub struct MapSensitivity {
    pub grid: Grid,
    /// factor[[i, j]]: cell average over (x_i, y_j) of the folded shifted
    /// density derivative.
    pub factor: KernelGrid,
}

impl MapSensitivity {
    pub fn assemble(
        grid: Grid,
        map: &MapModel,
        noise: &NoiseModel,
        quad: &QuadratureSpec,
    ) -> Result<Self> {
        Ok(Self {
            grid,
            factor: assemble_map_derivative_kernel(grid, map, noise, quad)?,
        })
    }

    /// Integrate an x-space function against the factor: the y-space
    /// sensitivity field of the kernel to map changes.
    pub fn apply(&self, f: &DensityVector) -> Result<DensityVector> {
        if f.grid != self.grid {
            return Err(Error::GridMismatch(
                "sensitivity and vector grids differ".into(),
            ));
        }
        let n = self.grid.n();
        let mut out = Array1::zeros(n);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.factor.values[[i, j]] * f.coeffs[i];
            }
            out[j] = acc / n as f64;
        }
        DensityVector::new(self.grid, out)
    }

    fn apply_complex(&self, f: &Array1<Complex64>) -> Array1<Complex64> {
        let n = self.grid.n();
        Array1::from_shape_fn(n, |j| {
            let mut acc = Complex64::ZERO;
            for i in 0..n {
                acc += self.factor.values[[i, j]] * f[i];
            }
            acc / n as f64
        })
    }

    /// Kernel-scale derivative induced by a map perturbation:
    /// values[i][j] = -factor[i][j] * Tdot(y_j).
    pub fn kernel_perturbation(&self, tdot: &MapPerturbation) -> Result<KernelPerturbation> {
        if tdot.grid != self.grid {
            return Err(Error::GridMismatch(
                "sensitivity and perturbation grids differ".into(),
            ));
        }
        let n = self.grid.n();
        let values = Array2::from_shape_fn((n, n), |(i, j)| {
            -self.factor.values[[i, j]] * tdot.values[j]
        });
        KernelPerturbation::new(self.grid, values, None)
    }

    /// y-space field pairing map perturbations with the eigenvalue
    /// derivative: <H, Tdot> = d(lambda)/d(delta).
    pub fn h_field(&self, pair: &EigenPair) -> Result<HField> {
        if pair.grid != self.grid {
            return Err(Error::GridMismatch(
                "sensitivity and eigenpair grids differ".into(),
            ));
        }
        let g_left = self.apply_complex(&pair.left);
        let values = Array1::from_shape_fn(self.grid.n(), |j| -pair.right[j] * g_left[j]);
        Ok(HField {
            grid: self.grid,
            values,
        })
    }

    /// y-space field pairing map perturbations with the mixing objective:
    /// <Tdot, Ehat> = <kdot(Tdot), E>.
    pub fn ehat_field(&self, pair: &EigenPair) -> Result<DensityVector> {
        if pair.grid != self.grid {
            return Err(Error::GridMismatch(
                "sensitivity and eigenpair grids differ".into(),
            ));
        }
        let e_field = build_e_field(pair);
        let n = self.grid.n();
        let mut out = Array1::zeros(n);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.factor.values[[i, j]] * e_field.values[[i, j]];
            }
            out[j] = -acc / n as f64;
        }
        DensityVector::new(self.grid, out)
    }
}

/// Complex y-space field with a bilinear pairing against map perturbations.
#[derive(Debug, Clone)]
pub struct HField {
    pub grid: Grid,
    pub values: Array1<Complex64>,
}

impl HField {
    pub fn pair_with(&self, tdot: &MapPerturbation) -> Result<Complex64> {
        if tdot.grid != self.grid {
            return Err(Error::GridMismatch(
                "field and perturbation grids differ".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(tdot.values.iter())
            .map(|(h, t)| h * t)
            .sum::<Complex64>()
            / self.grid.n() as f64)
    }
}

/// First-order response of the invariant density to a kernel perturbation:
/// the resolvent applied to the perturbation operator acting on f0.
pub fn density_response_kernel(
    a: &TransferMatrix,
    f0: &DensityVector,
    kdot: &KernelPerturbation,
) -> Result<DensityVector> {
    kdot.check_zero_column_means()?;
    let v = kdot.apply(f0)?;
    spectral::resolvent_solve(a, &v)
}

/// Derivative of the expectation of `c` under the kernel perturbation.
pub fn expectation_derivative(
    a: &TransferMatrix,
    f0: &DensityVector,
    kdot: &KernelPerturbation,
    c: &DensityVector,
) -> Result<f64> {
    let r = density_response_kernel(a, f0, kdot)?;
    let c_proj = c.project_against(f0)?;
    discrete_inner_product(&c_proj, &r)
}

/// First-order response of the invariant density to a map perturbation,
/// through the kernel-derivative conversion.
pub fn density_response_map(
    a: &TransferMatrix,
    f0: &DensityVector,
    sens: &MapSensitivity,
    tdot: &MapPerturbation,
) -> Result<DensityVector> {
    let kdot = sens.kernel_perturbation(tdot)?;
    density_response_kernel(a, f0, &kdot)
}

/// Derivative of the selected eigenvalue under a kernel perturbation:
/// the biorthonormalized left/right pairing through the perturbation operator.
pub fn eigenvalue_response_kernel(
    pair: &EigenPair,
    kdot: &KernelPerturbation,
) -> Result<Complex64> {
    if pair.grid != kdot.grid {
        return Err(Error::GridMismatch(
            "eigenpair and perturbation grids differ".into(),
        ));
    }
    let n = pair.grid.n();
    let mut acc = Complex64::ZERO;
    for j in 0..n {
        let mut col = Complex64::ZERO;
        for i in 0..n {
            col += kdot.values[[i, j]] * pair.left[i];
        }
        acc += col * pair.right[j];
    }
    Ok(acc / (n as f64 * n as f64))
}

/// The kernel-space gradient field of the mixing objective: pairing a kernel
/// perturbation with it gives |lambda|^2 times the derivative of
/// Re(log lambda).
pub fn build_e_field(pair: &EigenPair) -> KernelGrid {
    let n = pair.grid.n();
    let lc = pair.lambda.conj();
    let values = Array2::from_shape_fn((n, n), |(i, j)| (lc * pair.left[i] * pair.right[j]).re);
    KernelGrid {
        grid: pair.grid,
        values,
    }
}

/// Instantaneous rate of change of Re(log lambda) under the perturbation.
pub fn mixing_rate_derivative(pair: &EigenPair, kdot: &KernelPerturbation) -> Result<f64> {
    let modulus_sq = pair.lambda.norm_sqr();
    if modulus_sq <= 1e-12 {
        return Err(Error::Singularity(
            "mixing rate derivative undefined for an eigenvalue at the origin".into(),
        ));
    }
    let e = build_e_field(pair);
    let ip = discrete_kernel_inner(&e, &kdot.as_kernel_grid())?;
    Ok(ip / modulus_sq)
}

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------

/// Value slot of a response report.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum ResponseValue {
    Scalar(f64),
    Complex { re: f64, im: f64 },
    Vector(Vec<f64>),
}

/// Predicted response against finite differences at steps delta and delta/2.
///
/// `convergence_ratio` is the error at delta over the error at delta/2;
/// values in `RATIO_BAND` certify first-order agreement.
#[derive(Debug, Clone, Serialize)]
pub struct ResponseReport {
    pub quantity: String,
    pub delta: f64,
    pub predicted: ResponseValue,
    pub fd_delta: ResponseValue,
    pub fd_half_delta: ResponseValue,
    pub error_delta: f64,
    pub error_half_delta: f64,
    pub convergence_ratio: f64,
    pub pass: bool,
}

impl ResponseReport {
    #[allow(clippy::too_many_arguments)]
    fn from_errors(
        quantity: impl Into<String>,
        delta: f64,
        predicted: ResponseValue,
        fd_delta: ResponseValue,
        fd_half_delta: ResponseValue,
        error_delta: f64,
        error_half_delta: f64,
        scale: f64,
    ) -> Self {
        let ratio = error_delta / error_half_delta.max(1e-300);
        let converged_to_roundoff =
            error_delta <= 1e-13 * (1.0 + scale) && error_half_delta <= 1e-13 * (1.0 + scale);
        let pass = (ratio >= RATIO_BAND.0 && ratio <= RATIO_BAND.1) || converged_to_roundoff;
        Self {
            quantity: quantity.into(),
            delta,
            predicted,
            fd_delta,
            fd_half_delta,
            error_delta,
            error_half_delta,
            convergence_ratio: ratio,
            pass,
        }
    }
}

fn vector_error(a: &DensityVector, b: &DensityVector) -> f64 {
    let d = &a.coeffs - &b.coeffs;
    (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt()
}

/// Matrix of the kernel stepped along the perturbation, for derivative
/// probes. Columns are renormalized; no nonnegativity gate, because the
/// finite-difference limit does not need the stepped kernel to stay a
/// stochastic kernel.
fn kernel_step_matrix(
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
    let mut entries = &a.entries + &(delta / n as f64 * &kdot.values);
    for j in 0..n {
        let sum = entries.column(j).sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::Precondition(format!(
                "stepped column {j} sums to {sum}; perturbation lacks zero column means"
            )));
        }
        for i in 0..n {
            entries[[i, j]] /= sum;
        }
    }
    Ok(TransferMatrix {
        grid: a.grid,
        entries,
        metadata: a.metadata.clone(),
    })
}

/// Verify the density response to a kernel perturbation by perturbing the
/// matrix directly and recomputing the invariant density.
pub fn verify_density_response_kernel(
    a: &TransferMatrix,
    f0: &DensityVector,
    kdot: &KernelPerturbation,
    delta: f64,
) -> Result<ResponseReport> {
    let predicted = density_response_kernel(a, f0, kdot)?;
    let fd = |d: f64| -> Result<DensityVector> {
        let ad = kernel_step_matrix(a, kdot, d)?;
        let fd_density = spectral::invariant_density(&ad)?;
        DensityVector::new(a.grid, (&fd_density.coeffs - &f0.coeffs) / d)
    };
    let fd1 = fd(delta)?;
    let fd2 = fd(delta / 2.0)?;
    let e1 = vector_error(&fd1, &predicted);
    let e2 = vector_error(&fd2, &predicted);
    let scale = predicted.norm_l2();
    Ok(ResponseReport::from_errors(
        "density-response-kernel",
        delta,
        ResponseValue::Vector(predicted.coeffs.to_vec()),
        ResponseValue::Vector(fd1.coeffs.to_vec()),
        ResponseValue::Vector(fd2.coeffs.to_vec()),
        e1,
        e2,
        scale,
    ))
}

/// Verify the density response to a map perturbation by rebuilding the
/// matrix with the perturbed map.
#[allow(clippy::too_many_arguments)]
pub fn verify_density_response_map(
    a: &TransferMatrix,
    f0: &DensityVector,
    sens: &MapSensitivity,
    map: &MapModel,
    noise: &NoiseModel,
    quad: &QuadratureSpec,
    tdot: &MapPerturbation,
    delta: f64,
) -> Result<ResponseReport> {
    let predicted = density_response_map(a, f0, sens, tdot)?;
    let fd = |d: f64| -> Result<DensityVector> {
        let ad = crate::optimal::perturbed_operator_map(a.grid, map, noise, quad, tdot, d)?;
        let fd_density = spectral::invariant_density(&ad)?;
        DensityVector::new(a.grid, (&fd_density.coeffs - &f0.coeffs) / d)
    };
    let fd1 = fd(delta)?;
    let fd2 = fd(delta / 2.0)?;
    let e1 = vector_error(&fd1, &predicted);
    let e2 = vector_error(&fd2, &predicted);
    let scale = predicted.norm_l2();
    Ok(ResponseReport::from_errors(
        "density-response-map",
        delta,
        ResponseValue::Vector(predicted.coeffs.to_vec()),
        ResponseValue::Vector(fd1.coeffs.to_vec()),
        ResponseValue::Vector(fd2.coeffs.to_vec()),
        e1,
        e2,
        scale,
    ))
}

/// Continue the eigenvalue of the perturbed matrix nearest to the base one.
fn tracked_eigenvalue(ad: &TransferMatrix, lambda: Complex64) -> Result<Complex64> {
    let set = SpectralSet::compute(ad)?;
    set.eigenvalues()
        .iter()
        .copied()
        .min_by(|a, b| (a - lambda).norm().total_cmp(&(b - lambda).norm()))
        .ok_or_else(|| Error::Spectral("perturbed matrix has empty spectrum".into()))
}

/// Verify the eigenvalue response to a kernel perturbation by tracking the
/// continued eigenvalue of the perturbed matrix.
pub fn verify_eigenvalue_response_kernel(
    a: &TransferMatrix,
    pair: &EigenPair,
    kdot: &KernelPerturbation,
    delta: f64,
) -> Result<ResponseReport> {
    let predicted = eigenvalue_response_kernel(pair, kdot)?;
    let fd = |d: f64| -> Result<Complex64> {
        let ad = kernel_step_matrix(a, kdot, d)?;
        Ok((tracked_eigenvalue(&ad, pair.lambda)? - pair.lambda) / d)
    };
    let fd1 = fd(delta)?;
    let fd2 = fd(delta / 2.0)?;
    let e1 = (fd1 - predicted).norm();
    let e2 = (fd2 - predicted).norm();
    Ok(ResponseReport::from_errors(
        "eigenvalue-response-kernel",
        delta,
        ResponseValue::Complex {
            re: predicted.re,
            im: predicted.im,
        },
        ResponseValue::Complex {
            re: fd1.re,
            im: fd1.im,
        },
        ResponseValue::Complex {
            re: fd2.re,
            im: fd2.im,
        },
        e1,
        e2,
        predicted.norm(),
    ))
}

/// Verify the eigenvalue response to a map perturbation (the y-space field
/// pairing) by rebuilding the matrix with the perturbed map.
#[allow(clippy::too_many_arguments)]
pub fn verify_eigenvalue_response_map(
    a: &TransferMatrix,
    pair: &EigenPair,
    sens: &MapSensitivity,
    map: &MapModel,
    noise: &NoiseModel,
    quad: &QuadratureSpec,
    tdot: &MapPerturbation,
    delta: f64,
) -> Result<ResponseReport> {
    let predicted = sens.h_field(pair)?.pair_with(tdot)?;
    let fd = |d: f64| -> Result<Complex64> {
        let ad = crate::optimal::perturbed_operator_map(a.grid, map, noise, quad, tdot, d)?;
        Ok((tracked_eigenvalue(&ad, pair.lambda)? - pair.lambda) / d)
    };
    let fd1 = fd(delta)?;
    let fd2 = fd(delta / 2.0)?;
    let e1 = (fd1 - predicted).norm();
    let e2 = (fd2 - predicted).norm();
    Ok(ResponseReport::from_errors(
        "eigenvalue-response-map",
        delta,
        ResponseValue::Complex {
            re: predicted.re,
            im: predicted.im,
        },
        ResponseValue::Complex {
            re: fd1.re,
            im: fd1.im,
        },
        ResponseValue::Complex {
            re: fd2.re,
            im: fd2.im,
        },
        e1,
        e2,
        predicted.norm(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::discrete_kernel_norm as kernel_norm;
    use crate::spectral::test_support::{matrix_from, random_stochastic};
    use crate::spectral::{invariant_density, subdominant_eigenpair, EigSelector};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random kernel perturbation with exact zero column means.
    fn random_vker(grid: Grid, seed: u64) -> KernelPerturbation {
        let n = grid.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        for j in 0..n {
            let mean = values.column(j).sum() / n as f64;
            for i in 0..n {
                values[[i, j]] -= mean;
            }
        }
        KernelPerturbation::new(grid, values, None).unwrap()
    }

    fn random_tdot(grid: Grid, seed: u64) -> MapPerturbation {
        let n = grid.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MapPerturbation::new(
            grid,
            Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0))),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_perturbation_gives_zero_responses() {
        let a = random_stochastic(10, 40);
        let f0 = invariant_density(&a).unwrap();
        let kdot = KernelPerturbation::new(a.grid, Array2::zeros((10, 10)), None).unwrap();
        let r = density_response_kernel(&a, &f0, &kdot).unwrap();
        assert_abs_diff_eq!(r.norm_l2(), 0.0, epsilon = 1e-14);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        let ld = eigenvalue_response_kernel(&pair, &kdot).unwrap();
        assert_abs_diff_eq!(ld.norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            mixing_rate_derivative(&pair, &kdot).unwrap(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn response_rejects_broken_column_means() {
        let a = random_stochastic(6, 41);
        let f0 = invariant_density(&a).unwrap();
        let mut kdot = random_vker(a.grid, 1);
        kdot.values[[2, 3]] += 0.5;
        assert!(matches!(
            density_response_kernel(&a, &f0, &kdot),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn mixing_rate_is_singular_at_the_origin() {
        // rank-one two-state chain: the subdominant eigenvalue is exactly 0
        let a = matrix_from(array![[0.4, 0.4], [0.6, 0.6]]);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        assert!(pair.lambda.norm() < 1e-13);
        let kdot = random_vker(a.grid, 12);
        assert!(matches!(
            mixing_rate_derivative(&pair, &kdot),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn density_response_is_linear() {
        let a = random_stochastic(12, 42);
        let f0 = invariant_density(&a).unwrap();
        let k1 = random_vker(a.grid, 2);
        let k2 = random_vker(a.grid, 3);
        let (alpha, beta) = (1.7, -0.4);
        let combo =
            KernelPerturbation::new(a.grid, alpha * &k1.values + beta * &k2.values, None).unwrap();
        let r1 = density_response_kernel(&a, &f0, &k1).unwrap();
        let r2 = density_response_kernel(&a, &f0, &k2).unwrap();
        let rc = density_response_kernel(&a, &f0, &combo).unwrap();
        for i in 0..12 {
            assert_abs_diff_eq!(
                rc.coeffs[i],
                alpha * r1.coeffs[i] + beta * r2.coeffs[i],
                epsilon = 1e-10
            );
        }
        // response lies in the zero-mean subspace
        assert!(rc.is_zero_mean(1e-10));
    }

    #[test]
    fn expectation_derivative_duality() {
        let a = random_stochastic(14, 43);
        let f0 = invariant_density(&a).unwrap();
        let kdot = random_vker(a.grid, 4);
        let c = DensityVector::new(
            a.grid,
            Array1::from_iter((0..14).map(|i| (-(1.0 + i as f64 / 14.0)).cos())),
        )
        .unwrap();
        let primal = expectation_derivative(&a, &f0, &kdot, &c).unwrap();
        // adjoint route: <y, v> with y the adjoint resolvent of c
        let y = spectral::resolvent_solve_adjoint(&a, &c, &f0).unwrap();
        let v = kdot.apply(&f0).unwrap();
        let dual = discrete_inner_product(&y, &v).unwrap();
        assert_abs_diff_eq!(primal, dual, epsilon = 1e-10);

        // constant observables feel nothing
        let konst = DensityVector::ones(a.grid);
        assert_abs_diff_eq!(
            expectation_derivative(&a, &f0, &kdot, &konst).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn e_field_real_pair_is_scaled_outer_product() {
        let a = random_stochastic(10, 44);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulusReal)
            .or_else(|_| subdominant_eigenpair(&a, EigSelector::LargestModulus))
            .unwrap();
        if pair.lambda.im.abs() < 1e-14 {
            let e = build_e_field(&pair);
            for i in 0..10 {
                for j in 0..10 {
                    let expected = pair.lambda.re * pair.left[i].re * pair.right[j].re;
                    assert_abs_diff_eq!(e.values[[i, j]], expected, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn e_field_identical_for_conjugate_pair() {
        // damped 3-cycle has a genuinely complex subdominant pair
        let cycle = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let uniform = Array2::from_elem((3, 3), 1.0 / 3.0);
        let a = matrix_from(0.9 * &cycle + 0.1 * &uniform);
        let set = SpectralSet::compute(&a).unwrap();
        let p1 = set.eigenpair(1).unwrap();
        let p2 = set.eigenpair(2).unwrap();
        assert_abs_diff_eq!((p1.lambda - p2.lambda.conj()).norm(), 0.0, epsilon = 1e-12);
        let e1 = build_e_field(&p1);
        let e2 = build_e_field(&p2);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(e1.values[[i, j]], e2.values[[i, j]], epsilon = 1e-10);
            }
        }
        // mixing derivative is conjugate-invariant too
        let kdot = random_vker(a.grid, 5);
        assert_abs_diff_eq!(
            mixing_rate_derivative(&p1, &kdot).unwrap(),
            mixing_rate_derivative(&p2, &kdot).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn e_field_pairs_like_complex_arithmetic() {
        let cycle = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let uniform = Array2::from_elem((3, 3), 1.0 / 3.0);
        let a = matrix_from(0.85 * &cycle + 0.15 * &uniform);
        let set = SpectralSet::compute(&a).unwrap();
        let pair = set.eigenpair(1).unwrap();
        let kdot = random_vker(a.grid, 6);
        let e = build_e_field(&pair);
        let lhs = discrete_kernel_inner(&e, &kdot.as_kernel_grid()).unwrap();
        let ldot = eigenvalue_response_kernel(&pair, &kdot).unwrap();
        let rhs = (pair.lambda.conj() * ldot).re;
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn mixing_rate_matches_real_eigenvalue_ratio() {
        // symmetric two-block chain has a real subdominant eigenvalue
        let a = matrix_from(array![
            [0.6, 0.3, 0.05, 0.05],
            [0.3, 0.6, 0.05, 0.05],
            [0.05, 0.05, 0.6, 0.3],
            [0.05, 0.05, 0.3, 0.6]
        ]);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulusReal).unwrap();
        assert!(pair.lambda.im.abs() < 1e-12);
        let kdot = random_vker(a.grid, 7);
        let md = mixing_rate_derivative(&pair, &kdot).unwrap();
        let ld = eigenvalue_response_kernel(&pair, &kdot).unwrap();
        assert_abs_diff_eq!(md, ld.re / pair.lambda.re, epsilon = 1e-12);
    }

    #[test]
    fn h_field_is_zero_for_flat_noise_derivative() {
        let grid = Grid::new(16).unwrap();
        let noise = NoiseModel::custom(0.2, |_| 1.0, |_| 0.0).unwrap();
        let map = MapModel::pomeau_manneville(0.5);
        let sens =
            MapSensitivity::assemble(grid, &map, &noise, &QuadratureSpec::default()).unwrap();
        let a = random_stochastic(16, 50);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        let h = sens.h_field(&pair).unwrap();
        for v in h.values.iter() {
            assert_abs_diff_eq!(v.norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn two_path_identities_hold_to_roundoff() {
        let grid = Grid::new(32).unwrap();
        let noise = NoiseModel::bump(0.15).unwrap();
        let map = MapModel::pomeau_manneville(0.5);
        let quad = QuadratureSpec::default();
        let a = crate::discretization::assemble_transfer_matrix(grid, &map, &noise, &quad).unwrap();
        let sens = MapSensitivity::assemble(grid, &map, &noise, &quad).unwrap();
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        let tdot = random_tdot(grid, 8);
        let kdot = sens.kernel_perturbation(&tdot).unwrap();

        // eigenvalue route
        let via_h = sens.h_field(&pair).unwrap().pair_with(&tdot).unwrap();
        let via_kernel = eigenvalue_response_kernel(&pair, &kdot).unwrap();
        assert_abs_diff_eq!((via_h - via_kernel).norm(), 0.0, epsilon = 1e-12);

        // mixing objective route
        let ehat = sens.ehat_field(&pair).unwrap();
        let lhs = discrete_inner_product(
            &DensityVector::new(grid, tdot.values.clone()).unwrap(),
            &ehat,
        )
        .unwrap();
        let e = build_e_field(&pair);
        let rhs = discrete_kernel_inner(&e, &kdot.as_kernel_grid()).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);

        // real-pair shortcut for the Ehat field
        if pair.lambda.im.abs() < 1e-13 {
            let e_real = DensityVector::new(grid, pair.right.mapv(|z| z.re)).unwrap();
            let ghat = sens
                .apply(&DensityVector::new(grid, pair.left.mapv(|z| z.re)).unwrap())
                .unwrap();
            for j in 0..32 {
                let expected = -pair.lambda.re * e_real.coeffs[j] * ghat.coeffs[j];
                assert_abs_diff_eq!(ehat.coeffs[j], expected, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn finite_difference_certifies_kernel_density_response() {
        let a = random_stochastic(16, 60);
        let f0 = invariant_density(&a).unwrap();
        let kdot = random_vker(a.grid, 9);
        let report = verify_density_response_kernel(&a, &f0, &kdot, 1e-3).unwrap();
        assert!(report.pass, "report: {report:?}");
    }

    #[test]
    fn finite_difference_certifies_eigenvalue_response() {
        let a = random_stochastic(16, 61);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        let kdot = random_vker(a.grid, 10);
        let report = verify_eigenvalue_response_kernel(&a, &pair, &kdot, 1e-4).unwrap();
        assert!(report.pass, "report: {report:?}");
    }

    #[test]
    fn report_serializes_to_json() {
        let a = random_stochastic(6, 62);
        let f0 = invariant_density(&a).unwrap();
        let kdot = random_vker(a.grid, 11);
        let report = verify_density_response_kernel(&a, &f0, &kdot, 1e-3).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"convergence_ratio\""));
        assert!(json.contains("\"pass\""));
    }

    #[test]
    fn perturbation_norms_and_masks() {
        let grid = Grid::new(8).unwrap();
        let ones = KernelPerturbation::new(grid, Array2::ones((8, 8)), None).unwrap();
        assert_abs_diff_eq!(ones.norm(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            kernel_norm(&ones.as_kernel_grid()),
            ones.norm(),
            epsilon = 1e-15
        );

        let mut mask = Array2::from_elem((8, 8), false);
        mask[[1, 1]] = true;
        let mut vals = Array2::zeros((8, 8));
        vals[[0, 0]] = 1.0;
        assert!(KernelPerturbation::new(grid, vals, Some(mask)).is_err());

        let tmask = Array1::from_elem(8, false);
        let tvals = Array1::ones(8);
        assert!(MapPerturbation::new(grid, tvals, Some(tmask)).is_err());
    }
}
