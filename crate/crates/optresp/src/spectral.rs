//! Invariant densities, subdominant eigenpairs, resolvent solves on the
//! zero-mean subspace, and mixing diagnostics.
//!
//! The discrete adjoint is the plain transpose (equal cell measures), so left
//! eigenvectors satisfy `A^T ehat = lambda ehat` with the same eigenvalue as
//! the right vector. For a complex eigenvalue the pairing that can be
//! normalized is the bilinear one, `(1/n) sum ehat_i e_i = 1`; for real pairs
//! this coincides with the discrete inner product. The right vector's phase
//! is fixed by making its largest-modulus component real positive, which
//! makes every downstream field deterministic across runs.

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, Solve};
use num_complex::Complex64;
use serde::Serialize;

use crate::discretization::{fmt_float, DensityVector, Grid, TransferMatrix};
use crate::error::{Error, Result};

/// Residual tolerance for eigenpairs, relative to the operator norm.
pub const EIG_RESIDUAL_TOL: f64 = 1e-8;
/// Minimum distance to the nearest other eigenvalue for a simple eigenvalue.
pub const SIMPLICITY_TOL: f64 = 1e-8;
/// Minimum spectral gap below 1 required of subdominant eigenvalues.
pub const GAP_TOL: f64 = 1e-8;
/// Residual tolerance for resolvent solves.
pub const RESOLVENT_RESIDUAL_TOL: f64 = 1e-10;
/// Residual tolerance for the invariant density.
pub const INVARIANT_RESIDUAL_TOL: f64 = 1e-10;

/// Which subdominant eigenvalue to select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EigSelector {
    /// Largest modulus strictly inside the unit circle.
    LargestModulus,
    /// Largest modulus among eigenvalues with zero imaginary part.
    LargestModulusReal,
}

/// Eigenvalue with biorthonormalized right/left eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub grid: Grid,
    pub lambda: Complex64,
    /// Right eigenvector e with A e = lambda e.
    pub right: Array1<Complex64>,
    /// Left eigenvector ehat with A^T ehat = lambda ehat and
    /// (1/n) sum ehat_i e_i = 1.
    pub left: Array1<Complex64>,
    /// True when the eigenvalue is isolated from the rest of the spectrum.
    pub geometric_multiplicity_check: bool,
}

/// Discrete L2 norm of a complex vector.
pub fn cnorm(v: &Array1<Complex64>) -> f64 {
    (v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64).sqrt()
}

/// Bilinear pairing (1/n) sum f_i g_i (no conjugation).
pub fn bilinear_pairing(f: &Array1<Complex64>, g: &Array1<Complex64>) -> Complex64 {
    f.iter()
        .zip(g.iter())
        .map(|(a, b)| a * b)
        .sum::<Complex64>()
        / f.len() as f64
}

/// Full spectrum of a transfer matrix with right and left eigenvectors,
/// sorted by modulus descending (ties: real part descending, imaginary
/// ascending).
#[derive(Debug, Clone)]
pub struct SpectralSet {
    pub grid: Grid,
    eigenvalues: Vec<Complex64>,
    right: Vec<Array1<Complex64>>,
    left_eigenvalues: Vec<Complex64>,
    left: Vec<Array1<Complex64>>,
    op_norm: f64,
}

fn sort_spectrum(
    vals: Array1<Complex64>,
    vecs: Array2<Complex64>,
) -> (Vec<Complex64>, Vec<Array1<Complex64>>) {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| {
        vals[b]
            .norm()
            .total_cmp(&vals[a].norm())
            .then(vals[b].re.total_cmp(&vals[a].re))
            .then(vals[a].im.total_cmp(&vals[b].im))
    });
    let sorted_vals = idx.iter().map(|&i| vals[i]).collect();
    let sorted_vecs = idx.iter().map(|&i| vecs.column(i).to_owned()).collect();
    (sorted_vals, sorted_vecs)
}

impl SpectralSet {
    /// Dense eigendecomposition of the matrix and its transpose.
    pub fn compute(a: &TransferMatrix) -> Result<Self> {
        let (vals_r, vecs_r) = a
            .entries
            .eig()
            .map_err(|e| Error::Spectral(format!("eigendecomposition failed: {e}")))?;
        let at = a.entries.t().to_owned();
        let (vals_l, vecs_l) = at
            .eig()
            .map_err(|e| Error::Spectral(format!("adjoint eigendecomposition failed: {e}")))?;
        let (eigenvalues, right) = sort_spectrum(vals_r, vecs_r);
        let (left_eigenvalues, left) = sort_spectrum(vals_l, vecs_l);
        // operator norm estimate: maximum absolute column sum
        let op_norm = (0..a.grid.n())
            .map(|j| a.entries.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(Self {
            grid: a.grid,
            eigenvalues,
            right,
            left_eigenvalues,
            left,
            op_norm,
        })
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    pub fn left_eigenvalues(&self) -> &[Complex64] {
        &self.left_eigenvalues
    }

    /// Distance from the eigenvalue at `index` to the nearest other one.
    pub fn isolation(&self, index: usize) -> f64 {
        let lambda = self.eigenvalues[index];
        self.eigenvalues
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, &mu)| (mu - lambda).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Biorthonormalized eigenpair for the eigenvalue at `index` in the
    /// sorted order. Fails if the eigenvalue is not isolated or the left
    /// partner cannot be paired.
    pub fn eigenpair(&self, index: usize) -> Result<EigenPair> {
        let lambda = self.eigenvalues[index];
        let isolation = self.isolation(index);
        if isolation <= SIMPLICITY_TOL {
            return Err(Error::Degeneracy(format!(
                "eigenvalue {lambda} is only {isolation:e} away from another eigenvalue"
            )));
        }

        // phase-fix the right vector: largest-modulus component real positive
        let mut e = self.right[index].clone();
        let m = (0..e.len())
            .max_by(|&i, &j| e[i].norm().total_cmp(&e[j].norm()))
            .expect("eigenvector is nonempty");
        let phase = e[m] / e[m].norm();
        for z in e.iter_mut() {
            *z /= phase;
        }

        // find the left partner: nearest eigenvalue of the transpose
        let li = (0..self.left_eigenvalues.len())
            .min_by(|&i, &j| {
                (self.left_eigenvalues[i] - lambda)
                    .norm()
                    .total_cmp(&(self.left_eigenvalues[j] - lambda).norm())
            })
            .ok_or_else(|| Error::NotFound("empty spectrum".into()))?;
        let dist = (self.left_eigenvalues[li] - lambda).norm();
        if dist > SIMPLICITY_TOL * self.op_norm.max(1.0) {
            return Err(Error::Spectral(format!(
                "no transpose eigenvalue matches {lambda} (nearest at distance {dist:e})"
            )));
        }
        let mut ehat = self.left[li].clone();
        // the transpose decomposition may hand us the conjugate partner
        let mut pairing = bilinear_pairing(&ehat, &e);
        if pairing.norm() < 1e-10 {
            ehat.mapv_inplace(|z| z.conj());
            pairing = bilinear_pairing(&ehat, &e);
        }
        if pairing.norm() < 1e-10 {
            return Err(Error::Degeneracy(format!(
                "left/right eigenvectors for {lambda} pair to zero; eigenvalue looks defective"
            )));
        }
        for z in ehat.iter_mut() {
            *z /= pairing;
        }

        Ok(EigenPair {
            grid: self.grid,
            lambda,
            right: e,
            left: ehat,
            geometric_multiplicity_check: true,
        })
    }

    /// CSV export: (index, Re lambda, Im lambda, |lambda|).
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "# n={} eigenvalues sorted by modulus descending",
            self.grid.n()
        )?;
        writeln!(w, "index,re,im,modulus")?;
        for (i, z) in self.eigenvalues.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{}",
                fmt_float(z.re),
                fmt_float(z.im),
                fmt_float(z.norm())
            )?;
        }
        Ok(())
    }
}

impl EigenPair {
    /// Residual norms (right, left) of the eigen equations.
    pub fn residuals(&self, a: &TransferMatrix) -> (f64, f64) {
        let ce = a.entries.mapv(|v| Complex64::new(v, 0.0));
        let right_res = &ce.dot(&self.right) - &self.right.mapv(|z| z * self.lambda);
        let left_res = &ce.t().dot(&self.left) - &self.left.mapv(|z| z * self.lambda);
        (cnorm(&right_res), cnorm(&left_res))
    }

    /// Export right and left eigenvectors as per-cell CSV columns.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "# n={} lambda={}+{}i centers=(i+1/2)/n",
            self.grid.n(),
            fmt_float(self.lambda.re),
            fmt_float(self.lambda.im)
        )?;
        writeln!(w, "x,right_re,right_im,left_re,left_im")?;
        for i in 0..self.grid.n() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.grid.center(i),
                fmt_float(self.right[i].re),
                fmt_float(self.right[i].im),
                fmt_float(self.left[i].re),
                fmt_float(self.left[i].im)
            )?;
        }
        Ok(())
    }
}

/// Invariant probability density of a column-stochastic matrix: the fixed
/// point with discrete integral 1, computed by a bordered direct solve.
pub fn invariant_density(a: &TransferMatrix) -> Result<DensityVector> {
    let n = a.grid.n();
    // (I - A) f + 1 * integral(f) = 1  pins  A f = f, integral(f) = 1
    let mut m = -&a.entries;
    for i in 0..n {
        m[[i, i]] += 1.0;
    }
    m += 1.0 / n as f64;
    let b = Array1::ones(n);
    let f = m
        .solve(&b)
        .map_err(|e| Error::Spectral(format!("invariant-density solve failed: {e}")))?;

    let mut f = DensityVector::new(a.grid, f)?;
    let residual = {
        let af = a.apply(&f)?;
        ((&af.coeffs - &f.coeffs).iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt()
    };
    if residual > INVARIANT_RESIDUAL_TOL {
        return Err(Error::Spectral(format!(
            "invariant density residual {residual:e} exceeds {INVARIANT_RESIDUAL_TOL:e}; \
             spectral gap too small or matrix not stochastic"
        )));
    }
    let mut worst = 0.0_f64;
    for v in f.coeffs.iter_mut() {
        if *v < 0.0 {
            worst = worst.min(*v);
            *v = 0.0;
        }
    }
    if worst < -1e-10 {
        return Err(Error::Spectral(format!(
            "invariant density has negative mass {worst:e} beyond the clamp tolerance"
        )));
    }
    let total = f.integral();
    f.coeffs.mapv_inplace(|v| v / total);
    Ok(f)
}

/// Select the subdominant eigenpair of the matrix.
pub fn subdominant_eigenpair(a: &TransferMatrix, selector: EigSelector) -> Result<EigenPair> {
    let set = SpectralSet::compute(a)?;
    subdominant_from_set(&set, selector)
}

/// Select the subdominant eigenpair from a precomputed spectrum.
pub fn subdominant_from_set(set: &SpectralSet, selector: EigSelector) -> Result<EigenPair> {
    let vals = set.eigenvalues();
    if vals.len() < 2 {
        return Err(Error::NotFound(
            "matrix has no subdominant eigenvalue".into(),
        ));
    }
    let index = match selector {
        EigSelector::LargestModulus => 1,
        EigSelector::LargestModulusReal => {
            let mut found = None;
            for (i, z) in vals.iter().enumerate().skip(1) {
                if z.im.abs() <= 1e-12 * (1.0 + z.norm()) && z.norm() > 0.1 {
                    found = Some(i);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::NotFound("no real subdominant eigenvalue of modulus above 0.1".into())
            })?
        }
    };
    let lambda = vals[index];
    if lambda.norm() >= 1.0 - GAP_TOL {
        return Err(Error::Spectral(format!(
            "no spectral gap: subdominant eigenvalue has modulus {}",
            lambda.norm()
        )));
    }
    set.eigenpair(index)
}

/// Solve (I - A) w = v on the zero-mean subspace.
pub fn resolvent_solve(a: &TransferMatrix, v: &DensityVector) -> Result<DensityVector> {
    if v.grid != a.grid {
        return Err(Error::GridMismatch("matrix and vector grids differ".into()));
    }
    if !v.is_zero_mean(1e-8) {
        return Err(Error::Precondition(format!(
            "resolvent input must have zero discrete mean, got {:e}",
            v.integral()
        )));
    }
    let n = a.grid.n();
    let mut m = -&a.entries;
    for i in 0..n {
        m[[i, i]] += 1.0;
    }
    m += 1.0 / n as f64;
    let w = m
        .solve(&v.coeffs)
        .map_err(|e| Error::LinearAlgebra(format!("resolvent solve failed: {e}")))?;
    let w = DensityVector::new(a.grid, w)?;
    let res = {
        let aw = a.apply(&w)?;
        let r = &w.coeffs - &aw.coeffs - &v.coeffs;
        (r.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt()
    };
    if res > RESOLVENT_RESIDUAL_TOL {
        return Err(Error::LinearAlgebra(format!(
            "resolvent residual {res:e} exceeds {RESOLVENT_RESIDUAL_TOL:e}; \
             system is singular beyond the rank-1 kernel"
        )));
    }
    Ok(w)
}

/// Solve (I - A^T) y = c with the normalization <y, f0> = 0.
///
/// `c` is first projected onto span{f0}-perp (c <- c - <c, f0> 1), which
/// leaves it unchanged when the pairing already vanishes.
pub fn resolvent_solve_adjoint(
    a: &TransferMatrix,
    c: &DensityVector,
    f0: &DensityVector,
) -> Result<DensityVector> {
    if c.grid != a.grid || f0.grid != a.grid {
        return Err(Error::GridMismatch("matrix and vector grids differ".into()));
    }
    let c = c.project_against(f0)?;
    let n = a.grid.n();
    // (I - A^T) y + 1 <y, f0> = c
    let mut m = -a.entries.t().to_owned();
    for i in 0..n {
        m[[i, i]] += 1.0;
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] += inv_n * f0.coeffs[j];
        }
    }
    let y = m
        .solve(&c.coeffs)
        .map_err(|e| Error::LinearAlgebra(format!("adjoint resolvent solve failed: {e}")))?;
    let y = DensityVector::new(a.grid, y)?;
    let res = {
        let aty = a.apply_transpose(&y)?;
        let r = &y.coeffs - &aty.coeffs - &c.coeffs;
        (r.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt()
    };
    if res > RESOLVENT_RESIDUAL_TOL {
        return Err(Error::LinearAlgebra(format!(
            "adjoint resolvent residual {res:e} exceeds {RESOLVENT_RESIDUAL_TOL:e}"
        )));
    }
    Ok(y)
}

/// Empirical mixing diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct MixingReport {
    pub trials: usize,
    pub horizon: usize,
    /// max over trials of ||A^N g|| / ||g|| at N = horizon.
    pub max_final_relative_norm: f64,
    /// Geometric decay rate fitted to the norm sequence.
    pub fitted_rate: f64,
    /// |lambda_2| from the eigendecomposition, for comparison.
    pub subdominant_modulus: f64,
    pub passes: bool,
}

/// Push random zero-mean vectors through the matrix and check that their
/// norms decay at the rate the subdominant eigenvalue predicts.
pub fn mixing_check(
    a: &TransferMatrix,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<MixingReport> {
    use rand::Rng;
    use rand::SeedableRng;
    let n = a.grid.n();
    let set = SpectralSet::compute(a)?;
    let subdominant_modulus = if set.eigenvalues().len() > 1 {
        set.eigenvalues()[1].norm()
    } else {
        0.0
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_final = 0.0_f64;
    let mut rates = Vec::new();
    for _ in 0..trials.max(1) {
        let mut g = DensityVector::new(
            a.grid,
            Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0))),
        )?;
        let mean = g.integral();
        g.coeffs.mapv_inplace(|v| v - mean);
        let g0_norm = g.norm_l2();
        if g0_norm == 0.0 {
            continue;
        }
        let mut norms = vec![g0_norm];
        let mut cur = g;
        for _ in 0..horizon {
            cur = a.apply(&cur)?;
            norms.push(cur.norm_l2());
        }
        max_final = max_final.max(norms[horizon] / g0_norm);
        // least-squares slope of log-norms over the second half of the run
        let start = horizon / 2;
        let pts: Vec<(f64, f64)> = (start..=horizon)
            .filter(|&k| norms[k] > 1e-14 * g0_norm)
            .map(|k| (k as f64, (norms[k] / g0_norm).ln()))
            .collect();
        if pts.len() >= 2 {
            let m = pts.len() as f64;
            let sx: f64 = pts.iter().map(|p| p.0).sum();
            let sy: f64 = pts.iter().map(|p| p.1).sum();
            let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
            let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
            rates.push(slope.exp());
        } else {
            // norms collapsed below the floor: effectively immediate mixing
            rates.push(0.0);
        }
    }
    let fitted_rate = if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    let decayed = max_final < 1e-3;
    let rate_ok = if fitted_rate == 0.0 && subdominant_modulus < 1e-8 {
        true
    } else {
        (fitted_rate - subdominant_modulus).abs() <= 0.1 * subdominant_modulus.max(1e-30)
    };
    Ok(MixingReport {
        trials,
        horizon,
        max_final_relative_norm: max_final,
        fitted_rate,
        subdominant_modulus,
        passes: decayed && rate_ok,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::discretization::AssemblyMetadata;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn toy_metadata() -> AssemblyMetadata {
        AssemblyMetadata {
            map: "toy".into(),
            parameters: vec![],
            epsilon: 0.0,
            quad_order: 0,
            raw_colsum_max_dev: 0.0,
            clamped_mass_max: 0.0,
        }
    }

    pub fn matrix_from(entries: Array2<f64>) -> TransferMatrix {
        let grid = Grid::new(entries.nrows()).unwrap();
        TransferMatrix {
            grid,
            entries,
            metadata: toy_metadata(),
        }
    }

    pub fn random_stochastic(n: usize, seed: u64) -> TransferMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((n, n), |_| rng.random_range(0.01..1.0));
        for j in 0..n {
            let s = m.column(j).sum();
            for i in 0..n {
                m[[i, j]] /= s;
            }
        }
        matrix_from(m)
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::{matrix_from, random_stochastic};
    use super::*;
    use crate::discretization::{assemble_transfer_matrix, discrete_inner_product, QuadratureSpec};
    use crate::dynamics::{AffineWrap, MapModel, NoiseModel};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_kernel_gives_uniform_density() {
        let grid = Grid::new(24).unwrap();
        let noise = NoiseModel::bump(0.2).unwrap();
        let map = MapModel::affine(1.0, 0.0, AffineWrap::Clamp);
        let a = assemble_transfer_matrix(grid, &map, &noise, &QuadratureSpec::default()).unwrap();
        let f = invariant_density(&a).unwrap();
        for v in f.coeffs.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn invariant_density_matches_power_iteration() {
        let a = random_stochastic(6, 11);
        let f = invariant_density(&a).unwrap();
        let mut p = DensityVector::ones(a.grid);
        for _ in 0..1000 {
            p = a.apply(&p).unwrap();
        }
        for i in 0..6 {
            assert_abs_diff_eq!(f.coeffs[i], p.coeffs[i], epsilon = 1e-9);
        }
        assert_abs_diff_eq!(f.integral(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invariant_density_residual_is_tight() {
        let a = random_stochastic(40, 5);
        let f = invariant_density(&a).unwrap();
        let af = a.apply(&f).unwrap();
        let res = ((&af.coeffs - &f.coeffs).iter().map(|v| v * v).sum::<f64>() / 40.0).sqrt();
        assert!(res <= 1e-10);
    }

    #[test]
    fn identity_matrix_has_no_unique_invariant_density() {
        let a = matrix_from(Array2::eye(5));
        assert!(invariant_density(&a).is_err());
    }

    #[test]
    fn rank_one_two_state_has_zero_subdominant_eigenvalue() {
        let a = matrix_from(array![[0.3, 0.3], [0.7, 0.7]]);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        assert_abs_diff_eq!(pair.lambda.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_one_larger_matrix_trips_degeneracy_check() {
        let mut m = Array2::zeros((4, 4));
        for j in 0..4 {
            m[[0, j]] = 0.1;
            m[[1, j]] = 0.2;
            m[[2, j]] = 0.3;
            m[[3, j]] = 0.4;
        }
        let a = matrix_from(m);
        let err = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap_err();
        assert!(matches!(err, Error::Degeneracy(_)));
    }

    #[test]
    fn complex_pair_and_real_selector_not_found() {
        // damped 3-cycle: eigenvalues 1 and 0.9 * complex cube roots of unity
        let cycle = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let uniform = Array2::from_elem((3, 3), 1.0 / 3.0);
        let a = matrix_from(0.9 * &cycle + 0.1 * &uniform);
        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        assert_abs_diff_eq!(pair.lambda.norm(), 0.9, epsilon = 1e-10);
        assert!(pair.lambda.im.abs() > 0.1);
        let err = subdominant_eigenpair(&a, EigSelector::LargestModulusReal).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn eigenpair_invariants_hold() {
        let a = random_stochastic(12, 3);
        let set = SpectralSet::compute(&a).unwrap();
        // top eigenvalue of a stochastic matrix is 1
        assert_abs_diff_eq!(set.eigenvalues()[0].re, 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(set.eigenvalues()[0].im, 0.0, epsilon = 1e-10);
        // spectrum in the closed unit disk
        for z in set.eigenvalues() {
            assert!(z.norm() <= 1.0 + 1e-10);
        }
        // eigenvalues of A and A^T agree as multisets
        for (i, z) in set.eigenvalues().iter().enumerate() {
            let nearest = set
                .left_eigenvalues()
                .iter()
                .map(|w| (w - z).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 1e-8, "eigenvalue {i} unmatched in transpose");
        }

        let pair = subdominant_eigenpair(&a, EigSelector::LargestModulus).unwrap();
        let (r_res, l_res) = pair.residuals(&a);
        assert!(r_res <= EIG_RESIDUAL_TOL);
        assert!(l_res <= EIG_RESIDUAL_TOL);
        // biorthonormal pairing
        let p = bilinear_pairing(&pair.left, &pair.right);
        assert_abs_diff_eq!(p.re, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(p.im, 0.0, epsilon = 1e-10);
        // phase fixing
        let m = (0..12)
            .max_by(|&i, &j| pair.right[i].norm().total_cmp(&pair.right[j].norm()))
            .unwrap();
        assert!(pair.right[m].re > 0.0);
        assert_abs_diff_eq!(pair.right[m].im, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn top_left_eigenvector_is_constant() {
        let a = random_stochastic(9, 21);
        let set = SpectralSet::compute(&a).unwrap();
        let pair = set.eigenpair(0).unwrap();
        // with (1/n) sum ehat e = 1 and a density normalized to integral 1,
        // the left vector is the constant function 1
        let f0 = invariant_density(&a).unwrap();
        let scale = pair.right[0].re / f0.coeffs[0];
        for i in 0..9 {
            assert_abs_diff_eq!(pair.right[i].re, scale * f0.coeffs[i], epsilon = 1e-9);
            assert_abs_diff_eq!(pair.left[i].re * scale, 1.0, epsilon = 1e-8);
            assert_abs_diff_eq!(pair.left[i].im, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn resolvent_zero_maps_to_zero() {
        let a = random_stochastic(8, 2);
        let z = DensityVector::zeros(a.grid);
        let w = resolvent_solve(&a, &z).unwrap();
        assert_abs_diff_eq!(w.norm_l2(), 0.0, epsilon = 1e-14);
        let f0 = invariant_density(&a).unwrap();
        let y = resolvent_solve_adjoint(&a, &z, &f0).unwrap();
        assert_abs_diff_eq!(y.norm_l2(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn resolvent_rejects_nonzero_mean() {
        let a = random_stochastic(8, 2);
        let v = DensityVector::ones(a.grid);
        assert!(matches!(
            resolvent_solve(&a, &v),
            Err(Error::Precondition(_))
        ));
    }

    /// Strongly contracting toy operator: the resolvent equals the truncated
    /// Neumann series to high accuracy.
    #[test]
    fn resolvent_matches_neumann_series() {
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // A = 0.8 * (fixed distribution) x 1^T + 0.2 * S: contraction 0.2 on V
        let p: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        let s_mat = random_stochastic(n, 33);
        let mut m = Array2::zeros((n, n));
        for j in 0..n {
            for i in 0..n {
                m[[i, j]] = 0.8 * p[i] + 0.2 * s_mat.entries[[i, j]];
            }
        }
        let a = matrix_from(m);

        let mut v = DensityVector::new(
            a.grid,
            Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0))),
        )
        .unwrap();
        let mean = v.integral();
        v.coeffs.mapv_inplace(|x| x - mean);

        let w = resolvent_solve(&a, &v).unwrap();
        let mut series = v.clone();
        let mut term = v.clone();
        for _ in 0..200 {
            term = a.apply(&term).unwrap();
            series.coeffs += &term.coeffs;
        }
        for i in 0..n {
            assert_abs_diff_eq!(w.coeffs[i], series.coeffs[i], epsilon = 1e-8);
        }

        // adjoint side with the same contraction
        let f0 = invariant_density(&a).unwrap();
        let c = {
            let raw = DensityVector::new(
                a.grid,
                Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0))),
            )
            .unwrap();
            raw.project_against(&f0).unwrap()
        };
        let y = resolvent_solve_adjoint(&a, &c, &f0).unwrap();
        let mut series = c.clone();
        let mut term = c.clone();
        for _ in 0..200 {
            term = a.apply_transpose(&term).unwrap();
            series.coeffs += &term.coeffs;
        }
        for i in 0..n {
            assert_abs_diff_eq!(y.coeffs[i], series.coeffs[i], epsilon = 1e-8);
        }
        assert_abs_diff_eq!(
            discrete_inner_product(&y, &f0).unwrap(),
            0.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn resolvent_inverts_id_minus_a_on_v() {
        let a = random_stochastic(10, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v = DensityVector::new(
            a.grid,
            Array1::from_iter((0..10).map(|_| rng.random_range(-1.0..1.0))),
        )
        .unwrap();
        let mean = v.integral();
        v.coeffs.mapv_inplace(|x| x - mean);
        let w = resolvent_solve(&a, &v).unwrap();
        let aw = a.apply(&w).unwrap();
        let recovered = &w.coeffs - &aw.coeffs;
        for i in 0..10 {
            assert_abs_diff_eq!(recovered[i], v.coeffs[i], epsilon = 1e-9);
        }
        assert!(w.is_zero_mean(1e-10));
    }

    #[test]
    fn mixing_check_examples() {
        // rank-one: everything dies in one step
        let a = matrix_from(array![[0.3, 0.3], [0.7, 0.7]]);
        let rep = mixing_check(&a, 5, 3, 0).unwrap();
        assert!(rep.passes);
        assert!(rep.max_final_relative_norm < 1e-12);

        // identity: nothing decays
        let id = matrix_from(Array2::eye(6));
        let rep = mixing_check(&id, 5, 20, 0).unwrap();
        assert!(!rep.passes);
        assert_abs_diff_eq!(rep.fitted_rate, 1.0, epsilon = 1e-6);

        // generic mixing matrix: fitted rate tracks |lambda_2|
        let a = random_stochastic(12, 19);
        let set = SpectralSet::compute(&a).unwrap();
        let l2 = set.eigenvalues()[1].norm();
        let horizon = (3.0 / -l2.log10()).ceil() as usize + 10;
        let rep = mixing_check(&a, 8, horizon, 0).unwrap();
        assert!(rep.passes, "report: {rep:?}");
    }

    #[test]
    fn spectral_csv_export() {
        let a = random_stochastic(5, 1);
        let set = SpectralSet::compute(&a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spec.csv");
        set.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("index,re,im,modulus"));
        assert_eq!(text.lines().count(), 7);
    }
}
