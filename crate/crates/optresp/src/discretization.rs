//! Ulam (piecewise-constant Galerkin) discretization of the transfer operator
//! and the discrete function spaces used by every downstream module.
//!
//! Conventions. A `DensityVector` stores local density values on an
//! equipartition of [0,1]; its integral is the (1/n)-weighted coefficient sum.
//! `TransferMatrix` stores Ulam transition probabilities, so columns sum to 1
//! and the action on density coefficients is the plain matrix-vector product,
//! which preserves the discrete integral exactly. Kernel-scale values (cell
//! averages of k(x, y)) are n times the transition entries. With equal cell
//! measures the adjoint in the discrete inner product is the plain transpose;
//! the spectral module relies on this.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FoldedShift, MapModel, NoiseModel};
use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Equipartition of [0, 1] into n cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "grid needs at least one cell".into(),
            ));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cell_width(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    /// Cell [i/n, (i+1)/n].
    pub fn cell(&self, i: usize) -> (f64, f64) {
        (i as f64 / self.n as f64, (i + 1) as f64 / self.n as f64)
    }

    /// Index of the cell containing x (x in [0,1]; 1 belongs to the last cell).
    pub fn cell_of(&self, x: f64) -> usize {
        ((x * self.n as f64) as usize).min(self.n - 1)
    }
}

/// Piecewise-constant function on a grid, stored as local density values.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVector {
    pub grid: Grid,
    pub coeffs: Array1<f64>,
}

impl DensityVector {
    pub fn new(grid: Grid, coeffs: Array1<f64>) -> Result<Self> {
        if coeffs.len() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "coefficient count {} does not match grid size {}",
                coeffs.len(),
                grid.n()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            coeffs: Array1::zeros(grid.n()),
            grid,
        }
    }

    pub fn ones(grid: Grid) -> Self {
        Self {
            coeffs: Array1::ones(grid.n()),
            grid,
        }
    }

    /// Discrete integral (1/n) sum of coefficients.
    pub fn integral(&self) -> f64 {
        self.coeffs.sum() / self.grid.n() as f64
    }

    /// Discrete L2 norm sqrt((1/n) sum of squares).
    pub fn norm_l2(&self) -> f64 {
        (self.coeffs.iter().map(|c| c * c).sum::<f64>() / self.grid.n() as f64).sqrt()
    }

    /// Membership in the zero-mean subspace.
    pub fn is_zero_mean(&self, tol: f64) -> bool {
        self.integral().abs() <= tol
    }

    /// Remove the component along the constant function so the result pairs
    /// to zero with `f0`: c - <c, f0> 1.
    pub fn project_against(&self, f0: &DensityVector) -> Result<DensityVector> {
        let ip = discrete_inner_product(self, f0)?;
        Ok(DensityVector {
            grid: self.grid,
            coeffs: &self.coeffs - ip,
        })
    }
}

/// Column-stochastic Ulam matrix of the transfer operator.
///
/// `entries[[i, j]]` is the transition probability from cell j to cell i,
/// i.e. n times the integral of the kernel over the cell pair.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub grid: Grid,
    pub entries: Array2<f64>,
    pub metadata: AssemblyMetadata,
}

/// Provenance and quality figures recorded at assembly time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssemblyMetadata {
    pub map: String,
    pub parameters: Vec<(String, f64)>,
    pub epsilon: f64,
    pub quad_order: usize,
    /// Largest |raw column sum - 1| before renormalization.
    pub raw_colsum_max_dev: f64,
    /// Largest negative mass clamped to zero in any column.
    pub clamped_mass_max: f64,
}

impl TransferMatrix {
    /// Apply to density coefficients. Preserves the discrete integral exactly
    /// because columns sum to 1.
    pub fn apply(&self, f: &DensityVector) -> Result<DensityVector> {
        if f.grid != self.grid {
            return Err(Error::GridMismatch("matrix and vector grids differ".into()));
        }
        Ok(DensityVector {
            grid: self.grid,
            coeffs: self.entries.dot(&f.coeffs),
        })
    }

    /// Apply the transpose (the discrete adjoint).
    pub fn apply_transpose(&self, f: &DensityVector) -> Result<DensityVector> {
        if f.grid != self.grid {
            return Err(Error::GridMismatch("matrix and vector grids differ".into()));
        }
        Ok(DensityVector {
            grid: self.grid,
            coeffs: self.entries.t().dot(&f.coeffs),
        })
    }

    /// Kernel-scale values (cell averages of k): n times the entries.
    pub fn kernel_values(&self) -> KernelGrid {
        KernelGrid {
            grid: self.grid,
            values: &self.entries * self.grid.n() as f64,
        }
    }

    pub fn column_sums(&self) -> Array1<f64> {
        self.entries.sum_axis(ndarray::Axis(0))
    }
}

/// Samples (cell averages) of a kernel g(x, y); rows index x, columns index y.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid {
    pub grid: Grid,
    pub values: Array2<f64>,
}

impl KernelGrid {
    pub fn new(grid: Grid, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != grid.n() || values.ncols() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "kernel shape {:?} does not match grid size {}",
                values.dim(),
                grid.n()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            values: Array2::zeros((grid.n(), grid.n())),
            grid,
        }
    }
}

/// Discrete L2([0,1]^2) norm sqrt((1/n^2) sum of squares).
pub fn discrete_kernel_norm(k: &KernelGrid) -> f64 {
    let n = k.grid.n() as f64;
    (k.values.iter().map(|v| v * v).sum::<f64>() / (n * n)).sqrt()
}

/// Discrete L2([0,1]^2) inner product (1/n^2) sum of products.
pub fn discrete_kernel_inner(a: &KernelGrid, b: &KernelGrid) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch("kernel grids differ".into()));
    }
    let n = a.grid.n() as f64;
    Ok(a.values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| x * y)
        .sum::<f64>()
        / (n * n))
}

/// Discrete L2([0,1]) inner product (1/n) sum of products.
pub fn discrete_inner_product(f: &DensityVector, g: &DensityVector) -> Result<f64> {
    if f.grid != g.grid {
        return Err(Error::GridMismatch("vector grids differ".into()));
    }
    Ok(f.coeffs
        .iter()
        .zip(g.coeffs.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / f.grid.n() as f64)
}

/// Per-cell quadrature controls for matrix assembly.
///
/// The noise density is smooth but not analytic at its support edges, so
/// Gauss-Legendre panels must resolve the support radius: x-integration is
/// clipped to the folded support and split into panels no wider than
/// `epsilon / support_resolution`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Gauss-Legendre order per panel in each direction.
    pub order: usize,
    /// Minimum number of panels per noise-support radius.
    pub support_resolution: usize,
    /// Maximum bisection depth of a y-cell when the map moves the kernel
    /// support by more than one cell across it (captures discontinuities).
    pub max_y_refine: u32,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            order: 8,
            support_resolution: 8,
            max_y_refine: 3,
        }
    }
}

impl QuadratureSpec {
    pub fn with_order(order: usize) -> Self {
        Self {
            order,
            ..Self::default()
        }
    }
}

/// Allowed deviation of a raw column sum from 1 before assembly fails.
pub const RAW_COLSUM_TOL: f64 = 1e-6;

enum Profile {
    Density,
    DensityDeriv,
}

/// Build the Ulam matrix of the transfer operator for the reflected noisy map.
///
/// Entries are n times the per-cell-pair kernel integrals, computed by
/// composite Gauss-Legendre quadrature clipped to the folded noise support
/// with panels resolving the support radius. Columns are renormalized to sum
/// exactly to 1 after the raw sums pass the `RAW_COLSUM_TOL` check.
pub fn assemble_transfer_matrix(
    grid: Grid,
    map: &MapModel,
    noise: &NoiseModel,
    quad: &QuadratureSpec,
) -> Result<TransferMatrix> {
    let mut entries = assemble_folded_profile(grid, map, noise, quad, Profile::Density)?;
    let n = grid.n();

    let mut raw_dev_max = 0.0_f64;
    let mut clamped_max = 0.0_f64;
    for j in 0..n {
        let mut clamped = 0.0;
        let mut sum = 0.0;
        for i in 0..n {
            let v = entries[[i, j]];
            if v < 0.0 {
                clamped += -v;
                entries[[i, j]] = 0.0;
            } else {
                sum += v;
            }
        }
        let dev = (sum - 1.0).abs();
        raw_dev_max = raw_dev_max.max(dev);
        clamped_max = clamped_max.max(clamped);
        if dev > RAW_COLSUM_TOL {
            let worst = (0..n)
                .max_by(|&a, &b| entries[[a, j]].total_cmp(&entries[[b, j]]))
                .unwrap_or(0);
            return Err(Error::Assembly {
                row: worst,
                col: j,
                reason: format!("raw column sum {sum} deviates from 1 by {dev:e}"),
            });
        }
        for i in 0..n {
            entries[[i, j]] /= sum;
        }
    }

    Ok(TransferMatrix {
        grid,
        entries,
        metadata: AssemblyMetadata {
            map: map.description.clone(),
            parameters: map.parameters.clone(),
            epsilon: noise.epsilon,
            quad_order: quad.order,
            raw_colsum_max_dev: raw_dev_max,
            clamped_mass_max: clamped_max,
        },
    })
}

/// Cell averages of the kernel's map-derivative factor
/// (the folded, shifted noise-density derivative). Signed; no clamping.
///
/// The derivative profile is rougher than the density, so the panel
/// resolution is tripled. The x-integral of the factor vanishes identically
/// (it integrates a derivative of a compactly supported function), so the
/// per-column means left by quadrature are removed exactly.
pub fn assemble_map_derivative_kernel(
    grid: Grid,
    map: &MapModel,
    noise: &NoiseModel,
    quad: &QuadratureSpec,
) -> Result<KernelGrid> {
    let quad = QuadratureSpec {
        support_resolution: quad.support_resolution * 3,
        ..*quad
    };
    let entries = assemble_folded_profile(grid, map, noise, &quad, Profile::DensityDeriv)?;
    // entries hold n * cell-pair integrals; kernel scale is n * entries
    let mut values = entries * grid.n() as f64;
    let n = grid.n();
    for j in 0..n {
        let mean = values.column(j).sum() / n as f64;
        for i in 0..n {
            values[[i, j]] -= mean;
        }
    }
    Ok(KernelGrid { grid, values })
}

fn assemble_folded_profile(
    grid: Grid,
    map: &MapModel,
    noise: &NoiseModel,
    quad: &QuadratureSpec,
    profile: Profile,
) -> Result<Array2<f64>> {
    let n = grid.n();
    let gl = GaussLegendre::new(quad.order)?;
    let eval: &(dyn Fn(f64) -> f64 + Sync) = match profile {
        Profile::Density => &|z| noise.density(z),
        Profile::DensityDeriv => &|z| noise.density_deriv(z),
    };

    let columns: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut col = vec![0.0; n];
            let (ya, yb) = grid.cell(j);
            integrate_y_panel(
                grid,
                map,
                noise,
                &gl,
                quad,
                eval,
                ya,
                yb,
                quad.max_y_refine,
                &mut col,
            )?;
            // scale cell-pair integrals by n
            for v in &mut col {
                *v *= n as f64;
            }
            Ok(col)
        })
        .collect();

    let mut entries = Array2::zeros((n, n));
    for (j, col) in columns.into_iter().enumerate() {
        let col = col?;
        for (i, v) in col.into_iter().enumerate() {
            entries[[i, j]] = v;
        }
    }
    Ok(entries)
}

/// Integrate the folded profile over one y-panel, bisecting while the kernel
/// support moves by more than one cell across the panel.
#[allow(clippy::too_many_arguments)]
fn integrate_y_panel(
    grid: Grid,
    map: &MapModel,
    noise: &NoiseModel,
    gl: &GaussLegendre,
    quad: &QuadratureSpec,
    eval: &(dyn Fn(f64) -> f64 + Sync),
    ya: f64,
    yb: f64,
    refine_left: u32,
    col: &mut [f64],
) -> Result<()> {
    let half = 0.5 * (yb - ya);
    let mid = 0.5 * (ya + yb);
    let ys: Vec<f64> = gl.nodes.iter().map(|t| mid + half * t).collect();
    let ts: Vec<f64> = ys.iter().map(|&y| map.eval(y)).collect();

    if refine_left > 0 {
        let max_jump = ts
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max);
        if max_jump > grid.cell_width() {
            integrate_y_panel(
                grid,
                map,
                noise,
                gl,
                quad,
                eval,
                ya,
                mid,
                refine_left - 1,
                col,
            )?;
            integrate_y_panel(
                grid,
                map,
                noise,
                gl,
                quad,
                eval,
                mid,
                yb,
                refine_left - 1,
                col,
            )?;
            return Ok(());
        }
    }

    let max_panel_width = noise.epsilon / quad.support_resolution as f64;
    for (&y_w, &t) in gl.weights.iter().zip(&ts) {
        let w = y_w * half;
        let fold = FoldedShift::new(t, noise.epsilon)?;
        let (lo, hi) = fold.support;
        let i_min = grid.cell_of(lo.max(0.0)).saturating_sub(1);
        let i_max = (grid.cell_of(hi.min(1.0)) + 1).min(grid.n() - 1);
        for (i, c) in col.iter_mut().enumerate().take(i_max + 1).skip(i_min) {
            let (xa, xb) = grid.cell(i);
            // integrate only over the intersection with the folded support
            let a = xa.max(lo);
            let b = xb.min(hi);
            if b <= a {
                continue;
            }
            let panels = ((b - a) / max_panel_width).ceil().max(1.0) as usize;
            let ix = gl.integrate_panels(a, b, panels, |x| fold.eval(eval, x));
            *c += w * ix;
        }
    }
    Ok(())
}

/// Ulam projection of an observable: per-cell averages by quadrature.
pub fn project_observable<F: Fn(f64) -> f64>(grid: Grid, c: F) -> Result<DensityVector> {
    let gl = GaussLegendre::new(16)?;
    let n = grid.n();
    let mut coeffs = Array1::zeros(n);
    for i in 0..n {
        let (a, b) = grid.cell(i);
        let v = gl.integrate(a, b, &c) * n as f64;
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "observable produced a non-finite cell average on cell {i}"
            )));
        }
        coeffs[i] = v;
    }
    DensityVector::new(grid, coeffs)
}

// ---------------------------------------------------------------------------
// Serialization: CSV exports and a compact binary cache.
// ---------------------------------------------------------------------------

fn metadata_header(meta: &AssemblyMetadata, grid: Grid) -> String {
    let params: Vec<String> = meta
        .parameters
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    format!(
        "# n={} map={} params=[{}] epsilon={} quad_order={} convention=rows-x-cols-y cell-centers=(i+1/2)/n\n",
        grid.n(),
        meta.map,
        params.join(";"),
        meta.epsilon,
        meta.quad_order
    )
}

impl TransferMatrix {
    /// Row-major CSV with a metadata header line.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(metadata_header(&self.metadata, self.grid).as_bytes())?;
        write_matrix_rows(&mut w, &self.entries)?;
        Ok(())
    }

    /// Compact binary cache keyed by assembly metadata.
    pub fn write_cache<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        let meta = serde_json::to_vec(&self.metadata)
            .map_err(|e| Error::Format(format!("cache metadata encoding failed: {e}")))?;
        w.write_all(&(self.grid.n() as u64).to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        for v in self.entries.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Load a cached matrix; the stored metadata must match `expected`
    /// in map identity, noise level, and quadrature order.
    pub fn read_cache<P: AsRef<Path>>(path: P, expected: &AssemblyMetadata) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a transfer-matrix cache file".into()));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let n = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        let meta_len = u64::from_le_bytes(buf8) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let metadata: AssemblyMetadata = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Format(format!("cache metadata decoding failed: {e}")))?;
        if metadata.map != expected.map
            || metadata.parameters != expected.parameters
            || metadata.epsilon != expected.epsilon
            || metadata.quad_order != expected.quad_order
        {
            return Err(Error::Format(
                "cache metadata does not match the requested assembly".into(),
            ));
        }
        let grid = Grid::new(n)?;
        let mut entries = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                r.read_exact(&mut buf8)?;
                entries[[i, j]] = f64::from_le_bytes(buf8);
            }
        }
        Ok(Self {
            grid,
            entries,
            metadata,
        })
    }
}

const CACHE_MAGIC: &[u8; 8] = b"ULAMCSH1";

impl KernelGrid {
    /// Row-major CSV with an axis-metadata header (rows are x cell centers
    /// ascending, columns are y cell centers ascending).
    pub fn write_csv<P: AsRef<Path>>(&self, path: P, label: &str) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "# {label} n={} rows=x-cell-centers cols=y-cell-centers centers=(i+1/2)/n",
            self.grid.n()
        )?;
        write_matrix_rows(&mut w, &self.values)?;
        Ok(())
    }
}

impl DensityVector {
    /// Two-column CSV (cell center, value) with a grid header.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P, label: &str) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# {label} n={} centers=(i+1/2)/n", self.grid.n())?;
        writeln!(w, "x,value")?;
        for (i, v) in self.coeffs.iter().enumerate() {
            writeln!(w, "{},{}", self.grid.center(i), fmt_float(*v))?;
        }
        Ok(())
    }
}

fn write_matrix_rows<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_float(m[[i, j]])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn fmt_float(v: f64) -> String {
    // shortest round-trip representation; locale-independent
    format!("{v}")
}

/// Read a two-column CSV of (x, T(x)) samples, skipping comment lines.
pub fn read_table_csv<P: AsRef<Path>>(path: P) -> Result<Vec<(f64, f64)>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("x,") {
            continue;
        }
        let mut parts = t.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| Error::Format(format!("line {}: expected two columns", lineno + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
        };
        let x = parse(parts.next())?;
        let tx = parse(parts.next())?;
        out.push((x, tx));
    }
    Ok(out)
}
