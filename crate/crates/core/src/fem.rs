//! Bilinear finite elements on a uniform grid of the unit square.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SparseMatrix = CsrMatrix<f64>;

/// Gauss points of the 2-point rule on [0, 1].
const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Uniform n×n quadrilateral mesh. Nodes are numbered `j*(n+1)+i`, cells `j*n+i`,
/// and each cell lists its nodes counterclockwise starting at the lower-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct FineMesh {
    n: usize,
    coords: Vec<[f64; 2]>,
    cells: Vec<[usize; 4]>,
}

impl FineMesh {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("mesh needs at least one cell per side".into()));
        }
        let h = 1.0 / n as f64;
        let w = n + 1;
        let mut coords = Vec::with_capacity(w * w);
        for j in 0..w {
            for i in 0..w {
                coords.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut cells = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let a = j * w + i;
                cells.push([a, a + 1, a + w + 1, a + w]);
            }
        }
        Ok(Self { n, coords, cells })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn cells(&self) -> &[[usize; 4]] {
        &self.cells
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    /// Nodal interpolant of a function of the coordinates.
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.node_count(), self.coords.iter().map(|p| f(p[0], p[1])))
    }
}

/// Cellwise-constant positive coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    values: Vec<f64>,
}

impl PermeabilityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("permeability field is empty".into()));
        }
        if let Some((k, v)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "permeability must be positive and finite, cell {k} has {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn uniform(mesh: &FineMesh, value: f64) -> Result<Self> {
        Self::new(vec![value; mesh.cell_count()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    /// One line per cell row (bottom row first), comma separated.
    pub fn to_csv(&self, n: usize) -> Result<String> {
        if n * n != self.values.len() {
            return Err(Error::Dimension(format!(
                "{} values do not form a {n}x{n} grid",
                self.values.len()
            )));
        }
        let mut out = String::new();
        for row in self.values.chunks(n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut width = None;
        for (r, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("row {r}: {e}")))
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Format(format!("row {r} has {} values, expected {w}", row.len())))
                }
                _ => {}
            }
            values.extend(row);
        }
        Self::new(values)
    }

    pub fn write_csv(&self, n: usize, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(n)?)?;
        Ok(())
    }
}

/// Half-open block of cells `[i0, i1) × [j0, j1)` in cell indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

/// Rectangle in unit-square coordinates, rasterized onto a mesh by rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FracRect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl FracRect {
    pub const fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    /// Rasterize; every feature keeps at least one cell of width.
    pub fn to_cells(&self, n: usize) -> CellRect {
        let r = |t: f64| (t * n as f64).round().max(0.0) as usize;
        let (i0, j0) = (r(self.x0), r(self.y0));
        CellRect {
            i0,
            i1: r(self.x1).max(i0 + 1),
            j0,
            j1: r(self.y1).max(j0 + 1),
        }
    }
}

/// Three disjoint channels and two inclusions.
pub const DEFAULT_LAYOUT: [FracRect; 5] = [
    FracRect::new(0.0, 0.9, 0.15, 0.175),
    FracRect::new(0.1, 1.0, 0.825, 0.85),
    FracRect::new(0.15, 0.175, 0.3, 0.7),
    FracRect::new(0.40, 0.45, 0.60, 0.65),
    FracRect::new(0.70, 0.75, 0.35, 0.40),
];

pub fn rasterize(layout: &[FracRect], n: usize) -> Vec<CellRect> {
    layout.iter().map(|r| r.to_cells(n)).collect()
}

/// Background value everywhere except the listed cell blocks, which get `background * contrast`.
pub fn generate_channel_permeability(
    n: usize,
    background: f64,
    contrast: f64,
    layout: &[CellRect],
) -> Result<PermeabilityField> {
    if !(contrast >= 1.0) {
        return Err(Error::InvalidArgument(format!("contrast must be >= 1, got {contrast}")));
    }
    let mut values = vec![background; n * n];
    for (k, r) in layout.iter().enumerate() {
        if r.i0 >= r.i1 || r.j0 >= r.j1 || r.i1 > n || r.j1 > n {
            return Err(Error::InvalidArgument(format!(
                "channel {k} {r:?} is empty or outside the {n}x{n} grid"
            )));
        }
        for j in r.j0..r.j1 {
            for i in r.i0..r.i1 {
                values[j * n + i] = background * contrast;
            }
        }
    }
    PermeabilityField::new(values)
}

fn shape_values(xi: f64, eta: f64) -> [f64; 4] {
    [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), xi * eta, (1.0 - xi) * eta]
}

fn shape_gradients(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - eta), -(1.0 - xi)],
        [1.0 - eta, -xi],
        [eta, xi],
        [-eta, 1.0 - xi],
    ]
}

/// Element mass on a unit square cell (scale by h²).
pub fn reference_mass() -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let phi = shape_values(xi, eta);
            for a in 0..4 {
                for b in 0..4 {
                    m[a][b] += 0.25 * phi[a] * phi[b];
                }
            }
        }
    }
    m
}

/// Element stiffness of a square cell; independent of the cell size in 2D.
pub fn reference_stiffness() -> [[f64; 4]; 4] {
    let mut k = [[0.0; 4]; 4];
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let g = shape_gradients(xi, eta);
            for a in 0..4 {
                for b in 0..4 {
                    k[a][b] += 0.25 * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                }
            }
        }
    }
    k
}

fn assemble_scaled(mesh: &FineMesh, element: &[[f64; 4]; 4], scale: impl Fn(usize) -> f64) -> SparseMatrix {
    let n = mesh.node_count();
    let mut coo = CooMatrix::new(n, n);
    for (c, nodes) in mesh.cells().iter().enumerate() {
        let s = scale(c);
        for a in 0..4 {
            for b in 0..4 {
                coo.push(nodes[a], nodes[b], s * element[a][b]);
            }
        }
    }
    CsrMatrix::from(&coo)
}

fn check_coefficients(mesh: &FineMesh, coeff: &[f64]) -> Result<()> {
    if coeff.len() != mesh.cell_count() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} cells",
            coeff.len(),
            mesh.cell_count()
        )));
    }
    if let Some(v) = coeff.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!("nonpositive coefficient {v}")));
    }
    Ok(())
}

pub fn assemble_mass(mesh: &FineMesh) -> SparseMatrix {
    let h2 = mesh.h() * mesh.h();
    assemble_scaled(mesh, &reference_mass(), |_| h2)
}

/// Mass matrix weighted by a cellwise coefficient.
pub fn assemble_weighted_mass(mesh: &FineMesh, coeff: &[f64]) -> Result<SparseMatrix> {
    check_coefficients(mesh, coeff)?;
    let h2 = mesh.h() * mesh.h();
    Ok(assemble_scaled(mesh, &reference_mass(), |c| h2 * coeff[c]))
}

pub fn assemble_stiffness(mesh: &FineMesh, coeff: &PermeabilityField) -> Result<SparseMatrix> {
    assemble_stiffness_values(mesh, coeff.values())
}

pub fn assemble_stiffness_values(mesh: &FineMesh, coeff: &[f64]) -> Result<SparseMatrix> {
    check_coefficients(mesh, coeff)?;
    Ok(assemble_scaled(mesh, &reference_stiffness(), |c| coeff[c]))
}

/// Cellwise `exp(mean of u over the cell nodes) * kappa0`.
pub fn nonlinear_coefficient(mesh: &FineMesh, kappa0: &PermeabilityField, u: &DVector<f64>) -> Result<Vec<f64>> {
    if u.len() != mesh.node_count() {
        return Err(Error::Dimension(format!(
            "nodal vector has {} entries, mesh has {} nodes",
            u.len(),
            mesh.node_count()
        )));
    }
    if kappa0.len() != mesh.cell_count() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} cells",
            kappa0.len(),
            mesh.cell_count()
        )));
    }
    Ok(mesh
        .cells()
        .iter()
        .zip(kappa0.values())
        .map(|(nodes, k)| {
            let mean = 0.25 * nodes.iter().map(|&a| u[a]).sum::<f64>();
            mean.exp() * k
        })
        .collect())
}

pub fn assemble_nonlinear_stiffness(
    mesh: &FineMesh,
    kappa0: &PermeabilityField,
    u: &DVector<f64>,
) -> Result<SparseMatrix> {
    let coeff = nonlinear_coefficient(mesh, kappa0, u)?;
    assemble_stiffness_values(mesh, &coeff)
}

/// Matrix-free `A(coeff) u`.
pub fn apply_stiffness(mesh: &FineMesh, coeff: &[f64], u: &DVector<f64>) -> DVector<f64> {
    let k = reference_stiffness();
    let mut out = DVector::zeros(mesh.node_count());
    for (nodes, c) in mesh.cells().iter().zip(coeff) {
        let local = [u[nodes[0]], u[nodes[1]], u[nodes[2]], u[nodes[3]]];
        for a in 0..4 {
            let row: f64 = (0..4).map(|b| k[a][b] * local[b]).sum();
            out[nodes[a]] += c * row;
        }
    }
    out
}

pub fn spmv(a: &SparseMatrix, x: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(a.nrows());
    for (i, row) in a.row_iter().enumerate() {
        y[i] = row.col_indices().iter().zip(row.values()).map(|(&j, v)| v * x[j]).sum();
    }
    y
}

/// Sparse times dense, column by column.
pub fn spmm(a: &SparseMatrix, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for c in 0..b.ncols() {
        let col = b.column(c);
        let mut dst = out.column_mut(c);
        for (i, row) in a.row_iter().enumerate() {
            dst[i] = row.col_indices().iter().zip(row.values()).map(|(&j, v)| v * col[j]).sum();
        }
    }
    out
}

pub fn quadratic_form(a: &SparseMatrix, v: &DVector<f64>) -> f64 {
    v.dot(&spmv(a, v))
}

/// `(sqrt(vᵀMv), sqrt(vᵀAv))`.
pub fn norms(mass: &SparseMatrix, stiffness: &SparseMatrix, v: &DVector<f64>) -> Result<(f64, f64)> {
    if mass.nrows() != v.len() || stiffness.nrows() != v.len() {
        return Err(Error::Dimension(format!(
            "vector of length {} against matrices of size {} and {}",
            v.len(),
            mass.nrows(),
            stiffness.nrows()
        )));
    }
    Ok((
        quadratic_form(mass, v).max(0.0).sqrt(),
        quadratic_form(stiffness, v).max(0.0).sqrt(),
    ))
}

pub fn to_dense(a: &SparseMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

/// Dense stiffness and mass restricted to a set of cells, on the nodes those cells touch.
#[derive(Debug, Clone)]
pub struct LocalSystem {
    /// Global indices of the local nodes, ascending.
    pub nodes: Vec<usize>,
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
}

impl LocalSystem {
    /// `stiffness_coeff` weights the stiffness, `mass_coeff` (if any) the mass.
    pub fn assemble(mesh: &FineMesh, cells: &[usize], stiffness_coeff: &[f64], mass_coeff: Option<&[f64]>) -> Self {
        let mut nodes: Vec<usize> = cells.iter().flat_map(|&c| mesh.cells()[c]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let pos = |g: usize| nodes.binary_search(&g).expect("node of a listed cell");
        let m = nodes.len();
        let (km, kk) = (reference_mass(), reference_stiffness());
        let h2 = mesh.h() * mesh.h();
        let mut stiffness = DMatrix::zeros(m, m);
        let mut mass = DMatrix::zeros(m, m);
        for &c in cells {
            let local = mesh.cells()[c].map(pos);
            let ws = stiffness_coeff[c];
            let wm = h2 * mass_coeff.map_or(1.0, |w| w[c]);
            for a in 0..4 {
                for b in 0..4 {
                    stiffness[(local[a], local[b])] += ws * kk[a][b];
                    mass[(local[a], local[b])] += wm * km[a][b];
                }
            }
        }
        Self { nodes, stiffness, mass }
    }
}
