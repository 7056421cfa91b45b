//! Coarse decomposition of the fine space into a contrast-sensitive part and a
//! contrast-robust complement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{spmm, spmv, FineMesh, LocalSystem, PermeabilityField, SparseMatrix};

/// Relative singular-value cutoff used when extracting null spaces.
const NULL_SPACE_TOL: f64 = 1e-12;
/// Columns whose M-norm falls below this after orthogonalization are dropped.
pub const DROP_TOL: f64 = 1e-10;

/// Fine cells and nodes supporting one coarse hat function, with the hat values.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub cells: Vec<usize>,
    pub nodes: Vec<usize>,
    pub hat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CoarseMesh {
    fine_n: usize,
    n: usize,
    ratio: usize,
    neighborhoods: Vec<Neighborhood>,
}

impl CoarseMesh {
    pub fn new(fine: &FineMesh, n: usize) -> Result<Self> {
        if n == 0 || fine.n() % n != 0 {
            return Err(Error::InvalidArgument(format!(
                "coarse size {n} must divide fine size {}",
                fine.n()
            )));
        }
        let ratio = fine.n() / n;
        let mut neighborhoods = Vec::with_capacity((n + 1) * (n + 1));
        for jc in 0..=n {
            for ic in 0..=n {
                let (ci, cj) = (ic * ratio, jc * ratio);
                let (i_lo, i_hi) = (ci.saturating_sub(ratio), (ci + ratio).min(fine.n()));
                let (j_lo, j_hi) = (cj.saturating_sub(ratio), (cj + ratio).min(fine.n()));
                let mut cells = Vec::new();
                for j in j_lo..j_hi {
                    for i in i_lo..i_hi {
                        cells.push(fine.cell_index(i, j));
                    }
                }
                let mut nodes = Vec::new();
                let mut hat = Vec::new();
                for j in j_lo..=j_hi {
                    for i in i_lo..=i_hi {
                        nodes.push(fine.node_index(i, j));
                        hat.push(hat_factor(i, ci, ratio) * hat_factor(j, cj, ratio));
                    }
                }
                neighborhoods.push(Neighborhood { cells, nodes, hat });
            }
        }
        Ok(Self {
            fine_n: fine.n(),
            n,
            ratio,
            neighborhoods,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn node_count(&self) -> usize {
        self.neighborhoods.len()
    }

    pub fn neighborhoods(&self) -> &[Neighborhood] {
        &self.neighborhoods
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    /// Hat function of a coarse node as a full fine nodal vector.
    pub fn hat_vector(&self, node: usize) -> DVector<f64> {
        let w = self.fine_n + 1;
        let mut v = DVector::zeros(w * w);
        let nb = &self.neighborhoods[node];
        for (&g, &h) in nb.nodes.iter().zip(&nb.hat) {
            v[g] = h;
        }
        v
    }

    /// Fine cells inside coarse cell `(ic, jc)`.
    pub fn coarse_cell(&self, ic: usize, jc: usize) -> Vec<usize> {
        let r = self.ratio;
        let mut cells = Vec::with_capacity(r * r);
        for j in jc * r..(jc + 1) * r {
            for i in ic * r..(ic + 1) * r {
                cells.push(j * self.fine_n + i);
            }
        }
        cells
    }
}

fn hat_factor(i: usize, center: usize, ratio: usize) -> f64 {
    let d = i.abs_diff(center);
    if d >= ratio {
        0.0
    } else {
        (ratio - d) as f64 / ratio as f64
    }
}

/// Eigenpairs sorted by ascending eigenvalue; vectors are orthonormal in the weight matrix.
#[derive(Debug, Clone)]
pub struct LocalSpectrum {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Solve `A φ = λ S φ` densely for symmetric `A` and SPD `S`.
pub fn local_generalized_eigenproblem(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<LocalSpectrum> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n || s.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "local pencil with shapes {:?} and {:?}",
            a.shape(),
            s.shape()
        )));
    }
    let chol = Cholesky::new(s.clone())
        .ok_or_else(|| Error::Factorization("local weight matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::Factorization("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::Factorization("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let y = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let vectors = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::Factorization("singular Cholesky factor".into()))?;
    Ok(LocalSpectrum { values, vectors })
}

/// Orthonormal basis (columns) of the null space of `c`.
fn null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let k = c.ncols();
    let svd = c.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let mut projector = DMatrix::<f64>::identity(k, k);
    for (r, &s) in svd.singular_values.iter().enumerate() {
        if s > NULL_SPACE_TOL * smax {
            let v = v_t.row(r).transpose();
            projector -= &v * v.transpose();
        }
    }
    let eig = SymmetricEigen::new(projector);
    let cols: Vec<DVector<f64>> = (0..k)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

/// Bases of both subspaces as dense fine-by-coarse matrices with M-orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceDecomposition {
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub l1: usize,
    pub l2: usize,
}

impl SpaceDecomposition {
    pub fn new(b1: DMatrix<f64>, b2: DMatrix<f64>, l1: usize, l2: usize) -> Result<Self> {
        if b1.nrows() != b2.nrows() {
            return Err(Error::Dimension(format!(
                "bases have {} and {} rows",
                b1.nrows(),
                b2.nrows()
            )));
        }
        if b1.ncols() == 0 || b2.ncols() == 0 {
            return Err(Error::InvalidArgument("empty basis".into()));
        }
        Ok(Self { b1, b2, l1, l2 })
    }

    pub fn m1(&self) -> usize {
        self.b1.ncols()
    }

    pub fn m2(&self) -> usize {
        self.b2.ncols()
    }

    pub fn fine_dim(&self) -> usize {
        self.b1.nrows()
    }

    /// The same spaces listed in the opposite order.
    pub fn swapped(&self) -> Self {
        Self {
            b1: self.b2.clone(),
            b2: self.b1.clone(),
            l1: self.l2,
            l2: self.l1,
        }
    }
}

/// Modified Gram-Schmidt in the M inner product, two passes per column.
/// Returns the orthonormal columns and the number of dropped ones.
pub fn m_orthonormalize(columns: &[DVector<f64>], mass: &SparseMatrix) -> (DMatrix<f64>, usize) {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(columns.len());
    let mut weighted: Vec<DVector<f64>> = Vec::with_capacity(columns.len());
    let mut dropped = 0;
    for col in columns {
        let norm0 = col.dot(&spmv(mass, col)).max(0.0).sqrt();
        if !(norm0 > 0.0) {
            dropped += 1;
            continue;
        }
        let mut v = col / norm0;
        for _ in 0..2 {
            for (q, mq) in basis.iter().zip(&weighted) {
                let alpha = mq.dot(&v);
                v.axpy(-alpha, q, 1.0);
            }
        }
        let mv = spmv(mass, &v);
        let norm = v.dot(&mv).max(0.0).sqrt();
        if norm < DROP_TOL {
            dropped += 1;
            continue;
        }
        basis.push(v / norm);
        weighted.push(mv / norm);
    }
    let rows = columns.first().map_or(0, |c| c.len());
    let mat = if basis.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(&basis)
    };
    (mat, dropped)
}

/// Localized spectral columns for the contrast-sensitive space: the `l1` lowest
/// modes of `A φ = λ S φ` on each neighborhood (S the κ-weighted mass), times the hat.
pub fn sensitive_columns(
    mesh: &FineMesh,
    coarse: &CoarseMesh,
    kappa: &PermeabilityField,
    l1: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut cols = Vec::new();
    for nb in coarse.neighborhoods() {
        let local = LocalSystem::assemble(mesh, &nb.cells, kappa.values(), Some(kappa.values()));
        let spec = local_generalized_eigenproblem(&local.stiffness, &local.mass)?;
        let hat: Vec<f64> = local.nodes.iter().map(|g| nb.hat[nb.nodes.binary_search(g).unwrap()]).collect();
        for k in 0..l1.min(local.nodes.len()) {
            let mut v = DVector::zeros(mesh.node_count());
            for (p, &g) in local.nodes.iter().enumerate() {
                v[g] = hat[p] * spec.vectors[(p, k)];
            }
            cols.push(v);
        }
    }
    Ok(cols)
}

/// Cell bubbles for the robust space. On each coarse cell the unknowns are the fine
/// nodes off the cell's interior edges (zero trace there, free on the domain boundary),
/// constrained L²-orthogonal to the four corner hats; the `l2` lowest modes of the
/// κ-stiffness against the plain mass are kept.
pub fn bubble_columns(
    mesh: &FineMesh,
    coarse: &CoarseMesh,
    kappa: &PermeabilityField,
    l2: usize,
) -> Result<Vec<DVector<f64>>> {
    let nc = coarse.n();
    let r = coarse.ratio();
    let w = mesh.n() + 1;
    let mut cols = Vec::new();
    for jc in 0..nc {
        for ic in 0..nc {
            let cells = coarse.coarse_cell(ic, jc);
            let local = LocalSystem::assemble(mesh, &cells, kappa.values(), None);
            let on_interior_edge = |g: usize| {
                let (i, j) = (g % w, g / w);
                (i == ic * r && ic > 0)
                    || (i == (ic + 1) * r && ic + 1 < nc)
                    || (j == jc * r && jc > 0)
                    || (j == (jc + 1) * r && jc + 1 < nc)
            };
            let keep: Vec<usize> = (0..local.nodes.len()).filter(|&p| !on_interior_edge(local.nodes[p])).collect();
            if keep.is_empty() {
                continue;
            }
            let corners = [
                coarse.node_index(ic, jc),
                coarse.node_index(ic + 1, jc),
                coarse.node_index(ic, jc + 1),
                coarse.node_index(ic + 1, jc + 1),
            ];
            let mut constraints = DMatrix::zeros(corners.len(), keep.len());
            for (row, &node) in corners.iter().enumerate() {
                let hat = coarse.hat_vector(node);
                let local_hat = DVector::from_iterator(local.nodes.len(), local.nodes.iter().map(|&g| hat[g]));
                let weighted = &local.mass * local_hat;
                for (c, &p) in keep.iter().enumerate() {
                    constraints[(row, c)] = weighted[p];
                }
            }
            let z = null_space(&constraints);
            if z.ncols() == 0 {
                continue;
            }
            let a_keep = local.stiffness.select_rows(&keep).select_columns(&keep);
            let m_keep = local.mass.select_rows(&keep).select_columns(&keep);
            let a_red = z.transpose() * a_keep * &z;
            let m_red = z.transpose() * m_keep * &z;
            let spec = local_generalized_eigenproblem(&(&a_red + a_red.transpose()).scale(0.5), &(&m_red + m_red.transpose()).scale(0.5))?;
            let modes = &z * spec.vectors;
            for k in 0..l2.min(modes.ncols()) {
                let mut v = DVector::zeros(mesh.node_count());
                for (c, &p) in keep.iter().enumerate() {
                    v[local.nodes[p]] = modes[(c, k)];
                }
                cols.push(v);
            }
        }
    }
    Ok(cols)
}

pub fn build_decomposition(
    mesh: &FineMesh,
    coarse: &CoarseMesh,
    kappa: &PermeabilityField,
    l1: usize,
    l2: usize,
    mass: &SparseMatrix,
) -> Result<SpaceDecomposition> {
    if l1 == 0 || l2 == 0 {
        return Err(Error::InvalidArgument("mode counts must be at least 1".into()));
    }
    if kappa.len() != mesh.cell_count() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} cells",
            kappa.len(),
            mesh.cell_count()
        )));
    }
    let (b1, dropped1) = m_orthonormalize(&sensitive_columns(mesh, coarse, kappa, l1)?, mass);
    let (b2, dropped2) = m_orthonormalize(&bubble_columns(mesh, coarse, kappa, l2)?, mass);
    if dropped1 + dropped2 > 0 {
        log::info!("dropped {dropped1} sensitive and {dropped2} robust columns as rank deficient");
    }
    SpaceDecomposition::new(b1, b2, l1, l2)
}

/// Galerkin blocks of the fine mass and stiffness on the two spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSystem {
    pub m11: DMatrix<f64>,
    pub m12: DMatrix<f64>,
    pub m22: DMatrix<f64>,
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a22: DMatrix<f64>,
}

/// Stiffness blocks only, for re-projection of a freshly assembled fine matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedStiffness {
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a22: DMatrix<f64>,
}

fn symmetrized(x: DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let scale = x.amax().max(1.0);
    let asym = (&x - x.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::InvalidArgument(format!(
            "projected block {label} is asymmetric by {asym:e}"
        )));
    }
    Ok((&x + x.transpose()) * 0.5)
}

fn blocks(dec: &SpaceDecomposition, mat: &SparseMatrix, tag: char) -> Result<[DMatrix<f64>; 3]> {
    if mat.nrows() != dec.fine_dim() || mat.ncols() != dec.fine_dim() {
        return Err(Error::Dimension(format!(
            "matrix of size {}x{} against bases with {} rows",
            mat.nrows(),
            mat.ncols(),
            dec.fine_dim()
        )));
    }
    let xb1 = spmm(mat, &dec.b1);
    let xb2 = spmm(mat, &dec.b2);
    let x11 = symmetrized(dec.b1.transpose() * &xb1, &format!("{tag}11"))?;
    let x12 = dec.b1.transpose() * &xb2;
    let x22 = symmetrized(dec.b2.transpose() * &xb2, &format!("{tag}22"))?;
    Ok([x11, x12, x22])
}

pub fn project_stiffness(dec: &SpaceDecomposition, stiffness: &SparseMatrix) -> Result<ProjectedStiffness> {
    let [a11, a12, a22] = blocks(dec, stiffness, 'A')?;
    Ok(ProjectedStiffness { a11, a12, a22 })
}

pub fn project_system(dec: &SpaceDecomposition, mass: &SparseMatrix, stiffness: &SparseMatrix) -> Result<ProjectedSystem> {
    let [m11, m12, m22] = blocks(dec, mass, 'M')?;
    let [a11, a12, a22] = blocks(dec, stiffness, 'A')?;
    Ok(ProjectedSystem {
        m11,
        m12,
        m22,
        a11,
        a12,
        a22,
    })
}

impl ProjectedSystem {
    pub fn m1(&self) -> usize {
        self.m11.nrows()
    }

    pub fn m2(&self) -> usize {
        self.m22.nrows()
    }

    pub fn with_stiffness(&self, s: ProjectedStiffness) -> Self {
        Self {
            a11: s.a11,
            a12: s.a12,
            a22: s.a22,
            ..self.clone()
        }
    }
}

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 5000;

/// Largest eigenvalue of `A₂₂ w = λ M₂₂ w` by power iteration on `M₂₂⁻¹A₂₂`.
pub fn explicit_stability_indicator(ps: &ProjectedSystem) -> Result<f64> {
    largest_generalized_eigenvalue(&ps.a22, &ps.m22)
}

pub fn largest_generalized_eigenvalue(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    let chol: Cholesky<f64, Dyn> = Cholesky::new(m.clone())
        .ok_or_else(|| Error::Factorization("mass block is not positive definite".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut lambda = 0.0;
    for it in 0..POWER_MAX_ITER {
        let aw = a * &w;
        if aw.amax() == 0.0 {
            return Ok(0.0);
        }
        let next = chol.solve(&aw);
        let mnorm = next.dot(&(m * &next)).sqrt();
        w = next / mnorm;
        let estimate = w.dot(&(a * &w));
        if it > 0 && (estimate - lambda).abs() <= POWER_TOL * estimate.abs() {
            return Ok(estimate);
        }
        lambda = estimate;
    }
    Err(Error::PowerIteration {
        iterations: POWER_MAX_ITER,
        estimate: lambda,
    })
}
