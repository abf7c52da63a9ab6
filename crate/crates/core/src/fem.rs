//! Lagrange finite elements of degree 1 and 2 on triangles.
//!
//! Element integrals are computed in parallel and scattered into the global
//! matrix in cell order, so assembled matrices are bit-identical between runs
//! regardless of thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Field, ScalarField, VectorField};
use crate::mesh::{BoundaryTag, Mesh, Point2};
use crate::quadrature::QuadratureRule;
use crate::scalar::{dot, Real};
use crate::sparse::{Block, CsrMatrix, Pattern, SpdFactorization, BlockSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementDegree {
    Linear,
    Quadratic,
}

impl ElementDegree {
    pub fn order(self) -> usize {
        match self {
            ElementDegree::Linear => 1,
            ElementDegree::Quadratic => 2,
        }
    }

    /// Local basis functions per triangle.
    pub fn local_dofs(self) -> usize {
        match self {
            ElementDegree::Linear => 3,
            ElementDegree::Quadratic => 6,
        }
    }
}

impl TryFrom<usize> for ElementDegree {
    type Error = Error;

    fn try_from(l: usize) -> Result<Self> {
        match l {
            1 => Ok(ElementDegree::Linear),
            2 => Ok(ElementDegree::Quadratic),
            other => Err(Error::UnsupportedDegree(other)),
        }
    }
}

/// Local edges of a triangle, in the order of the quadratic edge DOFs.
const LOCAL_EDGES: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

/// Reference basis values and barycentric derivatives at the points of a rule.
#[derive(Debug, Clone)]
struct BasisTable<T> {
    rule: QuadratureRule<T>,
    /// `values[q * nloc + i]`
    values: Vec<T>,
    /// `dbary[q * nloc + i][k]` = d phi_i / d lambda_k
    dbary: Vec<[T; 3]>,
}

impl<T: Real> BasisTable<T> {
    fn new(degree: ElementDegree, rule: QuadratureRule<T>) -> Self {
        let mut values = Vec::new();
        let mut dbary = Vec::new();
        for l in &rule.points {
            let (v, d) = reference_basis(degree, *l);
            values.extend(v);
            dbary.extend(d);
        }
        Self { rule, values, dbary }
    }
}

/// Basis values and barycentric derivatives at barycentric point `l`.
fn reference_basis<T: Real>(degree: ElementDegree, l: [T; 3]) -> (Vec<T>, Vec<[T; 3]>) {
    let (zero, one, two, four) = (T::zero(), T::one(), T::lit(2.0), T::lit(4.0));
    match degree {
        ElementDegree::Linear => {
            let d = (0..3)
                .map(|i| {
                    let mut g = [zero; 3];
                    g[i] = one;
                    g
                })
                .collect();
            (l.to_vec(), d)
        }
        ElementDegree::Quadratic => {
            let mut v = Vec::with_capacity(6);
            let mut d = Vec::with_capacity(6);
            for i in 0..3 {
                v.push(l[i] * (two * l[i] - one));
                let mut g = [zero; 3];
                g[i] = four * l[i] - one;
                d.push(g);
            }
            for (a, b) in LOCAL_EDGES {
                v.push(four * l[a] * l[b]);
                let mut g = [zero; 3];
                g[a] = four * l[b];
                g[b] = four * l[a];
                d.push(g);
            }
            (v, d)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CellGeometry<T> {
    points: [Point2<T>; 3],
    area: T,
    grad_bary: [[T; 2]; 3],
}

impl<T: Real> CellGeometry<T> {
    fn new(points: [Point2<T>; 3]) -> Self {
        let [p0, p1, p2] = points;
        let (ax, ay) = (p1.x - p0.x, p1.y - p0.y);
        let (bx, by) = (p2.x - p0.x, p2.y - p0.y);
        let det = ax * by - bx * ay;
        let g1 = [by / det, -bx / det];
        let g2 = [-ay / det, ax / det];
        let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
        Self {
            points,
            area: det * T::lit(0.5),
            grad_bary: [g0, g1, g2],
        }
    }

    fn map(&self, l: [T; 3]) -> Point2<T> {
        let [p0, p1, p2] = self.points;
        Point2::new(
            l[0] * p0.x + l[1] * p1.x + l[2] * p2.x,
            l[0] * p0.y + l[1] * p1.y + l[2] * p2.y,
        )
    }

    fn gradient(&self, d: [T; 3]) -> [T; 2] {
        let g = &self.grad_bary;
        [
            d[0] * g[0][0] + d[1] * g[1][0] + d[2] * g[2][0],
            d[0] * g[0][1] + d[1] * g[1][1] + d[2] * g[2][1],
        ]
    }
}

/// Lagrange finite-element space on a mesh.
#[derive(Debug, Clone)]
pub struct FeSpace<T> {
    mesh: Arc<Mesh<T>>,
    degree: ElementDegree,
    dof_coords: Vec<Point2<T>>,
    /// Flat `cell * nloc + i` local-to-global map.
    cell_dofs: Vec<usize>,
    boundary_dofs: BTreeMap<BoundaryTag, Vec<usize>>,
    geometry: Vec<CellGeometry<T>>,
    pattern: Arc<Pattern>,
    /// Flat `cell * nloc^2 + i * nloc + j` positions into the CSR values.
    scatter: Vec<usize>,
    assembly: BasisTable<T>,
    load: BasisTable<T>,
    norm: BasisTable<T>,
}

impl<T: Real> FeSpace<T> {
    pub fn new(mesh: Arc<Mesh<T>>, degree: ElementDegree) -> Self {
        let nv = mesh.vertices().len();
        let nloc = degree.local_dofs();
        let mut dof_coords = mesh.vertices().to_vec();
        let mut edge_dof: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        if degree == ElementDegree::Quadratic {
            for (k, e) in mesh.edge_multiplicity().keys().enumerate() {
                edge_dof.insert(*e, nv + k);
                dof_coords.push(mesh.vertices()[e[0]].midpoint(mesh.vertices()[e[1]]));
            }
        }
        let edge = |a: usize, b: usize| edge_dof[&[a.min(b), a.max(b)]];

        let mut cell_dofs = Vec::with_capacity(mesh.triangles().len() * nloc);
        for tri in mesh.triangles() {
            cell_dofs.extend_from_slice(tri);
            if degree == ElementDegree::Quadratic {
                for (a, b) in LOCAL_EDGES {
                    cell_dofs.push(edge(tri[a], tri[b]));
                }
            }
        }

        let mut boundary: BTreeMap<BoundaryTag, BTreeSet<usize>> = BTreeMap::new();
        for &([a, b], tag) in mesh.boundary_edges() {
            let set = boundary.entry(tag).or_default();
            set.insert(a);
            set.insert(b);
            if degree == ElementDegree::Quadratic {
                set.insert(edge(a, b));
            }
        }
        let boundary_dofs = boundary
            .into_iter()
            .map(|(tag, s)| (tag, s.into_iter().collect()))
            .collect();

        let ndof = dof_coords.len();
        let mut rows = vec![Vec::new(); ndof];
        for cell in cell_dofs.chunks_exact(nloc) {
            for &i in cell {
                rows[i].extend_from_slice(cell);
            }
        }
        let pattern = Arc::new(Pattern::from_rows(rows));
        let mut scatter = Vec::with_capacity(cell_dofs.len() * nloc);
        for cell in cell_dofs.chunks_exact(nloc) {
            for &i in cell {
                for &j in cell {
                    scatter.push(pattern.position(i, j).expect("cell coupling in pattern"));
                }
            }
        }

        let geometry = (0..mesh.triangles().len())
            .map(|k| CellGeometry::new(mesh.triangle_points(k)))
            .collect();
        let load_order = 2 * degree.order() + 2;
        Self {
            degree,
            dof_coords,
            cell_dofs,
            boundary_dofs,
            geometry,
            pattern,
            scatter,
            assembly: BasisTable::new(degree, QuadratureRule::order4()),
            load: BasisTable::new(degree, QuadratureRule::for_degree(load_order)),
            norm: BasisTable::new(degree, QuadratureRule::order6()),
            mesh,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh<T>> {
        &self.mesh
    }

    pub fn degree(&self) -> ElementDegree {
        self.degree
    }

    pub fn dof_count(&self) -> usize {
        self.dof_coords.len()
    }

    pub fn dof_coords(&self) -> &[Point2<T>] {
        &self.dof_coords
    }

    pub fn cell_count(&self) -> usize {
        self.geometry.len()
    }

    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        let nloc = self.degree.local_dofs();
        &self.cell_dofs[cell * nloc..(cell + 1) * nloc]
    }

    pub fn boundary_dofs(&self, tag: BoundaryTag) -> &[usize] {
        self.boundary_dofs.get(&tag).map_or(&[], Vec::as_slice)
    }

    /// Sorted union of boundary DOFs over `tags`.
    pub fn boundary_dofs_for(&self, tags: &[BoundaryTag]) -> Vec<usize> {
        let set: BTreeSet<usize> = tags.iter().flat_map(|&t| self.boundary_dofs(t).iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    /// Physical quadrature points of the assembly rule, cell by cell.
    pub fn assembly_points(&self) -> Vec<Point2<T>> {
        self.geometry
            .iter()
            .flat_map(|g| self.assembly.rule.points.iter().map(move |&l| g.map(l)))
            .collect()
    }

    /// Assembles `sum_K local(K)` where `local` fills an `nloc x nloc` block.
    fn assemble_matrix<F>(&self, local: F) -> Result<CsrMatrix<T>>
    where
        F: Fn(usize, &CellGeometry<T>, &mut [T]) -> Result<()> + Sync,
    {
        let nloc = self.degree.local_dofs();
        let blocks: Vec<Vec<T>> = self
            .geometry
            .par_iter()
            .enumerate()
            .map(|(k, g)| {
                let mut block = vec![T::zero(); nloc * nloc];
                local(k, g, &mut block)?;
                Ok(block)
            })
            .collect::<Result<_>>()?;
        let mut m = CsrMatrix::zeros(self.pattern.clone());
        let values = m.values_mut();
        for (k, block) in blocks.iter().enumerate() {
            let pos = &self.scatter[k * nloc * nloc..(k + 1) * nloc * nloc];
            for (&p, &v) in pos.iter().zip(block) {
                values[p] += v;
            }
        }
        Ok(m)
    }

    /// `M_ij = (phi_i, phi_j)`.
    pub fn assemble_mass(&self) -> CsrMatrix<T> {
        let nloc = self.degree.local_dofs();
        let tab = &self.assembly;
        self.assemble_matrix(|_, g, block| {
            for (q, &w) in tab.rule.weights.iter().enumerate() {
                let phi = &tab.values[q * nloc..(q + 1) * nloc];
                let wa = w * g.area;
                for i in 0..nloc {
                    for j in i..nloc {
                        block[i * nloc + j] += wa * phi[i] * phi[j];
                    }
                }
            }
            mirror_upper(block, nloc);
            Ok(())
        })
        .expect("mass assembly is infallible")
    }

    /// `A_ij = (coeff(., t) grad phi_i, grad phi_j)`, coefficient sampled at quadrature points.
    pub fn assemble_stiffness(&self, coeff: &dyn Field<T>, t: T) -> Result<CsrMatrix<T>> {
        let nloc = self.degree.local_dofs();
        let tab = &self.assembly;
        self.assemble_matrix(|k, g, block| {
            let mut grads = vec![[T::zero(); 2]; nloc];
            for (q, &w) in tab.rule.weights.iter().enumerate() {
                let a = coeff.eval(g.map(tab.rule.points[q]), t);
                if !a.is_finite() {
                    return Err(Error::NonFiniteCoefficient { element: k });
                }
                for (i, gr) in grads.iter_mut().enumerate() {
                    *gr = g.gradient(tab.dbary[q * nloc + i]);
                }
                let wa = w * g.area * a;
                for i in 0..nloc {
                    for j in i..nloc {
                        block[i * nloc + j] += wa * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                    }
                }
            }
            mirror_upper(block, nloc);
            Ok(())
        })
    }

    /// `F_i = (f(., t), phi_i)`.
    pub fn assemble_load(&self, f: &dyn Field<T>, t: T) -> Result<Vec<T>> {
        let nloc = self.degree.local_dofs();
        let tab = &self.load;
        let locals: Vec<Vec<T>> = self
            .geometry
            .par_iter()
            .enumerate()
            .map(|(k, g)| {
                let mut local = vec![T::zero(); nloc];
                for (q, &w) in tab.rule.weights.iter().enumerate() {
                    let v = f.eval(g.map(tab.rule.points[q]), t);
                    if !v.is_finite() {
                        return Err(Error::NonFiniteCoefficient { element: k });
                    }
                    let wv = w * g.area * v;
                    for (i, l) in local.iter_mut().enumerate() {
                        *l += wv * tab.values[q * nloc + i];
                    }
                }
                Ok(local)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![T::zero(); self.dof_count()];
        for (k, local) in locals.iter().enumerate() {
            for (&i, &v) in self.cell_dofs(k).iter().zip(local) {
                out[i] += v;
            }
        }
        Ok(out)
    }

    /// Nodal interpolant.
    pub fn interpolate(&self, g: &dyn Field<T>, t: T) -> Vec<T> {
        self.dof_coords.iter().map(|&p| g.eval(p, t)).collect()
    }

    /// L2 projection: solves `M u = (g, phi_i)`.
    pub fn l2_project(&self, g: &dyn Field<T>, t: T) -> Result<Vec<T>> {
        let mass = SpdFactorization::new(&self.assemble_mass())?;
        let mut u = self.assemble_load(g, t)?;
        mass.solve_in_place(&mut u)?;
        Ok(u)
    }

    /// `integral_D u_h`.
    pub fn integrate(&self, u: &[T]) -> T {
        let nloc = self.degree.local_dofs();
        let tab = &self.assembly;
        self.geometry
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let dofs = self.cell_dofs(k);
                let s: T = tab
                    .rule
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(q, &w)| {
                        let phi = &tab.values[q * nloc..(q + 1) * nloc];
                        w * dofs.iter().zip(phi).fold(T::zero(), |acc, (&d, &p)| acc + u[d] * p)
                    })
                    .sum();
                s * g.area
            })
            .sum()
    }

    /// `|| u_h - exact(., t) ||_{L2}` with the 12-point rule.
    pub fn error_l2(&self, uh: &[T], exact: &dyn Field<T>, t: T) -> T {
        let nloc = self.degree.local_dofs();
        let tab = &self.norm;
        let sq: T = self
            .geometry
            .par_iter()
            .enumerate()
            .map(|(k, g)| {
                let dofs = self.cell_dofs(k);
                let mut s = T::zero();
                for (q, &w) in tab.rule.weights.iter().enumerate() {
                    let phi = &tab.values[q * nloc..(q + 1) * nloc];
                    let val = dofs.iter().zip(phi).fold(T::zero(), |acc, (&d, &p)| acc + uh[d] * p);
                    let e = val - exact.eval(g.map(tab.rule.points[q]), t);
                    s += w * e * e;
                }
                s * g.area
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        sq.sqrt()
    }

    /// `|| grad u_h - exact_gradient(., t) ||_{L2}` with the 12-point rule.
    pub fn error_h1_semi(&self, uh: &[T], exact_gradient: &VectorField<T>, t: T) -> T {
        let nloc = self.degree.local_dofs();
        let tab = &self.norm;
        let sq: T = self
            .geometry
            .par_iter()
            .enumerate()
            .map(|(k, g)| {
                let dofs = self.cell_dofs(k);
                let mut s = T::zero();
                for (q, &w) in tab.rule.weights.iter().enumerate() {
                    let mut grad = [T::zero(); 2];
                    for (i, &d) in dofs.iter().enumerate() {
                        let gi = g.gradient(tab.dbary[q * nloc + i]);
                        grad[0] += uh[d] * gi[0];
                        grad[1] += uh[d] * gi[1];
                    }
                    let ex = exact_gradient(g.map(tab.rule.points[q]), t);
                    let (ex0, ex1) = (grad[0] - ex[0], grad[1] - ex[1]);
                    s += w * (ex0 * ex0 + ex1 * ex1);
                }
                s * g.area
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        sq.sqrt()
    }
}

fn mirror_upper<T: Copy>(block: &mut [T], n: usize) {
    for i in 0..n {
        for j in 0..i {
            block[i * n + j] = block[j * n + i];
        }
    }
}

/// Builds the finite-element space of the given degree.
pub fn build_space<T: Real>(mesh: Arc<Mesh<T>>, degree: usize) -> Result<FeSpace<T>> {
    Ok(FeSpace::new(mesh, ElementDegree::try_from(degree)?))
}

/// Essential boundary conditions on a fixed set of DOFs, eliminated
/// symmetrically so the constrained matrix stays SPD.
#[derive(Debug, Clone)]
pub struct DirichletBc {
    dofs: Vec<usize>,
    constrained: Vec<bool>,
}

impl DirichletBc {
    pub fn new<T: Real>(space: &FeSpace<T>, tags: &[BoundaryTag]) -> Self {
        let dofs = space.boundary_dofs_for(tags);
        let mut constrained = vec![false; space.dof_count()];
        for &d in &dofs {
            constrained[d] = true;
        }
        Self { dofs, constrained }
    }

    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    pub fn is_constrained(&self, i: usize) -> bool {
        self.constrained[i]
    }

    /// Constrained rows and columns replaced by the identity.
    pub fn constrain_matrix<T: Real>(&self, k: &CsrMatrix<T>) -> CsrMatrix<T> {
        let mut out = k.clone();
        let pattern = out.pattern().clone();
        let values = out.values_mut();
        let mut pos = 0;
        for i in 0..pattern.dim() {
            for &j in pattern.row(i) {
                if self.constrained[i] || self.constrained[j] {
                    values[pos] = if i == j { T::one() } else { T::zero() };
                }
                pos += 1;
            }
        }
        out
    }

    /// Boundary values `g(x_i, t)` for the constrained DOFs, in `dofs()` order.
    pub fn values<T: Real>(&self, space: &FeSpace<T>, g: &dyn Field<T>, t: T) -> Vec<T> {
        self.dofs.iter().map(|&d| g.eval(space.dof_coords()[d], t)).collect()
    }

    /// Moves the known boundary values to the right-hand side using the
    /// unconstrained matrix `k`, and pins the constrained entries.
    pub fn lift<T: Real>(&self, k: &CsrMatrix<T>, rhs: &mut [T], values: &[T]) -> Result<()> {
        if values.len() != self.dofs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dofs.len(),
                found: values.len(),
            });
        }
        for (i, r) in rhs.iter_mut().enumerate() {
            if self.constrained[i] {
                continue;
            }
            for (j, a) in k.row(i) {
                if self.constrained[j] {
                    let idx = self.dofs.binary_search(&j).expect("constrained dof listed");
                    *r -= a * values[idx];
                }
            }
        }
        for (&d, &v) in self.dofs.iter().zip(values) {
            rhs[d] = v;
        }
        Ok(())
    }

    /// Overwrites constrained entries of `u` with `g(., t)`.
    pub fn pin<T: Real>(&self, space: &FeSpace<T>, u: &mut [T], g: &dyn Field<T>, t: T) {
        for &d in &self.dofs {
            u[d] = g.eval(space.dof_coords()[d], t);
        }
    }
}

/// Symmetric Dirichlet elimination for a block of right-hand sides.
///
/// `data` holds one boundary function per column, or a single function
/// shared by all columns. Returns the constrained matrix; `rhs` is lifted in
/// place.
pub fn apply_dirichlet<T: Real>(
    system: &CsrMatrix<T>,
    rhs: &mut Block<T>,
    space: &FeSpace<T>,
    data: &[ScalarField<T>],
    t: T,
    tags: &[BoundaryTag],
) -> Result<CsrMatrix<T>> {
    if data.len() != 1 && data.len() != rhs.ncols() {
        return Err(Error::DimensionMismatch {
            expected: rhs.ncols(),
            found: data.len(),
        });
    }
    let bc = DirichletBc::new(space, tags);
    for j in 0..rhs.ncols() {
        let g = &data[if data.len() == 1 { 0 } else { j }];
        let values = bc.values(space, g.as_ref(), t);
        bc.lift(system, rhs.col_mut(j), &values)?;
    }
    Ok(bc.constrain_matrix(system))
}

/// `sqrt(u^T M u)` for a symmetric matrix `m`.
pub fn energy_norm<T: Real>(m: &CsrMatrix<T>, u: &[T]) -> Result<T> {
    Ok(dot(u, &m.matvec(u)?).max(T::zero()).sqrt())
}
