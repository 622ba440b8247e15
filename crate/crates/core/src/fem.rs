//! P1 vector finite elements for the time-harmonic elasticity form
//! `a(u, v) = ∫ C ∇̂u : ∇̂v − ω² ρ u · v`.
//!
//! Everything that depends only on the mesh lives in [`FemSpace`]: the DOF
//! numbering, the shared sparsity pattern and, per subdomain `j`, the unit
//! blocks `K_j^λ`, `K_j^μ`, `M_j` such that for any parameter vector
//!
//! ```text
//! K(l) = Σ_j λ_j K_j^λ + μ_j K_j^μ,   M(l) = Σ_j ρ_j M_j.
//! ```
//!
//! A [`DiscreteOperator`] is that linear combination for one `l`.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::material::{ParamVector, PriorData};
use crate::mesh::PartitionedMesh;
use crate::sparse::{dot, CsrMatrix, CsrPattern, Submatrix};

pub const DIM: usize = 3;

/// Elements per assembly work unit. Fixed so that the summation order, and
/// hence every bit of the result, is independent of the thread count.
const ASSEMBLY_CHUNK: usize = 2048;

/// DOF `3 v + c` is component `c` of the displacement at vertex `v`.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub n_dofs: usize,
    pub interior: Vec<usize>,
    pub dirichlet: Vec<usize>,
    pub sigma_trace: Vec<usize>,
    /// Full DOF -> position in `interior`.
    pub interior_index: Vec<Option<usize>>,
    /// Full DOF -> position in `dirichlet`.
    pub dirichlet_index: Vec<Option<usize>>,
}

impl DofMap {
    pub fn new(mesh: &PartitionedMesh) -> Self {
        let on_boundary = mesh.is_boundary_vertex();
        let n_dofs = DIM * mesh.n_vertices();
        let mut interior = Vec::new();
        let mut dirichlet = Vec::new();
        for v in 0..mesh.n_vertices() {
            let target = if on_boundary[v] { &mut dirichlet } else { &mut interior };
            target.extend((0..DIM).map(|c| DIM * v + c));
        }
        let sigma_trace = mesh
            .sigma_interior_vertices()
            .into_iter()
            .flat_map(|v| (0..DIM).map(move |c| DIM * v + c))
            .collect();
        let index = |list: &[usize]| {
            let mut idx = vec![None; n_dofs];
            for (k, &d) in list.iter().enumerate() {
                idx[d] = Some(k);
            }
            idx
        };
        Self {
            n_dofs,
            interior_index: index(&interior),
            dirichlet_index: index(&dirichlet),
            interior,
            dirichlet,
            sigma_trace,
        }
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn n_trace(&self) -> usize {
        self.sigma_trace.len()
    }

    /// Spread Σ trace values into a full DOF vector (zero elsewhere).
    pub fn extend_trace(&self, trace: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_dofs];
        for (&d, &x) in self.sigma_trace.iter().zip(trace) {
            full[d] = x;
        }
        full
    }

    pub fn restrict_to_trace(&self, full: &[f64]) -> Vec<f64> {
        self.sigma_trace.iter().map(|&d| full[d]).collect()
    }
}

/// Volume and gradients of the four barycentric coordinates of tet `t`.
pub fn element_gradients(mesh: &PartitionedMesh, t: usize) -> (f64, [[f64; 3]; 4]) {
    let v = mesh.tets[t].v.map(|i| mesh.vertices[i]);
    let jac = Matrix3::from_fn(|r, c| v[c + 1][r] - v[0][r]);
    let vol = jac.determinant() / 6.0;
    let inv = jac.try_inverse().expect("degenerate tetrahedron");
    let mut g = [[0.0; 3]; 4];
    for a in 1..4 {
        for k in 0..3 {
            g[a][k] = inv[(a - 1, k)];
            g[0][k] -= inv[(a - 1, k)];
        }
    }
    (vol, g)
}

/// `∇u` (rows: components, columns: derivatives) of a P1 field on one element.
pub fn element_displacement_gradient(grads: &[[f64; 3]; 4], u: &[[f64; 3]; 4]) -> Matrix3<f64> {
    Matrix3::from_fn(|c, k| (0..4).map(|a| u[a][c] * grads[a][k]).sum())
}

pub fn local_values(u: &[f64], v: &[usize; 4]) -> [[f64; 3]; 4] {
    v.map(|i| [u[DIM * i], u[DIM * i + 1], u[DIM * i + 2]])
}

/// 12x12 element blocks for unit coefficients.
struct ElementBlocks {
    k_lambda: [[f64; 12]; 12],
    k_mu: [[f64; 12]; 12],
    mass: [[f64; 12]; 12],
    laplace: [[f64; 12]; 12],
}

fn element_blocks(vol: f64, g: &[[f64; 3]; 4]) -> ElementBlocks {
    let mut e = ElementBlocks {
        k_lambda: [[0.0; 12]; 12],
        k_mu: [[0.0; 12]; 12],
        mass: [[0.0; 12]; 12],
        laplace: [[0.0; 12]; 12],
    };
    for a in 0..4 {
        for b in 0..4 {
            let gg = g[a][0] * g[b][0] + g[a][1] * g[b][1] + g[a][2] * g[b][2];
            let m = vol / 20.0 * if a == b { 2.0 } else { 1.0 };
            for i in 0..3 {
                for k in 0..3 {
                    let (r, c) = (3 * a + i, 3 * b + k);
                    let delta = if i == k { 1.0 } else { 0.0 };
                    e.k_lambda[r][c] = vol * g[a][i] * g[b][k];
                    e.k_mu[r][c] = vol * (delta * gg + g[a][k] * g[b][i]);
                    e.laplace[r][c] = vol * delta * gg;
                    e.mass[r][c] = delta * m;
                }
            }
        }
    }
    e
}

/// Mesh-dependent, parameter-independent FEM data.
#[derive(Debug)]
pub struct FemSpace {
    pub mesh: PartitionedMesh,
    pub mesh_id: String,
    pub dofs: DofMap,
    pub pattern: Arc<CsrPattern>,
    pub n_sub: usize,
    /// Unit blocks per subdomain, all on `pattern`.
    pub k_lambda: Vec<Vec<f64>>,
    pub k_mu: Vec<Vec<f64>>,
    pub mass: Vec<Vec<f64>>,
    /// Vector Laplacian `∫ ∇u : ∇v` and unit mass `∫ u · v` over Ω.
    pub laplace: Vec<f64>,
    pub unit_mass: Vec<f64>,
    pub interior_block: Submatrix,
    pub coupling_block: Submatrix,
    pub h_max: f64,
}

fn build_pattern(mesh: &PartitionedMesh) -> CsrPattern {
    let nv = mesh.n_vertices();
    let mut nbrs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nv];
    for t in &mesh.tets {
        for &a in &t.v {
            for &b in &t.v {
                nbrs[a].insert(b);
            }
        }
    }
    let mut row_ptr = Vec::with_capacity(DIM * nv + 1);
    let mut col = Vec::new();
    row_ptr.push(0);
    for set in &nbrs {
        for _ in 0..DIM {
            for &w in set {
                col.extend((0..DIM).map(|c| DIM * w + c));
            }
            row_ptr.push(col.len());
        }
    }
    CsrPattern { nrows: DIM * nv, ncols: DIM * nv, row_ptr, col }
}

impl FemSpace {
    pub fn new(mesh: PartitionedMesh) -> Result<Arc<Self>> {
        let n_sub = mesh.n_regions();
        if n_sub == 0 {
            return Err(Error::Geometry("mesh has no tetrahedra".into()));
        }
        if let Some(t) = (0..mesh.tets.len()).find(|&t| mesh.tet_volume(t) <= 0.0) {
            return Err(Error::Validation(vec![format!("tet {t} has nonpositive volume")]));
        }
        let dofs = DofMap::new(&mesh);
        if dofs.sigma_trace.is_empty() {
            return Err(Error::Geometry("SIGMA patch carries no interior trace vertices".into()));
        }
        let pattern = Arc::new(build_pattern(&mesh));
        let nnz = pattern.nnz();

        // Each chunk produces (region, position, values) contributions; they are
        // applied in chunk order.
        type Contribution = (usize, [usize; 144], ElementBlocks);
        let chunks: Vec<Vec<Contribution>> = (0..mesh.tets.len())
            .collect::<Vec<_>>()
            .par_chunks(ASSEMBLY_CHUNK)
            .map(|ts| {
                ts.iter()
                    .map(|&t| {
                        let tet = &mesh.tets[t];
                        let (vol, g) = element_gradients(&mesh, t);
                        let mut pos = [0usize; 144];
                        for a in 0..4 {
                            for i in 0..3 {
                                for b in 0..4 {
                                    for k in 0..3 {
                                        pos[12 * (3 * a + i) + 3 * b + k] = pattern
                                            .position(DIM * tet.v[a] + i, DIM * tet.v[b] + k)
                                            .expect("pattern covers element couplings");
                                    }
                                }
                            }
                        }
                        (tet.region - 1, pos, element_blocks(vol, &g))
                    })
                    .collect()
            })
            .collect();

        let mut k_lambda = vec![vec![0.0; nnz]; n_sub];
        let mut k_mu = vec![vec![0.0; nnz]; n_sub];
        let mut mass = vec![vec![0.0; nnz]; n_sub];
        let mut laplace = vec![0.0; nnz];
        let mut unit_mass = vec![0.0; nnz];
        for (region, pos, e) in chunks.into_iter().flatten() {
            for r in 0..12 {
                for c in 0..12 {
                    let p = pos[12 * r + c];
                    k_lambda[region][p] += e.k_lambda[r][c];
                    k_mu[region][p] += e.k_mu[r][c];
                    mass[region][p] += e.mass[r][c];
                    laplace[p] += e.laplace[r][c];
                    unit_mass[p] += e.mass[r][c];
                }
            }
        }

        let interior_block =
            Submatrix::extract(&pattern, &dofs.interior, &dofs.interior_index, dofs.n_interior());
        let coupling_block =
            Submatrix::extract(&pattern, &dofs.interior, &dofs.dirichlet_index, dofs.dirichlet.len());
        let h_max = mesh.longest_edge();
        Ok(Arc::new(Self {
            mesh_id: mesh.content_hash(),
            mesh,
            dofs,
            pattern,
            n_sub,
            k_lambda,
            k_mu,
            mass,
            laplace,
            unit_mass,
            interior_block,
            coupling_block,
            h_max,
        }))
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs
    }

    pub fn matrix(&self, values: Vec<f64>) -> CsrMatrix {
        CsrMatrix::new(self.pattern.clone(), values)
    }

    /// Discrete `H¹(Ω)` Gram matrix: vector Laplacian plus mass.
    pub fn h1_matrix(&self) -> CsrMatrix {
        self.matrix(self.laplace.iter().zip(&self.unit_mass).map(|(a, b)| a + b).collect())
    }

    /// `Σ_k c_k B_k` over same-pattern value arrays.
    fn combine(&self, terms: &[(f64, &Vec<f64>)]) -> Vec<f64> {
        let mut out = vec![0.0; self.pattern.nnz()];
        for (c, vals) in terms {
            if *c != 0.0 {
                for (o, v) in out.iter_mut().zip(vals.iter()) {
                    *o += c * v;
                }
            }
        }
        out
    }

    /// Stiffness for one tensor on the whole domain.
    pub fn homogeneous_stiffness(&self, lambda: f64, mu: f64) -> Vec<f64> {
        let mut terms = Vec::with_capacity(2 * self.n_sub);
        for j in 0..self.n_sub {
            terms.push((lambda, &self.k_lambda[j]));
            terms.push((mu, &self.k_mu[j]));
        }
        self.combine(&terms)
    }

    /// `Σ_j (λ_j K_j^λ + μ_j K_j^μ)` and `Σ_j ρ_j M_j`.
    pub fn parameter_matrices(&self, l: &ParamVector) -> Result<(Vec<f64>, Vec<f64>)> {
        if l.n_sub() != self.n_sub {
            return Err(Error::Dimension { expected: 3 * self.n_sub, got: l.len() });
        }
        let mut kt = Vec::with_capacity(2 * self.n_sub);
        let mut mt = Vec::with_capacity(self.n_sub);
        for j in 0..self.n_sub {
            kt.push((l.lambda(j), &self.k_lambda[j]));
            kt.push((l.mu(j), &self.k_mu[j]));
            mt.push((l.rho(j), &self.mass[j]));
        }
        Ok((self.combine(&kt), self.combine(&mt)))
    }

    /// Unit block for parameter index `k` of the `(λ.., μ.., ρ..)` layout.
    pub fn parameter_block(&self, k: usize) -> &[f64] {
        let n = self.n_sub;
        match k / n {
            0 => &self.k_lambda[k % n],
            1 => &self.k_mu[k % n],
            _ => &self.mass[k % n],
        }
    }
}

/// Stiffness and mass for one parameter vector.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub space: Arc<FemSpace>,
    pub params: ParamVector,
    pub omega: f64,
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
}

pub fn assemble(space: &Arc<FemSpace>, l: &ParamVector, omega: f64) -> Result<DiscreteOperator> {
    if !(omega >= 0.0) {
        return Err(Error::Domain(format!("omega must be >= 0, got {omega}")));
    }
    let (k, m) = space.parameter_matrices(l)?;
    Ok(DiscreteOperator {
        space: space.clone(),
        params: l.clone(),
        omega,
        stiffness: space.matrix(k),
        mass: space.matrix(m),
    })
}

/// Operator with an arbitrary stiffness / mass pair (eigenproblems, probes).
pub fn operator_from_values(space: &Arc<FemSpace>, stiffness: Vec<f64>, mass: Vec<f64>, omega: f64) -> DiscreteOperator {
    DiscreteOperator {
        space: space.clone(),
        params: ParamVector::zeros(space.n_sub),
        omega,
        stiffness: space.matrix(stiffness),
        mass: space.matrix(mass),
    }
}

impl DiscreteOperator {
    /// Values of `K − ω² M` on the shared pattern.
    pub fn system_values(&self, omega: f64) -> Vec<f64> {
        let w2 = omega * omega;
        self.stiffness.values.iter().zip(&self.mass.values).map(|(k, m)| k - w2 * m).collect()
    }

    pub fn system_matrix(&self, omega: f64) -> CsrMatrix {
        self.space.matrix(self.system_values(omega))
    }

    /// Dense `K − ω² M` on the interior DOFs; for oracles on small meshes.
    pub fn dense_interior(&self, omega: f64) -> DMatrix<f64> {
        self.space.interior_block.gather(&self.system_values(omega)).to_dense()
    }
}

/// `uᵀ (K − ω² M) v`.
pub fn apply_bilinear(op: &DiscreteOperator, omega: f64, u: &[f64], v: &[f64]) -> Result<f64> {
    let n = op.space.n_dofs();
    for x in [u, v] {
        if x.len() != n {
            return Err(Error::Dimension { expected: n, got: x.len() });
        }
    }
    let kv = op.stiffness.matvec(v);
    let mv = op.mass.matvec(v);
    Ok(dot(u, &kv) - omega * omega * dot(u, &mv))
}

/// Smallest observed `a(u, u) / ‖u‖²_{H¹}` over random `u` vanishing on ∂Ω.
/// Rejects frequencies with `ω² > γ0 λ1⁰ / 2`.
pub fn coercivity_check(
    op: &DiscreteOperator,
    omega: f64,
    prior: &PriorData,
    lambda1_0: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let bound = prior.gamma0 * lambda1_0 / 2.0;
    if omega * omega > bound * (1.0 + 1e-12) {
        return Err(Error::FrequencyRange { omega_sq: omega * omega, bound });
    }
    Ok(rayleigh_minimum(op, omega, samples, seed))
}

/// Same sampling as [`coercivity_check`] without the frequency gate.
pub fn rayleigh_minimum(op: &DiscreteOperator, omega: f64, samples: usize, seed: u64) -> f64 {
    let space = &op.space;
    let h1 = space.h1_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for _ in 0..samples {
        let mut u = vec![0.0; space.n_dofs()];
        for &d in &space.dofs.interior {
            u[d] = rng.random_range(-1.0..1.0);
        }
        let a = apply_bilinear(op, omega, &u, &u).expect("dimensions match");
        best = best.min(a / h1.quad_form(&u, &u));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::IsotropicTensor;
    use crate::mesh::{build_block_mesh, two_layer_blocks, Block, BoxFace, SigmaSelector};

    fn space(n: usize, blocks: &[Block]) -> Arc<FemSpace> {
        FemSpace::new(build_block_mesh(n, n, n, blocks, SigmaSelector::face(BoxFace::ZMax)).unwrap()).unwrap()
    }

    fn one_tet() -> PartitionedMesh {
        use crate::mesh::{BoundaryFace, BoundaryMarker, Tet};
        let vertices = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let tets = vec![Tet { v: [0, 1, 2, 3], region: 1 }];
        let mut m = PartitionedMesh { vertices, tets, boundary_faces: vec![] };
        m.boundary_faces = m
            .exterior_faces()
            .into_iter()
            .map(|(_, v)| BoundaryFace { v, marker: BoundaryMarker::Other })
            .collect();
        m
    }

    /// Strain of the unit displacement `φ_a e_i`, built directly from the
    /// reference-tet shape functions φ0 = 1 - x - y - z, φ1 = x, φ2 = y, φ3 = z.
    fn reference_strain(a: usize, i: usize) -> Matrix3<f64> {
        let grad = match a {
            0 => [-1.0, -1.0, -1.0],
            1 => [1.0, 0.0, 0.0],
            2 => [0.0, 1.0, 0.0],
            _ => [0.0, 0.0, 1.0],
        };
        let mut g = Matrix3::zeros();
        for k in 0..3 {
            g[(i, k)] = grad[k];
        }
        (g + g.transpose()) * 0.5
    }

    #[test]
    fn reference_tet_stiffness_matches_strain_oracle() {
        let mesh = one_tet();
        let (vol, g) = element_gradients(&mesh, 0);
        assert!((vol - 1.0 / 6.0).abs() < 1e-15);
        let e = element_blocks(vol, &g);
        let mu = 1.7;
        for r in 0..12 {
            for c in 0..12 {
                let (sa, sb) = (reference_strain(r / 3, r % 3), reference_strain(c / 3, c % 3));
                let expected = 2.0 * mu * (1.0 / 6.0) * sa.component_mul(&sb).sum();
                assert!((mu * e.k_mu[r][c] - expected).abs() < 1e-14, "({r},{c})");
                let div = sa.trace() * sb.trace() / 6.0;
                assert!((e.k_lambda[r][c] - div).abs() < 1e-14);
            }
        }
        // P1 mass on the reference tet: vol/20 (1 + δ_ab)
        assert!((e.mass[0][0] - 1.0 / 60.0).abs() < 1e-15);
        assert!((e.mass[0][3] - 1.0 / 120.0).abs() < 1e-15);
        assert_eq!(e.mass[0][1], 0.0);
    }

    #[test]
    fn rigid_motions_in_kernel() {
        let sp = space(3, &two_layer_blocks(2.0 / 3.0));
        let l = ParamVector::from_parts(&[0.3, 1.1], &[0.8, 1.9], &[1.0, 1.5]).unwrap();
        let op = assemble(&sp, &l, 0.0).unwrap();
        let nv = sp.mesh.n_vertices();
        let scale = op.stiffness.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for c in 0..3 {
            let mut u = vec![0.0; 3 * nv];
            for v in 0..nv {
                u[3 * v + c] = 1.0;
            }
            let r = op.stiffness.matvec(&u);
            assert!(r.iter().all(|x| x.abs() < 1e-13 * scale));
        }
        let w = [0.3, -1.2, 0.7];
        let mut u = vec![0.0; 3 * nv];
        for (v, p) in sp.mesh.vertices.iter().enumerate() {
            let wx = [w[1] * p[2] - w[2] * p[1], w[2] * p[0] - w[0] * p[2], w[0] * p[1] - w[1] * p[0]];
            u[3 * v..3 * v + 3].copy_from_slice(&wx);
        }
        let r = op.stiffness.matvec(&u);
        assert!(r.iter().all(|x| x.abs() < 1e-12 * scale));
    }

    #[test]
    fn bilinear_form_properties() {
        let sp = space(3, &two_layer_blocks(2.0 / 3.0));
        let l = ParamVector::from_parts(&[0.3, -0.1], &[0.8, 1.9], &[1.0, 1.5]).unwrap();
        let op = assemble(&sp, &l, 1.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = sp.n_dofs();
        let zero = vec![0.0; n];
        for _ in 0..10 {
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(apply_bilinear(&op, 1.3, &u, &zero).unwrap(), 0.0);
            let a = apply_bilinear(&op, 1.3, &u, &v).unwrap();
            let b = apply_bilinear(&op, 1.3, &v, &u).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            assert!(apply_bilinear(&op, 0.0, &u, &u).unwrap() >= 0.0);
        }
        assert!(matches!(apply_bilinear(&op, 1.0, &u_short(), &zero), Err(Error::Dimension { .. })));
    }

    fn u_short() -> Vec<f64> {
        vec![0.0; 5]
    }

    #[test]
    fn mismatched_parameter_count_rejected() {
        let sp = space(2, &[Block::unit(1)]);
        let l = ParamVector::uniform(2, 0.0, 1.0, 1.0);
        assert!(matches!(assemble(&sp, &l, 0.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parameter_linearity() {
        let sp = space(3, &two_layer_blocks(1.0 / 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let l = ParamVector::new((0..6).map(|_| rng.random_range(-1.0..2.0)).collect()).unwrap();
            let op = assemble(&sp, &l, 0.7).unwrap();
            // independent element-by-element assembly of the same combination
            let mut k = vec![0.0; sp.pattern.nnz()];
            let mut m = vec![0.0; sp.pattern.nnz()];
            for (t, tet) in sp.mesh.tets.iter().enumerate() {
                let (vol, g) = element_gradients(&sp.mesh, t);
                let e = element_blocks(vol, &g);
                let j = tet.region - 1;
                for r in 0..12 {
                    for c in 0..12 {
                        let p = sp
                            .pattern
                            .position(3 * tet.v[r / 3] + r % 3, 3 * tet.v[c / 3] + c % 3)
                            .unwrap();
                        k[p] += l.lambda(j) * e.k_lambda[r][c] + l.mu(j) * e.k_mu[r][c];
                        m[p] += l.rho(j) * e.mass[r][c];
                    }
                }
            }
            let scale = k.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (a, b) in op.stiffness.values.iter().zip(&k) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
            let mscale = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (a, b) in op.mass.values.iter().zip(&m) {
                assert!((a - b).abs() <= 1e-12 * mscale);
            }
        }
    }

    #[test]
    fn matrices_symmetric_and_semidefinite() {
        let sp = space(2, &[Block::unit(1)]);
        let op = assemble(&sp, &ParamVector::uniform(1, 0.4, 1.2, 0.9), 0.0).unwrap();
        let k = op.stiffness.to_dense();
        let m = op.mass.to_dense();
        assert!((&k - k.transpose()).norm() < 1e-13);
        assert!((&m - m.transpose()).norm() < 1e-13);
        assert!(m.symmetric_eigenvalues().min() > -1e-13);
        let kmu = sp.matrix(sp.k_mu[0].clone()).to_dense();
        assert!(kmu.symmetric_eigenvalues().min() > -1e-12);
    }

    #[test]
    fn constant_strain_energy_exact() {
        let sp = space(3, &[Block::unit(1)]);
        let c = IsotropicTensor::new(0.7, 1.3);
        let op = assemble(&sp, &ParamVector::uniform(1, c.lambda, c.mu, 1.0), 0.0).unwrap();
        let b = Matrix3::new(0.2, -0.5, 0.1, 0.3, 0.4, -0.2, 0.0, 0.6, -0.3);
        let mut u = vec![0.0; sp.n_dofs()];
        for (v, p) in sp.mesh.vertices.iter().enumerate() {
            let x = nalgebra::Vector3::new(p[0], p[1], p[2]);
            let bx = b * x;
            u[3 * v..3 * v + 3].copy_from_slice(bx.as_slice());
        }
        let eps = (b + b.transpose()) * 0.5;
        let exact = c.apply(&eps).component_mul(&eps).sum();
        let discrete = op.stiffness.quad_form(&u, &u);
        assert!((discrete - exact).abs() <= 1e-12 * exact.abs());
    }

    #[test]
    fn discrete_korn_inequality() {
        let sp = space(3, &[Block::unit(1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut u = vec![0.0; sp.n_dofs()];
            for &d in &sp.dofs.interior {
                u[d] = rng.random_range(-1.0..1.0);
            }
            let (mut sym, mut full) = (0.0, 0.0);
            for t in 0..sp.mesh.tets.len() {
                let (vol, g) = element_gradients(&sp.mesh, t);
                let gu = element_displacement_gradient(&g, &local_values(&u, &sp.mesh.tets[t].v));
                let e = (gu + gu.transpose()) * 0.5;
                sym += vol * e.norm_squared();
                full += vol * gu.norm_squared();
            }
            assert!(sym <= 2.0 * full);
        }
    }

    #[test]
    fn coercive_at_zero_frequency_and_gate() {
        let sp = space(3, &[Block::unit(1)]);
        let prior = PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, 1).unwrap();
        let op = assemble(&sp, &ParamVector::uniform(1, 0.5, 1.0, 1.5), 0.0).unwrap();
        assert!(coercivity_check(&op, 0.0, &prior, 10.0, 20, 1).unwrap() > 0.0);
        assert!(matches!(
            coercivity_check(&op, 3.0, &prior, 10.0, 20, 1),
            Err(Error::FrequencyRange { .. })
        ));
    }

    #[test]
    fn dof_sets_partition() {
        let sp = space(4, &[Block::unit(1)]);
        let d = &sp.dofs;
        assert_eq!(d.interior.len() + d.dirichlet.len(), d.n_dofs);
        assert!(d.sigma_trace.iter().all(|x| d.dirichlet_index[*x].is_some()));
        assert!(d.interior.iter().all(|x| d.dirichlet_index[*x].is_none()));
        assert_eq!(d.n_trace(), 3 * 9);
        assert_eq!(d.n_interior(), 3 * 27);
    }
}
