//! The local Dirichlet-to-Neumann operator on the accessible patch Σ, the
//! discrete `H^{1/2}(Σ)` metric behind the ⋆-norm, the cached forward map
//! and the Alessandrini identity check.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{element_displacement_gradient, element_gradients, local_values, FemSpace, DIM};
use crate::linalg::{spectral_norm, sym_function, symmetrize};
use crate::material::ParamVector;
use crate::mesh::{hex, Point};
use crate::solver::DirichletSystem;

/// Discrete `H^{1/2}(Σ)` structure on the Σ trace DOFs.
#[derive(Debug, Clone)]
pub struct BoundaryMetric {
    pub trace_dofs: Vec<usize>,
    /// Surface P1 mass (vector-valued, componentwise).
    pub mass: DMatrix<f64>,
    /// Surface Laplace–Beltrami stiffness.
    pub stiffness: DMatrix<f64>,
    /// Squared `H^{1/2}` norm: `ψᵀ N ψ`.
    pub n_half: DMatrix<f64>,
    /// `N^{-1/2}`, the whitening map of the ⋆-norm.
    pub whiten: DMatrix<f64>,
}

/// Scalar P1 mass and stiffness of a triangulated surface, restricted to `nodes`
/// (entries touching other vertices are dropped, i.e. zero extension).
pub fn surface_matrices(vertices: &[Point], triangles: &[[usize; 3]], nodes: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = nodes.len();
    let mut local = std::collections::HashMap::with_capacity(n);
    for (k, &v) in nodes.iter().enumerate() {
        local.insert(v, k);
    }
    let mut mass = DMatrix::zeros(n, n);
    let mut stiff = DMatrix::zeros(n, n);
    for tri in triangles {
        let p = tri.map(|v| nalgebra::Vector3::from(vertices[v]));
        let area = 0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        // edge opposite vertex a
        let edge = |a: usize| p[(a + 2) % 3] - p[(a + 1) % 3];
        for a in 0..3 {
            let Some(&ia) = local.get(&tri[a]) else { continue };
            for b in 0..3 {
                let Some(&ib) = local.get(&tri[b]) else { continue };
                mass[(ia, ib)] += area / 12.0 * if a == b { 2.0 } else { 1.0 };
                stiff[(ia, ib)] += edge(a).dot(&edge(b)) / (4.0 * area);
            }
        }
    }
    (mass, stiff)
}

/// `A ⊗ I₃` in the vertex-major DOF ordering.
fn kron_identity(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(DIM * n, DIM * n, |i, j| if i % DIM == j % DIM { a[(i / DIM, j / DIM)] } else { 0.0 })
}

impl BoundaryMetric {
    /// Metric from scalar surface matrices, spread componentwise.
    pub fn from_scalar(trace_dofs: Vec<usize>, mass: &DMatrix<f64>, stiffness: &DMatrix<f64>) -> Result<Self> {
        let n_half = interpolated_half_norm(mass, stiffness)?;
        let whiten = sym_function(&n_half, |x| 1.0 / x.sqrt());
        Ok(Self {
            trace_dofs,
            mass: kron_identity(mass),
            stiffness: kron_identity(stiffness),
            n_half: kron_identity(&n_half),
            whiten: kron_identity(&whiten),
        })
    }

    pub fn dim(&self) -> usize {
        self.trace_dofs.len()
    }

    /// `W d W`.
    pub fn whitened(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        &self.whiten * d * &self.whiten
    }
}

/// `M^{1/2} (M^{-1/2} (M + S) M^{-1/2})^{1/2} M^{1/2}`.
pub fn interpolated_half_norm(mass: &DMatrix<f64>, stiffness: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = mass.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Degenerate("boundary mass matrix is not positive definite".into()));
    }
    let m_half = sym_function(mass, f64::sqrt);
    let m_inv_half = sym_function(mass, |x| 1.0 / x.sqrt());
    let inner = symmetrize(&(&m_inv_half * (mass + stiffness) * &m_inv_half));
    let root = sym_function(&inner, |x| x.max(0.0).sqrt());
    Ok(symmetrize(&(&m_half * root * &m_half)))
}

pub fn boundary_metric(space: &FemSpace) -> Result<BoundaryMetric> {
    let mesh = &space.mesh;
    let triangles: Vec<[usize; 3]> = mesh.sigma_faces().map(|f| f.v).collect();
    if triangles.is_empty() {
        return Err(Error::Geometry("the SIGMA patch is empty".into()));
    }
    let nodes = mesh.sigma_interior_vertices();
    if nodes.is_empty() {
        return Err(Error::Geometry("the SIGMA patch has no vertices away from its rim; refine the mesh".into()));
    }
    let (m, s) = surface_matrices(&mesh.vertices, &triangles, &nodes);
    BoundaryMetric::from_scalar(space.dofs.sigma_trace.clone(), &m, &s)
}

/// `Λ_ij = ⟨Λ ψ_j, ψ_i⟩` over the Σ trace basis.
#[derive(Debug, Clone, Serialize)]
pub struct DtnOperator {
    pub mesh_id: String,
    pub params: Vec<f64>,
    pub omega: f64,
    pub tol: f64,
    pub trace_dofs: Vec<usize>,
    /// `‖Λ − Λᵀ‖_F / ‖Λ‖_F` before averaging.
    pub asymmetry: f64,
    #[serde(skip)]
    pub entries: DMatrix<f64>,
    /// Full-DOF solutions for each trace basis function, column `j` for `ψ_j`.
    #[serde(skip)]
    pub solutions: Arc<Vec<Vec<f64>>>,
}

impl DtnOperator {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Solution for arbitrary Σ data `ψ` by superposition of the stored columns.
    pub fn solution_for(&self, psi: &[f64]) -> Vec<f64> {
        let n = self.solutions.first().map_or(0, Vec::len);
        let mut u = vec![0.0; n];
        for (c, col) in psi.iter().zip(self.solutions.iter()) {
            if *c != 0.0 {
                crate::sparse::axpy(*c, col, &mut u);
            }
        }
        u
    }

    pub fn to_json(&self) -> serde_json::Value {
        let lambda: Vec<f64> = (0..self.dim())
            .flat_map(|i| (0..self.dim()).map(move |j| (i, j)))
            .map(|(i, j)| self.entries[(i, j)])
            .collect();
        json!({
            "dim": self.dim(),
            "sigma_dofs": self.trace_dofs,
            "lambda": lambda,
            "omega": self.omega,
            "params": self.params,
            "asymmetry": self.asymmetry,
            "mesh_id": self.mesh_id,
        })
    }
}

pub fn assemble_dtn(space: &Arc<FemSpace>, l: &ParamVector, omega: f64, tol: f64) -> Result<DtnOperator> {
    let op = crate::fem::assemble(space, l, omega)?;
    let sys = DirichletSystem::new(&op, omega)?;
    let system = op.system_matrix(omega);
    let dofs = &space.dofs;
    let n_t = dofs.n_trace();
    let zero = vec![0.0; space.n_dofs()];
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..n_t)
        .into_par_iter()
        .map(|j| {
            let mut g = vec![0.0; space.n_dofs()];
            g[dofs.sigma_trace[j]] = 1.0;
            let (u, _) = sys.solve(&g, &zero, tol)?;
            let au = system.matvec(&u);
            Ok((u, dofs.restrict_to_trace(&au)))
        })
        .collect::<Result<_>>()?;
    let raw = DMatrix::from_fn(n_t, n_t, |i, j| results[j].1[i]);
    let norm = raw.norm();
    let asymmetry = if norm > 0.0 { (&raw - raw.transpose()).norm() / norm } else { 0.0 };
    Ok(DtnOperator {
        mesh_id: space.mesh_id.clone(),
        params: l.as_slice().to_vec(),
        omega,
        tol,
        trace_dofs: dofs.sigma_trace.clone(),
        asymmetry,
        entries: symmetrize(&raw),
        solutions: Arc::new(results.into_iter().map(|(u, _)| u).collect()),
    })
}

/// Operator norm `H^{1/2}(Σ) → H^{-1/2}(Σ)` of a trace-space matrix.
pub fn star_norm(d: &DMatrix<f64>, metric: &BoundaryMetric) -> Result<f64> {
    let n = metric.dim();
    if d.nrows() != n || d.ncols() != n {
        return Err(Error::Dimension { expected: n, got: if d.nrows() != n { d.nrows() } else { d.ncols() } });
    }
    Ok(spectral_norm(&metric.whitened(d)))
}

const CACHE_CAPACITY: usize = 24;

/// The forward map `l ↦ Λ(l)` on one mesh, with a bounded cache keyed by a
/// content hash of `(mesh, l, ω, tol)`.
pub struct ForwardModel {
    pub space: Arc<FemSpace>,
    pub metric: BoundaryMetric,
    cache: Mutex<VecDeque<(String, Arc<DtnOperator>)>>,
}

fn cache_key(mesh_id: &str, l: &ParamVector, omega: f64, tol: f64) -> String {
    let mut h = Sha256::new();
    h.update(mesh_id.as_bytes());
    for x in l.as_slice() {
        h.update(x.to_bits().to_le_bytes());
    }
    h.update(omega.to_bits().to_le_bytes());
    h.update(tol.to_bits().to_le_bytes());
    hex(&h.finalize())
}

impl ForwardModel {
    pub fn new(space: Arc<FemSpace>) -> Result<Self> {
        let metric = boundary_metric(&space)?;
        Ok(Self { space, metric, cache: Mutex::new(VecDeque::new()) })
    }

    pub fn forward(&self, l: &ParamVector, omega: f64, tol: f64) -> Result<Arc<DtnOperator>> {
        let key = cache_key(&self.space.mesh_id, l, omega, tol);
        if let Some(hit) = self.lookup(&key) {
            return Ok(hit);
        }
        let op = Arc::new(assemble_dtn(&self.space, l, omega, tol)?);
        let mut cache = self.cache.lock().expect("cache lock");
        if !cache.iter().any(|(k, _)| *k == key) {
            if cache.len() == CACHE_CAPACITY {
                cache.pop_front();
            }
            cache.push_back((key, op.clone()));
        }
        Ok(op)
    }

    fn lookup(&self, key: &str) -> Option<Arc<DtnOperator>> {
        let cache = self.cache.lock().expect("cache lock");
        cache.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
    }

    pub fn star_norm(&self, d: &DMatrix<f64>) -> Result<f64> {
        star_norm(d, &self.metric)
    }

    pub fn clear_cache(&self) {
        self.cache.lock().expect("cache lock").clear();
    }
}

pub fn forward_map(model: &ForwardModel, l: &ParamVector, omega: f64, tol: f64) -> Result<Arc<DtnOperator>> {
    model.forward(l, omega, tol)
}

/// `∫ (C_h ∇̂u : ∇̂v − ρ_h ω² u·v)` by element quadrature, with per-subdomain
/// coefficient `h` in the `(λ.., μ.., ρ..)` layout.
pub fn volume_pairing(space: &FemSpace, h: &ParamVector, omega: f64, u: &[f64], v: &[f64]) -> f64 {
    let mesh = &space.mesh;
    let w2 = omega * omega;
    let chunks: Vec<f64> = (0..mesh.tets.len())
        .collect::<Vec<_>>()
        .par_chunks(2048)
        .map(|ts| {
            let mut acc = 0.0;
            for &t in ts {
                let j = mesh.tets[t].region - 1;
                let (lam, mu, rho) = (h.lambda(j), h.mu(j), h.rho(j));
                let (vol, g) = element_gradients(mesh, t);
                let ul = local_values(u, &mesh.tets[t].v);
                let vl = local_values(v, &mesh.tets[t].v);
                let mut val = 0.0;
                if lam != 0.0 || mu != 0.0 {
                    let gu = element_displacement_gradient(&g, &ul);
                    let gv = element_displacement_gradient(&g, &vl);
                    let eu = (gu + gu.transpose()) * 0.5;
                    let ev = (gv + gv.transpose()) * 0.5;
                    val += vol * (lam * eu.trace() * ev.trace() + 2.0 * mu * eu.component_mul(&ev).sum());
                }
                if rho != 0.0 && w2 != 0.0 {
                    // exact for P1 x P1: vol/20 (Σ u_a·v_a + Σ_a u_a · Σ_b v_b)
                    let mut diag = 0.0;
                    let mut su = [0.0; 3];
                    let mut sv = [0.0; 3];
                    for a in 0..4 {
                        for c in 0..3 {
                            diag += ul[a][c] * vl[a][c];
                            su[c] += ul[a][c];
                            sv[c] += vl[a][c];
                        }
                    }
                    let cross: f64 = (0..3).map(|c| su[c] * sv[c]).sum();
                    val -= rho * w2 * vol / 20.0 * (diag + cross);
                }
                acc += val;
            }
            acc
        })
        .collect();
    chunks.iter().sum()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlessandriniGap {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// `gap / max(|lhs|, |rhs|)`.
    pub relative: f64,
}

/// Volume side from the two solves against the boundary pairing
/// `φᵀ (Λ₁ − Λ₂) ψ`.
pub fn alessandrini_gap(
    model: &ForwardModel,
    l1: &ParamVector,
    l2: &ParamVector,
    omega: f64,
    psi: &[f64],
    phi: &[f64],
    tol: f64,
) -> Result<AlessandriniGap> {
    let space = &model.space;
    let n_t = space.dofs.n_trace();
    for x in [psi, phi] {
        if x.len() != n_t {
            return Err(Error::Dimension { expected: n_t, got: x.len() });
        }
    }
    let zero = vec![0.0; space.n_dofs()];
    let sys1 = DirichletSystem::new(&crate::fem::assemble(space, l1, omega)?, omega)?;
    let sys2 = DirichletSystem::new(&crate::fem::assemble(space, l2, omega)?, omega)?;
    let (u1, _) = sys1.solve(&space.dofs.extend_trace(psi), &zero, tol)?;
    let (u2, _) = sys2.solve(&space.dofs.extend_trace(phi), &zero, tol)?;
    let lhs = volume_pairing(space, &l1.sub(l2), omega, &u1, &u2);

    let f1 = model.forward(l1, omega, tol)?;
    let f2 = model.forward(l2, omega, tol)?;
    let diff = &f1.entries - &f2.entries;
    let p = nalgebra::DVector::from_column_slice(psi);
    let q = nalgebra::DVector::from_column_slice(phi);
    let rhs = q.dot(&(diff * p));
    let gap = (lhs - rhs).abs();
    Ok(AlessandriniGap { lhs, rhs, gap, relative: gap / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE) })
}
