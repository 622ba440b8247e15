//! Dirichlet solves of `a(u, v) = ⟨f, v⟩` by elimination of the boundary
//! DOFs and block-Jacobi preconditioned conjugate gradients, and the smallest
//! Dirichlet eigenvalue `λ1⁰` that bounds the admissible frequencies.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{operator_from_values, DiscreteOperator, FemSpace, DIM};
use crate::linalg::generalized_sym_eig;
use crate::material::{IsotropicTensor, PriorData};
use crate::sparse::{axpy, dot, norm2, CsrMatrix};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    /// Seconds; not serialized so that reports stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
    /// `½ xᵀAx − bᵀx` after each iteration; non-increasing for SPD systems.
    #[serde(skip)]
    pub energy_history: Vec<f64>,
}

/// The reduced system `A_II x_I = f_I − A_IB g_B` for one operator and frequency.
pub struct DirichletSystem {
    pub space: Arc<FemSpace>,
    a_ii: CsrMatrix,
    a_ib: CsrMatrix,
    precond: Vec<Matrix3<f64>>,
    pub max_iter: usize,
}

impl DirichletSystem {
    pub fn new(op: &DiscreteOperator, omega: f64) -> Result<Self> {
        let space = op.space.clone();
        let values = op.system_values(omega);
        let a_ii = space.interior_block.gather(&values);
        let a_ib = space.coupling_block.gather(&values);
        let nb = space.dofs.n_interior() / DIM;
        let mut precond = Vec::with_capacity(nb);
        for b in 0..nb {
            let block = Matrix3::from_fn(|r, c| a_ii.get(DIM * b + r, DIM * b + c));
            let inv = block.try_inverse().filter(|_| (0..3).all(|k| block[(k, k)] > 0.0)).ok_or_else(|| {
                Error::Solver {
                    iterations: 0,
                    residual: f64::NAN,
                    history: vec![],
                }
            })?;
            precond.push(inv);
        }
        let max_iter = 2000 + 4 * space.dofs.n_interior();
        Ok(Self { space, a_ii, a_ib, precond, max_iter })
    }

    pub fn n_interior(&self) -> usize {
        self.a_ii.nrows()
    }

    fn apply_precond(&self, r: &[f64], z: &mut [f64]) {
        for (b, m) in self.precond.iter().enumerate() {
            let v = m * Vector3::new(r[3 * b], r[3 * b + 1], r[3 * b + 2]);
            z[3 * b..3 * b + 3].copy_from_slice(v.as_slice());
        }
    }

    /// Right-hand side of the reduced system for full-length boundary data `g`
    /// (only Dirichlet entries are read) and full-length load `f`.
    fn reduced_rhs(&self, g: &[f64], f: &[f64]) -> Vec<f64> {
        let dofs = &self.space.dofs;
        let gb: Vec<f64> = dofs.dirichlet.iter().map(|&d| g[d]).collect();
        let mut rhs: Vec<f64> = dofs.interior.iter().map(|&d| f[d]).collect();
        if gb.iter().any(|&x| x != 0.0) {
            let coupling = self.a_ib.matvec(&gb);
            axpy(-1.0, &coupling, &mut rhs);
        }
        rhs
    }

    /// PCG on the reduced system from a zero initial guess.
    pub fn pcg(&self, b: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
        let start = Instant::now();
        let n = b.len();
        let b_norm = norm2(b);
        let mut x = vec![0.0; n];
        let mut report = SolveReport::default();
        if b_norm == 0.0 {
            report.wall_time = start.elapsed().as_secs_f64();
            return Ok((x, report));
        }
        let mut history = Vec::new();
        let mut energy = 0.0;
        let mut r = b.to_vec();
        let mut z = vec![0.0; n];
        let mut ap = vec![0.0; n];
        let mut iterations = 0;
        // restart from the true residual when the recursive one drifts
        for _restart in 0..4 {
            self.apply_precond(&r, &mut z);
            let mut p = z.clone();
            let mut rz = dot(&r, &z);
            loop {
                let res = norm2(&r) / b_norm;
                history.push(res);
                if res <= tol {
                    break;
                }
                if iterations >= self.max_iter {
                    return Err(Error::Solver { iterations, residual: res, history });
                }
                self.a_ii.matvec_into(&p, &mut ap);
                let pap = dot(&p, &ap);
                if !(pap > 0.0) {
                    return Err(Error::Solver { iterations, residual: res, history });
                }
                let alpha = rz / pap;
                axpy(alpha, &p, &mut x);
                axpy(-alpha, &ap, &mut r);
                energy -= 0.5 * alpha * rz;
                report.energy_history.push(energy);
                self.apply_precond(&r, &mut z);
                let rz_new = dot(&r, &z);
                let beta = rz_new / rz;
                rz = rz_new;
                for (pi, zi) in p.iter_mut().zip(&z) {
                    *pi = zi + beta * *pi;
                }
                iterations += 1;
            }
            let ax = self.a_ii.matvec(&x);
            r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let true_res = norm2(&r) / b_norm;
            if true_res <= tol {
                report.iterations = iterations;
                report.relative_residual = true_res;
                report.wall_time = start.elapsed().as_secs_f64();
                return Ok((x, report));
            }
        }
        let res = norm2(&r) / b_norm;
        Err(Error::Solver { iterations, residual: res, history })
    }

    /// Full DOF solution with `u = g` on ∂Ω.
    pub fn solve(&self, g: &[f64], f: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
        let n = self.space.n_dofs();
        for x in [g, f] {
            if x.len() != n {
                return Err(Error::Dimension { expected: n, got: x.len() });
            }
        }
        let rhs = self.reduced_rhs(g, f);
        let (xi, report) = self.pcg(&rhs, tol)?;
        let dofs = &self.space.dofs;
        let mut u = vec![0.0; n];
        for &d in &dofs.dirichlet {
            u[d] = g[d];
        }
        for (&d, &x) in dofs.interior.iter().zip(&xi) {
            u[d] = x;
        }
        Ok((u, report))
    }

    /// Independent solves, in input order.
    pub fn solve_many(&self, data: &[(Vec<f64>, Vec<f64>)], tol: f64) -> Result<Vec<(Vec<f64>, SolveReport)>> {
        data.par_iter().map(|(g, f)| self.solve(g, f, tol)).collect()
    }

    /// Interior-only solve `A_II x = b` returning the full vector (zero on ∂Ω).
    pub fn solve_interior_load(&self, load: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
        let zero = vec![0.0; self.space.n_dofs()];
        self.solve(&zero, load, tol)
    }
}

/// Solve `a(u, v) = ⟨f, v⟩` for all `v` vanishing on ∂Ω, with `u = g` on ∂Ω.
pub fn solve_dirichlet(op: &DiscreteOperator, omega: f64, g: &[f64], f: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    DirichletSystem::new(op, omega)?.solve(g, f, tol)
}

/// Load vector `∫ f_h · φ_i` of a nodal P1 field.
pub fn load_from_field(space: &FemSpace, field: &[f64]) -> Vec<f64> {
    space.matrix(space.unit_mass.clone()).matvec(field)
}

/// Discrete `H⁻¹(Ω)` norm of a load vector: `sqrt(f_Iᵀ H_II⁻¹ f_I)`.
pub fn dual_h1_norm(space: &Arc<FemSpace>, load: &[f64], tol: f64) -> Result<f64> {
    let h1 = space.h1_matrix();
    let op = operator_from_values(space, h1.values, vec![0.0; space.pattern.nnz()], 0.0);
    let sys = DirichletSystem::new(&op, 0.0)?;
    let (x, _) = sys.solve_interior_load(load, tol)?;
    Ok(dot(&x, load).max(0.0).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenReport {
    pub value: f64,
    pub iterations: usize,
    pub relative_residual: f64,
    pub block_size: usize,
}

const EIG_BLOCK: usize = 6;

/// `λ1⁰`: smallest eigenvalue of `(K_C, M_{ρ≡1})` on DOFs vanishing on ∂Ω.
///
/// Block inverse iteration: each step applies `K⁻¹M` through the Dirichlet
/// solver to a small block (clustered eigenvalues of symmetric domains would
/// stall a single vector), followed by Rayleigh–Ritz.
pub fn smallest_dirichlet_eigenvalue(space: &Arc<FemSpace>, tensor: IsotropicTensor, tol: f64) -> Result<EigenReport> {
    if !(tensor.mu > 0.0) {
        return Err(Error::Domain(format!("eigenproblem needs mu > 0, got {}", tensor.mu)));
    }
    let stiffness = space.homogeneous_stiffness(tensor.lambda, tensor.mu);
    let op = operator_from_values(space, stiffness, space.unit_mass.clone(), 0.0);
    let sys = DirichletSystem::new(&op, 0.0)?;
    let a = sys.a_ii.clone();
    let m = space.interior_block.gather(&space.unit_mass);
    let n = sys.n_interior();
    if n == 0 {
        return Err(Error::Geometry("mesh has no interior vertices".into()));
    }
    let p = EIG_BLOCK.min(n);
    let inner_tol = (tol * 1e-3).clamp(1e-14, 1e-8);

    // deterministic smooth-ish start: low-frequency trig modes per component
    let coords: Vec<[f64; 3]> = space
        .dofs
        .interior
        .iter()
        .map(|&d| space.mesh.vertices[d / DIM])
        .collect();
    let mut x = DMatrix::<f64>::zeros(n, p);
    for k in 0..p {
        for i in 0..n {
            let c = coords[i];
            let comp = i % DIM;
            let freq = 1.0 + (k / DIM) as f64;
            let base = (std::f64::consts::PI * c[0]).sin()
                * (std::f64::consts::PI * c[1]).sin()
                * (std::f64::consts::PI * c[2]).sin();
            let wobble = 1.0 + 0.1 * (freq * (c[0] + 2.0 * c[1] + 3.0 * c[2]) + k as f64).sin();
            x[(i, k)] = if comp == k % DIM { base * wobble } else { 0.05 * base * (k as f64 + 1.0) * c[comp] };
        }
    }

    let max_outer = 500;
    let mut last = (f64::NAN, f64::INFINITY);
    for it in 1..=max_outer {
        // Y = A⁻¹ M X
        let rhs: Vec<Vec<f64>> = (0..p).map(|k| m.matvec(x.column(k).as_slice())).collect();
        let cols: Vec<Vec<f64>> = rhs
            .par_iter()
            .map(|b| sys.pcg(b, inner_tol).map(|(y, _)| y))
            .collect::<Result<_>>()?;
        let y = DMatrix::from_fn(n, p, |i, k| cols[k][i]);
        let mut ay = DMatrix::<f64>::zeros(n, p);
        let mut my = DMatrix::<f64>::zeros(n, p);
        for k in 0..p {
            let col = y.column(k);
            ay.set_column(k, &nalgebra::DVector::from_vec(a.matvec(col.as_slice())));
            my.set_column(k, &nalgebra::DVector::from_vec(m.matvec(col.as_slice())));
        }
        let ar = y.transpose() * &ay;
        let mr = y.transpose() * &my;
        let (theta, v) = generalized_sym_eig(&ar, &mr)?;
        x = &y * &v;
        let ax0 = &ay * v.column(0);
        let mx0 = &my * v.column(0);
        let resid = (&ax0 - &mx0 * theta[0]).norm() / ax0.norm();
        last = (theta[0], resid);
        if resid <= tol {
            return Ok(EigenReport { value: theta[0], iterations: it, relative_residual: resid, block_size: p });
        }
    }
    Err(Error::Solver { iterations: max_outer, residual: last.1, history: vec![last.0] })
}

/// `ω_max = sqrt(γ0 λ1⁰ / 2)`.
pub fn admissible_frequency_bound(prior: &PriorData, lambda1_0: f64) -> Result<f64> {
    if !(lambda1_0 > 0.0) {
        return Err(Error::Domain(format!("smallest Dirichlet eigenvalue must be positive, got {lambda1_0}")));
    }
    Ok((prior.gamma0 * lambda1_0 / 2.0).sqrt())
}

/// Reject `ω` above the coercivity bound.
pub fn check_frequency(prior: &PriorData, lambda1_0: f64, omega: f64) -> Result<()> {
    let bound = prior.gamma0 * lambda1_0 / 2.0;
    if omega * omega > bound * (1.0 + 1e-12) {
        return Err(Error::FrequencyRange { omega_sq: omega * omega, bound });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::material::ParamVector;
    use crate::mesh::{build_block_mesh, two_layer_blocks, Block, BoxFace, SigmaSelector};

    fn space(n: usize, blocks: &[Block]) -> Arc<FemSpace> {
        FemSpace::new(build_block_mesh(n, n, n, blocks, SigmaSelector::face(BoxFace::ZMax)).unwrap()).unwrap()
    }

    #[test]
    fn reproduces_linear_fields() {
        let sp = space(4, &[Block::unit(1)]);
        let op = assemble(&sp, &ParamVector::uniform(1, 0.6, 1.1, 1.0), 0.0).unwrap();
        let b = Matrix3::new(0.2, -0.5, 0.1, 0.3, 0.4, -0.2, 0.0, 0.6, -0.3);
        let mut exact = vec![0.0; sp.n_dofs()];
        for (v, p) in sp.mesh.vertices.iter().enumerate() {
            let bx = b * Vector3::new(p[0], p[1], p[2]);
            exact[3 * v..3 * v + 3].copy_from_slice(bx.as_slice());
        }
        let zero = vec![0.0; sp.n_dofs()];
        let (u, rep) = solve_dirichlet(&op, 0.0, &exact, &zero, 1e-12).unwrap();
        assert!(rep.relative_residual <= 1e-12);
        let err = u.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constants_solve_with_inertial_load() {
        let sp = space(4, &[Block::unit(1)]);
        let (rho, omega) = (1.3, 1.5);
        let op = assemble(&sp, &ParamVector::uniform(1, 0.6, 1.1, rho), omega).unwrap();
        let c = [0.3, -0.7, 1.1];
        let g: Vec<f64> = (0..sp.n_dofs()).map(|d| c[d % 3]).collect();
        let field: Vec<f64> = g.iter().map(|x| -omega * omega * rho * x).collect();
        let f = load_from_field(&sp, &field);
        let (u, _) = solve_dirichlet(&op, omega, &g, &f, 1e-12).unwrap();
        let err = u.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn zero_data_gives_zero() {
        let sp = space(3, &[Block::unit(1)]);
        let op = assemble(&sp, &ParamVector::uniform(1, 0.6, 1.1, 1.0), 0.5).unwrap();
        let zero = vec![0.0; sp.n_dofs()];
        let (u, rep) = solve_dirichlet(&op, 0.5, &zero, &zero, 1e-12).unwrap();
        assert!(u.iter().all(|&x| x == 0.0));
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn cg_energy_monotone() {
        let sp = space(5, &two_layer_blocks(0.6));
        let l = ParamVector::from_parts(&[0.3, 1.0], &[0.7, 1.8], &[1.0, 1.5]).unwrap();
        let op = assemble(&sp, &l, 1.0).unwrap();
        let g: Vec<f64> = (0..sp.n_dofs()).map(|d| ((d * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let zero = vec![0.0; sp.n_dofs()];
        let (_, rep) = solve_dirichlet(&op, 1.0, &g, &zero, 1e-12).unwrap();
        assert!(rep.iterations > 5);
        for w in rep.energy_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn indefinite_system_reports_failure() {
        let sp = space(3, &[Block::unit(1)]);
        let op = assemble(&sp, &ParamVector::uniform(1, 0.0, 1.0, 1.0), 40.0).unwrap();
        let g: Vec<f64> = (0..sp.n_dofs()).map(|d| (d % 5) as f64).collect();
        let zero = vec![0.0; sp.n_dofs()];
        assert!(matches!(solve_dirichlet(&op, 40.0, &g, &zero, 1e-12), Err(Error::Solver { .. })));
    }

    #[test]
    fn dimension_checked() {
        let sp = space(2, &[Block::unit(1)]);
        let op = assemble(&sp, &ParamVector::uniform(1, 0.0, 1.0, 1.0), 0.0).unwrap();
        assert!(matches!(solve_dirichlet(&op, 0.0, &[0.0; 3], &[0.0; 3], 1e-10), Err(Error::Dimension { .. })));
    }

    /// Dense generalized eigensolve on the interior block: oracle.
    fn dense_smallest(sp: &Arc<FemSpace>, t: IsotropicTensor) -> f64 {
        let k = sp.interior_block.gather(&sp.homogeneous_stiffness(t.lambda, t.mu)).to_dense();
        let m = sp.interior_block.gather(&sp.unit_mass).to_dense();
        let l = m.clone().cholesky().unwrap().l();
        let li = l.try_inverse().unwrap();
        let c = &li * k * li.transpose();
        let c = (&c + c.transpose()) * 0.5;
        c.symmetric_eigenvalues().min()
    }

    #[test]
    fn eigenvalue_matches_dense_and_scales() {
        let sp = space(4, &[Block::unit(1)]);
        let t = IsotropicTensor::new(-0.25, 0.5);
        let rep = smallest_dirichlet_eigenvalue(&sp, t, 1e-10).unwrap();
        let dense = dense_smallest(&sp, t);
        assert!((rep.value - dense).abs() <= 1e-8 * dense, "{} vs {}", rep.value, dense);
        let doubled = smallest_dirichlet_eigenvalue(&sp, IsotropicTensor::new(-0.5, 1.0), 1e-10).unwrap();
        assert!((doubled.value - 2.0 * rep.value).abs() <= 1e-10 * rep.value * 2.0);
    }

    #[test]
    fn eigenvalue_below_rayleigh_quotients() {
        let sp = space(4, &[Block::unit(1)]);
        let t = IsotropicTensor::new(0.1, 0.7);
        let lam = smallest_dirichlet_eigenvalue(&sp, t, 1e-10).unwrap().value;
        let k = sp.interior_block.gather(&sp.homogeneous_stiffness(t.lambda, t.mu));
        let m = sp.interior_block.gather(&sp.unit_mass);
        for s in 0..50u64 {
            let x: Vec<f64> = (0..k.nrows())
                .map(|i| (((i as u64 + 1) * (s + 3) * 2654435761) % 1000) as f64 / 1000.0 - 0.3)
                .collect();
            let rq = k.quad_form(&x, &x) / m.quad_form(&x, &x);
            assert!(lam <= rq * (1.0 + 1e-12));
        }
    }

    #[test]
    fn frequency_bound() {
        let prior = PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, 1).unwrap();
        assert!((admissible_frequency_bound(&prior, 16.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(admissible_frequency_bound(&prior, 0.0).is_err());
        let tiny = PriorData::new(0.5, 1.0, 1e-12, 1.0, 1.0, 1).unwrap();
        assert!(admissible_frequency_bound(&tiny, 16.0).unwrap() < 1e-5);
        assert!(check_frequency(&prior, 16.0, 2.0).is_ok());
        assert!(check_frequency(&prior, 16.0, 2.01).is_err());
    }
}
