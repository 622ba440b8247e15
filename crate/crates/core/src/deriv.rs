//! Derivative of the forward map: bilinear evaluation by quadrature, the
//! Jacobian blocks `∂Λ/∂l_k`, the Taylor-remainder order check, the Lipschitz
//! probe for the derivative and the whitened misfit with its gradient.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dtn::{volume_pairing, DtnOperator, ForwardModel};
use crate::error::{Error, Result};
use crate::fem::{assemble, FemSpace};
use crate::linalg::symmetrize;
use crate::material::{ConstraintSet, ParamVector};
use crate::solver::DirichletSystem;

/// `⟨DF(l)[h] ψ, φ⟩ = ∫ (C_h ∇̂u : ∇̂v − ρ_h ω² u·v)` with `u`, `v` the
/// solutions for data `ψ`, `φ`.
pub fn df_apply(
    space: &Arc<FemSpace>,
    l: &ParamVector,
    h: &ParamVector,
    omega: f64,
    psi: &[f64],
    phi: &[f64],
    tol: f64,
) -> Result<f64> {
    let n_t = space.dofs.n_trace();
    for x in [psi, phi] {
        if x.len() != n_t {
            return Err(Error::Dimension { expected: n_t, got: x.len() });
        }
    }
    if h.len() != l.len() {
        return Err(Error::Dimension { expected: l.len(), got: h.len() });
    }
    if h.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let sys = DirichletSystem::new(&assemble(space, l, omega)?, omega)?;
    let zero = vec![0.0; space.n_dofs()];
    let (u, _) = sys.solve(&space.dofs.extend_trace(psi), &zero, tol)?;
    let (v, _) = sys.solve(&space.dofs.extend_trace(phi), &zero, tol)?;
    Ok(volume_pairing(space, h, omega, &u, &v))
}

/// `∂Λ/∂l_k` for every parameter index, in the `(λ.., μ.., ρ..)` layout.
#[derive(Debug, Clone)]
pub struct DfJacobian {
    pub mesh_id: String,
    pub params: Vec<f64>,
    pub omega: f64,
    pub blocks: Vec<DMatrix<f64>>,
}

impl DfJacobian {
    /// `DF(l)[h] = Σ_k h_k B_k`.
    pub fn apply(&self, h: &ParamVector) -> Result<DMatrix<f64>> {
        if h.len() != self.blocks.len() {
            return Err(Error::Dimension { expected: self.blocks.len(), got: h.len() });
        }
        let n = self.blocks.first().map_or(0, |b| b.nrows());
        let mut out = DMatrix::zeros(n, n);
        for (c, b) in h.as_slice().iter().zip(&self.blocks) {
            if *c != 0.0 {
                out += b * *c;
            }
        }
        Ok(out)
    }

    /// Columns `vec(W B_k W)`, so that `‖W DF[h] W‖_F = ‖J h‖₂`.
    pub fn whitened(&self, whiten: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<DMatrix<f64>> = self.blocks.par_iter().map(|b| whiten * b * whiten).collect();
        let rows = cols.first().map_or(0, |c| c.len());
        DMatrix::from_fn(rows, cols.len(), |i, k| cols[k].as_slice()[i])
    }
}

/// Jacobian from the stored Dirichlet solutions of a forward evaluation:
/// `B_k = Uᵀ K_k U` (and `−ω² Uᵀ M_j U` for densities).
pub fn df_jacobian_from(space: &FemSpace, fwd: &DtnOperator) -> DfJacobian {
    let n_sub = space.n_sub;
    let w2 = fwd.omega * fwd.omega;
    let cols = &fwd.solutions;
    let n_t = cols.len();
    let blocks = (0..3 * n_sub)
        .into_par_iter()
        .map(|k| {
            let is_density = k >= 2 * n_sub;
            if is_density && w2 == 0.0 {
                return DMatrix::zeros(n_t, n_t);
            }
            let scale = if is_density { -w2 } else { 1.0 };
            let mat = space.matrix(space.parameter_block(k).to_vec());
            let ku: Vec<Vec<f64>> = cols.iter().map(|u| mat.matvec(u)).collect();
            let b = DMatrix::from_fn(n_t, n_t, |i, j| scale * crate::sparse::dot(&cols[i], &ku[j]));
            symmetrize(&b)
        })
        .collect();
    DfJacobian { mesh_id: fwd.mesh_id.clone(), params: fwd.params.clone(), omega: fwd.omega, blocks }
}

pub fn df_jacobian(model: &ForwardModel, l: &ParamVector, omega: f64, tol: f64) -> Result<DfJacobian> {
    let fwd = model.forward(l, omega, tol)?;
    Ok(df_jacobian_from(&model.space, &fwd))
}

#[derive(Debug, Clone, Serialize)]
pub struct TaylorReport {
    pub t: Vec<f64>,
    pub remainder: Vec<f64>,
    /// Least-squares slope of `log r` against `log t`; `None` when all remainders vanish.
    pub slope: Option<f64>,
    pub exact: bool,
}

pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// `r(t) = ‖F(l + t h) − F(l) − t DF(l)[h]‖⋆` over `t_list` and its fitted order.
pub fn taylor_order(
    model: &ForwardModel,
    admissible: &ConstraintSet,
    l: &ParamVector,
    h: &ParamVector,
    omega: f64,
    t_list: &[f64],
    tol: f64,
) -> Result<TaylorReport> {
    if h.max_abs() == 0.0 {
        return Ok(TaylorReport { t: t_list.to_vec(), remainder: vec![0.0; t_list.len()], slope: None, exact: true });
    }
    for &t in t_list {
        let lt = l.add_scaled(t, h);
        if !admissible.contains(&lt) {
            return Err(Error::Domain(format!("l + {t}·h leaves the admissible set")));
        }
    }
    let base = model.forward(l, omega, tol)?;
    let dfh = df_jacobian_from(&model.space, &base).apply(h)?;
    let mut remainder = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let ft = model.forward(&l.add_scaled(t, h), omega, tol)?;
        let r = &ft.entries - &base.entries - &dfh * t;
        remainder.push(model.star_norm(&r)?);
    }
    let scale = model.star_norm(&base.entries)?;
    let floor = 1e3 * tol * scale.max(f64::MIN_POSITIVE);
    if remainder.iter().all(|&r| r <= floor) {
        return Ok(TaylorReport { t: t_list.to_vec(), remainder, slope: None, exact: true });
    }
    let slope = loglog_slope(t_list, &remainder);
    Ok(TaylorReport { t: t_list.to_vec(), remainder, slope: Some(slope), exact: false })
}

/// All sign vectors of length `n` up to a global sign, in a fixed order.
pub(crate) fn sign_vertices(n: usize) -> impl Iterator<Item = Vec<f64>> {
    let count = if n == 0 { 0 } else { 1u64 << (n - 1) };
    (0..count).map(move |mask| (0..n).map(|i| if i > 0 && mask >> (i - 1) & 1 == 1 { -1.0 } else { 1.0 }).collect())
}

/// Largest enumerated dimension for exact sign-vertex searches.
pub const SIGN_ENUMERATION_LIMIT: usize = 12;

/// `max_{‖h‖∞ = 1} ‖(DF(l1) − DF(l2))[h]‖⋆ / ‖l1 − l2‖∞`.
///
/// The maximum of a norm of a linear map over the ∞-ball sits at a sign
/// vertex; all vertices are enumerated for up to twelve parameters, otherwise
/// `samples` random vertices are drawn from `seed`.
pub fn df_lipschitz_probe(
    model: &ForwardModel,
    l1: &ParamVector,
    l2: &ParamVector,
    omega: f64,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<f64> {
    let dist = l1.sub(l2).sup_norm();
    if dist == 0.0 {
        return Err(Error::Degenerate("df_lipschitz_probe needs l1 != l2".into()));
    }
    let j1 = df_jacobian(model, l1, omega, tol)?;
    let j2 = df_jacobian(model, l2, omega, tol)?;
    let diff = DfJacobian {
        mesh_id: j1.mesh_id.clone(),
        params: vec![],
        omega,
        blocks: j1.blocks.iter().zip(&j2.blocks).map(|(a, b)| a - b).collect(),
    };
    let n = l1.len();
    let vertices: Vec<Vec<f64>> = if n <= SIGN_ENUMERATION_LIMIT {
        sign_vertices(n).collect()
    } else {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..samples.max(1))
            .map(|_| (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())
            .collect()
    };
    let norms: Vec<f64> = vertices
        .par_iter()
        .map(|h| {
            let m = diff.apply(&ParamVector::new(h.clone())?)?;
            model.star_norm(&m)
        })
        .collect::<Result<_>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max) / dist)
}

/// `½ ‖W (F(l) − D) W‖²_F` with its gradient and the ⋆-norm of the residual.
#[derive(Debug, Clone)]
pub struct Misfit {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub residual_star: f64,
    pub jacobian: DfJacobian,
    /// Whitened residual `vec(W R W)`.
    pub whitened_residual: DVector<f64>,
}

pub fn whitened_misfit(model: &ForwardModel, l: &ParamVector, data: &DMatrix<f64>, omega: f64, tol: f64) -> Result<Misfit> {
    let fwd = model.forward(l, omega, tol)?;
    if data.shape() != fwd.entries.shape() {
        return Err(Error::Dimension { expected: fwd.entries.nrows(), got: data.nrows() });
    }
    let r = &fwd.entries - data;
    let wr = model.metric.whitened(&r);
    let jac = df_jacobian_from(&model.space, &fwd);
    let wj = jac.whitened(&model.metric.whiten);
    let res = DVector::from_column_slice(wr.as_slice());
    let gradient = wj.transpose() * &res;
    Ok(Misfit {
        value: 0.5 * res.norm_squared(),
        gradient,
        residual_star: crate::linalg::spectral_norm(&wr),
        jacobian: jac,
        whitened_residual: res,
    })
}

/// Misfit value only.
pub fn misfit_value(model: &ForwardModel, l: &ParamVector, data: &DMatrix<f64>, omega: f64, tol: f64) -> Result<f64> {
    let fwd = model.forward(l, omega, tol)?;
    let wr = model.metric.whitened(&(&fwd.entries - data));
    Ok(0.5 * wr.norm_squared())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradientCheck {
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

/// Misfit gradient against central differences with step `t` per coordinate.
pub fn gradient_check(
    model: &ForwardModel,
    l: &ParamVector,
    data: &DMatrix<f64>,
    omega: f64,
    t: f64,
    tol: f64,
) -> Result<Vec<GradientCheck>> {
    let mis = whitened_misfit(model, l, data, omega, tol)?;
    (0..l.len())
        .map(|k| {
            let mut e = ParamVector::zeros(l.n_sub());
            e.as_mut_slice()[k] = 1.0;
            let fp = misfit_value(model, &l.add_scaled(t, &e), data, omega, tol)?;
            let fm = misfit_value(model, &l.add_scaled(-t, &e), data, omega, tol)?;
            let fd = (fp - fm) / (2.0 * t);
            let g = mis.gradient[k];
            Ok(GradientCheck { analytic: g, finite_difference: fd, relative_error: (fd - g).abs() / g.abs().max(f64::MIN_POSITIVE) })
        })
        .collect()
}
