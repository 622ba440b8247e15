//! Projected iterative reconstruction of the parameters from DtN data, with
//! full, Lamé-only (S1) and density-only (S2) modes.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deriv::{loglog_slope, whitened_misfit, Misfit};
use crate::dtn::{DtnOperator, ForwardModel};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, symmetrize};
use crate::material::{project_onto_k_masked, ConstraintSet, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    /// All of `(λ, μ, ρ)`.
    Full,
    /// Lamé pair only, density known.
    S1,
    /// Density only, Lamé pair known.
    S2,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" => Some(Mode::Full),
            "S1" => Some(Mode::S1),
            "S2" => Some(Mode::S2),
            _ => None,
        }
    }

    fn lame(self) -> bool {
        self != Mode::S2
    }

    fn density(self) -> bool {
        self != Mode::S1
    }

    /// Active coordinates in the `(λ.., μ.., ρ..)` layout.
    pub fn active(self, n_sub: usize) -> Vec<usize> {
        (0..3 * n_sub).filter(|&k| if k < 2 * n_sub { self.lame() } else { self.density() }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Classical Landweber with a constant step.
    Fixed { step: f64 },
    /// Armijo backtracking along the projected path.
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Negative misfit gradient.
    Gradient,
    /// Gradient scaled by the damped Gauss–Newton matrix `J̃ᵀJ̃`.
    GaussNewton,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionConfig {
    pub mode: Mode,
    pub step_rule: StepRule,
    pub direction: Direction,
    pub max_iterations: usize,
    /// Discrepancy factor `τ > 1`.
    pub tau: f64,
    /// Relative noise level of the data in the ⋆-norm.
    pub noise_level: f64,
    /// Starting point; the centroid of the constraint set when absent.
    pub initial: Option<ParamVector>,
    /// FULL and S2 require `ω ≥ min_omega_fraction · ω_max` when `ω_max` is known.
    pub min_omega_fraction: f64,
    pub omega_max: Option<f64>,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Relative Levenberg damping of the Gauss–Newton matrix.
    pub damping: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            step_rule: StepRule::Backtracking,
            direction: Direction::GaussNewton,
            max_iterations: 500,
            tau: 1.5,
            noise_level: 0.0,
            initial: None,
            min_omega_fraction: 0.5,
            omega_max: None,
            armijo: 1e-4,
            max_backtracks: 40,
            damping: 1e-10,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self, k: &ConstraintSet) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.tau > 1.0) {
            errs.push(format!("tau must exceed 1, got {}", self.tau));
        }
        if !(self.noise_level >= 0.0) {
            errs.push(format!("noise_level must be >= 0, got {}", self.noise_level));
        }
        if self.max_iterations == 0 {
            errs.push("max_iterations must be positive".into());
        }
        if let StepRule::Fixed { step } = self.step_rule {
            if !(step > 0.0) {
                errs.push(format!("fixed step must be positive, got {step}"));
            }
        }
        if let Some(l0) = &self.initial {
            if !k.contains(l0) {
                errs.push("initial guess is outside the compact admissible set".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub misfit: f64,
    pub residual_star: f64,
    pub gradient_norm: f64,
    /// Step length taken to reach the next iterate (0 on the last record).
    pub step: f64,
    /// Whether the projection moved the trial point.
    pub projected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Discrepancy,
    StationaryPoint,
    SmallStep,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionTrace {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl InversionTrace {
    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iteration)
    }

    pub fn to_csv(&self) -> String {
        let n = self.records.first().map_or(0, |r| r.params.len());
        let mut s = String::from("iteration,misfit,residual_star,gradient_norm,step,projected");
        for k in 0..n {
            let _ = write!(s, ",p{k}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{:e},{:e},{:e},{:e},{}", r.iteration, r.misfit, r.residual_star, r.gradient_norm, r.step, r.projected);
            for p in &r.params {
                let _ = write!(s, ",{p:e}");
            }
            s.push('\n');
        }
        s
    }
}

fn masked(v: &DVector<f64>, active: &[usize]) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for &k in active {
        out[k] = v[k];
    }
    out
}

fn search_direction(cfg: &InversionConfig, mis: &Misfit, whiten: &DMatrix<f64>, active: &[usize]) -> DVector<f64> {
    let g = masked(&mis.gradient, active);
    match cfg.direction {
        Direction::Gradient => -g,
        Direction::GaussNewton => {
            let full = mis.jacobian.whitened(whiten);
            let j = full.select_columns(active.iter());
            let mut h = j.transpose() * &j;
            let scale = (0..h.nrows()).map(|i| h[(i, i)]).fold(0.0, f64::max);
            for i in 0..h.nrows() {
                h[(i, i)] += cfg.damping * scale.max(f64::MIN_POSITIVE);
            }
            let ga = DVector::from_iterator(active.len(), active.iter().map(|&k| g[k]));
            let da = h.cholesky().map(|c| c.solve(&ga)).unwrap_or_else(|| ga.clone());
            let mut d = DVector::zeros(g.len());
            for (i, &k) in active.iter().enumerate() {
                d[k] = -da[i];
            }
            d
        }
    }
}

fn initial_step(direction: Direction, mis: &Misfit, whiten: &DMatrix<f64>, active: &[usize]) -> f64 {
    match direction {
        Direction::GaussNewton => 1.0,
        Direction::Gradient => {
            let j = mis.jacobian.whitened(whiten).select_columns(active.iter());
            1.0 / spectral_norm(&j).powi(2).max(f64::MIN_POSITIVE)
        }
    }
}

/// Projected iteration `l ← Π_𝐊(l + s d)` on the whitened Frobenius misfit.
pub fn landweber(
    model: &ForwardModel,
    data: &DtnOperator,
    k: &ConstraintSet,
    cfg: &InversionConfig,
    omega: f64,
    tol: f64,
) -> Result<(ParamVector, InversionTrace)> {
    cfg.validate(k)?;
    if data.mesh_id != model.space.mesh_id {
        return Err(Error::Config("data were assembled on a different mesh".into()));
    }
    if cfg.mode.density() && omega == 0.0 {
        return Err(Error::Config("density is not identifiable from static data (omega = 0)".into()));
    }
    if let Some(w_max) = cfg.omega_max {
        if cfg.mode.density() && omega < cfg.min_omega_fraction * w_max {
            return Err(Error::Config(format!(
                "{:?} mode needs omega >= {} * omega_max = {}, got {omega}",
                cfg.mode,
                cfg.min_omega_fraction,
                cfg.min_omega_fraction * w_max
            )));
        }
    }
    let n_sub = model.space.n_sub;
    let active = cfg.mode.active(n_sub);
    let project = |l: &ParamVector| project_onto_k_masked(l, k, cfg.mode.lame(), cfg.mode.density());
    let mut l = match &cfg.initial {
        Some(l0) => l0.clone(),
        None => k.centroid(n_sub)?,
    };
    if l.n_sub() != n_sub {
        return Err(Error::Dimension { expected: 3 * n_sub, got: l.len() });
    }
    let d = &data.entries;
    let data_star = model.star_norm(d)?;
    let data_frob = 0.5 * model.metric.whitened(d).norm_squared();
    let target = cfg.tau * cfg.noise_level * data_star;
    let whiten = &model.metric.whiten;

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut mis = whitened_misfit(model, &l, d, omega, tol)?;
    let mut iteration = 0;
    let stop = loop {
        let g = masked(&mis.gradient, &active);
        let mut rec = IterationRecord {
            iteration,
            params: l.as_slice().to_vec(),
            misfit: mis.value,
            residual_star: mis.residual_star,
            gradient_norm: g.norm(),
            step: 0.0,
            projected: false,
        };
        if cfg.noise_level > 0.0 && mis.residual_star <= target {
            records.push(rec);
            break StopReason::Discrepancy;
        }
        let dir = search_direction(cfg, &mis, whiten, &active);
        let dir_p = ParamVector::new(dir.as_slice().to_vec())?;
        // stationary: for Gauss–Newton the projected full step measures the
        // distance to the optimum, which the gradient does not on weak directions
        let stationary = match cfg.direction {
            Direction::GaussNewton => {
                project(&l.add_scaled(1.0, &dir_p))?.sub(&l).max_abs() <= 1e-10 * (1.0 + l.max_abs())
            }
            Direction::Gradient => {
                let grad_scale = data_star * (mis.jacobian.whitened(whiten).norm() + 1.0);
                rec.gradient_norm <= tol * grad_scale
            }
        };
        if stationary || rec.gradient_norm == 0.0 || mis.value <= 1e-28 * data_frob {
            records.push(rec);
            break StopReason::StationaryPoint;
        }
        if iteration >= cfg.max_iterations {
            records.push(rec);
            break StopReason::MaxIterations;
        }
        let (next, next_mis, step, projected) = match cfg.step_rule {
            StepRule::Fixed { step } => {
                let trial = l.add_scaled(step, &dir_p);
                let proj = project(&trial)?;
                let moved = proj.sub(&trial).max_abs() > 0.0;
                let m = whitened_misfit(model, &proj, d, omega, tol)?;
                (proj, m, step, moved)
            }
            StepRule::Backtracking => {
                // projected Gauss–Newton steps need not descend on active
                // constraints; the projected gradient always does for small s
                let mut attempts = vec![(dir_p, initial_step(cfg.direction, &mis, whiten, &active))];
                if cfg.direction == Direction::GaussNewton {
                    let g = ParamVector::new((-masked(&mis.gradient, &active)).as_slice().to_vec())?;
                    attempts.push((g, initial_step(Direction::Gradient, &mis, whiten, &active)));
                }
                let mut accepted = None;
                let mut predicted: f64 = 0.0;
                'dirs: for (dir_p, s0) in attempts {
                    let mut s = s0;
                    for b in 0..=cfg.max_backtracks {
                        let trial = l.add_scaled(s, &dir_p);
                        let proj = project(&trial)?;
                        let moved = proj.sub(&trial).max_abs() > 0.0;
                        let delta = DVector::from_vec(proj.sub(&l).into_vec());
                        let decrease = mis.gradient.dot(&delta);
                        if b == 0 {
                            predicted = predicted.max(decrease.abs());
                        }
                        let m = whitened_misfit(model, &proj, d, omega, tol)?;
                        if m.value < mis.value && m.value <= mis.value + cfg.armijo * decrease {
                            accepted = Some((proj, m, s, moved));
                            break 'dirs;
                        }
                        s *= 0.5;
                    }
                }
                match accepted {
                    Some(a) => a,
                    None => {
                        // no descent left: either below what the solves can resolve or stuck
                        if mis.value <= 1e-16 * data_frob || predicted <= tol * mis.value {
                            records.push(rec);
                            break StopReason::SmallStep;
                        }
                        return Err(Error::Stagnation {
                            iteration,
                            reason: format!(
                                "no Armijo descent after {} halvings (misfit {:e}, gradient norm {:e})",
                                cfg.max_backtracks, mis.value, rec.gradient_norm
                            ),
                        });
                    }
                }
            }
        };
        let moved = next.sub(&l).max_abs();
        rec.step = step;
        rec.projected = projected;
        records.push(rec);
        l = next;
        mis = next_mis;
        iteration += 1;
        if moved <= 1e-13 * (1.0 + l.max_abs()) {
            records.push(IterationRecord {
                iteration,
                params: l.as_slice().to_vec(),
                misfit: mis.value,
                residual_star: mis.residual_star,
                gradient_norm: masked(&mis.gradient, &active).norm(),
                step: 0.0,
                projected: false,
            });
            break StopReason::SmallStep;
        }
    };
    Ok((l, InversionTrace { records, stop }))
}

/// `F(l_true)` plus a seeded symmetric Gaussian perturbation with
/// `‖E‖⋆ = noise · ‖F(l_true)‖⋆`.
pub fn synthesize_data(
    model: &ForwardModel,
    l_true: &ParamVector,
    omega: f64,
    noise: f64,
    seed: u64,
    tol: f64,
) -> Result<DtnOperator> {
    if !(noise >= 0.0) {
        return Err(Error::Domain(format!("noise must be >= 0, got {noise}")));
    }
    let clean = model.forward(l_true, omega, tol)?;
    let mut out = (*clean).clone();
    out.solutions = Arc::new(Vec::new());
    if noise == 0.0 {
        return Ok(out);
    }
    let n = clean.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let e = symmetrize(&raw);
    let scale = noise * model.star_norm(&clean.entries)? / model.star_norm(&e)?;
    out.entries = &clean.entries + e * scale;
    Ok(out)
}

/// `‖l̂ − l‖∞ / ‖l‖∞` over all entries.
pub fn relative_error(estimate: &ParamVector, truth: &ParamVector) -> f64 {
    estimate.sub(truth).max_abs() / truth.max_abs()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityRow {
    pub noise: f64,
    pub error: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
    /// Log-log slope of error against noise over the nonzero levels.
    pub slope: Option<f64>,
    /// Noiseless error, the floor of the bound.
    pub floor: f64,
    /// Empirical Lipschitz constant the bound was checked against.
    pub lipschitz_constant: Option<f64>,
    /// `error ≤ C·noise·‖F‖⋆ + floor` on every row, when a constant is given.
    pub bound_holds: Option<bool>,
}

/// Reconstruction error against noise level for one instance; runs are
/// independent and use separate caches.
#[allow(clippy::too_many_arguments)]
pub fn stability_consistency(
    model: &ForwardModel,
    k: &ConstraintSet,
    l_true: &ParamVector,
    cfg: &InversionConfig,
    omega: f64,
    noise_levels: &[f64],
    lipschitz_constant: Option<f64>,
    seed: u64,
    tol: f64,
) -> Result<StabilityTable> {
    let data_star = model.star_norm(&model.forward(l_true, omega, tol)?.entries)?;
    let rows: Vec<StabilityRow> = noise_levels
        .par_iter()
        .map(|&noise| {
            // one noise realization scaled across levels, so rows differ only in size
            let local = ForwardModel::new(model.space.clone())?;
            let data = synthesize_data(&local, l_true, omega, noise, seed, tol)?;
            // fit the noisy data to stationarity: the discrepancy stop would
            // measure the regularization, not the stability of the map
            let run_cfg = InversionConfig { noise_level: 0.0, ..cfg.clone() };
            let (est, trace) = landweber(&local, &data, k, &run_cfg, omega, tol)?;
            Ok(StabilityRow { noise, error: relative_error(&est, l_true), iterations: trace.iterations(), stop: trace.stop })
        })
        .collect::<Result<_>>()?;
    let floor = rows.iter().filter(|r| r.noise == 0.0).map(|r| r.error).fold(0.0, f64::max);
    let noisy: Vec<&StabilityRow> = rows.iter().filter(|r| r.noise > 0.0 && r.error > 0.0).collect();
    let slope = (noisy.len() >= 2).then(|| {
        let x: Vec<f64> = noisy.iter().map(|r| r.noise).collect();
        let y: Vec<f64> = noisy.iter().map(|r| r.error).collect();
        loglog_slope(&x, &y)
    });
    let scale = l_true.max_abs();
    let bound_holds = lipschitz_constant.map(|c| {
        rows.iter().all(|r| r.error * scale <= c * 2.0 * r.noise * data_star + floor * scale * (1.0 + 1e-9))
    });
    Ok(StabilityTable { rows, slope, floor, lipschitz_constant, bound_holds })
}

/// Inversion report for export.
#[derive(Debug, Clone, Serialize)]
pub struct InversionReport {
    pub mode: Mode,
    pub omega: f64,
    pub iterations: usize,
    pub final_params: Vec<f64>,
    pub truth: Option<Vec<f64>>,
    pub relative_error: Option<f64>,
    pub stopping_reason: StopReason,
    pub trace: Vec<IterationRecord>,
}

impl InversionReport {
    pub fn new(mode: Mode, omega: f64, estimate: &ParamVector, trace: &InversionTrace, truth: Option<&ParamVector>) -> Self {
        Self {
            mode,
            omega,
            iterations: trace.iterations(),
            final_params: estimate.as_slice().to_vec(),
            truth: truth.map(|t| t.as_slice().to_vec()),
            relative_error: truth.map(|t| relative_error(estimate, t)),
            stopping_reason: trace.stop,
            trace: trace.records.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FemSpace;
    use crate::material::PriorData;
    use crate::mesh::{build_block_mesh, two_layer_blocks, BoxFace, SigmaSelector};

    fn model(n: usize) -> ForwardModel {
        let mesh = build_block_mesh(n, n, n, &two_layer_blocks(0.5), SigmaSelector::face(BoxFace::ZMax)).unwrap();
        ForwardModel::new(FemSpace::new(mesh).unwrap()).unwrap()
    }

    fn setup() -> (ConstraintSet, ParamVector) {
        let prior = PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, 2).unwrap();
        let truth = ParamVector::from_parts(&[0.5, 0.8], &[1.0, 1.3], &[1.0, 1.2]).unwrap();
        (ConstraintSet::compact(prior), truth)
    }

    #[test]
    fn starts_at_truth_and_stops() {
        let m = model(4);
        let (k, truth) = setup();
        let data = synthesize_data(&m, &truth, 1.0, 0.0, 0, 1e-12).unwrap();
        let cfg = InversionConfig { initial: Some(truth.clone()), ..Default::default() };
        let (est, trace) = landweber(&m, &data, &k, &cfg, 1.0, 1e-12).unwrap();
        assert_eq!(trace.iterations(), 0);
        assert_eq!(trace.stop, StopReason::StationaryPoint);
        assert_eq!(est, truth);
    }

    #[test]
    fn noise_scaling_exact_and_seeded() {
        let m = model(4);
        let (_, truth) = setup();
        let clean = synthesize_data(&m, &truth, 1.0, 0.0, 3, 1e-12).unwrap();
        assert_eq!(clean.entries, m.forward(&truth, 1.0, 1e-12).unwrap().entries);
        let a = synthesize_data(&m, &truth, 1.0, 0.01, 3, 1e-12).unwrap();
        let b = synthesize_data(&m, &truth, 1.0, 0.01, 3, 1e-12).unwrap();
        assert_eq!(a.entries, b.entries);
        let rel = m.star_norm(&(&a.entries - &clean.entries)).unwrap() / m.star_norm(&clean.entries).unwrap();
        assert!((rel - 0.01).abs() <= 1e-6);
        assert!((&a.entries - a.entries.transpose()).norm() == 0.0);
    }

    #[test]
    fn modes_freeze_their_coordinates() {
        let m = model(4);
        let (k, truth) = setup();
        let data = synthesize_data(&m, &truth, 1.0, 0.0, 0, 1e-12).unwrap();
        let start = ParamVector::from_parts(&[0.6, 0.7], &[1.1, 1.2], &[1.1, 1.1]).unwrap();
        for mode in [Mode::S1, Mode::S2] {
            let cfg = InversionConfig { mode, initial: Some(start.clone()), max_iterations: 3, ..Default::default() };
            let (est, trace) = landweber(&m, &data, &k, &cfg, 1.0, 1e-12).unwrap();
            let frozen: Vec<usize> = (0..6).filter(|i| !mode.active(2).contains(i)).collect();
            for i in frozen {
                assert_eq!(est.as_slice()[i].to_bits(), start.as_slice()[i].to_bits());
            }
            for w in trace.records.windows(2) {
                assert!(w[1].misfit < w[0].misfit);
            }
            for r in &trace.records {
                assert!(k.contains(&ParamVector::new(r.params.clone()).unwrap()));
            }
        }
    }

    #[test]
    fn rejects_static_density_inversion() {
        let m = model(4);
        let (k, truth) = setup();
        let data = synthesize_data(&m, &truth, 0.0, 0.0, 0, 1e-12).unwrap();
        let cfg = InversionConfig { mode: Mode::S2, ..Default::default() };
        assert!(matches!(landweber(&m, &data, &k, &cfg, 0.0, 1e-12), Err(Error::Config(_))));
        let cfg = InversionConfig { omega_max: Some(4.0), ..Default::default() };
        assert!(matches!(landweber(&m, &data, &k, &cfg, 1.0, 1e-12), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let (k, _) = setup();
        let bad = InversionConfig {
            tau: 1.0,
            initial: Some(ParamVector::uniform(2, 0.0, 5.0, 1.0)),
            ..Default::default()
        };
        match bad.validate(&k) {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stability_table_grows_with_noise() {
        let mesh = build_block_mesh(4, 4, 4, &[crate::mesh::Block::unit(1)], SigmaSelector::face(BoxFace::ZMax)).unwrap();
        let m = ForwardModel::new(FemSpace::new(mesh).unwrap()).unwrap();
        let k = ConstraintSet::compact(PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, 1).unwrap());
        let truth = ParamVector::from_parts(&[0.5], &[1.0], &[1.0]).unwrap();
        let start = project_onto_k_masked(&truth.scale(1.2), &k, true, true).unwrap();
        let cfg = InversionConfig { initial: Some(start), ..Default::default() };
        let table = stability_consistency(&m, &k, &truth, &cfg, 1.5, &[0.0, 1e-3, 1e-2], Some(1e3), 5, 1e-12).unwrap();
        let errs: Vec<f64> = table.rows.iter().map(|r| r.error).collect();
        assert!(errs[0] <= 1e-6, "{errs:?}");
        assert!(errs[1] <= errs[2] * 1.2, "{errs:?}");
        let slope = table.slope.unwrap();
        assert!((0.5..=2.0).contains(&slope), "slope {slope}");
        assert_eq!(table.floor, errs[0]);
        assert_eq!(table.bound_holds, Some(true));
    }

    #[test]
    fn small_full_reconstruction() {
        let m = model(4);
        let (k, truth) = setup();
        let data = synthesize_data(&m, &truth, 1.0, 0.0, 0, 1e-12).unwrap();
        let start = project_onto_k_masked(&truth.scale(1.2), &k, true, true).unwrap();
        let cfg = InversionConfig { initial: Some(start), ..Default::default() };
        let (est, trace) = landweber(&m, &data, &k, &cfg, 1.0, 1e-12).unwrap();
        let err = relative_error(&est, &truth);
        assert!(err <= 1e-3, "error {err} after {} iterations ({:?})", trace.iterations(), trace.stop);
        let csv = trace.to_csv();
        assert_eq!(csv.lines().count(), trace.records.len() + 1);
    }
}
