//! Empirical probes of the stability constants: the Lipschitz ratio of the
//! inverse map, the derivative lower bound `q0`, the blow-up rate of the
//! point-load solution and the comparison with the logarithmic modulus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::deriv::{df_jacobian_from, loglog_slope, sign_vertices, SIGN_ENUMERATION_LIMIT};
use crate::dtn::ForwardModel;
use crate::error::{Error, Result};
use crate::fem::{assemble, element_displacement_gradient, element_gradients, local_values, FemSpace, DIM};
use crate::invert::Mode;
use crate::material::{sigma1_iterated, ConstraintSet, ParamVector, SetKind};
use crate::mesh::{hex, Point};
use crate::solver::DirichletSystem;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub probe: String,
    pub mesh_id: String,
    pub omega: f64,
    pub samples: usize,
    pub seed: u64,
    pub results: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub summaries: BTreeMap<String, Summary>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub row_hashes: Vec<String>,
    pub notes: Vec<String>,
}

impl ProbeReport {
    fn new(probe: &str, mesh_id: &str, omega: f64, samples: usize, seed: u64, columns: &[&str]) -> Self {
        Self {
            probe: probe.into(),
            mesh_id: mesh_id.into(),
            omega,
            samples,
            seed,
            results: BTreeMap::new(),
            flags: BTreeMap::new(),
            summaries: BTreeMap::new(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            row_hashes: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn push_row(&mut self, inputs: &[&[f64]], values: Vec<f64>) {
        let mut h = Sha256::new();
        for part in inputs {
            for x in *part {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        self.row_hashes.push(hex(&h.finalize())[..16].to_string());
        self.rows.push(values);
    }

    fn summarize_column(&mut self, name: &str) {
        if let Some(c) = self.columns.iter().position(|x| x == name) {
            let vals: Vec<f64> = self.rows.iter().map(|r| r[c]).filter(|v| v.is_finite()).collect();
            if let Some(s) = Summary::of(&vals) {
                self.summaries.insert(name.into(), s);
            }
        }
    }

    pub fn result(&self, key: &str) -> Option<f64> {
        self.results.get(key).copied()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|x| x == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    /// `sample_id, inputs_hash, <columns>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,inputs_hash");
        for c in &self.columns {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (i, (row, hash)) in self.rows.iter().zip(&self.row_hashes).enumerate() {
            let _ = write!(s, "{i},{hash}");
            for v in row {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Uniform sample of the compact set by rejection from its bounding box.
pub fn sample_compact(k: &ConstraintSet, n_sub: usize, rng: &mut impl Rng) -> ParamVector {
    let p = &k.prior;
    let (lam_lo, hi) = (p.lambda_min(), 1.0 / p.alpha0);
    let mut l = ParamVector::zeros(n_sub);
    for j in 0..n_sub {
        loop {
            let lam = rng.random_range(lam_lo..=hi);
            let mu = rng.random_range(p.alpha0..=hi);
            if 2.0 * mu + 3.0 * lam >= p.beta0 {
                let rho = rng.random_range(0.0..=1.0 / p.gamma0);
                l.set_triple(j, lam, mu, rho);
                break;
            }
        }
    }
    l
}

/// `C_emp = max ‖l1 − l2‖∞ / ‖F(l1) − F(l2)‖⋆` over sampled pairs.
pub fn lipschitz_probe(model: &ForwardModel, k: &ConstraintSet, omega: f64, samples: usize, seed: u64, tol: f64) -> Result<ProbeReport> {
    if k.kind != SetKind::Compact {
        return Err(Error::Config("lipschitz_probe samples the compact set".into()));
    }
    let n_sub = model.space.n_sub;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(samples);
    while pairs.len() < samples {
        let a = sample_compact(k, n_sub, &mut rng);
        let b = sample_compact(k, n_sub, &mut rng);
        if a.sub(&b).max_abs() > 0.0 {
            pairs.push((a, b));
        }
    }
    // forward maps are evaluated outside the cache: samples never repeat
    let evaluated: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .map(|(a, b)| {
            let fa = crate::dtn::assemble_dtn(&model.space, a, omega, tol)?;
            let fb = crate::dtn::assemble_dtn(&model.space, b, omega, tol)?;
            let gap = model.star_norm(&(&fa.entries - &fb.entries))?;
            let scale = model.star_norm(&fa.entries)?;
            Ok((a.sub(b).max_abs(), gap, scale))
        })
        .collect::<Result<_>>()?;
    let mut report = ProbeReport::new("lipschitz", &model.space.mesh_id, omega, samples, seed, &["distance", "gap", "ratio"]);
    let mut skipped = 0;
    for ((a, b), (dist, gap, scale)) in pairs.iter().zip(evaluated) {
        let ratio = if gap < 10.0 * tol * scale {
            skipped += 1;
            report.notes.push(format!("pair {} skipped: gap {gap:e} at solver precision", report.rows.len() + skipped - 1));
            f64::NAN
        } else {
            dist / gap
        };
        report.push_row(&[a.as_slice(), b.as_slice()], vec![dist, gap, ratio]);
    }
    let ratios: Vec<f64> = report.rows.iter().map(|r| r[2]).filter(|r| !r.is_nan()).collect();
    report.results.insert("c_emp".into(), ratios.iter().cloned().fold(0.0, f64::max));
    report.results.insert("skipped".into(), skipped as f64);
    report.flags.insert("all_finite".into(), ratios.iter().all(|r| r.is_finite()));
    report.summarize_column("ratio");
    Ok(report)
}

/// Symmetric operator norm via eigenvalues, with the extreme eigenvector.
fn sym_norm_and_vector(a: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = a.clone().symmetric_eigen();
    let (i, v) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
    let sign = eig.eigenvalues[i].signum();
    (v, eig.eigenvectors.column(i) * sign)
}

/// `min_{h ∈ [−1, 1]^n, h_face = 1} ‖Σ h_k C_k‖₂` for symmetric whitened
/// blocks: start from the clamped Frobenius least-squares point, then
/// projected gradient on a log-sum-exp smoothing of `max |λ_i|` with
/// increasing sharpness.
fn face_minimum(blocks: &[DMatrix<f64>], face: usize) -> (f64, Vec<f64>) {
    let n = blocks.len();
    let eval = |h: &[f64]| {
        let mut a = DMatrix::zeros(blocks[0].nrows(), blocks[0].ncols());
        for (c, b) in h.iter().zip(blocks) {
            if *c != 0.0 {
                a += b * *c;
            }
        }
        sym_norm_and_vector(&a)
    };
    // Frobenius least squares on the face, then clamp
    let gram = DMatrix::from_fn(n, n, |i, j| blocks[i].dot(&blocks[j]));
    let others: Vec<usize> = (0..n).filter(|&k| k != face).collect();
    let mut h = vec![0.0; n];
    h[face] = 1.0;
    if !others.is_empty() {
        let g = gram.select_rows(others.iter()).select_columns(others.iter());
        let rhs = DVector::from_iterator(others.len(), others.iter().map(|&k| -gram[(k, face)]));
        let reg = 1e-14 * (0..n).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        let sol = (g + DMatrix::identity(others.len(), others.len()) * reg).lu().solve(&rhs);
        if let Some(sol) = sol {
            for (i, &k) in others.iter().enumerate() {
                h[k] = sol[i].clamp(-1.0, 1.0);
            }
        }
    }
    let (mut best, _) = eval(&h);
    let mut best_h = h.clone();
    if others.is_empty() || best == 0.0 {
        return (best, best_h);
    }
    // log-sum-exp smoothing of max |λ_i| with continuation in the sharpness
    let dim = blocks[0].nrows() as f64;
    let log_terms = (2.0 * dim).ln();
    let mut step = 0.1;
    for level in 0..8 {
        let beta = log_terms / best * 4f64.powi(level);
        let smooth = |h: &[f64]| -> (f64, Vec<f64>) {
            let mut a = DMatrix::zeros(blocks[0].nrows(), blocks[0].ncols());
            for (c, b) in h.iter().zip(blocks) {
                if *c != 0.0 {
                    a += b * *c;
                }
            }
            let eig = a.symmetric_eigen();
            let m = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let mut total = 0.0;
            let mut weights = Vec::new();
            for (i, &lam) in eig.eigenvalues.iter().enumerate() {
                let (p, q) = ((beta * (lam - m)).exp(), (beta * (-lam - m)).exp());
                total += p + q;
                if (p - q).abs() > 1e-17 {
                    weights.push((i, p - q));
                }
            }
            let value = m + total.ln() / beta;
            let mut grad = vec![0.0; n];
            for &(i, w) in &weights {
                let v = eig.eigenvectors.column(i);
                for (k, b) in blocks.iter().enumerate() {
                    if k != face {
                        grad[k] += w / total * v.dot(&(b * v));
                    }
                }
            }
            (value, grad)
        };
        let (mut f, mut g) = smooth(&h);
        for _ in 0..60 {
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = (0..n)
                    .map(|k| if k == face { 1.0 } else { (h[k] - step * g[k]).clamp(-1.0, 1.0) })
                    .collect();
                let moved: f64 = trial.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum();
                if moved == 0.0 {
                    break;
                }
                let (ft, gt) = smooth(&trial);
                let lin: f64 = g.iter().zip(trial.iter().zip(&h)).map(|(gk, (a, b))| gk * (a - b)).sum();
                if ft <= f + 1e-4 * lin {
                    h = trial;
                    f = ft;
                    g = gt;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let (exact, _) = eval(&h);
        if exact < best {
            best = exact;
            best_h = h.clone();
        }
    }
    (best, best_h)
}

/// Whitened Jacobian blocks restricted to the coordinates of `mode`.
fn whitened_blocks(model: &ForwardModel, l: &ParamVector, omega: f64, mode: Mode, tol: f64) -> Result<(Vec<usize>, Vec<DMatrix<f64>>)> {
    let fwd = crate::dtn::assemble_dtn(&model.space, l, omega, tol)?;
    let jac = df_jacobian_from(&model.space, &fwd);
    let active = mode.active(model.space.n_sub);
    let blocks = active
        .iter()
        .map(|&k| crate::linalg::symmetrize(&model.metric.whitened(&jac.blocks[k])))
        .collect();
    Ok((active, blocks))
}

/// `min_{‖h‖∞ = 1} ‖DF(l)[h]‖⋆` for one `l`, and the lower-bound surrogate
/// `σ_min(J̃) / sqrt(n_trace)` of the stacked whitened Jacobian.
pub fn derivative_lower_bound(blocks: &[DMatrix<f64>]) -> (f64, Vec<f64>, f64) {
    let (mut best, mut best_h) = (f64::INFINITY, vec![]);
    for face in 0..blocks.len() {
        let (f, h) = face_minimum(blocks, face);
        if f < best {
            best = f;
            best_h = h;
        }
    }
    let rows = blocks[0].len();
    let j = DMatrix::from_fn(rows, blocks.len(), |i, k| blocks[k].as_slice()[i]);
    let smin = j.singular_values().min();
    let surrogate = smin / (blocks[0].nrows() as f64).sqrt();
    (best, best_h, surrogate)
}

/// Empirical `q0 = min_{l, ‖h‖∞=1} ‖DF(l)[h]‖⋆` over sampled `l ∈ 𝐊`, with an
/// out-of-sample check on `h_samples` random directions per `l`.
#[allow(clippy::too_many_arguments)]
pub fn q0_probe(
    model: &ForwardModel,
    k: &ConstraintSet,
    omega: f64,
    mode: Mode,
    l_samples: usize,
    h_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<ProbeReport> {
    let n_sub = model.space.n_sub;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ls: Vec<ParamVector> = (0..l_samples).map(|_| sample_compact(k, n_sub, &mut rng)).collect();
    let seeds: Vec<u64> = (0..l_samples).map(|_| rng.random()).collect();
    let per_sample: Vec<(f64, f64, f64, f64)> = ls
        .par_iter()
        .zip(&seeds)
        .map(|(l, &s)| {
            let (_, blocks) = whitened_blocks(model, l, omega, mode, tol)?;
            let (minimum, _, surrogate) = derivative_lower_bound(&blocks);
            let scale = blocks.iter().map(|b| sym_norm_and_vector(b).0).fold(0.0, f64::max);
            // random unit-∞ directions never beat the minimum
            let mut hr = ChaCha8Rng::seed_from_u64(s);
            let mut worst = f64::INFINITY;
            for _ in 0..h_samples {
                let mut h: Vec<f64> = (0..blocks.len()).map(|_| hr.random_range(-1.0..=1.0)).collect();
                let idx = hr.random_range(0..h.len());
                h[idx] = if hr.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut a = DMatrix::zeros(blocks[0].nrows(), blocks[0].ncols());
                for (c, b) in h.iter().zip(&blocks) {
                    a += b * *c;
                }
                worst = worst.min(sym_norm_and_vector(&a).0);
            }
            Ok((minimum, surrogate, worst, scale))
        })
        .collect::<Result<_>>()?;
    let mut report = ProbeReport::new(
        "q0",
        &model.space.mesh_id,
        omega,
        l_samples,
        seed,
        &["minimum", "surrogate_lower_bound", "random_direction_minimum", "block_scale"],
    );
    for (l, (m, s, w, sc)) in ls.iter().zip(per_sample) {
        report.push_row(&[l.as_slice()], vec![m, s, w, sc]);
    }
    let q0 = report.rows.iter().map(|r| r[0]).fold(f64::INFINITY, f64::min);
    let surrogate = report.rows.iter().map(|r| r[1]).fold(f64::INFINITY, f64::min);
    let scale = report.rows.iter().map(|r| r[3]).fold(0.0, f64::max);
    report.results.insert("q0_emp".into(), q0);
    report.results.insert("surrogate_lower_bound".into(), surrogate);
    report.results.insert("block_scale".into(), scale);
    let identifiable = q0 > 1e-8 * scale;
    report.flags.insert("identifiable".into(), identifiable);
    report.flags.insert(
        "minimum_below_random_directions".into(),
        report.rows.iter().all(|r| r[0] <= r[2] * (1.0 + 1e-9)),
    );
    report.flags.insert("surrogate_below_minimum".into(), report.rows.iter().all(|r| r[1] <= r[0] * (1.0 + 1e-9)));
    if !identifiable {
        report.notes.push(format!(
            "q0_emp = {q0:e} is at rounding level relative to the block scale {scale:e}: some direction is invisible at omega = {omega}"
        ));
    }
    report.notes.push(format!("{:?} parametrization, {} active coordinates", mode, mode.active(n_sub).len()));
    report.summarize_column("minimum");
    Ok(report)
}

/// Exact sign-vertex maximum helper shared with the derivative probe.
pub fn sign_vertex_count(n: usize) -> Option<usize> {
    (n <= SIGN_ENUMERATION_LIMIT).then(|| sign_vertices(n).count())
}

/// Smallest radius per unit of `h_max` that counts as resolved.
pub const RESOLUTION_FACTOR: f64 = 0.9;

#[derive(Debug, Clone, Serialize)]
pub struct GreensRow {
    pub radius: f64,
    pub h1_exterior: f64,
}

/// Point-load solutions on a mesh family: exterior `H¹` norms on the finest
/// mesh against the radius, and the full-domain `L²` norm on every mesh.
pub fn greens_blowup_probe(
    family: &[Arc<FemSpace>],
    params: &ParamVector,
    omega: f64,
    y: Point,
    r_list: &[f64],
    tol: f64,
) -> Result<ProbeReport> {
    if family.is_empty() || r_list.len() < 2 {
        return Err(Error::Config("greens probe needs at least one mesh and two radii".into()));
    }
    let finest = family
        .iter()
        .min_by(|a, b| a.h_max.total_cmp(&b.h_max))
        .expect("nonempty family");
    let r_min = r_list.iter().cloned().fold(f64::INFINITY, f64::min);
    if r_min < RESOLUTION_FACTOR * finest.h_max {
        return Err(Error::Resolution { r_min, h_max: finest.h_max, required_h_max: r_min / RESOLUTION_FACTOR });
    }
    let mut report = ProbeReport::new("greens", &finest.mesh_id, omega, r_list.len(), 0, &["radius", "h1_exterior", "l2_exterior"]);
    let fields = point_load_solutions(finest, params, omega, y, tol)?;
    for &r in r_list {
        let (h1, l2) = exterior_norms(finest, &fields, y, r);
        report.push_row(&[&[r]], vec![r, h1, l2]);
    }
    let radii: Vec<f64> = report.rows.iter().map(|r| r[0]).collect();
    let h1: Vec<f64> = report.rows.iter().map(|r| r[1]).collect();
    report.results.insert("h1_slope".into(), loglog_slope(&radii, &h1));
    let mut order: Vec<usize> = (0..radii.len()).collect();
    order.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]));
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        let local = (h1[b] / h1[a]).ln() / (radii[b] / radii[a]).ln();
        report.results.insert(format!("local_slope_{}_{}", radii[a], radii[b]), local);
    }

    let mut l2_full = Vec::new();
    for sp in family {
        let f = if Arc::ptr_eq(sp, finest) { fields.clone() } else { point_load_solutions(sp, params, omega, y, tol)? };
        let (_, l2) = exterior_norms(sp, &f, y, 0.0);
        report.notes.push(format!("mesh {} (h_max {:.4}): full-domain L2 norm {l2:.6e}", &sp.mesh_id[..12], sp.h_max));
        l2_full.push(l2);
    }
    let hi = l2_full.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = l2_full.iter().cloned().fold(f64::INFINITY, f64::min);
    report.results.insert("l2_full_domain".into(), *l2_full.last().expect("nonempty"));
    report.results.insert("l2_drift".into(), (hi - lo) / hi);
    report.results.insert("h_max".into(), finest.h_max);
    report.summarize_column("h1_exterior");
    Ok(report)
}

/// One solution per Cartesian direction of a unit force spread uniformly over
/// the elements lying entirely within distance `h_max` of `y`.
pub fn point_load_solutions(space: &Arc<FemSpace>, params: &ParamVector, omega: f64, y: Point, tol: f64) -> Result<Vec<Vec<f64>>> {
    let mesh = &space.mesh;
    let radius = space.h_max;
    let support: Vec<usize> = (0..mesh.tets.len())
        .filter(|&t| mesh.tets[t].v.iter().all(|&v| dist(&mesh.vertices[v], &y) <= radius * (1.0 + 1e-12)))
        .collect();
    if support.is_empty() {
        return Err(Error::Geometry(format!("no element lies within {radius} of the load point")));
    }
    let vol: f64 = support.iter().map(|&t| mesh.tet_volume(t)).sum();
    let sys = DirichletSystem::new(&assemble(space, params, omega)?, omega)?;
    let zero = vec![0.0; space.n_dofs()];
    (0..DIM)
        .into_par_iter()
        .map(|c| {
            let mut f = vec![0.0; space.n_dofs()];
            for &t in &support {
                // constant density 1/vol: each vertex receives vol_t / 4
                let w = mesh.tet_volume(t) / vol / 4.0;
                for &v in &mesh.tets[t].v {
                    f[DIM * v + c] += w;
                }
            }
            sys.solve(&zero, &f, tol).map(|(u, _)| u)
        })
        .collect()
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `(‖u‖_{H¹}, ‖u‖_{L²})` over elements with centroid at distance ≥ `r` from
/// `y`, summed over the given fields.
pub fn exterior_norms(space: &FemSpace, fields: &[Vec<f64>], y: Point, r: f64) -> (f64, f64) {
    let mesh = &space.mesh;
    let (mut grad2, mut mass2) = (0.0, 0.0);
    for t in 0..mesh.tets.len() {
        if dist(&mesh.tet_centroid(t), &y) < r {
            continue;
        }
        let (vol, g) = element_gradients(mesh, t);
        for u in fields {
            let ul = local_values(u, &mesh.tets[t].v);
            grad2 += vol * element_displacement_gradient(&g, &ul).norm_squared();
            let mut diag = 0.0;
            let mut s = [0.0; 3];
            for a in 0..4 {
                for c in 0..3 {
                    diag += ul[a][c] * ul[a][c];
                    s[c] += ul[a][c];
                }
            }
            mass2 += vol / 20.0 * (diag + s.iter().map(|x| x * x).sum::<f64>());
        }
    }
    ((grad2 + mass2).sqrt(), mass2.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct ModulusRow {
    pub distance: f64,
    pub gap: f64,
    pub modulus: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModulusTable {
    pub delta: f64,
    pub c_star: f64,
    pub n_sub: usize,
    pub rows: Vec<ModulusRow>,
    /// Smallest constant with `distance ≤ C σ1^N(gap)` on every sample.
    pub fitted_c_star: f64,
    /// Smallest constant with `distance ≤ C gap` on every sample.
    pub linear_constant: f64,
    pub all_pass: bool,
}

/// Check `‖l1 − l2‖∞ ≤ C* σ1^N(‖F(l1) − F(l2)‖⋆)` on the samples of a
/// Lipschitz probe.
pub fn modulus_comparison(report: &ProbeReport, n_sub: usize, delta: f64, c_star: f64) -> Result<ModulusTable> {
    let dist = report.column("distance").ok_or_else(|| Error::Config("report has no distance column".into()))?;
    let gap = report.column("gap").ok_or_else(|| Error::Config("report has no gap column".into()))?;
    let mut rows = Vec::new();
    let (mut fitted, mut linear) = (0.0f64, 0.0f64);
    for (&d, &g) in dist.iter().zip(&gap) {
        if !(g > 0.0) {
            continue;
        }
        let m = sigma1_iterated(g, delta, n_sub)?;
        fitted = fitted.max(d / m);
        linear = linear.max(d / g);
        rows.push(ModulusRow { distance: d, gap: g, modulus: m, passes: d <= c_star * m });
    }
    let all_pass = rows.iter().all(|r| r.passes);
    Ok(ModulusTable { delta, c_star, n_sub, rows, fitted_c_star: fitted, linear_constant: linear, all_pass })
}

impl ModulusTable {
    /// Refit on the samples whose gap is at least `min_gap`.
    pub fn refit_above(&self, min_gap: f64) -> f64 {
        self.rows.iter().filter(|r| r.gap >= min_gap).map(|r| r.distance / r.modulus).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::PriorData;
    use crate::mesh::{build_block_mesh, two_layer_blocks, Block, BoxFace, SigmaSelector};

    fn model(n: usize, blocks: &[Block]) -> ForwardModel {
        let mesh = build_block_mesh(n, n, n, blocks, SigmaSelector::face(BoxFace::ZMax)).unwrap();
        ForwardModel::new(FemSpace::new(mesh).unwrap()).unwrap()
    }

    fn compact(n: usize) -> ConstraintSet {
        ConstraintSet::compact(PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, n).unwrap())
    }

    #[test]
    fn samples_lie_in_k() {
        let k = compact(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            assert!(k.contains(&sample_compact(&k, 3, &mut rng)));
        }
    }

    #[test]
    fn lipschitz_probe_reproducible_and_finite() {
        let m = model(4, &two_layer_blocks(0.5));
        let k = compact(2);
        let a = lipschitz_probe(&m, &k, 0.8, 6, 42, 1e-12).unwrap();
        let b = lipschitz_probe(&m, &k, 0.8, 6, 42, 1e-12).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.flags["all_finite"]);
        assert!(a.result("c_emp").unwrap() > 0.0);
        assert_eq!(a.to_csv().lines().count(), 7);
    }

    #[test]
    fn face_minimum_on_diagonal_blocks() {
        // blocks e_i e_iᵀ scaled: ‖Σ h_k s_k E_kk‖ = max |h_k s_k|, minimized at
        // the face of the smallest scale with the others at 0
        let blocks: Vec<DMatrix<f64>> = [3.0, 1.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut m = DMatrix::zeros(3, 3);
                m[(i, i)] = s;
                m
            })
            .collect();
        let (q, h, sur) = derivative_lower_bound(&blocks);
        assert!((q - 1.0).abs() < 1e-12, "{q} {h:?}");
        assert!(sur <= q);
    }

    #[test]
    fn face_minimum_beats_vertices_and_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let blocks: Vec<DMatrix<f64>> = (0..4)
            .map(|_| {
                let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
                (&a + a.transpose()) * 0.5
            })
            .collect();
        let (q, _, sur) = derivative_lower_bound(&blocks);
        assert!(sur <= q);
        let norm = |h: &[f64]| {
            let mut a = DMatrix::zeros(5, 5);
            for (c, b) in h.iter().zip(&blocks) {
                a += b * *c;
            }
            sym_norm_and_vector(&a).0
        };
        // dense grid over the sphere faces as an oracle
        let grid: Vec<f64> = (0..=10).map(|i| -1.0 + 0.2 * i as f64).collect();
        let mut oracle = f64::INFINITY;
        for face in 0..4 {
            for &a in &grid {
                for &b in &grid {
                    for &c in &grid {
                        let mut h = vec![a, b, c];
                        h.insert(face, 1.0);
                        oracle = oracle.min(norm(&h));
                    }
                }
            }
        }
        assert!(q <= oracle * (1.0 + 1e-9), "{q} vs grid {oracle}");
        assert!(q >= 0.9 * oracle, "{q} vs grid {oracle}");
    }

    #[test]
    fn q0_static_density_is_invisible() {
        let m = model(4, &[Block::unit(1)]);
        let k = compact(1);
        let r = q0_probe(&m, &k, 0.0, Mode::Full, 2, 10, 1, 1e-12).unwrap();
        assert!(!r.flags["identifiable"]);
        assert_eq!(r.result("q0_emp").unwrap(), 0.0);
        let dynamic = q0_probe(&m, &k, 1.5, Mode::Full, 2, 10, 1, 1e-12).unwrap();
        assert!(dynamic.flags["identifiable"], "{:?}", dynamic.results);
        let s1 = q0_probe(&m, &k, 1.5, Mode::S1, 2, 10, 1, 1e-12).unwrap();
        assert!(s1.result("q0_emp").unwrap() >= dynamic.result("q0_emp").unwrap() * (1.0 - 1e-9));
        assert!(dynamic.flags["minimum_below_random_directions"]);
        assert!(dynamic.flags["surrogate_below_minimum"]);
    }

    #[test]
    fn greens_linearity_and_resolution_guard() {
        let sp = FemSpace::new(build_block_mesh(8, 8, 8, &[Block::unit(1)], SigmaSelector::face(BoxFace::ZMax)).unwrap()).unwrap();
        let l = ParamVector::uniform(1, 0.5, 1.0, 1.0);
        let y = [0.5, 0.5, 0.5];
        let u = point_load_solutions(&sp, &l, 0.0, y, 1e-12).unwrap();
        let doubled: Vec<Vec<f64>> = u.iter().map(|f| f.iter().map(|x| 2.0 * x).collect()).collect();
        let (a, b) = (exterior_norms(&sp, &u, y, 0.3), exterior_norms(&sp, &doubled, y, 0.3));
        assert!((b.0 - 2.0 * a.0).abs() < 1e-12 * b.0 && (b.1 - 2.0 * a.1).abs() < 1e-12 * b.1);
        let err = greens_blowup_probe(&[sp], &l, 0.0, y, &[0.05, 0.4], 1e-10).unwrap_err();
        assert!(matches!(err, Error::Resolution { .. }));
    }

    #[test]
    fn modulus_table_refits() {
        let m = model(4, &two_layer_blocks(0.5));
        let k = compact(2);
        let rep = lipschitz_probe(&m, &k, 0.8, 5, 3, 1e-12).unwrap();
        let table = modulus_comparison(&rep, 2, 0.5, 1e6).unwrap();
        assert_eq!(table.rows.len(), 5);
        assert!(table.fitted_c_star > 0.0 && table.linear_constant > 0.0);
        let med = {
            let mut g: Vec<f64> = table.rows.iter().map(|r| r.gap).collect();
            g.sort_by(f64::total_cmp);
            g[2]
        };
        assert!(table.refit_above(med) <= table.fitted_c_star);
        let one = modulus_comparison(&rep, 1, 0.5, 1e6).unwrap();
        for r in &one.rows {
            assert_eq!(r.modulus, crate::material::sigma1(r.gap, 0.5).unwrap());
        }
    }
}
