//! Isotropic elasticity tensors, piecewise-constant parameter vectors and the
//! admissible parameter sets, plus the logarithmic stability moduli.
//!
//! Parameter vectors are laid out as `(λ_1..λ_N, μ_1..μ_N, ρ_1..ρ_N)`.

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C = λ I⊗I + 2μ I_sym`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicTensor {
    pub lambda: f64,
    pub mu: f64,
}

impl IsotropicTensor {
    pub fn new(lambda: f64, mu: f64) -> Self {
        Self { lambda, mu }
    }

    /// `C a = λ tr(â) I + 2μ â` with `â` the symmetric part of `a`.
    pub fn apply(&self, a: &Matrix3<f64>) -> Matrix3<f64> {
        let sym = (a + a.transpose()) * 0.5;
        Matrix3::identity() * (self.lambda * sym.trace()) + sym * (2.0 * self.mu)
    }

    /// Bulk-like combination `2μ + 3λ`.
    pub fn bulk_combination(&self) -> f64 {
        2.0 * self.mu + 3.0 * self.lambda
    }
}

/// `C : C0`, convenience for `(C - C0) Â : Â` style checks.
pub fn double_contract(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// The a-priori bounds: `α0, β0, γ0`, the Lipschitz constant `L`, the volume
/// bound `A` and the number of subdomains `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorData {
    pub alpha0: f64,
    pub beta0: f64,
    pub gamma0: f64,
    pub lip: f64,
    pub volume: f64,
    pub n_sub: usize,
}

impl PriorData {
    pub fn new(alpha0: f64, beta0: f64, gamma0: f64, lip: f64, volume: f64, n_sub: usize) -> Result<Self> {
        let p = Self { alpha0, beta0, gamma0, lip, volume, n_sub };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.alpha0 > 0.0 && self.alpha0 < 1.0) {
            errs.push(format!("alpha0 = {} not in (0,1)", self.alpha0));
        }
        if !(self.beta0 > 0.0 && self.beta0 < 2.0) {
            errs.push(format!("beta0 = {} not in (0,2)", self.beta0));
        }
        if !(self.gamma0 > 0.0 && self.gamma0 < 1.0) {
            errs.push(format!("gamma0 = {} not in (0,1)", self.gamma0));
        }
        if !(self.lip >= 1.0) {
            errs.push(format!("lip = {} must be >= 1", self.lip));
        }
        if !(self.volume > 0.0) {
            errs.push(format!("volume = {} must be > 0", self.volume));
        }
        if self.n_sub == 0 {
            errs.push("n_sub must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// `C0 = (β0 - 3α0)/2 I⊗I + 2α0 I_sym`, dominated by every admissible tensor.
    pub fn reference_tensor(&self) -> IsotropicTensor {
        IsotropicTensor::new((self.beta0 - 3.0 * self.alpha0) / 2.0, self.alpha0)
    }

    pub fn lambda_min(&self) -> f64 {
        (self.beta0 - 2.0 / self.alpha0) / 3.0
    }
}

/// Free function form of [`PriorData::reference_tensor`].
pub fn reference_tensor(prior: &PriorData) -> IsotropicTensor {
    prior.reference_tensor()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() || entries.len() % 3 != 0 {
            return Err(Error::Dimension {
                expected: 3 * (entries.len() / 3).max(1),
                got: entries.len(),
            });
        }
        Ok(Self(entries))
    }

    pub fn from_parts(lambda: &[f64], mu: &[f64], rho: &[f64]) -> Result<Self> {
        let n = lambda.len();
        if mu.len() != n || rho.len() != n {
            return Err(Error::Dimension { expected: n, got: mu.len().max(rho.len()) });
        }
        let mut v = Vec::with_capacity(3 * n);
        v.extend_from_slice(lambda);
        v.extend_from_slice(mu);
        v.extend_from_slice(rho);
        Self::new(v)
    }

    /// Same material `(λ, μ, ρ)` on every one of `n` subdomains.
    pub fn uniform(n: usize, lambda: f64, mu: f64, rho: f64) -> Self {
        Self::from_parts(&vec![lambda; n], &vec![mu; n], &vec![rho; n]).expect("n > 0")
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; 3 * n])
    }

    pub fn n_sub(&self) -> usize {
        self.0.len() / 3
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Subdomain index `j` is 0-based here.
    pub fn lambda(&self, j: usize) -> f64 {
        self.0[j]
    }

    pub fn mu(&self, j: usize) -> f64 {
        self.0[self.n_sub() + j]
    }

    pub fn rho(&self, j: usize) -> f64 {
        self.0[2 * self.n_sub() + j]
    }

    pub fn tensor(&self, j: usize) -> IsotropicTensor {
        IsotropicTensor::new(self.lambda(j), self.mu(j))
    }

    pub fn set_triple(&mut self, j: usize, lambda: f64, mu: f64, rho: f64) {
        let n = self.n_sub();
        self.0[j] = lambda;
        self.0[n + j] = mu;
        self.0[2 * n + j] = rho;
    }

    /// `max_j max{|λ_j|, μ_j, |ρ_j|}`.
    pub fn sup_norm(&self) -> f64 {
        let n = self.n_sub();
        self.0
            .iter()
            .enumerate()
            .map(|(k, &x)| if (n..2 * n).contains(&k) { x } else { x.abs() })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Plain `max |x_k|`, used for differences of parameter vectors.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&self, t: f64, h: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), h.len());
        ParamVector(self.0.iter().zip(&h.0).map(|(a, b)| a + t * b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.add_scaled(-1.0, other)
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|x| s * x).collect())
    }
}

const COMPACT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetKind {
    /// The widened open set `𝒜` on which the forward map is differentiable.
    Open,
    /// The compact set `𝐊` holding all admissible parameters.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub prior: PriorData,
    pub kind: SetKind,
}

impl ConstraintSet {
    pub fn compact(prior: PriorData) -> Self {
        Self { prior, kind: SetKind::Compact }
    }

    pub fn open(prior: PriorData) -> Self {
        Self { prior, kind: SetKind::Open }
    }

    pub fn contains(&self, l: &ParamVector) -> bool {
        let n = l.n_sub();
        let (a, b, g) = (self.prior.alpha0, self.prior.beta0, self.prior.gamma0);
        (0..n).all(|j| {
            let (lam, mu, rho) = (l.lambda(j), l.mu(j), l.rho(j));
            let bulk = 2.0 * mu + 3.0 * lam;
            match self.kind {
                SetKind::Compact => {
                    // rounding slack so projected points test as members
                    let eps = COMPACT_SLACK * (1.0 + 1.0 / a);
                    a - eps <= mu
                        && mu <= 1.0 / a + eps
                        && lam <= 1.0 / a + eps
                        && bulk >= b - eps
                        && (0.0..=1.0 / g).contains(&rho)
                }
                SetKind::Open => {
                    a / 2.0 < mu
                        && mu < 2.0 / a
                        && lam < 2.0 / a
                        && bulk > b / 2.0
                        && g / 2.0 < rho
                        && rho < 2.0 / g
                }
            }
        })
    }

    /// Centroid of the per-subdomain polytope, the default starting point.
    pub fn centroid(&self, n: usize) -> Result<ParamVector> {
        let poly = LamePolygon::new(&self.prior)?;
        let c = poly.vertices.iter().fold(Vector2::zeros(), |acc, v| acc + v) / poly.vertices.len() as f64;
        Ok(ParamVector::uniform(n, c.x, c.y, 0.5 / self.prior.gamma0))
    }
}

/// Half-plane `n · x <= c` in the `(λ, μ)` plane.
#[derive(Debug, Clone, Copy)]
struct HalfPlane {
    normal: Vector2<f64>,
    offset: f64,
}

impl HalfPlane {
    fn violation(&self, p: &Vector2<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// `{α0 ≤ μ ≤ α0⁻¹, λ ≤ α0⁻¹, 2μ + 3λ ≥ β0}` in `(λ, μ)` coordinates.
#[derive(Debug, Clone)]
pub(crate) struct LamePolygon {
    planes: [HalfPlane; 4],
    vertices: Vec<Vector2<f64>>,
    scale: f64,
}

impl LamePolygon {
    pub(crate) fn new(prior: &PriorData) -> Result<Self> {
        let a = prior.alpha0;
        let planes = [
            HalfPlane { normal: Vector2::new(0.0, -1.0), offset: -a },
            HalfPlane { normal: Vector2::new(0.0, 1.0), offset: 1.0 / a },
            HalfPlane { normal: Vector2::new(1.0, 0.0), offset: 1.0 / a },
            HalfPlane { normal: Vector2::new(-3.0, -2.0), offset: -prior.beta0 },
        ];
        let scale = 1.0 + 1.0 / a.abs().max(f64::MIN_POSITIVE);
        let mut poly = Self { planes, vertices: Vec::new(), scale };
        for i in 0..4 {
            for k in i + 1..4 {
                if let Some(p) = poly.intersect(i, k) {
                    if poly.feasible(&p) {
                        poly.vertices.push(p);
                    }
                }
            }
        }
        if poly.vertices.is_empty() || !(a > 0.0) {
            return Err(Error::Config(format!(
                "admissible Lamé polygon is empty for alpha0 = {}, beta0 = {}",
                prior.alpha0, prior.beta0
            )));
        }
        Ok(poly)
    }

    fn feasible(&self, p: &Vector2<f64>) -> bool {
        let tol = 1e-12 * self.scale;
        self.planes.iter().all(|h| h.violation(p) <= tol)
    }

    fn intersect(&self, i: usize, k: usize) -> Option<Vector2<f64>> {
        let (a, b) = (&self.planes[i], &self.planes[k]);
        let det = a.normal.x * b.normal.y - a.normal.y * b.normal.x;
        if det.abs() < 1e-14 {
            return None;
        }
        let x = (a.offset * b.normal.y - a.normal.y * b.offset) / det;
        let y = (a.normal.x * b.offset - a.offset * b.normal.x) / det;
        Some(Vector2::new(x, y))
    }

    /// Euclidean projection by enumerating active sets of size 0, 1 and 2.
    pub(crate) fn project(&self, p: Vector2<f64>) -> Vector2<f64> {
        if self.feasible(&p) {
            return p;
        }
        let mut best: Option<(f64, Vector2<f64>)> = None;
        let consider = |q: Vector2<f64>, best: &mut Option<(f64, Vector2<f64>)>| {
            if self.feasible(&q) {
                let d = (q - p).norm_squared();
                if best.map_or(true, |(bd, _)| d < bd) {
                    *best = Some((d, q));
                }
            }
        };
        for h in &self.planes {
            let v = h.violation(&p);
            let q = p - h.normal * (v / h.normal.norm_squared());
            consider(q, &mut best);
        }
        for v in &self.vertices {
            consider(*v, &mut best);
        }
        best.expect("nonempty polygon has a nearest vertex").1
    }
}

/// Euclidean projection onto `𝐊`, subdomain by subdomain.
pub fn project_onto_k(l: &ParamVector, k: &ConstraintSet) -> Result<ParamVector> {
    project_onto_k_masked(l, k, true, true)
}

/// Projection that only touches the Lamé pair and/or the density.
pub(crate) fn project_onto_k_masked(
    l: &ParamVector,
    k: &ConstraintSet,
    lame: bool,
    density: bool,
) -> Result<ParamVector> {
    if k.kind != SetKind::Compact {
        return Err(Error::Config("projection is defined onto the compact set only".into()));
    }
    let poly = LamePolygon::new(&k.prior)?;
    let rho_max = 1.0 / k.prior.gamma0;
    let mut out = l.clone();
    for j in 0..l.n_sub() {
        let (mut lam, mut mu, mut rho) = (l.lambda(j), l.mu(j), l.rho(j));
        if lame {
            let q = poly.project(Vector2::new(lam, mu));
            lam = q.x;
            mu = q.y;
        }
        if density {
            rho = rho.clamp(0.0, rho_max);
        }
        out.set_triple(j, lam, mu, rho);
    }
    Ok(out)
}

/// Logarithmic modulus: `|log t|^(-1/(8δ))` below `1/e`, affine `t - 1/e + 1` above.
pub fn sigma(t: f64, delta: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("sigma requires t > 0, got {t}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("sigma requires delta in (0,1), got {delta}")));
    }
    let inv_e = (-1.0f64).exp();
    if t < inv_e {
        Ok(t.ln().abs().powf(-1.0 / (8.0 * delta)))
    } else {
        Ok(t - inv_e + 1.0)
    }
}

pub fn sigma1(t: f64, delta: f64) -> Result<f64> {
    Ok(sigma(t, delta)?.powf(0.2))
}

/// `σ1` composed with itself `n` times.
pub fn sigma1_iterated(t: f64, delta: f64, n: usize) -> Result<f64> {
    let mut v = t;
    for _ in 0..n {
        v = sigma1(v, delta)?;
    }
    Ok(v)
}

pub const DEFAULT_SIGMA_DELTA: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
        }
    }

    fn prior() -> PriorData {
        PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, 2).unwrap()
    }

    fn e12() -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        m[(0, 1)] = 1.0;
        m
    }

    #[test]
    fn apply_tensor_examples() {
        let c = IsotropicTensor::new(2.0, 1.0);
        assert_eq!(c.apply(&Matrix3::identity()), Matrix3::identity() * 8.0);

        let w = Matrix3::new(0.0, 1.0, -2.0, -1.0, 0.0, 3.0, 2.0, -3.0, 0.0);
        assert_eq!(IsotropicTensor::new(5.0, 3.0).apply(&w), Matrix3::zeros());

        let r = IsotropicTensor::new(1.0, 2.0).apply(&e12());
        let mut expected = Matrix3::zeros();
        expected[(0, 1)] = 2.0;
        expected[(1, 0)] = 2.0;
        assert_eq!(r, expected);
    }

    #[test]
    fn reference_tensor_examples() {
        let c0 = reference_tensor(&PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, 1).unwrap());
        assert_eq!((c0.lambda, c0.mu), (-0.25, 0.5));
        let c0 = reference_tensor(&PriorData::new(0.2, 0.6, 0.5, 1.0, 1.0, 1).unwrap());
        assert!(c0.lambda.abs() < 1e-15);
        assert_eq!(c0.mu, 0.2);
    }

    #[test]
    fn admissible_tensors_dominate_reference() {
        let p = prior();
        let c0 = p.reference_tensor();
        let k = ConstraintSet::compact(p);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 10_000 {
            let l = ParamVector::uniform(
                1,
                rng.random_range(p.lambda_min()..=2.0),
                rng.random_range(0.5..=2.0),
                1.0,
            );
            if !k.contains(&l) {
                continue;
            }
            let c = l.tensor(0);
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s = (a + a.transpose()) * 0.5;
            let diff = c.apply(&s) - c0.apply(&s);
            assert!(double_contract(&diff, &s) >= -1e-12);
            checked += 1;
        }
    }

    #[test]
    fn prior_ranges_rejected() {
        assert!(PriorData::new(1.2, 1.0, 0.5, 1.0, 1.0, 1).is_err());
        assert!(PriorData::new(0.5, 2.5, 0.5, 1.0, 1.0, 1).is_err());
        assert!(PriorData::new(0.5, 1.0, 0.0, 1.0, 1.0, 1).is_err());
        assert!(PriorData::new(0.5, 1.0, 0.5, 0.5, 1.0, 1).is_err());
        assert!(PriorData::new(0.5, 1.0, 0.5, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn sup_norm_uses_signed_mu() {
        let l = ParamVector::from_parts(&[-3.0, 1.0], &[0.5, 2.0], &[-0.1, 1.5]).unwrap();
        assert_eq!(l.sup_norm(), 3.0);
        assert!(ParamVector::new(vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn compact_members_lie_in_open_set() {
        let p = prior();
        let k = ConstraintSet::compact(p);
        let a = ConstraintSet::open(p);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = 0;
        for _ in 0..5000 {
            let l = ParamVector::uniform(
                1,
                rng.random_range(-1.0..=2.0),
                rng.random_range(0.5..=2.0),
                rng.random_range(1.01..=2.0),
            );
            if k.contains(&l) {
                assert!(a.contains(&l));
                seen += 1;
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn projection_examples() {
        let k = ConstraintSet::compact(prior());
        let inside = ParamVector::from_parts(&[0.5, 0.2], &[1.0, 1.5], &[1.0, 0.3]).unwrap();
        assert!(k.contains(&inside));
        assert_eq!(project_onto_k(&inside, &k).unwrap(), inside);

        let mut neg_rho = inside.clone();
        neg_rho.set_triple(1, 0.2, 1.5, -0.3);
        let p = project_onto_k(&neg_rho, &k).unwrap();
        assert_eq!(p.rho(1), 0.0);
        assert_eq!((p.lambda(1), p.mu(1)), (0.2, 1.5));
        assert_eq!(p.rho(0), 1.0);

        assert!(project_onto_k(&inside, &ConstraintSet::open(prior())).is_err());
    }

    /// Dense-grid brute-force nearest point of the Lamé polygon, zooming in
    /// three times around the best grid point.
    fn grid_projection(p: &PriorData, target: Vector2<f64>) -> Vector2<f64> {
        let feasible = |lam: f64, mu: f64| {
            p.alpha0 <= mu && mu <= 1.0 / p.alpha0 && lam <= 1.0 / p.alpha0 && 2.0 * mu + 3.0 * lam >= p.beta0
        };
        let (mut lo_l, mut hi_l) = (p.lambda_min(), 1.0 / p.alpha0);
        let (mut lo_m, mut hi_m) = (p.alpha0, 1.0 / p.alpha0);
        let steps = 400;
        let mut best = (f64::INFINITY, Vector2::zeros());
        for _ in 0..4 {
            let (dl, dm) = ((hi_l - lo_l) / steps as f64, (hi_m - lo_m) / steps as f64);
            for i in 0..=steps {
                let lam = lo_l + dl * i as f64;
                for k in 0..=steps {
                    let mu = lo_m + dm * k as f64;
                    if !feasible(lam, mu) {
                        continue;
                    }
                    let d = (Vector2::new(lam, mu) - target).norm_squared();
                    if d < best.0 {
                        best = (d, Vector2::new(lam, mu));
                    }
                }
            }
            lo_l = best.1.x - 3.0 * dl;
            hi_l = best.1.x + 3.0 * dl;
            lo_m = best.1.y - 3.0 * dm;
            hi_m = best.1.y + 3.0 * dm;
        }
        best.1
    }

    #[test]
    fn projection_onto_bulk_plane_matches_grid() {
        let p = prior();
        let k = ConstraintSet::compact(p);
        // violates only 2μ + 3λ >= β0
        let l = ParamVector::uniform(1, -0.6, 1.0, 1.0);
        assert!(2.0 * 1.0 + 3.0 * -0.6 < p.beta0);
        let proj = project_onto_k(&l, &k).unwrap();
        let grid = grid_projection(&p, Vector2::new(-0.6, 1.0));
        assert!((proj.lambda(0) - grid.x).abs() <= 1e-4, "{} vs {}", proj.lambda(0), grid.x);
        assert!((proj.mu(0) - grid.y).abs() <= 1e-4);
        // orthogonal projection onto the plane 3λ + 2μ = β0
        let v = (3.0 * -0.6 + 2.0 * 1.0 - p.beta0) / 13.0;
        assert!(close(proj.lambda(0), -0.6 - 3.0 * v, 1e-13));
        assert!(close(proj.mu(0), 1.0 - 2.0 * v, 1e-13));
    }

    #[test]
    fn projection_corner_cases_match_grid() {
        let p = prior();
        let k = ConstraintSet::compact(p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..6 {
            let t = Vector2::new(rng.random_range(-3.0..4.0), rng.random_range(-1.0..4.0));
            let proj = project_onto_k(&ParamVector::uniform(1, t.x, t.y, 1.0), &k).unwrap();
            let grid = grid_projection(&p, t);
            let dp = (Vector2::new(proj.lambda(0), proj.mu(0)) - t).norm();
            let dg = (grid - t).norm();
            assert!(dp <= dg + 1e-9, "projection not nearest: {dp} > {dg}");
            assert!((dp - dg).abs() <= 1e-4);
        }
    }

    #[test]
    fn empty_polygon_is_configuration_error() {
        let bad = PriorData { alpha0: 1.5, beta0: 1.0, gamma0: 0.5, lip: 1.0, volume: 1.0, n_sub: 1 };
        let k = ConstraintSet::compact(bad);
        assert!(matches!(project_onto_k(&ParamVector::uniform(1, 0.0, 1.0, 1.0), &k), Err(Error::Config(_))));
    }

    #[test]
    fn sigma_examples() {
        let inv_e = (-1.0f64).exp();
        for d in [0.1, 0.5, 0.9] {
            assert!((sigma(inv_e, d).unwrap() - 1.0).abs() < 1e-15);
            assert!((sigma(1.0, d).unwrap() - (2.0 - inv_e)).abs() < 1e-15);
        }
        assert!((sigma((-16.0f64).exp(), 0.25).unwrap() - 0.25).abs() < 1e-15);
        assert!((sigma(1.0, 0.3).unwrap() - 1.6321).abs() < 1e-4);
        assert!(sigma(0.0, 0.5).is_err());
        assert!(sigma(-1.0, 0.5).is_err());
        assert!((sigma1(inv_e, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((sigma1((-16.0f64).exp(), 0.25).unwrap() - 0.25f64.powf(0.2)).abs() < 1e-15);
        assert!((sigma1((-16.0f64).exp(), 0.25).unwrap() - 0.7579).abs() < 1e-4);
        assert!(sigma1(-0.5, 0.5).is_err());
    }

    #[test]
    fn sigma_continuous_at_threshold() {
        let inv_e = (-1.0f64).exp();
        for d in [0.2, 0.5, 0.8] {
            let left = sigma(inv_e * (1.0 - 1e-14), d).unwrap();
            let right = sigma(inv_e, d).unwrap();
            assert!((left - right).abs() < 1e-12);
        }
    }

    #[test]
    fn iterated_sigma1_monotone() {
        let mut prev = 0.0;
        for i in 1..=100 {
            let t = 10f64.powf(-12.0 + 13.0 * i as f64 / 100.0);
            let v = sigma1_iterated(t, DEFAULT_SIGMA_DELTA, 3).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert_eq!(sigma1_iterated(0.01, 0.5, 1).unwrap(), sigma1(0.01, 0.5).unwrap());
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix3<f64>> {
        prop::collection::vec(-10.0f64..10.0, 9).prop_map(|v| Matrix3::from_iterator(v))
    }

    proptest! {
        #[test]
        fn tensor_major_symmetry(a in matrix_strategy(), b in matrix_strategy(),
                                 lam in -2.0f64..2.0, mu in 0.1f64..3.0) {
            let c = IsotropicTensor::new(lam, mu);
            let ca = c.apply(&a);
            prop_assert!((ca - ca.transpose()).norm() < 1e-12);
            let lhs = double_contract(&ca, &b);
            let rhs = double_contract(&c.apply(&b), &a);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
            let lin = c.apply(&(a * 2.0 + b)) - (ca * 2.0 + c.apply(&b));
            prop_assert!(lin.norm() < 1e-10);
        }

        #[test]
        fn projection_idempotent_and_nonexpansive(
            x in prop::collection::vec(-4.0f64..4.0, 6),
            y in prop::collection::vec(-4.0f64..4.0, 6),
        ) {
            let k = ConstraintSet::compact(prior());
            let lx = ParamVector::new(x).unwrap();
            let ly = ParamVector::new(y).unwrap();
            let px = project_onto_k(&lx, &k).unwrap();
            let py = project_onto_k(&ly, &k).unwrap();
            prop_assert!(k.contains(&px));
            let ppx = project_onto_k(&px, &k).unwrap();
            prop_assert!(ppx.sub(&px).max_abs() < 1e-12);
            prop_assert!(px.sub(&py).euclidean_norm() <= lx.sub(&ly).euclidean_norm() + 1e-12);
        }

        #[test]
        fn sigma_nondecreasing(t1 in 1e-12f64..5.0, t2 in 1e-12f64..5.0, d in 0.05f64..0.95) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(sigma(lo, d).unwrap() <= sigma(hi, d).unwrap() + 1e-15);
        }
    }
}
