//! Transport functions and the mass transport principle.
//!
//! A transport function assigns to a doubly-rooted space `(X, u, v, mu)` the
//! mass `g(u, v) >= 0` sent from `u` to `v`. It must not look at the space's
//! own root, and it must be invariant under isomorphisms of the decorated
//! space. A law of rooted spaces is unimodular when the expected outgoing
//! mass at the root equals the expected incoming mass for every such `g`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::ensemble::RootedEnsemble;
use crate::error::{Error, Result};
use crate::models::Sampler;
use crate::report::{MtpReport, EXACT_TOL};
use crate::seed::mix64;
use crate::space::{FiniteRmmSpace, MeasureRef, MATRIX_TOL};
use crate::stats::Estimate;

/// Dense row-major `n x n` matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = SquareMatrix::zeros(n);
        for u in 0..n {
            for v in 0..n {
                m.data[u * n + v] = f(u, v);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.n + v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: f64) {
        self.data[u * self.n + v] = x;
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.data[u * self.n..(u + 1) * self.n]
    }

    /// `sum_v m(u, v) * w(v)`.
    pub fn out_sum(&self, u: usize, w: &[f64]) -> f64 {
        self.row(u).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    /// `sum_x m(x, v) * w(x)`.
    pub fn in_sum(&self, v: usize, w: &[f64]) -> f64 {
        (0..self.n).map(|x| self.get(x, v) * w[x]).sum()
    }

    fn check(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{what} at ({},{})", i / self.n, i % self.n)));
        }
        if let Some(i) = self.data.iter().position(|&x| x < 0.0) {
            return Err(Error::Negative(format!("{what} at ({},{})", i / self.n, i % self.n)));
        }
        Ok(())
    }
}

/// An isomorphism-invariant map `(space, u, v) -> mass >= 0`.
pub trait TransportFunction: Send + Sync {
    fn name(&self) -> String;

    fn eval(&self, space: &FiniteRmmSpace, u: usize, v: usize) -> Result<f64>;

    /// All values on one space. Implementations backed by a whole-space
    /// construction override this and [`out_in_at`](Self::out_in_at).
    fn matrix(&self, space: &FiniteRmmSpace) -> Result<SquareMatrix> {
        let n = space.n();
        let mut m = SquareMatrix::zeros(n);
        for u in 0..n {
            for v in 0..n {
                m.set(u, v, self.eval(space, u, v)?);
            }
        }
        Ok(m)
    }

    /// Row `o` and column `o` of the matrix.
    fn out_in_at(&self, space: &FiniteRmmSpace, o: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = space.n();
        let mut row = Vec::with_capacity(n);
        let mut col = Vec::with_capacity(n);
        for x in 0..n {
            row.push(self.eval(space, o, x)?);
            col.push(self.eval(space, x, o)?);
        }
        Ok((row, col))
    }

    /// Decoration names this function reads.
    fn dependencies(&self) -> Vec<String> {
        Vec::new()
    }
}

fn whole_row_col(m: &SquareMatrix, o: usize) -> (Vec<f64>, Vec<f64>) {
    (m.row(o).to_vec(), (0..m.n).map(|x| m.get(x, o)).collect())
}

/// Wraps a closure as a transport function.
pub struct FnTransport<F> {
    pub name: String,
    pub f: F,
}

impl<F> FnTransport<F>
where
    F: Fn(&FiniteRmmSpace, usize, usize) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnTransport { name: name.into(), f }
    }
}

impl<F> TransportFunction for FnTransport<F>
where
    F: Fn(&FiniteRmmSpace, usize, usize) -> f64 + Send + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn eval(&self, space: &FiniteRmmSpace, u: usize, v: usize) -> Result<f64> {
        Ok((self.f)(space, u, v))
    }
}

/// Named transport functions addressable from configuration strings such as
/// `ball_indicator:r=2` or `to_decoration:phi`.
#[derive(Clone, Debug, PartialEq)]
pub enum Builtin {
    Zero,
    Constant { c: f64 },
    BallIndicator { r: f64 },
    SphereIndicator { r: f64 },
    DistancePower { a: f64 },
    ExpDecay { rate: f64 },
    /// `deg(u)` to each neighbour.
    DegreeWeighted,
    /// Simple random walk step `1{d(u,v)=1} / deg(u)`.
    InverseDegree,
    NearestNeighbor,
    Farthest,
    MassWeighted { r: f64 },
    MassRatio,
    EccentricityRatio,
    CloserToCenter,
    BallMassInverse { r: f64 },
    SameMass,
    DegreeGreater,
    GPositive,
    BalancedH,
    UniformH,
    Random { seed: u64 },
    ToDecoration { name: String, r: Option<f64> },
    FromDecoration { name: String, r: Option<f64> },
    MarkOrder { name: String },
    SubsetCross { name: String },
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

impl fmt::Display for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Builtin::*;
        let radius = |r: &Option<f64>| r.map(|r| format!(",r={}", fmt_f(r))).unwrap_or_default();
        match self {
            Zero => write!(f, "zero"),
            Constant { c } => write!(f, "constant:c={}", fmt_f(*c)),
            BallIndicator { r } => write!(f, "ball_indicator:r={}", fmt_f(*r)),
            SphereIndicator { r } => write!(f, "sphere_indicator:r={}", fmt_f(*r)),
            DistancePower { a } => write!(f, "distance_power:a={}", fmt_f(*a)),
            ExpDecay { rate } => write!(f, "exp_decay:rate={}", fmt_f(*rate)),
            DegreeWeighted => write!(f, "degree_weighted"),
            InverseDegree => write!(f, "inverse_degree"),
            NearestNeighbor => write!(f, "nearest_neighbor"),
            Farthest => write!(f, "farthest"),
            MassWeighted { r } => write!(f, "mass_weighted:r={}", fmt_f(*r)),
            MassRatio => write!(f, "mass_ratio"),
            EccentricityRatio => write!(f, "eccentricity_ratio"),
            CloserToCenter => write!(f, "closer_to_center"),
            BallMassInverse { r } => write!(f, "ball_mass_inverse:r={}", fmt_f(*r)),
            SameMass => write!(f, "same_mass"),
            DegreeGreater => write!(f, "degree_greater"),
            GPositive => write!(f, "g_positive"),
            BalancedH => write!(f, "balanced_h"),
            UniformH => write!(f, "uniform_h"),
            Random { seed } => write!(f, "random:seed={seed}"),
            ToDecoration { name, r } => write!(f, "to_decoration:{name}{}", radius(r)),
            FromDecoration { name, r } => write!(f, "from_decoration:{name}{}", radius(r)),
            MarkOrder { name } => write!(f, "mark_order:{name}"),
            SubsetCross { name } => write!(f, "subset_cross:{name}"),
        }
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Builtin> {
        use Builtin::*;
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut positional = None;
        let mut params = std::collections::BTreeMap::new();
        for item in rest.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            match item.split_once('=') {
                Some((k, v)) => {
                    params.insert(k.trim(), v.trim());
                }
                None => positional = Some(item.to_string()),
            }
        }
        let bad = || Error::UnknownTransport(s.to_string());
        let num = |k: &str| -> Result<f64> {
            let v = params.get(k).ok_or_else(bad)?;
            v.parse::<f64>().map_err(|_| bad())
        };
        let opt_num = |k: &str| -> Result<Option<f64>> {
            params.get(k).map(|v| v.parse::<f64>().map_err(|_| bad())).transpose()
        };
        let name = || positional.clone().ok_or_else(bad);
        Ok(match head {
            "zero" => Zero,
            "constant" => Constant { c: num("c")? },
            "ball_indicator" => BallIndicator { r: num("r")? },
            "sphere_indicator" => SphereIndicator { r: num("r")? },
            "distance_power" => DistancePower { a: num("a")? },
            "exp_decay" => ExpDecay { rate: num("rate")? },
            "degree_weighted" => DegreeWeighted,
            "inverse_degree" => InverseDegree,
            "nearest_neighbor" => NearestNeighbor,
            "farthest" => Farthest,
            "mass_weighted" => MassWeighted { r: num("r")? },
            "mass_ratio" => MassRatio,
            "eccentricity_ratio" => EccentricityRatio,
            "closer_to_center" => CloserToCenter,
            "ball_mass_inverse" => BallMassInverse { r: num("r")? },
            "same_mass" => SameMass,
            "degree_greater" => DegreeGreater,
            "g_positive" => GPositive,
            "balanced_h" => BalancedH,
            "uniform_h" => UniformH,
            "random" => Random { seed: params.get("seed").ok_or_else(bad)?.parse().map_err(|_| bad())? },
            "to_decoration" => ToDecoration { name: name()?, r: opt_num("r")? },
            "from_decoration" => FromDecoration { name: name()?, r: opt_num("r")? },
            "mark_order" => MarkOrder { name: name()? },
            "subset_cross" => SubsetCross { name: name()? },
            _ => return Err(bad()),
        })
    }
}

fn eccentricity(s: &FiniteRmmSpace, u: usize) -> f64 {
    s.dist_row(u).iter().cloned().fold(0.0, f64::max)
}

#[inline]
fn within(d: f64, r: f64) -> bool {
    d <= r + MATRIX_TOL
}

fn q(x: f64) -> u64 {
    (x / crate::canon::DEFAULT_GRID).round() as i64 as u64
}

/// Isomorphism-invariant fingerprint of a point: its mass and the multiset of
/// (distance, mass) pairs it sees.
fn point_profile(s: &FiniteRmmSpace, u: usize) -> u64 {
    let mut seen: Vec<(u64, u64)> = (0..s.n()).map(|x| (q(s.d(u, x)), q(s.mu()[x]))).collect();
    seen.sort_unstable();
    let mut h = mix64(q(s.mu()[u]));
    for (d, m) in seen {
        h = mix64(h ^ d);
        h = mix64(h ^ m);
    }
    h
}

fn random_value(seed: u64, pu: u64, pv: u64, d: f64) -> f64 {
    let h = mix64(mix64(mix64(seed ^ 0x5EED) ^ pu) ^ mix64(pv ^ q(d)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl TransportFunction for Builtin {
    fn name(&self) -> String {
        self.to_string()
    }

    fn eval(&self, s: &FiniteRmmSpace, u: usize, v: usize) -> Result<f64> {
        use Builtin::*;
        let d = s.d(u, v);
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        Ok(match self {
            Zero => 0.0,
            Constant { c } => *c,
            BallIndicator { r } => ind(within(d, *r)),
            SphereIndicator { r } => ind((d - r).abs() <= MATRIX_TOL),
            DistancePower { a } => {
                if d == 0.0 {
                    ind(*a == 0.0)
                } else {
                    d.powf(*a)
                }
            }
            ExpDecay { rate } => (-rate * d).exp(),
            DegreeWeighted => s.degree(u) as f64 * ind((d - 1.0).abs() <= MATRIX_TOL),
            InverseDegree => {
                let k = s.degree(u);
                if k == 0 || (d - 1.0).abs() > MATRIX_TOL {
                    0.0
                } else {
                    1.0 / k as f64
                }
            }
            NearestNeighbor => {
                let row = s.dist_row(u);
                let m = row.iter().cloned().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
                if !m.is_finite() || (d - m).abs() > MATRIX_TOL {
                    0.0
                } else {
                    1.0 / row.iter().filter(|&&x| (x - m).abs() <= MATRIX_TOL).count() as f64
                }
            }
            Farthest => ind(d > 0.0 && (d - eccentricity(s, u)).abs() <= MATRIX_TOL),
            MassWeighted { r } => s.mu()[v] * ind(within(d, *r)),
            MassRatio => (s.mu()[v] + 1.0) / (s.mu()[u] + 1.0),
            EccentricityRatio => (1.0 + eccentricity(s, v)) / (1.0 + eccentricity(s, u)),
            CloserToCenter => ind(eccentricity(s, v) < eccentricity(s, u) - MATRIX_TOL),
            BallMassInverse { r } => {
                let m = s.ball_mass(u, *r);
                if m > 0.0 && within(d, *r) {
                    1.0 / m
                } else {
                    0.0
                }
            }
            SameMass => ind((s.mu()[u] - s.mu()[v]).abs() <= MATRIX_TOL),
            DegreeGreater => ind(s.degree(u) > s.degree(v)),
            GPositive | BalancedH => self.matrix(s)?.get(u, v),
            UniformH => {
                let m = s.total_mass();
                if m <= 0.0 {
                    return Err(Error::ZeroMass);
                }
                1.0 / m
            }
            Random { seed } => random_value(*seed, point_profile(s, u), point_profile(s, v), d),
            ToDecoration { name, r } => s.measure(name)?[v] * ind(r.is_none_or(|r| within(d, r))),
            FromDecoration { name, r } => s.measure(name)?[u] * ind(r.is_none_or(|r| within(d, r))),
            MarkOrder { name } => {
                let m = s.marks(name)?;
                ind(m[u] < m[v])
            }
            SubsetCross { name } => {
                let m = s.subset(name)?;
                ind(m[u] && !m[v])
            }
        })
    }

    fn matrix(&self, s: &FiniteRmmSpace) -> Result<SquareMatrix> {
        match self {
            Builtin::GPositive => build_g_positive(s),
            Builtin::BalancedH => build_h_balanced(s, None),
            Builtin::Random { seed } => {
                let prof: Vec<u64> = (0..s.n()).map(|u| point_profile(s, u)).collect();
                Ok(SquareMatrix::from_fn(s.n(), |u, v| random_value(*seed, prof[u], prof[v], s.d(u, v))))
            }
            _ => {
                let n = s.n();
                let mut m = SquareMatrix::zeros(n);
                for u in 0..n {
                    for v in 0..n {
                        m.set(u, v, self.eval(s, u, v)?);
                    }
                }
                Ok(m)
            }
        }
    }

    fn out_in_at(&self, s: &FiniteRmmSpace, o: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Builtin::GPositive | Builtin::BalancedH | Builtin::Random { .. } => Ok(whole_row_col(&self.matrix(s)?, o)),
            _ => {
                let n = s.n();
                let mut row = Vec::with_capacity(n);
                let mut col = Vec::with_capacity(n);
                for x in 0..n {
                    row.push(self.eval(s, o, x)?);
                    col.push(self.eval(s, x, o)?);
                }
                Ok((row, col))
            }
        }
    }

    fn dependencies(&self) -> Vec<String> {
        match self {
            Builtin::ToDecoration { name, .. }
            | Builtin::FromDecoration { name, .. }
            | Builtin::MarkOrder { name }
            | Builtin::SubsetCross { name } => vec![name.clone()],
            _ => Vec::new(),
        }
    }
}

/// Decoration-free battery of transport functions (25 entries, five of them
/// seeded random ones).
pub fn battery() -> Vec<Builtin> {
    use Builtin::*;
    let mut out = vec![
        Zero,
        Constant { c: 1.0 },
        BallIndicator { r: 1.0 },
        BallIndicator { r: 2.0 },
        SphereIndicator { r: 1.0 },
        SphereIndicator { r: 2.0 },
        DistancePower { a: 1.0 },
        DistancePower { a: 2.0 },
        ExpDecay { rate: 0.7 },
        DegreeWeighted,
        InverseDegree,
        NearestNeighbor,
        Farthest,
        MassWeighted { r: 1.5 },
        MassRatio,
        EccentricityRatio,
        CloserToCenter,
        BallMassInverse { r: 1.0 },
        SameMass,
        DegreeGreater,
        GPositive,
        BalancedH,
        UniformH,
    ];
    out.extend((1..=5).map(|seed| Random { seed }));
    out
}

/// Transport functions reading the measure decoration `phi`.
pub fn decorated_battery(phi: &str) -> Vec<Builtin> {
    use Builtin::*;
    vec![
        ToDecoration { name: phi.into(), r: None },
        ToDecoration { name: phi.into(), r: Some(1.0) },
        FromDecoration { name: phi.into(), r: Some(1.0) },
        FromDecoration { name: phi.into(), r: None },
    ]
}

/// Outgoing and incoming mass at the root:
/// `g+ = sum_x g(o,x) mu(x)`, `g- = sum_x g(x,o) mu(x)`.
pub fn eval_out_in(space: &FiniteRmmSpace, g: &dyn TransportFunction) -> Result<(f64, f64)> {
    eval_out_in_wrt(space, g, &MeasureRef::Base)
}

/// Like [`eval_out_in`] with integrals taken against `measure`.
pub fn eval_out_in_wrt(space: &FiniteRmmSpace, g: &dyn TransportFunction, measure: &MeasureRef) -> Result<(f64, f64)> {
    let w = measure.values(space)?;
    let (row, col) = g.out_in_at(space, space.root())?;
    let mut plus = 0.0;
    let mut minus = 0.0;
    for x in 0..space.n() {
        let (a, b) = (row[x], col[x]);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite(format!("{} at point {x}", g.name())));
        }
        if a < 0.0 || b < 0.0 {
            return Err(Error::Negative(format!("{} at point {x}", g.name())));
        }
        plus += a * w[x];
        minus += b * w[x];
    }
    Ok((plus, minus))
}

/// Exact MTP check over a finite ensemble at tolerance `1e-9`.
pub fn mtp_check_exact(e: &RootedEnsemble, g: &dyn TransportFunction) -> Result<MtpReport> {
    mtp_check_exact_wrt(e, g, &MeasureRef::Base, EXACT_TOL)
}

/// MTP with both integrals taken against `measure` (unimodularity with
/// respect to that measure).
pub fn mtp_check_exact_wrt(
    e: &RootedEnsemble,
    g: &dyn TransportFunction,
    measure: &MeasureRef,
    tol: f64,
) -> Result<MtpReport> {
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for a in e.atoms() {
        let (p, m) = eval_out_in_wrt(&a.space, g, measure)?;
        lhs += a.weight * p;
        rhs += a.weight * m;
    }
    Ok(MtpReport::exact(format!("mtp[{}]", g.name()), lhs, rhs, tol))
}

/// Monte-Carlo MTP check: draws `0..trials` from the sampler, compares the
/// averages of `g+(o)` and `g-(o)` at `z` standard errors of the paired
/// difference.
pub fn mtp_check_mc(
    sampler: &dyn Sampler,
    g: &dyn TransportFunction,
    trials: u64,
    seed: u64,
    z: f64,
) -> Result<MtpReport> {
    if trials < 100 {
        return Err(Error::InvalidParameter(format!("Monte-Carlo checks need at least 100 trials, got {trials}")));
    }
    let pairs = (0..trials)
        .into_par_iter()
        .map(|i| eval_out_in(&sampler.draw(seed, i)?, g))
        .collect::<Result<Vec<_>>>()?;
    let plus: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let minus: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let (a, b, d) = (Estimate::from_samples(&plus), Estimate::from_samples(&minus), Estimate::from_samples(&diff));
    if !a.mean.is_finite() || !b.mean.is_finite() {
        return Err(Error::NonFinite(format!("Monte-Carlo accumulation for {}", g.name())));
    }
    Ok(MtpReport::monte_carlo(format!("mtp_mc[{}]", g.name()), a.mean, b.mean, a.se, b.se, d.se, z, trials, seed))
}

/// Radii at which the positive kernel's balls are taken: integer radii
/// starting at 1 for integer-valued metrics, otherwise the realized
/// distances from `u` (starting at 0).
fn ball_radii(space: &FiniteRmmSpace, u: usize, integral: bool) -> (Vec<f64>, usize) {
    let row = space.dist_row(u);
    let ecc = row.iter().cloned().fold(0.0, f64::max);
    if integral {
        let top = (ecc.round() as usize).max(1);
        ((0..=top).map(|r| r as f64).collect(), 1)
    } else {
        let mut r: Vec<f64> = row.to_vec();
        r.sort_by(f64::total_cmp);
        r.dedup_by(|a, b| (*a - *b).abs() <= MATRIX_TOL);
        (r, 0)
    }
}

/// A transport function with `g > 0` everywhere and `g+(u) = 1` at every
/// point: the `2^-k`-weighted mixture of uniform distributions on growing
/// balls, truncated once the ball covers the space (the geometric tail is
/// folded into the last term so the out-mass is exactly 1).
pub fn build_g_positive(space: &FiniteRmmSpace) -> Result<SquareMatrix> {
    let total = space.total_mass();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::ZeroMass);
    }
    let n = space.n();
    let integral = (0..n * n).all(|i| {
        let d = space.d(i / n, i % n);
        (d - d.round()).abs() <= MATRIX_TOL
    });
    let mut g = SquareMatrix::zeros(n);
    for u in 0..n {
        let (radii, start) = ball_radii(space, u, integral);
        let last = radii.len() - 1;
        let first = (start..=last)
            .find(|&i| space.ball_mass(u, radii[i]) > 0.0)
            .expect("the largest ball carries the whole positive mass");
        let terms = last.saturating_sub(first).max(1);
        for k in 1..=terms {
            let weight = if k < terms { 0.5f64.powi(k as i32) } else { 0.5f64.powi(k as i32 - 1) };
            let r = radii[(first + k).min(last)];
            let mass = space.ball_mass(u, r);
            for v in 0..n {
                if within(space.d(u, v), r) {
                    g.data[u * n + v] += weight / mass;
                }
            }
        }
    }
    Ok(g)
}

/// Symmetric positive balancing kernel
/// `h(u,v) = sum_x b(u) g(u,x) b(v) g(v,x) mu(x) / (sum_y b(y) g(y,x) mu(y))`
/// with `h+ = h- = b` (default `b = 1`).
pub fn build_h_balanced(space: &FiniteRmmSpace, b: Option<&[f64]>) -> Result<SquareMatrix> {
    let n = space.n();
    if let Some(b) = b {
        if b.len() != n {
            return Err(Error::InvalidParameter("bias vector length".into()));
        }
        if let Some(i) = b.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter(format!("bias must be positive, got {} at point {i}", b[i])));
        }
    }
    let g = build_g_positive(space)?;
    let mu = space.mu();
    let bg = SquareMatrix::from_fn(n, |u, x| b.map_or(1.0, |b| b[u]) * g.get(u, x));
    let mut w = vec![0.0; n];
    for x in 0..n {
        if mu[x] > 0.0 {
            let gm = bg.in_sum(x, mu);
            if gm <= 0.0 || !gm.is_finite() {
                return Err(Error::Normalization(format!("incoming mass {gm} at point {x}")));
            }
            w[x] = mu[x] / gm;
        }
    }
    let mut h = SquareMatrix::zeros(n);
    for u in 0..n {
        for v in u..n {
            let s: f64 = (0..n).map(|x| bg.get(u, x) * bg.get(v, x) * w[x]).sum();
            h.set(u, v, s);
            h.set(v, u, s);
        }
    }
    Ok(h)
}

/// [`build_h_balanced`] with the bias given as a root functional.
pub fn build_h_balanced_with<F>(space: &FiniteRmmSpace, b: F) -> Result<SquareMatrix>
where
    F: Fn(&FiniteRmmSpace) -> f64,
{
    let bv: Vec<f64> = (0..space.n()).map(|y| b(&space.rooted_at(y))).collect();
    build_h_balanced(space, Some(&bv))
}

/// `h+(u) = sum_v h(u,v) w(v)` and `h-(u) = sum_v h(v,u) w(v)` at every point.
pub fn out_in_sums(h: &SquareMatrix, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    ((0..h.n).map(|u| h.out_sum(u, w)).collect(), (0..h.n).map(|u| h.in_sum(u, w)).collect())
}

/// A row-stochastic transition kernel whose entries already include the
/// reference-measure weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelMatrix {
    pub matrix: SquareMatrix,
    pub reference: String,
}

impl KernelMatrix {
    pub fn new(matrix: SquareMatrix, reference: impl Into<String>) -> Result<Self> {
        matrix.check("kernel")?;
        for u in 0..matrix.n {
            let sum: f64 = matrix.row(u).iter().sum();
            if (sum - 1.0).abs() > MATRIX_TOL {
                return Err(Error::NotStochastic { row: u, sum });
            }
        }
        Ok(KernelMatrix { matrix, reference: reference.into() })
    }

    pub fn identity(n: usize) -> Self {
        KernelMatrix { matrix: SquareMatrix::from_fn(n, |u, v| if u == v { 1.0 } else { 0.0 }), reference: "identity".into() }
    }

    pub fn n(&self) -> usize {
        self.matrix.n
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.matrix.get(u, v)
    }

    /// `pi^T K` for a row vector `pi`.
    pub fn left_apply(&self, pi: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|v| self.matrix.in_sum(v, pi)).collect()
    }
}

/// Outcome of the "everything happens at the root" check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactorSubsetReport {
    /// `P(o in S)`.
    pub p_root_in_subset: f64,
    /// `P(mu(S) > 0)`.
    pub p_subset_charged: f64,
    /// `P(mu(X \ S) = 0)`.
    pub p_full_measure: f64,
    /// `P(o in S) > 0  <=>  P(mu(S) > 0) > 0`.
    pub positivity_equivalence: bool,
    /// `P(o in S) = 1  <=>  S has full measure a.s.`
    pub full_measure_equivalence: bool,
    pub passed: bool,
}

/// Evaluates the factor subset `S = {p : predicate(space rooted at p)}` on
/// every atom and checks both equivalences exactly.
pub fn factor_subset_check<P>(e: &RootedEnsemble, predicate: P) -> Result<FactorSubsetReport>
where
    P: Fn(&FiniteRmmSpace) -> bool,
{
    let mut root_in = 0.0;
    let mut charged = 0.0;
    let mut full = 0.0;
    for a in e.atoms() {
        let s = &a.space;
        if s.total_mass() <= 0.0 {
            return Err(Error::ZeroMass);
        }
        let member: Vec<bool> = (0..s.n()).map(|p| predicate(&s.rooted_at(p))).collect();
        let inside: f64 = (0..s.n()).filter(|&p| member[p]).map(|p| s.mu()[p]).sum();
        let outside: f64 = (0..s.n()).filter(|&p| !member[p]).map(|p| s.mu()[p]).sum();
        if member[s.root()] {
            root_in += a.weight;
        }
        if inside > 0.0 {
            charged += a.weight;
        }
        if outside == 0.0 {
            full += a.weight;
        }
    }
    let one = |p: f64| (p - 1.0).abs() <= EXACT_TOL;
    let positivity_equivalence = (root_in > EXACT_TOL) == (charged > EXACT_TOL);
    let full_measure_equivalence = one(root_in) == one(full);
    Ok(FactorSubsetReport {
        p_root_in_subset: root_in,
        p_subset_charged: charged,
        p_full_measure: full,
        positivity_equivalence,
        full_measure_equivalence,
        passed: positivity_equivalence && full_measure_equivalence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(m: f64) -> FiniteRmmSpace {
        FiniteRmmSpace::new(vec![vec![0.0]], vec![m], 0).unwrap()
    }

    fn star3() -> FiniteRmmSpace {
        FiniteRmmSpace::from_graph(4, &[(0, 1), (0, 2), (0, 3)]).unwrap()
    }

    #[test]
    fn parse_round_trip() {
        for b in battery().into_iter().chain(decorated_battery("phi")) {
            let s = b.to_string();
            assert_eq!(s.parse::<Builtin>().unwrap(), b, "{s}");
        }
        assert!("nope".parse::<Builtin>().is_err());
        assert!("ball_indicator".parse::<Builtin>().is_err());
        assert_eq!("to_decoration:phi".parse::<Builtin>().unwrap(), Builtin::ToDecoration { name: "phi".into(), r: None });
    }

    #[test]
    fn battery_has_twenty_plus() {
        assert!(battery().len() >= 20);
    }

    #[test]
    fn star_out_in() {
        let g = Builtin::DegreeGreater;
        assert_eq!(eval_out_in(&star3(), &g).unwrap(), (3.0, 0.0));
        assert_eq!(eval_out_in(&star3(), &Builtin::Zero).unwrap(), (0.0, 0.0));
        let (p, m) = eval_out_in(&star3().reroot(2).unwrap(), &Builtin::BallIndicator { r: 1.0 }).unwrap();
        assert_eq!(p, m);
    }

    #[test]
    fn g_positive_one_point() {
        let g = build_g_positive(&pt(4.0)).unwrap();
        assert_eq!(g.data, vec![0.25]);
        assert!(matches!(build_g_positive(&pt(1.0).with_measure(vec![0.0]).unwrap()), Err(Error::ZeroMass)));
    }

    #[test]
    fn g_positive_two_points() {
        let s = FiniteRmmSpace::from_graph(2, &[(0, 1)]).unwrap();
        let g = build_g_positive(&s).unwrap();
        assert_eq!(g.data, vec![0.5; 4]);
    }

    #[test]
    fn g_positive_path_by_hand() {
        // P_3, unit masses, root 0: integer radii 0..=2, first charged radius 1
        // (mass 2). Terms: k=1 -> radius 2 = whole space, folded weight 1.
        // From the middle: radii 0..=1, N=1, k=1 -> whole space, weight 1.
        let s = FiniteRmmSpace::from_graph(3, &[(0, 1), (1, 2)]).unwrap();
        let g = build_g_positive(&s).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                assert!((g.get(u, v) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // P_5 from an end: radii 0..=4, N=1; terms k=1..3 with weights 1/2, 1/4, 1/4
        // on balls of radius 2, 3, 4 (masses 3, 4, 5).
        let s = FiniteRmmSpace::from_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let g = build_g_positive(&s).unwrap();
        let expect = [
            0.5 / 3.0 + 0.25 / 4.0 + 0.25 / 5.0,
            0.5 / 3.0 + 0.25 / 4.0 + 0.25 / 5.0,
            0.5 / 3.0 + 0.25 / 4.0 + 0.25 / 5.0,
            0.25 / 4.0 + 0.25 / 5.0,
            0.25 / 5.0,
        ];
        for v in 0..5 {
            assert!((g.get(0, v) - expect[v]).abs() < 1e-15);
        }
    }

    #[test]
    fn g_positive_out_mass_is_one_non_integer() {
        let s = FiniteRmmSpace::new(
            vec![vec![0.0, 0.3, 1.1], vec![0.3, 0.0, 0.9], vec![1.1, 0.9, 0.0]],
            vec![0.0, 2.0, 0.5],
            0,
        )
        .unwrap();
        let g = build_g_positive(&s).unwrap();
        let (plus, _) = out_in_sums(&g, s.mu());
        for p in plus {
            assert!((p - 1.0).abs() < 1e-12);
        }
        assert!(g.data.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn h_two_points() {
        let s = FiniteRmmSpace::from_graph(2, &[(0, 1)]).unwrap();
        let h = build_h_balanced(&s, None).unwrap();
        assert_eq!(h.data, vec![0.5; 4]);
        assert_eq!(build_h_balanced(&pt(2.0), None).unwrap().data, vec![0.5]);
    }

    #[test]
    fn h_asymmetric_three_points() {
        let s = FiniteRmmSpace::new(
            vec![vec![0.0, 1.0, 2.5], vec![1.0, 0.0, 1.7], vec![2.5, 1.7, 0.0]],
            vec![1.0, 0.2, 3.0],
            0,
        )
        .unwrap();
        let h = build_h_balanced(&s, None).unwrap();
        // oracle: direct triple sum from g
        let g = build_g_positive(&s).unwrap();
        let mu = s.mu();
        let gminus: Vec<f64> = (0..3).map(|x| (0..3).map(|y| g.get(y, x) * mu[y]).sum()).collect();
        for u in 0..3 {
            for v in 0..3 {
                assert_eq!(h.get(u, v).to_bits(), h.get(v, u).to_bits());
                let direct: f64 = (0..3).map(|x| g.get(u, x) * g.get(v, x) / gminus[x] * mu[x]).sum();
                assert!((direct - h.get(u, v)).abs() < 1e-14);
            }
        }
        let (p, m) = out_in_sums(&h, mu);
        for u in 0..3 {
            assert!((p[u] - 1.0).abs() < 1e-9 && (m[u] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn h_with_bias() {
        let s = star3();
        let b = s.degrees();
        let h = build_h_balanced(&s, Some(&b)).unwrap();
        let (p, m) = out_in_sums(&h, s.mu());
        for u in 0..4 {
            assert!((p[u] - b[u]).abs() < 1e-9);
            assert!((m[u] - b[u]).abs() < 1e-9);
        }
        assert!(build_h_balanced(&s, Some(&[1.0, 0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn kernel_validation() {
        assert!(KernelMatrix::new(SquareMatrix { n: 2, data: vec![0.5, 0.5, 0.2, 0.7] }, "mu").is_err());
        assert!(KernelMatrix::new(SquareMatrix { n: 2, data: vec![0.5, 0.5, 0.3, 0.7] }, "mu").is_ok());
        assert!(KernelMatrix::new(SquareMatrix { n: 1, data: vec![f64::NAN] }, "mu").is_err());
    }

    #[test]
    fn random_transport_is_relabel_invariant() {
        let s = FiniteRmmSpace::from_graph(5, &[(0, 1), (1, 2), (2, 3), (1, 4)]).unwrap();
        let perm = [3, 1, 4, 0, 2];
        let t = s.relabel(&perm).unwrap();
        let g = Builtin::Random { seed: 9 };
        let (a, b) = (g.matrix(&s).unwrap(), g.matrix(&t).unwrap());
        for u in 0..5 {
            for v in 0..5 {
                assert_eq!(a.get(u, v), b.get(perm[u], perm[v]));
                assert_eq!(a.get(u, v), g.eval(&s, u, v).unwrap());
            }
        }
    }

    #[test]
    fn missing_decoration_errors() {
        let g = Builtin::ToDecoration { name: "phi".into(), r: None };
        assert!(matches!(eval_out_in(&star3(), &g), Err(Error::MissingDecoration(_))));
    }

    #[test]
    fn negative_transport_rejected() {
        let g = FnTransport::new("neg", |_: &FiniteRmmSpace, _, _| -1.0);
        assert!(matches!(eval_out_in(&star3(), &g), Err(Error::Negative(_))));
    }
}
