//! Finite rooted measured metric spaces.
//!
//! A [`FiniteRmmSpace`] is a finite metric space given by its distance
//! matrix, a nonnegative base measure, a root, and a set of named
//! decorations (extra measures, marks, trajectories, subsets). Values are
//! immutable once built; the heavy payloads sit behind `Arc` so rerooting
//! and cloning are cheap.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used for matrix identities (symmetry, triangle inequality).
pub const MATRIX_TOL: f64 = 1e-9;
/// Absolute tolerance used for scalar sums.
pub const SCALAR_TOL: f64 = 1e-12;
/// Default cap on the size of a product space.
pub const DEFAULT_PRODUCT_CAP: usize = 1024;

/// Extra structure carried by a space, one value per point unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum Decoration {
    Measure(Vec<f64>),
    Marks(Vec<f64>),
    /// A finite sequence of point indices; not indexed by point.
    Trajectory(Vec<usize>),
    Subset(Vec<bool>),
}

impl Decoration {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Decoration::Measure(_) => "measure",
            Decoration::Marks(_) => "marks",
            Decoration::Trajectory(_) => "trajectory",
            Decoration::Subset(_) => "subset",
        }
    }

    fn relabeled(&self, perm: &[usize]) -> Decoration {
        // perm[old] = new
        fn permute<T: Copy + Default>(v: &[T], perm: &[usize]) -> Vec<T> {
            let mut out = vec![T::default(); v.len()];
            for (old, &x) in v.iter().enumerate() {
                out[perm[old]] = x;
            }
            out
        }
        match self {
            Decoration::Measure(v) => Decoration::Measure(permute(v, perm)),
            Decoration::Marks(v) => Decoration::Marks(permute(v, perm)),
            Decoration::Subset(v) => Decoration::Subset(permute(v, perm)),
            Decoration::Trajectory(t) => Decoration::Trajectory(t.iter().map(|&i| perm[i]).collect()),
        }
    }
}

/// Selects either the base measure or a named measure decoration.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeasureRef {
    Base,
    Named(String),
}

impl MeasureRef {
    /// `"mu"` names the base measure; anything else is a decoration name.
    pub fn parse(s: &str) -> MeasureRef {
        if s == "mu" {
            MeasureRef::Base
        } else {
            MeasureRef::Named(s.to_string())
        }
    }

    pub fn values<'a>(&self, space: &'a FiniteRmmSpace) -> Result<&'a [f64]> {
        match self {
            MeasureRef::Base => Ok(space.mu()),
            MeasureRef::Named(name) => space.measure(name),
        }
    }
}

impl std::fmt::Display for MeasureRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeasureRef::Base => f.write_str("mu"),
            MeasureRef::Named(n) => f.write_str(n),
        }
    }
}

/// On-disk representation of a space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceFile {
    pub n: usize,
    pub dist: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub root: usize,
    #[serde(default)]
    pub decorations: BTreeMap<String, Decoration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceFile", into = "SpaceFile")]
pub struct FiniteRmmSpace {
    n: usize,
    dist: Arc<[f64]>,
    mu: Arc<[f64]>,
    root: usize,
    decorations: Arc<BTreeMap<String, Decoration>>,
}

impl TryFrom<SpaceFile> for FiniteRmmSpace {
    type Error = Error;

    fn try_from(f: SpaceFile) -> Result<Self> {
        if f.dist.len() != f.n || f.dist.iter().any(|row| row.len() != f.n) {
            return Err(Error::InvalidSpace(format!("dist must be {0}x{0}", f.n)));
        }
        let flat: Vec<f64> = f.dist.into_iter().flatten().collect();
        let mut s = FiniteRmmSpace::from_raw(f.n, flat, f.mu, f.root)?;
        for (name, d) in f.decorations {
            s = s.with_decoration(name, d)?;
        }
        Ok(s)
    }
}

impl From<FiniteRmmSpace> for SpaceFile {
    fn from(s: FiniteRmmSpace) -> Self {
        SpaceFile {
            n: s.n,
            dist: s.dist.chunks(s.n).map(|r| r.to_vec()).collect(),
            mu: s.mu.to_vec(),
            root: s.root,
            decorations: (*s.decorations).clone(),
        }
    }
}

impl FiniteRmmSpace {
    /// Builds a space and checks every invariant.
    pub fn new(dist: Vec<Vec<f64>>, mu: Vec<f64>, root: usize) -> Result<Self> {
        let n = mu.len();
        let s = SpaceFile { n, dist, mu, root, decorations: BTreeMap::new() };
        let space = FiniteRmmSpace::try_from(s)?;
        space.ensure_valid()?;
        Ok(space)
    }

    /// Builds a space from a row-major distance matrix, checking shapes only.
    /// Use [`validate`] for the metric and measure invariants.
    pub fn from_raw(n: usize, dist: Vec<f64>, mu: Vec<f64>, root: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSpace("a space needs at least one point".into()));
        }
        if dist.len() != n * n {
            return Err(Error::InvalidSpace(format!("dist must be {0}x{0}", n)));
        }
        if mu.len() != n {
            return Err(Error::InvalidSpace(format!("mu has length {}, expected {}", mu.len(), n)));
        }
        if root >= n {
            return Err(Error::IndexOutOfRange { index: root, n });
        }
        Ok(FiniteRmmSpace {
            n,
            dist: dist.into(),
            mu: mu.into(),
            root,
            decorations: Arc::new(BTreeMap::new()),
        })
    }

    /// Graph metric of an unweighted connected graph, counting measure, root 0.
    pub fn from_graph(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::IndexOutOfRange { index: u.max(v), n });
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        let mut dist = vec![f64::INFINITY; n * n];
        let mut queue = VecDeque::new();
        for s in 0..n {
            dist[s * n + s] = 0.0;
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                let du = dist[s * n + u];
                for &v in &adj[u] {
                    if dist[s * n + v].is_infinite() {
                        dist[s * n + v] = du + 1.0;
                        queue.push_back(v);
                    }
                }
            }
        }
        if dist.iter().any(|d| d.is_infinite()) {
            return Err(Error::InvalidSpace("graph is not connected".into()));
        }
        FiniteRmmSpace::from_raw(n, dist, vec![1.0; n], 0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self, u: usize, v: usize) -> f64 {
        self.dist[u * self.n + v]
    }

    pub fn dist_row(&self, u: usize) -> &[f64] {
        &self.dist[u * self.n..(u + 1) * self.n]
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn total_mass(&self) -> f64 {
        self.mu.iter().sum()
    }

    pub fn diameter(&self) -> f64 {
        self.dist.iter().cloned().fold(0.0, f64::max)
    }

    pub fn decorations(&self) -> &BTreeMap<String, Decoration> {
        &self.decorations
    }

    pub fn decoration(&self, name: &str) -> Result<&Decoration> {
        self.decorations.get(name).ok_or_else(|| Error::MissingDecoration(name.to_string()))
    }

    pub fn measure(&self, name: &str) -> Result<&[f64]> {
        match self.decoration(name)? {
            Decoration::Measure(v) => Ok(v),
            _ => Err(Error::DecorationKind { name: name.into(), expected: "measure" }),
        }
    }

    pub fn marks(&self, name: &str) -> Result<&[f64]> {
        match self.decoration(name)? {
            Decoration::Marks(v) => Ok(v),
            _ => Err(Error::DecorationKind { name: name.into(), expected: "marks" }),
        }
    }

    pub fn subset(&self, name: &str) -> Result<&[bool]> {
        match self.decoration(name)? {
            Decoration::Subset(v) => Ok(v),
            _ => Err(Error::DecorationKind { name: name.into(), expected: "subset" }),
        }
    }

    /// Adds or replaces a decoration. Per-point decorations must have length n
    /// and trajectories must reference valid points.
    pub fn with_decoration(&self, name: impl Into<String>, d: Decoration) -> Result<Self> {
        let name = name.into();
        let len_ok = match &d {
            Decoration::Measure(v) | Decoration::Marks(v) => v.len() == self.n,
            Decoration::Subset(v) => v.len() == self.n,
            Decoration::Trajectory(t) => t.iter().all(|&i| i < self.n),
        };
        if !len_ok {
            return Err(Error::InvalidSpace(format!("decoration `{name}` does not fit a space of {} points", self.n)));
        }
        let mut out = self.clone();
        Arc::make_mut(&mut out.decorations).insert(name, d);
        Ok(out)
    }

    pub fn without_decoration(&self, name: &str) -> Self {
        let mut out = self.clone();
        if out.decorations.contains_key(name) {
            Arc::make_mut(&mut out.decorations).remove(name);
        }
        out
    }

    pub fn without_decorations(&self) -> Self {
        let mut out = self.clone();
        out.decorations = Arc::new(BTreeMap::new());
        out
    }

    /// Same space with a different base measure.
    pub fn with_measure(&self, mu: Vec<f64>) -> Result<Self> {
        if mu.len() != self.n {
            return Err(Error::InvalidSpace(format!("mu has length {}, expected {}", mu.len(), self.n)));
        }
        let mut out = self.clone();
        out.mu = mu.into();
        Ok(out)
    }

    /// Exchanges the base measure with the measure decoration `name`.
    pub fn swap_measure(&self, name: &str) -> Result<Self> {
        let phi = self.measure(name)?.to_vec();
        let mut out = self.with_decoration(name, Decoration::Measure(self.mu.to_vec()))?;
        out.mu = phi.into();
        Ok(out)
    }

    /// Same space rooted at `j`.
    pub fn reroot(&self, j: usize) -> Result<Self> {
        if j >= self.n {
            return Err(Error::IndexOutOfRange { index: j, n: self.n });
        }
        Ok(self.rooted_at(j))
    }

    /// Unchecked [`reroot`](Self::reroot) for indices already known to be valid.
    pub(crate) fn rooted_at(&self, j: usize) -> Self {
        let mut out = self.clone();
        out.root = j;
        out
    }

    /// Relabels points: old point `i` becomes new point `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidParameter("relabeling is not a permutation".into()));
        }
        let mut dist = vec![0.0; n * n];
        let mut mu = vec![0.0; n];
        for i in 0..n {
            mu[perm[i]] = self.mu[i];
            for j in 0..n {
                dist[perm[i] * n + perm[j]] = self.d(i, j);
            }
        }
        let decorations = self.decorations.iter().map(|(k, d)| (k.clone(), d.relabeled(perm))).collect();
        Ok(FiniteRmmSpace {
            n,
            dist: dist.into(),
            mu: mu.into(),
            root: perm[self.root],
            decorations: Arc::new(decorations),
        })
    }

    /// Returns an error listing all violations, if any.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpace(v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")))
        }
    }

    /// Number of points at distance exactly 1 (graph degree for graph metrics).
    pub fn degree(&self, u: usize) -> usize {
        self.dist_row(u).iter().filter(|&&d| (d - 1.0).abs() <= MATRIX_TOL).count()
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|u| self.degree(u) as f64).collect()
    }

    /// Base-measure mass of the closed ball of radius `r` around `u`.
    pub fn ball_mass(&self, u: usize, r: f64) -> f64 {
        self.dist_row(u)
            .iter()
            .zip(self.mu.iter())
            .filter(|(&d, _)| d <= r + MATRIX_TOL)
            .map(|(_, &m)| m)
            .sum()
    }
}

/// One failed invariant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub invariant: &'static str,
    pub indices: Vec<usize>,
    pub decoration: Option<String>,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.invariant)?;
        if let Some(d) = &self.decoration {
            write!(f, " in `{d}`")?;
        }
        match self.indices.as_slice() {
            [] => Ok(()),
            [i] => write!(f, " at {i}"),
            [i, j] => write!(f, " at ({i},{j})"),
            more => write!(f, " at {more:?}"),
        }
    }
}

/// Checks every space invariant and reports the failures; empty means valid.
pub fn validate(space: &FiniteRmmSpace) -> Vec<Violation> {
    let n = space.n;
    let mut out = Vec::new();
    let v = |invariant, indices| Violation { invariant, indices, decoration: None };
    for i in 0..n {
        let dii = space.d(i, i);
        if !dii.is_finite() || dii.abs() > MATRIX_TOL {
            out.push(v("nonzero diagonal", vec![i]));
        }
        for j in (i + 1)..n {
            let (a, b) = (space.d(i, j), space.d(j, i));
            if !a.is_finite() || !b.is_finite() {
                out.push(v("non-finite distance", vec![i, j]));
                continue;
            }
            if (a - b).abs() > MATRIX_TOL {
                out.push(v("asymmetry", vec![i, j]));
            }
            if a <= MATRIX_TOL || b <= MATRIX_TOL {
                out.push(v("non-positive distance", vec![i, j]));
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = space.d(i, j);
            if (0..n).any(|k| k != i && k != j && space.d(i, k) + space.d(k, j) < dij - MATRIX_TOL) {
                out.push(v("triangle inequality", vec![i, j]));
            }
        }
    }
    for (i, &m) in space.mu.iter().enumerate() {
        if !m.is_finite() || m < 0.0 {
            out.push(v("negative or non-finite mass", vec![i]));
        }
    }
    if space.mu.iter().all(|&m| m <= 0.0) {
        out.push(v("zero measure", vec![]));
    }
    if space.root >= n {
        out.push(v("root out of range", vec![space.root]));
    }
    for (name, d) in space.decorations.iter() {
        let bad: Vec<usize> = match d {
            Decoration::Measure(x) => {
                x.iter().enumerate().filter(|(_, &a)| !a.is_finite() || a < 0.0).map(|(i, _)| i).collect()
            }
            Decoration::Marks(x) => x
                .iter()
                .enumerate()
                .filter(|(_, &a)| !(0.0..=1.0).contains(&a))
                .map(|(i, _)| i)
                .collect(),
            Decoration::Trajectory(t) => t.iter().copied().filter(|&i| i >= n).collect(),
            Decoration::Subset(_) => vec![],
        };
        if !bad.is_empty() {
            out.push(Violation {
                invariant: match d {
                    Decoration::Measure(_) => "negative or non-finite measure value",
                    Decoration::Marks(_) => "mark outside [0,1]",
                    _ => "trajectory index out of range",
                },
                indices: bad,
                decoration: Some(name.clone()),
            });
        }
    }
    out
}

/// How to combine the two factor metrics of a product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricRule {
    Max,
    Sum,
}

/// Product space with the product measure, rooted at the pair of roots.
/// Point `(x, y)` gets index `x * b.n() + y`. Decorations are dropped.
pub fn product_space(a: &FiniteRmmSpace, b: &FiniteRmmSpace, rule: MetricRule) -> Result<FiniteRmmSpace> {
    product_space_capped(a, b, rule, DEFAULT_PRODUCT_CAP)
}

pub fn product_space_capped(
    a: &FiniteRmmSpace,
    b: &FiniteRmmSpace,
    rule: MetricRule,
    cap: usize,
) -> Result<FiniteRmmSpace> {
    let n = a.n.checked_mul(b.n).filter(|&n| n <= cap).ok_or(Error::SizeLimit { n: a.n.saturating_mul(b.n), cap })?;
    let mut dist = vec![0.0; n * n];
    let mut mu = vec![0.0; n];
    for x in 0..a.n {
        for y in 0..b.n {
            let p = x * b.n + y;
            mu[p] = a.mu[x] * b.mu[y];
            for x2 in 0..a.n {
                for y2 in 0..b.n {
                    let (da, db) = (a.d(x, x2), b.d(y, y2));
                    dist[p * n + x2 * b.n + y2] = match rule {
                        MetricRule::Max => da.max(db),
                        MetricRule::Sum => da + db,
                    };
                }
            }
        }
    }
    FiniteRmmSpace::from_raw(n, dist, mu, a.root * b.n + b.root)
}

/// Biases the base measure by a root functional: the new mass at `y` is
/// `b(space rooted at y) * mu[y]`.
pub fn bias_measure<F>(space: &FiniteRmmSpace, b: F) -> Result<FiniteRmmSpace>
where
    F: Fn(&FiniteRmmSpace) -> f64,
{
    let mut mu = Vec::with_capacity(space.n);
    for y in 0..space.n {
        let by = b(&space.rooted_at(y));
        if !by.is_finite() {
            return Err(Error::NonFinite(format!("bias at point {y}")));
        }
        if by < 0.0 {
            return Err(Error::Negative(format!("bias at point {y}")));
        }
        mu.push(by * space.mu[y]);
    }
    space.with_measure(mu)
}
