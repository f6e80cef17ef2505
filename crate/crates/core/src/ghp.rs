//! Correspondence-based Gromov-Hausdorff-Prokhorov surrogate for finite
//! rooted measured spaces.
//!
//! For a correspondence `R` containing the root pair, the value is
//! `max(dis(R) / 2, eps(R))`, where `eps(R)` is the least total marginal
//! defect `|pi_1 a - mu_A| + |pi_2 a - mu_B|` over nonnegative `a` supported
//! on `R`. The distance is the minimum over searched correspondences,
//! rounded up to a grid.
//!
//! This is a surrogate: no bi-Lipschitz comparison with other metrizations
//! of the GHP topology is claimed.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{cycle, path, uniform_tree};
use crate::seed::{derive, rng};
use crate::space::FiniteRmmSpace;

/// Largest side handled by exhaustive search and by the brute-force oracle.
pub const EXHAUSTIVE_CAP: usize = 5;
pub const DEFAULT_GRID: f64 = 1e-4;
pub const DEFAULT_BUDGET: u64 = 100_000;

const FLOW_EPS: f64 = 1e-14;
const ROUND_SLACK: f64 = 1e-9;

/// Root-respecting full relation between the points of two spaces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Correspondence {
    pub pairs: Vec<(usize, usize)>,
}

impl Correspondence {
    /// Checks the root pair and fullness, then sorts the pairs.
    pub fn new(a: &FiniteRmmSpace, b: &FiniteRmmSpace, mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        pairs.sort_unstable();
        pairs.dedup();
        for &(x, y) in &pairs {
            if x >= a.n() {
                return Err(Error::IndexOutOfRange { index: x, n: a.n() });
            }
            if y >= b.n() {
                return Err(Error::IndexOutOfRange { index: y, n: b.n() });
            }
        }
        if pairs.binary_search(&(a.root(), b.root())).is_err() {
            return Err(Error::InvalidParameter("correspondence misses the root pair".into()));
        }
        let mut left = vec![false; a.n()];
        let mut right = vec![false; b.n()];
        for &(x, y) in &pairs {
            left[x] = true;
            right[y] = true;
        }
        if left.iter().chain(&right).any(|c| !c) {
            return Err(Error::InvalidParameter("correspondence is not full".into()));
        }
        Ok(Correspondence { pairs })
    }

    pub fn distortion(&self, a: &FiniteRmmSpace, b: &FiniteRmmSpace) -> f64 {
        distortion(a, b, &self.pairs)
    }

    pub fn transpose(&self) -> Correspondence {
        let mut pairs: Vec<_> = self.pairs.iter().map(|&(x, y)| (y, x)).collect();
        pairs.sort_unstable();
        Correspondence { pairs }
    }

    /// Distance between `x` in A and `y` in B in the gluing induced by the
    /// correspondence: related points sit `dis / 2` apart.
    pub fn glued_distance(&self, a: &FiniteRmmSpace, b: &FiniteRmmSpace, x: usize, y: usize) -> f64 {
        let half = self.distortion(a, b) / 2.0;
        self.pairs
            .iter()
            .map(|&(x2, y2)| a.d(x, x2) + half + b.d(y2, y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Nonnegative matrix on `points(A) x points(B)` with a claimed defect bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproxCoupling {
    pub alpha: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl ApproxCoupling {
    /// Left-hand side of the three-term bound, with distances measured in
    /// the gluing induced by `corr`.
    pub fn defect(&self, a: &FiniteRmmSpace, b: &FiniteRmmSpace, corr: &Correspondence) -> f64 {
        let mut total = 0.0;
        for x in 0..a.n() {
            let row: f64 = self.alpha[x].iter().sum();
            total += (row - a.mu()[x]).abs();
        }
        for y in 0..b.n() {
            let col: f64 = self.alpha.iter().map(|r| r[y]).sum();
            total += (col - b.mu()[y]).abs();
        }
        for x in 0..a.n() {
            for y in 0..b.n() {
                let w = self.alpha[x][y];
                if w > 0.0 && corr.glued_distance(a, b, x, y) > self.epsilon {
                    total += w;
                }
            }
        }
        total
    }

    pub fn is_valid(&self, a: &FiniteRmmSpace, b: &FiniteRmmSpace, corr: &Correspondence) -> bool {
        self.defect(a, b, corr) <= self.epsilon + ROUND_SLACK
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GhpOptions {
    /// Maximum number of correspondence evaluations.
    pub budget: u64,
    pub grid: f64,
}

impl Default for GhpOptions {
    fn default() -> Self {
        GhpOptions { budget: DEFAULT_BUDGET, grid: DEFAULT_GRID }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GhpResult {
    /// Surrogate distance bound, rounded up to the grid.
    pub value: f64,
    /// Unrounded value of the witness.
    pub raw: f64,
    pub distortion: f64,
    pub mass_defect: f64,
    pub correspondence: Correspondence,
    pub coupling: ApproxCoupling,
    /// True when every candidate correspondence was covered.
    pub exhaustive: bool,
    pub budget_exhausted: bool,
    pub evaluations: u64,
}

/// Rounds `v` up to a multiple of `grid`, forgiving float noise.
pub fn round_up(v: f64, grid: f64) -> f64 {
    let steps = ((v - ROUND_SLACK) / grid).ceil().max(0.0);
    (steps * grid * 1e12).round() / 1e12
}

fn distortion(a: &FiniteRmmSpace, b: &FiniteRmmSpace, pairs: &[(usize, usize)]) -> f64 {
    let mut dis = 0.0f64;
    for (i, &(x, y)) in pairs.iter().enumerate() {
        for &(x2, y2) in &pairs[i + 1..] {
            dis = dis.max((a.d(x, x2) - b.d(y, y2)).abs());
        }
    }
    dis
}

fn pair_gap(a: &FiniteRmmSpace, b: &FiniteRmmSpace, p: (usize, usize), q: (usize, usize)) -> f64 {
    (a.d(p.0, q.0) - b.d(p.1, q.1)).abs()
}

/// Maximum flow from `mu_A` to `mu_B` through the edges of `pairs`
/// (Edmonds-Karp). Returns the flow value and the flow on each pair.
fn max_flow(mu_a: &[f64], mu_b: &[f64], pairs: &[(usize, usize)]) -> (f64, Vec<f64>) {
    let na = mu_a.len();
    let nb = mu_b.len();
    let nodes = na + nb + 2;
    let (s, t) = (0, nodes - 1);
    let mut cap = vec![0.0f64; nodes * nodes];
    let mut adj = vec![Vec::new(); nodes];
    let mut link = |cap: &mut Vec<f64>, u: usize, v: usize, c: f64| {
        if cap[u * nodes + v] == 0.0 && cap[v * nodes + u] == 0.0 {
            adj[u].push(v);
            adj[v].push(u);
        }
        cap[u * nodes + v] += c;
    };
    for (x, &m) in mu_a.iter().enumerate() {
        if m > 0.0 {
            link(&mut cap, s, 1 + x, m);
        }
    }
    for (y, &m) in mu_b.iter().enumerate() {
        if m > 0.0 {
            link(&mut cap, 1 + na + y, t, m);
        }
    }
    for &(x, y) in pairs {
        link(&mut cap, 1 + x, 1 + na + y, f64::INFINITY);
    }
    let mut flow = vec![0.0f64; nodes * nodes];
    let mut total = 0.0;
    loop {
        let mut prev = vec![usize::MAX; nodes];
        prev[s] = s;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            if u == t {
                break;
            }
            for &v in &adj[u] {
                if prev[v] == usize::MAX && cap[u * nodes + v] - flow[u * nodes + v] > FLOW_EPS {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[t] == usize::MAX {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = t;
        while v != s {
            let u = prev[v];
            push = push.min(cap[u * nodes + v] - flow[u * nodes + v]);
            v = u;
        }
        let mut v = t;
        while v != s {
            let u = prev[v];
            flow[u * nodes + v] += push;
            flow[v * nodes + u] -= push;
            v = u;
        }
        total += push;
    }
    let on_pairs = pairs.iter().map(|&(x, y)| flow[(1 + x) * nodes + 1 + na + y].max(0.0)).collect();
    (total, on_pairs)
}

/// Least marginal defect of a nonnegative matrix supported on `pairs`.
fn mass_defect(a: &FiniteRmmSpace, b: &FiniteRmmSpace, pairs: &[(usize, usize)]) -> (f64, Vec<f64>) {
    let (f, on_pairs) = max_flow(a.mu(), b.mu(), pairs);
    ((a.total_mass() + b.total_mass() - 2.0 * f).max(0.0), on_pairs)
}

#[derive(Clone, Debug)]
struct Candidate {
    raw: f64,
    dis: f64,
    defect: f64,
    pairs: Vec<(usize, usize)>,
}

fn evaluate(a: &FiniteRmmSpace, b: &FiniteRmmSpace, mut pairs: Vec<(usize, usize)>) -> Candidate {
    pairs.sort_unstable();
    let dis = distortion(a, b, &pairs);
    let (defect, _) = mass_defect(a, b, &pairs);
    Candidate { raw: (dis / 2.0).max(defect), dis, defect, pairs }
}

fn better(c: &Candidate, best: &Option<Candidate>) -> bool {
    match best {
        None => true,
        Some(b) => c.raw < b.raw || (c.raw == b.raw && c.pairs < b.pairs),
    }
}

fn finish(
    a: &FiniteRmmSpace,
    b: &FiniteRmmSpace,
    c: Candidate,
    grid: f64,
    exhaustive: bool,
    budget_exhausted: bool,
    evaluations: u64,
) -> GhpResult {
    let (_, on_pairs) = mass_defect(a, b, &c.pairs);
    let mut alpha = vec![vec![0.0; b.n()]; a.n()];
    for (&(x, y), &w) in c.pairs.iter().zip(&on_pairs) {
        alpha[x][y] = w;
    }
    let value = round_up(c.raw, grid);
    GhpResult {
        value,
        raw: c.raw,
        distortion: c.dis,
        mass_defect: c.defect,
        correspondence: Correspondence { pairs: c.pairs },
        coupling: ApproxCoupling { alpha, epsilon: value.max(c.raw) },
        exhaustive,
        budget_exhausted,
        evaluations,
    }
}

fn transposed(r: GhpResult) -> GhpResult {
    let nb = r.coupling.alpha.first().map_or(0, Vec::len);
    let alpha = (0..nb).map(|y| r.coupling.alpha.iter().map(|row| row[y]).collect()).collect();
    GhpResult {
        correspondence: r.correspondence.transpose(),
        coupling: ApproxCoupling { alpha, epsilon: r.coupling.epsilon },
        ..r
    }
}

fn check_inputs(a: &FiniteRmmSpace, b: &FiniteRmmSpace, opts: &GhpOptions) -> Result<()> {
    if opts.budget == 0 {
        return Err(Error::InvalidParameter("search budget must be positive".into()));
    }
    if !(opts.grid.is_finite() && opts.grid > 0.0) {
        return Err(Error::InvalidParameter(format!("grid must be positive, got {}", opts.grid)));
    }
    a.ensure_valid()?;
    b.ensure_valid()
}

/// Upper bound on the surrogate distance with a witness correspondence.
///
/// Spaces with at most [`EXHAUSTIVE_CAP`] points each are searched
/// exhaustively: an optimal correspondence can be grown to a maximal clique
/// of the pair-compatibility graph at its own distortion threshold, so it
/// suffices to scan maximal cliques for every threshold. Larger spaces use a
/// greedy seed and single-pair local search in both directions.
pub fn ghp_upper(a: &FiniteRmmSpace, b: &FiniteRmmSpace, opts: GhpOptions) -> Result<GhpResult> {
    check_inputs(a, b, &opts)?;
    if a.n() <= EXHAUSTIVE_CAP && b.n() <= EXHAUSTIVE_CAP {
        return Ok(clique_search(a, b, &opts));
    }
    let half = GhpOptions { budget: opts.budget.div_ceil(2), ..opts };
    let ab = local_search(a, b, &half);
    let ba = transposed(local_search(b, a, &half));
    let evaluations = ab.evaluations + ba.evaluations;
    let mut best = if ba.raw < ab.raw { ba } else { ab };
    best.evaluations = evaluations;
    Ok(best)
}

fn clique_search(a: &FiniteRmmSpace, b: &FiniteRmmSpace, opts: &GhpOptions) -> GhpResult {
    let (na, nb) = (a.n(), b.n());
    let pairs: Vec<(usize, usize)> = (0..na).flat_map(|x| (0..nb).map(move |y| (x, y))).collect();
    let root = pairs.iter().position(|&p| p == (a.root(), b.root())).expect("root pair");
    let m = pairs.len();
    let mut gaps = vec![0.0; m * m];
    let mut thresholds = vec![0.0];
    for i in 0..m {
        for j in 0..m {
            gaps[i * m + j] = pair_gap(a, b, pairs[i], pairs[j]);
            thresholds.push(gaps[i * m + j]);
        }
    }
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let all_rows: u64 = (1u64 << na) - 1;
    let all_cols: u64 = (1u64 << nb) - 1;
    let mut best: Option<Candidate> = None;
    let mut evaluations = 0u64;
    let mut exhausted = false;
    'outer: for &t in &thresholds {
        if let Some(b) = &best {
            if t / 2.0 >= b.raw {
                break;
            }
        }
        let nbr: Vec<u64> = (0..m)
            .map(|i| (0..m).filter(|&j| j != i && gaps[i * m + j] <= t).fold(0u64, |acc, j| acc | (1 << j)))
            .collect();
        let mut cliques = Vec::new();
        bron_kerbosch(&nbr, 1 << root, nbr[root], 0, &mut cliques);
        for c in cliques {
            let chosen: Vec<(usize, usize)> = (0..m).filter(|&i| c >> i & 1 == 1).map(|i| pairs[i]).collect();
            let rows = chosen.iter().fold(0u64, |acc, &(x, _)| acc | (1 << x));
            let cols = chosen.iter().fold(0u64, |acc, &(_, y)| acc | (1 << y));
            if rows != all_rows || cols != all_cols {
                continue;
            }
            if evaluations >= opts.budget {
                exhausted = true;
                break 'outer;
            }
            evaluations += 1;
            let cand = evaluate(a, b, chosen);
            if better(&cand, &best) {
                best = Some(cand);
            }
        }
    }
    let best = best.unwrap_or_else(|| evaluate(a, b, pairs.clone()));
    finish(a, b, best, opts.grid, !exhausted, exhausted, evaluations)
}

fn bron_kerbosch(nbr: &[u64], r: u64, p: u64, x: u64, out: &mut Vec<u64>) {
    if p == 0 {
        if x == 0 {
            out.push(r);
        }
        return;
    }
    let pivot = (p | x).trailing_zeros() as usize;
    let mut cand = p & !nbr[pivot];
    let (mut p, mut x) = (p, x);
    while cand != 0 {
        let v = cand.trailing_zeros() as usize;
        cand &= cand - 1;
        bron_kerbosch(nbr, r | (1 << v), p & nbr[v], x & nbr[v], out);
        p &= !(1 << v);
        x |= 1 << v;
    }
}

/// Greedy distance-profile matching: points of A in order of distance to
/// the root each take the partner of least added distortion, then every
/// uncovered point of B is attached the same way.
fn greedy_seed(a: &FiniteRmmSpace, b: &FiniteRmmSpace) -> Vec<(usize, usize)> {
    let mut pairs = vec![(a.root(), b.root())];
    let mut order: Vec<usize> = (0..a.n()).filter(|&x| x != a.root()).collect();
    order.sort_by(|&x, &y| a.d(a.root(), x).total_cmp(&a.d(a.root(), y)).then(x.cmp(&y)));
    let added = |pairs: &[(usize, usize)], p: (usize, usize)| {
        pairs.iter().map(|&q| pair_gap(a, b, p, q)).fold(0.0, f64::max)
    };
    for x in order {
        let y = (0..b.n())
            .min_by(|&y1, &y2| {
                added(&pairs, (x, y1))
                    .total_cmp(&added(&pairs, (x, y2)))
                    .then((a.mu()[x] - b.mu()[y1]).abs().total_cmp(&(a.mu()[x] - b.mu()[y2]).abs()))
                    .then(y1.cmp(&y2))
            })
            .expect("nonempty space");
        pairs.push((x, y));
    }
    let mut covered = vec![false; b.n()];
    for &(_, y) in &pairs {
        covered[y] = true;
    }
    let mut missing: Vec<usize> = (0..b.n()).filter(|&y| !covered[y]).collect();
    missing.sort_by(|&y, &z| b.d(b.root(), y).total_cmp(&b.d(b.root(), z)).then(y.cmp(&z)));
    for y in missing {
        let x = (0..a.n())
            .min_by(|&x1, &x2| added(&pairs, (x1, y)).total_cmp(&added(&pairs, (x2, y))).then(x1.cmp(&x2)))
            .expect("nonempty space");
        pairs.push((x, y));
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

fn is_full(na: usize, nb: usize, pairs: &[(usize, usize)]) -> bool {
    let mut left = vec![false; na];
    let mut right = vec![false; nb];
    for &(x, y) in pairs {
        left[x] = true;
        right[y] = true;
    }
    left.iter().chain(&right).all(|&c| c)
}

fn local_search(a: &FiniteRmmSpace, b: &FiniteRmmSpace, opts: &GhpOptions) -> GhpResult {
    let (na, nb) = (a.n(), b.n());
    let root = (a.root(), b.root());
    let mut current = evaluate(a, b, greedy_seed(a, b));
    let mut evaluations = 1u64;
    let mut exhausted = false;
    loop {
        let moves: Vec<(usize, usize)> = (0..na).flat_map(|x| (0..nb).map(move |y| (x, y))).collect();
        let remaining = opts.budget.saturating_sub(evaluations);
        if remaining == 0 {
            exhausted = true;
            break;
        }
        let moves = if (moves.len() as u64) > remaining {
            exhausted = true;
            &moves[..remaining as usize]
        } else {
            &moves[..]
        };
        evaluations += moves.len() as u64;
        let cur = &current;
        let found = moves
            .par_iter()
            .filter_map(|&p| {
                if p == root {
                    return None;
                }
                let mut pairs = cur.pairs.clone();
                match pairs.binary_search(&p) {
                    Ok(i) => {
                        pairs.remove(i);
                        if !is_full(na, nb, &pairs) {
                            return None;
                        }
                    }
                    Err(i) => {
                        let extra = cur.pairs.iter().map(|&q| pair_gap(a, b, p, q)).fold(0.0, f64::max);
                        if extra / 2.0 >= cur.raw {
                            return None;
                        }
                        pairs.insert(i, p);
                    }
                }
                let dis = distortion(a, b, &pairs);
                if dis / 2.0 >= cur.raw {
                    return None;
                }
                let cand = evaluate(a, b, pairs);
                (cand.raw < cur.raw - FLOW_EPS).then_some(cand)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .min_by(|x, y| x.raw.total_cmp(&y.raw).then_with(|| x.pairs.cmp(&y.pairs)));
        match found {
            Some(c) => current = c,
            None => break,
        }
        if exhausted {
            break;
        }
    }
    finish(a, b, current, opts.grid, false, exhausted, evaluations)
}

/// Exhaustive oracle: every full root-respecting correspondence is visited
/// (with distortion pruning), and each marginal defect is solved as a
/// linear program.
pub fn ghp_bruteforce(a: &FiniteRmmSpace, b: &FiniteRmmSpace, grid: f64) -> Result<f64> {
    let cap = EXHAUSTIVE_CAP;
    if a.n() > cap || b.n() > cap {
        return Err(Error::SizeLimit { n: a.n().max(b.n()), cap });
    }
    check_inputs(a, b, &GhpOptions { budget: 1, grid })?;
    let pairs: Vec<(usize, usize)> =
        (0..a.n()).flat_map(|x| (0..b.n()).map(move |y| (x, y))).filter(|&p| p != (a.root(), b.root())).collect();
    let mut state = Brute { a, b, pairs: &pairs, best: f64::INFINITY, chosen: vec![(a.root(), b.root())] };
    state.visit(0, 0.0)?;
    Ok(round_up(state.best, grid))
}

struct Brute<'a> {
    a: &'a FiniteRmmSpace,
    b: &'a FiniteRmmSpace,
    pairs: &'a [(usize, usize)],
    best: f64,
    chosen: Vec<(usize, usize)>,
}

impl Brute<'_> {
    fn visit(&mut self, i: usize, dis: f64) -> Result<()> {
        if dis / 2.0 >= self.best {
            return Ok(());
        }
        if i == self.pairs.len() {
            if is_full(self.a.n(), self.b.n(), &self.chosen) {
                let eps = lp_defect(self.a, self.b, &self.chosen)?;
                self.best = self.best.min((dis / 2.0).max(eps));
            }
            return Ok(());
        }
        let p = self.pairs[i];
        let extra = self.chosen.iter().map(|&q| pair_gap(self.a, self.b, p, q)).fold(dis, f64::max);
        self.chosen.push(p);
        self.visit(i + 1, extra)?;
        self.chosen.pop();
        self.visit(i + 1, dis)
    }
}

fn lp_defect(a: &FiniteRmmSpace, b: &FiniteRmmSpace, pairs: &[(usize, usize)]) -> Result<f64> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let alpha: Vec<_> = pairs.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    for x in 0..a.n() {
        let up = lp.add_var(1.0, (0.0, f64::INFINITY));
        let down = lp.add_var(1.0, (0.0, f64::INFINITY));
        let mut expr: Vec<_> =
            pairs.iter().zip(&alpha).filter(|((px, _), _)| *px == x).map(|(_, &v)| (v, 1.0)).collect();
        expr.extend([(up, -1.0), (down, 1.0)]);
        lp.add_constraint(expr, ComparisonOp::Eq, a.mu()[x]);
    }
    for y in 0..b.n() {
        let up = lp.add_var(1.0, (0.0, f64::INFINITY));
        let down = lp.add_var(1.0, (0.0, f64::INFINITY));
        let mut expr: Vec<_> =
            pairs.iter().zip(&alpha).filter(|((_, py), _)| *py == y).map(|(_, &v)| (v, 1.0)).collect();
        expr.extend([(up, -1.0), (down, 1.0)]);
        lp.add_constraint(expr, ComparisonOp::Eq, b.mu()[y]);
    }
    let sol = lp.solve().map_err(|e| Error::InvalidParameter(format!("linear program failed: {e}")))?;
    Ok(sol.objective().max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingModel {
    Path,
    Cycle,
    UniformTree,
}

impl std::str::FromStr for ScalingModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(ScalingModel::Path),
            "cycle" => Ok(ScalingModel::Cycle),
            "uniform_tree" | "tree" => Ok(ScalingModel::UniformTree),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

/// How a size-`n` model is rescaled before comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingRule {
    /// Metric and measure both divided by `n`.
    #[default]
    Linear,
    /// Metric divided by `sqrt(n)`, measure by `n`.
    Diffusive,
}

impl std::str::FromStr for ScalingRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScalingRule::Linear),
            "diffusive" => Ok(ScalingRule::Diffusive),
            other => Err(Error::InvalidParameter(format!("unknown scaling rule {other:?}"))),
        }
    }
}

pub fn rescaled_model(model: ScalingModel, n: usize, rule: ScalingRule, seed: u64) -> Result<FiniteRmmSpace> {
    let base = match model {
        ScalingModel::Path => path(n)?,
        ScalingModel::Cycle => cycle(n)?,
        ScalingModel::UniformTree => uniform_tree(n, &mut rng(derive(seed, n as u64)))?,
    };
    let metric = match rule {
        ScalingRule::Linear => 1.0 / n as f64,
        ScalingRule::Diffusive => 1.0 / (n as f64).sqrt(),
    };
    let dist = (0..n).flat_map(|u| base.dist_row(u).iter().map(move |d| d * metric)).collect();
    let mu = base.mu().iter().map(|m| m / n as f64).collect();
    FiniteRmmSpace::from_raw(n, dist, mu, base.root())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub next: usize,
    pub distance: f64,
    pub exhaustive: bool,
    pub budget_exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingTable {
    pub model: ScalingModel,
    pub rule: ScalingRule,
    pub rows: Vec<ScalingRow>,
    /// Distances strictly decrease down the table.
    pub decreasing: bool,
}

impl ScalingTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,next,distance,exhaustive,budget_exhausted\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.n, r.next, r.distance, r.exhaustive, r.budget_exhausted));
        }
        out
    }
}

/// Distances between consecutive rescaled models. With doubling sizes each
/// row compares `s_n` to `s_2n`.
pub fn scaling_cauchy_demo(
    model: ScalingModel,
    sizes: &[usize],
    rule: ScalingRule,
    opts: GhpOptions,
    seed: u64,
) -> Result<ScalingTable> {
    if sizes.len() < 2 {
        return Err(Error::InvalidParameter("need at least two sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter("sizes must be ascending".into()));
    }
    let rows = sizes
        .windows(2)
        .map(|w| {
            let a = rescaled_model(model, w[0], rule, seed)?;
            let b = rescaled_model(model, w[1], rule, seed)?;
            let r = ghp_upper(&a, &b, opts)?;
            Ok(ScalingRow {
                n: w[0],
                next: w[1],
                distance: r.value,
                exhaustive: r.exhaustive,
                budget_exhausted: r.budget_exhausted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let decreasing = rows.windows(2).all(|w| w[1].distance < w[0].distance);
    Ok(ScalingTable { model, rule, rows, decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn point(m: f64) -> FiniteRmmSpace {
        FiniteRmmSpace::new(vec![vec![0.0]], vec![m], 0).unwrap()
    }

    fn segment(len: f64) -> FiniteRmmSpace {
        FiniteRmmSpace::new(vec![vec![0.0, len], vec![len, 0.0]], vec![1.0, 1.0], 0).unwrap()
    }

    fn random_space(n: usize, seed: u64) -> FiniteRmmSpace {
        let mut r = rng(seed);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
        let dist = pts
            .iter()
            .map(|p| pts.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).collect())
            .collect();
        let mu = (0..n).map(|_| r.random_range(0.2..1.5)).collect();
        FiniteRmmSpace::new(dist, mu, r.random_range(0..n)).unwrap()
    }

    #[test]
    fn mass_gap_between_points() {
        let r = ghp_upper(&point(1.0), &point(2.0), GhpOptions::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9);
        assert!((ghp_bruteforce(&point(1.0), &point(2.0), DEFAULT_GRID).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn segment_stretch() {
        let r = ghp_upper(&segment(1.0), &segment(1.2), GhpOptions::default()).unwrap();
        assert!((r.value - 0.1).abs() < 1e-9, "{}", r.value);
        assert!(r.exhaustive);
    }

    #[test]
    fn zero_budget_is_an_error() {
        assert!(ghp_upper(&point(1.0), &point(1.0), GhpOptions { budget: 0, grid: 1e-4 }).is_err());
    }

    #[test]
    fn self_distance_zero_and_relabel() {
        for seed in 0..5 {
            let a = random_space(4, seed);
            assert_eq!(ghp_upper(&a, &a, GhpOptions::default()).unwrap().value, 0.0);
            let b = a.relabel(&[2, 0, 3, 1]).unwrap();
            assert_eq!(ghp_upper(&a, &b, GhpOptions::default()).unwrap().value, 0.0);
            assert_eq!(ghp_bruteforce(&a, &b, DEFAULT_GRID).unwrap(), 0.0);
        }
    }

    #[test]
    fn agrees_with_bruteforce_and_is_symmetric() {
        for seed in 0..8 {
            let a = random_space(1 + (seed as usize % 4), 100 + seed);
            let b = random_space(1 + (seed as usize * 7 % 4), 200 + seed);
            let up = ghp_upper(&a, &b, GhpOptions::default()).unwrap();
            let down = ghp_upper(&b, &a, GhpOptions::default()).unwrap();
            let brute = ghp_bruteforce(&a, &b, DEFAULT_GRID).unwrap();
            assert!((up.value - brute).abs() < 1e-9, "seed {seed}: {} vs {}", up.value, brute);
            assert!((up.value - down.value).abs() < 1e-9);
            assert!(up.coupling.is_valid(&a, &b, &up.correspondence));
        }
    }

    #[test]
    fn witness_is_a_correspondence() {
        let a = random_space(5, 9);
        let b = random_space(3, 10);
        let r = ghp_upper(&a, &b, GhpOptions::default()).unwrap();
        let c = Correspondence::new(&a, &b, r.correspondence.pairs.clone()).unwrap();
        assert!((c.distortion(&a, &b) - r.distortion).abs() < 1e-12);
    }

    #[test]
    fn path_table_decreases() {
        let t = scaling_cauchy_demo(ScalingModel::Path, &[4, 8, 16, 32], ScalingRule::Linear, GhpOptions::default(), 0)
            .unwrap();
        assert!(t.decreasing, "{:?}", t.rows);
        assert!(t.rows[2].distance <= 0.1);
        let same =
            scaling_cauchy_demo(ScalingModel::Cycle, &[8, 8, 8], ScalingRule::Linear, GhpOptions::default(), 0)
                .unwrap();
        assert!(same.rows.iter().all(|r| r.distance == 0.0));
    }

    #[test]
    fn max_flow_matches_marginals() {
        let (f, on) = max_flow(&[1.0, 2.0], &[1.5, 1.5], &[(0, 0), (1, 0), (1, 1)]);
        assert!((f - 3.0).abs() < 1e-12);
        assert!((on.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }
}
