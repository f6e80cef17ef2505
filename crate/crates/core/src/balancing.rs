//! Stable balancing transports between two measures and the extra-head
//! re-rooting demo.
//!
//! Preferences come from one total order on pairs: shorter distance first,
//! then the site's mark, then the centre's mark. Sites propose their
//! remaining mass to their best centre that has not turned them down;
//! centres keep the best proposals up to capacity.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::canon::point_ranks;
use crate::ensemble::RootedEnsemble;
use crate::error::{Error, Result};
use crate::palm::palm_ensemble_exact;
use crate::process::{apply_recipe, apply_recipe_ranked, NamedRecipe};
use crate::report::{MtpReport, DEFAULT_Z};
use crate::seed::{derive, derive_named, rng};
use crate::space::{Decoration, FiniteRmmSpace, MeasureRef, MATRIX_TOL};
use crate::stats::Estimate;
use crate::transport::{SquareMatrix, TransportFunction};

/// Decoration holding the tie-breaking marks.
pub const MARKS: &str = "marks";
/// Seed for marks generated when a space carries none.
pub const MARK_SEED: u64 = 0x4D41_524B;
/// Default number of resampling attempts per conditioned draw.
pub const RESAMPLE_BUDGET: u64 = 100_000;

const MASS_EPS: f64 = 1e-14;

/// Density `K` of a balancing transport: `k(x, .) = K(x, .) psi` is Markovian
/// for `phi`-a.e. `x` and `sum_x K(x, y) phi(x) = 1` for `psi`-a.e. `y`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportDensity {
    pub k: SquareMatrix,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi_name: String,
    pub psi_name: String,
    /// Marks used for tie-breaking.
    pub marks: Vec<f64>,
    /// Distance matrix of the underlying space (row-major).
    pub dist: Vec<f64>,
}

impl TransportDensity {
    pub fn n(&self) -> usize {
        self.k.n
    }

    /// Transported mass `K(x, y) phi(x) psi(y)`.
    pub fn allocation(&self, x: usize, y: usize) -> f64 {
        self.k.get(x, y) * self.phi[x] * self.psi[y]
    }

    /// Long-format CSV `row,col,value` of the nonzero entries, with the
    /// residuals in a commented footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for x in 0..self.n() {
            for y in 0..self.n() {
                let v = self.k.get(x, y);
                if v != 0.0 {
                    let _ = writeln!(out, "{x},{y},{v:e}");
                }
            }
        }
        let r = verify_balancing(self);
        let _ = writeln!(out, "# row_residual,{:e}", r.max_row_residual);
        let _ = writeln!(out, "# col_residual,{:e}", r.max_col_residual);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceReport {
    pub max_row_residual: f64,
    pub max_col_residual: f64,
    pub passed: bool,
}

/// Largest deviations from the two marginal conditions; passes at `1e-9`.
pub fn verify_balancing(td: &TransportDensity) -> BalanceReport {
    let n = td.n();
    let mut row: f64 = 0.0;
    let mut col: f64 = 0.0;
    for x in 0..n {
        if td.phi[x] > 0.0 {
            let s: f64 = (0..n).map(|y| td.k.get(x, y) * td.psi[y]).sum();
            row = row.max((s - 1.0).abs());
        }
    }
    for y in 0..n {
        if td.psi[y] > 0.0 {
            let s: f64 = (0..n).map(|x| td.k.get(x, y) * td.phi[x]).sum();
            col = col.max((s - 1.0).abs());
        }
    }
    BalanceReport { max_row_residual: row, max_col_residual: col, passed: row <= MATRIX_TOL && col <= MATRIX_TOL }
}

type PairKey = (i64, u64, u64);

fn pair_key(dist: &[f64], n: usize, marks: &[f64], x: usize, y: usize) -> PairKey {
    ((dist[x * n + y] / crate::canon::DEFAULT_GRID).round() as i64, marks[x].to_bits(), marks[y].to_bits())
}

/// Blocking pairs of an allocation and whether the scan covered every pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityCertificate {
    pub blocking_pairs: Vec<(usize, usize)>,
    pub exhausted: bool,
}

impl StabilityCertificate {
    pub fn is_stable(&self) -> bool {
        self.blocking_pairs.is_empty()
    }
}

/// Exhaustive scan: `(x, y)` blocks when `x` sends mass to some centre it
/// ranks below `y` while `y` either has spare capacity or receives mass from
/// some site it ranks below `x`.
pub fn blocking_pairs(td: &TransportDensity) -> StabilityCertificate {
    let n = td.n();
    let key = |x: usize, y: usize| pair_key(&td.dist, n, &td.marks, x, y);
    let alloc = |x: usize, y: usize| td.allocation(x, y);
    let tol = MATRIX_TOL * (1.0 + td.phi.iter().cloned().fold(0.0, f64::max));
    let mut out = Vec::new();
    for x in (0..n).filter(|&x| td.phi[x] > 0.0) {
        for y in (0..n).filter(|&y| td.psi[y] > 0.0) {
            let k = key(x, y);
            let x_wants = (0..n).any(|y2| alloc(x, y2) > tol && key(x, y2) > k);
            if !x_wants {
                continue;
            }
            let received: f64 = (0..n).map(|x2| alloc(x2, y)).sum();
            let y_wants = received < td.psi[y] - tol || (0..n).any(|x2| alloc(x2, y) > tol && key(x2, y) > k);
            if y_wants {
                out.push((x, y));
            }
        }
    }
    StabilityCertificate { blocking_pairs: out, exhausted: true }
}

fn marks_of(space: &FiniteRmmSpace) -> Result<Vec<f64>> {
    match space.marks(MARKS) {
        Ok(m) => Ok(m.to_vec()),
        Err(Error::MissingDecoration(_)) => {
            Ok(apply_recipe(space, &NamedRecipe::marks(MARKS), MARK_SEED)?.marks(MARKS)?.to_vec())
        }
        Err(e) => Err(e),
    }
}

/// Stable balancing transport from the measure `phi` to the measure `psi`
/// (either may be `mu`). Marks are read from the `marks` decoration or
/// generated with a fixed seed.
pub fn stable_transport(space: &FiniteRmmSpace, phi: &str, psi: &str) -> Result<TransportDensity> {
    let (pr, qr) = (MeasureRef::parse(phi), MeasureRef::parse(psi));
    let marks = marks_of(space)?;
    let mut td = stable_transport_values(space, pr.values(space)?, qr.values(space)?, &marks)?;
    td.phi_name = phi.to_string();
    td.psi_name = psi.to_string();
    Ok(td)
}

/// [`stable_transport`] on explicit mass vectors and marks.
pub fn stable_transport_values(space: &FiniteRmmSpace, phi: &[f64], psi: &[f64], marks: &[f64]) -> Result<TransportDensity> {
    let n = space.n();
    if phi.len() != n || psi.len() != n || marks.len() != n {
        return Err(Error::InvalidParameter("measure or mark vector length does not match the space".into()));
    }
    for (name, v) in [("phi", phi), ("psi", psi)] {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{name} at {i}")));
        }
        if let Some(i) = v.iter().position(|&x| x < 0.0) {
            return Err(Error::Negative(format!("{name} at {i}")));
        }
    }
    let (tp, tq): (f64, f64) = (phi.iter().sum(), psi.iter().sum());
    if tp == 0.0 || tq == 0.0 {
        return Err(Error::InvalidParameter(format!("degenerate transport between totals {tp} and {tq}")));
    }
    if (tp - tq).abs() > MATRIX_TOL {
        return Err(Error::UnequalTotals { source_total: tp, target_total: tq });
    }
    let dist: Vec<f64> = (0..n * n).map(|i| space.d(i / n, i % n)).collect();
    let key = |x: usize, y: usize| pair_key(&dist, n, marks, x, y);

    let sites: Vec<usize> = (0..n).filter(|&x| phi[x] > 0.0).collect();
    let centres: Vec<usize> = (0..n).filter(|&y| psi[y] > 0.0).collect();
    // each site's centres, best first
    let prefs: Vec<Vec<usize>> = (0..n)
        .map(|x| {
            let mut c = centres.clone();
            c.sort_by_key(|&y| key(x, y));
            c
        })
        .collect();
    let mut next = vec![0usize; n];
    let mut remaining: Vec<f64> = phi.to_vec();
    let mut held: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut queue: std::collections::VecDeque<usize> = sites.iter().copied().collect();
    let scale = tp.max(1.0);
    while let Some(x) = queue.pop_front() {
        while remaining[x] > MASS_EPS * scale && next[x] < prefs[x].len() {
            let y = prefs[x][next[x]];
            let amount = std::mem::replace(&mut remaining[x], 0.0);
            match held[y].iter_mut().find(|h| h.0 == x) {
                Some(h) => h.1 += amount,
                None => held[y].push((x, amount)),
            }
            held[y].sort_by_key(|h| key(h.0, y));
            // water-fill in preference order, reject the rest
            let mut room = psi[y];
            let mut rejected = Vec::new();
            for h in held[y].iter_mut() {
                let keep = h.1.min(room.max(0.0));
                if keep < h.1 {
                    rejected.push((h.0, h.1 - keep));
                }
                h.1 = keep;
                room -= keep;
            }
            held[y].retain(|h| h.1 > 0.0);
            for (x2, m) in rejected {
                remaining[x2] += m;
                // a centre that turned a site down never takes it back
                if prefs[x2][next[x2]..].first() == Some(&y) {
                    next[x2] += 1;
                }
                if x2 != x {
                    queue.push_back(x2);
                }
            }
        }
    }
    let mut k = SquareMatrix::zeros(n);
    for &y in &centres {
        for &(x, m) in &held[y] {
            k.set(x, y, m / (phi[x] * psi[y]));
        }
    }
    Ok(TransportDensity {
        k,
        phi: phi.to_vec(),
        psi: psi.to_vec(),
        phi_name: "phi".into(),
        psi_name: "psi".into(),
        marks: marks.to_vec(),
        dist,
    })
}

/// Outcome of the extra-head demo: one Monte-Carlo report per functional plus
/// the exact check that every re-rooted root is charged by `phi`.
#[derive(Clone, Debug, Serialize)]
pub struct ExtraHeadReport {
    pub reports: Vec<MtpReport>,
    pub target_count: usize,
    pub mean_attempts: f64,
    pub rerooted_in_support: bool,
}

impl ExtraHeadReport {
    pub fn passed(&self) -> bool {
        self.rerooted_in_support && self.reports.iter().all(MtpReport::passed)
    }
}

/// Name of the Bernoulli decoration in the extra-head demo.
pub const EXTRA_HEAD_PHI: &str = "phi";

fn conditioned_bernoulli(
    space: &FiniteRmmSpace,
    ranks: &[usize],
    p: f64,
    target: usize,
    seed: u64,
    budget: u64,
) -> Result<(FiniteRmmSpace, u64)> {
    let recipe = NamedRecipe::bernoulli(EXTRA_HEAD_PHI, p);
    for attempt in 0..budget {
        let s = apply_recipe_ranked(space, ranks, &recipe, derive(seed, attempt))?;
        let count: f64 = s.measure(EXTRA_HEAD_PHI)?.iter().sum();
        if count as usize == target {
            return Ok((s, attempt + 1));
        }
    }
    Err(Error::BudgetExhausted(format!("no Bernoulli draw with {target} points in {budget} attempts")))
}

/// Extra-head scheme on a space with root law proportional to `mu`:
/// `phi ~ Bernoulli(p)` conditioned on `phi(X) = round(p mu(X))`, then the
/// root moves to `z` with probability `K(o, z) phi(z)` where `K` is the
/// stable balancing density from `(phi(X) / mu(X)) mu` to `phi`. The
/// re-rooted statistics are compared with the Palm law of `phi` estimated by
/// the weighted construction with the balancing kernel `h`.
pub fn extra_head_demo(
    space: &FiniteRmmSpace,
    p: f64,
    h: &dyn TransportFunction,
    functionals: &[(&str, &crate::process::Functional<'_>)],
    trials: u64,
    seed: u64,
) -> Result<ExtraHeadReport> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("p = {p} must lie in (0, 1)")));
    }
    let base = space.without_decorations();
    let support = base.mu().iter().filter(|&&m| m > 0.0).count();
    let target = (p * support as f64).round() as usize;
    if target == 0 {
        return Err(Error::InvalidParameter("conditioning on an empty configuration".into()));
    }
    let ranks = point_ranks(&base);
    let hm = crate::palm::checked_h(&base, h)?;
    let total = base.total_mass();
    let k = functionals.len();

    let root_of = |s: u64| {
        let u = rng(s).random::<f64>() * total;
        let mut acc = 0.0;
        for (x, &m) in base.mu().iter().enumerate() {
            acc += m;
            if u < acc {
                return x;
            }
        }
        base.n() - 1
    };

    // re-rooted side: (attempts, root in support, functionals...)
    let rerooted: Vec<(u64, bool, Vec<f64>)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let s = derive_named(seed, "extra_head", i);
            let (draw, attempts) = conditioned_bernoulli(&base.rooted_at(root_of(s)), &ranks, p, target, derive(s, 1), RESAMPLE_BUDGET)?;
            let draw = apply_recipe_ranked(&draw, &ranks, &NamedRecipe::marks(MARKS), derive(s, 2))?;
            let phi = draw.measure(EXTRA_HEAD_PHI)?.to_vec();
            let ratio = phi.iter().sum::<f64>() / total;
            let source: Vec<f64> = draw.mu().iter().map(|m| m * ratio).collect();
            let td = stable_transport_values(&draw, &source, &phi, draw.marks(MARKS)?)?;
            let o = draw.root();
            let u = rng(derive(s, 3)).random::<f64>();
            let mut acc = 0.0;
            let mut z = None;
            for y in 0..draw.n() {
                acc += td.k.get(o, y) * phi[y];
                if z.is_none() && u < acc {
                    z = Some(y);
                }
            }
            let z = z.unwrap_or_else(|| (0..draw.n()).rev().find(|&y| td.k.get(o, y) * phi[y] > 0.0).unwrap_or(o));
            let moved = draw.without_decoration(MARKS).rooted_at(z);
            Ok((attempts, phi[z] > 0.0, functionals.iter().map(|(_, f)| f(&moved)).collect()))
        })
        .collect::<Result<_>>()?;

    // Palm side: weighted construction on independent conditioned draws
    let palm: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let s = derive_named(seed, "palm", i);
            let (draw, _) = conditioned_bernoulli(&base.rooted_at(root_of(s)), &ranks, p, target, derive(s, 1), RESAMPLE_BUDGET)?;
            let phi = draw.measure(EXTRA_HEAD_PHI)?;
            let o = draw.root();
            let mut row = vec![0.0; k + 1];
            for z in 0..draw.n() {
                let w = hm.get(o, z) * phi[z];
                if w > 0.0 {
                    let sz = draw.rooted_at(z);
                    for (j, (_, f)) in functionals.iter().enumerate() {
                        row[j] += w * f(&sz);
                    }
                    row[k] += w;
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let den: Vec<f64> = palm.iter().map(|r| r[k]).collect();
    let reports = functionals
        .iter()
        .enumerate()
        .map(|(j, (name, _))| {
            let a: Vec<f64> = rerooted.iter().map(|r| r.2[j]).collect();
            let ea = Estimate::from_samples(&a);
            let eb = Estimate::ratio(&palm.iter().map(|r| r[j]).collect::<Vec<_>>(), &den);
            let se = (ea.se * ea.se + eb.se * eb.se).sqrt();
            MtpReport::monte_carlo(format!("extra_head[{name}]"), ea.mean, eb.mean, ea.se, eb.se, se, DEFAULT_Z, trials, seed)
        })
        .collect();
    Ok(ExtraHeadReport {
        reports,
        target_count: target,
        mean_attempts: rerooted.iter().map(|r| r.0 as f64).sum::<f64>() / trials.max(1) as f64,
        rerooted_in_support: rerooted.iter().all(|r| r.1),
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exact version of the extra-head scheme for small counting-measure spaces:
/// enumerates every `target`-subset and every ordering of the marks, and
/// returns the re-rooted law and the Palm law of `phi` (marks removed).
pub fn extra_head_exact(space: &FiniteRmmSpace, target: usize, h: &dyn TransportFunction) -> Result<(RootedEnsemble, RootedEnsemble)> {
    let n = space.n();
    if n > 7 {
        return Err(Error::SizeLimit { n, cap: 7 });
    }
    let base = space.without_decorations();
    let support: Vec<usize> = (0..n).filter(|&x| base.mu()[x] > 0.0).collect();
    let orders = permutations(n);
    let mut decorated = Vec::new();
    let mut rerooted = Vec::new();
    for mask in 0u32..(1 << support.len()) {
        if mask.count_ones() as usize != target {
            continue;
        }
        let mut phi = vec![0.0; n];
        for (i, &x) in support.iter().enumerate() {
            if mask >> i & 1 == 1 {
                phi[x] = 1.0;
            }
        }
        let plain = base.with_decoration(EXTRA_HEAD_PHI, Decoration::Measure(phi.clone()))?;
        let ratio = target as f64 / base.total_mass();
        let source: Vec<f64> = base.mu().iter().map(|m| m * ratio).collect();
        for o in 0..n {
            let w_root = base.mu()[o];
            if w_root == 0.0 {
                continue;
            }
            decorated.push((w_root, plain.rooted_at(o)));
            for order in &orders {
                let marks: Vec<f64> = order.iter().map(|&r| (r + 1) as f64 / (n + 1) as f64).collect();
                let td = stable_transport_values(&plain, &source, &phi, &marks)?;
                for z in 0..n {
                    let q = td.k.get(o, z) * phi[z];
                    if q > 0.0 {
                        rerooted.push((w_root * q / orders.len() as f64, plain.rooted_at(z)));
                    }
                }
            }
        }
    }
    let law = RootedEnsemble::from_weighted(decorated)?.merged()?;
    let rerooted = RootedEnsemble::from_weighted(rerooted)?.merged()?;
    let palm = palm_ensemble_exact(&law, &MeasureRef::Named(EXTRA_HEAD_PHI.into()), h)?.palm;
    Ok((rerooted, palm))
}
