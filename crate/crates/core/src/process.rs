//! Equivariant random decorations: Bernoulli and Poisson processes, iid
//! marks, independent couplings, and Voronoi cells.
//!
//! Randomness at a point is drawn from a stream seeded by the point's
//! root-independent canonical rank, so applying a recipe never looks at the
//! root and rerooting a decorated space gives bitwise identical decorations.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canon::point_ranks;
use crate::ensemble::{Atom, RootedEnsemble};
use crate::error::{Error, Result};
use crate::report::MtpReport;
use crate::seed::{derive, derive_named, rng};
use crate::space::{Decoration, FiniteRmmSpace, MATRIX_TOL};
use crate::stats::Estimate;
use crate::transport::{out_in_sums, SquareMatrix, TransportFunction};

/// Name of the decoration carrying the Poisson counts in the Palm-of-Poisson check.
pub const POISSON_DECORATION: &str = "phi";

/// Largest number of joint configurations enumerated per atom.
pub const ENUMERATION_CAP: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecorationRecipe {
    /// Count 1 with probability `p` at each point of positive mass.
    Bernoulli { p: f64 },
    /// Count `Poisson(c * mu(x))` at each point.
    Poisson { c: f64 },
    /// Distinct iid uniform marks in `[0, 1)` at every point.
    MarksUniform,
    /// Deterministic counting measure on the listed points.
    FixedSubset { points: Vec<usize> },
    /// Two independent recipes sharing the per-point identities.
    IndependentPair { first: Box<NamedRecipe>, second: Box<NamedRecipe> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedRecipe {
    pub name: String,
    #[serde(flatten)]
    pub recipe: DecorationRecipe,
}

impl NamedRecipe {
    pub fn new(name: impl Into<String>, recipe: DecorationRecipe) -> Self {
        NamedRecipe { name: name.into(), recipe }
    }

    pub fn bernoulli(name: impl Into<String>, p: f64) -> Self {
        NamedRecipe::new(name, DecorationRecipe::Bernoulli { p })
    }

    pub fn poisson(name: impl Into<String>, c: f64) -> Self {
        NamedRecipe::new(name, DecorationRecipe::Poisson { c })
    }

    pub fn marks(name: impl Into<String>) -> Self {
        NamedRecipe::new(name, DecorationRecipe::MarksUniform)
    }

    pub fn fixed(name: impl Into<String>, points: Vec<usize>) -> Self {
        NamedRecipe::new(name, DecorationRecipe::FixedSubset { points })
    }

    pub fn pair(first: NamedRecipe, second: NamedRecipe) -> Self {
        let name = format!("{}+{}", first.name, second.name);
        NamedRecipe::new(name, DecorationRecipe::IndependentPair { first: Box::new(first), second: Box::new(second) })
    }

    /// Names of the decorations this recipe produces.
    pub fn outputs(&self) -> Vec<String> {
        match &self.recipe {
            DecorationRecipe::IndependentPair { first, second } => {
                let mut v = first.outputs();
                v.extend(second.outputs());
                v
            }
            _ => vec![self.name.clone()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.recipe {
            DecorationRecipe::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                Err(Error::InvalidParameter(format!("bernoulli p = {p} outside [0, 1]")))
            }
            DecorationRecipe::Poisson { c } if !(c.is_finite() && *c >= 0.0) => {
                Err(Error::InvalidParameter(format!("poisson c = {c} must be finite and >= 0")))
            }
            DecorationRecipe::IndependentPair { first, second } => {
                first.validate()?;
                second.validate()
            }
            _ => Ok(()),
        }
    }
}

/// Applies a recipe, deriving per-point seeds from the canonical ranks of `space`.
pub fn apply_recipe(space: &FiniteRmmSpace, recipe: &NamedRecipe, seed: u64) -> Result<FiniteRmmSpace> {
    let ranks = point_ranks(space);
    apply_recipe_ranked(space, &ranks, recipe, seed)
}

/// [`apply_recipe`] with precomputed root-independent point ranks.
pub fn apply_recipe_ranked(
    space: &FiniteRmmSpace,
    ranks: &[usize],
    recipe: &NamedRecipe,
    seed: u64,
) -> Result<FiniteRmmSpace> {
    recipe.validate()?;
    let n = space.n();
    let mut seen = vec![false; n];
    if ranks.len() != n || ranks.iter().any(|&r| r >= n || std::mem::replace(&mut seen[r], true)) {
        return Err(Error::SeedCollision);
    }
    let point_rng = |x: usize| rng(derive(seed, ranks[x] as u64));
    let mu = space.mu();
    let deco = match &recipe.recipe {
        DecorationRecipe::Bernoulli { p } => Decoration::Measure(
            (0..n).map(|x| if mu[x] > 0.0 && point_rng(x).random_bool(*p) { 1.0 } else { 0.0 }).collect(),
        ),
        DecorationRecipe::Poisson { c } => {
            let mut counts = vec![0.0; n];
            for x in 0..n {
                let lambda = c * mu[x];
                if lambda > 0.0 {
                    let dist = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                    counts[x] = dist.sample(&mut point_rng(x));
                }
            }
            Decoration::Measure(counts)
        }
        DecorationRecipe::MarksUniform => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&x| ranks[x]);
            let mut marks = vec![0.0; n];
            let mut used = std::collections::HashSet::new();
            for x in order {
                let mut r = point_rng(x);
                let mut m: f64 = r.random();
                while !used.insert(m.to_bits()) {
                    m = r.random();
                }
                marks[x] = m;
            }
            Decoration::Marks(marks)
        }
        DecorationRecipe::FixedSubset { .. } if space.decorations().contains_key(&recipe.name) => {
            return Ok(space.clone());
        }
        DecorationRecipe::FixedSubset { points } => {
            let mut v = vec![0.0; n];
            for &p in points {
                if p >= n {
                    return Err(Error::IndexOutOfRange { index: p, n });
                }
                v[p] = 1.0;
            }
            Decoration::Measure(v)
        }
        DecorationRecipe::IndependentPair { first, second } => {
            let s = apply_recipe_ranked(space, ranks, first, derive(seed, 0xA))?;
            return apply_recipe_ranked(&s, ranks, second, derive(seed, 0xB));
        }
    };
    space.with_decoration(recipe.name.clone(), deco)
}

/// Attaches every fixed-subset recipe (including those inside pairs) to an
/// unrooted labelled space. Fixed subsets name labelled points, so they must be
/// attached before rooting merges relabelled copies; afterwards they are
/// carried along and re-applying them is a no-op.
pub fn attach_fixed(space: &FiniteRmmSpace, recipes: &[NamedRecipe]) -> Result<FiniteRmmSpace> {
    fn walk(s: FiniteRmmSpace, r: &NamedRecipe) -> Result<FiniteRmmSpace> {
        match &r.recipe {
            DecorationRecipe::FixedSubset { .. } => apply_recipe_ranked(&s, &(0..s.n()).collect::<Vec<_>>(), r, 0),
            DecorationRecipe::IndependentPair { first, second } => walk(walk(s, first)?, second),
            _ => Ok(s),
        }
    }
    recipes.iter().try_fold(space.clone(), walk)
}

/// Applies several recipes in order with seeds split per position.
pub fn apply_recipes_ranked(
    space: &FiniteRmmSpace,
    ranks: &[usize],
    recipes: &[NamedRecipe],
    seed: u64,
) -> Result<FiniteRmmSpace> {
    let mut s = space.clone();
    for (i, r) in recipes.iter().enumerate() {
        s = apply_recipe_ranked(&s, ranks, r, derive(seed, i as u64))?;
    }
    Ok(s)
}

fn configurations(space: &FiniteRmmSpace, recipe: &NamedRecipe) -> Result<Vec<(f64, FiniteRmmSpace)>> {
    recipe.validate()?;
    let n = space.n();
    match &recipe.recipe {
        DecorationRecipe::Bernoulli { p } => {
            let support: Vec<usize> = (0..n).filter(|&x| space.mu()[x] > 0.0).collect();
            if support.len() > 16 {
                return Err(Error::SizeLimit { n: 1 << support.len().min(63), cap: ENUMERATION_CAP });
            }
            let mut out = Vec::new();
            for mask in 0u32..(1u32 << support.len()) {
                let k = mask.count_ones() as i32;
                let prob = p.powi(k) * (1.0 - p).powi(support.len() as i32 - k);
                if prob == 0.0 {
                    continue;
                }
                let mut v = vec![0.0; n];
                for (i, &x) in support.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        v[x] = 1.0;
                    }
                }
                out.push((prob, space.with_decoration(recipe.name.clone(), Decoration::Measure(v))?));
            }
            Ok(out)
        }
        DecorationRecipe::FixedSubset { .. } => Ok(vec![(1.0, apply_recipe_ranked(space, &(0..n).collect::<Vec<_>>(), recipe, 0)?)]),
        DecorationRecipe::IndependentPair { first, second } => {
            let mut out = Vec::new();
            for (pa, a) in configurations(space, first)? {
                for (pb, b) in configurations(&a, second)? {
                    out.push((pa * pb, b));
                    if out.len() > ENUMERATION_CAP {
                        return Err(Error::SizeLimit { n: out.len(), cap: ENUMERATION_CAP });
                    }
                }
            }
            Ok(out)
        }
        DecorationRecipe::Poisson { .. } | DecorationRecipe::MarksUniform => Err(Error::InvalidParameter(format!(
            "recipe `{}` has no finite configuration space",
            recipe.name
        ))),
    }
}

/// Exact law of the decorated ensemble for finitely supported recipes
/// (Bernoulli, fixed subsets and their independent pairs), canonically merged.
pub fn enumerate_recipes(e: &RootedEnsemble, recipes: &[NamedRecipe]) -> Result<RootedEnsemble> {
    let mut atoms = Vec::new();
    for a in e.atoms() {
        let mut current = vec![(a.weight, a.space.clone())];
        for r in recipes {
            let mut next = Vec::new();
            for (w, s) in &current {
                for (p, t) in configurations(s, r)? {
                    next.push((w * p, t));
                }
            }
            if next.len() > ENUMERATION_CAP * e.len() {
                return Err(Error::SizeLimit { n: next.len(), cap: ENUMERATION_CAP });
            }
            current = next;
        }
        atoms.extend(current.into_iter().map(|(weight, space)| Atom { weight, space }));
    }
    let total: f64 = atoms.iter().map(|a| a.weight).sum();
    RootedEnsemble::from_weighted(atoms.into_iter().map(|a| (a.weight / total, a.space)).collect())?.merged()
}

/// Picks an atom index with probability proportional to the weights.
pub(crate) fn pick_atom(e: &RootedEnsemble, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, a) in e.atoms().iter().enumerate() {
        acc += a.weight;
        if u < acc {
            return i;
        }
    }
    e.len() - 1
}

/// A bounded root functional on decorated spaces.
pub type Functional<'a> = dyn Fn(&FiniteRmmSpace) -> f64 + Sync + 'a;

struct PoissonAtom {
    ranks: Vec<usize>,
    h: SquareMatrix,
}

/// Two-sided Monte-Carlo comparison of the Palm law of a Poisson process
/// with intensity `c mu` against the original law with one extra atom at
/// the root. Side (a) is the self-normalized Palm construction
/// `sum_z h(o,z) Phi(z) F(z) / sum_z h(o,z) Phi(z)`; side (b) averages
/// `F(X, o, mu, Phi + delta_o)`. One report per functional, all sharing the
/// same draws.
pub fn palm_of_poisson_check(
    e: &RootedEnsemble,
    c: f64,
    h: &dyn TransportFunction,
    functionals: &[(&str, &Functional<'_>)],
    trials: u64,
    seed: u64,
) -> Result<Vec<MtpReport>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("poisson intensity c = {c} must be positive")));
    }
    if trials < 2 {
        return Err(Error::InvalidParameter("at least two trials are needed".into()));
    }
    let prepared = e
        .atoms()
        .iter()
        .map(|a| {
            let base = a.space.without_decorations();
            let hm = h.matrix(&base)?;
            let (_, minus) = out_in_sums(&hm, base.mu());
            if let Some(y) = (0..base.n()).find(|&y| base.mu()[y] > 0.0 && (minus[y] - 1.0).abs() > MATRIX_TOL) {
                return Err(Error::Normalization(format!("h-({y}) = {} on an atom", minus[y])));
            }
            Ok(PoissonAtom { ranks: point_ranks(&base), h: hm })
        })
        .collect::<Result<Vec<_>>>()?;
    let recipe = NamedRecipe::poisson(POISSON_DECORATION, c);
    let k = functionals.len();

    let draw = |side: &str, i: u64| -> Result<(usize, FiniteRmmSpace)> {
        let s = derive_named(seed, side, i);
        let idx = pick_atom(e, rng(s).random::<f64>());
        let sp = apply_recipe_ranked(&e.atoms()[idx].space, &prepared[idx].ranks, &recipe, derive(s, 1))?;
        Ok((idx, sp))
    };

    // side (a): per trial, numerators for each functional then the denominator
    let palm: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let (idx, s) = draw("palm", i)?;
            let phi = s.measure(POISSON_DECORATION)?;
            let o = s.root();
            let mut row = vec![0.0; k + 1];
            for z in 0..s.n() {
                let w = prepared[idx].h.get(o, z) * phi[z];
                if w == 0.0 {
                    continue;
                }
                let sz = s.rooted_at(z);
                for (j, (_, f)) in functionals.iter().enumerate() {
                    row[j] += w * f(&sz);
                }
                row[k] += w;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let direct: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let (_, s) = draw("direct", i)?;
            let mut phi = s.measure(POISSON_DECORATION)?.to_vec();
            phi[s.root()] += 1.0;
            let s = s.with_decoration(POISSON_DECORATION, Decoration::Measure(phi))?;
            Ok(functionals.iter().map(|(_, f)| f(&s)).collect())
        })
        .collect::<Result<_>>()?;

    let den: Vec<f64> = palm.iter().map(|r| r[k]).collect();
    let mut reports = Vec::with_capacity(k);
    for (j, (name, _)) in functionals.iter().enumerate() {
        let num: Vec<f64> = palm.iter().map(|r| r[j]).collect();
        let b: Vec<f64> = direct.iter().map(|r| r[j]).collect();
        let ea = Estimate::ratio(&num, &den);
        let eb = Estimate::from_samples(&b);
        if !ea.mean.is_finite() || !eb.mean.is_finite() {
            return Err(Error::NonFinite(format!("palm-of-poisson estimate for {name}")));
        }
        let se = (ea.se * ea.se + eb.se * eb.se).sqrt();
        let mut r = MtpReport::monte_carlo(
            format!("palm_of_poisson[c={c},{name}]"),
            ea.mean,
            eb.mean,
            ea.se,
            eb.se,
            se,
            crate::report::DEFAULT_Z,
            trials,
            seed,
        );
        if ea.se == 0.0 && eb.se == 0.0 {
            r = r.with_flag("degenerate: zero variance on both sides");
        }
        reports.push(r);
    }
    Ok(reports)
}

/// Voronoi assignment to the points charged by `phi`: every point goes to a
/// closest charged point, ties broken by the smallest mark.
pub fn voronoi(space: &FiniteRmmSpace, phi: &str, marks: &str) -> Result<Vec<usize>> {
    let counts = space.measure(phi)?;
    let centers: Vec<usize> = (0..space.n()).filter(|&x| counts[x] > 0.0).collect();
    if centers.is_empty() {
        return Err(Error::Empty("voronoi centers"));
    }
    let m = space.marks(marks)?;
    let mut tau = Vec::with_capacity(space.n());
    for x in 0..space.n() {
        let best = centers.iter().map(|&c| space.d(x, c)).fold(f64::INFINITY, f64::min);
        let tied: Vec<usize> = centers.iter().copied().filter(|&c| space.d(x, c) <= best + MATRIX_TOL).collect();
        let mut pick = tied[0];
        for &c in &tied[1..] {
            if m[c] == m[pick] {
                return Err(Error::DuplicateMarks(pick.min(c), pick.max(c)));
            }
            if m[c] < m[pick] {
                pick = c;
            }
        }
        tau.push(pick);
    }
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::uniform_rooting;

    fn cycle(n: usize) -> FiniteRmmSpace {
        let e: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        FiniteRmmSpace::from_graph(n, &e).unwrap()
    }

    #[test]
    fn bernoulli_extremes() {
        let s = cycle(4).with_measure(vec![1.0, 0.0, 2.0, 1.0]).unwrap();
        let zero = apply_recipe(&s, &NamedRecipe::bernoulli("phi", 0.0), 7).unwrap();
        assert_eq!(zero.measure("phi").unwrap(), &[0.0; 4]);
        let one = apply_recipe(&s, &NamedRecipe::bernoulli("phi", 1.0), 7).unwrap();
        assert_eq!(one.measure("phi").unwrap(), &[1.0, 0.0, 1.0, 1.0]);
        assert!(apply_recipe(&s, &NamedRecipe::bernoulli("phi", 1.5), 7).is_err());
    }

    #[test]
    fn root_independence() {
        let s = FiniteRmmSpace::from_graph(6, &[(0, 1), (1, 2), (2, 3), (1, 4), (4, 5)]).unwrap();
        for recipe in [NamedRecipe::bernoulli("phi", 0.4), NamedRecipe::poisson("phi", 1.3), NamedRecipe::marks("m")] {
            let a = apply_recipe(&s, &recipe, 99).unwrap();
            for j in 0..6 {
                let b = apply_recipe(&s.reroot(j).unwrap(), &recipe, 99).unwrap();
                assert_eq!(a.decorations(), b.decorations());
            }
        }
    }

    #[test]
    fn poisson_mean_single_point() {
        let s = FiniteRmmSpace::new(vec![vec![0.0]], vec![1.0], 0).unwrap();
        let xs: Vec<f64> = (0..100_000u64)
            .map(|i| apply_recipe_ranked(&s, &[0], &NamedRecipe::poisson("phi", 2.0), derive(5, i)).unwrap().measure("phi").unwrap()[0])
            .collect();
        let e = Estimate::from_samples(&xs);
        assert!((e.mean - 2.0).abs() <= 4.0 * e.se, "{e:?}");
    }

    #[test]
    fn marks_are_distinct() {
        let s = cycle(12);
        let m = apply_recipe(&s, &NamedRecipe::marks("m"), 3).unwrap();
        let mut v = m.marks("m").unwrap().to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        assert_eq!(v.len(), 12);
    }

    #[test]
    fn pair_is_two_decorations() {
        let r = NamedRecipe::pair(NamedRecipe::bernoulli("phi", 0.5), NamedRecipe::bernoulli("psi", 0.5));
        let s = apply_recipe(&cycle(5), &r, 1).unwrap();
        assert!(s.measure("phi").is_ok() && s.measure("psi").is_ok());
        assert_eq!(r.outputs(), vec!["phi".to_string(), "psi".to_string()]);
    }

    #[test]
    fn recipe_json() {
        let r = NamedRecipe::pair(NamedRecipe::bernoulli("phi", 0.5), NamedRecipe::poisson("psi", 2.0));
        let text = serde_json::to_string(&r).unwrap();
        let back: NamedRecipe = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        let parsed: NamedRecipe = serde_json::from_str(r#"{"name":"phi","kind":"bernoulli","p":0.25}"#).unwrap();
        assert_eq!(parsed, NamedRecipe::bernoulli("phi", 0.25));
    }

    #[test]
    fn enumeration_c3() {
        let e = uniform_rooting(&cycle(3)).unwrap();
        let d = enumerate_recipes(&e, &[NamedRecipe::bernoulli("phi", 0.5)]).unwrap();
        let total: f64 = d.atoms().iter().map(|a| a.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // root-count expectation equals p
        let m = crate::ensemble::exact_expectation(&d, |s| s.measure("phi").unwrap()[s.root()]).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        // classes: by (count at root, total count): (0,0),(0,1),(0,2),(1,1),(1,2),(1,3)
        assert_eq!(d.len(), 6);
    }

    #[test]
    fn fixed_subset_sees_a_uniform_root() {
        let base = attach_fixed(&cycle(4), &[NamedRecipe::fixed("psi", vec![0])]).unwrap();
        let e = uniform_rooting(&base).unwrap();
        let d = enumerate_recipes(&e, &[NamedRecipe::fixed("psi", vec![0])]).unwrap();
        assert_eq!(d.len(), 3);
        let m = crate::ensemble::exact_expectation(&d, |s| s.measure("psi").unwrap()[s.root()]).unwrap();
        assert!((m - 0.25).abs() < 1e-12);
    }

    #[test]
    fn voronoi_c5() {
        let s = cycle(5)
            .with_decoration("phi", Decoration::Measure(vec![1.0, 0.0, 0.0, 1.0, 0.0]))
            .unwrap()
            .with_decoration("m", Decoration::Marks(vec![0.7, 0.1, 0.2, 0.3, 0.9]))
            .unwrap();
        let tau = voronoi(&s, "phi", "m").unwrap();
        assert_eq!(tau, vec![0, 0, 3, 3, 3]);
        let s2 = s.with_decoration("m", Decoration::Marks(vec![0.2, 0.1, 0.2, 0.7, 0.9])).unwrap();
        assert_eq!(voronoi(&s2, "phi", "m").unwrap()[4], 0);
        let dup = s.with_decoration("m", Decoration::Marks(vec![0.5, 0.1, 0.2, 0.5, 0.9])).unwrap();
        assert!(matches!(voronoi(&dup, "phi", "m"), Err(Error::DuplicateMarks(0, 3))));
        let none = s.with_decoration("phi", Decoration::Measure(vec![0.0; 5])).unwrap();
        assert!(matches!(voronoi(&none, "phi", "m"), Err(Error::Empty(_))));
    }

    #[test]
    fn voronoi_identity_and_constant() {
        let s = cycle(4).with_decoration("m", Decoration::Marks(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        let all = s.with_decoration("phi", Decoration::Measure(vec![1.0; 4])).unwrap();
        assert_eq!(voronoi(&all, "phi", "m").unwrap(), vec![0, 1, 2, 3]);
        let one = s.with_decoration("phi", Decoration::Measure(vec![0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(voronoi(&one, "phi", "m").unwrap(), vec![2; 4]);
    }
}
