//! Finite probability laws over rooted spaces.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canon::{automorphism_group, canonical_hash_with, CanonConfig, Digest};
use crate::error::{Error, Result};
use crate::space::{FiniteRmmSpace, SCALAR_TOL};
use crate::transport::KernelMatrix;

/// Largest space merged by canonical digest inside ensemble constructions.
pub const MERGE_CAP: usize = 32;

pub fn merge_config() -> CanonConfig {
    CanonConfig { cap: MERGE_CAP, ..CanonConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub weight: f64,
    pub space: FiniteRmmSpace,
}

/// A finitely supported law of rooted (decorated) spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleFile")]
pub struct RootedEnsemble {
    atoms: Vec<Atom>,
}

#[derive(Deserialize)]
struct EnsembleFile {
    atoms: Vec<Atom>,
}

impl TryFrom<EnsembleFile> for RootedEnsemble {
    type Error = Error;

    fn try_from(f: EnsembleFile) -> Result<Self> {
        RootedEnsemble::new(f.atoms)
    }
}

fn check_weights(atoms: &[Atom]) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    for (i, a) in atoms.iter().enumerate() {
        if !a.weight.is_finite() {
            return Err(Error::NonFinite(format!("weight of atom {i}")));
        }
        if a.weight < 0.0 {
            return Err(Error::Negative(format!("weight of atom {i}")));
        }
    }
    let total: f64 = atoms.iter().map(|a| a.weight).sum();
    if (total - 1.0).abs() > SCALAR_TOL * atoms.len().max(1) as f64 {
        return Err(Error::Normalization(format!("ensemble weights sum to {total}")));
    }
    Ok(())
}

impl RootedEnsemble {
    /// Validates every space and checks that the weights form a probability vector.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        check_weights(&atoms)?;
        for a in &atoms {
            a.space.ensure_valid()?;
        }
        Ok(RootedEnsemble { atoms })
    }

    /// Normalizes nonnegative weights; zero-weight atoms are dropped.
    pub fn from_weighted(atoms: Vec<(f64, FiniteRmmSpace)>) -> Result<Self> {
        let total: f64 = atoms.iter().map(|a| a.0).sum();
        if !total.is_finite() {
            return Err(Error::NonFinite("ensemble weights".into()));
        }
        if total <= 0.0 {
            return Err(Error::Normalization("ensemble weights sum to zero".into()));
        }
        let atoms: Vec<Atom> = atoms
            .into_iter()
            .filter(|a| a.0 != 0.0)
            .map(|(w, space)| Atom { weight: w / total, space })
            .collect();
        check_weights(&atoms)?;
        Ok(RootedEnsemble { atoms })
    }

    /// Dirac law at one space.
    pub fn single(space: FiniteRmmSpace) -> Self {
        RootedEnsemble { atoms: vec![Atom { weight: 1.0, space }] }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Applies `f` to every space, keeping weights.
    pub fn try_map<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&FiniteRmmSpace) -> Result<FiniteRmmSpace>,
    {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Ok(Atom { weight: a.weight, space: f(&a.space)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(RootedEnsemble { atoms })
    }

    /// Digest of every atom, in order.
    pub fn digests(&self, cfg: &CanonConfig) -> Result<Vec<Digest>> {
        self.atoms.par_iter().map(|a| canonical_hash_with(&a.space, cfg)).collect()
    }

    /// Merges atoms with equal canonical digest, keeping the first representative
    /// of each class and the order of first appearance.
    pub fn merged(&self) -> Result<Self> {
        self.merged_with(&merge_config())
    }

    pub fn merged_with(&self, cfg: &CanonConfig) -> Result<Self> {
        let digests = self.digests(cfg)?;
        let mut index: HashMap<Digest, usize> = HashMap::new();
        let mut atoms: Vec<Atom> = Vec::new();
        for (a, d) in self.atoms.iter().zip(digests) {
            match index.get(&d) {
                Some(&k) => atoms[k].weight += a.weight,
                None => {
                    index.insert(d, atoms.len());
                    atoms.push(a.clone());
                }
            }
        }
        Ok(RootedEnsemble { atoms })
    }

    /// Total weight per canonical class.
    pub fn class_weights(&self) -> Result<BTreeMap<Digest, f64>> {
        let mut out = BTreeMap::new();
        for (a, d) in self.atoms.iter().zip(self.digests(&merge_config())?) {
            *out.entry(d).or_insert(0.0) += a.weight;
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Largest difference of canonical-class weights between two laws.
pub fn class_weight_distance(a: &RootedEnsemble, b: &RootedEnsemble) -> Result<f64> {
    let (wa, wb) = (a.class_weights()?, b.class_weights()?);
    let keys: std::collections::BTreeSet<&Digest> = wa.keys().chain(wb.keys()).collect();
    Ok(keys
        .into_iter()
        .map(|k| (wa.get(k).copied().unwrap_or(0.0) - wb.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max))
}

/// Digest-level equality of two laws up to `tol` per class.
pub fn same_law(a: &RootedEnsemble, b: &RootedEnsemble, tol: f64) -> Result<bool> {
    Ok(class_weight_distance(a, b)? <= tol)
}

/// `E[f(o)] = sum_i w_i f(space_i)`.
pub fn exact_expectation<F>(e: &RootedEnsemble, f: F) -> Result<f64>
where
    F: Fn(&FiniteRmmSpace) -> f64,
{
    try_expectation(e, |s| Ok(f(s)))
}

/// [`exact_expectation`] for fallible functionals.
pub fn try_expectation<F>(e: &RootedEnsemble, f: F) -> Result<f64>
where
    F: Fn(&FiniteRmmSpace) -> Result<f64>,
{
    let mut acc = 0.0;
    for (i, a) in e.atoms().iter().enumerate() {
        let v = f(&a.space)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("functional on atom {i}")));
        }
        acc += a.weight * v;
    }
    Ok(acc)
}

/// Root chosen with law proportional to `mu`, one atom per point (unmerged).
pub fn uniform_rooting_unmerged(space: &FiniteRmmSpace) -> Result<RootedEnsemble> {
    let total = space.total_mass();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    RootedEnsemble::from_weighted((0..space.n()).map(|j| (space.mu()[j], space.rooted_at(j))).collect())
}

/// Root chosen with law proportional to `mu`, canonically merged.
pub fn uniform_rooting(space: &FiniteRmmSpace) -> Result<RootedEnsemble> {
    uniform_rooting_unmerged(space)?.merged()
}

/// Root law on orbit representatives with weight `mu(x) / |Stab(x)|`.
pub fn quasi_transitive_unimodularization(space: &FiniteRmmSpace) -> Result<RootedEnsemble> {
    quasi_transitive_with(space, &CanonConfig::default())
}

pub fn quasi_transitive_with(space: &FiniteRmmSpace, cfg: &CanonConfig) -> Result<RootedEnsemble> {
    let group = automorphism_group(space, cfg)?;
    let atoms: Vec<(f64, FiniteRmmSpace)> = group
        .representatives()
        .into_iter()
        .map(|x| (space.mu()[x] / group.stabilizer_order[x] as f64, space.rooted_at(x)))
        .collect();
    if atoms.iter().all(|a| a.0 == 0.0) {
        return Err(Error::ZeroMass);
    }
    RootedEnsemble::from_weighted(atoms)
}

/// Uniform law over root orbits, ignoring orbit sizes. Not unimodular unless
/// the orbits all carry the same mass; used as a negative control.
pub fn class_uniform_rooting(space: &FiniteRmmSpace) -> Result<RootedEnsemble> {
    let group = automorphism_group(space, &CanonConfig::default())?;
    RootedEnsemble::from_weighted(
        group.representatives().into_iter().filter(|&x| space.mu()[x] > 0.0).map(|x| (1.0, space.rooted_at(x))).collect(),
    )
}

/// Biases the law by `b(o)` and replaces each measure by `b mu`.
pub fn biased<F>(e: &RootedEnsemble, b: F) -> Result<RootedEnsemble>
where
    F: Fn(&FiniteRmmSpace) -> f64,
{
    let mut atoms = Vec::with_capacity(e.len());
    for a in e.atoms() {
        let bs = crate::space::bias_measure(&a.space, &b)?;
        let w = b(&a.space);
        atoms.push((a.weight * w, bs));
    }
    let mean: f64 = atoms.iter().map(|a| a.0).sum();
    if mean <= 0.0 {
        return Err(Error::Normalization("expected bias is zero".into()));
    }
    RootedEnsemble::from_weighted(atoms)?.merged()
}

/// Degree biasing `[G, o, deg]`: measure replaced by degrees, law biased by
/// `deg(o) / E[deg(o)]`.
pub fn degree_biased(e: &RootedEnsemble) -> Result<RootedEnsemble> {
    biased(e, |s| s.degree(s.root()) as f64)
}

/// Moves the root by a kernel: atom `(w_i k_i(o, j), space_i rooted at j)`.
pub fn reroot_by_kernel<K>(e: &RootedEnsemble, k: K) -> Result<RootedEnsemble>
where
    K: Fn(&FiniteRmmSpace) -> Result<KernelMatrix>,
{
    let mut atoms = Vec::new();
    for a in e.atoms() {
        let km = k(&a.space)?;
        if km.n() != a.space.n() {
            return Err(Error::InvalidParameter(format!("kernel of size {} on a space of {} points", km.n(), a.space.n())));
        }
        let o = a.space.root();
        let row = km.matrix.row(o);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > crate::space::MATRIX_TOL || row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::NotStochastic { row: o, sum });
        }
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                atoms.push(Atom { weight: a.weight * p, space: a.space.rooted_at(j) });
            }
        }
    }
    RootedEnsemble { atoms }.merged()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon::canonical_hash;

    fn star3() -> FiniteRmmSpace {
        FiniteRmmSpace::from_graph(4, &[(0, 1), (0, 2), (0, 3)]).unwrap()
    }

    fn path(n: usize) -> FiniteRmmSpace {
        let e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        FiniteRmmSpace::from_graph(n, &e).unwrap()
    }

    #[test]
    fn star_uniform_rooting() {
        let e = uniform_rooting(&star3()).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.atoms()[0].space.root(), 0);
        assert!((e.atoms()[0].weight - 0.25).abs() < 1e-15);
        assert!((e.atoms()[1].weight - 0.75).abs() < 1e-15);
        let deg = exact_expectation(&e, |s| s.degree(s.root()) as f64).unwrap();
        assert!((deg - 1.5).abs() < 1e-12);
        assert_eq!(exact_expectation(&e, |_| 2.5).unwrap(), 2.5);
    }

    #[test]
    fn two_point_rootings() {
        let s = path(2);
        assert_eq!(uniform_rooting(&s).unwrap().len(), 1);
        let s = s.with_measure(vec![2.0, 1.0]).unwrap();
        let e = uniform_rooting(&s).unwrap();
        assert!((e.atoms()[0].weight - 2.0 / 3.0).abs() < 1e-15);
        assert!((e.atoms()[1].weight - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(uniform_rooting(&s.with_measure(vec![0.0, 0.0]).unwrap()), Err(Error::ZeroMass)));
    }

    #[test]
    fn quasi_transitive_star() {
        let e = quasi_transitive_unimodularization(&star3()).unwrap();
        assert!((e.atoms()[0].weight - 0.25).abs() < 1e-15);
        assert!((e.atoms()[1].weight - 0.75).abs() < 1e-15);
        assert!(same_law(&e, &uniform_rooting(&star3()).unwrap(), 1e-12).unwrap());
        let bad = class_uniform_rooting(&star3()).unwrap();
        assert!((bad.atoms()[0].weight - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quasi_transitive_asymmetric_is_uniform() {
        let s = FiniteRmmSpace::new(
            vec![vec![0.0, 1.0, 2.5], vec![1.0, 0.0, 1.7], vec![2.5, 1.7, 0.0]],
            vec![1.0, 0.5, 2.0],
            0,
        )
        .unwrap();
        let a = quasi_transitive_unimodularization(&s).unwrap();
        let b = uniform_rooting(&s).unwrap();
        assert!(class_weight_distance(&a, &b).unwrap() < 1e-12);
    }

    #[test]
    fn degree_bias_path3() {
        let e = degree_biased(&uniform_rooting(&path(3)).unwrap()).unwrap();
        assert_eq!(e.len(), 2);
        for a in e.atoms() {
            assert!((a.weight - 0.5).abs() < 1e-15);
            assert_eq!(a.space.mu(), &[1.0, 2.0, 1.0]);
        }
        let single = RootedEnsemble::single(FiniteRmmSpace::new(vec![vec![0.0]], vec![1.0], 0).unwrap());
        assert!(degree_biased(&single).is_err());
    }

    #[test]
    fn degree_bias_cycle() {
        let c = FiniteRmmSpace::from_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap();
        let e = degree_biased(&uniform_rooting(&c).unwrap()).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.atoms()[0].space.mu(), &[2.0; 5]);
    }

    #[test]
    fn merge_preserves_expectation() {
        let e = uniform_rooting_unmerged(&star3()).unwrap();
        let m = e.merged().unwrap();
        let f = |s: &FiniteRmmSpace| s.ball_mass(s.root(), 1.0) + s.root() as f64 * 0.0;
        assert!((exact_expectation(&e, f).unwrap() - exact_expectation(&m, f).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_is_noop() {
        let e = uniform_rooting(&star3()).unwrap();
        let r = reroot_by_kernel(&e, |s| Ok(KernelMatrix::identity(s.n()))).unwrap();
        assert!(same_law(&e, &r, 1e-12).unwrap());
    }

    #[test]
    fn shift_on_c3() {
        let c = FiniteRmmSpace::from_graph(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let e = uniform_rooting(&c).unwrap();
        let shift = |s: &FiniteRmmSpace| {
            let n = s.n();
            KernelMatrix::new(crate::transport::SquareMatrix::from_fn(n, |u, v| if v == (u + 1) % n { 1.0 } else { 0.0 }), "mu")
        };
        let r = reroot_by_kernel(&e, shift).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(canonical_hash(&r.atoms()[0].space).unwrap(), canonical_hash(&c).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let e = uniform_rooting(&star3()).unwrap();
        let text = serde_json::to_string(&e).unwrap();
        let back: RootedEnsemble = serde_json::from_str(&text).unwrap();
        assert_eq!(back, e);
        assert!(serde_json::from_str::<RootedEnsemble>(r#"{"atoms":[]}"#).is_err());
    }
}
