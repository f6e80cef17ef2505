//! Isomorphism testing, canonical forms and automorphism groups.
//!
//! Values are quantized to a grid before comparison, so two spaces are
//! isomorphic exactly when their quantized canonical serializations agree.
//! The canonical serialization is the lexicographically smallest encoding
//! over all point orderings (root first for rooted spaces), found by a
//! backtracking search over colour-refined candidates with automorphism
//! pruning.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::space::{Decoration, FiniteRmmSpace};

pub const DEFAULT_CAP: usize = 12;
pub const DEFAULT_GRID: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonConfig {
    /// Largest point count accepted by the public hashing and isomorphism entry points.
    pub cap: usize,
    /// Quantization step applied to distances, masses and decoration values.
    pub grid: f64,
}

impl Default for CanonConfig {
    fn default() -> Self {
        CanonConfig { cap: DEFAULT_CAP, grid: DEFAULT_GRID }
    }
}

impl CanonConfig {
    fn check(&self, n: usize) -> Result<()> {
        if n > self.cap {
            Err(Error::SizeLimit { n, cap: self.cap })
        } else {
            Ok(())
        }
    }
}

/// SHA-256 of a canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl std::fmt::Debug for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest({self})")
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// A permutation `perm[a_point] = b_point` carrying one space onto another.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IsomorphismWitness {
    pub perm: Vec<usize>,
}

impl IsomorphismWitness {
    pub fn inverse(&self) -> IsomorphismWitness {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        IsomorphismWitness { perm: inv }
    }

    /// `other ∘ self`: first apply `self`, then `other`.
    pub fn then(&self, other: &IsomorphismWitness) -> IsomorphismWitness {
        IsomorphismWitness { perm: self.perm.iter().map(|&p| other.perm[p]).collect() }
    }

    /// Checks that the permutation really is an isomorphism (on the quantization grid).
    pub fn verify(&self, a: &FiniteRmmSpace, b: &FiniteRmmSpace, grid: f64) -> bool {
        let (ea, eb) = (Encoded::new(a, true, grid), Encoded::new(b, true, grid));
        ea.header == eb.header
            && self.perm.len() == a.n()
            && self.perm[a.root()] == b.root()
            && (0..a.n()).all(|x| {
                ea.labels[x] == eb.labels[self.perm[x]]
                    && (0..a.n()).all(|y| ea.qd(x, y) == eb.qd(self.perm[x], self.perm[y]))
            })
    }
}

#[inline]
fn quantize(v: f64, grid: f64) -> i64 {
    (v / grid).round() as i64
}

/// Quantized, colour-refined view of a space.
struct Encoded {
    n: usize,
    header: Vec<i64>,
    labels: Vec<Vec<i64>>,
    qdist: Vec<i64>,
    colors: Vec<u32>,
}

impl Encoded {
    fn new(space: &FiniteRmmSpace, rooted: bool, grid: f64) -> Encoded {
        let n = space.n();
        let mut header = vec![n as i64, rooted as i64, space.decorations().len() as i64];
        for (name, d) in space.decorations() {
            header.push(match d {
                Decoration::Measure(_) => 0,
                Decoration::Marks(_) => 1,
                Decoration::Trajectory(t) => 2 + 4 * t.len() as i64,
                Decoration::Subset(_) => 3,
            });
            header.push(name.len() as i64);
            header.extend(name.bytes().map(i64::from));
        }
        let mut labels: Vec<Vec<i64>> = (0..n).map(|x| vec![quantize(space.mu()[x], grid)]).collect();
        for d in space.decorations().values() {
            match d {
                Decoration::Measure(v) | Decoration::Marks(v) => {
                    for x in 0..n {
                        labels[x].push(quantize(v[x], grid));
                    }
                }
                Decoration::Subset(v) => {
                    for x in 0..n {
                        labels[x].push(v[x] as i64);
                    }
                }
                Decoration::Trajectory(t) => {
                    let mut times = vec![Vec::new(); n];
                    for (time, &x) in t.iter().enumerate() {
                        times[x].push(time as i64);
                    }
                    for x in 0..n {
                        labels[x].push(times[x].len() as i64);
                        labels[x].extend_from_slice(&times[x]);
                    }
                }
            }
        }
        let mut qdist = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                qdist[i * n + j] = quantize(space.d(i, j), grid);
            }
        }
        let initial: Vec<(bool, &Vec<i64>)> =
            (0..n).map(|x| (rooted && x == space.root(), &labels[x])).collect();
        let mut colors = rank(&initial);
        loop {
            let sigs: Vec<(u32, Vec<(i64, u32)>)> = (0..n)
                .map(|p| {
                    let mut nb: Vec<(i64, u32)> = (0..n).map(|x| (qdist[p * n + x], colors[x])).collect();
                    nb.sort_unstable();
                    (colors[p], nb)
                })
                .collect();
            let refined = rank(&sigs);
            let classes = |c: &[u32]| c.iter().copied().max().map_or(0, |m| m + 1);
            let done = classes(&refined) == classes(&colors);
            colors = refined;
            if done {
                break;
            }
        }
        Encoded { n, header, labels, qdist, colors }
    }

    #[inline]
    fn qd(&self, i: usize, j: usize) -> i64 {
        self.qdist[i * self.n + j]
    }

    /// Serialization block for placing `p` after `prefix`. Blocks are prefix-free:
    /// colour and label length come first, and label lengths fix the block length.
    fn block(&self, p: usize, prefix: &[usize], out: &mut Vec<i64>) {
        out.clear();
        out.push(self.colors[p] as i64);
        out.push(self.labels[p].len() as i64);
        out.extend_from_slice(&self.labels[p]);
        out.extend(prefix.iter().map(|&q| self.qd(p, q)));
    }
}

/// Dense ranks of the distinct values in `items`, in sorted order.
fn rank<T: Ord>(items: &[T]) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| items[a].cmp(&items[b]));
    let mut out = vec![0u32; items.len()];
    let mut r = 0u32;
    for w in 0..idx.len() {
        if w > 0 && items[idx[w]] != items[idx[w - 1]] {
            r += 1;
        }
        out[idx[w]] = r;
    }
    out
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

struct CanonSearch<'a> {
    enc: &'a Encoded,
    best: Option<(Vec<i64>, Vec<usize>)>,
    autos: Vec<Vec<usize>>,
}

impl CanonSearch<'_> {
    fn run(&mut self, prefix: &mut Vec<usize>, serial: &mut Vec<i64>, placed: &mut [bool]) {
        let n = self.enc.n;
        if let Some((best, _)) = &self.best {
            let len = serial.len().min(best.len());
            if serial[..len].cmp(&best[..len]) == Ordering::Greater {
                return;
            }
        }
        if prefix.len() == n {
            match &self.best {
                None => self.best = Some((serial.clone(), prefix.clone())),
                Some((best, order)) => match serial.as_slice().cmp(best.as_slice()) {
                    Ordering::Less => self.best = Some((serial.clone(), prefix.clone())),
                    Ordering::Equal => {
                        let mut gamma = vec![0; n];
                        for k in 0..n {
                            gamma[order[k]] = prefix[k];
                        }
                        if gamma.iter().enumerate().any(|(i, &g)| i != g) {
                            self.autos.push(gamma);
                        }
                    }
                    Ordering::Greater => {}
                },
            }
            return;
        }
        let mut block = Vec::new();
        let mut min_block: Option<Vec<i64>> = None;
        let mut tied = Vec::new();
        for p in (0..n).filter(|&p| !placed[p]) {
            self.enc.block(p, prefix, &mut block);
            match min_block.as_ref().map(|m| block.cmp(m)) {
                None | Some(Ordering::Less) => {
                    min_block = Some(block.clone());
                    tied.clear();
                    tied.push(p);
                }
                Some(Ordering::Equal) => tied.push(p),
                Some(Ordering::Greater) => {}
            }
        }
        let min_block = min_block.expect("at least one unplaced point");
        let mut explored: Vec<usize> = Vec::new();
        for &c in &tied {
            if !explored.is_empty() {
                let mut uf = UnionFind::new(n);
                for g in self.autos.iter().filter(|g| prefix.iter().all(|&q| g[q] == q)) {
                    for (i, &gi) in g.iter().enumerate() {
                        uf.union(i, gi);
                    }
                }
                let rc = uf.find(c);
                if explored.iter().any(|&e| uf.find(e) == rc) {
                    continue;
                }
            }
            explored.push(c);
            let mark = serial.len();
            serial.extend_from_slice(&min_block);
            prefix.push(c);
            placed[c] = true;
            self.run(prefix, serial, placed);
            placed[c] = false;
            prefix.pop();
            serial.truncate(mark);
        }
    }
}

/// Canonical ordering and serialization of a space.
#[derive(Clone, Debug)]
pub struct CanonicalForm {
    /// `ordering[k]` is the point placed at canonical position `k`.
    pub ordering: Vec<usize>,
    pub serialization: Vec<i64>,
}

impl CanonicalForm {
    pub fn digest(&self) -> Digest {
        let mut h = Sha256::new();
        for t in &self.serialization {
            h.update(t.to_le_bytes());
        }
        Digest(h.finalize().into())
    }

    /// `ranks[p]` is the canonical position of point `p`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.ordering.len()];
        for (k, &p) in self.ordering.iter().enumerate() {
            r[p] = k;
        }
        r
    }
}

fn canonical_form_impl(space: &FiniteRmmSpace, rooted: bool, grid: f64) -> CanonicalForm {
    let enc = Encoded::new(space, rooted, grid);
    let mut search = CanonSearch { enc: &enc, best: None, autos: Vec::new() };
    let mut serial = enc.header.clone();
    let mut prefix = Vec::with_capacity(enc.n);
    let mut placed = vec![false; enc.n];
    if rooted {
        let mut block = Vec::new();
        enc.block(space.root(), &[], &mut block);
        serial.extend_from_slice(&block);
        prefix.push(space.root());
        placed[space.root()] = true;
    }
    search.run(&mut prefix, &mut serial, &mut placed);
    let (serialization, ordering) = search.best.expect("search visits at least one leaf");
    CanonicalForm { ordering, serialization }
}

/// Canonical form of the rooted, decorated space.
pub fn canonical_form(space: &FiniteRmmSpace, cfg: &CanonConfig) -> Result<CanonicalForm> {
    cfg.check(space.n())?;
    Ok(canonical_form_impl(space, true, cfg.grid))
}

/// Digest of the isomorphism class `[X, o, mu, decorations]`.
pub fn canonical_hash(space: &FiniteRmmSpace) -> Result<Digest> {
    canonical_hash_with(space, &CanonConfig::default())
}

pub fn canonical_hash_with(space: &FiniteRmmSpace, cfg: &CanonConfig) -> Result<Digest> {
    Ok(canonical_form(space, cfg)?.digest())
}

/// Root-independent canonical ranks of the points (the root is ignored).
/// Used for seeding per-point randomness; not subject to the size cap.
pub fn point_ranks(space: &FiniteRmmSpace) -> Vec<usize> {
    canonical_form_impl(space, false, DEFAULT_GRID).ranks()
}

struct IsoSearch<'a> {
    ea: &'a Encoded,
    eb: &'a Encoded,
    order: Vec<usize>,
    perm: Vec<usize>,
    used: Vec<bool>,
    fixed: BTreeMap<usize, usize>,
}

impl IsoSearch<'_> {
    fn compatible(&self, k: usize, x: usize, y: usize) -> bool {
        self.ea.colors[x] == self.eb.colors[y]
            && self.ea.labels[x] == self.eb.labels[y]
            && self.order[..k].iter().all(|&a| self.ea.qd(x, a) == self.eb.qd(y, self.perm[a]))
    }

    fn run(&mut self, k: usize) -> bool {
        if k == self.order.len() {
            return true;
        }
        let x = self.order[k];
        let candidates: Vec<usize> = match self.fixed.get(&x) {
            Some(&y) => vec![y],
            None => (0..self.eb.n).collect(),
        };
        for y in candidates {
            if self.used[y] || !self.compatible(k, x, y) {
                continue;
            }
            self.perm[x] = y;
            self.used[y] = true;
            if self.run(k + 1) {
                return true;
            }
            self.used[y] = false;
        }
        false
    }
}

fn find_isomorphism(
    a: &FiniteRmmSpace,
    b: &FiniteRmmSpace,
    rooted: bool,
    fixed: &[(usize, usize)],
    grid: f64,
) -> Option<IsomorphismWitness> {
    if a.n() != b.n() {
        return None;
    }
    let (ea, eb) = (Encoded::new(a, rooted, grid), Encoded::new(b, rooted, grid));
    if ea.header != eb.header {
        return None;
    }
    let mut ca = ea.colors.clone();
    let mut cb = eb.colors.clone();
    ca.sort_unstable();
    cb.sort_unstable();
    if ca != cb {
        return None;
    }
    let mut fixed: BTreeMap<usize, usize> = fixed.iter().copied().collect();
    let mut order = Vec::with_capacity(a.n());
    if rooted {
        fixed.insert(a.root(), b.root());
    }
    // prescribed points first, then ascending
    order.extend(fixed.keys().copied());
    order.extend((0..a.n()).filter(|x| !fixed.contains_key(x)));
    if rooted {
        order.retain(|&x| x != a.root());
        order.insert(0, a.root());
    }
    let mut s = IsoSearch { ea: &ea, eb: &eb, order, perm: vec![usize::MAX; a.n()], used: vec![false; a.n()], fixed };
    s.run(0).then_some(IsomorphismWitness { perm: s.perm })
}

/// Finds the first root-preserving isomorphism in the search order (root first,
/// remaining points ascending, candidates ascending), or `None`.
pub fn are_isomorphic(a: &FiniteRmmSpace, b: &FiniteRmmSpace) -> Result<Option<IsomorphismWitness>> {
    are_isomorphic_with(a, b, &CanonConfig::default())
}

pub fn are_isomorphic_with(
    a: &FiniteRmmSpace,
    b: &FiniteRmmSpace,
    cfg: &CanonConfig,
) -> Result<Option<IsomorphismWitness>> {
    cfg.check(a.n())?;
    cfg.check(b.n())?;
    Ok(find_isomorphism(a, b, true, &[], cfg.grid))
}

/// Automorphism group of the unrooted decorated space `(X, mu, decorations)`.
#[derive(Clone, Debug, Serialize)]
pub struct AutomorphismGroup {
    pub order: u128,
    /// `orbit_of[x]` is the smallest point in the orbit of `x`.
    pub orbit_of: Vec<usize>,
    /// `stabilizer_order[x] = |Stab(x)|`.
    pub stabilizer_order: Vec<u128>,
}

impl AutomorphismGroup {
    /// Smallest point of every orbit, ascending.
    pub fn representatives(&self) -> Vec<usize> {
        (0..self.orbit_of.len()).filter(|&x| self.orbit_of[x] == x).collect()
    }

    pub fn orbit_size(&self, x: usize) -> usize {
        let r = self.orbit_of[x];
        self.orbit_of.iter().filter(|&&o| o == r).count()
    }
}

/// Computes `|Aut|`, orbits and stabilizer orders by backtracking searches along
/// a stabilizer chain: `|G_{x1..x(k-1)}| = |orbit of xk| * |G_{x1..xk}|`.
pub fn automorphism_group(space: &FiniteRmmSpace, cfg: &CanonConfig) -> Result<AutomorphismGroup> {
    let n = space.n();
    cfg.check(n)?;
    let grid = cfg.grid;
    let exists = |fixed: &[(usize, usize)]| find_isomorphism(space, space, false, fixed, grid).is_some();

    let mut orbit_of: Vec<usize> = (0..n).collect();
    for x in 0..n {
        if orbit_of[x] != x {
            continue;
        }
        for y in (x + 1)..n {
            if orbit_of[y] == y && exists(&[(x, y)]) {
                orbit_of[y] = x;
            }
        }
    }

    let mut order: u128 = 1;
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    for x in 0..n {
        let mut orbit = 1u128;
        for y in 0..n {
            if y == x || fixed.iter().any(|&(f, _)| f == y) {
                continue;
            }
            let mut trial = fixed.clone();
            trial.push((x, y));
            if exists(&trial) {
                orbit += 1;
            }
        }
        order *= orbit;
        fixed.push((x, x));
    }
    let group = AutomorphismGroup { order, orbit_of, stabilizer_order: vec![0; n] };
    let stabilizer_order = (0..n).map(|x| order / group.orbit_size(x) as u128).collect();
    Ok(AutomorphismGroup { stabilizer_order, ..group })
}
