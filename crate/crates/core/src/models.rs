//! Model zoo, model descriptions and seeded samplers.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canon::point_ranks;
use crate::ensemble::{
    class_uniform_rooting, quasi_transitive_unimodularization, uniform_rooting, RootedEnsemble,
};
use crate::error::{Error, Result};
use crate::process::{apply_recipes_ranked, attach_fixed, enumerate_recipes, pick_atom, NamedRecipe};
use crate::seed::{derive, rng};
use crate::space::FiniteRmmSpace;

pub fn cycle(n: usize) -> Result<FiniteRmmSpace> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("cycle needs at least 3 points, got {n}")));
    }
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    FiniteRmmSpace::from_graph(n, &edges)
}

pub fn path(n: usize) -> Result<FiniteRmmSpace> {
    if n < 1 {
        return Err(Error::InvalidParameter("path needs at least 1 point".into()));
    }
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    FiniteRmmSpace::from_graph(n, &edges)
}

/// Discrete torus `Z_a x Z_b`; point `(i, j)` has index `i * b + j`.
pub fn torus_grid(a: usize, b: usize) -> Result<FiniteRmmSpace> {
    if a < 3 || b < 3 {
        return Err(Error::InvalidParameter(format!("torus sides must be at least 3, got {a}x{b}")));
    }
    let mut edges = Vec::with_capacity(2 * a * b);
    for i in 0..a {
        for j in 0..b {
            edges.push((i * b + j, ((i + 1) % a) * b + j));
            edges.push((i * b + j, i * b + (j + 1) % b));
        }
    }
    FiniteRmmSpace::from_graph(a * b, &edges)
}

/// Star `K_{1,k}` with centre 0.
pub fn star(k: usize) -> Result<FiniteRmmSpace> {
    if k < 1 {
        return Err(Error::InvalidParameter("star needs at least one leaf".into()));
    }
    let edges: Vec<_> = (1..=k).map(|i| (0, i)).collect();
    FiniteRmmSpace::from_graph(k + 1, &edges)
}

/// Petersen graph: outer 5-cycle 0..5, inner pentagram 5..10, spokes `i -- i+5`.
pub fn petersen() -> Result<FiniteRmmSpace> {
    let mut edges = Vec::new();
    for i in 0..5 {
        edges.push((i, (i + 1) % 5));
        edges.push((5 + i, 5 + (i + 2) % 5));
        edges.push((i, i + 5));
    }
    FiniteRmmSpace::from_graph(10, &edges)
}

/// Labelled tree from a Prüfer code over `0..code.len() + 2`.
pub fn tree_from_prufer(code: &[usize]) -> Result<FiniteRmmSpace> {
    let n = code.len() + 2;
    if let Some(&bad) = code.iter().find(|&&c| c >= n) {
        return Err(Error::IndexOutOfRange { index: bad, n });
    }
    let mut degree = vec![1usize; n];
    for &c in code {
        degree[c] += 1;
    }
    let mut leaves: std::collections::BTreeSet<usize> = (0..n).filter(|&x| degree[x] == 1).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &c in code {
        let leaf = *leaves.iter().next().expect("a Prüfer sequence always leaves a leaf");
        leaves.remove(&leaf);
        edges.push((leaf, c));
        degree[c] -= 1;
        if degree[c] == 1 {
            leaves.insert(c);
        }
    }
    let rest: Vec<usize> = leaves.into_iter().collect();
    edges.push((rest[0], rest[1]));
    FiniteRmmSpace::from_graph(n, &edges)
}

/// Uniform labelled tree on `n` points (Cayley), rooted uniformly.
pub fn uniform_tree<R: Rng>(n: usize, rng: &mut R) -> Result<FiniteRmmSpace> {
    match n {
        0 => Err(Error::InvalidParameter("tree needs at least 1 point".into())),
        1 => path(1),
        2 => path(2).map(|s| s.rooted_at(rng.random_range(0..2))),
        _ => {
            let code: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
            let root = rng.random_range(0..n);
            Ok(tree_from_prufer(&code)?.rooted_at(root))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureRule {
    #[default]
    Counting,
    Custom(Vec<f64>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rooting {
    /// Root law proportional to the measure.
    #[default]
    Uniform,
    /// Orbit representatives weighted by `mu / |Stab|`.
    QuasiTransitive,
    /// Uniform over root orbits (generally not unimodular).
    ClassUniform,
    /// Deterministic root.
    Fixed(usize),
}

/// Declarative model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: String,
    #[serde(default)]
    pub size: Vec<usize>,
    #[serde(default)]
    pub measure: MeasureRule,
    #[serde(default)]
    pub rooting: Rooting,
    #[serde(default)]
    pub decorations: Vec<NamedRecipe>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub file: Option<PathBuf>,
}

impl ModelSpec {
    pub fn new(model: &str, size: &[usize]) -> Self {
        ModelSpec {
            model: model.into(),
            size: size.to_vec(),
            measure: MeasureRule::Counting,
            rooting: Rooting::Uniform,
            decorations: Vec::new(),
            seed: None,
            file: None,
        }
    }

    pub fn with_rooting(mut self, r: Rooting) -> Self {
        self.rooting = r;
        self
    }

    pub fn with_recipe(mut self, r: NamedRecipe) -> Self {
        self.decorations.push(r);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn size_arg(&self, i: usize, what: &str) -> Result<usize> {
        self.size
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("model `{}` needs size parameter `{what}`", self.model)))
    }

    /// Builds the unrooted base space for deterministic models.
    pub fn base_space(&self) -> Result<FiniteRmmSpace> {
        let s = match self.model.as_str() {
            "cycle" => cycle(self.size_arg(0, "n")?)?,
            "path" => path(self.size_arg(0, "n")?)?,
            "torus_grid" => {
                let a = self.size_arg(0, "rows")?;
                torus_grid(a, self.size.get(1).copied().unwrap_or(a))?
            }
            "star" => star(self.size_arg(0, "leaves")?)?,
            "petersen" => petersen()?,
            "custom_file" => {
                let path = self.file.as_ref().ok_or_else(|| Error::InvalidParameter("custom_file needs `file`".into()))?;
                FiniteRmmSpace::load(path)?
            }
            "uniform_tree" => {
                return Err(Error::InvalidParameter("uniform_tree is random; use a sampler".into()));
            }
            other => return Err(Error::UnknownModel(other.to_string())),
        };
        match &self.measure {
            MeasureRule::Counting if self.model == "custom_file" => Ok(s),
            MeasureRule::Counting => s.with_measure(vec![1.0; s.n()]),
            MeasureRule::Custom(mu) => {
                let s = s.with_measure(mu.clone())?;
                s.ensure_valid()?;
                Ok(s)
            }
        }
    }

    fn rooted(&self, s: &FiniteRmmSpace) -> Result<RootedEnsemble> {
        match self.rooting {
            Rooting::Uniform => uniform_rooting(s),
            Rooting::QuasiTransitive => quasi_transitive_unimodularization(s),
            Rooting::ClassUniform => class_uniform_rooting(s),
            Rooting::Fixed(j) => Ok(RootedEnsemble::single(s.reroot(j)?)),
        }
    }
}

/// Seeded source of random rooted spaces. A draw is a pure function of
/// `(seed, index)`.
pub trait Sampler: Send + Sync {
    fn draw(&self, seed: u64, index: u64) -> Result<FiniteRmmSpace>;

    fn describe(&self) -> String;
}

/// Draws a root class from an exact ensemble, then applies decoration recipes.
pub struct EnsembleSampler {
    ensemble: RootedEnsemble,
    ranks: Vec<Vec<usize>>,
    recipes: Vec<NamedRecipe>,
    name: String,
}

impl EnsembleSampler {
    pub fn new(ensemble: RootedEnsemble, recipes: Vec<NamedRecipe>, name: impl Into<String>) -> Result<Self> {
        for r in &recipes {
            r.validate()?;
        }
        let ranks = ensemble.atoms().iter().map(|a| point_ranks(&a.space)).collect();
        Ok(EnsembleSampler { ensemble, ranks, recipes, name: name.into() })
    }

    pub fn ensemble(&self) -> &RootedEnsemble {
        &self.ensemble
    }
}

impl Sampler for EnsembleSampler {
    fn draw(&self, seed: u64, index: u64) -> Result<FiniteRmmSpace> {
        let s = derive(seed, index);
        let i = pick_atom(&self.ensemble, rng(s).random::<f64>());
        apply_recipes_ranked(&self.ensemble.atoms()[i].space, &self.ranks[i], &self.recipes, derive(s, 1))
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// Uniform labelled tree with uniform root and counting measure.
pub struct TreeSampler {
    pub n: usize,
    pub recipes: Vec<NamedRecipe>,
}

impl Sampler for TreeSampler {
    fn draw(&self, seed: u64, index: u64) -> Result<FiniteRmmSpace> {
        let s = derive(seed, index);
        let t = uniform_tree(self.n, &mut rng(s))?;
        let ranks = point_ranks(&t);
        apply_recipes_ranked(&t, &ranks, &self.recipes, derive(s, 1))
    }

    fn describe(&self) -> String {
        format!("uniform_tree({})", self.n)
    }
}

/// Either an exact law or a sampler.
pub enum Model {
    Exact(RootedEnsemble),
    Sampler(Box<dyn Sampler>),
}

impl Model {
    pub fn exact(&self) -> Option<&RootedEnsemble> {
        match self {
            Model::Exact(e) => Some(e),
            Model::Sampler(_) => None,
        }
    }

    pub fn sampler(&self) -> Option<&dyn Sampler> {
        match self {
            Model::Exact(_) => None,
            Model::Sampler(s) => Some(s.as_ref()),
        }
    }
}

/// Exact ensembles for deterministic undecorated models, samplers otherwise.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    if spec.model == "uniform_tree" {
        let n = spec.size_arg(0, "n")?;
        if n == 0 {
            return Err(Error::InvalidParameter("tree needs at least 1 point".into()));
        }
        for r in &spec.decorations {
            r.validate()?;
        }
        return Ok(Model::Sampler(Box::new(TreeSampler { n, recipes: spec.decorations.clone() })));
    }
    let e = spec.rooted(&attach_fixed(&spec.base_space()?, &spec.decorations)?)?;
    if spec.decorations.is_empty() {
        Ok(Model::Exact(e))
    } else {
        let name = format!("{}{:?}", spec.model, spec.size);
        Ok(Model::Sampler(Box::new(EnsembleSampler::new(e, spec.decorations.clone(), name)?)))
    }
}

/// Exact decorated law: deterministic model with finitely supported recipes
/// enumerated configuration by configuration.
pub fn build_exact(spec: &ModelSpec) -> Result<RootedEnsemble> {
    let e = spec.rooted(&attach_fixed(&spec.base_space()?, &spec.decorations)?)?;
    if spec.decorations.is_empty() {
        Ok(e)
    } else {
        enumerate_recipes(&e, &spec.decorations)
    }
}

/// Deterministic zoo used by the exact test suites (all spaces have at most
/// 12 points).
pub fn zoo() -> Vec<(String, FiniteRmmSpace)> {
    let mut out = Vec::new();
    for n in [3, 4, 5, 6, 8] {
        out.push((format!("cycle({n})"), cycle(n).expect("valid cycle")));
    }
    for n in [1, 2, 3, 4, 6] {
        out.push((format!("path({n})"), path(n).expect("valid path")));
    }
    for k in [2, 3, 5] {
        out.push((format!("star({k})"), star(k).expect("valid star")));
    }
    out.push(("torus_grid(3x3)".into(), torus_grid(3, 3).expect("valid torus")));
    out.push(("torus_grid(3x4)".into(), torus_grid(3, 4).expect("valid torus")));
    out.push(("petersen".into(), petersen().expect("valid petersen")));
    out
}
