//! Fixtures shared by the benchmarks.

use mtplab::models::{build_exact, cycle, petersen, torus_grid, ModelSpec};
use mtplab::{FiniteRmmSpace, NamedRecipe, RootedEnsemble};

/// Spaces of a few sizes with counting measure.
pub fn spaces() -> Vec<(&'static str, FiniteRmmSpace)> {
    vec![
        ("cycle8", cycle(8).expect("cycle")),
        ("torus3x4", torus_grid(3, 4).expect("torus")),
        ("petersen", petersen().expect("petersen")),
    ]
}

/// Bernoulli-decorated exact law on a cycle.
pub fn bernoulli_cycle(n: usize, p: f64) -> RootedEnsemble {
    build_exact(&ModelSpec::new("cycle", &[n]).with_recipe(NamedRecipe::bernoulli("phi", p))).expect("exact law")
}
