use mtplab::balancing::{blocking_pairs, stable_transport_values, verify_balancing};
use mtplab::ensemble::exact_expectation;
use mtplab::models::{build_exact, cycle, torus_grid, ModelSpec};
use mtplab::palm::palm_ensemble_exact;
use mtplab::seed::{derive, rng};
use mtplab::{Builtin, Decoration, FiniteRmmSpace, MeasureRef, NamedRecipe, RootedEnsemble};
use rand::Rng;

/// With one strict order on all pairs, the stable allocation is the greedy
/// fill: walk the pairs best first and move as much mass as both ends allow.
fn greedy_allocation(s: &FiniteRmmSpace, phi: &[f64], psi: &[f64], marks: &[f64]) -> Vec<Vec<f64>> {
    let n = s.n();
    let mut pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|x| (0..n).map(move |y| (x, y))).filter(|&(x, y)| phi[x] > 0.0 && psi[y] > 0.0).collect();
    pairs.sort_by_key(|&(x, y)| ((s.d(x, y) / 1e-9).round() as i64, marks[x].to_bits(), marks[y].to_bits()));
    let (mut left, mut room) = (phi.to_vec(), psi.to_vec());
    let mut out = vec![vec![0.0; n]; n];
    for (x, y) in pairs {
        let m = left[x].min(room[y]);
        if m > 0.0 {
            out[x][y] = m;
            left[x] -= m;
            room[y] -= m;
        }
    }
    out
}

fn random_masses(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut phi: Vec<f64> = (0..n).map(|_| if r.random_bool(0.6) { r.random_range(1..5) as f64 } else { 0.0 }).collect();
    let mut psi: Vec<f64> = (0..n).map(|_| if r.random_bool(0.6) { r.random_range(1..5) as f64 } else { 0.0 }).collect();
    phi[0] += 1.0;
    psi[n - 1] += 1.0;
    let (tp, tq): (f64, f64) = (phi.iter().sum(), psi.iter().sum());
    // integer totals keep the comparison exact
    if tp < tq {
        phi[0] += tq - tp;
    } else {
        psi[n - 1] += tp - tq;
    }
    let marks = (0..n).map(|_| r.random::<f64>()).collect();
    (phi, psi, marks)
}

#[test]
fn stable_transport_matches_greedy_oracle() {
    for i in 0..40u64 {
        let s = if i % 2 == 0 { cycle(3 + i as usize % 7).unwrap() } else { torus_grid(3, 3 + i as usize % 2).unwrap() };
        let (phi, psi, marks) = random_masses(s.n(), derive(77, i));
        let td = stable_transport_values(&s, &phi, &psi, &marks).unwrap();
        let oracle = greedy_allocation(&s, &phi, &psi, &marks);
        for x in 0..s.n() {
            for y in 0..s.n() {
                assert!((td.allocation(x, y) - oracle[x][y]).abs() < 1e-9, "instance {i}: ({x},{y})");
            }
        }
        assert!(verify_balancing(&td).passed);
        assert!(blocking_pairs(&td).is_stable());
    }
}

fn poisson_pmf(lambda: f64, k: usize) -> f64 {
    (0..k).fold((-lambda).exp(), |p, j| p * lambda / (j + 1) as f64)
}

/// Poisson counts of intensity `c` on C5, truncated at `cap` per point.
fn truncated_poisson_c5(c: f64, cap: usize) -> RootedEnsemble {
    let base = cycle(5).unwrap();
    let mut atoms = Vec::new();
    let mut counts = [0usize; 5];
    loop {
        let w: f64 = counts.iter().map(|&k| poisson_pmf(c, k)).product();
        let v = counts.iter().map(|&k| k as f64).collect();
        atoms.push((w, base.with_decoration("phi", Decoration::Measure(v)).unwrap()));
        let mut i = 0;
        while i < 5 && counts[i] == cap {
            counts[i] = 0;
            i += 1;
        }
        if i == 5 {
            break;
        }
        counts[i] += 1;
    }
    RootedEnsemble::from_weighted(atoms).unwrap().merged().unwrap()
}

#[test]
fn poisson_palm_adds_an_atom_at_the_root() {
    let c = 0.5;
    let e = truncated_poisson_c5(c, 5);
    let palm = palm_ensemble_exact(&e, &MeasureRef::parse("phi"), &Builtin::BalancedH).unwrap();
    assert!((palm.intensity - c).abs() < 1e-4);
    let at_root = |s: &FiniteRmmSpace| s.measure("phi").unwrap()[s.root()];
    let near = |s: &FiniteRmmSpace| {
        let phi = s.measure("phi").unwrap();
        (0..5).filter(|&y| s.d(s.root(), y) <= 1.0).map(|y| phi[y]).sum::<f64>()
    };
    let total = |s: &FiniteRmmSpace| s.measure("phi").unwrap().iter().sum::<f64>();
    for (name, f) in [("at_root", &at_root as &dyn Fn(&FiniteRmmSpace) -> f64), ("ball", &near), ("total", &total)] {
        let lhs = exact_expectation(&palm.palm, f).unwrap();
        let rhs = exact_expectation(&e, f).unwrap() + 1.0;
        assert!((lhs - rhs).abs() < 1e-3, "{name}: {lhs} vs {rhs}");
    }
    // at the root the Palm law of the truncated process is the size-biased
    // truncated count, so its moments are known exactly
    let pmf: Vec<f64> = (0..=5).map(|k| poisson_pmf(c, k)).collect();
    let moment = |j: i32| pmf.iter().enumerate().map(|(k, p)| p * (k as f64).powi(j)).sum::<f64>();
    for j in 1..=3 {
        let lhs = exact_expectation(&palm.palm, |s| at_root(s).powi(j)).unwrap();
        let rhs = moment(j + 1) / moment(1);
        assert!((lhs - rhs).abs() < 1e-9, "moment {j}: {lhs} vs {rhs}");
    }
}

#[test]
fn fixed_subset_sees_uniform_root() {
    let spec = ModelSpec::new("cycle", &[6]).with_recipe(NamedRecipe::fixed("psi", vec![0, 3]));
    let e = build_exact(&spec).unwrap();
    let at_root = exact_expectation(&e, |s| s.measure("psi").unwrap()[s.root()]).unwrap();
    assert!((at_root - 1.0 / 3.0).abs() < 1e-12);
    let palm = palm_ensemble_exact(&e, &MeasureRef::parse("psi"), &Builtin::BalancedH).unwrap();
    assert!((palm.intensity - 1.0 / 3.0).abs() < 1e-12);
    let charged = exact_expectation(&palm.palm, |s| s.measure("psi").unwrap()[s.root()]).unwrap();
    assert!((charged - 1.0).abs() < 1e-12);
}
