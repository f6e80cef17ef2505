//! Acceptance suite. Runs without the libtest harness so that the verdict
//! lines are always printed; exits non-zero when any criterion fails.

use std::time::{Duration, Instant};

use mtplab::balancing::{blocking_pairs, extra_head_demo, stable_transport_values, verify_balancing};
use mtplab::ensemble::{
    class_uniform_rooting, class_weight_distance, degree_biased, quasi_transitive_unimodularization,
    reroot_by_kernel, uniform_rooting, RootedEnsemble,
};
use mtplab::ghp::{ghp_bruteforce, ghp_upper, scaling_cauchy_demo, GhpOptions, ScalingModel, ScalingRule};
use mtplab::models::{build_exact, cycle, path, star, torus_grid, zoo, ModelSpec};
use mtplab::observable::Observable;
use mtplab::palm::{campbell_check, exchange_check, palm_ensemble_exact, palm_inversion_check, palm_mtp_check};
use mtplab::process::{palm_of_poisson_check, Functional, NamedRecipe};
use mtplab::report::MtpReport;
use mtplab::seed::{derive, derive_named, rng};
use mtplab::space::{FiniteRmmSpace, MeasureRef};
use mtplab::transport::{battery, build_h_balanced, decorated_battery, mtp_check_exact, Builtin, TransportFunction};
use mtplab::walks::{
    ergodic_average_check, kernel_from_transport, nearest_neighbor_kernel, occupation_check, reversibility_check,
    simulate_walk,
};
use mtplab::Error;
use rand::seq::SliceRandom;
use rand::Rng;

const EXACT_TOL: f64 = 1e-9;
const Z: f64 = 4.0;
const MASTER_SEED: u64 = 20_240_601;
const MC_TRIALS: u64 = 100_000;

struct Outcome {
    ok: bool,
    detail: String,
}

impl Outcome {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Outcome { ok, detail: detail.into() }
    }
}

fn failing(reports: &[MtpReport]) -> Vec<String> {
    reports
        .iter()
        .filter(|r| !r.passed())
        .take(5)
        .map(|r| format!("{}: {} vs {} ({:?})", r.check, r.lhs, r.rhs, r.flags))
        .collect()
}

fn zoo_ensembles() -> Vec<(String, RootedEnsemble)> {
    let mut out = Vec::new();
    for (name, s) in zoo() {
        out.push((format!("{name}/uniform"), uniform_rooting(&s).unwrap()));
        out.push((format!("{name}/quasi_transitive"), quasi_transitive_unimodularization(&s).unwrap()));
    }
    out
}

fn c1_exact_mtp() -> Outcome {
    let gs = battery();
    let mut reports = Vec::new();
    for (name, e) in zoo_ensembles() {
        for g in &gs {
            let mut r = mtp_check_exact(&e, g).unwrap();
            r.check = format!("{name}:{}", r.check);
            reports.push(r);
        }
    }
    let worst = reports.iter().map(|r| r.abs_diff).fold(0.0, f64::max);
    let bad = failing(&reports);
    Outcome::new(
        bad.is_empty() && gs.len() >= 20,
        format!("{} checks, {} transports, max |lhs-rhs| = {worst:e} {bad:?}", reports.len(), gs.len()),
    )
}

fn c2_negative_controls() -> Outcome {
    let controls: Vec<(&str, RootedEnsemble)> = vec![
        ("star(3)/class_uniform", class_uniform_rooting(&star(3).unwrap()).unwrap()),
        ("path(3)/class_uniform", class_uniform_rooting(&path(3).unwrap()).unwrap()),
        ("star(5)/centre", RootedEnsemble::single(star(5).unwrap())),
        ("path(3)/endpoint", RootedEnsemble::single(path(3).unwrap())),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, e) in &controls {
        let worst = battery()
            .iter()
            .map(|g| mtp_check_exact(e, g).unwrap())
            .max_by(|a, b| a.abs_diff.total_cmp(&b.abs_diff))
            .unwrap();
        ok &= !worst.passed() && worst.abs_diff >= 0.1;
        lines.push(format!("{name}: {} {} vs {}", worst.check, worst.lhs, worst.rhs));
    }
    // centre-to-leaf transport on the class-uniform star: 1.5 out, 0.5 in
    let r = mtp_check_exact(&controls[0].1, &Builtin::DegreeGreater).unwrap();
    ok &= (r.lhs - 1.5).abs() <= EXACT_TOL && (r.rhs - 0.5).abs() <= EXACT_TOL;
    lines.push(format!("star(3) degree_greater: {} vs {}", r.lhs, r.rhs));
    Outcome::new(ok, lines.join("; "))
}

fn random_graph_space(n: usize, seed: u64) -> FiniteRmmSpace {
    let mut r = rng(seed);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (r.random_range(0..v), v)).collect();
    for _ in 0..r.random_range(0..=n) {
        edges.push((r.random_range(0..n), r.random_range(0..n)));
    }
    let s = FiniteRmmSpace::from_graph(n, &edges).unwrap();
    let mu = (0..n).map(|_| r.random_range(0.1..3.0)).collect();
    s.with_measure(mu).unwrap().reroot(r.random_range(0..n)).unwrap()
}

fn random_euclidean_space(n: usize, seed: u64) -> FiniteRmmSpace {
    let mut r = rng(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
    let dist =
        pts.iter().map(|p| pts.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).collect()).collect();
    let mu = (0..n).map(|_| r.random_range(0.1..3.0)).collect();
    FiniteRmmSpace::new(dist, mu, r.random_range(0..n)).unwrap()
}

fn c3_balancing_kernel() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut min_h = f64::INFINITY;
    let mut symmetric = true;
    for i in 0..100u64 {
        let n = 1 + (i as usize % 10);
        let s = if i % 2 == 0 {
            random_graph_space(n, derive(MASTER_SEED, i))
        } else {
            random_euclidean_space(n, derive(MASTER_SEED, i))
        };
        let h = build_h_balanced(&s, None).unwrap();
        for u in 0..n {
            let out: f64 = (0..n).map(|v| h.get(u, v) * s.mu()[v]).sum();
            let inn: f64 = (0..n).map(|v| h.get(v, u) * s.mu()[v]).sum();
            worst = worst.max((out - 1.0).abs()).max((inn - 1.0).abs());
            for v in 0..n {
                symmetric &= h.get(u, v) == h.get(v, u);
                min_h = min_h.min(h.get(u, v));
            }
        }
    }
    Outcome::new(
        symmetric && min_h > 0.0 && worst <= EXACT_TOL,
        format!("100 spaces, symmetric={symmetric}, min h = {min_h:e}, max |h±-1| = {worst:e}"),
    )
}

fn c4_rerooting() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (_, e) in zoo_ensembles() {
        let moved = reroot_by_kernel(&e, |s| kernel_from_transport(s, &Builtin::BalancedH, None)).unwrap();
        worst = worst.max(class_weight_distance(&moved, &e).unwrap());
        count += 1;
        if e.atoms()[0].space.n() < 2 {
            continue;
        }
        let biased = degree_biased(&e).unwrap();
        let moved = reroot_by_kernel(&biased, |s| nearest_neighbor_kernel(s, 0.0)).unwrap();
        worst = worst.max(class_weight_distance(&moved, &biased).unwrap());
        count += 1;
    }
    Outcome::new(worst <= EXACT_TOL, format!("{count} ensembles, max class-weight difference = {worst:e}"))
}

fn palm_spec(space_name: &str, p: f64, n: usize) -> ModelSpec {
    let (model, size) = parse_zoo_name(space_name);
    let mut fixed: Vec<usize> = vec![0, n / 2];
    fixed.dedup();
    ModelSpec::new(&model, &size)
        .with_recipe(NamedRecipe::pair(NamedRecipe::bernoulli("phi", p), NamedRecipe::fixed("psi", fixed)))
}

fn parse_zoo_name(name: &str) -> (String, Vec<usize>) {
    match name.split_once('(') {
        None => (name.to_string(), Vec::new()),
        Some((m, rest)) => {
            let size = rest.trim_end_matches(')').split('x').map(|v| v.parse().unwrap()).collect();
            (m.to_string(), size)
        }
    }
}

fn c5_palm_suite() -> Outcome {
    let h = Builtin::BalancedH;
    let gs = [
        Builtin::BallIndicator { r: 1.0 },
        Builtin::DistancePower { a: 1.0 },
        Builtin::Random { seed: 3 },
    ];
    let mut reports = Vec::new();
    let mut laws = 0;
    for (name, s) in zoo() {
        for p in [1.0 / 3.0, 0.5, 2.0 / 3.0] {
            let e = build_exact(&palm_spec(&name, p, s.n())).unwrap();
            laws += 1;
            let (phi, psi) = (MeasureRef::parse("phi"), MeasureRef::parse("psi"));
            for g in gs.iter().cloned().chain(decorated_battery("psi").into_iter().take(2)) {
                reports.push(campbell_check(&e, &phi, &g, &h).unwrap());
                reports.push(exchange_check(&e, &phi, &psi, &g, &h).unwrap());
                reports.push(palm_mtp_check(&e, &phi, &h, &g).unwrap());
                reports.push(palm_mtp_check(&e, &psi, &h, &g).unwrap());
            }
            reports.push(palm_inversion_check(&e, "phi", &h).unwrap());
            reports.push(palm_inversion_check(&e, "psi", &h).unwrap());
        }
    }
    let bad = failing(&reports);
    let worst = reports.iter().map(|r| r.abs_diff).fold(0.0, f64::max);
    Outcome::new(bad.is_empty(), format!("{laws} laws, {} checks, max |lhs-rhs| = {worst:e} {bad:?}", reports.len()))
}

fn c6_h_independence() -> Outcome {
    let mut worst_class: f64 = 0.0;
    let mut worst_lambda: f64 = 0.0;
    let mut count = 0;
    for (name, s) in zoo() {
        let e = build_exact(&palm_spec(&name, 0.5, s.n())).unwrap();
        for phi in ["phi", "psi"] {
            let m = MeasureRef::parse(phi);
            let a = palm_ensemble_exact(&e, &m, &Builtin::BalancedH).unwrap();
            let b = palm_ensemble_exact(&e, &m, &Builtin::UniformH).unwrap();
            worst_class = worst_class.max(class_weight_distance(&a.palm, &b.palm).unwrap());
            worst_lambda = worst_lambda.max((a.intensity - b.intensity).abs());
            count += 1;
        }
    }
    Outcome::new(
        worst_class <= EXACT_TOL && worst_lambda <= EXACT_TOL,
        format!("{count} Palm laws, max class difference = {worst_class:e}, max intensity difference = {worst_lambda:e}"),
    )
}

fn poisson_functionals() -> Vec<Observable> {
    ["at_root:phi", "total:phi", "ball:phi:r=1", "ball:phi:r=2", "nearest:phi"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect()
}

fn as_functionals(obs: &[Observable]) -> Vec<(String, Box<Functional<'_>>)> {
    obs.iter()
        .map(|o| (o.to_string(), Box::new(move |s: &FiniteRmmSpace| o.eval_or_nan(s)) as Box<Functional<'_>>))
        .collect()
}

fn c7_palm_of_poisson(seed: u64) -> (Outcome, String) {
    let obs = poisson_functionals();
    let fs = as_functionals(&obs);
    let refs: Vec<(&str, &Functional<'_>)> = fs.iter().map(|(n, f)| (n.as_str(), f.as_ref())).collect();
    let mut reports = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, s) in [("cycle(5)", cycle(5).unwrap()), ("torus_grid(3x3)", torus_grid(3, 3).unwrap())] {
        let e = uniform_rooting(&s).unwrap();
        for c in [0.5, 1.0, 2.0] {
            let rs =
                palm_of_poisson_check(&e, c, &Builtin::BalancedH, &refs, MC_TRIALS, derive_named(seed, name, (c * 2.0) as u64))
                    .unwrap();
            // count at the root: Poisson mean c mu({o}) plus the added atom
            let at_root = &rs[0];
            let expected = c + 1.0;
            let dev = (at_root.rhs - expected).abs();
            let within = dev <= Z * at_root.se_rhs.unwrap_or(0.0) + 1e-12;
            ok &= within;
            if !within {
                notes.push(format!("{name} c={c}: count at root {} vs {expected}", at_root.rhs));
            }
            reports.extend(rs);
        }
    }
    let bad = failing(&reports);
    ok &= bad.is_empty();
    let json = serde_json::to_string(&reports).unwrap();
    (Outcome::new(ok, format!("{} reports at z = {Z}, {MC_TRIALS} trials each {bad:?} {notes:?}", reports.len())), json)
}

fn c8_walks(seed: u64) -> (Outcome, String) {
    let h = Builtin::BalancedH;
    let mut exact = Vec::new();
    let fs = [Builtin::DistancePower { a: 1.0 }, Builtin::Random { seed: 1 }, Builtin::DegreeGreater];
    for (name, e) in zoo_ensembles() {
        for g in &fs {
            let mut r = reversibility_check(&e, &h, |s, u, v| g.eval(s, u, v).unwrap()).unwrap();
            r.check = format!("{name}:{}", g.name());
            exact.push(r);
        }
    }
    let mut mc = Vec::new();
    for (i, s) in [cycle(5).unwrap(), star(3).unwrap(), random_graph_space(8, derive(seed, 99))].iter().enumerate() {
        let k = kernel_from_transport(s, &h, None).unwrap();
        let trace = simulate_walk(s, &k, 100_000, derive(seed, i as u64)).unwrap();
        mc.extend(occupation_check(&trace, 50));
    }
    let star_law = uniform_rooting(&star(3).unwrap()).unwrap();
    let erg =
        ergodic_average_check(&star_law, &h, |s| s.degree(s.root()) as f64, 10_000, 200, derive(seed, 7)).unwrap();
    let erg_ok = erg.passed() && (erg.rhs - 1.5).abs() <= EXACT_TOL;
    let bad_exact = failing(&exact);
    let bad_mc = failing(&mc);
    let ok = bad_exact.is_empty() && bad_mc.is_empty() && erg_ok;
    let json = serde_json::to_string(&(&mc, &erg)).unwrap();
    (
        Outcome::new(
            ok,
            format!(
                "{} reversibility checks, {} occupation checks, ergodic deg on star = {:.5} ± {:.5} (exact {}) {bad_exact:?} {bad_mc:?}",
                exact.len(),
                mc.len(),
                erg.lhs,
                erg.se_lhs.unwrap_or(f64::NAN),
                erg.rhs
            ),
        ),
        json,
    )
}

fn c9_stable_transport() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut blocking = 0;
    let mut exhaustive = true;
    for i in 0..50u64 {
        let mut r = rng(derive(MASTER_SEED ^ 0x51AB, i));
        let n = r.random_range(2..=64);
        let s = if i % 2 == 0 { random_euclidean_space(n, derive(MASTER_SEED, 1000 + i)) } else { random_graph_space(n, derive(MASTER_SEED, 1000 + i)) };
        let mut phi: Vec<f64> = (0..n).map(|_| if r.random_bool(0.6) { r.random_range(0.1..2.0) } else { 0.0 }).collect();
        let mut psi: Vec<f64> = (0..n).map(|_| if r.random_bool(0.6) { r.random_range(0.1..2.0) } else { 0.0 }).collect();
        phi[0] = phi[0].max(0.5);
        psi[n - 1] = psi[n - 1].max(0.5);
        let scale = phi.iter().sum::<f64>() / psi.iter().sum::<f64>();
        psi.iter_mut().for_each(|x| *x *= scale);
        let mut marks: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect();
        marks.shuffle(&mut r);
        let td = stable_transport_values(&s, &phi, &psi, &marks).unwrap();
        let b = verify_balancing(&td);
        worst = worst.max(b.max_row_residual).max(b.max_col_residual);
        let cert = blocking_pairs(&td);
        blocking += cert.blocking_pairs.len();
        exhaustive &= cert.exhausted;
    }
    let s = cycle(4).unwrap();
    let refused = matches!(
        stable_transport_values(&s, &[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 2.0, 0.0], &[0.1, 0.2, 0.3, 0.4]),
        Err(Error::UnequalTotals { .. })
    );
    Outcome::new(
        worst <= EXACT_TOL && blocking == 0 && exhaustive && refused,
        format!("50 instances, max residual = {worst:e}, blocking pairs = {blocking}, unequal totals refused = {refused}"),
    )
}

fn c10_extra_head(seed: u64) -> (Outcome, String) {
    let s = torus_grid(4, 4).unwrap();
    let obs: Vec<Observable> =
        ["at_root:phi", "ball:phi:r=1", "ball:phi:r=2", "nearest:phi"].iter().map(|x| x.parse().unwrap()).collect();
    let fs = as_functionals(&obs);
    let refs: Vec<(&str, &Functional<'_>)> = fs.iter().map(|(n, f)| (n.as_str(), f.as_ref())).collect();
    let rep = extra_head_demo(&s, 0.5, &Builtin::BalancedH, &refs, MC_TRIALS, seed).unwrap();
    let bad = failing(&rep.reports);
    let ok = rep.passed() && rep.target_count == 8;
    let json = serde_json::to_string(&rep).unwrap();
    let detail = format!(
        "{} functionals, target count {}, root charged after re-rooting = {}, mean attempts {:.2} {bad:?}",
        rep.reports.len(),
        rep.target_count,
        rep.rerooted_in_support,
        rep.mean_attempts
    );
    (Outcome::new(ok, detail), json)
}

fn c11_ghp() -> Outcome {
    let opts = GhpOptions::default();
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, s) in zoo().into_iter().filter(|(_, s)| s.n() <= 6) {
        let d = ghp_upper(&s, &s, opts).unwrap().value;
        ok &= d == 0.0;
        if d != 0.0 {
            notes.push(format!("self distance of {name} = {d}"));
        }
    }
    let one = |m: f64| FiniteRmmSpace::new(vec![vec![0.0]], vec![m], 0).unwrap();
    let gap = ghp_upper(&one(1.0), &one(2.0), opts).unwrap().value;
    ok &= (gap - 1.0).abs() <= 1e-3;
    let table = scaling_cauchy_demo(ScalingModel::Path, &[4, 8, 16, 32], ScalingRule::Linear, opts, 0).unwrap();
    let d16 = table.rows.iter().find(|r| r.n == 16 && r.next == 32).map(|r| r.distance).unwrap();
    ok &= table.decreasing && d16 <= 0.1;
    let mut agree = 0;
    for i in 0..20u64 {
        let mut r = rng(derive(MASTER_SEED ^ 0x6770, i));
        let (na, nb) = (r.random_range(1..=4), r.random_range(1..=4));
        let a = random_euclidean_space(na, derive(MASTER_SEED, 2000 + i));
        let b = if i % 3 == 0 { random_graph_space(nb, derive(MASTER_SEED, 3000 + i)) } else { random_euclidean_space(nb, derive(MASTER_SEED, 3000 + i)) };
        let up = ghp_upper(&a, &b, opts).unwrap().value;
        let brute = ghp_bruteforce(&a, &b, opts.grid).unwrap();
        if (up - brute).abs() <= 1e-12 {
            agree += 1;
        } else {
            notes.push(format!("pair {i}: upper {up} vs brute {brute}"));
        }
    }
    ok &= agree == 20;
    let dists: Vec<f64> = table.rows.iter().map(|r| r.distance).collect();
    Outcome::new(ok, format!("mass gap = {gap}, path table {dists:?}, d(P16,P32) = {d16}, oracle agreement {agree}/20 {notes:?}"))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
}

fn report(c: &Criterion, out: &Outcome, elapsed: Duration) -> bool {
    let in_time = c.limit.is_none_or(|l| elapsed <= l);
    let ok = out.ok && in_time;
    let limit = c.limit.map_or(String::new(), |l| format!(" (limit {:.0}s)", l.as_secs_f64()));
    println!(
        "criterion {:>2} {:<28} {} in {:.2}s{limit}: {}",
        c.id,
        c.name,
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        out.detail
    );
    ok
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    let secs = |s: u64| Some(Duration::from_secs(s));
    let mut all = true;

    let simple: Vec<(Criterion, fn() -> Outcome)> = vec![
        (Criterion { id: 1, name: "exact MTP suite", limit: secs(10) }, c1_exact_mtp),
        (Criterion { id: 2, name: "negative controls", limit: None }, c2_negative_controls),
        (Criterion { id: 3, name: "balancing kernel", limit: secs(5) }, c3_balancing_kernel),
        (Criterion { id: 4, name: "re-rooting invariance", limit: None }, c4_rerooting),
        (Criterion { id: 5, name: "Palm suite", limit: secs(60) }, c5_palm_suite),
        (Criterion { id: 6, name: "Palm h-independence", limit: None }, c6_h_independence),
    ];
    for (c, f) in &simple {
        let (out, t) = timed(f);
        all &= report(c, &out, t);
    }

    let ((o7, j7), t7) = timed(|| c7_palm_of_poisson(MASTER_SEED));
    all &= report(&Criterion { id: 7, name: "Palm of Poisson", limit: secs(60) }, &o7, t7);
    let ((o8, j8), t8) = timed(|| c8_walks(MASTER_SEED));
    all &= report(&Criterion { id: 8, name: "random walks", limit: None }, &o8, t8);
    let (o9, t9) = timed(c9_stable_transport);
    all &= report(&Criterion { id: 9, name: "stable transport", limit: secs(30) }, &o9, t9);
    let ((o10, j10), t10) = timed(|| c10_extra_head(MASTER_SEED));
    all &= report(&Criterion { id: 10, name: "extra-head scheme", limit: None }, &o10, t10);
    let (o11, t11) = timed(c11_ghp);
    all &= report(&Criterion { id: 11, name: "GHP demos", limit: secs(30) }, &o11, t11);

    let (same, t12) = timed(|| {
        [
            (7, j7 == c7_palm_of_poisson(MASTER_SEED).1),
            (8, j8 == c8_walks(MASTER_SEED).1),
            (10, j10 == c10_extra_head(MASTER_SEED).1),
        ]
    });
    let o12 = Outcome::new(same.iter().all(|s| s.1), format!("byte-identical reruns: {same:?}"));
    all &= report(&Criterion { id: 12, name: "determinism", limit: None }, &o12, t12);

    println!("acceptance: {}", if all { "PASS" } else { "FAIL" });
    if !all {
        std::process::exit(1);
    }
}
