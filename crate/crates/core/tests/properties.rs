use mtplab::ghp::{ghp_bruteforce, ghp_upper, GhpOptions};
use mtplab::transport::{battery, build_h_balanced, mtp_check_exact};
use mtplab::{canonical_hash, uniform_rooting, Decoration, FiniteRmmSpace, Verdict};
use proptest::prelude::*;

fn graph_space(n: usize, extra: &[(usize, usize)], mu: &[f64], root: usize) -> FiniteRmmSpace {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (v - 1, v)).collect();
    edges.extend(extra.iter().map(|&(a, b)| (a % n, b % n)));
    FiniteRmmSpace::from_graph(n, &edges)
        .unwrap()
        .with_measure(mu[..n].to_vec())
        .unwrap()
        .reroot(root % n)
        .unwrap()
}

prop_compose! {
    fn small_space(max_n: usize)(n in 1..=max_n)(
        n in Just(n),
        extra in prop::collection::vec((0..16usize, 0..16usize), 0..6),
        mu in prop::collection::vec(0.25f64..2.0, 16),
        root in 0..16usize,
    ) -> FiniteRmmSpace {
        graph_space(n, &extra, &mu, root)
    }
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hash_ignores_labels((s, perm) in small_space(8).prop_flat_map(|s| { let n = s.n(); (Just(s), permutation(n)) })) {
        let t = s.relabel(&perm).unwrap();
        prop_assert_eq!(canonical_hash(&s).unwrap(), canonical_hash(&t).unwrap());
    }

    #[test]
    fn hash_sees_the_root(s in small_space(6)) {
        // a point with a different distance profile gives a different class
        let o = s.root();
        for v in 0..s.n() {
            let mut a: Vec<f64> = s.dist_row(o).to_vec();
            let mut b: Vec<f64> = s.dist_row(v).to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            if a != b {
                prop_assert_ne!(canonical_hash(&s).unwrap(), canonical_hash(&s.reroot(v).unwrap()).unwrap());
            }
        }
    }

    #[test]
    fn balanced_kernel_is_symmetric_and_balanced(s in small_space(9)) {
        let h = build_h_balanced(&s, None).unwrap();
        let n = s.n();
        for u in 0..n {
            let out: f64 = (0..n).map(|v| h.get(u, v) * s.mu()[v]).sum();
            prop_assert!((out - 1.0).abs() <= 1e-9);
            for v in 0..n {
                prop_assert!((h.get(u, v) - h.get(v, u)).abs() <= 1e-12);
                prop_assert!(h.get(u, v) >= 0.0);
            }
        }
    }

    #[test]
    fn uniform_rooting_satisfies_mtp(s in small_space(7)) {
        let e = uniform_rooting(&s.with_measure(vec![1.0; s.n()]).unwrap()).unwrap();
        for g in battery() {
            let r = mtp_check_exact(&e, &g).unwrap();
            prop_assert_eq!(r.verdict, Verdict::Pass, "{}: {} vs {}", r.check, r.lhs, r.rhs);
        }
    }

    #[test]
    fn decorations_follow_relabelling((s, perm) in small_space(7).prop_flat_map(|s| { let n = s.n(); (Just(s), permutation(n)) })) {
        let phi: Vec<f64> = (0..s.n()).map(|i| (i % 3) as f64).collect();
        let s = s.with_decoration("phi", Decoration::Measure(phi.clone())).unwrap();
        let t = s.relabel(&perm).unwrap();
        for i in 0..s.n() {
            prop_assert_eq!(t.measure("phi").unwrap()[perm[i]], phi[i]);
        }
        prop_assert_eq!(canonical_hash(&s).unwrap(), canonical_hash(&t).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ghp_zero_on_copies((s, perm) in small_space(5).prop_flat_map(|s| { let n = s.n(); (Just(s), permutation(n)) })) {
        let t = s.relabel(&perm).unwrap();
        let r = ghp_upper(&s, &t, GhpOptions::default()).unwrap();
        prop_assert_eq!(r.value, 0.0);
    }

    #[test]
    fn ghp_symmetric_and_above_oracle(a in small_space(4), b in small_space(4)) {
        let opts = GhpOptions::default();
        let ab = ghp_upper(&a, &b, opts).unwrap();
        let ba = ghp_upper(&b, &a, opts).unwrap();
        prop_assert_eq!(ab.value, ba.value);
        let exact = ghp_bruteforce(&a, &b, opts.grid).unwrap();
        prop_assert!((ab.value - exact).abs() <= opts.grid + 1e-12, "{} vs {}", ab.value, exact);
        prop_assert!(ab.correspondence.distortion(&a, &b) / 2.0 <= ab.value + 1e-12);
    }

    #[test]
    fn ghp_triangle_on_small_spaces(a in small_space(3), b in small_space(3), c in small_space(3)) {
        let g = GhpOptions::default().grid;
        let d = |x: &FiniteRmmSpace, y: &FiniteRmmSpace| ghp_bruteforce(x, y, g).unwrap();
        let (ab, bc, ac) = (d(&a, &b), d(&b, &c), d(&a, &c));
        // grid rounding may add one grid step per term
        prop_assert!(ac <= 2.0 * (ab + bc) + 3.0 * g, "{ac} > 2({ab} + {bc})");
    }
}
