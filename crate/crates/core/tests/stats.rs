mod oracle;

use darwin_core::stats::{studentized_range_sf, summarize, tukey_kramer, GroupSample};
use proptest::prelude::*;

#[test]
fn t_oracle_sanity() {
    // t = 2.228 is the two-sided 5% point for 10 dof.
    assert!((oracle::t_two_sided(2.228138851986, 10.0) - 0.05).abs() < 1e-9);
    assert!((oracle::t_two_sided(0.0, 7.0) - 1.0).abs() < 1e-12);
}

#[test]
fn k2_range_equals_two_sided_t_tail() {
    for df in [1.0, 3.0, 10.0, 57.0, 400.0] {
        for q in [0.3, 1.0, 2.5, 4.0, 7.0] {
            let sf = studentized_range_sf(q, 2, df).unwrap();
            let t = oracle::t_two_sided(q / 2f64.sqrt(), df);
            assert!((sf - t).abs() < 1e-6, "df={df} q={q}: {sf} vs {t}");
        }
    }
}

#[test]
fn monte_carlo_agreement_k3_df10() {
    // sf(3.88; k=3, df=10) ≈ 0.05.
    let mc = oracle::mc_range_sf(3, 10.0, &[3.88], 1_000_000, 17)[0];
    let sf = studentized_range_sf(3.88, 3, 10.0).unwrap();
    assert!((sf - 0.05).abs() < 1e-3);
    assert!((sf - mc).abs() < 2e-3, "quadrature {sf} vs MC {mc}");
}

#[test]
fn fixed_three_group_dataset_matches_monte_carlo() {
    let groups = vec![
        GroupSample::new("a", vec![4.1, 5.0, 4.6, 5.3, 4.8, 4.4]),
        GroupSample::new("b", vec![5.2, 5.9, 5.5, 6.1, 5.0]),
        GroupSample::new("c", vec![4.9, 5.6, 5.1, 4.7, 5.4, 5.8, 5.2]),
    ];
    let res = tukey_kramer(&groups, 0.05).unwrap();
    let qs: Vec<f64> = res.iter().map(|r| r.q).collect();
    let mc = oracle::mc_range_sf(3, 15.0, &qs, 1_000_000, 99);
    for (r, m) in res.iter().zip(&mc) {
        assert!((r.p - m).abs() < 2e-3, "{r:?} vs MC {m}");
    }
}

#[test]
fn summarize_matches_two_pass() {
    let v: Vec<f64> = (0..500).map(|i| 1e6 + ((i * 7919) % 113) as f64 * 0.37).collect();
    let s = &summarize(&[GroupSample::new("g", v.clone())])[0];
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    assert!((s.mean - mean).abs() < 1e-9 * mean);
    assert!((s.std.unwrap() - var.sqrt()).abs() < 1e-9);
}

fn group_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_invariant_under_affine_maps(a in group_values(), b in group_values(), c in group_values(), shift in -100.0f64..100.0, scale in 0.01f64..100.0) {
        let g = vec![GroupSample::new("a", a.clone()), GroupSample::new("b", b.clone()), GroupSample::new("c", c.clone())];
        let map = |v: &[f64]| v.iter().map(|x| x * scale + shift).collect::<Vec<_>>();
        let h = vec![GroupSample::new("a", map(&a)), GroupSample::new("b", map(&b)), GroupSample::new("c", map(&c))];
        let (r1, r2) = (tukey_kramer(&g, 0.05).unwrap(), tukey_kramer(&h, 0.05).unwrap());
        for (x, y) in r1.iter().zip(&r2) {
            prop_assert!((x.q - y.q).abs() <= 1e-6 * x.q.max(1.0));
        }
    }

    #[test]
    fn p_non_increasing_in_q(q in 0.0f64..8.0, dq in 0.0f64..2.0, k in 2usize..7, df in 1.0f64..200.0) {
        let p1 = studentized_range_sf(q, k, df).unwrap();
        let p2 = studentized_range_sf(q + dq, k, df).unwrap();
        prop_assert!(p2 <= p1 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&p1));
    }

    #[test]
    fn k2_inference_equals_pooled_t(a in group_values(), b in group_values()) {
        let g = vec![GroupSample::new("a", a.clone()), GroupSample::new("b", b.clone())];
        let r = &tukey_kramer(&g, 0.05).unwrap()[0];
        let (_, _, p) = oracle::pooled_t(&a, &b);
        prop_assert_eq!(r.p < 0.05, p < 0.05);
        prop_assert!((r.p - p).abs() < 1e-6);
    }
}
