mod support;

use support::suites;

#[test]
fn geometry_suite_passes() {
    let o = suites::geometry_suite();
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn planted_quadratic_without_outlier_noise_is_exact() {
    // most trials land on exactly the true inlier set
    let exact = (0..20).filter(|&s| suites::ransac_trial(s).unwrap() < 1e-6).count();
    assert!(exact >= 18, "{exact}");
}

#[test]
fn graphs_stay_within_seven_nodes() {
    for seed in 0..100 {
        let g = suites::random_graph(seed);
        let nodes: usize = g.layers.iter().map(Vec::len).sum();
        assert!((2..=7).contains(&nodes));
    }
}
