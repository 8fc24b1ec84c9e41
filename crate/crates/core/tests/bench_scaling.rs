use ecrf_core::bench::run_benchmark;

#[test]
fn allpairs_cost_per_cell_grows_and_window_is_cheaper() {
    let t = run_benchmark(&[16, 48], 1).unwrap();
    let per_cell = |op, n| t.get(op, n).unwrap().seconds / (n * n) as f64;
    // 9x more cells means roughly 9x more partners per cell.
    assert!(per_cell("ecrf_forward_allpairs", 48) > 2.0 * per_cell("ecrf_forward_allpairs", 16));
    let at48 = |op| t.get(op, 48).unwrap().seconds;
    assert!(at48("ecrf_forward_window") < at48("ecrf_forward_allpairs"));
    assert!(at48("ecrf_backward_window") < at48("ecrf_backward_allpairs"));
    assert_eq!(t.to_csv().lines().count(), 1 + 2 * 6);
}
