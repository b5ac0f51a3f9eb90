//! Repeatability contract of the benchmark harness: median-of-5 cell
//! timings from two back-to-back runs on an idle machine agree within the
//! documented 20% flakiness budget. The fixture is sized so the smallest
//! timed cell stays above ten milliseconds.

use rpkit::metrics::bench_schemes;
use rpkit::schemes::RpKind;

#[test]
fn bench_medians_are_repeatable() {
    let run = || {
        bench_schemes(10_000, 20_000, &[128, 256], 5e-4, &[RpKind::Gaussian], 5, 3)
            .expect("benchmark runs")
    };
    let first = run();
    let second = run();
    for k in [128usize, 256] {
        let a = first.cell(RpKind::Gaussian, k).unwrap();
        let b = second.cell(RpKind::Gaussian, k).unwrap();
        for (what, x, y) in
            [("generation", a.gen_time_s, b.gen_time_s), ("projection", a.proj_time_s, b.proj_time_s)]
        {
            let drift = (x - y).abs() / x.min(y);
            assert!(
                drift < 0.20,
                "{what} time at k={k} drifts {:.0}% between runs ({x:.4}s vs {y:.4}s)",
                drift * 100.0
            );
        }
    }
}
