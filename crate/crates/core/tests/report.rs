mod common;

use common::{cases, engine, golden};
use patience_core::metrics;
use patience_core::sim;
use patience_core::{Policy, SessionConfig};

#[test]
fn report_matches_golden_files() {
    let e = engine(SessionConfig::fixed_rounds(5));
    let run = sim::run_benchmark(&e, &cases(&e), &[Policy::App, Policy::Random { seed: 7 }], 7).unwrap();
    let curves = metrics::entropy_curves(&run);
    let evolutions = metrics::confidence_evolution(&run);
    assert_eq!(curves.len(), 2);
    assert!(curves.iter().all(|c| c.values.len() == 6 && c.n == 12));
    assert_eq!(evolutions.len(), 12);
    for ev in &evolutions {
        for p in &ev.points {
            assert!(p.top1 >= p.top2);
            assert_eq!(p.gap, p.top1 - p.top2);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    metrics::emit_report(&run, &curves, &evolutions, dir.path()).unwrap();
    for name in [metrics::ENTROPY_CSV, metrics::CONFIDENCE_CSV, metrics::SUMMARY_TXT] {
        golden(name, &std::fs::read_to_string(dir.path().join(name)).unwrap());
    }
}

#[test]
fn early_stops_are_carried_forward() {
    let e = engine(SessionConfig::default());
    let run = sim::run_benchmark(&e, &cases(&e), &[Policy::App], 0).unwrap();
    let curve = &metrics::entropy_curves(&run)[0];
    assert_eq!(curve.values.len(), run.horizon + 1);
    assert!(curve.carried_forward > 0);
    assert!(metrics::summary(&run, std::slice::from_ref(curve), &[]).contains("carried forward"));
}
