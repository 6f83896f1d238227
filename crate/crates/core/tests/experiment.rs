use std::time::Duration;

use skyshare::client::PublicMetadata;
use skyshare::experiment::*;
use skyshare::oracle::{bnl_skyline, in_region, PlainQuery};

#[test]
fn datasets_are_reproducible() {
    let a = gen_dataset(300, 4, 1000, Distribution::Uniform, 9);
    assert_eq!(a, gen_dataset(300, 4, 1000, Distribution::Uniform, 9));
    assert_ne!(a, gen_dataset(300, 4, 1000, Distribution::Uniform, 10));
    assert_eq!(a.names, vec!["d1", "d2", "d3", "d4"]);
    assert_eq!(a.rows.len(), 300);
    assert!(a.rows.iter().all(|r| r.len() == 4 && r.iter().all(|&v| v <= 1000)));
}

#[test]
fn anti_correlated_tables_have_larger_skylines() {
    let q = PlainQuery::new(
        (0..3)
            .map(|dim| skyshare::Constraint { dim, lower: 0, upper: 1000, pref: skyshare::Preference::Min })
            .collect(),
    )
    .unwrap();
    let size = |d| bnl_skyline(&gen_dataset(2000, 3, 1000, d, 1).rows, &q).len();
    let (c, u, a) = (size(Distribution::Correlated), size(Distribution::Uniform), size(Distribution::AntiCorrelated));
    assert!(c < u && u < a, "correlated {c}, uniform {u}, anti-correlated {a}");
}

#[test]
fn queries_hit_the_requested_selectivity() {
    let spec = ExperimentSpec { n: 10_000, ..Default::default() };
    let data = gen_dataset(spec.n, spec.m, spec.max_value, Distribution::Uniform, 3);
    let meta = spec.metadata();
    for (sel, range) in [(0.001, 8..=12), (0.01, 80..=120)] {
        for (seed, k) in (0..10).zip([1, 2, 3, 4, 5].iter().cycle()) {
            let q = gen_query(&data.rows, &meta, *k, sel, seed).unwrap();
            assert_eq!(q.k(), *k);
            let c = data.rows.iter().filter(|t| in_region(t, &q)).count();
            assert!(range.contains(&c), "sel {sel} k {k}: |C| = {c}");
        }
    }
    assert_eq!(gen_query(&data.rows, &meta, 2, 0.01, 4).unwrap(), gen_query(&data.rows, &meta, 2, 0.01, 4).unwrap());
}

#[test]
fn impossible_targets_fail_calibration() {
    let data = gen_dataset(100, 2, 99, Distribution::Uniform, 1);
    let meta = PublicMetadata::uniform("x", 100, 2, 64, 0, 99);
    assert!(matches!(gen_query(&data.rows, &meta, 1, 0.001, 1), Err(skyshare::Error::Calibration(_))));
    assert!(gen_query(&data.rows, &meta, 3, 0.1, 1).is_err());
}


#[test]
fn experiment_runs_on_both_transports() {
    for transport in [TransportMode::InMemory, TransportMode::Tcp] {
        let spec = ExperimentSpec { n: 800, m: 4, k: 2, selectivity: 0.02, trials: 2, seed: 5, transport, ..Default::default() };
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.trials.len(), 2);
        for t in &report.trials {
            assert!((13..=19).contains(&t.candidates), "{}", t.candidates);
            assert!(t.skyline <= t.result_entries && t.result_entries <= t.candidates);
            assert!(t.bytes_cs1_to_cs2 > 0 && t.bytes_cs2_to_cs1 > 0);
            assert!(t.rounds > 0 && t.latency_ms > 0.0);
        }
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# n=800 m=4 k=2"));
        assert_eq!(lines[1], ExperimentReport::CSV_HEADER);
        assert_eq!(lines.len(), 2 + 2 + 1);
        assert!(lines[4].starts_with("mean,"));
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), 8);
        }
    }
}

#[test]
fn delay_is_charged_per_round() {
    let spec = ExperimentSpec {
        n: 300,
        m: 3,
        k: 2,
        selectivity: 0.03,
        seed: 2,
        delay: Duration::from_millis(1),
        ..Default::default()
    };
    let t = &run_experiment(&spec).unwrap().trials[0];
    assert!(t.latency_ms >= f64::from(t.rounds), "{} ms for {} rounds", t.latency_ms, t.rounds);
}

#[test]
fn spec_and_modes_parse() {
    assert_eq!("anti-correlated".parse::<Distribution>().unwrap(), Distribution::AntiCorrelated);
    assert_eq!("tcp".parse::<TransportMode>().unwrap(), TransportMode::Tcp);
    assert!("carrier-pigeon".parse::<TransportMode>().is_err());
    assert!(ExperimentSpec { selectivity: 0.0, ..Default::default() }.validate().is_err());
    assert_eq!(ExperimentSpec { n: 10_000, selectivity: 0.01, ..Default::default() }.max_candidates(), 120);
}
