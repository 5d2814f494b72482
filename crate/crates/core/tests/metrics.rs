use proptest::prelude::*;
use rom_core::archive::dir_checksum;
use rom_core::metrics::{
    emit_reports, errors_csv, gain, gains_csv, load_report, parse_errors_csv, relative_error, statistics_summary,
    ErrorSeries, GainKind, RegimeInfo, Report, ERRORS_HEADER, GAINS_HEADER,
};
use rom_core::pod::InnerProduct;
use rom_core::RomError;

fn series(method: &str, field: &str, split: &str, param: usize, values: Vec<f64>) -> ErrorSeries {
    ErrorSeries {
        regime: "r0".into(),
        method: method.into(),
        field: field.into(),
        split: split.into(),
        param,
        mu: vec![0.01 * (param + 1) as f64],
        times: (0..values.len()).map(|k| 0.1 * k as f64).collect(),
        values,
    }
}

fn sample_report() -> Report {
    let mut r = Report::new(GainKind::Unsteady, Some([0.0, 0.3]));
    r.regimes.push(RegimeInfo { name: "r0".into(), dims: [3, 2, 2], big_dims: [6, 4, 2], energy: Some(0.99) });
    for (p, split) in [(0, "train"), (1, "train"), (2, "test")] {
        let f = 1.0 + p as f64 / 7.0;
        for field in ["u", "p"] {
            r.errors.push(series("ev-rom", field, split, p, vec![0.3 * f, 0.2 * f, 0.25 * f, 0.1 / 3.0]));
            r.errors.push(series("dd-ev-rom", field, split, p, vec![0.2 * f, 0.21, 0.1 * f, 1.0 / 3.0]));
            r.errors.push(series("dd-ev-rom-star", field, split, p, vec![0.1 * f, 0.05, 0.07 / f, 0.01]));
            r.errors.push(series("projection", field, split, p, vec![0.01, 0.02, 0.03, 0.04]));
        }
    }
    r.compute_gains("ev-rom").unwrap();
    r
}

#[test]
fn relative_error_in_weighted_norm() {
    let ip = InnerProduct::new(vec![1.0, 4.0, 0.5]).unwrap();
    let fom = [1.0, 2.0, -2.0];
    let rom = [1.5, 2.0, -1.0];
    // ||d||^2 = 0.25 + 0 + 0.5, ||f||^2 = 1 + 16 + 2
    let want = (0.75f64 / 19.0).sqrt();
    assert!((relative_error(&rom, &fom, &ip).unwrap() - want).abs() < 1e-15);
    assert_eq!(relative_error(&fom, &fom, &ip).unwrap(), 0.0);
    assert!(matches!(relative_error(&rom, &[0.0; 3], &ip), Err(RomError::ZeroReference)));
    assert!(relative_error(&rom[..2], &fom, &ip).is_err());
}

#[test]
fn gain_is_the_mean_relative_improvement() {
    let base = vec![vec![0.2, 0.4], vec![0.1, 0.3], vec![0.0, 0.0]];
    let dd = vec![vec![0.1, 0.2], vec![0.3, 0.1], vec![0.5, 0.5]];
    // sample means 0.3 vs 0.15 and 0.2 vs 0.2; the third has zero baseline
    let g = gain(&base, &dd, GainKind::Unsteady).unwrap();
    let want = ((0.3 - 0.15) / 0.3 + (0.2f64 - 0.2) / 0.2) / 2.0;
    assert!((g - want).abs() < 1e-15);
    let steady = gain(&[vec![0.4], vec![0.2]], &[vec![0.1], vec![0.3]], GainKind::Steady).unwrap();
    assert!((steady - (0.75 - 0.5) / 2.0).abs() < 1e-15);
    assert!(gain(&[vec![0.4, 0.1]], &[vec![0.1, 0.1]], GainKind::Steady).is_err());
    assert!(matches!(gain(&[vec![0.0]], &[vec![0.1]], GainKind::Steady), Err(RomError::ZeroReference)));
    assert!(gain(&[], &[], GainKind::Steady).is_err());
    assert!(gain(&[vec![0.1]], &[vec![0.1], vec![0.2]], GainKind::Steady).is_err());
}

#[test]
fn report_gains_follow_the_series() {
    let r = sample_report();
    for split in ["train", "test"] {
        let b: Vec<Vec<f64>> = r.series("r0", "ev-rom", "p", split).iter().map(|e| e.values.clone()).collect();
        let d: Vec<Vec<f64>> = r.series("r0", "dd-ev-rom-star", "p", split).iter().map(|e| e.values.clone()).collect();
        let want = gain(&b, &d, GainKind::Unsteady).unwrap();
        assert_eq!(r.get_gain("r0", "p", split, "dd-ev-rom-star"), Some(want));
    }
    assert_eq!(r.get_gain("r0", "p", "train", "ev-rom"), None);
    assert_eq!(r.get_gain("r0", "p", "train", "projection"), None);
    // statistics cover every method, including the baseline and projection
    assert_eq!(r.statistics.len(), 4 * 2 * 2);
    assert!(r.statistics.iter().all(|s| s.summary.min <= s.summary.median && s.summary.median <= s.summary.max));
}

#[test]
fn empty_report_gives_header_only_tables() {
    let r = Report::new(GainKind::Steady, None);
    assert_eq!(gains_csv(&r), format!("{GAINS_HEADER}\n"));
    assert_eq!(errors_csv(&r), format!("{ERRORS_HEADER}\n"));
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&r, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("gains.csv")).unwrap(), format!("{GAINS_HEADER}\n"));
    assert_eq!(load_report(&dir.path().join("report.json")).unwrap(), r);
}

#[test]
fn json_reemit_is_byte_identical() {
    let r = sample_report();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_reports(&r, a.path()).unwrap();
    let back = load_report(&a.path().join("report.json")).unwrap();
    assert_eq!(back, r);
    emit_reports(&back, b.path()).unwrap();
    for f in ["report.json", "gains.csv", "errors.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(dir_checksum(a.path()).unwrap(), dir_checksum(b.path()).unwrap());
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("report.json")).unwrap()).unwrap();
    for key in ["regimes", "gains", "errors"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn gains_recomputed_from_csv_are_bit_identical() {
    let r = sample_report();
    let parsed = parse_errors_csv(&errors_csv(&r)).unwrap();
    assert_eq!(parsed.len(), r.errors.len());
    for (p, e) in parsed.iter().zip(&r.errors) {
        assert_eq!(p.values, e.values);
        assert_eq!(p.times, e.times);
    }
    let mut again = Report::new(r.kind, r.window);
    again.errors = parsed;
    again.compute_gains("ev-rom").unwrap();
    assert_eq!(again.gains, r.gains);
    for rec in r.gain_records() {
        let v = again.get_gain(&rec.regime, &rec.field, &rec.split, &rec.method).unwrap();
        assert_eq!(v.to_bits(), rec.value.to_bits());
    }
    // the gains table parses back to the same bits too
    for (line, rec) in gains_csv(&r).lines().skip(1).zip(r.gain_records()) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v.to_bits(), rec.value.to_bits());
    }
}

#[test]
fn malformed_csv_is_rejected() {
    assert!(parse_errors_csv("a,b\n").is_err());
    assert!(parse_errors_csv(&format!("{ERRORS_HEADER}\nr,m,f,s,0,0.1\n")).is_err());
    assert!(parse_errors_csv(&format!("{ERRORS_HEADER}\nr,m,f,s,x,0.1,0.2\n")).is_err());
    assert!(parse_errors_csv(&format!("{ERRORS_HEADER}\nr,m,f,s,0,0.1,zz\n")).is_err());
}

#[test]
fn train_and_test_parameters_are_disjoint() {
    let r = sample_report();
    let train: Vec<usize> = r.errors.iter().filter(|e| e.split == "train").map(|e| e.param).collect();
    assert!(r.errors.iter().filter(|e| e.split == "test").all(|e| !train.contains(&e.param)));
}

proptest! {
    #[test]
    fn summary_matches_sorting(v in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let s = statistics_summary(&v).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let below = sorted.iter().filter(|&&x| x < s.median).count();
        let above = sorted.iter().filter(|&&x| x > s.median).count();
        prop_assert!(below <= n / 2 && above <= n / 2);
        prop_assert_eq!(s.min, sorted[0]);
        prop_assert_eq!(s.max, sorted[n - 1]);
        prop_assert_eq!(s.count, n);
    }

    #[test]
    fn gain_of_scaled_errors(e in proptest::collection::vec(0.01f64..10.0, 1..10), k in 0.0f64..3.0) {
        let base: Vec<Vec<f64>> = e.iter().map(|&x| vec![x]).collect();
        let dd: Vec<Vec<f64>> = e.iter().map(|&x| vec![k * x]).collect();
        let g = gain(&base, &dd, GainKind::Steady).unwrap();
        prop_assert!((g - (1.0 - k)).abs() <= 1e-12);
    }
}
