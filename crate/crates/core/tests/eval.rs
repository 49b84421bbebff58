use approx::assert_abs_diff_eq;
use nodet::cascade::Candidate;
use nodet::ct_data::NoduleAnnotation;
use nodet::eval::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gt(scan: &str, c: [f64; 3], d: f64) -> NoduleAnnotation {
    NoduleAnnotation::new(scan, c, d).unwrap()
}

fn cand(scan: &str, c: [f64; 3], p: f64) -> Candidate {
    Candidate { scan_id: scan.into(), center_world: c, diameter_mm: 5.0, seg_score: 0.5, clf_prob: Some(p) }
}

#[test]
fn matching_examples() {
    let g = [gt("a", [0.0, 0.0, 0.0], 10.0)];
    let m = match_candidates(&[cand("a", [0.0, 0.0, 0.0], 0.9)], &g, 0.5);
    assert_eq!((m.hit_count(), m.false_positives), (1, 0));
    let m = match_candidates(&[cand("a", [5.0 + 1e-9, 0.0, 0.0], 0.9)], &g, 0.5);
    assert_eq!((m.hit_count(), m.false_positives), (0, 1));
    let two = [cand("a", [1.0, 0.0, 0.0], 0.9), cand("a", [0.0, -2.0, 1.0], 0.7)];
    let m = match_candidates(&two, &g, 0.5);
    assert_eq!((m.hit_count(), m.false_positives), (1, 0));
    // Below threshold counts for nothing.
    let m = match_candidates(&[cand("a", [50.0, 0.0, 0.0], 0.4)], &g, 0.5);
    assert_eq!((m.hit_count(), m.false_positives), (0, 0));
}

#[test]
fn perfect_detector_reaches_full_sensitivity_without_fp() {
    let scans = vec![ScoredScan {
        scan_id: "a".into(),
        annotations: vec![gt("a", [1.0, 2.0, 3.0], 6.0), gt("a", [20.0, 2.0, 3.0], 4.0)],
        candidates: vec![cand("a", [1.0, 2.0, 3.0], 1.0), cand("a", [20.0, 2.0, 3.0], 1.0)],
    }];
    let curve = compute_froc(&scans).unwrap();
    assert!(curve.points.iter().any(|p| p.fp_per_scan == 0.0 && p.sensitivity == 1.0));
    let r = compute_cpm(&curve).unwrap();
    assert_eq!(r.cpm, 1.0);
}

#[test]
fn froc_errors() {
    assert!(compute_froc(&[]).is_err());
    let empty = ScoredScan { scan_id: "a".into(), annotations: vec![], candidates: vec![cand("a", [0.0; 3], 0.5)] };
    assert!(compute_froc(&[empty]).is_err());
}

/// Oracle: match at every distinct score independently, counting pairs.
fn brute_force(scans: &[ScoredScan]) -> Vec<(f64, f64, f64)> {
    let mut ts: Vec<f64> = scans.iter().flat_map(|s| s.candidates.iter().map(|c| c.clf_prob.unwrap())).collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let total: usize = scans.iter().map(|s| s.annotations.len()).sum();
    ts.into_iter()
        .map(|t| {
            let (mut hit, mut fp) = (0usize, 0usize);
            for s in scans {
                let kept: Vec<&Candidate> = s.candidates.iter().filter(|c| c.clf_prob.unwrap() >= t).collect();
                let near = |c: &Candidate, g: &NoduleAnnotation| {
                    let d2: f64 = (0..3).map(|k| (c.center_world[k] - g.center_world[k]).powi(2)).sum();
                    d2 <= (g.diameter_mm / 2.0).powi(2)
                };
                hit += s.annotations.iter().filter(|g| kept.iter().any(|c| near(c, g))).count();
                fp += kept.iter().filter(|c| !s.annotations.iter().any(|g| near(c, g))).count();
            }
            (t, fp as f64 / scans.len() as f64, hit as f64 / total as f64)
        })
        .collect()
}

fn as_tuples(curve: &FrocCurve) -> Vec<(f64, f64, f64)> {
    curve.points.iter().map(|p| (p.threshold, p.fp_per_scan, p.sensitivity)).collect()
}

#[test]
fn hand_placed_curve_matches_enumeration() {
    let scans = vec![
        ScoredScan {
            scan_id: "a".into(),
            annotations: vec![gt("a", [0.0, 0.0, 0.0], 8.0)],
            candidates: vec![cand("a", [1.0, 1.0, 0.0], 0.6), cand("a", [30.0, 0.0, 0.0], 0.9)],
        },
        ScoredScan { scan_id: "b".into(), annotations: vec![gt("b", [5.0, 5.0, 5.0], 4.0)], candidates: vec![cand("b", [5.0, 6.0, 5.0], 0.3)] },
    ];
    let curve = compute_froc(&scans).unwrap();
    assert_eq!(as_tuples(&curve), vec![(0.9, 0.5, 0.0), (0.6, 0.5, 0.5), (0.3, 0.5, 1.0)]);
    assert_eq!(as_tuples(&curve), brute_force(&scans));
}

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<ScoredScan> {
    let nscans = rng.gen_range(1..4);
    let mut scans: Vec<ScoredScan> = (0..nscans)
        .map(|k| {
            let id = format!("s{k}");
            let annotations = (0..rng.gen_range(0..3))
                .map(|_| gt(&id, [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)], rng.gen_range(3.0..12.0)))
                .collect();
            let candidates = (0..rng.gen_range(0..6))
                .map(|_| {
                    // Coarse scores so ties happen.
                    let p = rng.gen_range(0..10) as f64 / 10.0;
                    cand(&id, [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)], p)
                })
                .collect();
            ScoredScan { scan_id: id, annotations, candidates }
        })
        .collect();
    if scans.iter().all(|s| s.annotations.is_empty()) {
        scans[0].annotations.push(gt("s0", [10.0; 3], 6.0));
    }
    scans
}

#[test]
fn froc_equals_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let scans = random_instance(&mut rng);
        let curve = compute_froc(&scans).unwrap();
        assert_eq!(as_tuples(&curve), brute_force(&scans));
        for w in curve.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].fp_per_scan <= w[1].fp_per_scan && w[0].sensitivity <= w[1].sensitivity);
        }
    }
}

fn curve_of(points: &[(f64, f64)]) -> FrocCurve {
    let n = points.len();
    FrocCurve {
        points: points.iter().enumerate().map(|(i, &(f, s))| FrocPoint { threshold: 1.0 - i as f64 / n as f64, fp_per_scan: f, sensitivity: s }).collect(),
        scans: 1,
        ground_truths: 1,
    }
}

#[test]
fn cpm_published_rows() {
    let tscnn = CpmReport::from_sensitivities([0.848, 0.900, 0.925, 0.936, 0.949, 0.957, 0.960]);
    assert_abs_diff_eq!(tscnn.cpm, 0.925, epsilon = 5e-4);
    let dense = CpmReport::from_sensitivities([0.768, 0.830, 0.877, 0.931, 0.950, 0.951, 0.960]);
    assert_abs_diff_eq!(dense.cpm, 0.895, epsilon = 5e-4);
    // The same rows through a curve that passes exactly through each rate.
    let pts: Vec<(f64, f64)> = FP_RATES.iter().zip(tscnn.sensitivities).map(|(&f, s)| (f, s)).collect();
    let r = compute_cpm(&curve_of(&pts)).unwrap();
    assert_abs_diff_eq!(r.cpm, tscnn.cpm, epsilon = 1e-12);
}

#[test]
fn cpm_of_constant_curve_is_the_constant() {
    let r = compute_cpm(&curve_of(&[(0.3, 0.7), (2.0, 0.7), (9.0, 0.7)])).unwrap();
    assert_abs_diff_eq!(r.cpm, 0.7, epsilon = 1e-12);
}

#[test]
fn interpolation_and_clamping() {
    let c = curve_of(&[(0.5, 0.4), (0.5, 0.5), (1.5, 0.9)]);
    assert_eq!(sensitivity_at(&c, 0.125).unwrap(), 0.5);
    assert_abs_diff_eq!(sensitivity_at(&c, 1.0).unwrap(), 0.7, epsilon = 1e-12);
    assert_eq!(sensitivity_at(&c, 8.0).unwrap(), 0.9);
    assert!(sensitivity_at(&curve_of(&[]), 1.0).is_err());
}

/// Oracle: piecewise-linear upper envelope evaluated segment by segment.
fn oracle_sensitivity(points: &[(f64, f64)], fp: f64) -> f64 {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    let best = |x: f64| points.iter().filter(|p| p.0 == x).map(|p| p.1).fold(0.0, f64::max);
    if fp <= xs[0] {
        return best(xs[0]);
    }
    for w in xs.windows(2) {
        if fp >= w[0] && fp <= w[1] {
            let t = (fp - w[0]) / (w[1] - w[0]);
            return best(w[0]) * (1.0 - t) + best(w[1]) * t;
        }
    }
    best(*xs.last().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn cpm_matches_brute_force(raw in proptest::collection::vec((0.0f64..10.0, 0.0f64..1.0), 1..12)) {
        let mut pts = raw.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut s = 0.0;
        for p in pts.iter_mut() {
            s = f64::max(s, p.1);
            p.1 = s;
        }
        let r = compute_cpm(&curve_of(&pts)).unwrap();
        let want: Vec<f64> = FP_RATES.iter().map(|&f| oracle_sensitivity(&pts, f)).collect();
        for (a, b) in r.sensitivities.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
        prop_assert!((r.cpm - want.iter().sum::<f64>() / 7.0).abs() <= 1e-9);
    }
}

#[test]
fn report_and_csv_layouts() {
    let r = CpmReport::from_sensitivities([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
    let table = CpmReport::table(&[("ensemble", &r)]);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with('#'));
    assert!(lines[1].split_whitespace().eq(["method", "0.125", "0.25", "0.5", "1", "2", "4", "8", "CPM"]));
    assert!(lines[2].split_whitespace().eq(["ensemble", "0.100", "0.200", "0.300", "0.400", "0.500", "0.600", "0.700", "0.400"]));
    let mut csv = Vec::new();
    write_ablation(&mut csv, &[("dp_rm".into(), r)]).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap(), format!("{ABLATION_HEADER}\ndp_rm,0.1000,0.2000,0.3000,0.4000,0.5000,0.6000,0.7000,0.4000\n"));
    let curve = curve_of(&[(0.0, 0.5)]);
    let mut csv = Vec::new();
    write_froc(&mut csv, &curve).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap(), "threshold,fp_per_scan,sensitivity\n1,0,0.5\n");
}
