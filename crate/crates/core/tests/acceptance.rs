//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and asserts.
//! Run with `cargo test -p nodet-core --test acceptance -- --nocapture`.

use std::path::Path;
use std::sync::OnceLock;

use nodet::cascade::Candidate;
use nodet::config::PipelineConfig;
use nodet::ct_data::NoduleAnnotation;
use nodet::eval::{compute_cpm, compute_froc, CpmReport, FrocCurve, FrocPoint, ScoredScan, FP_RATES};
use nodet::fprnet::{
    cross_entropy_loss, dual_pool, ensemble_predict, random_mask_swap, ClassifierConfig, ClfModel, ClfPatch, EnsembleWeights,
    MaskSwapSpec, SeGate, Variant,
};
use nodet::hard_mining::positive_resample_count;
use nodet::pipeline::{check_split, run_all, Layout, RunReport, Split};
use nodet::sampler::{
    edge_distance_field, extract_edge_set, partition_regions, sample_budget, weights_for_pool, PatchSpec, SampleClass,
};
use nodet::segnet::{dice_loss, SegModel, SegModelConfig};
use nodet_tensor::gradcheck::check;
use nodet_tensor::{Graph, ParamStore, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Published result rows: seven sensitivities and the printed CPM.
const PUBLISHED: [(&str, [f64; 7], f64); 4] = [
    ("3DDP-DenseNet-RDU", [0.768, 0.830, 0.877, 0.931, 0.950, 0.951, 0.960], 0.895),
    ("3DDP-SeResNet-RDU", [0.730, 0.849, 0.916, 0.929, 0.948, 0.958, 0.958], 0.900),
    ("3DDP-IncepNet-RDU", [0.686, 0.833, 0.891, 0.921, 0.942, 0.949, 0.955], 0.883),
    ("TSCNN", [0.848, 0.900, 0.925, 0.936, 0.949, 0.957, 0.960], 0.925),
];
const CPM_TOL: f64 = 5e-4;
const PROB_SUM_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_SEG_MODEL: f64 = 1e-3;
const GRAD_PROBES: usize = 20;
const GRAD_STEP: f64 = 1e-5;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const SAMPLER_MASKS: usize = 1000;
const FROC_INSTANCES: usize = 200;
const E2E_SENSITIVITY: f64 = 0.85;
const E2E_FP_BUDGET: f64 = 4.0;
const E2E_ENSEMBLE_SLACK: f64 = 0.02;
const E2E_SEED: u64 = 7;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Curve passing exactly through the seven rates.
fn curve_through(sens: [f64; 7]) -> FrocCurve {
    FrocCurve {
        points: FP_RATES
            .iter()
            .zip(sens)
            .enumerate()
            .map(|(i, (&f, s))| FrocPoint { threshold: 1.0 - i as f64 / 7.0, fp_per_scan: f, sensitivity: s })
            .collect(),
        scans: 1,
        ground_truths: 1,
    }
}

/// Two published rows print a CPM that is not the mean of their printed
/// sensitivities (0.8983 vs 0.900, 0.8824 vs 0.883); the criterion cannot
/// hold for them. Run with `--include-ignored` to see it fail.
#[test]
#[ignore = "two published rows do not average to their printed CPM"]
fn criterion_1_cpm_arithmetic() {
    let mut failures = Vec::new();
    for (name, sens, printed) in PUBLISHED {
        let got = compute_cpm(&curve_through(sens)).unwrap().cpm;
        if (got - printed).abs() > CPM_TOL {
            failures.push(format!("{name}: {got:.6} vs {printed}"));
        }
    }
    let detail = if failures.is_empty() { format!("4 rows within {CPM_TOL}") } else { failures.join("; ") };
    verdict(1, "CPM arithmetic", failures.is_empty(), &detail);
    assert!(failures.is_empty(), "{detail}");
}

/// The attainable part of criterion 1: CPM is the mean of the seven
/// interpolated sensitivities, and the consistent rows hit their print.
#[test]
fn criterion_1_cpm_is_the_mean() {
    let mut ok = true;
    for (name, sens, printed) in PUBLISHED {
        let got = compute_cpm(&curve_through(sens)).unwrap();
        let mean = sens.iter().sum::<f64>() / 7.0;
        ok &= (got.cpm - mean).abs() <= 1e-12 && got.sensitivities == sens;
        if name == "3DDP-DenseNet-RDU" || name == "TSCNN" {
            ok &= (got.cpm - printed).abs() <= CPM_TOL;
        }
    }
    verdict(1, "CPM mean identity", ok, "all rows equal the mean of seven; dense and TSCNN rows within 5e-4 of print");
    assert!(ok);
}

#[test]
fn criterion_2_architecture_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(Shape::new(2, 1, 40, 40, 40), |_| rng.gen_range(0.0..1.0));
    let mut detail = Vec::new();
    let mut ok = true;
    for variant in Variant::ALL {
        let model = ClfModel::<f64>::new(ClassifierConfig::new(variant), 1).unwrap();
        let g = Graph::inference();
        let xv = g.constant(x.clone());
        let dims = model.features(&g, &xv).unwrap().shape().dims();
        let p = model.forward(&g, &xv).unwrap().into_tensor();
        let worst = (0..2).map(|n| (p.item(n).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        ok &= dims == [5, 5, 5] && p.shape() == Shape::new(2, 2, 1, 1, 1) && worst <= PROB_SUM_TOL;
        detail.push(format!("{variant} {dims:?} |sum-1| {worst:.1e}"));
    }
    verdict(2, "architecture shapes", ok, &detail.join(", "));
    assert!(ok);
}

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalar `mean(w * y)` with fixed random weights.
fn project(g: &Graph<f64>, y: &Var<f64>, seed: u64) -> Var<f64> {
    let s = y.shape();
    let flat_shape = Shape::vector(1, s.numel());
    let flat = g.record(y.value().clone().reshape(flat_shape).unwrap(), &[y], move |dy, _| vec![Some(dy.clone().reshape(s).unwrap())]);
    let w = g.constant(random(flat_shape, seed));
    g.mean(&g.channel_scale(&flat, &w).unwrap())
}

fn tensor_err(e: nodet::Error) -> nodet_tensor::Error {
    nodet_tensor::Error::ShapeMismatch(e.to_string())
}

#[test]
fn criterion_3_gradients() {
    let mut results = Vec::new();
    let dp = check(&[random(Shape::new(1, 2, 6, 6, 6), 1)], GRAD_PROBES, GRAD_STEP, 1, |g, v| {
        Ok(project(g, &dual_pool(g, &v[0]).map_err(tensor_err)?, 2))
    })
    .unwrap();
    results.push(("dual_pool", dp.max_rel_error(), GRAD_TOL));

    let mut store = ParamStore::new();
    // Id 0 belongs to the checked input.
    store.add("reserved", Tensor::zeros(Shape::vector(1, 1)));
    let se = SeGate::new(&mut store, "se", 6, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let sg = check(&[random(Shape::new(2, 6, 3, 3, 3), 4)], GRAD_PROBES, GRAD_STEP, 5, |g, v| {
        Ok(project(g, &se.forward(g, &store, &v[0]).map_err(tensor_err)?, 6))
    })
    .unwrap();
    results.push(("se_gate", sg.max_rel_error(), GRAD_TOL));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probs = Tensor::from_fn(Shape::new(2, 1, 1, 8, 8), |_| rng.gen_range(0.05..0.95));
    let gt = Tensor::from_fn(Shape::new(2, 1, 1, 8, 8), |_| (rng.gen_range(0.0..1.0) < 0.4) as u8 as f64);
    let dl = check(&[probs], GRAD_PROBES, GRAD_STEP, 8, |g, v| g.dice_loss(&v[0], &gt, 1.0)).unwrap();
    results.push(("dice_loss", dl.max_rel_error(), GRAD_TOL));

    let labels = [1.0, 0.0, 0.0, 1.0, 1.0];
    let ce = check(&[random(Shape::new(5, 2, 1, 1, 1), 9)], GRAD_PROBES, GRAD_STEP, 10, |g, v| {
        let p = g.select_channel(&g.softmax(&v[0]), 1)?;
        g.binary_cross_entropy(&p, &labels)
    })
    .unwrap();
    results.push(("cross_entropy_loss", ce.max_rel_error(), GRAD_TOL));

    results.push(("seg model", seg_model_gradient_error(), GRAD_TOL_SEG_MODEL));
    let ok = results.iter().all(|&(_, e, tol)| e <= tol);
    let detail: Vec<String> = results.iter().map(|(n, e, tol)| format!("{n} {e:.1e} <= {tol:.0e}")).collect();
    verdict(3, "gradient suite", ok, &detail.join(", "));
    assert!(ok);
}

/// Worst relative error of 20 parameter probes of the full segmentation
/// model under the Dice loss.
fn seg_model_gradient_error() -> f64 {
    let mut model = SegModel::<f64>::new(SegModelConfig::default(), 11).unwrap();
    let x = random(Shape::new(2, 3, 1, 16, 16), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let gt = Tensor::from_fn(Shape::new(2, 1, 1, 16, 16), |_| (rng.gen_range(0.0..1.0) < 0.3) as u8 as f64);
    let loss = |m: &SegModel<f64>, grad: bool| {
        let g = Graph::with_mode(grad, true, 0);
        let xv = g.constant(x.clone());
        let y = m.forward(&g, &xv).unwrap();
        let l = g.dice_loss(&y, &gt, 1.0).unwrap();
        (l.value().data()[0], g, l)
    };
    let (_, g, l) = loss(&model, true);
    let grads = g.backward(&l);
    let ids: Vec<_> = model.store.ids().filter(|&id| model.store.is_trainable(id)).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_PROBES {
        let id = ids[rng.gen_range(0..ids.len())];
        let k = rng.gen_range(0..model.store.get(id).len());
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
        let orig = model.store.get(id).data()[k];
        model.store.get_mut(id).data_mut()[k] = orig + GRAD_STEP;
        let plus = loss(&model, false).0;
        model.store.get_mut(id).data_mut()[k] = orig - GRAD_STEP;
        let minus = loss(&model, false).0;
        model.store.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * GRAD_STEP);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

/// Random blob mask of at most 32 x 32 with at least one set voxel.
fn random_mask(rng: &mut ChaCha8Rng) -> ([usize; 2], Vec<u8>) {
    let (h, w) = (rng.gen_range(4..=32), rng.gen_range(4..=32));
    let density = rng.gen_range(0.05..0.6);
    let mut m: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_range(0.0..1.0) < density)).collect();
    let i = rng.gen_range(0..h * w);
    m[i] = 1;
    ([h, w], m)
}

/// 8-neighbourhood edge voxels and all-pairs edge distance, independently.
fn brute_edges(m: &[u8], [h, w]: [usize; 2]) -> (Vec<[usize; 2]>, Vec<f64>) {
    let mut edge = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] == 0 {
                continue;
            }
            let border = (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    (dy, dx) != (0, 0) && (ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || m[ny as usize * w + nx as usize] == 0)
                })
            });
            if border {
                edge.push([y, x]);
            }
        }
    }
    let dist = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            edge.iter().map(|&[a, b]| ((y - a as f64).powi(2) + (x - b as f64).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
        })
        .collect();
    (edge, dist)
}

#[test]
fn criterion_4_sampling_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures: Vec<String> = Vec::new();
    for case in 0..SAMPLER_MASKS {
        let (dims, m) = random_mask(&mut rng);
        let [h, w] = dims;
        let edge = extract_edge_set(&m, dims).unwrap();
        let (brute_edge, brute_dist) = brute_edges(&m, dims);
        let field = edge_distance_field(&edge);
        if edge.voxels != brute_edge || field.iter().zip(&brute_dist).any(|(a, b)| (a - b).abs() > 1e-9) {
            failures.push(format!("case {case}: edge distance"));
        }
        let center = [rng.gen_range(0..h), rng.gen_range(0..w)];
        let side = 2 * rng.gen_range(8..=16);
        let regions = partition_regions(&m, dims, PatchSpec::new(side).unwrap(), center).unwrap();
        let mut seen = vec![0u8; h * w];
        for class in SampleClass::ALL {
            for [y, x] in regions.voxels(class) {
                seen[y * w + x] += 1;
                if (class == SampleClass::Nodule) != (m[y * w + x] != 0) {
                    failures.push(format!("case {case}: {class:?} region holds the wrong voxel"));
                }
            }
        }
        if seen.iter().any(|&s| s != 1) {
            failures.push(format!("case {case}: partition not disjoint and exhaustive"));
        }
        let intens: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = rng.gen_range(0.5..6.0);
        for class in SampleClass::ALL {
            let pool = regions.voxels(class);
            if pool.is_empty() {
                continue;
            }
            let cw = weights_for_pool(class, pool, &field, regions.center, r, &intens, dims).unwrap();
            if (cw.weights.iter().sum::<f64>() - 1.0).abs() > WEIGHT_SUM_TOL || cw.weights.iter().any(|&v| v < 0.0) {
                failures.push(format!("case {case}: {class:?} weights not normalized"));
            }
            // Nodule weights strictly decrease with edge distance.
            if class == SampleClass::Nodule {
                for i in 0..cw.len() {
                    for j in 0..cw.len() {
                        let (a, b) = (cw.voxels[i], cw.voxels[j]);
                        if field[a[0] * w + a[1]] < field[b[0] * w + b[1]] && cw.weights[i] <= cw.weights[j] {
                            failures.push(format!("case {case}: nodule weight not decreasing in distance"));
                        }
                    }
                }
            }
        }
        // High background increases with intensity at equal distance; low
        // background increases with distance at equal intensity.
        let (a, b) = (rng.gen_range(0.0..0.5), rng.gen_range(0.5..1.0));
        let d = rng.gen_range(0.0..20.0);
        let hb = weights_for_pool(SampleClass::HighBg, vec![[0, 0], [0, 1]], &[d, d], [0, 0], r, &[a, b], [1, 2]).unwrap();
        if hb.weights[0] >= hb.weights[1] {
            failures.push(format!("case {case}: high background not increasing in intensity"));
        }
        let (d1, d2) = (rng.gen_range(1..15), rng.gen_range(15..30));
        let lb = weights_for_pool(SampleClass::LowBg, vec![[0, d1], [0, d2]], &[0.0; 31], [0, 0], 1.0, &[a; 31], [1, 31]).unwrap();
        if lb.weights[0] >= lb.weights[1] {
            failures.push(format!("case {case}: low background not increasing in distance"));
        }
        let n = edge.voxels.len();
        let bud = sample_budget(n).unwrap();
        if (bud.n_nodule, bud.n_high_bg, bud.n_low_bg) != (n, n, n.div_ceil(2)) {
            failures.push(format!("case {case}: budget"));
        }
    }
    let ok = failures.is_empty();
    let detail = if ok { format!("{SAMPLER_MASKS} masks, weight sums within {WEIGHT_SUM_TOL:.0e}") } else { failures[..failures.len().min(5)].join("; ") };
    verdict(4, "sampling invariants", ok, &detail);
    assert!(ok, "{detail}");
}

fn binary(v: &[u8]) -> Tensor<f64> {
    Tensor::from_vec(Shape::new(1, 1, 1, 1, v.len()), v.iter().map(|&b| b as f64).collect()).unwrap()
}

#[test]
fn criterion_5_formula_oracles() {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let a = binary(&[1, 0, 1, 1, 0, 0, 1]);
    checks.push(("dice equal masks", dice_loss(&a, &a, 1.0).unwrap() == 0.0));
    let z = binary(&[0; 6]);
    checks.push(("dice both empty", dice_loss(&z, &z, 1.0).unwrap() == 0.0));
    // |gt| = 10, |seg| = 10, overlap 5, eta 1: 1 - 11/21.
    let gt: Vec<u8> = (0..20).map(|i| u8::from(i < 10)).collect();
    let seg: Vec<u8> = (0..20).map(|i| u8::from((5..15).contains(&i))).collect();
    let d = dice_loss(&binary(&gt), &binary(&seg), 1.0).unwrap();
    checks.push(("dice 10/10/5", (d - 10.0 / 21.0).abs() <= 1e-12));
    checks.push(("T at O = 1", positive_resample_count(37, 1.0).unwrap() == 0));
    checks.push(("T at O = 0", positive_resample_count(37, 0.0).unwrap() == 37));
    checks.push(("T at O = 0.5", positive_resample_count(40, 0.5).unwrap() == 20));
    let ce = cross_entropy_loss(&[1.0], &[0.5]).unwrap();
    checks.push(("cross entropy ln 2", (ce - std::f64::consts::LN_2).abs() <= 1e-12));
    let ce = cross_entropy_loss(&[1.0, 0.0], &[0.9, 0.2]).unwrap();
    checks.push(("cross entropy hand pair", (ce - (-(0.9f64.ln() + 0.8f64.ln()) / 2.0)).abs() <= 1e-12));
    checks.push(("cross entropy confident", cross_entropy_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut convex = true;
    for _ in 0..1000 {
        let raw: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let s: f64 = raw.iter().sum();
        let w = EnsembleWeights::new(raw.map(|v| v / s)).unwrap();
        let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let e = ensemble_predict(p, &w).unwrap();
        let (lo, hi) = p.iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        convex &= e >= lo - 1e-12 && e <= hi + 1e-12;
    }
    let thirds = ensemble_predict([0.2, 0.5, 0.8], &EnsembleWeights::default()).unwrap();
    checks.push(("ensemble convexity", convex && (thirds - 0.5).abs() <= 1e-12));
    let ok = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = if ok { format!("{} identities exact to 1e-12", checks.len()) } else { failed.join(", ") };
    verdict(5, "formula oracles", ok, &detail);
    assert!(ok, "{detail}");
}

/// Exhaustive per-threshold matching, independent of the sweep.
fn enumerate(scans: &[ScoredScan]) -> Vec<(f64, f64, f64)> {
    let mut ts: Vec<f64> = scans.iter().flat_map(|s| s.candidates.iter().map(Candidate::score)).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let total: usize = scans.iter().map(|s| s.annotations.len()).sum();
    let near = |c: &Candidate, g: &NoduleAnnotation| {
        (0..3).map(|k| (c.center_world[k] - g.center_world[k]).powi(2)).sum::<f64>() <= (g.diameter_mm / 2.0).powi(2)
    };
    ts.into_iter()
        .map(|t| {
            let (mut hit, mut fp) = (0usize, 0usize);
            for s in scans {
                let kept: Vec<&Candidate> = s.candidates.iter().filter(|c| c.score() >= t).collect();
                hit += s.annotations.iter().filter(|g| kept.iter().any(|c| near(c, g))).count();
                fp += kept.iter().filter(|c| !s.annotations.iter().any(|g| near(c, g))).count();
            }
            (t, fp as f64 / scans.len() as f64, hit as f64 / total as f64)
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<ScoredScan> {
    let mut scans: Vec<ScoredScan> = (0..rng.gen_range(1..5))
        .map(|k| {
            let id = format!("s{k}");
            let pos = |rng: &mut ChaCha8Rng| [rng.gen_range(0.0..24.0), rng.gen_range(0.0..24.0), rng.gen_range(0.0..24.0)];
            let annotations = (0..rng.gen_range(0..4)).map(|_| NoduleAnnotation::new(&id, pos(rng), rng.gen_range(3.0..14.0)).unwrap()).collect();
            let candidates = (0..rng.gen_range(0..8))
                .map(|_| Candidate {
                    scan_id: id.clone(),
                    center_world: pos(rng),
                    diameter_mm: 4.0,
                    seg_score: 0.5,
                    clf_prob: Some(rng.gen_range(0..12) as f64 / 11.0),
                })
                .collect();
            ScoredScan { scan_id: id, annotations, candidates }
        })
        .collect();
    if scans.iter().all(|s| s.annotations.is_empty()) {
        scans[0].annotations.push(NoduleAnnotation::new("s0", [12.0; 3], 8.0).unwrap());
    }
    scans
}

#[test]
fn criterion_6_froc_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..FROC_INSTANCES {
        let scans = random_instance(&mut rng);
        let curve = compute_froc(&scans).unwrap();
        let got: Vec<(f64, f64, f64)> = curve.points.iter().map(|p| (p.threshold, p.fp_per_scan, p.sensitivity)).collect();
        mismatches += usize::from(got != enumerate(&scans));
    }
    let ok = mismatches == 0;
    verdict(6, "FROC equivalence", ok, &format!("{mismatches} of {FROC_INSTANCES} instances differ from enumeration"));
    assert!(ok);
}

fn swap_patches(n: usize, positive: bool, side: usize, rng: &mut ChaCha8Rng) -> Vec<ClfPatch<f32>> {
    (0..n)
        .map(|_| ClfPatch {
            data: Tensor::from_fn(Shape::new(1, 1, side, side, side), |_| rng.gen_range(0.01f32..1.0)),
            positive,
            diameter_vox: if positive { rng.gen_range(1..=side) } else { 0 },
        })
        .collect()
}

#[test]
fn criterion_7_random_mask_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    let mut swaps = 0;
    for case in 0..20 {
        let side = [8, 9, 12, 24][case % 4];
        let pos = swap_patches(rng.gen_range(1..8), true, side, &mut rng);
        let nneg = rng.gen_range(1..200);
        let neg = swap_patches(nneg, false, side, &mut rng);
        let out = random_mask_swap(&pos, &neg, &MaskSwapSpec { fraction: 0.05, seed: case as u64 }).unwrap();
        // ceil(5% of the negatives) in integer arithmetic.
        let t = (5 * nneg).div_ceil(100);
        if out.positives.len() != t || out.negatives.len() != t {
            failures.push(format!("case {case}: {} swaps for {nneg} negatives", out.positives.len()));
        }
        for (k, r) in out.records.iter().enumerate() {
            let d = pos[r.positive].diameter_vox;
            let lo = (side - d) / 2;
            let inside = |i: usize| {
                let (z, y, x) = (i / (side * side), (i / side) % side, i % side);
                [z, y, x].iter().all(|&c| (lo..lo + d).contains(&c))
            };
            let donor = pos[r.positive].data.data();
            let (new_pos, new_neg) = (out.positives[k].data.data(), out.negatives[k].data.data());
            for i in 0..side * side * side {
                if inside(i) && (new_neg[i] != 0.0 || new_pos[i].to_bits() != donor[i].to_bits()) {
                    failures.push(format!("case {case} pair {k}: central block differs at {i}"));
                    break;
                }
            }
            swaps += 1;
        }
    }
    let ok = failures.is_empty();
    let detail = if ok { format!("{swaps} swaps bit-exact, counts = ceil(0.05 * negatives)") } else { failures.join("; ") };
    verdict(7, "random mask", ok, &detail);
    assert!(ok, "{detail}");
}

fn e2e_config() -> PipelineConfig {
    let config = PipelineConfig { seed: E2E_SEED, ..PipelineConfig::default() };
    assert_eq!((config.data.scans, config.data.train), (60, 40));
    assert_eq!(config.clf.variants, Variant::ALL.to_vec());
    config
}

struct E2e {
    _dir: tempfile::TempDir,
    layout: Layout,
    report: RunReport,
}

fn run_once() -> E2e {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path().join("run"));
    let report = run_all::<f32>(&e2e_config(), &layout).unwrap();
    E2e { _dir: dir, layout, report }
}

fn first_run() -> &'static E2e {
    static RUN: OnceLock<E2e> = OnceLock::new();
    RUN.get_or_init(run_once)
}

/// Highest sensitivity among operating points at or under the FP budget.
fn sensitivity_within(curve: &FrocCurve, fp: f64) -> f64 {
    curve.points.iter().filter(|p| p.fp_per_scan <= fp).map(|p| p.sensitivity).fold(0.0, f64::max)
}

#[test]
fn criterion_8_end_to_end() {
    let run = first_run();
    let r = &run.report;
    let ensemble = r.eval.method("ensemble").expect("ensemble row");
    let sens = sensitivity_within(&ensemble.froc, E2E_FP_BUDGET);
    let first = r.pass(Split::Test, "first").unwrap().fp_per_scan();
    let second = r.pass(Split::Test, "second").unwrap().fp_per_scan();
    let best_single = Variant::ALL.iter().map(|v| r.eval.method(v.name()).unwrap().cpm.cpm).fold(0.0, f64::max);
    let a = sens >= E2E_SENSITIVITY;
    let b = second < first;
    let c = ensemble.cpm.cpm >= best_single - E2E_ENSEMBLE_SLACK;
    let split_clean = check_split(&run.layout).is_ok();
    let rows: Vec<(&str, &CpmReport)> = r.eval.methods.iter().map(|m| (m.name.as_str(), &m.cpm)).collect();
    println!("{}", CpmReport::table(&rows));
    verdict(
        8,
        "end-to-end",
        a && b && c && split_clean,
        &format!(
            "(a) sensitivity {sens:.3} at <= {E2E_FP_BUDGET} FP/scan, need >= {E2E_SENSITIVITY}; \
             (b) FP/scan {first:.2} -> {second:.2}; \
             (c) ensemble CPM {:.4} vs best single {best_single:.4} - {E2E_ENSEMBLE_SLACK}; split clean {split_clean}",
            ensemble.cpm.cpm
        ),
    );
    assert!(a, "sensitivity {sens}");
    assert!(b, "second-pass FP/scan {second} not below first-pass {first}");
    assert!(c, "ensemble CPM {} vs best single {best_single}", ensemble.cpm.cpm);
    assert!(split_clean, "{:?}", check_split(&run.layout));
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn criterion_9_determinism() {
    let a = first_run();
    let b = run_once();
    let files = ["eval/candidates.csv", "eval/cpm.txt", "detect/second.csv"];
    let same: Vec<bool> = files.iter().map(|f| read(&a.layout.work.join(f)) == read(&b.layout.work.join(f))).collect();
    let ok = same.iter().all(|&s| s);
    let detail: Vec<String> = files.iter().zip(&same).map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "differs" })).collect();
    verdict(9, "determinism", ok, &detail.join(", "));
    assert!(ok);
}
