use nodet::cascade::WindowSpec;
use nodet::ct_data::{generate_phantom, normalize_hu, rasterize_nodule, PhantomSpec, VoxelMask, HU_HI, HU_LO};
use nodet::hard_mining::*;
use nodet::sampler::{extract_edge_set, PatchSpec};
use nodet::segnet::{extract_training_patch, train_step, SegModel, SegModelConfig, SegTrainSpec, SliceSegmenter, TrainingPatch};
use nodet::Result;
use nodet_tensor::optim::Adam;
use nodet_tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(dims: [usize; 2], y0: usize, x0: usize, side: usize) -> Vec<u8> {
    let mut m = vec![0u8; dims[0] * dims[1]];
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m[y * dims[1] + x] = 1;
        }
    }
    m
}

#[test]
fn overlap_examples() {
    let a = square([8, 8], 1, 1, 4);
    assert_eq!(overlap_rate(&a, &a).unwrap(), 1.0);
    assert_eq!(overlap_rate(&a, &square([8, 8], 5, 5, 3)).unwrap(), 0.0);
    // Shifted by two rows: 2x4 shared of 16 + 16 - 8.
    let b = square([8, 8], 3, 1, 4);
    let shared = a.iter().zip(&b).filter(|(&p, &q)| p == 1 && q == 1).count();
    assert_eq!(shared, 8);
    assert!((overlap_rate(&a, &b).unwrap() - 8.0 / 24.0).abs() < 1e-12);
    assert_eq!(overlap_rate(&[0, 0], &[0, 0]).unwrap(), 1.0);
    assert!(overlap_rate(&[0, 1], &[0, 1, 0]).is_err());
    assert!((overlap_with(OverlapMetric::Dice, &a, &b).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn resample_count_examples() {
    assert_eq!(positive_resample_count(80, 0.75).unwrap(), 20);
    assert_eq!(positive_resample_count(80, 1.0).unwrap(), 0);
    assert_eq!(positive_resample_count(80, 0.0).unwrap(), 80);
    assert_eq!(positive_resample_count(3, 0.5).unwrap(), 2);
    assert!(positive_resample_count(3, 1.5).is_err());
}

proptest! {
    #[test]
    fn overlap_symmetric_and_extremal(bits in prop::collection::vec((0u8..2, 0u8..2), 1..80)) {
        let (a, b): (Vec<u8>, Vec<u8>) = bits.into_iter().unzip();
        let o = overlap_rate(&a, &b).unwrap();
        prop_assert_eq!(o, overlap_rate(&b, &a).unwrap());
        prop_assert_eq!(o == 1.0, a == b);
        let disjoint = !a.iter().zip(&b).any(|(&p, &q)| p == 1 && q == 1);
        let nonempty = a.contains(&1) && b.contains(&1);
        if nonempty {
            prop_assert_eq!(o == 0.0, disjoint);
        }
    }

    #[test]
    fn resample_count_monotone_and_bounded(c in 0usize..10_000, o1 in 0.0f64..=1.0, o2 in 0.0f64..=1.0) {
        let (lo, hi) = if o1 <= o2 { (o1, o2) } else { (o2, o1) };
        let (t_lo, t_hi) = (positive_resample_count(c, lo).unwrap(), positive_resample_count(c, hi).unwrap());
        prop_assert!(t_hi <= t_lo && t_lo <= c);
    }
}

struct Case {
    volume: nodet::ct_data::NormalizedVolume<f64>,
    annotations: Vec<nodet::ct_data::NoduleAnnotation>,
    gold: VoxelMask,
}

fn case(seed: u64) -> Case {
    let spec = PhantomSpec { seed, nodule_count: (2, 3), ..PhantomSpec::default() };
    let ph = generate_phantom::<f64>(&spec, &format!("s{seed}")).unwrap();
    Case { volume: normalize_hu(&ph.volume, HU_LO, HU_HI).unwrap(), annotations: ph.annotations, gold: ph.mask }
}

fn nodule_edge_total(c: &Case, k: usize) -> usize {
    let m = rasterize_nodule(&c.volume.geometry, &c.annotations[k]).unwrap();
    let [d, h, w] = m.dims;
    (0..d).filter(|&z| m.slice_has_any(z)).map(|z| extract_edge_set(m.slice(z), [h, w]).unwrap().voxels.len()).sum()
}

const PATCH: usize = 32;

#[test]
fn empty_prediction_gives_no_negatives_and_full_resampling() {
    let c = case(3);
    let empty = VoxelMask::empty("x", c.gold.dims);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mined = mine_scan(&empty, &c.volume, &c.annotations, &HardMiningPolicy::default(), PatchSpec::new(PATCH).unwrap(), &mut rng).unwrap();
    assert!(mined.negatives.is_empty());
    let want: usize = (0..c.annotations.len()).map(|k| nodule_edge_total(&c, k)).sum();
    assert_eq!(mined.positives.len(), want);
    assert!(mined.positives.iter().all(|p| c.gold.get(p.z, p.y, p.x) && p.positive));
}

#[test]
fn resample_scale_shrinks_each_nodule_rounding_up() {
    let c = case(3);
    let empty = VoxelMask::empty("x", c.gold.dims);
    let policy = HardMiningPolicy { resample_scale: 0.05, ..HardMiningPolicy::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mined = mine_scan(&empty, &c.volume, &c.annotations, &policy, PatchSpec::new(PATCH).unwrap(), &mut rng).unwrap();
    let want: usize = (0..c.annotations.len()).map(|k| (nodule_edge_total(&c, k) * 5).div_ceil(100)).sum();
    assert_eq!(mined.positives.len(), want);
    let bad = HardMiningPolicy { resample_scale: 0.0, ..HardMiningPolicy::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn perfect_prediction_gives_nothing() {
    let c = case(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mined = mine_scan(&c.gold, &c.volume, &c.annotations, &HardMiningPolicy::default(), PatchSpec::new(PATCH).unwrap(), &mut rng).unwrap();
    assert!(mined.is_empty());
}

/// First slice with no gold voxels whose in-plane center is far from gold.
fn free_slice(c: &Case) -> usize {
    (0..c.gold.dims[0]).find(|&z| !c.gold.slice_has_any(z)).expect("phantom has a nodule-free slice")
}

#[test]
fn blob_on_free_slice_is_one_negative_at_its_centroid() {
    let c = case(5);
    let z = free_slice(&c);
    let mut pred = c.gold.clone();
    let blob = [(40, 50), (40, 51), (41, 50), (41, 51), (42, 51)];
    for &(y, x) in &blob {
        pred.set(z, y, x, true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mined = mine_scan(&pred, &c.volume, &c.annotations, &HardMiningPolicy::default(), PatchSpec::new(PATCH).unwrap(), &mut rng).unwrap();
    assert_eq!(mined.negatives.len(), 1);
    let n = &mined.negatives[0];
    let cy = blob.iter().map(|b| b.0 as f64).sum::<f64>() / 5.0;
    let cx = blob.iter().map(|b| b.1 as f64).sum::<f64>() / 5.0;
    assert_eq!((n.z, n.y, n.x), (z, cy.round() as usize, cx.round() as usize));
    assert_eq!(n.source, MinedSource::FalsePositive);
    assert!(!n.positive);
}

#[test]
fn component_touching_gold_is_not_a_negative() {
    let c = case(6);
    let i = c.gold.data.iter().position(|&v| v != 0).unwrap();
    let [_, h, w] = c.gold.dims;
    let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
    // A 3-voxel bar that shares exactly its last voxel with gold.
    let mut pred = VoxelMask::empty("x", c.gold.dims);
    pred.set(z, y, x, true);
    let y_out = (y as isize - 1..=y as isize - 1).find(|&yy| yy >= 0 && !c.gold.get(z, yy as usize, x)).unwrap() as usize;
    pred.set(z, y_out, x, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mined = mine_scan(&pred, &c.volume, &c.annotations, &HardMiningPolicy::default(), PatchSpec::new(PATCH).unwrap(), &mut rng).unwrap();
    assert!(mined.negatives.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mined_negatives_never_see_gold(seed in 0u64..8, blobs in prop::collection::vec((0usize..32, 0usize..96, 0usize..96), 1..40)) {
        let c = case(seed);
        let mut pred = VoxelMask::empty("x", c.gold.dims);
        for &(z, y, x) in &blobs {
            pred.set(z, y, x, true);
            if x + 1 < 96 {
                pred.set(z, y, x + 1, true);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = PatchSpec::new(PATCH).unwrap();
        let mined = mine_scan(&pred, &c.volume, &c.annotations, &HardMiningPolicy::default(), patch, &mut rng).unwrap();
        for n in &mined.negatives {
            let p = extract_training_patch(&c.volume, &c.gold, [n.z, n.y, n.x], patch).unwrap();
            prop_assert!(p.label.data().iter().all(|&v| v == 0.0));
        }
        for k in 0..c.annotations.len() {
            let m = rasterize_nodule(&c.volume.geometry, &c.annotations[k]).unwrap();
            let got = mined.positives.iter().filter(|p| m.get(p.z, p.y, p.x)).count();
            prop_assert!(got <= nodule_edge_total(&c, k));
        }
    }
}

struct Zeros;

impl SliceSegmenter<f64> for Zeros {
    fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = x.shape();
        Ok(Tensor::zeros(Shape::new(s.n, 1, 1, s.h, s.w)))
    }
}

#[test]
fn zero_model_mines_no_negatives() {
    let c = case(7);
    let scans = vec![LabeledScan { volume: c.volume.clone(), annotations: c.annotations.clone() }];
    let spec = WindowSpec { size: 64, stride: 32 };
    let patch = PatchSpec::new(PATCH).unwrap();
    let a = mine_hard_samples(&Zeros, &scans, &HardMiningPolicy::default(), spec, patch, 16, 1).unwrap();
    assert!(a.negatives.is_empty());
    assert!(!a.positives.is_empty());
    assert_eq!(mine_hard_samples(&Zeros, &scans, &HardMiningPolicy::default(), spec, patch, 16, 1).unwrap(), a);
}

fn disc_patches(n: usize, side: usize, seed: u64) -> Vec<TrainingPatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (cy, cx) = (rng.gen_range(5.0..side as f64 - 5.0), rng.gen_range(5.0..side as f64 - 5.0));
            let disc = |i: usize| (((i / side) as f64 - cy).powi(2) + ((i % side) as f64 - cx).powi(2) <= 9.0) as u8 as f64;
            let plane = side * side;
            TrainingPatch {
                input: Tensor::from_fn(Shape::new(1, 3, 1, side, side), |i| 0.2 + 0.5 * disc(i % plane)),
                label: Tensor::from_fn(Shape::new(1, 1, 1, side, side), disc),
                positive: true,
            }
        })
        .collect()
}

fn small_model(seed: u64) -> SegModel<f64> {
    SegModel::new(SegModelConfig { features: [4, 4, 8, 8, 4, 4], dense_units: 2, in_channels: 3 }, seed).unwrap()
}

#[test]
fn finetune_runs_at_the_low_rate_and_moves_weights() {
    let patches = disc_patches(10, 16, 2);
    let mut model = small_model(1);
    let before = model.store.clone();
    let spec = SegTrainSpec { batch_size: 4, max_epochs: 2, patience: 1, ..SegTrainSpec::default() };
    let hist = finetune_segmentation(&mut model, &patches, &spec).unwrap();
    assert_eq!(hist.lr, 1e-5);
    let mut csv = Vec::new();
    hist.write(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("# lr = 0.00001\n"));
    assert!(model.store.ids().any(|id| model.store.get(id).data() != before.get(id).data()));
    assert!(finetune_segmentation(&mut model, &[], &spec).is_err());
}

#[test]
fn finetune_loss_does_not_increase_on_a_fixed_batch() {
    let patches = disc_patches(4, 16, 3);
    let x = Tensor::stack(&patches.iter().map(|p| p.input.clone()).collect::<Vec<_>>()).unwrap();
    let y = Tensor::stack(&patches.iter().map(|p| p.label.clone()).collect::<Vec<_>>()).unwrap();
    let mut model = small_model(2);
    let mut opt = Adam::new(SegTrainSpec::default().finetune_lr);
    let mut prev = f64::INFINITY;
    for step in 0..50 {
        let loss = train_step(&mut model, &mut opt, x.clone(), &y, 1.0, step).unwrap();
        assert!(loss <= prev + 1e-9, "step {step}: {loss} > {prev}");
        prev = loss;
    }
}

#[test]
fn mined_csv_roundtrip() {
    let rows = vec![
        MinedCenter { scan_id: "a".into(), z: 1, y: 2, x: 3, positive: false, source: MinedSource::FalsePositive },
        MinedCenter { scan_id: "b".into(), z: 4, y: 5, x: 6, positive: true, source: MinedSource::Resample },
        MinedCenter { scan_id: "b".into(), z: 0, y: 0, x: 0, positive: true, source: MinedSource::Original },
    ];
    let mut buf = Vec::new();
    write_mined(&mut buf, &rows).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("scan_id,z,y,x,label,source\na,1,2,3,0,false_positive\n"));
    assert_eq!(read_mined(&buf[..]).unwrap(), rows);
    assert!(read_mined("scan_id,z,y,x,label,source\na,1,2,3,2,resample\n".as_bytes()).is_err());
}
