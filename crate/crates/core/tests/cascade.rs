use nodet::cascade::*;
use nodet::ct_data::{Geometry, NormalizedVolume, VoxelMask};
use nodet::segnet::{SegModel, SegModelConfig, SliceSegmenter};
use nodet::Result;
use nodet_tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Foreground wherever the center slice is bright.
struct Threshold;

impl SliceSegmenter<f64> for Threshold {
    fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = x.shape();
        Ok(Tensor::from_fn(Shape::new(s.n, 1, 1, s.h, s.w), |i| {
            let (n, p) = (i / (s.h * s.w), i % (s.h * s.w));
            (x.item(n)[s.h * s.w + p] > 0.5) as u8 as f64 * 0.9
        }))
    }
}

struct Zeros;

impl SliceSegmenter<f64> for Zeros {
    fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = x.shape();
        Ok(Tensor::zeros(Shape::new(s.n, 1, 1, s.h, s.w)))
    }
}

/// Thresholds sliding windows but denies every second-pass patch.
struct DenyPatches {
    patch: usize,
}

impl SliceSegmenter<f64> for DenyPatches {
    fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        if x.shape().h == self.patch {
            Zeros.predict(x)
        } else {
            Threshold.predict(x)
        }
    }
}

fn volume(dims: [usize; 3], bright: &[[usize; 3]]) -> NormalizedVolume<f64> {
    let g = Geometry::unit(dims);
    let mut values = vec![0.1; g.len()];
    for &[z, y, x] in bright {
        values[g.index(z, y, x)] = 0.9;
    }
    NormalizedVolume { scan_id: "v".into(), geometry: g, values }
}

/// `nz` slices of an `r x r` square.
fn cube(z: usize, nz: usize, y: usize, x: usize, r: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in z..z + nz {
        for b in y..y + r {
            for c in x..x + r {
                out.push([a, b, c]);
            }
        }
    }
    out
}

#[test]
fn axis_plans() {
    let s = WindowSpec::default();
    assert_eq!(plan_axis(256, s), vec![0, 64, 128]);
    assert_eq!(plan_axis(129, s), vec![0, 1]);
    assert_eq!(plan_axis(100, s), vec![0]);
    assert_eq!(plan_axis(128, s), vec![0]);
    assert_eq!(plan_axis(200, s), vec![0, 64, 72]);
    let p = plan_windows([5, 256, 100], s).unwrap();
    assert_eq!(p.len(), 5 * 3);
    assert!(WindowSpec { size: 127, stride: 64 }.validate().is_err());
}

proptest! {
    #[test]
    fn windows_cover_every_voxel(extent in 64usize..=512) {
        let spec = WindowSpec::default();
        let origins = plan_axis(extent, spec);
        let mut covered = vec![false; extent];
        for &o in &origins {
            prop_assert!(o == 0 || o + spec.size <= extent);
            for c in covered.iter_mut().skip(o).take(spec.size) {
                *c = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
        prop_assert!(origins.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn zero_model_gives_empty_mask() {
    let v = volume([3, 140, 150], &cube(1, 1, 10, 10, 4));
    let m = first_pass(&Zeros, &v, WindowSpec::default(), 8).unwrap();
    assert_eq!(m.mask.count(), 0);
}

#[test]
fn union_keeps_blobs_from_different_windows() {
    let mut bright = cube(1, 2, 5, 5, 3);
    bright.extend(cube(0, 2, 180, 185, 3));
    let v = volume([3, 192, 192], &bright);
    let m = first_pass(&Threshold, &v, WindowSpec::default(), 4).unwrap();
    for &[z, y, x] in &bright {
        assert!(m.mask.get(z, y, x));
    }
    assert_eq!(m.mask.count(), bright.len());
    assert_eq!(first_pass(&Threshold, &v, WindowSpec::default(), 3).unwrap(), m);
}

#[test]
fn merge_order_does_not_matter() {
    let model = SegModel::<f64>::new(SegModelConfig { features: [2, 3, 4, 4, 3, 2], dense_units: 1, in_channels: 3 }, 5).unwrap();
    let v = volume([2, 40, 40], &cube(0, 2, 10, 10, 5));
    let spec = WindowSpec { size: 16, stride: 8 };
    let plan = plan_windows([2, 40, 40], spec).unwrap();
    let wins: Vec<_> = plan.origins().map(|(z, [y, x])| (z, [y as isize, x as isize])).collect();
    let mut preds = predict_windows(&model, &v, &wins, 16, 5).unwrap();
    let mut a = SegmentationMap::empty("v", [2, 40, 40]);
    preds.iter().for_each(|p| a.merge(p));
    preds.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let mut b = SegmentationMap::empty("v", [2, 40, 40]);
    preds.iter().for_each(|p| b.merge(p));
    assert_eq!(a, b);
    assert_eq!(first_pass(&model, &v, spec, 7).unwrap(), a);
}

#[test]
fn single_window_grid_matches_direct_prediction() {
    let model = SegModel::<f64>::new(SegModelConfig { features: [2, 3, 4, 4, 3, 2], dense_units: 1, in_channels: 3 }, 6).unwrap();
    let mut bright = cube(1, 2, 20, 30, 6);
    bright.extend(cube(3, 1, 60, 10, 4));
    let v = volume([4, 100, 90], &bright);
    let spec = WindowSpec::default();
    let got = first_pass(&model, &v, spec, 2).unwrap();
    // Oracle: zero-pad each 3-slice slab to 128 x 128 by hand.
    let [d, h, w] = v.geometry.dims;
    for z in 0..d {
        let mut slab = vec![0.0; 3 * 128 * 128];
        for k in 0..3 {
            let zz = (z as isize + k as isize - 1).clamp(0, d as isize - 1) as usize;
            for y in 0..h {
                for x in 0..w {
                    slab[k * 128 * 128 + y * 128 + x] = v.at(zz, y, x);
                }
            }
        }
        let p = model.predict(&Tensor::from_vec(Shape::new(1, 3, 1, 128, 128), slab).unwrap()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let pv = p.at(0, 0, 0, y, x);
                assert_eq!(got.prob[v.geometry.index(z, y, x)], pv);
                assert_eq!(got.mask.get(z, y, x), pv >= 0.5);
            }
        }
    }
}

#[test]
fn second_pass_can_remove_or_keep_blobs() {
    let bright = cube(1, 3, 40, 40, 4);
    let v = volume([5, 130, 130], &bright);
    let first = first_pass(&Threshold, &v, WindowSpec::default(), 4).unwrap();
    assert_eq!(first.mask.count(), bright.len());
    let denied = second_pass(&DenyPatches { patch: 64 }, &v, &first.mask, 64, 4).unwrap();
    assert_eq!(denied.mask.count(), 0);
    let kept = second_pass(&Threshold, &v, &first.mask, 64, 4).unwrap();
    assert_eq!(kept.mask, first.mask);
    // One window per spanned slice.
    assert_eq!(second_pass_windows(&first.mask, 64).len(), 3);
}

fn map_from(dims: [usize; 3], on: &[[usize; 3]]) -> SegmentationMap<f64> {
    let mut m = SegmentationMap::empty("s", dims);
    for &[z, y, x] in on {
        m.mask.set(z, y, x, true);
        let i = m.mask.index(z, y, x);
        m.prob[i] = 0.8;
    }
    m
}

#[test]
fn candidate_examples() {
    let g = Geometry::new([6, 8, 8], [-10.0, 5.0, 2.0], [2.0, 0.5, 0.5]).unwrap();
    let c = extract_candidates(&map_from(g.dims, &[[3, 4, 5]]), &g).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].center_world, [-4.0, 7.0, 4.5]);
    assert!((c[0].seg_score - 0.8).abs() < 1e-12);
    assert!((c[0].diameter_mm - equivalent_diameter(1, 1.0)).abs() < 1e-12);

    let two = extract_candidates(&map_from(g.dims, &[[0, 0, 0], [2, 2, 2]]), &g).unwrap();
    assert_eq!(two.len(), 2);
    let touching = extract_candidates(&map_from(g.dims, &[[0, 0, 0], [1, 1, 1]]), &g).unwrap();
    assert_eq!(touching.len(), 1);

    let l = [[1, 1, 1], [1, 1, 2], [1, 1, 3], [1, 2, 3], [2, 3, 4]];
    let c = extract_candidates(&map_from(g.dims, &l), &Geometry::unit(g.dims)).unwrap();
    assert_eq!(c.len(), 1);
    let mean = |a: usize| l.iter().map(|p| p[a] as f64).sum::<f64>() / l.len() as f64;
    assert_eq!(c[0].center_world, [mean(0), mean(1), mean(2)]);
    assert!(extract_candidates(&map_from(g.dims, &[]), &g).unwrap().is_empty());
}

#[test]
fn equivalent_diameter_of_sphere_volume() {
    let d = equivalent_diameter(1000, 0.7);
    let v = std::f64::consts::PI / 6.0 * (d / 0.7).powi(3);
    assert!((v - 1000.0).abs() < 1e-9);
}

/// Union-find over explicit 26-neighbour offsets.
fn brute_count(mask: &[u8], dims: [usize; 3]) -> usize {
    let [d, h, w] = dims;
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..mask.len() {
        if mask[i] == 0 {
            continue;
        }
        let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (a, b, c) = (z + dz, y + dy, x + dx);
                    if a < 0 || b < 0 || c < 0 || a >= d as isize || b >= h as isize || c >= w as isize {
                        continue;
                    }
                    let j = ((a as usize) * h + b as usize) * w + c as usize;
                    if mask[j] != 0 {
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        parent[ri] = rj;
                    }
                }
            }
        }
    }
    (0..mask.len()).filter(|&i| mask[i] != 0 && find(&mut parent, i) == i).count()
}

proptest! {
    #[test]
    fn candidate_count_equals_component_count(
        (dims, bits) in (1usize..5, 1usize..9, 1usize..9)
            .prop_flat_map(|(d, h, w)| (Just([d, h, w]), prop::collection::vec(prop::bool::weighted(0.3), d * h * w)))
    ) {
        let mask: Vec<u8> = bits.iter().map(|&b| b as u8).collect();
        let mut map = SegmentationMap::<f64>::empty("s", dims);
        map.mask = VoxelMask { scan_id: "s".into(), dims, data: mask.clone() };
        let c = extract_candidates(&map, &Geometry::unit(dims)).unwrap();
        prop_assert_eq!(c.len(), brute_count(&mask, dims));
        let comps = label_components(&mask, dims);
        prop_assert_eq!(comps.iter().map(Vec::len).sum::<usize>(), mask.iter().filter(|&&b| b != 0).count());
    }
}

#[test]
fn candidate_csv_roundtrip() {
    let cands = vec![
        Candidate { scan_id: "a".into(), center_world: [1.5, -2.0, 3.25], diameter_mm: 6.2, seg_score: 0.7, clf_prob: Some(0.9) },
        Candidate { scan_id: "b".into(), center_world: [0.0, 1.0, 2.0], diameter_mm: 3.0, seg_score: 0.55, clf_prob: Some(0.1) },
    ];
    let mut buf = Vec::new();
    write_candidates(&mut buf, &cands).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("seriesuid,coordX,coordY,coordZ,diameter_mm,seg_score,clf_prob\na,3.25,-2,1.5,"));
    assert_eq!(read_candidates(&buf[..]).unwrap(), cands);
    let bare: Vec<_> = cands.iter().cloned().map(|c| Candidate { clf_prob: None, ..c }).collect();
    let mut buf = Vec::new();
    write_candidates(&mut buf, &bare).unwrap();
    assert_eq!(read_candidates(&buf[..]).unwrap(), bare);
    assert!(read_candidates("id,x\n".as_bytes()).is_err());
}
