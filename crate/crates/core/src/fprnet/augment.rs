use std::io::Write;
use std::path::Path;

use nodet_tensor::{Shape, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ct_data::NormalizedVolume;
use crate::error::{ensure, Error, Result};
use crate::Scalar;

/// One classifier sample: a `[1, 1, D, H, W]` crop, its label, and for
/// positives the nodule diameter in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClfPatch<T> {
    pub data: Tensor<T>,
    pub positive: bool,
    pub diameter_vox: usize,
}

/// Crop `[side]^3` (or `[1, side, side]` when `planar`) centered on `center`
/// (z, y, x), zero-padded off the grid. The window starts at `center - side/2`.
pub fn extract_clf_patch<T: Scalar>(volume: &NormalizedVolume<T>, center: [usize; 3], side: usize, planar: bool) -> Result<Tensor<T>> {
    let dims = volume.geometry.dims;
    ensure(side > 0, || "empty patch".into())?;
    ensure(center.iter().zip(dims).all(|(&c, d)| c < d), || format!("center {center:?} outside {dims:?}"))?;
    let depth = if planar { 1 } else { side };
    let half = |n: usize| (n / 2) as isize;
    let o = [center[0] as isize - half(depth), center[1] as isize - half(side), center[2] as isize - half(side)];
    let data = Tensor::from_fn(Shape::new(1, 1, depth, side, side), |i| {
        let [z, y, x] = unflatten(i, [depth, side, side]);
        let (zz, yy, xx) = (o[0] + z as isize, o[1] + y as isize, o[2] + x as isize);
        if zz < 0 || yy < 0 || xx < 0 || zz >= dims[0] as isize || yy >= dims[1] as isize || xx >= dims[2] as isize {
            T::zero()
        } else {
            volume.at(zz as usize, yy as usize, xx as usize)
        }
    });
    Ok(data)
}

fn unflatten(i: usize, [_, h, w]: [usize; 3]) -> [usize; 3] {
    [i / (h * w), i / w % h, i % w]
}

/// Single-item, single-channel gather: `out[c] = p[f(c)]`.
fn remap<T: Scalar>(p: &Tensor<T>, f: impl Fn([usize; 3]) -> [usize; 3]) -> Tensor<T> {
    let dims = p.shape().dims();
    Tensor::from_fn(p.shape(), |i| {
        let [z, y, x] = f(unflatten(i, dims));
        p.data()[(z * dims[1] + y) * dims[2] + x]
    })
}

/// 90 degree rotation in the axial (y, x) plane: voxel `(y, x)` moves to
/// `(x, n-1-y)`.
pub fn rotate90<T: Scalar>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let s = p.shape();
    ensure(s.n == 1 && s.c == 1, || format!("rotation takes one single-channel patch, got {s}"))?;
    ensure(s.h == s.w, || format!("axial rotation needs a square plane, got {s}"))?;
    let n = s.h;
    Ok(remap(p, |[z, y, x]| [z, n - 1 - x, y]))
}

/// Shift by `delta` voxels along `axis` (0 = z, 1 = y, 2 = x), repeating the
/// edge voxel into the vacated layer. `p` holds one single-channel patch.
pub fn translate<T: Scalar>(p: &Tensor<T>, axis: usize, delta: isize) -> Tensor<T> {
    let extent = p.shape().dims()[axis] as isize;
    remap(p, |mut c| {
        c[axis] = (c[axis] as isize - delta).clamp(0, extent - 1) as usize;
        c
    })
}

/// Identity, three axial rotations and six one-voxel translations.
pub fn geometric_augment<T: Scalar>(p: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let s = p.shape();
    ensure(s.n == 1 && s.c == 1, || format!("augmentation takes one patch, got {s}"))?;
    let r1 = rotate90(p)?;
    let r2 = rotate90(&r1)?;
    let r3 = rotate90(&r2)?;
    let mut out = vec![p.clone(), r1, r2, r3];
    for axis in 0..3 {
        for delta in [-1, 1] {
            out.push(translate(p, axis, delta));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSwapSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for MaskSwapSpec {
    fn default() -> Self {
        MaskSwapSpec { fraction: 0.05, seed: 0 }
    }
}

impl MaskSwapSpec {
    /// `ceil(fraction * negatives)`.
    pub fn swap_count(&self, negatives: usize) -> usize {
        (self.fraction * negatives as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

/// Audit row: which negative hosted which positive's nodule block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwapRecord {
    pub pair: usize,
    pub positive: usize,
    pub negative: usize,
    pub edge: usize,
}

#[derive(Clone, Debug)]
pub struct MaskSwapOutput<T> {
    pub positives: Vec<ClfPatch<T>>,
    pub negatives: Vec<ClfPatch<T>>,
    pub records: Vec<SwapRecord>,
}

/// Start and length of the central `edge` block on each axis; axes shorter
/// than the block (planar depth) keep their full extent.
pub fn central_block(dims: [usize; 3], edge: usize) -> [(usize, usize); 3] {
    dims.map(|n| {
        let len = edge.min(n);
        ((n - len) / 2, len)
    })
}

fn for_block(dims: [usize; 3], edge: usize, mut f: impl FnMut(usize)) {
    let [(z0, lz), (y0, ly), (x0, lx)] = central_block(dims, edge);
    for z in z0..z0 + lz {
        for y in y0..y0 + ly {
            for x in x0..x0 + lx {
                f((z * dims[1] + y) * dims[2] + x);
            }
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, pool: usize, count: usize) -> Vec<usize> {
    if count <= pool {
        sample(rng, pool, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..pool)).collect()
    }
}

/// Paste nodule blocks of `T` positives into `T` negatives (new positives)
/// and blank the nodule block of those positives (new negatives).
/// Positives whose diameter exceeds the patch edge are redrawn.
pub fn random_mask_swap<T: Scalar>(positives: &[ClfPatch<T>], negatives: &[ClfPatch<T>], spec: &MaskSwapSpec) -> Result<MaskSwapOutput<T>> {
    ensure(!positives.is_empty() && !negatives.is_empty(), || "mask swap needs positives and negatives".into())?;
    let shape = positives[0].data.shape();
    ensure(positives.iter().chain(negatives).all(|p| p.data.shape() == shape), || "mask swap patches differ in shape".into())?;
    let side = shape.h.max(shape.w).max(shape.d);
    let valid: Vec<usize> = (0..positives.len()).filter(|&i| (1..=side).contains(&positives[i].diameter_vox)).collect();
    ensure(!valid.is_empty(), || format!("no positive has a nodule diameter in [1, {side}] voxels"))?;
    let t = spec.swap_count(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let donors: Vec<usize> = draw(&mut rng, valid.len(), t).into_iter().map(|i| valid[i]).collect();
    let hosts = draw(&mut rng, negatives.len(), t);
    let dims = shape.dims();
    let mut out = MaskSwapOutput { positives: Vec::with_capacity(t), negatives: Vec::with_capacity(t), records: Vec::with_capacity(t) };
    for (pair, (&pi, &ni)) in donors.iter().zip(&hosts).enumerate() {
        let donor = &positives[pi];
        let edge = donor.diameter_vox;
        let mut pasted = negatives[ni].data.clone();
        let mut blanked = donor.data.clone();
        for_block(dims, edge, |i| {
            pasted.data_mut()[i] = donor.data.data()[i];
            blanked.data_mut()[i] = T::zero();
        });
        out.positives.push(ClfPatch { data: pasted, positive: true, diameter_vox: edge });
        out.negatives.push(ClfPatch { data: blanked, positive: false, diameter_vox: 0 });
        out.records.push(SwapRecord { pair, positive: pi, negative: ni, edge });
    }
    Ok(out)
}

pub const SWAP_HEADER: &str = "pair,positive_index,negative_index,edge_voxels";

pub fn write_swap_manifest<W: Write>(mut w: W, records: &[SwapRecord]) -> Result<()> {
    let io = |e| Error::io("swap manifest", e);
    writeln!(w, "{SWAP_HEADER}").map_err(io)?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.pair, r.positive, r.negative, r.edge).map_err(io)?;
    }
    Ok(())
}

pub fn save_swap_manifest(path: &Path, records: &[SwapRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_swap_manifest(std::io::BufWriter::new(f), records)
}
