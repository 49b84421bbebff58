use nodet_tensor::{Shape, Tensor};

use super::components::{centroid, label_components};
use crate::ct_data::{NormalizedVolume, VoxelMask};
use crate::error::{ensure, Result};
use crate::segnet::{fill_slab, predict_batched, SliceSegmenter};
use crate::Scalar;

/// Probabilities at or above this are foreground.
pub const BINARIZE_AT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { size: 128, stride: 64 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.size >= 2 && self.size.is_multiple_of(2), || format!("window size {} must be even", self.size))?;
        ensure(self.stride >= 1 && self.stride <= self.size, || {
            format!("stride {} must be in [1, {}]", self.stride, self.size)
        })
    }
}

/// Origins along one axis: multiples of the stride, the last one clamped so
/// the window ends at the boundary, duplicates removed. Extents smaller than
/// the window get a single padded window at 0.
pub fn plan_axis(extent: usize, spec: WindowSpec) -> Vec<usize> {
    if extent <= spec.size {
        return vec![0];
    }
    let last = extent - spec.size;
    let mut out: Vec<usize> = (0..).map(|k| k * spec.stride).take_while(|&o| o < last).collect();
    out.push(last);
    out.dedup();
    out
}

/// In-plane origins for every slice; each slice is a window center once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub slices: usize,
    pub ys: Vec<usize>,
    pub xs: Vec<usize>,
    pub size: usize,
}

impl WindowPlan {
    pub fn origins(&self) -> impl Iterator<Item = (usize, [usize; 2])> + '_ {
        (0..self.slices).flat_map(move |z| self.ys.iter().flat_map(move |&y| self.xs.iter().map(move |&x| (z, [y, x]))))
    }

    pub fn len(&self) -> usize {
        self.slices * self.ys.len() * self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn plan_windows(dims: [usize; 3], spec: WindowSpec) -> Result<WindowPlan> {
    spec.validate()?;
    ensure(dims.iter().all(|&d| d >= 1), || format!("empty grid {dims:?}"))?;
    Ok(WindowPlan { slices: dims[0], ys: plan_axis(dims[1], spec), xs: plan_axis(dims[2], spec), size: spec.size })
}

/// One predicted in-plane window (may extend past the grid).
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPrediction<T> {
    pub z: usize,
    pub origin: [isize; 2],
    pub size: usize,
    pub prob: Vec<T>,
}

/// Binary mask plus the max probability seen at each voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap<T> {
    pub mask: VoxelMask,
    pub prob: Vec<T>,
}

impl<T: Scalar> SegmentationMap<T> {
    pub fn empty(scan_id: &str, dims: [usize; 3]) -> Self {
        SegmentationMap { mask: VoxelMask::empty(scan_id, dims), prob: vec![T::zero(); dims.iter().product()] }
    }

    /// OR the binarized window into the mask, max its probabilities.
    /// Both are order independent.
    pub fn merge(&mut self, p: &WindowPrediction<T>) {
        let [_, h, w] = self.mask.dims;
        let cut = T::lit(BINARIZE_AT);
        for r in 0..p.size {
            let y = p.origin[0] + r as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for q in 0..p.size {
                let x = p.origin[1] + q as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let v = p.prob[r * p.size + q];
                let i = (p.z * h + y as usize) * w + x as usize;
                if v >= cut {
                    self.mask.data[i] = 1;
                }
                if v > self.prob[i] {
                    self.prob[i] = v;
                }
            }
        }
    }
}

/// Predict every requested `(z, origin)` window of side `size` in batches.
pub fn predict_windows<T: Scalar, M: SliceSegmenter<T> + ?Sized>(
    model: &M,
    volume: &NormalizedVolume<T>,
    windows: &[(usize, [isize; 2])],
    size: usize,
    batch: usize,
) -> Result<Vec<WindowPrediction<T>>> {
    let dims = volume.geometry.dims;
    let plane = size * size;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        let mut data = vec![T::zero(); chunk.len() * 3 * plane];
        for (&(z, origin), slab) in chunk.iter().zip(data.chunks_mut(3 * plane)) {
            fill_slab(&volume.values, dims, z, origin, [size, size], slab);
        }
        let input = Tensor::from_vec(Shape::new(chunk.len(), 3, 1, size, size), data)?;
        let prob = predict_batched(model, &input, batch)?;
        for (k, &(z, origin)) in chunk.iter().enumerate() {
            out.push(WindowPrediction { z, origin, size, prob: prob.item(k).to_vec() });
        }
    }
    Ok(out)
}

/// Sliding-window prediction over every slice, union-merged.
pub fn first_pass<T: Scalar, M: SliceSegmenter<T> + ?Sized>(
    model: &M,
    volume: &NormalizedVolume<T>,
    spec: WindowSpec,
    batch: usize,
) -> Result<SegmentationMap<T>> {
    let plan = plan_windows(volume.geometry.dims, spec)?;
    let windows: Vec<_> = plan.origins().map(|(z, [y, x])| (z, [y as isize, x as isize])).collect();
    let mut map = SegmentationMap::empty(&volume.scan_id, volume.geometry.dims);
    for p in predict_windows(model, volume, &windows, plan.size, batch)? {
        map.merge(&p);
    }
    Ok(map)
}

/// Patch windows (one per spanned slice, centered on the per-slice centroid)
/// for each 3D component of `mask`.
pub fn second_pass_windows(mask: &VoxelMask, side: usize) -> Vec<(usize, [isize; 2])> {
    let [_, h, w] = mask.dims;
    let mut out = Vec::new();
    for comp in label_components(&mask.data, mask.dims) {
        let mut start = 0;
        while start < comp.len() {
            let z = comp[start] / (h * w);
            let end = start + comp[start..].iter().take_while(|&&i| i / (h * w) == z).count();
            let c = centroid(&comp[start..end], mask.dims);
            let (cy, cx) = (c[1].round() as isize, c[2].round() as isize);
            let half = (side / 2) as isize;
            out.push((z, [cy - half, cx - half]));
            start = end;
        }
    }
    out
}

/// Re-predict `side x side x 3` patches around each first-pass component;
/// the refined map is the union of those predictions only.
pub fn second_pass<T: Scalar, M: SliceSegmenter<T> + ?Sized>(
    model: &M,
    volume: &NormalizedVolume<T>,
    first: &VoxelMask,
    side: usize,
    batch: usize,
) -> Result<SegmentationMap<T>> {
    ensure(first.dims == volume.geometry.dims, || "first-pass mask does not match the volume".into())?;
    ensure(side >= 2 && side.is_multiple_of(2), || format!("patch side {side} must be even"))?;
    let windows = second_pass_windows(first, side);
    let mut map = SegmentationMap::empty(&volume.scan_id, volume.geometry.dims);
    for p in predict_windows(model, volume, &windows, side, batch)? {
        map.merge(&p);
    }
    Ok(map)
}
