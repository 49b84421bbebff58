use nodet_tensor::{Shape, Tensor};

use crate::ct_data::{NormalizedVolume, VoxelMask};
use crate::error::{ensure, Result};
use crate::sampler::PatchSpec;
use crate::Scalar;

/// Three-slice input block with the center-slice label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPatch<T> {
    /// `[1, 3, 1, L, L]`, slices z-1, z, z+1.
    pub input: Tensor<T>,
    /// `[1, 1, 1, L, L]` binary.
    pub label: Tensor<T>,
    pub positive: bool,
}

/// Slab `[z-1, z, z+1]` x `[y0, y0+h)` x `[x0, x0+w)`, written as 3 planes of
/// `h*w` into `out`. Slices past the ends repeat the edge slice, in-plane
/// positions off the grid are zero.
pub fn fill_slab<T: Scalar>(values: &[T], dims: [usize; 3], z: usize, origin: [isize; 2], size: [usize; 2], out: &mut [T]) {
    let [d, gh, gw] = dims;
    let [h, w] = size;
    debug_assert_eq!(out.len(), 3 * h * w);
    out.fill(T::zero());
    for (k, plane) in out.chunks_mut(h * w).enumerate() {
        let zz = (z as isize + k as isize - 1).clamp(0, d as isize - 1) as usize;
        let slice = &values[zz * gh * gw..(zz + 1) * gh * gw];
        copy_window(slice, [gh, gw], origin, size, plane);
    }
}

/// Zero-padded in-plane window copy.
pub(crate) fn copy_window<T: Copy>(slice: &[T], grid: [usize; 2], origin: [isize; 2], size: [usize; 2], out: &mut [T]) {
    let [gh, gw] = grid;
    let [h, w] = size;
    let x_lo = origin[1].max(0);
    let x_hi = (origin[1] + w as isize).min(gw as isize);
    if x_lo >= x_hi {
        return;
    }
    for r in 0..h {
        let y = origin[0] + r as isize;
        if y < 0 || y >= gh as isize {
            continue;
        }
        let src = y as usize * gw;
        let dst = r * w + (x_lo - origin[1]) as usize;
        let len = (x_hi - x_lo) as usize;
        out[dst..dst + len].copy_from_slice(&slice[src + x_lo as usize..src + x_hi as usize]);
    }
}

/// Crop an `L x L x 3` patch whose window starts at `center - L/2` in-plane.
pub fn extract_training_patch<T: Scalar>(
    volume: &NormalizedVolume<T>,
    mask: &VoxelMask,
    center: [usize; 3],
    patch: PatchSpec,
) -> Result<TrainingPatch<T>> {
    let dims = volume.geometry.dims;
    ensure(mask.dims == dims, || format!("mask dims {:?} differ from volume dims {dims:?}", mask.dims))?;
    ensure(center.iter().zip(dims).all(|(&c, d)| c < d), || format!("center {center:?} outside {dims:?}"))?;
    let l = patch.side;
    let origin = [center[1] as isize - (l / 2) as isize, center[2] as isize - (l / 2) as isize];
    let mut input = vec![T::zero(); 3 * l * l];
    fill_slab(&volume.values, dims, center[0], origin, [l, l], &mut input);
    let mut bits = vec![0u8; l * l];
    copy_window(mask.slice(center[0]), [dims[1], dims[2]], origin, [l, l], &mut bits);
    let positive = bits.iter().any(|&b| b != 0);
    let label = bits.into_iter().map(|b| if b != 0 { T::one() } else { T::zero() }).collect();
    Ok(TrainingPatch {
        input: Tensor::from_vec(Shape::new(1, 3, 1, l, l), input)?,
        label: Tensor::from_vec(Shape::new(1, 1, 1, l, l), label)?,
        positive,
    })
}
