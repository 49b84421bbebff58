use crate::error::{ensure, Error, Result};
use crate::Scalar;

/// A `(z, y, x)` triple. World coordinates are millimetres.
pub type Triple = [f64; 3];

/// Grid extent plus the world placement of voxel `(0, 0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub origin: Triple,
    pub spacing: Triple,
}

impl Geometry {
    pub fn new(dims: [usize; 3], origin: Triple, spacing: Triple) -> Result<Self> {
        ensure(dims.iter().all(|&d| d >= 1), || format!("grid dimensions must be >= 1, got {dims:?}"))?;
        ensure(spacing.iter().all(|&s| s > 0.0 && s.is_finite()), || {
            format!("spacing must be positive, got {spacing:?}")
        })?;
        ensure(origin.iter().all(|o| o.is_finite()), || format!("non-finite origin {origin:?}"))?;
        Ok(Geometry { dims, origin, spacing })
    }

    /// 1 mm isotropic grid at the world origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Geometry { dims, origin: [0.0; 3], spacing: [1.0; 3] }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[2];
        let y = (index / self.dims[2]) % self.dims[1];
        [index / self.slice_len(), y, x]
    }

    pub fn world_to_voxel(&self, world: Triple) -> Triple {
        std::array::from_fn(|a| (world[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_to_world(&self, voxel: Triple) -> Triple {
        std::array::from_fn(|a| voxel[a] * self.spacing[a] + self.origin[a])
    }

    /// Nearest voxel index, or `None` when the point falls outside the grid.
    pub fn nearest_voxel(&self, voxel: Triple) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let r = voxel[a].round();
            if r < 0.0 || r >= self.dims[a] as f64 {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    pub fn contains_voxel(&self, voxel: Triple) -> bool {
        self.nearest_voxel(voxel).is_some()
    }

    pub fn mean_spacing(&self) -> f64 {
        self.spacing.iter().sum::<f64>() / 3.0
    }
}

/// Raw scan intensities in Hounsfield units, stored `z`-major, `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub scan_id: String,
    pub geometry: Geometry,
    pub voxels: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(scan_id: impl Into<String>, geometry: Geometry, voxels: Vec<T>) -> Result<Self> {
        ensure(voxels.len() == geometry.len(), || {
            format!("{} voxels for a {:?} grid", voxels.len(), geometry.dims)
        })?;
        ensure(voxels.iter().all(|v| v.is_finite()), || "non-finite voxel value".into())?;
        Ok(Volume { scan_id: scan_id.into(), geometry, voxels })
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        self.voxels[self.geometry.index(z, y, x)]
    }

    pub fn world_to_voxel(&self, world: Triple) -> Triple {
        self.geometry.world_to_voxel(world)
    }

    pub fn voxel_to_world(&self, voxel: Triple) -> Triple {
        self.geometry.voxel_to_world(voxel)
    }
}

/// Intensities mapped into `[0, 1]` by a HU window.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVolume<T> {
    pub scan_id: String,
    pub geometry: Geometry,
    pub values: Vec<T>,
}

impl<T: Scalar> NormalizedVolume<T> {
    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        self.values[self.geometry.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.geometry.slice_len();
        &self.values[z * n..(z + 1) * n]
    }
}

pub const HU_LO: f64 = -1000.0;
pub const HU_HI: f64 = 400.0;

pub fn normalize_hu<T: Scalar>(volume: &Volume<T>, lo: f64, hi: f64) -> Result<NormalizedVolume<T>> {
    ensure(lo < hi, || format!("HU window lo {lo} must be below hi {hi}"))?;
    let inv = 1.0 / (hi - lo);
    let values = volume.voxels.iter().map(|&v| T::lit(((v.as_f64() - lo) * inv).clamp(0.0, 1.0))).collect();
    Ok(NormalizedVolume { scan_id: volume.scan_id.clone(), geometry: volume.geometry, values })
}

/// Binary label grid aligned with a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelMask {
    pub scan_id: String,
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl VoxelMask {
    pub fn empty(scan_id: impl Into<String>, dims: [usize; 3]) -> Self {
        VoxelMask { scan_id: scan_id.into(), dims, data: vec![0; dims.iter().product()] }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.index(z, y, x);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.dims[1] * self.dims[2];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_has_any(&self, z: usize) -> bool {
        self.slice(z).iter().any(|&v| v != 0)
    }

    pub fn union_with(&mut self, other: &VoxelMask) -> Result<()> {
        ensure(self.dims == other.dims, || format!("mask union {:?} vs {:?}", self.dims, other.dims))?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }
}

/// Center plus diameter of one ground-truth nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleAnnotation {
    pub scan_id: String,
    /// `(z, y, x)` world millimetres.
    pub center_world: Triple,
    pub diameter_mm: f64,
}

pub const MAX_DIAMETER_MM: f64 = 64.0;

impl NoduleAnnotation {
    pub fn new(scan_id: impl Into<String>, center_world: Triple, diameter_mm: f64) -> Result<Self> {
        ensure(diameter_mm > 0.0 && diameter_mm <= MAX_DIAMETER_MM, || {
            format!("diameter {diameter_mm} mm outside (0, {MAX_DIAMETER_MM}]")
        })?;
        Ok(NoduleAnnotation { scan_id: scan_id.into(), center_world, diameter_mm })
    }

    pub fn radius_mm(&self) -> f64 {
        self.diameter_mm / 2.0
    }
}

/// Solid-sphere label for one annotation.
pub fn rasterize_nodule(geometry: &Geometry, annotation: &NoduleAnnotation) -> Result<VoxelMask> {
    let mut mask = VoxelMask::empty(annotation.scan_id.clone(), geometry.dims);
    rasterize_into(&mut mask, geometry, annotation)?;
    Ok(mask)
}

/// Paint the sphere into `mask`; returns the number of newly set voxels.
///
/// A sphere too small to contain any voxel center marks the voxel nearest to
/// its center instead, so every in-grid annotation yields a non-empty label.
pub fn rasterize_into(mask: &mut VoxelMask, geometry: &Geometry, annotation: &NoduleAnnotation) -> Result<usize> {
    ensure(mask.dims == geometry.dims, || "mask and geometry disagree".into())?;
    let r = annotation.radius_mm();
    let c = geometry.world_to_voxel(annotation.center_world);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let span = r / geometry.spacing[a];
        let l = (c[a] - span).ceil().max(0.0);
        let h = (c[a] + span).floor().min(geometry.dims[a] as f64 - 1.0);
        if h < l {
            lo[a] = 1;
            hi[a] = 0;
        } else {
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
    }
    let r2 = r * r;
    let (mut inside, mut added) = (0usize, 0usize);
    if lo.iter().zip(&hi).all(|(l, h)| l <= h) {
        for z in lo[0]..=hi[0] {
            let dz = (z as f64 - c[0]) * geometry.spacing[0];
            for y in lo[1]..=hi[1] {
                let dy = (y as f64 - c[1]) * geometry.spacing[1];
                for x in lo[2]..=hi[2] {
                    let dx = (x as f64 - c[2]) * geometry.spacing[2];
                    if dz * dz + dy * dy + dx * dx <= r2 {
                        let i = mask.index(z, y, x);
                        inside += 1;
                        added += (mask.data[i] == 0) as usize;
                        mask.data[i] = 1;
                    }
                }
            }
        }
    }
    if inside == 0 {
        let [z, y, x] = geometry.nearest_voxel(c).ok_or_else(|| {
            Error::Invalid(format!("nodule sphere at {:?} lies outside the grid", annotation.center_world))
        })?;
        added += !mask.get(z, y, x) as usize;
        mask.set(z, y, x, true);
    }
    Ok(added)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: Vec<f64>) -> Volume<f64> {
        let n = values.len();
        Volume::new("t", Geometry::unit([1, 1, n]), values).unwrap()
    }

    #[test]
    fn world_voxel_examples() {
        let g = Geometry::new([10, 10, 10], [-100.0, -100.0, -50.0], [1.0; 3]).unwrap();
        assert_eq!(g.world_to_voxel([-90.0, -100.0, -50.0]), [10.0, 0.0, 0.0]);
        let g = Geometry::new([10, 10, 10], [0.0; 3], [2.5, 2.0, 2.0]).unwrap();
        assert_eq!(g.world_to_voxel([2.5, 4.0, 2.0]), [1.0, 2.0, 1.0]);
    }

    #[test]
    fn normalize_window_endpoints() {
        let v = vol(vec![-1000.0, 400.0, -300.0, 2000.0, -2000.0]);
        let n = normalize_hu(&v, HU_LO, HU_HI).unwrap();
        assert_eq!(n.values, vec![0.0, 1.0, 0.5, 1.0, 0.0]);
        assert!(normalize_hu(&v, 10.0, 10.0).is_err());
    }

    #[test]
    fn tiny_sphere_marks_nearest_voxel() {
        let g = Geometry::unit([5, 5, 5]);
        let a = NoduleAnnotation::new("t", [2.3, 1.6, 2.5], 0.5).unwrap();
        let m = rasterize_nodule(&g, &a).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(2, 2, 2) || m.get(2, 2, 3));
    }

    #[test]
    fn sphere_outside_grid_is_rejected() {
        let g = Geometry::unit([5, 5, 5]);
        let a = NoduleAnnotation::new("t", [40.0, 2.0, 2.0], 2.0).unwrap();
        assert!(rasterize_nodule(&g, &a).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(Geometry::new([0, 1, 1], [0.0; 3], [1.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(Volume::new("x", Geometry::unit([1, 1, 2]), vec![0.0f32, f32::NAN]).is_err());
    }
}
