//! Seeded synthetic chest phantoms.
//!
//! The lung is an elliptic cylinder along `z` surrounded by a soft-tissue
//! wall. Vessels are random cylinders through the lung; nodules are solid
//! spheres of four kinds (solid, juxtapleural, cavitary, low contrast). All
//! intensities are artifact constants, not measured values.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{rasterize_into, Geometry, NoduleAnnotation, Triple, Volume, VoxelMask};
use crate::error::{ensure, Error, Result};
use crate::Scalar;

pub const WALL_HU: f64 = 0.0;
pub const VESSEL_HU: f64 = -50.0;
pub const NODULE_HU: (f64, f64) = (-100.0, 100.0);
pub const CAVITY_HU: f64 = -950.0;
/// Fraction of the nodule/parenchyma contrast kept by low-contrast nodules.
pub const LOW_CONTRAST_GAIN: f64 = 0.45;
pub const CAVITY_RADIUS_FRACTION: f64 = 0.4;
pub const VESSEL_RADIUS_MM: (f64, f64) = (0.7, 1.6);
/// Minimum clearance between nodule surfaces, mm.
pub const NODULE_GAP_MM: f64 = 3.0;
const PLACEMENT_RETRIES: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// `(z, y, x)` voxels at 1 mm isotropic spacing.
    pub dims: [usize; 3],
    pub parenchyma_hu: f64,
    pub noise_sigma: f64,
    /// In-plane wall thickness, voxels.
    pub wall_thickness: usize,
    /// Inclusive range.
    pub nodule_count: (usize, usize),
    /// Inclusive range, mm.
    pub diameter_mm: (f64, f64),
    pub juxtapleural_fraction: f64,
    pub cavitary_fraction: f64,
    pub low_contrast_fraction: f64,
    /// Inclusive range.
    pub vessel_count: (usize, usize),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 96, 96],
            parenchyma_hu: -850.0,
            noise_sigma: 25.0,
            wall_thickness: 6,
            nodule_count: (1, 3),
            diameter_mm: (5.0, 12.0),
            juxtapleural_fraction: 0.2,
            cavitary_fraction: 0.1,
            low_contrast_fraction: 0.1,
            vessel_count: (3, 6),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.dims.iter().all(|&d| d >= 1), || format!("bad dims {:?}", self.dims))?;
        ensure(self.nodule_count.0 <= self.nodule_count.1, || "empty nodule count range".into())?;
        ensure(self.vessel_count.0 <= self.vessel_count.1, || "empty vessel count range".into())?;
        ensure(
            self.diameter_mm.0 > 0.0 && self.diameter_mm.0 <= self.diameter_mm.1 && self.diameter_mm.1 <= 64.0,
            || format!("bad diameter range {:?}", self.diameter_mm),
        )?;
        let f = [self.juxtapleural_fraction, self.cavitary_fraction, self.low_contrast_fraction];
        ensure(f.iter().all(|v| (0.0..=1.0).contains(v)) && f.iter().sum::<f64>() <= 1.0 + 1e-12, || {
            format!("nodule kind fractions {f:?} must lie in [0,1] and sum to at most 1")
        })?;
        ensure(self.noise_sigma >= 0.0, || "negative noise sigma".into())?;
        let (ay, ax) = self.semi_axes();
        ensure(ay > self.diameter_mm.1 && ax > self.diameter_mm.1, || {
            format!("grid {:?} too small for {} mm nodules", self.dims, self.diameter_mm.1)
        })
    }

    fn semi_axes(&self) -> (f64, f64) {
        let w = self.wall_thickness as f64;
        (self.dims[1] as f64 / 2.0 - w, self.dims[2] as f64 / 2.0 - w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoduleKind {
    Solid,
    Juxtapleural,
    Cavitary,
    LowContrast,
}

#[derive(Clone, Debug)]
pub struct Phantom<T> {
    pub volume: Volume<T>,
    pub annotations: Vec<NoduleAnnotation>,
    pub kinds: Vec<NoduleKind>,
    /// Union of rasterized annotations.
    pub mask: VoxelMask,
    pub lung: VoxelMask,
}

struct Lung {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
}

impl Lung {
    /// Normalised elliptic radius; `< 1` inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        (((y - self.cy) / self.ay).powi(2) + ((x - self.cx) / self.ax).powi(2)).sqrt()
    }

    /// Lower bound on the in-plane distance to the lung boundary.
    fn clearance(&self, y: f64, x: f64) -> f64 {
        (1.0 - self.rho(y, x)) * self.ay.min(self.ax)
    }
}

pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec, scan_id: &str) -> Result<Phantom<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [dz, dy, dx] = spec.dims;
    let origin: Triple = std::array::from_fn(|a| -(spec.dims[a] as f64) / 2.0);
    let geometry = Geometry::new(spec.dims, origin, [1.0; 3])?;
    let (ay, ax) = spec.semi_axes();
    let lung = Lung { cy: (dy as f64 - 1.0) / 2.0, cx: (dx as f64 - 1.0) / 2.0, ay, ax };

    let mut hu = vec![0.0f64; geometry.len()];
    let mut lung_mask = VoxelMask::empty(scan_id, spec.dims);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = geometry.index(z, y, x);
                if lung.rho(y as f64, x as f64) < 1.0 {
                    hu[i] = spec.parenchyma_hu;
                    lung_mask.data[i] = 1;
                } else {
                    hu[i] = WALL_HU;
                }
            }
        }
    }

    let vessels = rng.gen_range(spec.vessel_count.0..=spec.vessel_count.1);
    for _ in 0..vessels {
        let a = point_in_lung(&lung, &mut rng, dz, 0.0);
        let b = point_in_lung(&lung, &mut rng, dz, 0.0);
        let radius = rng.gen_range(VESSEL_RADIUS_MM.0..=VESSEL_RADIUS_MM.1);
        paint_segment(&mut hu, &geometry, &lung_mask, a, b, radius);
    }

    let count = rng.gen_range(spec.nodule_count.0..=spec.nodule_count.1);
    let mut annotations = Vec::with_capacity(count);
    let mut kinds = Vec::with_capacity(count);
    let mut placed: Vec<(Triple, f64)> = Vec::new();
    let mut mask = VoxelMask::empty(scan_id, spec.dims);
    for n in 0..count {
        let u: f64 = rng.gen();
        let kind = if u < spec.juxtapleural_fraction {
            NoduleKind::Juxtapleural
        } else if u < spec.juxtapleural_fraction + spec.cavitary_fraction {
            NoduleKind::Cavitary
        } else if u < spec.juxtapleural_fraction + spec.cavitary_fraction + spec.low_contrast_fraction {
            NoduleKind::LowContrast
        } else {
            NoduleKind::Solid
        };
        let d = rng.gen_range(spec.diameter_mm.0..=spec.diameter_mm.1);
        let r = d / 2.0;
        let mut center = None;
        for _ in 0..PLACEMENT_RETRIES {
            let c = match kind {
                NoduleKind::Juxtapleural => juxtapleural_center(&lung, &mut rng, dz, r),
                _ => {
                    let c = point_in_lung(&lung, &mut rng, dz, r);
                    if lung.clearance(c[1], c[2]) < r + 2.0 {
                        continue;
                    }
                    c
                }
            };
            let clear = placed.iter().all(|(p, pr)| dist(p, &c) >= r + pr + NODULE_GAP_MM);
            let in_lung = geometry.nearest_voxel(c).is_some_and(|[z, y, x]| lung_mask.get(z, y, x));
            if clear && in_lung {
                center = Some(c);
                break;
            }
        }
        let c = center.ok_or_else(|| {
            Error::Invalid(format!("could not place nodule {} of {count} without overlap", n + 1))
        })?;
        placed.push((c, r));
        let ann = NoduleAnnotation::new(scan_id, geometry.voxel_to_world(c), d)?;
        let mut own = VoxelMask::empty(scan_id, spec.dims);
        rasterize_into(&mut own, &geometry, &ann)?;
        let base = rng.gen_range(NODULE_HU.0..=NODULE_HU.1);
        let level = match kind {
            NoduleKind::LowContrast => spec.parenchyma_hu + LOW_CONTRAST_GAIN * (base - spec.parenchyma_hu),
            _ => base,
        };
        let core = CAVITY_RADIUS_FRACTION * r;
        for (i, &on) in own.data.iter().enumerate() {
            if on == 0 {
                continue;
            }
            let [z, y, x] = geometry.coords(i);
            let inner = kind == NoduleKind::Cavitary && dist(&[z as f64, y as f64, x as f64], &c) <= core;
            hu[i] = if inner { CAVITY_HU } else { level };
        }
        mask.union_with(&own)?;
        annotations.push(ann);
        kinds.push(kind);
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for v in &mut hu {
            *v += normal.sample(&mut rng);
        }
    }
    let voxels = hu.into_iter().map(|v| T::lit(v.clamp(-1024.0, 3071.0))).collect();
    let volume = Volume::new(scan_id, geometry, voxels)?;
    Ok(Phantom { volume, annotations, kinds, mask, lung: lung_mask })
}

fn dist(a: &Triple, b: &Triple) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Uniform slice coordinate at least `margin` from both faces, or the middle
/// slice when the grid is too thin.
fn z_in(rng: &mut ChaCha8Rng, dz: usize, margin: f64) -> f64 {
    let top = dz as f64 - 1.0;
    if top - margin > margin {
        rng.gen_range(margin..=top - margin)
    } else {
        top / 2.0
    }
}

/// Uniform point inside the lung cylinder, `z` kept `margin` from the faces.
fn point_in_lung(lung: &Lung, rng: &mut ChaCha8Rng, dz: usize, margin: f64) -> Triple {
    let z = z_in(rng, dz, margin);
    loop {
        let y = rng.gen_range(-lung.ay..=lung.ay) + lung.cy;
        let x = rng.gen_range(-lung.ax..=lung.ax) + lung.cx;
        if lung.rho(y, x) < 0.95 {
            return [z, y, x];
        }
    }
}

/// Center inset from a random boundary point by less than the radius, so the
/// sphere crosses into the wall.
fn juxtapleural_center(lung: &Lung, rng: &mut ChaCha8Rng, dz: usize, r: f64) -> Triple {
    let z = z_in(rng, dz, r);
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = t.sin_cos();
    let by = lung.cy + lung.ay * s;
    let bx = lung.cx + lung.ax * c;
    let (ny, nx) = (s / lung.ay, c / lung.ax);
    let norm = (ny * ny + nx * nx).sqrt();
    let inset = 0.8 * r;
    [z, by - inset * ny / norm, bx - inset * nx / norm]
}

fn paint_segment(hu: &mut [f64], g: &Geometry, lung: &VoxelMask, a: Triple, b: Triple, radius: f64) {
    let lo: [usize; 3] = std::array::from_fn(|k| (a[k].min(b[k]) - radius).floor().max(0.0) as usize);
    let hi: [usize; 3] =
        std::array::from_fn(|k| ((a[k].max(b[k]) + radius).ceil() as usize).min(g.dims[k] - 1));
    let ab: Triple = std::array::from_fn(|k| b[k] - a[k]);
    let len2 = ab.iter().map(|v| v * v).sum::<f64>().max(1e-12);
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let p = [z as f64, y as f64, x as f64];
                let t = ((0..3).map(|k| (p[k] - a[k]) * ab[k]).sum::<f64>() / len2).clamp(0.0, 1.0);
                let q: Triple = std::array::from_fn(|k| a[k] + t * ab[k]);
                let i = g.index(z, y, x);
                if dist(&p, &q) <= radius && lung.data[i] != 0 {
                    hu[i] = VESSEL_HU;
                }
            }
        }
    }
}
