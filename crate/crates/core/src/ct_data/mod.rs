//! Scan ingestion, coordinate handling, intensity windowing, nodule labels
//! and synthetic phantoms.

mod annotations;
mod metaimage;
mod phantom;
mod volume;

pub use annotations::{load_annotations, read_annotations, save_annotations, write_annotations, ANNOTATION_HEADER};
pub use metaimage::{format_header, load_volume, parse_header, save_volume, ElementType, Header};
pub use phantom::{generate_phantom, NoduleKind, Phantom, PhantomSpec};
pub use volume::{
    normalize_hu, rasterize_into, rasterize_nodule, Geometry, NoduleAnnotation, NormalizedVolume, Triple, Volume,
    VoxelMask, HU_HI, HU_LO, MAX_DIAMETER_MM,
};
