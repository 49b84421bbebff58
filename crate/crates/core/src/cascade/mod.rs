//! Two-pass slice-wise prediction and candidate extraction.

mod candidates;
mod components;
mod passes;

pub use candidates::{
    equivalent_diameter, extract_candidates, load_candidates, read_candidates, save_candidates, write_candidates, Candidate,
    CANDIDATE_HEADER,
};
pub use components::{centroid, label_components, label_components_2d};
pub use passes::{
    first_pass, plan_axis, plan_windows, predict_windows, second_pass, second_pass_windows, SegmentationMap, WindowPlan,
    WindowPrediction, WindowSpec, BINARIZE_AT,
};
