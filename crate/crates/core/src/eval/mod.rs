//! Candidate matching, FROC sweep and CPM scoring.

mod cpm;
mod froc;

pub use cpm::{compute_cpm, save_ablation, sensitivity_at, write_ablation, CpmReport, ABLATION_HEADER, FP_RATES};
pub use froc::{compute_froc, match_candidates, save_froc, write_froc, FrocCurve, FrocPoint, MatchResult, ScoredScan, FROC_HEADER};
