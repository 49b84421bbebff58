//! Central finite-difference gradient checker.
//!
//! The loss closure is evaluated twice per probe on perturbed copies of the
//! inputs with the tape disabled, so the numeric side never touches any
//! backward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so gradients that are zero on
/// both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Check `d loss / d inputs` at `probes` randomly chosen coordinates.
///
/// `loss` builds a scalar from the graph and one `Var` per input; it must be
/// deterministic for a fixed graph seed (dropout masks are drawn from it).
pub fn check<F>(inputs: &[Tensor<f64>], probes: usize, step: f64, seed: u64, loss: F) -> Result<GradCheck>
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    const GRAPH_SEED: u64 = 0x5eed;
    let g = Graph::training(GRAPH_SEED);
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), ParamId::from_index(i)))
        .collect();
    let out = loss(&g, &vars)?;
    let grads = g.backward(&out);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::with_mode(false, true, GRAPH_SEED);
        let vars: Vec<_> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(loss(&g, &vars)?.value().data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let input = rng.gen_range(0..inputs.len());
        let index = rng.gen_range(0..inputs[input].len());
        let analytic = grads.get(ParamId::from_index(input)).map_or(0.0, |g| g.data()[index]);
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + step;
        let plus = eval(&work)?;
        work[input].data_mut()[index] = orig - step;
        let minus = eval(&work)?;
        work[input].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        out.push(Probe { input, index, analytic, numeric, rel_error: relative_error(analytic, numeric) });
    }
    Ok(GradCheck { probes: out })
}
