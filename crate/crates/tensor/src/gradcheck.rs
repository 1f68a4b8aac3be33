//! Central finite-difference gradient checking in `f64`.
//!
//! The check builds a fresh graph for every evaluation, so the function under
//! test must be deterministic: dropout masks come from a fixed graph seed.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true gradient
    /// is zero are judged on absolute error instead.
    pub floor: f64,
    /// Seed for a training graph (dropout active); `None` checks in eval mode.
    pub graph_seed: Option<u64>,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            graph_seed: None,
            max_entries: None,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and entry index of the worst disagreement.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if rel > self.max_rel_error || rel.is_nan() {
            self.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = what();
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], store: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut g = match opts.graph_seed {
        Some(s) => Graph::training(s),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    Ok(g.value(loss).data()[0])
}

fn entries(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match opts.max_entries {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Compares the backward pass of `f` against central differences with respect
/// to every input tensor and every parameter in `store`.
///
/// `f` must return a scalar node.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut g = match opts.graph_seed {
        Some(s) => Graph::training(s),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let grads = g.backward(loss)?;
    let param_grads = grads.params(store);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let h = opts.step;

    let mut work = inputs.to_vec();
    for (n, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[n].len()];
        let analytic = grads.wrt(*v).unwrap_or(&zeros).to_vec();
        for k in entries(inputs[n].len(), opts, &mut rng) {
            let orig = work[n].data()[k];
            work[n].data_mut()[k] = orig + h;
            let up = evaluate(&f, &work, store, opts)?;
            work[n].data_mut()[k] = orig - h;
            let down = evaluate(&f, &work, store, opts)?;
            work[n].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.record(|| format!("input {n}[{k}]"), analytic[k], numeric, opts.floor);
        }
    }

    let mut perturbed = store.clone();
    for i in 0..store.len() {
        let id = ParamId(i);
        let analytic = param_grads.get(id).to_vec();
        for k in entries(analytic.len(), opts, &mut rng) {
            let orig = store.get(id).value.data()[k];
            perturbed.get_mut(id).value.data_mut()[k] = orig + h;
            let up = evaluate(&f, inputs, &perturbed, opts)?;
            perturbed.get_mut(id).value.data_mut()[k] = orig - h;
            let down = evaluate(&f, inputs, &perturbed, opts)?;
            perturbed.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.record(
                || format!("{}[{k}]", store.get(id).name),
                analytic[k],
                numeric,
                opts.floor,
            );
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar as `Σ x ⊙ w` with fixed weights, so every
/// output entry gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::new(&shape, crate::graph::uniform_values(&mut rng, n))?);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}
