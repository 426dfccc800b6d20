//! Central finite differences for validating `Graph::backward`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::Tensor;
use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Norms below this are treated as this value when forming relative errors.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

/// Relative disagreement between steps `h` and `h / 2` above which an entry
/// is taken to straddle a non-differentiable point.
pub const KINK_TOLERANCE: f64 = 1e-5;
/// Absolute slack of the kink screen, covering rounding in the loss.
pub const KINK_SLACK: f64 = 1e-8;

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every entry `i` of `value`.
pub fn finite_diff_grad(value: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Result<Tensor<f64>> {
    let all: Vec<usize> = (0..value.len()).collect();
    let entries = finite_diff_entries(value, &all, h, |t| Ok(f(t)))?;
    Tensor::new(value.shape(), entries)
}

/// Central differences restricted to the flat indices in `entries`.
pub fn finite_diff_entries(
    value: &Tensor<f64>,
    entries: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite difference step {h}")));
    }
    let mut probe = value.clone();
    let mut out = Vec::with_capacity(entries.len());
    for &i in entries {
        if i >= value.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: value.len(),
            });
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||, GRAD_NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    relative_error_with_floor(a, b, GRAD_NORM_FLOOR)
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error_with_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// Outcome of checking one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Entries entering `rel_error`.
    pub checked: usize,
    /// Sampled entries excluded because a ReLU or max switched branch
    /// within the step.
    pub kinked: usize,
    pub rel_error: f64,
}

/// Whether central differences at `h` and `h / 2` disagree.
pub fn is_kink(coarse: f64, fine: f64) -> bool {
    (coarse - fine).abs() > KINK_TOLERANCE * coarse.abs().max(fine.abs()) + KINK_SLACK
}

/// Settings of [`check_store_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Entries sampled per parameter tensor.
    pub samples: usize,
    /// Central difference step.
    pub step: f64,
    /// Drives entry sampling.
    pub seed: u64,
    /// Denominator floor of the relative error; should exceed the
    /// difference-quotient noise, roughly loss rounding over `step`.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            samples: 8,
            step: 1e-4,
            seed: 0,
            floor: GRAD_NORM_FLOOR,
        }
    }
}

/// Compares backward gradients of every parameter in `store` against
/// central differences on up to `samples` randomly chosen entries per
/// tensor, using the defaults of [`GradCheck`] otherwise.
pub fn check_store_gradients(
    store: &mut ParamStore<f64>,
    samples: usize,
    h: f64,
    seed: u64,
    forward: impl Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
) -> Result<Vec<ParamCheck>> {
    let cfg = GradCheck {
        samples,
        step: h,
        seed,
        ..GradCheck::default()
    };
    cfg.run(store, forward)
}

impl GradCheck {
    /// Entries that disagree with the analytic gradient and whose
    /// difference quotient is unstable between `step` and `step / 2` are
    /// screened out as kinks and counted. `forward` must be
    /// deterministic in the store values.
    pub fn run(
        &self,
        store: &mut ParamStore<f64>,
        forward: impl Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
    ) -> Result<Vec<ParamCheck>> {
        let h = self.step;
        store.zero_grad();
        let (graph, loss) = forward(store)?;
        graph.backward(loss, store)?;
        drop(graph);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let ids: Vec<ParamId> = store.param_ids().collect();
        let mut report = Vec::with_capacity(ids.len());
        for id in ids {
            let len = store.param(id).value.len();
            let mut entries = sample(&mut rng, len, self.samples.min(len)).into_vec();
            entries.sort_unstable();
            let analytic: Vec<f64> = entries.iter().map(|&i| store.param(id).grad.data()[i]).collect();
            let original = store.param(id).value.clone();
            let mut scratch = store.clone();
            let mut eval = |probe: &Tensor<f64>| {
                scratch.param_mut(id).value = probe.clone();
                let (g, l) = forward(&scratch)?;
                Ok(g.value(l).data()[0])
            };
            let coarse = finite_diff_entries(&original, &entries, h, &mut eval)?;
            let (mut a, mut n) = (Vec::new(), Vec::new());
            for (i, &entry) in entries.iter().enumerate() {
                // Smooth entries have stable quotients, so an analytic
                // error can never be excused by the screen.
                let scale = analytic[i].abs().max(coarse[i].abs()).max(self.floor);
                let agrees = (analytic[i] - coarse[i]).abs() <= KINK_TOLERANCE * scale;
                if !agrees {
                    let fine = finite_diff_entries(&original, &[entry], h / 2.0, &mut eval)?[0];
                    if is_kink(coarse[i], fine) {
                        continue;
                    }
                }
                a.push(analytic[i]);
                n.push(coarse[i]);
            }
            report.push(ParamCheck {
                name: store.param(id).name.clone(),
                checked: a.len(),
                kinked: entries.len() - a.len(),
                rel_error: relative_error_with_floor(&a, &n, self.floor),
            });
        }
        Ok(report)
    }
}
