//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod scenario;

use prl::data::DiscountMode;
use prl::rng::Rng;
use prl::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Direct summation of discounted rewards, `O(n²)`.
///
/// Absolute: `R_t = Σ_{t'=t}^{n} λ^{t'} r_{t'}`. Relative:
/// `R_t = Σ_{t'=t}^{n} λ^{t'-t} r_{t'}`. Steps are 1-based.
pub fn direct_cumulative_rewards(rewards: &[f64], lambda: f64, mode: DiscountMode) -> Vec<f64> {
    let n = rewards.len();
    (1..=n)
        .map(|t| {
            (t..=n)
                .map(|tp| {
                    let exp = match mode {
                        DiscountMode::Absolute => tp,
                        DiscountMode::Relative => tp - t,
                    };
                    lambda.powi(exp as i32) * rewards[tp - 1]
                })
                .sum()
        })
        .collect()
}

/// Rank by fully sorting `(−logit, index)` pairs and scanning for the target.
pub fn brute_force_metrics(logits: &[f64], target: u32, k: usize) -> (f64, f64) {
    let mut pairs: Vec<(f64, u32)> = logits.iter().enumerate().map(|(i, &v)| (v, i as u32 + 1)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (pos, &(_, item)) in pairs.iter().take(k).enumerate() {
        if item == target {
            return (1.0, 1.0 / ((pos + 2) as f64).log2());
        }
    }
    (0.0, 0.0)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], low: f64, high: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(low, high)).collect()).unwrap()
}

/// Elementwise gradient error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude the relative error is measured against the floor.
pub const FD_FLOOR: f64 = 1e-6;

/// Largest relative error between reverse-mode gradients of `f` and central
/// finite differences with step `FD_STEP`, over every input element.
///
/// `f` records a scalar-valued computation on a fresh graph given the input
/// handles; it must be deterministic.
pub fn gradient_check<F>(inputs: &[Tensor], f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<_, _>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect::<Result<_, _>>()?;
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item().expect("scalar"))
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric, FD_FLOOR));
        }
    }
    Ok(worst)
}

/// Like [`gradient_check`], but over every parameter of `store`, with `f`
/// recording the computation against bound parameters.
pub fn store_gradient_check<F>(store: &mut ParamStore, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let loss = f(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.get(bound[id]).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
        .collect();
    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g)?;
        let loss = f(&mut g, &bound)?;
        Ok(g.value(loss).item().expect("scalar"))
    };
    let mut worst: f64 = 0.0;
    for (id, a) in ids.into_iter().zip(&analytic) {
        for j in 0..a.numel() {
            let x = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = x + FD_STEP;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[j] = x - FD_STEP;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[j] = x;
            worst = worst.max(relative_error(a.data()[j], (up - down) / (2.0 * FD_STEP), FD_FLOOR));
        }
    }
    Ok(worst)
}
