#![allow(dead_code)]

use mambar_core::graph::Graph;
use mambar_core::model::{ModelConfig, PredictionMode, TapPoint, VisionMambaR};
use mambar_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(rng, n, -scale, scale)).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn norm_relative(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `loss` with respect to every element of every
/// tensor in `params`, restoring each element afterwards.
pub fn finite_differences(
    params: &mut [Tensor<f64>],
    h: f64,
    mut loss: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Vec::with_capacity(params[p].numel());
        for k in 0..params[p].numel() {
            let orig = params[p].data()[k];
            params[p].data_mut()[k] = orig + h;
            let up = loss(params);
            params[p].data_mut()[k] = orig - h;
            let down = loss(params);
            params[p].data_mut()[k] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// The smallest full model: depth 2, d=8, N=4, 4×4 RGB input with 2×2
/// patches (4 image tokens) and 2 registers, so sequences have 6 tokens.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        d: 8,
        n: 2,
        r: 2,
        patch: 2,
        img: 4,
        state_dim: 4,
        num_classes: 3,
        prediction_mode: PredictionMode::ReduceConcat,
        seed: 11,
        ..ModelConfig::micro()
    }
}

pub fn model_loss(model: &VisionMambaR<f64>, image: &Tensor<f64>, label: usize) -> f64 {
    let mut g = Graph::new();
    let vars = model.params.to_graph(&mut g, false);
    let img = g.constant(image.clone());
    let out = model.forward_graph(&mut g, &vars, img, TapPoint::PostResidual).unwrap();
    let loss = g.cross_entropy(out.logits, &[label], 0.1).unwrap();
    g.value(loss).data()[0]
}

/// Per-tensor `(name, norm-relative error)` between the tape gradient and
/// central differences with step `h`.
pub fn model_gradient_errors(
    model: &VisionMambaR<f64>,
    image: &Tensor<f64>,
    label: usize,
    h: f64,
) -> Vec<(String, f64)> {
    let (_, analytic) = mambar_core::train::item_gradients(model, image, label, 0.1).unwrap();
    let mut params = model.params.tensors().to_vec();
    let mut probe = model.clone();
    let numeric = finite_differences(&mut params, h, |ps| {
        probe.params.tensors_mut().clone_from_slice(ps);
        model_loss(&probe, image, label)
    });
    model
        .params
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|((name, _), (a, n))| (name.to_owned(), norm_relative(a, n)))
        .collect()
}
