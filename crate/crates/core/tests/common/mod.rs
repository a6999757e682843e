//! Test-only oracle: an independent scalar forward pass of an `MlpModel`
//! whose normalization layers apply the detach semantics through
//! `gradcheck::probe_forward`, differentiated by central differences.

#![allow(dead_code)]

use normgrad::gradcheck::{probe_forward, FrozenPoint};
use normgrad::nets::{mlp_backward, mlp_forward, softmax_xent, Activation, Gradients};
use normgrad::numcore::{rand_gaussian, RealVector, Rng};
use normgrad::{MlpModel, NormVariant};

pub type Batch = Vec<(RealVector, usize)>;

/// Mean cross-entropy over `batch`. With `record` set, the detached
/// statistics of every norm layer are captured into `frozen`; otherwise they
/// are read from it.
pub fn oracle_loss(model: &MlpModel, batch: &Batch, frozen: &mut Vec<Vec<Option<FrozenPoint>>>, record: bool) -> f64 {
    if record {
        *frozen = vec![vec![None; model.layers.len()]; batch.len()];
    }
    let mut total = 0.0;
    for (e, (x, label)) in batch.iter().enumerate() {
        let mut h: Vec<f64> = x.to_vec();
        for (li, layer) in model.layers.iter().enumerate() {
            let lin = &layer.linear;
            let mut z: Vec<f64> = lin
                .weight
                .chunks(lin.fan_in)
                .zip(&lin.bias)
                .map(|(row, b)| row.iter().zip(&h).fold(*b, |acc, (w, hi)| acc + w * hi))
                .collect();
            if let Some(norm) = &layer.norm {
                if record {
                    frozen[e][li] = Some(FrozenPoint::at(norm, &z).unwrap());
                }
                z = probe_forward(norm, frozen[e][li].as_ref().unwrap(), &z).unwrap();
            }
            h = match layer.activation {
                Activation::Relu => z.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect(),
                Activation::Identity => z,
            };
        }
        let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + h.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - h[*label];
    }
    total / batch.len() as f64
}

/// Mean of the analytic per-example gradients.
pub fn analytic_gradients(model: &MlpModel, batch: &Batch) -> Gradients {
    let mut acc = Gradients::zeros_like(model);
    for (x, label) in batch {
        let (logits, caches) = mlp_forward(model, x).unwrap();
        let (_, d) = softmax_xent(&logits, *label).unwrap();
        acc.accumulate(&mlp_backward(model, &caches, &d).unwrap());
    }
    acc.scale(1.0 / batch.len() as f64);
    acc
}

/// Max-abs difference between analytic and central-difference gradients
/// over every parameter.
pub fn network_gradient_error(model: &MlpModel, batch: &Batch, h: f64) -> f64 {
    let analytic = analytic_gradients(model, batch);
    let mut frozen = Vec::new();
    oracle_loss(model, batch, &mut frozen, true);

    let mut probe = model.clone();
    let shapes: Vec<usize> = analytic.slices().iter().map(|s| s.len()).collect();
    let mut worst = 0.0f64;
    for (p, &len) in shapes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.params_mut()[p][j];
            probe.params_mut()[p][j] = orig + h;
            let up = oracle_loss(&probe, batch, &mut frozen, false);
            probe.params_mut()[p][j] = orig - h;
            let down = oracle_loss(&probe, batch, &mut frozen, false);
            probe.params_mut()[p][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - analytic.slices()[p][j]).abs());
        }
    }
    worst
}

/// Smallest norm-layer sigma and smallest distance of a ReLU input from the
/// kink over the batch. Central differences lose accuracy as either shrinks.
pub fn conditioning(model: &MlpModel, batch: &Batch) -> (f64, f64) {
    let (mut min_sigma, mut min_kink) = (f64::INFINITY, f64::INFINITY);
    for (x, _) in batch {
        let (_, caches) = mlp_forward(model, x).unwrap();
        for (layer, cache) in model.layers.iter().zip(&caches.layers) {
            if let Some(c) = cache.norm.as_ref().filter(|c| c.variant.normalizes()) {
                min_sigma = min_sigma.min(c.sigma);
            }
            if layer.activation == Activation::Relu {
                let k = cache.pre_activation.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
                min_kink = min_kink.min(k);
            }
        }
    }
    (min_sigma, min_kink)
}

pub const MIN_SIGMA: f64 = 0.1;
pub const MIN_KINK: f64 = 1e-3;

/// A 2-4-4-3 network with perturbed norm parameters and a batch of three
/// random examples, redrawn until it is well conditioned for central
/// differences. Returns the draw and the number of rejected draws.
pub fn small_network(variant: NormVariant, seed: u64) -> (MlpModel, Batch) {
    small_network_counted(variant, seed).0
}

pub fn small_network_counted(variant: NormVariant, seed: u64) -> ((MlpModel, Batch), usize) {
    for attempt in 0u64.. {
        let mut rng = Rng::with_stream(seed, attempt);
        let mut model = MlpModel::new(&mut rng, 2, &[4, 4], 3, variant, 1e-5, None);
        for layer in &mut model.layers {
            if let Some(p) = layer.norm.as_mut().and_then(|n| n.affine.as_mut()) {
                for (g, b) in p.gain.iter_mut().zip(p.bias.iter_mut()) {
                    *g = 1.0 + 0.3 * rng.gaussian();
                    *b = 0.3 * rng.gaussian();
                }
            }
        }
        let batch: Batch = (0..3).map(|i| (rand_gaussian(&mut rng, 2), i % 3)).collect();
        let (sigma, kink) = conditioning(&model, &batch);
        if sigma >= MIN_SIGMA && kink >= MIN_KINK {
            return ((model, batch), attempt as usize);
        }
    }
    unreachable!()
}
