//! A small fully-connected network with a normalization layer before every
//! hidden activation, plus the optimizers used to train it.

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adam_step, sgd_step, AdamState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normlayers::{core_upstream, AdaNormConfig, ForwardCache, NormLayer, NormVariant};
use crate::numcore::{all_finite, check_len, RealVector, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// `out = weight * x + bias`, weight stored row-major as `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { fan_in, fan_out, weight: vec![0.0; fan_in * fan_out], bias: vec![0.0; fan_out] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.fan_in);
        self.weight
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi))
            .collect()
    }
}

/// Weights drawn from `Normal(0, 2 / fan_in)`, bias zero.
pub fn kaiming_init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> LinearLayer {
    assert!(fan_in >= 1 && fan_out >= 1, "layer dimensions must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let weight = (0..fan_in * fan_out).map(|_| std * rng.gaussian()).collect();
    LinearLayer { fan_in, fan_out, weight, bias: vec![0.0; fan_out] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    pub linear: LinearLayer,
    /// Applied between the linear map and the activation.
    pub norm: Option<NormLayer>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<MlpLayer>,
}

impl MlpModel {
    /// `input -> [linear -> norm -> relu] per hidden width -> linear`.
    pub fn new(
        rng: &mut Rng,
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        variant: NormVariant,
        eps: f64,
        ada: Option<AdaNormConfig>,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in hidden {
            let mut norm = NormLayer::new(variant, width, eps);
            if let Some(cfg) = ada {
                norm = norm.with_ada(cfg);
            }
            layers.push(MlpLayer {
                linear: kaiming_init(rng, fan_in, width),
                norm: Some(norm),
                activation: Activation::Relu,
            });
            fan_in = width;
        }
        layers.push(MlpLayer {
            linear: kaiming_init(rng, fan_in, classes),
            norm: None,
            activation: Activation::Identity,
        });
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].linear.fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.fan_out)
    }

    /// Mutable views of every trainable parameter, in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.linear.weight);
            out.push(&mut layer.linear.bias);
            if let Some(p) = layer.norm.as_mut().and_then(|n| n.affine.as_mut()) {
                out.push(&mut p.gain);
                out.push(&mut p.bias);
            }
        }
        out
    }

    /// `(name, shape, values)` for every trainable parameter, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let l = &layer.linear;
            out.push((format!("layers.{i}.weight"), vec![l.fan_out, l.fan_in], l.weight.as_slice()));
            out.push((format!("layers.{i}.bias"), vec![l.fan_out], l.bias.as_slice()));
            if let Some(p) = layer.norm.as_ref().and_then(|n| n.affine.as_ref()) {
                out.push((format!("layers.{i}.norm.gain"), vec![p.dim()], p.gain.as_slice()));
                out.push((format!("layers.{i}.norm.bias"), vec![p.dim()], p.bias.as_slice()));
            }
        }
        out
    }

    /// Overwrites parameters from checkpoint tensors; names and shapes must match.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self.named_params().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        for ((name, shape), t) in expected.iter().zip(tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
        }
        for (dst, t) in self.params_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&t.values);
        }
        Ok(())
    }
}

/// Per-layer state saved by [`mlp_forward`].
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub norm: Option<ForwardCache>,
    /// Input to the activation (post-norm for hidden layers).
    pub pre_activation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCaches {
    pub layers: Vec<LayerCache>,
}

/// Runs the network; every normalization cache is retained for backward.
pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<(RealVector, MlpCaches)> {
    check_len(model.input_dim(), x.len())?;
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut h = x.to_vec();
    for layer in &model.layers {
        let lin = layer.linear.forward(&h);
        let (pre, norm_cache) = match &layer.norm {
            Some(norm) => {
                let (out, cache) = norm.forward(&RealVector::new(lin)?)?;
                (out.into_vec(), Some(cache))
            }
            None => (lin, None),
        };
        let act = match layer.activation {
            Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
            Activation::Identity => pre.clone(),
        };
        caches.push(LayerCache { input: h, norm: norm_cache, pre_activation: pre });
        h = act;
    }
    if !all_finite(&h) {
        return Err(Error::NonFinite("logits"));
    }
    Ok((RealVector::from_raw(h), MlpCaches { layers: caches }))
}

/// Max-shifted softmax cross-entropy; returns `(loss, softmax - onehot)`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, RealVector)> {
    if label >= logits.len() {
        return Err(Error::InvalidParameter(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, RealVector::from_raw(grad)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gain: Option<Vec<f64>>,
    pub norm_bias: Option<Vec<f64>>,
}

/// Gradients for every parameter of an [`MlpModel`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let affine = l.norm.as_ref().and_then(|n| n.affine.as_ref());
                LayerGrads {
                    weight: vec![0.0; l.linear.weight.len()],
                    bias: vec![0.0; l.linear.bias.len()],
                    gain: affine.map(|p| vec![0.0; p.dim()]),
                    norm_bias: affine.map(|p| vec![0.0; p.dim()]),
                }
            })
            .collect();
        Self { layers }
    }

    /// Views in the same order as [`MlpModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let (Some(g), Some(b)) = (&l.gain, &l.norm_bias) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let (Some(g), Some(b)) = (l.gain.as_mut(), l.norm_bias.as_mut()) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| all_finite(s))
    }
}

/// What the backward pass saw at one normalization layer: the gradient
/// entering the normalization core (`dl/dy`) and the resulting `dl/dx`.
#[derive(Debug)]
pub struct NormBoundary<'a> {
    pub layer: usize,
    pub cache: &'a ForwardCache,
    pub core_grad: &'a [f64],
    pub dx: &'a [f64],
}

pub fn mlp_backward(model: &MlpModel, caches: &MlpCaches, dlogits: &[f64]) -> Result<Gradients> {
    mlp_backward_observed(model, caches, dlogits, &mut |_| {})
}

/// Backward pass that reports every normalization boundary to `observer`.
pub fn mlp_backward_observed(
    model: &MlpModel,
    caches: &MlpCaches,
    dlogits: &[f64],
    observer: &mut dyn FnMut(NormBoundary<'_>),
) -> Result<Gradients> {
    check_len(model.layers.len(), caches.layers.len())?;
    check_len(model.output_dim(), dlogits.len())?;
    let mut grads = Gradients::zeros_like(model);
    let mut upstream = dlogits.to_vec();
    for (idx, (layer, cache)) in model.layers.iter().zip(&caches.layers).enumerate().rev() {
        let mut d_pre = upstream;
        if layer.activation == Activation::Relu {
            for (d, p) in d_pre.iter_mut().zip(&cache.pre_activation) {
                if *p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let g = &mut grads.layers[idx];
        let d_lin = match (&layer.norm, &cache.norm) {
            (Some(norm), Some(nc)) => {
                let r = norm.backward(nc, &d_pre)?;
                if let (Some(dg), Some(dst)) = (r.dgain, g.gain.as_mut()) {
                    dst.copy_from_slice(&dg);
                }
                if let (Some(db), Some(dst)) = (r.dbias, g.norm_bias.as_mut()) {
                    dst.copy_from_slice(&db);
                }
                let core = core_upstream(nc, norm.affine.as_ref(), &d_pre);
                observer(NormBoundary { layer: idx, cache: nc, core_grad: &core, dx: &r.dx });
                r.dx.into_vec()
            }
            (None, None) => d_pre,
            _ => return Err(Error::InvalidParameter("cache does not match model".into())),
        };
        let lin = &layer.linear;
        for (o, d) in d_lin.iter().enumerate() {
            g.bias[o] = *d;
            let row = &mut g.weight[o * lin.fan_in..(o + 1) * lin.fan_in];
            for (w, xi) in row.iter_mut().zip(&cache.input) {
                *w = d * xi;
            }
        }
        let mut d_in = vec![0.0; lin.fan_in];
        for (row, d) in lin.weight.chunks_exact(lin.fan_in).zip(&d_lin) {
            for (acc, w) in d_in.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
        upstream = d_in;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{mean, var_pop};

    #[test]
    fn kaiming_statistics() {
        let layer = kaiming_init(&mut Rng::seeded(5), 2, 50_000);
        assert!((var_pop(&layer.weight) - 1.0).abs() < 0.02);
        assert!(mean(&layer.weight).abs() < 0.02);
        assert!(layer.bias.iter().all(|b| *b == 0.0));
        assert_eq!(kaiming_init(&mut Rng::seeded(5), 3, 4), kaiming_init(&mut Rng::seeded(5), 3, 4));
    }

    #[test]
    fn identity_network_passes_input_through() {
        let mut model = MlpModel::new(&mut Rng::seeded(1), 3, &[3], 3, NormVariant::NoNorm, 0.0, None);
        for layer in &mut model.layers {
            layer.linear = LinearLayer::zeros(3, 3);
            for i in 0..3 {
                layer.linear.weight[i * 3 + i] = 1.0;
            }
        }
        let (logits, _) = mlp_forward(&model, &[0.5, 0.0, 2.0]).unwrap();
        assert_eq!(logits.as_slice(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn constant_pre_activation_is_eps_floored() {
        let mut model = MlpModel::new(&mut Rng::seeded(1), 2, &[4], 2, NormVariant::LayerNormSimple, 1e-5, None);
        model.layers[0].linear = LinearLayer::zeros(2, 4);
        model.layers[0].linear.bias = vec![0.7; 4];
        let (logits, caches) = mlp_forward(&model, &[1.0, -1.0]).unwrap();
        let nc = caches.layers[0].norm.as_ref().unwrap();
        assert!(nc.sigma_floored);
        assert!(caches.layers[0].pre_activation.iter().all(|v| v.abs() < 1e-12));
        assert!(logits.is_finite());
    }

    #[test]
    fn softmax_examples() {
        let (loss, d) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.as_slice(), &[-0.5, 0.5]);

        let (loss, d) = softmax_xent(&[1000.0, -1000.0], 0).unwrap();
        assert!(loss.abs() < 1e-300 && d.is_finite());

        let (_, d) = softmax_xent(&[0.3, -2.0, 5.0, 1.0], 2).unwrap();
        assert!(d.iter().sum::<f64>().abs() < 1e-15);
        assert!(softmax_xent(&[0.0], 1).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for variant in NormVariant::ALL {
            let model = MlpModel::new(&mut Rng::seeded(9), 3, &[5, 4], 3, variant, 1e-5, None);
            let (_, caches) = mlp_forward(&model, &[0.2, -1.0, 0.4]).unwrap();
            let g = mlp_backward(&model, &caches, &[0.0; 3]).unwrap();
            assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)), "{variant}");
        }
    }

    #[test]
    fn nonorm_matches_plain_network() {
        let model = MlpModel::new(&mut Rng::seeded(4), 3, &[4], 2, NormVariant::NoNorm, 0.0, None);
        let mut plain = model.clone();
        for l in &mut plain.layers {
            l.norm = None;
        }
        let x = [0.3, 1.0, -0.5];
        let (la, ca) = mlp_forward(&model, &x).unwrap();
        let (lb, cb) = mlp_forward(&plain, &x).unwrap();
        assert_eq!(la, lb);
        let (_, d) = softmax_xent(&la, 1).unwrap();
        assert_eq!(mlp_backward(&model, &ca, &d).unwrap(), mlp_backward(&plain, &cb, &d).unwrap());
    }

    #[test]
    fn observer_sees_every_norm_layer() {
        let model = MlpModel::new(&mut Rng::seeded(4), 3, &[6, 6, 6], 2, NormVariant::DetachMean, 0.0, None);
        let (_, caches) = mlp_forward(&model, &[0.3, 1.0, -0.5]).unwrap();
        let mut seen = Vec::new();
        mlp_backward_observed(&model, &caches, &[0.4, -0.4], &mut |b| seen.push(b.layer)).unwrap();
        assert_eq!(seen, vec![2, 1, 0]);
    }

    #[test]
    fn gradient_clipping() {
        let model = MlpModel::new(&mut Rng::seeded(4), 3, &[4], 2, NormVariant::LayerNorm, 0.0, None);
        let (_, caches) = mlp_forward(&model, &[0.3, 1.0, -0.5]).unwrap();
        let mut g = mlp_backward(&model, &caches, &[3.0, -3.0]).unwrap();
        let before = g.clip_global_norm(0.5);
        assert!(before > 0.5);
        assert!((g.global_norm() - 0.5).abs() < 1e-12);
    }
}
