//! Forward and exact backward passes for the normalization variants.
//!
//! All variants share the forward normalization `y = (x - mu) / sigma` with
//! the population standard deviation. They differ in which statistics carry
//! a derivative in the backward pass:
//!
//! | variant           | d mu / dx | d sigma / dx | backward map on `g = dl/dy`              |
//! |-------------------|-----------|--------------|------------------------------------------|
//! | `LayerNormSimple` | kept      | kept         | `(g - mean(g) - (y.g / H) y) / sigma`    |
//! | `DetachMean`      | cut       | kept         | `(g - (y.g / H) y) / sigma`              |
//! | `DetachVariance`  | kept      | cut          | `(g - mean(g)) / sigma`                  |
//! | `DetachNorm`      | cut       | cut          | `g / sigma`                              |
//!
//! `LayerNorm` adds an elementwise gain and bias on top of the simple rule.
//! `AdaNorm` scales `y` by `phi(y) = C (1 - k y)` and treats `phi` as a
//! constant in the backward pass. None of the maps are materialized; each is
//! a handful of O(H) vector passes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{all_finite, check_len, dot_unchecked, mean, std_pop, RealVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NormVariant {
    #[serde(rename = "layernorm")]
    LayerNorm,
    #[serde(rename = "layernorm-simple")]
    LayerNormSimple,
    #[serde(rename = "detachnorm")]
    DetachNorm,
    #[serde(rename = "detach-mean")]
    DetachMean,
    #[serde(rename = "detach-variance")]
    DetachVariance,
    #[serde(rename = "adanorm")]
    AdaNorm,
    #[serde(rename = "none")]
    NoNorm,
}

impl NormVariant {
    pub const ALL: [NormVariant; 7] = [
        NormVariant::LayerNorm,
        NormVariant::LayerNormSimple,
        NormVariant::DetachNorm,
        NormVariant::DetachMean,
        NormVariant::DetachVariance,
        NormVariant::AdaNorm,
        NormVariant::NoNorm,
    ];

    /// The four bare-normalization variants covered by the gradient
    /// re-centering / re-scaling results.
    pub const DETACH_FAMILY: [NormVariant; 4] =
        [NormVariant::DetachNorm, NormVariant::LayerNormSimple, NormVariant::DetachMean, NormVariant::DetachVariance];

    pub fn name(self) -> &'static str {
        match self {
            NormVariant::LayerNorm => "layernorm",
            NormVariant::LayerNormSimple => "layernorm-simple",
            NormVariant::DetachNorm => "detachnorm",
            NormVariant::DetachMean => "detach-mean",
            NormVariant::DetachVariance => "detach-variance",
            NormVariant::AdaNorm => "adanorm",
            NormVariant::NoNorm => "none",
        }
    }

    pub fn normalizes(self) -> bool {
        self != NormVariant::NoNorm
    }

    /// Whether the backward pass drops the derivative of the mean.
    pub fn detaches_mean(self) -> bool {
        matches!(self, NormVariant::DetachNorm | NormVariant::DetachMean)
    }

    /// Whether the backward pass drops the derivative of the standard deviation.
    pub fn detaches_std(self) -> bool {
        matches!(self, NormVariant::DetachNorm | NormVariant::DetachVariance)
    }
}

impl fmt::Display for NormVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        NormVariant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .or(match key.as_str() {
                "nonorm" | "no-norm" | "identity" => Some(NormVariant::NoNorm),
                "layernormsimple" => Some(NormVariant::LayerNormSimple),
                "detachmean" => Some(NormVariant::DetachMean),
                "detachvariance" => Some(NormVariant::DetachVariance),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidParameter(format!("unknown norm variant `{s}`")))
    }
}

/// Elementwise gain and bias for `LayerNorm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineParams {
    /// gain = 1, bias = 0.
    pub fn identity(dim: usize) -> Self {
        Self { gain: vec![1.0; dim], bias: vec![0.0; dim] }
    }

    pub fn new(gain: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_len(gain.len(), bias.len())?;
        if !all_finite(&gain) || !all_finite(&bias) {
            return Err(Error::NonFinite("affine params"));
        }
        Ok(Self { gain, bias })
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

/// Hyper-parameters of the adaptive scaling `phi(y) = C (1 - k y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaNormConfig {
    pub c: f64,
    pub k: f64,
}

impl AdaNormConfig {
    pub const DEFAULT_K: f64 = 0.1;

    pub fn new(c: f64, k: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidParameter(format!("AdaNorm C must be > 0, got {c}")));
        }
        if !(k > 0.0 && k < 1.0) {
            return Err(Error::InvalidParameter(format!("AdaNorm k must be in (0, 1), got {k}")));
        }
        Ok(Self { c, k })
    }

    pub fn phi(&self, y: f64) -> f64 {
        self.c * (1.0 - self.k * y)
    }
}

impl Default for AdaNormConfig {
    fn default() -> Self {
        Self { c: 1.0, k: Self::DEFAULT_K }
    }
}

/// Output of [`normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub y: RealVector,
    pub mu: f64,
    /// The divisor actually used: `max(std_pop(x), eps)`.
    pub sigma: f64,
    /// True when the eps floor replaced the measured standard deviation.
    pub floored: bool,
}

/// Everything the backward pass needs, captured at forward time.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub variant: NormVariant,
    pub x: RealVector,
    pub mu: f64,
    pub sigma: f64,
    /// When set, sigma is the eps floor and carries no derivative.
    pub sigma_floored: bool,
    pub y: RealVector,
    pub phi: Option<RealVector>,
    /// Number of components with `phi(y_i) < 0` (AdaNorm only).
    pub negative_phi: usize,
}

impl ForwardCache {
    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardResult {
    pub dx: RealVector,
    pub dgain: Option<RealVector>,
    pub dbias: Option<RealVector>,
}

impl BackwardResult {
    fn input_only(dx: RealVector) -> Self {
        Self { dx, dgain: None, dbias: None }
    }
}

/// `y = (x - mu) / sigma` with `sigma = max(std_pop(x), eps)`.
///
/// With `eps = 0` a constant input is rejected rather than divided by zero.
pub fn normalize(x: &[f64], eps: f64) -> Result<Normalized> {
    if x.len() < 2 {
        return Err(Error::TooShort { min: 2, got: x.len() });
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be >= 0, got {eps}")));
    }
    if !all_finite(x) {
        return Err(Error::NonFinite("normalize input"));
    }
    let mu = mean(x);
    let std = std_pop(x);
    let (sigma, floored) = if std > eps {
        (std, false)
    } else if eps > 0.0 {
        (eps, true)
    } else {
        return Err(Error::DegenerateInput);
    };
    let y: Vec<f64> = x.iter().map(|&xi| (xi - mu) / sigma).collect();
    if !all_finite(&y) {
        return Err(Error::NonFinite("normalize output"));
    }
    Ok(Normalized { y: RealVector::from_raw(y), mu, sigma, floored })
}

fn check_params(
    variant: NormVariant,
    dim: usize,
    params: Option<&AffineParams>,
    ada: Option<&AdaNormConfig>,
) -> Result<()> {
    let name = variant.name();
    match (variant, params) {
        (NormVariant::LayerNorm, None) => return Err(Error::MissingParams { variant: name, what: "gain/bias" }),
        (NormVariant::LayerNorm, Some(p)) => check_len(dim, p.dim())?,
        (_, Some(_)) => return Err(Error::UnexpectedParams { variant: name, what: "gain/bias" }),
        _ => {}
    }
    match (variant, ada) {
        (NormVariant::AdaNorm, None) => Err(Error::MissingParams { variant: name, what: "AdaNorm config" }),
        (NormVariant::AdaNorm, Some(_)) | (_, None) => Ok(()),
        (_, Some(_)) => Err(Error::UnexpectedParams { variant: name, what: "AdaNorm config" }),
    }
}

/// Runs one normalization layer forward.
///
/// `params` must be given exactly for `LayerNorm` and `ada` exactly for
/// `AdaNorm`. The four bare variants produce bit-identical outputs.
pub fn forward(
    variant: NormVariant,
    x: &RealVector,
    params: Option<&AffineParams>,
    ada: Option<&AdaNormConfig>,
    eps: f64,
) -> Result<(RealVector, ForwardCache)> {
    check_params(variant, x.len(), params, ada)?;

    if variant == NormVariant::NoNorm {
        let cache = ForwardCache {
            variant,
            x: x.clone(),
            mu: 0.0,
            sigma: 1.0,
            sigma_floored: false,
            y: x.clone(),
            phi: None,
            negative_phi: 0,
        };
        return Ok((x.clone(), cache));
    }

    let Normalized { y, mu, sigma, floored } = normalize(x, eps)?;
    let mut phi = None;
    let mut negative_phi = 0;
    let out: Vec<f64> = match variant {
        NormVariant::LayerNorm => {
            let p = params.expect("checked above");
            y.iter().zip(&p.gain).zip(&p.bias).map(|((yi, gi), bi)| gi * yi + bi).collect()
        }
        NormVariant::AdaNorm => {
            let cfg = ada.expect("checked above");
            let weights: Vec<f64> = y.iter().map(|&yi| cfg.phi(yi)).collect();
            negative_phi = weights.iter().filter(|w| **w < 0.0).count();
            let z = weights.iter().zip(y.iter()).map(|(w, yi)| w * yi).collect();
            phi = Some(RealVector::from_raw(weights));
            z
        }
        _ => y.to_vec(),
    };
    if !all_finite(&out) {
        return Err(Error::NonFinite("norm layer output"));
    }
    let cache = ForwardCache { variant, x: x.clone(), mu, sigma, sigma_floored: floored, y, phi, negative_phi };
    Ok((RealVector::from_raw(out), cache))
}

fn check_upstream(cache: &ForwardCache, g: &[f64]) -> Result<()> {
    check_len(cache.dim(), g.len())?;
    if !all_finite(g) {
        return Err(Error::NonFinite("upstream gradient"));
    }
    Ok(())
}

fn finish(dx: Vec<f64>) -> Result<RealVector> {
    if !all_finite(&dx) {
        return Err(Error::NonFinite("input gradient"));
    }
    Ok(RealVector::from_raw(dx))
}

/// Full derivative through mu and sigma (the W1 map).
pub fn backward_simple(cache: &ForwardCache, g: &[f64]) -> Result<RealVector> {
    check_upstream(cache, g)?;
    finish(project(cache, g, true, !cache.sigma_floored))
}

/// Both statistics detached: `dx = g / sigma`.
pub fn backward_detach_all(cache: &ForwardCache, g: &[f64]) -> Result<RealVector> {
    check_upstream(cache, g)?;
    finish(project(cache, g, false, false))
}

/// Mean detached, standard deviation kept (the W2 map).
pub fn backward_detach_mean(cache: &ForwardCache, g: &[f64]) -> Result<RealVector> {
    check_upstream(cache, g)?;
    finish(project(cache, g, false, !cache.sigma_floored))
}

/// Standard deviation detached, mean kept (the W3 map).
pub fn backward_detach_variance(cache: &ForwardCache, g: &[f64]) -> Result<RealVector> {
    check_upstream(cache, g)?;
    finish(project(cache, g, true, false))
}

/// `(g - [center] mean(g) - [rescale] (y.g / H) y) / sigma`.
fn project(cache: &ForwardCache, g: &[f64], center: bool, rescale: bool) -> Vec<f64> {
    let h = g.len() as f64;
    let g_mean = if center { mean(g) } else { 0.0 };
    let y_coef = if rescale { dot_unchecked(&cache.y, g) / h } else { 0.0 };
    let inv_sigma = 1.0 / cache.sigma;
    g.iter().zip(cache.y.iter()).map(|(&gi, &yi)| (gi - g_mean - y_coef * yi) * inv_sigma).collect()
}

pub fn backward_layernorm(cache: &ForwardCache, params: &AffineParams, g: &[f64]) -> Result<BackwardResult> {
    check_upstream(cache, g)?;
    check_len(cache.dim(), params.dim())?;
    let dgain: Vec<f64> = g.iter().zip(cache.y.iter()).map(|(gi, yi)| gi * yi).collect();
    let inner: Vec<f64> = g.iter().zip(&params.gain).map(|(gi, wi)| gi * wi).collect();
    let dx = backward_simple(cache, &inner)?;
    Ok(BackwardResult { dx, dgain: Some(finish(dgain)?), dbias: Some(RealVector::from_raw(g.to_vec())) })
}

/// `phi(y)` is held constant, so `dx = W1 (phi * g)`.
pub fn backward_adanorm(cache: &ForwardCache, g: &[f64]) -> Result<RealVector> {
    check_upstream(cache, g)?;
    let phi = cache.phi.as_ref().ok_or(Error::MissingParams { variant: "adanorm", what: "cached phi(y)" })?;
    let scaled: Vec<f64> = g.iter().zip(phi.iter()).map(|(gi, pi)| gi * pi).collect();
    backward_simple(cache, &scaled)
}

/// The gradient with respect to `y` that enters the normalization core:
/// `gain * g` for LayerNorm, `phi * g` for AdaNorm, `g` otherwise.
pub fn core_upstream(cache: &ForwardCache, params: Option<&AffineParams>, g: &[f64]) -> Vec<f64> {
    match (cache.variant, params, cache.phi.as_ref()) {
        (NormVariant::LayerNorm, Some(p), _) => g.iter().zip(&p.gain).map(|(a, b)| a * b).collect(),
        (NormVariant::AdaNorm, _, Some(phi)) => g.iter().zip(phi.iter()).map(|(a, b)| a * b).collect(),
        _ => g.to_vec(),
    }
}

/// Dispatches to the backward rule for `variant`.
pub fn backward(
    variant: NormVariant,
    cache: &ForwardCache,
    params: Option<&AffineParams>,
    ada: Option<&AdaNormConfig>,
    g: &[f64],
) -> Result<BackwardResult> {
    if cache.variant != variant {
        return Err(Error::VariantMismatch { cache: cache.variant.name(), requested: variant.name() });
    }
    check_params(variant, cache.dim(), params, ada)?;
    match variant {
        NormVariant::LayerNorm => backward_layernorm(cache, params.expect("checked"), g),
        NormVariant::LayerNormSimple => backward_simple(cache, g).map(BackwardResult::input_only),
        NormVariant::DetachNorm => backward_detach_all(cache, g).map(BackwardResult::input_only),
        NormVariant::DetachMean => backward_detach_mean(cache, g).map(BackwardResult::input_only),
        NormVariant::DetachVariance => backward_detach_variance(cache, g).map(BackwardResult::input_only),
        NormVariant::AdaNorm => backward_adanorm(cache, g).map(BackwardResult::input_only),
        NormVariant::NoNorm => {
            check_upstream(cache, g)?;
            Ok(BackwardResult::input_only(RealVector::from_raw(g.to_vec())))
        }
    }
}

/// A normalization layer bundled with its parameters, as used inside a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub variant: NormVariant,
    pub dim: usize,
    pub affine: Option<AffineParams>,
    pub ada: Option<AdaNormConfig>,
    pub eps: f64,
}

impl NormLayer {
    /// LayerNorm starts at gain = 1, bias = 0; AdaNorm uses the default config.
    pub fn new(variant: NormVariant, dim: usize, eps: f64) -> Self {
        Self {
            variant,
            dim,
            affine: (variant == NormVariant::LayerNorm).then(|| AffineParams::identity(dim)),
            ada: (variant == NormVariant::AdaNorm).then(AdaNormConfig::default),
            eps,
        }
    }

    pub fn with_ada(mut self, ada: AdaNormConfig) -> Self {
        if self.variant == NormVariant::AdaNorm {
            self.ada = Some(ada);
        }
        self
    }

    pub fn forward(&self, x: &RealVector) -> Result<(RealVector, ForwardCache)> {
        forward(self.variant, x, self.affine.as_ref(), self.ada.as_ref(), self.eps)
    }

    pub fn backward(&self, cache: &ForwardCache, g: &[f64]) -> Result<BackwardResult> {
        backward(self.variant, cache, self.affine.as_ref(), self.ada.as_ref(), g)
    }
}
