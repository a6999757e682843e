//! Independent oracles for the analytic backward passes.
//!
//! Nothing in here calls the vector backward rules of [`crate::normlayers`]
//! to produce an expected value. The numeric side recomputes the forward
//! pass from scratch with the variant's detach semantics applied to the
//! probes; the analytic side materializes the W1/W2/W3 matrices entry by
//! entry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normlayers::{self, AdaNormConfig, ForwardCache, NormLayer, NormVariant};
use crate::numcore::{all_finite, check_len, max_abs, mean, rand_gaussian, std_pop, var_pop, RealVector, Rng};

/// Largest `H` for which Jacobians are materialized.
pub const MAX_JACOBIAN_DIM: usize = 64;

/// Relative tolerance for the equalities of the gradient-moment results.
pub const EQUALITY_REL_TOL: f64 = 1e-10;
/// Slack for the variance inequalities and for means predicted to be zero.
pub const INEQUALITY_SLACK: f64 = 1e-12;

/// Dense row-major matrix, only used at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        check_len(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, v.len())?;
        Ok((0..self.rows).map(|i| (0..self.cols).fold(0.0, |acc, j| acc + self.get(i, j) * v[j])).collect())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        check_len(self.data.len(), other.data.len())?;
        Ok(self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }
}

/// Analytic and numeric Jacobians of one layer at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianPair {
    pub analytic: Matrix,
    pub numeric: Matrix,
    pub max_abs_err: f64,
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<RealVector>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidParameter(format!("step h must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("finite-difference probe"));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(RealVector::from_raw(grad))
}

/// Statistics captured at the unperturbed point; detached quantities are
/// read from here during probes instead of being recomputed.
#[derive(Debug, Clone)]
pub struct FrozenPoint {
    pub mu: f64,
    pub sigma: f64,
    pub phi: Option<Vec<f64>>,
}

impl FrozenPoint {
    pub fn at(layer: &NormLayer, x: &[f64]) -> Result<Self> {
        if !layer.variant.normalizes() {
            return Ok(Self { mu: 0.0, sigma: 1.0, phi: None });
        }
        let mu = mean(x);
        let sigma = effective_sigma(std_pop(x), layer.eps)?;
        let phi = match layer.variant {
            NormVariant::AdaNorm => {
                let ada = ada_of(layer)?;
                Some(x.iter().map(|&xi| ada.phi((xi - mu) / sigma)).collect())
            }
            _ => None,
        };
        Ok(Self { mu, sigma, phi })
    }
}

fn effective_sigma(std: f64, eps: f64) -> Result<f64> {
    if std > eps {
        Ok(std)
    } else if eps > 0.0 {
        Ok(eps)
    } else {
        Err(Error::DegenerateInput)
    }
}

fn ada_of(layer: &NormLayer) -> Result<AdaNormConfig> {
    layer.ada.ok_or(Error::MissingParams { variant: "adanorm", what: "AdaNorm config" })
}

/// Forward output at `x` with the layer's detach semantics: detached
/// statistics (and AdaNorm's `phi`) come from `frozen`, the rest are
/// recomputed from `x`.
pub fn probe_forward(layer: &NormLayer, frozen: &FrozenPoint, x: &[f64]) -> Result<Vec<f64>> {
    let v = layer.variant;
    if !v.normalizes() {
        return Ok(x.to_vec());
    }
    let mu = if v.detaches_mean() { frozen.mu } else { mean(x) };
    let sigma = if v.detaches_std() {
        frozen.sigma
    } else {
        // sigma is the standard deviation of x regardless of which mean the
        // numerator subtracts.
        effective_sigma(std_pop(x), layer.eps)?
    };
    let y = x.iter().map(|&xi| (xi - mu) / sigma);
    let out: Vec<f64> = match v {
        NormVariant::LayerNorm => {
            let p = layer.affine.as_ref().ok_or(Error::MissingParams { variant: "layernorm", what: "gain/bias" })?;
            y.zip(&p.gain).zip(&p.bias).map(|((yi, g), b)| g * yi + b).collect()
        }
        NormVariant::AdaNorm => {
            let phi = frozen.phi.as_ref().ok_or(Error::MissingParams { variant: "adanorm", what: "frozen phi" })?;
            y.zip(phi).map(|(yi, p)| p * yi).collect()
        }
        _ => y.collect(),
    };
    Ok(out)
}

/// `(1/sigma) (I - [center] 11^T/H - [rescale] yy^T/H)`, entry by entry.
fn kernel_matrix(cache: &ForwardCache, center: bool, rescale: bool) -> Result<Matrix> {
    let n = cache.dim();
    if n > MAX_JACOBIAN_DIM {
        return Err(Error::DimensionTooLarge { got: n, limit: MAX_JACOBIAN_DIM });
    }
    let h = n as f64;
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut v = if i == j { 1.0 } else { 0.0 };
            if center {
                v -= 1.0 / h;
            }
            if rescale {
                v -= cache.y[i] * cache.y[j] / h;
            }
            m.set(i, j, v / cache.sigma);
        }
    }
    Ok(m)
}

/// Full LayerNorm-simple backward map.
pub fn w1(cache: &ForwardCache) -> Result<Matrix> {
    kernel_matrix(cache, true, true)
}

/// Backward map with the mean detached.
pub fn w2(cache: &ForwardCache) -> Result<Matrix> {
    kernel_matrix(cache, false, true)
}

/// Backward map with the standard deviation detached.
pub fn w3(cache: &ForwardCache) -> Result<Matrix> {
    kernel_matrix(cache, true, false)
}

/// `I - 11^T / H`.
pub fn centering_matrix(n: usize) -> Matrix {
    let mut m = Matrix::identity(n);
    for v in &mut m.data {
        *v -= 1.0 / n as f64;
    }
    m
}

/// `d out_i / d x_j` built from the materialized matrices.
///
/// The bare maps are symmetric, so the same matrix also maps `dl/dy` to
/// `dl/dx`. For LayerNorm and AdaNorm the row scaling by `gain` or `phi`
/// makes the Jacobian non-symmetric; `dx = J^T g`.
pub fn analytic_jacobian(layer: &NormLayer, cache: &ForwardCache) -> Result<Matrix> {
    let n = cache.dim();
    if n > MAX_JACOBIAN_DIM {
        return Err(Error::DimensionTooLarge { got: n, limit: MAX_JACOBIAN_DIM });
    }
    let floored = cache.sigma_floored;
    let mut m = match layer.variant {
        NormVariant::NoNorm => return Ok(Matrix::identity(n)),
        NormVariant::DetachNorm => kernel_matrix(cache, false, false)?,
        NormVariant::DetachMean => kernel_matrix(cache, false, !floored)?,
        NormVariant::DetachVariance => kernel_matrix(cache, true, false)?,
        NormVariant::LayerNormSimple | NormVariant::LayerNorm | NormVariant::AdaNorm => {
            kernel_matrix(cache, true, !floored)?
        }
    };
    let row_scale: Option<Vec<f64>> = match layer.variant {
        NormVariant::LayerNorm => layer.affine.as_ref().map(|p| p.gain.clone()),
        NormVariant::AdaNorm => cache.phi.as_ref().map(|p| p.to_vec()),
        _ => None,
    };
    if let Some(s) = row_scale {
        for (i, si) in s.iter().enumerate() {
            for j in 0..n {
                let v = m.get(i, j) * si;
                m.set(i, j, v);
            }
        }
    }
    Ok(m)
}

/// Column `j` is the central difference of the layer output with respect to
/// `x_j`, with detached quantities frozen at `x`.
pub fn numeric_jacobian(layer: &NormLayer, x: &[f64], h: f64) -> Result<Matrix> {
    let n = x.len();
    if n > MAX_JACOBIAN_DIM {
        return Err(Error::DimensionTooLarge { got: n, limit: MAX_JACOBIAN_DIM });
    }
    let frozen = FrozenPoint::at(layer, x)?;
    let mut m = Matrix::zeros(n, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + h;
        let up = probe_forward(layer, &frozen, &probe)?;
        probe[j] = x[j] - h;
        let down = probe_forward(layer, &frozen, &probe)?;
        probe[j] = x[j];
        for i in 0..n {
            m.set(i, j, (up[i] - down[i]) / (2.0 * h));
        }
    }
    if !all_finite(&m.data) {
        return Err(Error::NonFinite("numeric jacobian"));
    }
    Ok(m)
}

pub fn jacobian_pair(layer: &NormLayer, x: &RealVector, h: f64) -> Result<JacobianPair> {
    let (_, cache) = layer.forward(x)?;
    let analytic = analytic_jacobian(layer, &cache)?;
    let numeric = numeric_jacobian(layer, x, h)?;
    let max_abs_err = analytic.max_abs_diff(&numeric)?;
    Ok(JacobianPair { analytic, numeric, max_abs_err })
}

/// Max-abs difference between the layer's analytic `dx` and central
/// differences of `l(x) = g . forward(x)` under the layer's detach semantics.
pub fn input_gradient_error(layer: &NormLayer, x: &RealVector, g: &[f64], h: f64) -> Result<f64> {
    let (_, cache) = layer.forward(x)?;
    let analytic = layer.backward(&cache, g)?.dx;
    let frozen = FrozenPoint::at(layer, x)?;
    let mut probe_err = None;
    let numeric = finite_diff_grad(
        |p| match probe_forward(layer, &frozen, p) {
            Ok(out) => out.iter().zip(g).fold(0.0, |acc, (o, gi)| acc + o * gi),
            Err(e) => {
                probe_err.get_or_insert(e);
                f64::NAN
            }
        },
        x,
        h,
    );
    if let Some(e) = probe_err {
        return Err(e);
    }
    let numeric = numeric?;
    Ok(analytic.iter().zip(numeric.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

/// Measured against predicted mean and variance of `dl/dx` for one
/// bare-normalization variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub variant: NormVariant,
    #[serde(rename = "H")]
    pub h: usize,
    pub measured_mean: f64,
    pub measured_var: f64,
    pub predicted_mean: f64,
    pub predicted_var_bound_or_value: f64,
    pub bound_is_equality: bool,
    pub abs_error_mean: f64,
    pub violation_var: f64,
    /// `max|g| / sigma`, the natural magnitude of the entries of `dx`.
    #[serde(skip)]
    pub mean_scale: f64,
}

impl GradReport {
    /// Builds a report from an upstream gradient `g = dl/dy`, the resulting
    /// `dx`, and the divisor sigma used in the forward pass.
    pub fn from_gradients(variant: NormVariant, sigma: f64, g: &[f64], dx: &[f64]) -> Result<Self> {
        check_len(g.len(), dx.len())?;
        let bound_is_equality = match variant {
            NormVariant::DetachNorm | NormVariant::DetachVariance => true,
            NormVariant::LayerNormSimple | NormVariant::DetachMean => false,
            other => return Err(Error::UnsupportedVariant(other.name())),
        };
        let predicted_mean = if variant.detaches_mean() { mean(g) / sigma } else { 0.0 };
        let predicted_var = var_pop(g) / (sigma * sigma);
        let measured_mean = mean(dx);
        let measured_var = var_pop(dx);
        Ok(GradReport {
            variant,
            h: g.len(),
            measured_mean,
            measured_var,
            predicted_mean,
            predicted_var_bound_or_value: predicted_var,
            bound_is_equality,
            abs_error_mean: (measured_mean - predicted_mean).abs(),
            violation_var: (measured_var - predicted_var).max(0.0),
            mean_scale: max_abs(g) / sigma,
        })
    }

    /// Error of the mean relative to `max(|predicted|, scale)`; a zero
    /// prediction is compared on the absolute `scale` alone.
    pub fn mean_error(&self) -> f64 {
        self.abs_error_mean / self.predicted_mean.abs().max(self.mean_scale).max(f64::MIN_POSITIVE)
    }

    /// Relative error of an equality-case variance; `None` for bounds.
    pub fn var_equality_error(&self) -> Option<f64> {
        self.bound_is_equality.then(|| {
            let floor = f64::EPSILON * self.mean_scale * self.mean_scale;
            (self.measured_var - self.predicted_var_bound_or_value).abs()
                / self.predicted_var_bound_or_value.max(floor).max(f64::MIN_POSITIVE)
        })
    }

    pub fn passes(&self) -> bool {
        let mean_tol = if self.predicted_mean == 0.0 { INEQUALITY_SLACK } else { EQUALITY_REL_TOL };
        let mean_ok = self.mean_error() <= mean_tol;
        let var_ok = match self.var_equality_error() {
            Some(err) => err <= EQUALITY_REL_TOL,
            None => self.violation_var <= INEQUALITY_SLACK * self.predicted_var_bound_or_value.max(1.0),
        };
        mean_ok && var_ok
    }

    pub fn to_line(&self) -> String {
        format!(
            "variant={} H={} measured_mean={:e} measured_var={:e} predicted_mean={:e} \
             predicted_var_bound_or_value={:e} bound_is_equality={} abs_error_mean={:e} violation_var={:e}",
            self.variant,
            self.h,
            self.measured_mean,
            self.measured_var,
            self.predicted_mean,
            self.predicted_var_bound_or_value,
            self.bound_is_equality,
            self.abs_error_mean,
            self.violation_var,
        )
    }
}

/// Runs forward and backward with `eps = 0` and checks the measured input
/// gradient against the re-centering / re-scaling predictions.
pub fn theorem1_report(variant: NormVariant, x: &RealVector, g: &[f64]) -> Result<GradReport> {
    if !NormVariant::DETACH_FAMILY.contains(&variant) {
        return Err(Error::UnsupportedVariant(variant.name()));
    }
    let layer = NormLayer::new(variant, x.len(), 0.0);
    let (_, cache) = layer.forward(x)?;
    let dx = normlayers::backward(variant, &cache, None, None, g)?.dx;
    GradReport::from_gradients(variant, cache.sigma, g, &dx)
}

/// Standard-normal vector, redrawn until its standard deviation is at least
/// `1e-3`.
pub fn well_conditioned_gaussian(rng: &mut Rng, n: usize) -> RealVector {
    loop {
        let x = rand_gaussian(rng, n);
        if n < 2 || std_pop(&x) >= 1e-3 {
            return x;
        }
    }
}

/// Aggregate of many [`GradReport`]s for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Summary {
    pub variant: NormVariant,
    pub cases: usize,
    pub failures: usize,
    pub max_mean_error: f64,
    pub max_var_equality_error: f64,
    pub max_violation_var: f64,
}

impl Theorem1Summary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `trials` random `(x, g)` pairs per variant, with `H` drawn per trial
/// from `dims`.
pub fn theorem1_suite(
    variants: &[NormVariant],
    dims: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<Theorem1Summary>> {
    let mut out = Vec::with_capacity(variants.len());
    for (vi, &variant) in variants.iter().enumerate() {
        let mut rng = Rng::with_stream(seed, vi as u64);
        let mut s = Theorem1Summary {
            variant,
            cases: 0,
            failures: 0,
            max_mean_error: 0.0,
            max_var_equality_error: 0.0,
            max_violation_var: 0.0,
        };
        for t in 0..trials {
            let h = dims[t % dims.len()];
            let x = well_conditioned_gaussian(&mut rng, h);
            let g = rand_gaussian(&mut rng, h);
            let r = theorem1_report(variant, &x, &g)?;
            s.cases += 1;
            if !r.passes() {
                s.failures += 1;
            }
            s.max_mean_error = s.max_mean_error.max(r.mean_error());
            if let Some(e) = r.var_equality_error() {
                s.max_var_equality_error = s.max_var_equality_error.max(e);
            }
            s.max_violation_var = s.max_violation_var.max(r.violation_var);
        }
        out.push(s);
    }
    Ok(out)
}

/// Outcome of the numeric check of the AdaNorm construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub c: f64,
    pub k: f64,
    #[serde(rename = "H")]
    pub h: usize,
    pub trials: usize,
    /// Worst per-trial `|mean(phi(y)) - C|`.
    pub max_phi_mean_err: f64,
    /// Worst per-trial `|mean(z) + C k|`.
    pub max_z_mean_err: f64,
    /// Fraction of all components with `|y_i| >= 1/k`.
    pub tail_fraction: f64,
    /// Chebyshev bound on that fraction, `k^2` (since `D_y = 1`).
    pub tail_bound: f64,
    pub negative_phi_count: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl Theorem2Report {
    pub fn to_line(&self) -> String {
        format!(
            "C={} k={} H={} trials={} max_phi_mean_err={:e} max_z_mean_err={:e} \
             tail_fraction={:e} tail_bound={:e} negative_phi={} passed={}",
            self.c,
            self.k,
            self.h,
            self.trials,
            self.max_phi_mean_err,
            self.max_z_mean_err,
            self.tail_fraction,
            self.tail_bound,
            self.negative_phi_count,
            self.passed
        )
    }
}

/// Per-trial checks of `mean(phi(y)) = C` and `mean(z) = -C k` on random
/// Gaussian inputs, plus the empirical rate of `|y_i| >= 1/k`.
pub fn theorem2_numeric_check(c: f64, k: f64, h: usize, trials: usize, rng: &mut Rng) -> Result<Theorem2Report> {
    let ada = AdaNormConfig::new(c, k)?;
    if h < 2 {
        return Err(Error::TooShort { min: 2, got: h });
    }
    let tolerance = INEQUALITY_SLACK * c.max(1.0);
    let threshold = 1.0 / k;
    let mut max_phi = 0.0f64;
    let mut max_z = 0.0f64;
    let mut tail = 0usize;
    let mut negative = 0usize;
    for _ in 0..trials {
        let x = well_conditioned_gaussian(rng, h);
        let (z, cache) = normlayers::forward(NormVariant::AdaNorm, &x, None, Some(&ada), 0.0)?;
        let phi = cache.phi.as_ref().expect("adanorm cache carries phi");
        max_phi = max_phi.max((mean(phi) - c).abs());
        max_z = max_z.max((mean(&z) + c * k).abs());
        tail += cache.y.iter().filter(|y| y.abs() >= threshold).count();
        negative += cache.negative_phi;
    }
    let total = (trials * h).max(1) as f64;
    let tail_fraction = tail as f64 / total;
    let tail_bound = k * k;
    Ok(Theorem2Report {
        c,
        k,
        h,
        trials,
        max_phi_mean_err: max_phi,
        max_z_mean_err: max_z,
        tail_fraction,
        tail_bound,
        negative_phi_count: negative,
        tolerance,
        passed: max_phi <= tolerance && max_z <= tolerance && tail_fraction <= tail_bound,
    })
}
