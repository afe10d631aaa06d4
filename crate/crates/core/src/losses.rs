//! Scalar objectives and their gradients with respect to logits (or, for the
//! neutralization losses, with respect to head parameters).

use crate::error::{Error, Result};
use crate::nn::{softmax, Gradients, Mode, Model, Scope};

/// Floor applied to probabilities before logs and fractional powers.
pub const PROB_FLOOR: f64 = 1e-12;

/// Temperature-softened probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    probabilities: Vec<f64>,
    temperature: f64,
}

impl SoftTarget {
    pub fn from_logits(logits: &[f64], temperature: f64) -> Result<Self> {
        Ok(Self {
            probabilities: softmax_temperature(logits, temperature)?,
            temperature,
        })
    }

    pub fn new(probabilities: Vec<f64>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        check_distribution(&probabilities)?;
        Ok(Self {
            probabilities,
            temperature,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `(p1 + p2) / 2`.
    pub fn midpoint(&self, other: &SoftTarget) -> Result<SoftTarget> {
        if self.probabilities.len() != other.probabilities.len() {
            return Err(Error::Shape {
                expected: self.probabilities.len(),
                actual: other.probabilities.len(),
            });
        }
        Ok(SoftTarget {
            probabilities: midpoint(&self.probabilities, &other.probabilities),
            temperature: self.temperature,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnfLossConfig {
    /// Weight of the smoothing term.
    pub alpha: f64,
    /// Interpolation weights, each in `[0.5, 1)`.
    pub lambda_set: Vec<f64>,
    pub temperature: f64,
}

impl Default for RnfLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_set: vec![0.6, 0.7, 0.8, 0.9],
            temperature: 2.0,
        }
    }
}

impl RnfLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.lambda_set.is_empty() {
            return Err(Error::config("lambda set is empty"));
        }
        if let Some(l) = self.lambda_set.iter().find(|l| !(0.5..1.0).contains(*l)) {
            return Err(Error::config(format!("lambda {l} not in [0.5, 1)")));
        }
        check_temperature(self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GceConfig {
    pub q: f64,
}

impl GceConfig {
    pub fn new(q: f64) -> Result<Self> {
        let cfg = Self { q };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q > 0.0 && self.q <= 1.0 {
            Ok(())
        } else {
            Err(Error::config(format!("GCE q must be in (0, 1], got {}", self.q)))
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t >= 1.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be >= 1, got {t}")))
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("probabilities must lie in [0, 1]".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("probabilities sum to {s}")));
    }
    Ok(())
}

fn check_class(probs: &[f64], y: usize) -> Result<()> {
    if y < probs.len() {
        Ok(())
    } else {
        Err(Error::Input(format!("class {y} out of range for {} classes", probs.len())))
    }
}

pub(crate) fn midpoint(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * x + 0.5 * y).collect()
}

fn lerp(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `softmax(logits / T)`.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    Ok(softmax(&scaled))
}

/// Pulls `d_probs` back through `softmax(logits / T)`; `probs` is the forward output.
pub fn softmax_temperature_backward(probs: &[f64], d_probs: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(d_probs)
        .map(|(p, d)| p * (d - dot) / temperature)
        .collect()
}

/// Cross entropy `-log p_y` and its logit gradient `p - onehot(y)`.
pub fn ce_loss(probs: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    check_class(probs, y)?;
    let py = probs[y];
    if py < PROB_FLOOR {
        log::warn!("probability {py:e} of the true class clamped to {PROB_FLOOR:e}");
    }
    let loss = -py.max(PROB_FLOOR).ln();
    let mut grad = probs.to_vec();
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Generalized cross entropy `(1 - p_y^q) / q`. Its logit gradient is
/// `p_y^q` times the cross-entropy logit gradient.
pub fn gce_loss(probs: &[f64], y: usize, cfg: &GceConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_class(probs, y)?;
    let py = probs[y].max(PROB_FLOOR);
    let weight = py.powf(cfg.q);
    // -expm1(q ln p) / q stays accurate as q -> 0.
    let loss = -(cfg.q * py.ln()).exp_m1() / cfg.q;
    let mut grad = probs.to_vec();
    grad[y] -= 1.0;
    grad.iter_mut().for_each(|g| *g *= weight);
    Ok((loss, grad))
}

/// Squared L2 distance between head output and target, with gradient `2 (output - target)`.
pub fn rnf_mse_loss(output: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if output.len() != target.len() {
        return Err(Error::Shape {
            expected: target.len(),
            actual: output.len(),
        });
    }
    let diff: Vec<f64> = output.iter().zip(target).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum();
    Ok((loss, diff.into_iter().map(|d| 2.0 * d).collect()))
}

/// How head passes inside the neutralization losses are run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPass {
    pub temperature: f64,
    pub scope: Scope,
    /// `Train(seed)` draws one dropout mask shared by every head evaluation of
    /// the pair; with independent masks the smoothing term would be nonzero
    /// even for identical inputs.
    pub mode: Mode,
}

impl HeadPass {
    pub fn eval(temperature: f64) -> Self {
        Self {
            temperature,
            scope: Scope::HeadOnly,
            mode: Mode::Eval,
        }
    }
}

struct HeadEval {
    trace: crate::nn::ForwardTrace,
    probs: Vec<f64>,
}

fn head_eval(model: &Model, z: &[f64], pass: &HeadPass) -> Result<HeadEval> {
    let trace = model.head_trace(z, pass.mode)?;
    let probs = softmax_temperature(&trace.logits, pass.temperature)?;
    Ok(HeadEval { trace, probs })
}

fn head_backward(model: &Model, eval: &HeadEval, d_probs: &[f64], pass: &HeadPass, into: &mut Gradients) -> Result<()> {
    let d_logits = softmax_temperature_backward(&eval.probs, d_probs, pass.temperature);
    let g = model.backward(&eval.trace, &d_logits, pass.scope)?;
    into.add_scaled(&g, 1.0);
    Ok(())
}

fn check_pair(model: &Model, z1: &[f64], z2: &[f64]) -> Result<()> {
    let d = model.representation_dim();
    for z in [z1, z2] {
        if z.len() != d {
            return Err(Error::Shape {
                expected: d,
                actual: z.len(),
            });
        }
    }
    Ok(())
}

/// Smoothing term for one midpoint evaluation already in hand.
fn smooth_with_midpoint(
    model: &Model,
    z1: &[f64],
    z2: &[f64],
    lambda_set: &[f64],
    pass: &HeadPass,
    mid: &HeadEval,
    grads: &mut Gradients,
    weight: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut d_mid = vec![0.0; mid.probs.len()];
    for &lambda in lambda_set {
        let point = head_eval(model, &lerp(z1, z2, lambda), pass)?;
        total += l1(&point.probs, &mid.probs);
        let sign: Vec<f64> = point
            .probs
            .iter()
            .zip(&mid.probs)
            .map(|(a, b)| weight * sign(a - b))
            .collect();
        head_backward(model, &point, &sign, pass, grads)?;
        d_mid.iter_mut().zip(&sign).for_each(|(d, s)| *d -= s);
    }
    head_backward(model, mid, &d_mid, pass, grads)?;
    Ok(total)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_lambdas(lambda_set: &[f64]) -> Result<()> {
    if lambda_set.is_empty() {
        return Err(Error::config("lambda set is empty"));
    }
    if let Some(l) = lambda_set.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::config(format!("lambda {l} not in [0, 1]")));
    }
    Ok(())
}

/// `sum over lambda of | c(lambda z1 + (1 - lambda) z2) - c((z1 + z2) / 2) |_1`,
/// with gradients for the head parameters in `pass.scope`.
pub fn smooth_loss(model: &Model, z1: &[f64], z2: &[f64], lambda_set: &[f64], pass: &HeadPass) -> Result<(f64, Gradients)> {
    check_pair(model, z1, z2)?;
    check_lambdas(lambda_set)?;
    let mut grads = Gradients::zeros(model, pass.scope);
    let mid = head_eval(model, &midpoint(z1, z2), pass)?;
    let value = smooth_with_midpoint(model, z1, z2, lambda_set, pass, &mid, &mut grads, 1.0)?;
    Ok((value, grads))
}

#[derive(Debug, Clone)]
pub struct RnfLoss {
    pub total: f64,
    pub mse: f64,
    pub smooth: f64,
    pub grads: Gradients,
}

/// `L_MSE(c((z1+z2)/2), (p1+p2)/2) + alpha * L_Smooth`, gradients restricted to the head.
pub fn combined_rnf_loss(
    model: &Model,
    z1: &[f64],
    z2: &[f64],
    p1: &[f64],
    p2: &[f64],
    cfg: &RnfLossConfig,
    pass: &HeadPass,
) -> Result<RnfLoss> {
    cfg.validate()?;
    check_pair(model, z1, z2)?;
    if pass.scope == Scope::All {
        return Err(Error::config("neutralization losses only train head parameters"));
    }
    let mut grads = Gradients::zeros(model, pass.scope);
    let mid = head_eval(model, &midpoint(z1, z2), pass)?;
    let (mse, d_out) = rnf_mse_loss(&mid.probs, &midpoint(p1, p2))?;
    head_backward(model, &mid, &d_out, pass, &mut grads)?;
    let smooth = if cfg.alpha > 0.0 {
        smooth_with_midpoint(model, z1, z2, &cfg.lambda_set, pass, &mid, &mut grads, cfg.alpha)?
    } else {
        0.0
    };
    Ok(RnfLoss {
        total: mse + cfg.alpha * smooth,
        mse,
        smooth,
        grads,
    })
}

/// Smoothing for K groups: `| c(sum l_k z_k / sum l_k) - c(mean z_k) |_1`.
pub fn multi_group_smooth(model: &Model, zs: &[Vec<f64>], lambdas: &[f64], temperature: f64) -> Result<f64> {
    if zs.len() < 2 {
        return Err(Error::config("need at least two groups"));
    }
    if lambdas.len() != zs.len() {
        return Err(Error::Shape {
            expected: zs.len(),
            actual: lambdas.len(),
        });
    }
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::config("group weights must lie in [0, 1]"));
    }
    let total: f64 = lambdas.iter().sum();
    if total == 0.0 {
        return Err(Error::config("group weights are all zero"));
    }
    let d = model.representation_dim();
    if let Some(z) = zs.iter().find(|z| z.len() != d) {
        return Err(Error::Shape {
            expected: d,
            actual: z.len(),
        });
    }
    let k = zs.len() as f64;
    let mut weighted = vec![0.0; d];
    let mut uniform = vec![0.0; d];
    for (z, &l) in zs.iter().zip(lambdas) {
        for i in 0..d {
            weighted[i] += l * z[i] / total;
            uniform[i] += z[i] / k;
        }
    }
    let a = softmax_temperature(&model.head_trace(&weighted, Mode::Eval)?.logits, temperature)?;
    let b = softmax_temperature(&model.head_trace(&uniform, Mode::Eval)?.logits, temperature)?;
    Ok(l1(&a, &b))
}
