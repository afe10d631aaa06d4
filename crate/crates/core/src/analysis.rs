//! Representation probing and the group loss-gap bound check.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::losses::{ce_loss, PROB_FLOOR};
use crate::metrics::Measure;
use crate::nn::{softmax, AdamState, Model};
use crate::rng;

/// Sigmoid-kernel parameters: `K_ij = tanh(gain * <z_i, z_j> + offset)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KpcaConfig {
    /// Defaults to `1 / dim(z)` when `None`.
    pub gain: Option<f64>,
    pub offset: f64,
}

impl Default for KpcaConfig {
    fn default() -> Self {
        Self { gain: None, offset: 1.0 }
    }
}

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks(self.n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }
}

fn check_rows(z: &[Vec<f64>]) -> Result<usize> {
    let dim = z.first().map(Vec::len).ok_or_else(|| Error::Input("no representations".into()))?;
    if let Some(bad) = z.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: bad.len(),
        });
    }
    if z.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("representations"));
    }
    Ok(dim)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid_kernel(z: &[Vec<f64>], cfg: &KpcaConfig) -> Result<SquareMatrix> {
    let dim = check_rows(z)?;
    let gain = cfg.gain.unwrap_or(1.0 / dim.max(1) as f64);
    let n = z.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let k = (gain * dot(&z[i], &z[j]) + cfg.offset).tanh();
            data[i * n + j] = k;
            data[j * n + i] = k;
        }
    }
    Ok(SquareMatrix { n, data })
}

/// `H K H` with `H = I - 11^T / n`.
pub fn center_kernel(k: &SquareMatrix) -> SquareMatrix {
    let n = k.n;
    let nf = n as f64;
    let row_mean: Vec<f64> = k.data.chunks(n).map(|r| r.iter().sum::<f64>() / nf).collect();
    let total = row_mean.iter().sum::<f64>() / nf;
    let mut data = k.data.clone();
    for i in 0..n {
        for j in 0..n {
            // K is symmetric, so column means equal row means.
            data[i * n + j] += total - row_mean[i] - row_mean[j];
        }
    }
    SquareMatrix { n, data }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors.
pub fn symmetric_eigen(m: &SquareMatrix) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = m.n;
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J, touching rows and columns p and q.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&c| (0..n).map(|r| v[r * n + c]).collect()).collect();
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpcaProjection {
    /// One `(coord1, coord2)` per input point.
    pub coords: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
    /// Unit eigenvectors of the centered kernel, sign-normalized.
    pub eigenvectors: [Vec<f64>; 2],
    pub centered_kernel: SquareMatrix,
}

/// Two-dimensional kernel PCA with a sigmoid kernel.
///
/// The expansion coefficients are `v / sqrt(lambda)`, so the training-point
/// coordinates are `K_c v / sqrt(lambda) = sqrt(lambda) v`.
pub fn kpca_project(z: &[Vec<f64>], cfg: &KpcaConfig) -> Result<KpcaProjection> {
    if z.len() < 3 {
        return Err(Error::Input(format!("kernel PCA needs at least 3 points, got {}", z.len())));
    }
    let kc = center_kernel(&sigmoid_kernel(z, cfg)?);
    let (values, mut vectors) = symmetric_eigen(&kc)?;
    let tol = 1e-10 * values.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let positive = values.iter().filter(|&&v| v > tol).count();
    if positive < 2 {
        return Err(Error::Degenerate { positive });
    }
    vectors.truncate(2);
    for v in &mut vectors {
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    let s = [values[0].sqrt(), values[1].sqrt()];
    let coords = (0..z.len()).map(|i| [s[0] * vectors[0][i], s[1] * vectors[1][i]]).collect();
    let [v0, v1]: [Vec<f64>; 2] = vectors.try_into().expect("two vectors");
    Ok(KpcaProjection {
        coords,
        eigenvalues: [values[0], values[1]],
        eigenvectors: [v0, v1],
        centered_kernel: kc,
    })
}

/// `|| K_c v - lambda v ||_2` for one retained eigenpair.
pub fn eigen_residual(k: &SquareMatrix, value: f64, vector: &[f64]) -> f64 {
    let kv = k.mul_vec(vector);
    kv.iter().zip(vector).map(|(a, b)| (a - value * b).powi(2)).sum::<f64>().sqrt()
}

/// Writes `index,coord1,coord2,a,y,yhat`; unknown groups are left empty.
pub fn write_kpca_csv(path: &Path, proj: &KpcaProjection, groups: &[Option<usize>], labels: &[usize], preds: &[usize]) -> Result<()> {
    let n = proj.coords.len();
    for len in [groups.len(), labels.len(), preds.len()] {
        if len != n {
            return Err(Error::Shape { expected: n, actual: len });
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "coord1", "coord2", "a", "y", "yhat"])?;
    for i in 0..n {
        w.write_record([
            i.to_string(),
            proj.coords[i][0].to_string(),
            proj.coords[i][1].to_string(),
            groups[i].map(|g| g.to_string()).unwrap_or_default(),
            labels[i].to_string(),
            preds[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `logits = W z + b`, one weight row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// `classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl LinearProbe {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes).map(|c| dot(self.row(c), z) + self.biases[c]).collect()
    }

    pub fn predict(&self, z: &[f64]) -> usize {
        crate::nn::argmax(&self.logits(z))
    }

    pub fn accuracy(&self, z: &[Vec<f64>], targets: &[usize]) -> f64 {
        let hits = z.iter().zip(targets).filter(|(z, &t)| self.predict(z) == t).count();
        hits as f64 / z.len().max(1) as f64
    }

    /// Mean cross entropy and its gradients `(dW, db)`.
    pub fn loss_and_grad(&self, z: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let n = z.len() as f64;
        let mut loss = 0.0;
        let mut dw = vec![0.0; self.weights.len()];
        let mut db = vec![0.0; self.classes];
        for (zi, &t) in z.iter().zip(targets) {
            let p = softmax(&self.logits(zi));
            let (l, g) = ce_loss(&p, t)?;
            loss += l / n;
            for c in 0..self.classes {
                db[c] += g[c] / n;
                for (d, &x) in dw[c * self.dim..(c + 1) * self.dim].iter_mut().zip(zi) {
                    *d += g[c] * x / n;
                }
            }
        }
        Ok((loss, dw, db))
    }
}

/// Full-batch Adam on cross entropy.
pub fn fit_linear_probe(z: &[Vec<f64>], targets: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let dim = check_rows(z)?;
    if targets.len() != z.len() {
        return Err(Error::Shape {
            expected: z.len(),
            actual: targets.len(),
        });
    }
    if classes < 2 || targets.iter().any(|&t| t >= classes) {
        return Err(Error::Input("probe targets out of range".into()));
    }
    let mut r = rng::stream(cfg.seed, "probe");
    let limit = (6.0 / (dim + classes) as f64).sqrt();
    let mut probe = LinearProbe {
        classes,
        dim,
        weights: (0..classes * dim).map(|_| r.random_range(-limit..=limit)).collect(),
        biases: vec![0.0; classes],
    };
    let mut adam = AdamState::for_blocks(&[classes * dim, classes], cfg.lr);
    for epoch in 0..cfg.epochs {
        let (loss, dw, db) = probe.loss_and_grad(z, targets)?;
        if !loss.is_finite() || dw.iter().chain(&db).any(|g| !g.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        adam.begin_step();
        adam.apply(0, &mut probe.weights, &dw);
        adam.apply(1, &mut probe.biases, &db);
    }
    Ok(probe)
}

/// Cosine between the sensitive probe's `group` row and the mimic probe's `class` row.
pub fn head_attention_similarity(sens: &LinearProbe, mimic: &LinearProbe, group: usize, class: usize) -> Result<Measure> {
    if sens.dim != mimic.dim {
        return Err(Error::Shape {
            expected: sens.dim,
            actual: mimic.dim,
        });
    }
    if group >= sens.classes || class >= mimic.classes {
        return Err(Error::Input("probe row out of range".into()));
    }
    let (a, b) = (sens.row(group), mimic.row(class));
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(Measure::Undefined("similarity: zero-norm probe row".into()));
    }
    Ok(Measure::Value((dot(a, b) / (na * nb)).clamp(-1.0, 1.0)))
}

/// Probes fitted on a model's representations of some samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub sensitive: LinearProbe,
    pub mimic: LinearProbe,
    /// Training accuracy of the sensitive probe.
    pub sensitive_accuracy: f64,
    /// Agreement of the mimic probe with the head's predictions.
    pub mimic_agreement: f64,
    /// Cosine of the privileged-group row and the desired-class row.
    pub similarity: Measure,
}

/// Fits the sensitive-attribute probe and the head-mimic probe on `model`'s
/// representations of `inputs`.
pub fn probe_model(model: &Model, inputs: &[Vec<f64>], groups: &[usize], desired: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let z = inputs.iter().map(|x| model.encode(x)).collect::<Result<Vec<_>>>()?;
    let head_preds = z
        .iter()
        .map(|z| model.head_forward(z).map(|l| crate::nn::argmax(&l)))
        .collect::<Result<Vec<_>>>()?;
    let sensitive = fit_linear_probe(&z, groups, 2, cfg)?;
    let mimic = fit_linear_probe(&z, &head_preds, model.num_classes(), cfg)?;
    Ok(ProbeReport {
        sensitive_accuracy: sensitive.accuracy(&z, groups),
        mimic_agreement: mimic.accuracy(&z, &head_preds),
        similarity: head_attention_similarity(&sensitive, &mimic, 1, desired)?,
        sensitive,
        mimic,
    })
}

/// Paired inputs from the two groups with their soft class-1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremPair {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub p1: f64,
    pub p2: f64,
}

/// Measured constants of the group loss-gap bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremInstance {
    pub epsilon_p: f64,
    pub epsilon_c: f64,
    pub epsilon_l: f64,
    pub lambda_z: f64,
    pub n_pairs: usize,
    /// `|mean L(z1, p1) - mean L(z2, p2)|`.
    pub gap: f64,
    /// `epsilon_p * (lambda_z * epsilon_c + epsilon_l)`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundVerdict {
    Pass,
    Fail,
    HypothesisViolation(String),
}

/// `ℓ(c(z), 0)` and `ℓ(c(z), 1)` for cross entropy.
fn class_losses(model: &Model, z: &[f64]) -> Result<[f64; 2]> {
    let p = model.head_forward(z)?;
    Ok([-p[0].max(PROB_FLOOR).ln(), -p[1].max(PROB_FLOOR).ln()])
}

/// `L(c(z), p) = (1 - p) ℓ(c(z), 0) + p ℓ(c(z), 1)`.
pub fn soft_label_loss(model: &Model, z: &[f64], p: f64) -> Result<f64> {
    let [l0, l1] = class_losses(model, z)?;
    Ok((1.0 - p) * l0 + p * l1)
}

/// Central finite-difference gradient of `L(c(·), p)` at `z`.
fn loss_gradient_norm(model: &Model, z: &[f64], p: f64) -> Result<f64> {
    let mut sq = 0.0;
    let mut probe = z.to_vec();
    for i in 0..z.len() {
        let h = 1e-5 * z[i].abs().max(1.0);
        probe[i] = z[i] + h;
        let up = soft_label_loss(model, &probe, p)?;
        probe[i] = z[i] - h;
        let down = soft_label_loss(model, &probe, p)?;
        probe[i] = z[i];
        sq += ((up - down) / (2.0 * h)).powi(2);
    }
    Ok(sq.sqrt())
}

/// Checks `gap <= epsilon_p (lambda_z epsilon_c + epsilon_l)` on `pairs`
/// with every constant measured from the pairs themselves.
pub fn verify_theorem_bound(model: &Model, pairs: &[TheoremPair]) -> Result<(TheoremInstance, BoundVerdict)> {
    if model.num_classes() != 2 {
        return Err(Error::Input("bound check needs a binary head".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no pairs".into()));
    }
    let mut inst = TheoremInstance {
        epsilon_p: 0.0,
        epsilon_c: 0.0,
        epsilon_l: 0.0,
        lambda_z: 0.0,
        n_pairs: pairs.len(),
        gap: 0.0,
        bound: 0.0,
    };
    let mut violation = None;
    let (mut sum1, mut sum2) = (0.0, 0.0);
    for (k, pair) in pairs.iter().enumerate() {
        if ![pair.p1, pair.p2].iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Input(format!("pair {k}: soft labels must lie in [0, 1]")));
        }
        let z1 = model.encode(&pair.x1)?;
        let z2 = model.encode(&pair.x2)?;
        let dz = norm(&z1.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
        let dp = (pair.p1 - pair.p2).abs();
        inst.epsilon_p = inst.epsilon_p.max(dp);
        if dp > 0.0 {
            inst.lambda_z = inst.lambda_z.max(dz / dp);
        } else if dz > 0.0 && violation.is_none() {
            violation = Some(format!("pair {k}: equal soft labels with distinct representations"));
        }
        let mid = crate::losses::midpoint(&z1, &z2);
        let p_mid = 0.5 * (pair.p1 + pair.p2);
        inst.epsilon_c = inst.epsilon_c.max(loss_gradient_norm(model, &mid, p_mid)?);
        for z in [&z1, &z2, &mid] {
            inst.epsilon_l = class_losses(model, z)?.into_iter().fold(inst.epsilon_l, f64::max);
        }
        sum1 += soft_label_loss(model, &z1, pair.p1)?;
        sum2 += soft_label_loss(model, &z2, pair.p2)?;
    }
    let n = pairs.len() as f64;
    inst.gap = (sum1 / n - sum2 / n).abs();
    inst.bound = inst.epsilon_p * (inst.lambda_z * inst.epsilon_c + inst.epsilon_l);
    let verdict = match violation {
        Some(why) => BoundVerdict::HypothesisViolation(why),
        None if inst.gap <= inst.bound + 1e-9 => BoundVerdict::Pass,
        None => BoundVerdict::Fail,
    };
    Ok((inst, verdict))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::from_seed(seed);
        (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = SquareMatrix {
            n: 3,
            data: vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 1.0],
        };
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        assert!((vals.iter().sum::<f64>() - 8.0).abs() < 1e-12);
        for (l, v) in vals.iter().zip(&vecs) {
            assert!(eigen_residual(&m, *l, v) < 1e-12);
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_rows_sum_to_zero() {
        let k = sigmoid_kernel(&points(30, 4, 1), &KpcaConfig::default()).unwrap();
        let kc = center_kernel(&k);
        for row in kc.data.chunks(kc.n) {
            assert!(row.iter().sum::<f64>().abs() < 1e-8);
        }
    }

    #[test]
    fn kpca_residuals_and_duplicates() {
        let mut z = points(40, 5, 2);
        z.push(z[3].clone());
        let proj = kpca_project(&z, &KpcaConfig::default()).unwrap();
        assert!(proj.eigenvalues[0] >= proj.eigenvalues[1]);
        for k in 0..2 {
            let v = &proj.eigenvectors[k];
            assert!(eigen_residual(&proj.centered_kernel, proj.eigenvalues[k], v) <= 1e-6 * norm(v));
        }
        for k in 0..2 {
            assert!((proj.coords[3][k] - proj.coords[40][k]).abs() < 1e-9);
        }
    }

    #[test]
    fn kpca_degenerate() {
        let z = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(kpca_project(&z, &KpcaConfig::default()), Err(Error::Degenerate { .. })));
        assert!(kpca_project(&z[..2], &KpcaConfig::default()).is_err());
    }

    #[test]
    fn probe_separable() {
        let z = points(100, 3, 5);
        let t: Vec<usize> = z.iter().map(|p| usize::from(p[0] + 0.5 * p[1] > 0.0)).collect();
        let probe = fit_linear_probe(&z, &t, 2, &ProbeConfig { epochs: 500, ..Default::default() }).unwrap();
        assert!(probe.accuracy(&z, &t) >= 0.99);
        let again = fit_linear_probe(&z, &t, 2, &ProbeConfig { epochs: 500, ..Default::default() }).unwrap();
        assert_eq!(probe, again);
    }

    #[test]
    fn similarity_cases() {
        let p = |w: Vec<f64>| LinearProbe {
            classes: 2,
            dim: 2,
            weights: w,
            biases: vec![0.0; 2],
        };
        let a = p(vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(head_attention_similarity(&a, &a, 1, 1).unwrap(), Measure::Value(1.0));
        assert_eq!(head_attention_similarity(&a, &a, 0, 1).unwrap(), Measure::Value(0.0));
        let scaled = p(vec![3.0, 0.0, 0.0, 3.0]);
        assert_eq!(head_attention_similarity(&scaled, &a, 1, 1).unwrap(), Measure::Value(1.0));
        let zero = p(vec![0.0; 4]);
        assert!(!head_attention_similarity(&zero, &a, 1, 1).unwrap().is_defined());
    }

    #[test]
    fn bound_degenerate_and_violation() {
        let model = Model::new(&[3, 4, 2], 1, 0.0, 1).unwrap();
        let x = vec![0.3, -0.2, 1.0];
        let pairs = vec![TheoremPair {
            x1: x.clone(),
            x2: x.clone(),
            p1: 0.4,
            p2: 0.4,
        }];
        let (inst, verdict) = verify_theorem_bound(&model, &pairs).unwrap();
        assert_eq!(verdict, BoundVerdict::Pass);
        assert_eq!(inst.bound, 0.0);
        assert_eq!(inst.gap, 0.0);

        let pairs = vec![TheoremPair {
            x1: vec![1.0, 1.0, 1.0],
            x2: vec![-1.0, 2.0, 0.0],
            p1: 0.4,
            p2: 0.4,
        }];
        let (_, verdict) = verify_theorem_bound(&model, &pairs).unwrap();
        assert!(matches!(verdict, BoundVerdict::HypothesisViolation(_)));
    }
}
