//! Two-stage training.
//!
//! Stage one trains a cross-entropy teacher `f_T` and a GCE bias-amplified
//! model `f_B`. Stage two annotates the training set with proxy groups from
//! `f_B`'s confidence, freezes the teacher's encoder and retrains the head on
//! neutralized pairs. The adversarial and equalized-odds-regularized
//! baselines share the stage-one training loop.

use rayon::prelude::*;

use crate::data::{batches, sample_pair, Dataset, Partition};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, combined_rnf_loss, gce_loss, softmax_temperature, GceConfig, HeadPass, RnfLossConfig};
use crate::metrics::{Measure, MetricsRecord};
use crate::nn::{adam_step, AdamState, Gradients, Mode, Model, Scope};
use crate::rng;

/// MLP shape shared by every trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub encoder_depth: usize,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50],
            encoder_depth: 1,
            dropout: 0.2,
        }
    }
}

impl Architecture {
    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    pub fn build(&self, input: usize, classes: usize, seed: u64) -> Result<Model> {
        Model::new(&self.layer_dims(input, classes), self.encoder_depth, self.dropout, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation-loss improvement.
    pub patience: Option<usize>,
    /// Present for the bias-amplified model.
    pub gce: Option<GceConfig>,
    pub arch: Architecture,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            patience: Some(5),
            gce: None,
            arch: Architecture::default(),
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be >= 2"));
        }
        if let Some(g) = &self.gce {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    /// Validation selection score of stage two.
    pub valid_score: Option<f64>,
    /// Stage-two anchors without a partner in their batch.
    pub skipped_anchors: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    CrossEntropy,
    Gce(GceConfig),
    Eor { beta: f64 },
    Adversarial { beta: f64 },
}

fn check_features(dataset: &Dataset, partition: &Partition) -> Result<()> {
    if partition.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let n = dataset.len();
    if partition.train.iter().chain(&partition.valid).chain(&partition.test).any(|&i| i >= n) {
        return Err(Error::Input("split index out of range".into()));
    }
    Ok(())
}

fn sample_loss(objective: Objective, probs: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    match objective {
        Objective::Gce(cfg) => gce_loss(probs, y, &cfg),
        _ => ce_loss(probs, y),
    }
}

/// Soft equalized-odds gap on predicted desired-class probabilities and its
/// gradient with respect to those probabilities. `None` when a cell is empty.
pub fn soft_equalized_odds(p_desired: &[f64], labels: &[usize], groups: &[usize]) -> Option<(f64, Vec<f64>)> {
    let mut n = [[0usize; 2]; 2];
    let mut sum = [[0.0; 2]; 2];
    for ((&p, &y), &g) in p_desired.iter().zip(labels).zip(groups) {
        n[g][y] += 1;
        sum[g][y] += p;
    }
    if n.iter().flatten().any(|&c| c == 0) {
        return None;
    }
    let mean = |g: usize, y: usize| sum[g][y] / n[g][y] as f64;
    let gap = (mean(0, 1) - mean(1, 1)) + (mean(0, 0) - mean(1, 0));
    let grad = labels
        .iter()
        .zip(groups)
        .map(|(&y, &g)| if g == 0 { 1.0 } else { -1.0 } / n[g][y] as f64)
        .collect();
    Some((gap, grad))
}

fn predict_all(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    indices.iter().map(|&i| model.predict_proba(&dataset.samples[i].x)).collect()
}

fn validation_loss(model: &Model, dataset: &Dataset, valid: &[usize], objective: Objective) -> Result<f64> {
    let probs = predict_all(model, dataset, valid)?;
    let mut total = 0.0;
    for (p, &i) in probs.iter().zip(valid) {
        total += sample_loss(objective, p, dataset.samples[i].y)?.0;
    }
    let mut loss = total / valid.len() as f64;
    if let Objective::Eor { beta } = objective {
        if beta > 0.0 {
            if let Some(groups) = dataset.groups_of(valid) {
                let labels: Vec<usize> = valid.iter().map(|&i| dataset.samples[i].y).collect();
                let pd: Vec<f64> = probs.iter().map(|p| p[dataset.desired_label]).collect();
                if let Some((gap, _)) = soft_equalized_odds(&pd, &labels, &groups) {
                    loss += beta * gap.abs();
                }
            }
        }
    }
    Ok(loss)
}

/// Whole-model training loop shared by stage one and the baselines.
fn train_full(dataset: &Dataset, partition: &Partition, cfg: &StageOneConfig, objective: Objective, adversary_hidden: &[usize]) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    check_features(dataset, partition)?;
    let needs_groups = matches!(objective, Objective::Eor { .. } | Objective::Adversarial { .. });
    let groups: Vec<usize> = if needs_groups {
        dataset
            .groups_of(&(0..dataset.len()).collect::<Vec<_>>())
            .ok_or_else(|| Error::config("baseline training requires the ground-truth sensitive attribute"))?
    } else {
        Vec::new()
    };

    let mut model = cfg.arch.build(dataset.feature_dim(), dataset.num_classes, cfg.seed)?;
    let mut adam = AdamState::new(&model, cfg.lr);
    let enc = model.encoder_depth();
    let mut adversary = match objective {
        Objective::Adversarial { .. } => {
            let mut dims = vec![model.representation_dim()];
            dims.extend(adversary_hidden);
            dims.push(dataset.num_groups);
            Some(Model::new(&dims, 1, 0.0, rng::derive_seed(cfg.seed, "adversary"))?)
        }
        _ => None,
    };
    let mut adversary_adam = adversary.as_ref().map(|m| AdamState::new(m, cfg.lr));
    let dropout_seed = rng::derive_seed(cfg.seed, rng::DROPOUT);
    let mut forward_count = 0u64;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in batches(&partition.train, cfg.batch_size, cfg.seed, epoch)? {
            let b = batch.len() as f64;
            let mut traces = Vec::with_capacity(batch.len());
            for &i in &batch {
                let seed = rng::indexed_seed(dropout_seed, forward_count);
                forward_count += 1;
                traces.push(model.forward(&dataset.samples[i].x, Mode::Train(seed))?);
            }
            let mut batch_loss = 0.0;
            let mut d_logits = Vec::with_capacity(batch.len());
            for (t, &i) in traces.iter().zip(&batch) {
                let (l, g) = sample_loss(objective, &t.probabilities, dataset.samples[i].y)?;
                batch_loss += l / b;
                d_logits.push(g.into_iter().map(|v| v / b).collect::<Vec<f64>>());
            }

            if let Objective::Eor { beta } = objective {
                if beta > 0.0 {
                    let d = dataset.desired_label;
                    let pd: Vec<f64> = traces.iter().map(|t| t.probabilities[d]).collect();
                    let labels: Vec<usize> = batch.iter().map(|&i| dataset.samples[i].y).collect();
                    let bg: Vec<usize> = batch.iter().map(|&i| groups[i]).collect();
                    if let Some((gap, grad)) = soft_equalized_odds(&pd, &labels, &bg) {
                        batch_loss += beta * gap.abs();
                        let s = beta * gap.signum();
                        for ((dl, t), c) in d_logits.iter_mut().zip(&traces).zip(grad) {
                            let p = &t.probabilities;
                            for (j, v) in dl.iter_mut().enumerate() {
                                let onehot = if j == d { 1.0 } else { 0.0 };
                                *v += s * c * p[d] * (onehot - p[j]);
                            }
                        }
                    }
                }
            }

            let mut injections: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
            if let (Objective::Adversarial { beta }, Some(adv), Some(adv_adam)) = (objective, adversary.as_mut(), adversary_adam.as_mut()) {
                // Adversary step on the current representations.
                let mut adv_grads = Gradients::zeros(adv, Scope::All);
                for (t, &i) in traces.iter().zip(&batch) {
                    let z = t.layer_input(enc).expect("full trace");
                    let at = adv.forward(z, Mode::Eval)?;
                    let (_, g) = ce_loss(&at.probabilities, groups[i])?;
                    adv_grads.add_scaled(&adv.backward(&at, &g, Scope::All)?, 1.0 / b);
                }
                adam_step(adv, &adv_grads, adv_adam)?;
                if beta > 0.0 {
                    for ((t, &i), inj) in traces.iter().zip(&batch).zip(injections.iter_mut()) {
                        let z = t.layer_input(enc).expect("full trace");
                        let at = adv.forward(z, Mode::Eval)?;
                        let (l, g) = ce_loss(&at.probabilities, groups[i])?;
                        batch_loss -= beta * l / b;
                        let dz = adv.backward(&at, &g, Scope::All)?.input;
                        *inj = Some(dz.into_iter().map(|v| -beta * v / b).collect());
                    }
                }
            }

            let mut grads = Gradients::zeros(&model, Scope::All);
            for ((t, dl), inj) in traces.iter().zip(&d_logits).zip(&injections) {
                let g = model.backward_injected(t, dl, Scope::All, inj.as_deref().map(|v| (enc, v)))?;
                grads.add_scaled(&g, 1.0);
            }
            if !batch_loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            adam_step(&mut model, &grads, &mut adam)?;
            epoch_loss += batch_loss;
            n_batches += 1;
        }

        let train_loss = epoch_loss / n_batches as f64;
        let valid_loss = if partition.valid.is_empty() {
            None
        } else {
            Some(validation_loss(&model, dataset, &partition.valid, objective)?)
        };
        if !train_loss.is_finite() || valid_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            valid_loss,
            valid_score: None,
            skipped_anchors: 0,
        });

        let score = valid_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let model = match (partition.valid.is_empty(), best) {
        (false, Some((_, m))) => m,
        _ => {
            log.best_epoch = log.epochs.len() - 1;
            model
        }
    };
    Ok((model, log))
}

/// Trains the teacher (plain CE) or, when `cfg.gce` is set, the bias-amplified model.
pub fn train_stage_one(dataset: &Dataset, partition: &Partition, cfg: &StageOneConfig) -> Result<(Model, TrainLog)> {
    let objective = match cfg.gce {
        Some(g) => Objective::Gce(g),
        None => Objective::CrossEntropy,
    };
    train_full(dataset, partition, cfg, objective, &[])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyConfig {
    /// Fraction of each label slice assigned to the group that slice's
    /// confident predictions are attributed to.
    pub gamma: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { gamma: 0.5 }
    }
}

/// Proxy groups for `indices` from a (bias-amplified) model's confidence.
///
/// Among desired-label samples, the `gamma` fraction with the highest
/// desired-class probability is marked privileged (1); among the others, the
/// `gamma` fraction most confident in the undesired class is marked
/// unprivileged (0). Everyone else gets the opposite group.
pub fn generate_proxy_annotations(model: &Model, dataset: &Dataset, indices: &[usize], cfg: &ProxyConfig) -> Result<Vec<usize>> {
    if !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) {
        return Err(Error::config(format!("gamma must be in (0, 1], got {}", cfg.gamma)));
    }
    let d = dataset.desired_label;
    let probs = predict_all(model, dataset, indices)?;
    let mut out = vec![0usize; indices.len()];
    for desired_slice in [true, false] {
        let mut slice: Vec<(usize, f64)> = indices
            .iter()
            .enumerate()
            .filter(|(_, &i)| (dataset.samples[i].y == d) == desired_slice)
            .map(|(k, _)| {
                let own = if desired_slice { probs[k][d] } else { 1.0 - probs[k][d] };
                (k, own)
            })
            .collect();
        slice.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let cut = (cfg.gamma * slice.len() as f64).round() as usize;
        let (confident, rest) = if desired_slice { (1, 0) } else { (0, 1) };
        for (rank, (k, _)) in slice.into_iter().enumerate() {
            out[k] = if rank < cut { confident } else { rest };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationSource {
    GroundTruth,
    Proxy,
    /// Uniformly random groups.
    Random,
}

impl AnnotationSource {
    pub fn name(self) -> &'static str {
        match self {
            AnnotationSource::GroundTruth => "ground_truth",
            AnnotationSource::Proxy => "proxy",
            AnnotationSource::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadScope {
    FullHead,
    LastLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnfStageConfig {
    pub loss: RnfLossConfig,
    pub annotation: AnnotationSource,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub head_scope: HeadScope,
    /// Keep dropout active in the head while retraining.
    pub head_dropout: bool,
    /// Start from a freshly initialized head instead of the teacher's.
    pub fresh_head: bool,
    pub patience: Option<usize>,
}

impl Default for RnfStageConfig {
    fn default() -> Self {
        Self {
            loss: RnfLossConfig::default(),
            annotation: AnnotationSource::Proxy,
            epochs: 10,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            head_scope: HeadScope::FullHead,
            head_dropout: true,
            fresh_head: false,
            patience: Some(5),
        }
    }
}

/// Validation score for stage-two model selection: `accuracy - |1 - DP|`.
fn selection_score(record: &MetricsRecord) -> f64 {
    match record.dp {
        Measure::Value(dp) => record.accuracy - (1.0 - dp).abs(),
        Measure::Undefined(_) => record.accuracy - 1.0,
    }
}

/// Retrains the head of `teacher` on neutralized pairs; the encoder is frozen.
pub fn train_rnf_head(teacher: &Model, dataset: &Dataset, partition: &Partition, cfg: &RnfStageConfig) -> Result<(Model, TrainLog)> {
    cfg.loss.validate()?;
    check_features(dataset, partition)?;
    if cfg.epochs == 0 || cfg.batch_size < 2 || !(cfg.lr > 0.0) {
        return Err(Error::config("stage two needs positive epochs and learning rate and batch size >= 2"));
    }
    if teacher.input_dim() != dataset.feature_dim() {
        return Err(Error::Shape {
            expected: dataset.feature_dim(),
            actual: teacher.input_dim(),
        });
    }
    let train = &partition.train;
    let train_groups = match cfg.annotation {
        AnnotationSource::GroundTruth => dataset.groups_of(train),
        AnnotationSource::Proxy => dataset.proxies_of(train),
        AnnotationSource::Random => {
            let mut r = rng::stream(cfg.seed, "random-annotation");
            Some(train.iter().map(|_| rand::Rng::random_range(&mut r, 0..dataset.num_groups)).collect())
        }
    }
    .ok_or_else(|| {
        Error::config(format!(
            "annotation source `{}` is not available for every training sample",
            cfg.annotation.name()
        ))
    })?;

    // Dataset-indexed lookups for pair sampling.
    let mut groups = vec![usize::MAX; dataset.len()];
    for (&i, &g) in train.iter().zip(&train_groups) {
        groups[i] = g;
    }
    let labels = dataset.labels();
    let t = cfg.loss.temperature;
    let mut z = vec![Vec::new(); dataset.len()];
    let mut p = vec![Vec::new(); dataset.len()];
    for &i in train {
        let trace = teacher.forward(&dataset.samples[i].x, Mode::Eval)?;
        z[i] = trace.layer_input(teacher.encoder_depth()).expect("full trace").to_vec();
        p[i] = softmax_temperature(&trace.logits, t)?;
    }

    let mut student = teacher.clone();
    if cfg.fresh_head {
        student.reinitialize_from(student.encoder_depth(), rng::derive_seed(cfg.seed, "student-head"));
    }
    let scope = match cfg.head_scope {
        HeadScope::FullHead => Scope::HeadOnly,
        HeadScope::LastLayer => Scope::LastLayer,
    };
    let mut adam = AdamState::new(&student, cfg.lr);
    let mut pair_rng = rng::stream(cfg.seed, rng::PAIRS);
    let dropout_seed = rng::derive_seed(cfg.seed, rng::DROPOUT);
    let mut pass_count = 0u64;
    let valid_groups = dataset.groups_of(&partition.valid);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut n_pairs_epoch = 0usize;
        let mut skipped = 0usize;
        for batch in batches(train, cfg.batch_size, cfg.seed, epoch)? {
            let mut grads = Gradients::zeros(&student, scope);
            let mut n_pairs = 0usize;
            let mut batch_loss = 0.0;
            for &i in &batch {
                let Some(j) = sample_pair(&batch, i, &labels, &groups, &mut pair_rng) else {
                    skipped += 1;
                    continue;
                };
                let mode = if cfg.head_dropout {
                    pass_count += 1;
                    Mode::Train(rng::indexed_seed(dropout_seed, pass_count))
                } else {
                    Mode::Eval
                };
                let pass = HeadPass {
                    temperature: t,
                    scope,
                    mode,
                };
                let r = combined_rnf_loss(&student, &z[i], &z[j], &p[i], &p[j], &cfg.loss, &pass)?;
                grads.add_scaled(&r.grads, 1.0);
                batch_loss += r.total;
                n_pairs += 1;
            }
            if n_pairs == 0 {
                continue;
            }
            grads.scale(1.0 / n_pairs as f64);
            if !batch_loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            adam_step(&mut student, &grads, &mut adam)?;
            epoch_loss += batch_loss;
            n_pairs_epoch += n_pairs;
        }
        if skipped > 0 {
            log::debug!("epoch {epoch}: {skipped} anchors had no partner");
        }

        let valid_score = match &valid_groups {
            Some(g) if !partition.valid.is_empty() => {
                let probs = predict_all(&student, dataset, &partition.valid)?;
                let labels_v: Vec<usize> = partition.valid.iter().map(|&i| labels[i]).collect();
                Some(selection_score(&MetricsRecord::from_probabilities(&probs, &labels_v, g, dataset.desired_label)?))
            }
            _ => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / n_pairs_epoch.max(1) as f64,
            valid_loss: None,
            valid_score,
            skipped_anchors: skipped,
        });
        if let Some(score) = valid_score {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, student.clone()));
                log.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        } else {
            log.best_epoch = epoch;
        }
    }
    let student = best.map_or(student, |(_, m)| m);
    Ok((student, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Adversarial,
    Eor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Regularization weight (beta_1 for adversarial, beta_2 for EOR).
    pub beta: f64,
    pub adversary_hidden: Vec<usize>,
    pub training: StageOneConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::Eor,
            beta: 1.0,
            adversary_hidden: vec![50],
            training: StageOneConfig::default(),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta >= 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("beta must be >= 0, got {beta}")))
    }
}

/// Encoder + head trained against an adversary that predicts the group from `z`.
pub fn train_adversarial(dataset: &Dataset, partition: &Partition, cfg: &BaselineConfig) -> Result<(Model, TrainLog)> {
    check_beta(cfg.beta)?;
    train_full(dataset, partition, &cfg.training, Objective::Adversarial { beta: cfg.beta }, &cfg.adversary_hidden)
}

/// Cross entropy plus `beta` times the absolute soft equalized-odds gap of each batch.
pub fn train_eor(dataset: &Dataset, partition: &Partition, cfg: &BaselineConfig) -> Result<(Model, TrainLog)> {
    check_beta(cfg.beta)?;
    train_full(dataset, partition, &cfg.training, Objective::Eor { beta: cfg.beta }, &[])
}

pub fn train_baseline(dataset: &Dataset, partition: &Partition, cfg: &BaselineConfig) -> Result<(Model, TrainLog)> {
    match cfg.kind {
        BaselineKind::Adversarial => train_adversarial(dataset, partition, cfg),
        BaselineKind::Eor => train_eor(dataset, partition, cfg),
    }
}

/// Head retraining on top of a debiased (adversarial or EOR) backbone.
pub fn combine_debiased_encoder(backbone: &Model, dataset: &Dataset, partition: &Partition, cfg: &RnfStageConfig) -> Result<(Model, TrainLog)> {
    let (model, log) = train_rnf_head(backbone, dataset, partition, cfg)?;
    debug_assert!(model.same_layers_before(backbone, backbone.encoder_depth()));
    Ok((model, log))
}

/// Metrics of `model` on `indices`, using ground-truth groups.
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<MetricsRecord> {
    if indices.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let groups = dataset
        .groups_of(indices)
        .ok_or_else(|| Error::Input("evaluation split lacks the sensitive attribute".into()))?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].y).collect();
    let probs = predict_all(model, dataset, indices)?;
    MetricsRecord::from_probabilities(&probs, &labels, &groups, dataset.desired_label)
}

/// Everything Algorithm-style end-to-end runs need.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stage_one: StageOneConfig,
    pub gce: GceConfig,
    pub proxy: ProxyConfig,
    pub rnf: RnfStageConfig,
    pub baseline: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage_one: StageOneConfig::default(),
            gce: GceConfig { q: 0.6 },
            proxy: ProxyConfig::default(),
            rnf: RnfStageConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Copy with every component seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.stage_one.seed = seed;
        c.rnf.seed = seed;
        c.baseline.training.seed = seed;
        c
    }
}

/// Models produced by one full proxy-annotation run.
#[derive(Debug, Clone)]
pub struct RnfRun {
    pub teacher: Model,
    pub bias_amplified: Model,
    pub proxy: Vec<usize>,
    pub student: Model,
    pub dataset: Dataset,
}

/// Teacher, bias-amplified model, proxy annotation and head retraining.
pub fn run_rnf(dataset: &Dataset, partition: &Partition, cfg: &PipelineConfig) -> Result<RnfRun> {
    let (teacher, _) = train_stage_one(dataset, partition, &cfg.stage_one)?;
    let bias_cfg = StageOneConfig {
        gce: Some(cfg.gce),
        ..cfg.stage_one.clone()
    };
    let (bias_amplified, _) = train_stage_one(dataset, partition, &bias_cfg)?;
    let proxy = generate_proxy_annotations(&bias_amplified, dataset, &partition.train, &cfg.proxy)?;
    let mut annotated = dataset.clone();
    annotated.set_proxy(&partition.train, &proxy)?;
    let rnf = RnfStageConfig {
        annotation: AnnotationSource::Proxy,
        ..cfg.rnf.clone()
    };
    let (student, _) = train_rnf_head(&teacher, &annotated, partition, &rnf)?;
    Ok(RnfRun {
        teacher,
        bias_amplified,
        proxy,
        student,
        dataset: annotated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Rnf,
    RnfGt,
    Adversarial,
    Eor,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rnf => "rnf",
            Method::RnfGt => "rnf_gt",
            Method::Adversarial => "adversarial",
            Method::Eor => "eor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "rnf" => Method::Rnf,
            "rnf_gt" => Method::RnfGt,
            "adversarial" => Method::Adversarial,
            "eor" => Method::Eor,
            other => return Err(Error::config(format!("unknown method `{other}`"))),
        })
    }
}

/// One evaluated run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub q: Option<f64>,
    pub gamma: Option<f64>,
    pub temperature: Option<f64>,
    /// `Err` holds the message of an aborted run.
    pub outcome: std::result::Result<MetricsRecord, String>,
}

/// Aggregate of one grid point over seeds; undefined or failed runs are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub method: String,
    pub param: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_dp: Option<f64>,
    pub std_dp: Option<f64>,
    pub mean_eo: Option<f64>,
    pub std_eo: Option<f64>,
    /// Runs that completed.
    pub n: usize,
    pub excluded_dp: usize,
    pub excluded_eo: usize,
    pub failed: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

pub fn aggregate(method: &str, param: f64, records: &[&RunRecord]) -> CurvePoint {
    let ok: Vec<&MetricsRecord> = records.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let acc: Vec<f64> = ok.iter().map(|m| m.accuracy).collect();
    let dp: Vec<f64> = ok.iter().filter_map(|m| m.dp.value()).collect();
    let eo: Vec<f64> = ok.iter().filter_map(|m| m.delta_eo.value()).collect();
    let (mean_acc, std_acc) = mean_std(&acc).unwrap_or((f64::NAN, f64::NAN));
    let dp_stats = mean_std(&dp);
    let eo_stats = mean_std(&eo);
    CurvePoint {
        method: method.to_string(),
        param,
        mean_acc,
        std_acc,
        mean_dp: dp_stats.map(|s| s.0),
        std_dp: dp_stats.map(|s| s.1),
        mean_eo: eo_stats.map(|s| s.0),
        std_eo: eo_stats.map(|s| s.1),
        n: ok.len(),
        excluded_dp: ok.len() - dp.len(),
        excluded_eo: ok.len() - eo.len(),
        failed: records.len() - ok.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub method: Method,
    /// Values of alpha (RNF) or beta (baselines).
    pub grid: Vec<f64>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub curve: Vec<CurvePoint>,
}

/// Seed of the `index`-th run of a sweep.
pub fn run_seed(base: u64, index: usize) -> u64 {
    base ^ index as u64
}

fn sweep_one_seed(dataset: &Dataset, partition: &Partition, cfg: &SweepConfig, seed_index: usize) -> Vec<RunRecord> {
    let seed = run_seed(cfg.base_seed, seed_index);
    let pc = cfg.pipeline.with_seed(seed);
    let method = cfg.method;
    let record = |param: f64, outcome: std::result::Result<MetricsRecord, String>| {
        let is_rnf = matches!(method, Method::Rnf | Method::RnfGt);
        RunRecord {
            run_id: format!("{}-p{param}-s{seed}", method.name()),
            method: method.name().to_string(),
            seed,
            alpha: is_rnf.then_some(param),
            beta: (!is_rnf).then_some(param),
            q: (method == Method::Rnf).then_some(pc.gce.q),
            gamma: (method == Method::Rnf).then_some(pc.proxy.gamma),
            temperature: is_rnf.then_some(pc.rnf.loss.temperature),
            outcome,
        }
    };

    match method {
        Method::Rnf | Method::RnfGt => {
            // Stage one does not depend on alpha; share it across the grid.
            let prepared = (|| -> Result<(Model, Dataset, AnnotationSource)> {
                let (teacher, _) = train_stage_one(dataset, partition, &pc.stage_one)?;
                if method == Method::RnfGt {
                    return Ok((teacher, dataset.clone(), AnnotationSource::GroundTruth));
                }
                let bias_cfg = StageOneConfig {
                    gce: Some(pc.gce),
                    ..pc.stage_one.clone()
                };
                let (bias, _) = train_stage_one(dataset, partition, &bias_cfg)?;
                let proxy = generate_proxy_annotations(&bias, dataset, &partition.train, &pc.proxy)?;
                let mut annotated = dataset.clone();
                annotated.set_proxy(&partition.train, &proxy)?;
                Ok((teacher, annotated, AnnotationSource::Proxy))
            })();
            cfg.grid
                .iter()
                .map(|&alpha| {
                    let outcome = match &prepared {
                        Err(e) => Err(e.to_string()),
                        Ok((teacher, ds, source)) => {
                            let mut rnf = pc.rnf.clone();
                            rnf.loss.alpha = alpha;
                            rnf.annotation = *source;
                            train_rnf_head(teacher, ds, partition, &rnf)
                                .and_then(|(m, _)| evaluate(&m, ds, &partition.test))
                                .map_err(|e| e.to_string())
                        }
                    };
                    record(alpha, outcome)
                })
                .collect()
        }
        Method::Adversarial | Method::Eor => cfg
            .grid
            .iter()
            .map(|&beta| {
                let mut b = pc.baseline.clone();
                b.kind = if method == Method::Adversarial {
                    BaselineKind::Adversarial
                } else {
                    BaselineKind::Eor
                };
                b.beta = beta;
                let outcome = train_baseline(dataset, partition, &b)
                    .and_then(|(m, _)| evaluate(&m, dataset, &partition.test))
                    .map_err(|e| e.to_string());
                record(beta, outcome)
            })
            .collect(),
    }
}

/// Runs `n_seeds` independent pipelines per grid point (in parallel over
/// seeds) and averages their test metrics.
pub fn sweep(dataset: &Dataset, partition: &Partition, cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    if cfg.n_seeds == 0 {
        return Err(Error::config("sweep needs at least one seed"));
    }
    let per_seed: Vec<Vec<RunRecord>> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| sweep_one_seed(dataset, partition, cfg, s))
        .collect();
    // Order records grid-point-major for stable output.
    let mut records = Vec::with_capacity(cfg.grid.len() * cfg.n_seeds);
    for g in 0..cfg.grid.len() {
        for seed_records in &per_seed {
            records.push(seed_records[g].clone());
        }
    }
    let curve = cfg
        .grid
        .iter()
        .enumerate()
        .map(|(g, &param)| {
            let point: Vec<&RunRecord> = records[g * cfg.n_seeds..(g + 1) * cfg.n_seeds].iter().collect();
            aggregate(cfg.method.name(), param, &point)
        })
        .collect();
    Ok(SweepResult { records, curve })
}
