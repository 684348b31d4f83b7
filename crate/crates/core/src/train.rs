//! Loss, optimizer, split plans, the training loop and evaluation/ablation
//! reporting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::io::{Cohort, Diagnosis};
use crate::model::{preprocess_cohort, ModelState, PipelineConfig, PreppedSubject};
use crate::revrin::quantile;

// ---------------------------------------------------------------------------
// Outlier-weighted MSE
// ---------------------------------------------------------------------------

/// Squared errors on targets above the tau-quantile count `weight` times.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OwMseConfig {
    pub weight: f64,
    pub tau: f64,
}

impl Default for OwMseConfig {
    fn default() -> Self {
        OwMseConfig { weight: 20.0, tau: 0.9 }
    }
}

impl OwMseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 1.0) {
            return Err(Error::Train(format!("outlier weight {} must be >= 1", self.weight)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Train(format!("tau {} must be in [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Threshold fitted on training targets only, never on val/test.
pub fn fit_quantile_threshold(targets: &[f64], tau: f64) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Train("cannot fit a quantile on zero targets".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Train(format!("tau {tau} must be in [0, 1]")));
    }
    let mut sorted = targets.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Train("non-finite target in threshold fit".into()));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(quantile(&sorted, tau))
}

fn ow_weights(targets: &[f64], threshold: f64, weight: f64) -> Vec<f64> {
    targets
        .iter()
        .map(|&y| if y > threshold { weight } else { 1.0 })
        .collect()
}

/// Plain-value OW-MSE: mean over i of w_i * (pred_i - y_i)^2.
pub fn ow_mse_value(preds: &[f64], targets: &[f64], threshold: f64, weight: f64) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Train(format!(
            "loss over {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let w = ow_weights(targets, threshold, weight);
    Ok(preds
        .iter()
        .zip(targets)
        .zip(&w)
        .map(|((p, y), wi)| wi * (p - y) * (p - y))
        .sum::<f64>()
        / preds.len() as f64)
}

/// Differentiable OW-MSE over a prediction vector of shape [n].
pub fn ow_mse_loss(
    tape: &mut Tape,
    preds: &Tensor,
    targets: &[f64],
    threshold: f64,
    weight: f64,
) -> Result<Tensor> {
    let shape = preds.shape();
    if shape.len() != 1 || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::Train(format!(
            "loss expects predictions [n] matching {} targets, got {shape:?}",
            targets.len()
        )));
    }
    let y = Tensor::new(vec![targets.len()], targets.to_vec(), false)?;
    let w = Tensor::new(vec![targets.len()], ow_weights(targets, threshold, weight), false)?;
    let diff = tape.sub(preds, &y)?;
    let sq = tape.power(&diff, 2.0)?;
    let weighted = tape.mul(&sq, &w)?;
    tape.mean(&weighted)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place. Every parameter must carry a
/// gradient buffer; a missing one means backward() was never run.
pub fn adam_step(params: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Train(format!(
            "optimizer state covers {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.iter().enumerate() {
        let grad = p
            .grad()
            .ok_or_else(|| Error::Train("parameter has no gradient buffer".into()))?;
        if grad.len() != state.m[i].len() {
            return Err(Error::Train("optimizer state shape drifted".into()));
        }
        let mut data = p.data();
        for (j, g) in grad.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Train(format!("non-finite gradient at tensor {i} index {j}")));
            }
            state.m[i][j] = cfg.beta1 * state.m[i][j] + (1.0 - cfg.beta1) * g;
            state.v[i][j] = cfg.beta2 * state.v[i][j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i][j] / bc1;
            let v_hat = state.v[i][j] / bc2;
            data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.set_data(&data);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Split plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_frac: f64,
    pub val_frac: f64,
    pub n_repeats: usize,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            train_frac: 0.30,
            val_frac: 0.30,
            n_repeats: 5,
            seed: 42,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0)
        {
            return Err(Error::Train(format!(
                "split fractions train={} val={} must be positive and sum below 1",
                self.train_frac, self.val_frac
            )));
        }
        if self.n_repeats == 0 {
            return Err(Error::Train("n_repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Index sets into the cohort; pairwise disjoint, union = everyone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder split of `n` into three parts proportional to the
/// fractions, biased toward whichever part is globally furthest behind.
fn apportion(n: usize, fracs: [f64; 3], deficits: [f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut parts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut rest = n - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // Rank by fractional remainder, then by global deficit.
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - parts[a] as f64 + deficits[a] * 1e-6;
        let rb = ideal[b] - parts[b] as f64 + deficits[b] * 1e-6;
        rb.partial_cmp(&ra).unwrap()
    });
    for &k in &order {
        if rest == 0 {
            break;
        }
        parts[k] += 1;
        rest -= 1;
    }
    [parts[0], parts[1], parts[2]]
}

/// Stratified, subject-disjoint split for one repeat. Groups of 3+ subjects
/// contribute at least one subject to every split; when the pooled impaired
/// set (MCI plus IMP) has 3+ subjects, every split keeps at least one.
pub fn split_cohort(diagnoses: &[Diagnosis], plan: &SplitPlan, repeat: usize) -> Result<Split> {
    plan.validate()?;
    let n = diagnoses.len();
    if n < 3 {
        return Err(Error::Train(format!("cannot three-way split {n} subjects")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(repeat as u64 * 7919));
    let fracs = [plan.train_frac, plan.val_frac, 1.0 - plan.train_frac - plan.val_frac];
    let mut buckets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut assigned = [0.0f64; 3];
    for diag in [Diagnosis::Normal, Diagnosis::Mci, Diagnosis::Imp] {
        let mut members: Vec<usize> = (0..n).filter(|&i| diagnoses[i] == diag).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let total_so_far: f64 = assigned.iter().sum();
        let deficits: [f64; 3] = std::array::from_fn(|k| fracs[k] * total_so_far - assigned[k]);
        let mut counts = apportion(members.len(), fracs, deficits);
        if members.len() >= 3 {
            // Guarantee representation in every split.
            while counts.iter().any(|&c| c == 0) {
                let zero = counts.iter().position(|&c| c == 0).unwrap();
                let donor = (0..3).max_by_key(|&k| counts[k]).unwrap();
                counts[donor] -= 1;
                counts[zero] += 1;
            }
        }
        let mut cursor = 0;
        for k in 0..3 {
            buckets[k].extend(&members[cursor..cursor + counts[k]]);
            cursor += counts[k];
            assigned[k] += counts[k] as f64;
        }
    }
    // Pooled impaired coverage: with 3+ impaired subjects every split gets
    // one, via a size-preserving swap with a Normal subject.
    let impaired = |i: &usize| diagnoses[*i].is_impaired();
    let total_impaired = (0..n).filter(|i| diagnoses[*i].is_impaired()).count();
    if total_impaired >= 3 {
        for k in 0..3 {
            if buckets[k].iter().any(impaired) {
                continue;
            }
            let donor = (0..3)
                .filter(|&d| d != k)
                .max_by_key(|&d| buckets[d].iter().filter(|i| impaired(i)).count())
                .unwrap();
            if buckets[donor].iter().filter(|i| impaired(i)).count() < 2 {
                continue;
            }
            let take_pos = buckets[donor].iter().position(impaired).unwrap();
            let moved = buckets[donor].remove(take_pos);
            if let Some(give_pos) = buckets[k].iter().position(|&i| !diagnoses[i].is_impaired()) {
                let back = buckets[k].remove(give_pos);
                buckets[donor].push(back);
            }
            buckets[k].push(moved);
        }
    }
    let [train, val, test] = buckets;
    Ok(Split { train, val, test })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    OwMse,
    Mse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub ow_mse: OwMseConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            adam: AdamConfig::default(),
            loss: LossKind::OwMse,
            ow_mse: OwMseConfig::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    /// Threshold used by the outlier weighting, fitted on training targets.
    pub threshold: f64,
}

fn effective_threshold(cfg: &TrainConfig, train_targets: &[f64]) -> Result<(f64, f64)> {
    match cfg.loss {
        LossKind::Mse => Ok((f64::INFINITY, 1.0)),
        LossKind::OwMse => {
            cfg.ow_mse.validate()?;
            let thr = fit_quantile_threshold(train_targets, cfg.ow_mse.tau)?;
            Ok((thr, cfg.ow_mse.weight))
        }
    }
}

fn batch_predictions(
    tape: &mut Tape,
    model: &ModelState,
    subjects: &[&PreppedSubject],
) -> Result<Tensor> {
    let mut preds = Vec::with_capacity(subjects.len());
    for s in subjects {
        let p = model.forward(tape, &s.series)?;
        preds.push(tape.reshape(&p, vec![1, 1])?);
    }
    let refs: Vec<&Tensor> = preds.iter().collect();
    let col = tape.concat(&refs)?;
    tape.reshape(&col, vec![subjects.len()])
}

fn loss_value_for(
    model: &ModelState,
    subjects: &[&PreppedSubject],
    threshold: f64,
    weight: f64,
) -> Result<f64> {
    let preds: Result<Vec<f64>> = subjects.iter().map(|s| model.predict(&s.series)).collect();
    let targets: Vec<f64> = subjects.iter().map(|s| s.target).collect();
    ow_mse_value(&preds?, &targets, threshold, weight)
}

/// Full-batch training on the train split, selecting the epoch with the best
/// validation loss. Only the task-module tensors move; the backbone and
/// vocabulary checksums are asserted unchanged.
pub fn train_model(
    model: &mut ModelState,
    prepped: &[PreppedSubject],
    split: &Split,
    cfg: &TrainConfig,
) -> Result<History> {
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Train("train and val splits must be non-empty".into()));
    }
    let train_set: Vec<&PreppedSubject> = split.train.iter().map(|&i| &prepped[i]).collect();
    let val_set: Vec<&PreppedSubject> = split.val.iter().map(|&i| &prepped[i]).collect();
    let train_targets: Vec<f64> = train_set.iter().map(|s| s.target).collect();
    let (threshold, weight) = effective_threshold(cfg, &train_targets)?;

    let frozen_before: Vec<(String, u64)> = model
        .frozen_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.checksum()))
        .collect();

    // Warm-start the output bias at the weighted mean of the training
    // targets: the best constant under the loss. Epochs then go to learning
    // structure instead of walking the bias toward the mean, and the
    // validation curve only dips for genuine signal.
    let w = ow_weights(&train_targets, threshold, weight);
    let weighted_mean =
        train_targets.iter().zip(&w).map(|(y, wi)| wi * y).sum::<f64>() / w.iter().sum::<f64>();
    model.head_bias.set_data(&[weighted_mean]);

    let named = model.trainable_tensors();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(&params);

    let mut history = History {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        threshold,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params: Vec<Vec<f64>> = params.iter().map(|p| p.data()).collect();

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let preds = batch_predictions(&mut tape, model, &train_set)?;
        let loss = ow_mse_loss(&mut tape, &preds, &train_targets, threshold, weight)?;
        let train_loss = loss.item();
        for p in &params {
            p.zero_grad();
        }
        tape.backward(&loss)?;
        adam_step(&params, &mut adam, &cfg.adam)?;

        let val_loss = loss_value_for(model, &val_set, threshold, weight)?;
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            history.best_epoch = epoch;
            best_params = params.iter().map(|p| p.data()).collect();
        }
    }
    for (p, snap) in params.iter().zip(&best_params) {
        p.set_data(snap);
    }

    for (name, before) in frozen_before {
        let after = model
            .frozen_tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.checksum())
            .unwrap();
        if after != before {
            return Err(Error::Train(format!("frozen tensor {name} changed during training")));
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub diagnosis: Diagnosis,
    pub target: f64,
    pub prediction: f64,
}

/// MAE split into Normal vs pooled impaired (MCI plus IMP); a group absent
/// from the split reports no value rather than zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub mae_normal: Option<f64>,
    pub mae_impaired: Option<f64>,
    pub mae_overall: f64,
    pub predictions: Vec<SubjectPrediction>,
}

pub fn evaluate(model: &ModelState, subjects: &[&PreppedSubject]) -> Result<Evaluation> {
    if subjects.is_empty() {
        return Err(Error::Train("evaluation over zero subjects".into()));
    }
    let mut predictions = Vec::with_capacity(subjects.len());
    for s in subjects {
        predictions.push(SubjectPrediction {
            subject_id: s.subject_id.clone(),
            diagnosis: s.diagnosis,
            target: s.target,
            prediction: model.predict(&s.series)?,
        });
    }
    let mae = |keep: &dyn Fn(&SubjectPrediction) -> bool| -> Option<f64> {
        let errs: Vec<f64> = predictions
            .iter()
            .filter(|p| keep(p))
            .map(|p| (p.prediction - p.target).abs())
            .collect();
        if errs.is_empty() {
            None
        } else {
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
    };
    Ok(Evaluation {
        mae_normal: mae(&|p| !p.diagnosis.is_impaired()),
        mae_impaired: mae(&|p| p.diagnosis.is_impaired()),
        mae_overall: mae(&|_| true).unwrap(),
        predictions,
    })
}

/// "0.6814 ± 0.1155" style mean/std over repeats (population std).
pub fn format_mean_std(values: &[f64]) -> String {
    if values.is_empty() {
        return "-".into();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    format!("{:.4} \u{b1} {:.4}", mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub history: History,
    pub test: Evaluation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub repeats: Vec<RepeatResult>,
    pub mae_normal_summary: String,
    pub mae_impaired_summary: String,
    pub mae_overall_summary: String,
}

fn summarize(repeats: &[RepeatResult]) -> ExperimentReport {
    let collect = |f: &dyn Fn(&Evaluation) -> Option<f64>| -> Vec<f64> {
        repeats.iter().filter_map(|r| f(&r.test)).collect()
    };
    ExperimentReport {
        mae_normal_summary: format_mean_std(&collect(&|e| e.mae_normal)),
        mae_impaired_summary: format_mean_std(&collect(&|e| e.mae_impaired)),
        mae_overall_summary: format_mean_std(&collect(&|e| Some(e.mae_overall))),
        repeats: repeats.to_vec(),
    }
}

/// Train/evaluate over every repeat of the split plan with a fresh model per
/// repeat. Preprocessing is shared; the loss threshold is refitted per split.
pub fn run_experiment(
    cohort: &Cohort,
    pipeline: &PipelineConfig,
    train_cfg: &TrainConfig,
    plan: &SplitPlan,
) -> Result<ExperimentReport> {
    let prepped = preprocess_cohort(cohort, pipeline)?;
    run_experiment_prepped(&prepped, pipeline, train_cfg, plan)
}

pub fn run_experiment_prepped(
    prepped: &[PreppedSubject],
    pipeline: &PipelineConfig,
    train_cfg: &TrainConfig,
    plan: &SplitPlan,
) -> Result<ExperimentReport> {
    plan.validate()?;
    let diagnoses: Vec<Diagnosis> = prepped.iter().map(|p| p.diagnosis).collect();
    let steps = prepped
        .first()
        .map(|p| p.series.n_steps())
        .ok_or_else(|| Error::Train("empty cohort".into()))?;
    let n_features = prepped[0].series.n_features();
    let mut repeats = Vec::with_capacity(plan.n_repeats);
    for repeat in 0..plan.n_repeats {
        let split = split_cohort(&diagnoses, plan, repeat)?;
        let mut model = ModelState::init(
            pipeline,
            n_features,
            steps,
            train_cfg.seed.wrapping_add(repeat as u64 * 1009),
        )?;
        let history = train_model(&mut model, prepped, &split, train_cfg)?;
        let test_set: Vec<&PreppedSubject> = split.test.iter().map(|&i| &prepped[i]).collect();
        let test = evaluate(&model, &test_set)?;
        repeats.push(RepeatResult { repeat, history, test });
    }
    Ok(summarize(&repeats))
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// One named deviation from the default configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigDelta {
    Default,
    BackboneLayers(usize),
    AttnHeads(usize),
    Prototypes(usize),
    RevrinOff,
    OutlierWeight(f64),
}

impl ConfigDelta {
    /// Cell names: Default, LL{6,8,12,16}, AH{2,4,6,8}, TP{50,100,500},
    /// NoRevRIN, W{10,20}.
    pub fn parse(name: &str) -> Result<ConfigDelta> {
        let bad = || Error::Train(format!("unknown ablation cell {name:?}"));
        if name == "Default" {
            return Ok(ConfigDelta::Default);
        }
        if name == "NoRevRIN" {
            return Ok(ConfigDelta::RevrinOff);
        }
        if let Some(rest) = name.strip_prefix("LL") {
            let k: usize = rest.parse().map_err(|_| bad())?;
            if ![6, 8, 12, 16].contains(&k) {
                return Err(bad());
            }
            return Ok(ConfigDelta::BackboneLayers(k));
        }
        if let Some(rest) = name.strip_prefix("AH") {
            let k: usize = rest.parse().map_err(|_| bad())?;
            if ![2, 4, 6, 8].contains(&k) {
                return Err(bad());
            }
            return Ok(ConfigDelta::AttnHeads(k));
        }
        if let Some(rest) = name.strip_prefix("TP") {
            let k: usize = rest.parse().map_err(|_| bad())?;
            if ![50, 100, 500].contains(&k) {
                return Err(bad());
            }
            return Ok(ConfigDelta::Prototypes(k));
        }
        if let Some(rest) = name.strip_prefix('W') {
            let k: usize = rest.parse().map_err(|_| bad())?;
            if ![10, 20].contains(&k) {
                return Err(bad());
            }
            return Ok(ConfigDelta::OutlierWeight(k as f64));
        }
        Err(bad())
    }

    pub fn name(&self) -> String {
        match self {
            ConfigDelta::Default => "Default".into(),
            ConfigDelta::BackboneLayers(k) => format!("LL{k}"),
            ConfigDelta::AttnHeads(k) => format!("AH{k}"),
            ConfigDelta::Prototypes(k) => format!("TP{k}"),
            ConfigDelta::RevrinOff => "NoRevRIN".into(),
            ConfigDelta::OutlierWeight(w) => format!("W{}", *w as usize),
        }
    }

    pub fn apply(&self, pipeline: &mut PipelineConfig, train_cfg: &mut TrainConfig) -> Result<()> {
        match *self {
            ConfigDelta::Default => {}
            ConfigDelta::BackboneLayers(k) => pipeline.backbone.n_layers = k,
            ConfigDelta::AttnHeads(k) => pipeline.attn_heads = k,
            ConfigDelta::Prototypes(k) => pipeline.n_prototypes = k,
            ConfigDelta::RevrinOff => pipeline.revrin = false,
            ConfigDelta::OutlierWeight(w) => train_cfg.ow_mse.weight = w,
        }
        pipeline.validate()
    }
}

/// The default comparison grid: baseline plus one-factor-at-a-time cells.
pub fn default_ablation_grid() -> Vec<ConfigDelta> {
    vec![
        ConfigDelta::Default,
        ConfigDelta::BackboneLayers(6),
        ConfigDelta::AttnHeads(4),
        ConfigDelta::Prototypes(500),
        ConfigDelta::RevrinOff,
        ConfigDelta::OutlierWeight(10.0),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// Repeat index, or "mean" for the aggregate row.
    pub repeat: String,
    pub cell: String,
    pub group: String,
    pub mae: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: BTreeMap<String, BTreeMap<String, String>>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,cell,group,mae,std\n");
        for r in &self.rows {
            let std = r.std.map_or(String::new(), |s| format!("{s}"));
            out.push_str(&format!("{},{},{},{},{}\n", r.repeat, r.cell, r.group, r.mae, std));
        }
        out
    }
}

/// Run every cell of the grid over the same split plan; preprocessing is
/// recomputed per cell because RevRIN participates in the grid.
pub fn run_ablation(
    cohort: &Cohort,
    base_pipeline: &PipelineConfig,
    base_train: &TrainConfig,
    plan: &SplitPlan,
    grid: &[ConfigDelta],
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::Train("empty ablation grid".into()));
    }
    let mut rows = Vec::new();
    let mut summaries: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for delta in grid {
        let mut pipeline = base_pipeline.clone();
        let mut train_cfg = base_train.clone();
        delta.apply(&mut pipeline, &mut train_cfg)?;
        let report = run_experiment(cohort, &pipeline, &train_cfg, plan)?;
        let cell = delta.name();
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &report.repeats {
            let entries: [(&str, Option<f64>); 3] = [
                ("normal", r.test.mae_normal),
                ("impaired", r.test.mae_impaired),
                ("overall", Some(r.test.mae_overall)),
            ];
            for (group, value) in entries {
                if let Some(v) = value {
                    rows.push(AblationRow {
                        repeat: r.repeat.to_string(),
                        cell: cell.clone(),
                        group: group.into(),
                        mae: v,
                        std: None,
                    });
                    groups.entry(group).or_default().push(v);
                }
            }
        }
        let mut cell_summary = BTreeMap::new();
        for (group, values) in groups {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            rows.push(AblationRow {
                repeat: "mean".into(),
                cell: cell.clone(),
                group: group.into(),
                mae: mean,
                std: Some(var.sqrt()),
            });
            cell_summary.insert(group.to_string(), format_mean_std(&values));
        }
        summaries.insert(cell, cell_summary);
    }
    Ok(AblationReport { rows, summaries })
}
