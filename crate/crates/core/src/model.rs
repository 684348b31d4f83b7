//! End-to-end model assembly: preprocessing, parameter partition, forward
//! pass and checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::backbone::{backbone_forward, build_backbone, BackboneConfig, FrozenWeights};
use crate::connectome::sliding_window_connectomes;
use crate::distance::{distance_series, DistanceSeries, Metric};
use crate::error::{Error, Result};
use crate::io::{Cohort, Diagnosis};
use crate::patch::{embed_patches, make_patches, PatchConfig, PatchEmbedding};
use crate::reprogram::{concat_features, reprogram_patches, CrossAttention, PrototypeBank};
use crate::revrin::{revrin_forward, RevrinState};
use crate::tensorio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Linear head over the flattened hidden states.
    Flatten,
    /// Linear head over the final token's hidden state.
    LastToken,
}

/// Everything needed to turn an ROI series into a prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window_length: usize,
    pub window_stride: usize,
    pub metrics: Vec<Metric>,
    pub wasserstein_p: f64,
    pub revrin: bool,
    pub patch: PatchConfig,
    pub vocab_size: usize,
    pub n_prototypes: usize,
    pub attn_heads: usize,
    pub backbone: BackboneConfig,
    pub pooling: Pooling,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_length: 20,
            window_stride: 5,
            metrics: Metric::ALL.to_vec(),
            wasserstein_p: 2.0,
            revrin: true,
            patch: PatchConfig::default(),
            vocab_size: 1000,
            n_prototypes: 50,
            attn_heads: 8,
            backbone: BackboneConfig::default(),
            pooling: Pooling::Flatten,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.backbone.validate()?;
        if self.metrics.is_empty() {
            return Err(Error::Train("metric list is empty".into()));
        }
        if self.window_length < 2 {
            return Err(Error::Train("window_length must be >= 2".into()));
        }
        if self.window_stride == 0 {
            return Err(Error::Train("window_stride must be >= 1".into()));
        }
        if self.attn_heads == 0 || self.backbone.d_h % self.attn_heads != 0 {
            return Err(Error::Train(format!(
                "reprogramming heads K={} must divide d_h={}",
                self.attn_heads, self.backbone.d_h
            )));
        }
        if self.n_prototypes == 0 || self.n_prototypes > self.vocab_size {
            return Err(Error::Train(format!(
                "text prototypes V'={} must be in 1..=V={}",
                self.n_prototypes, self.vocab_size
            )));
        }
        if self.wasserstein_p < 1.0 {
            return Err(Error::Train("wasserstein_p must be >= 1".into()));
        }
        Ok(())
    }
}

/// One subject after the non-differentiable front end: distance series,
/// normalized when RevRIN is on.
#[derive(Debug, Clone)]
pub struct PreppedSubject {
    pub subject_id: String,
    pub diagnosis: Diagnosis,
    pub target: f64,
    pub series: DistanceSeries,
    pub revrin: Option<RevrinState>,
}

/// Run connectome extraction and distance computation for a whole cohort,
/// truncating every subject to the cohort-minimum step count so that the
/// token count M is fixed before patching.
pub fn preprocess_cohort(cohort: &Cohort, cfg: &PipelineConfig) -> Result<Vec<PreppedSubject>> {
    cfg.validate()?;
    let mut raw: Vec<(usize, DistanceSeries)> = Vec::with_capacity(cohort.len());
    for (idx, record) in cohort.records.iter().enumerate() {
        let seq = sliding_window_connectomes(record, cfg.window_length, cfg.window_stride)
            .map_err(|e| Error::Train(format!("subject {}: {e}", record.subject_id)))?;
        let series = distance_series(&seq, &cfg.metrics, cfg.wasserstein_p)
            .map_err(|e| Error::Train(format!("subject {}: {e}", record.subject_id)))?;
        raw.push((idx, series));
    }
    let min_t = raw
        .iter()
        .map(|(_, s)| s.n_steps())
        .min()
        .ok_or_else(|| Error::Train("empty cohort".into()))?;
    let mut out = Vec::with_capacity(raw.len());
    for (idx, mut series) in raw {
        series.truncate(min_t);
        let record = &cohort.records[idx];
        let (series, revrin) = if cfg.revrin {
            let (normed, state) = revrin_forward(&series)
                .map_err(|e| Error::Train(format!("subject {}: {e}", record.subject_id)))?;
            (normed, Some(state))
        } else {
            (series, None)
        };
        out.push(PreppedSubject {
            subject_id: record.subject_id.clone(),
            diagnosis: record.diagnosis,
            target: record.target,
            series,
            revrin,
        });
    }
    Ok(out)
}

/// Partitioned parameter store: frozen backbone and vocabulary tensors plus
/// the three trainable task modules.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: PipelineConfig,
    pub n_features: usize,
    pub patches_per_feature: usize,
    pub patch_embedding: PatchEmbedding,
    pub bank: PrototypeBank,
    pub attention: CrossAttention,
    pub backbone: FrozenWeights,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ModelState {
    /// Build a fresh model; `series_steps` is the (cohort-minimum) length of
    /// the distance series rows.
    pub fn init(cfg: &PipelineConfig, n_features: usize, series_steps: usize, seed: u64) -> Result<ModelState> {
        cfg.validate()?;
        let m = cfg.patch.patch_count(series_steps)?;
        let d_h = cfg.backbone.d_h;
        let total_tokens = n_features * m;
        let head_in = match cfg.pooling {
            Pooling::Flatten => total_tokens * d_h,
            Pooling::LastToken => d_h,
        };
        // Zero head init: the bias absorbs the cohort mean in the first few
        // steps while the weights only ever encode residual structure, which
        // keeps early predictions from swinging with the random projections.
        let head_weight = Tensor::zeros(vec![head_in, 1], true);
        let head_bias = Tensor::zeros(vec![1], true);
        Ok(ModelState {
            cfg: cfg.clone(),
            n_features,
            patches_per_feature: m,
            patch_embedding: PatchEmbedding::init(&cfg.patch, seed.wrapping_add(1)),
            bank: PrototypeBank::init(cfg.vocab_size, cfg.n_prototypes, d_h, seed.wrapping_add(2))?,
            attention: CrossAttention::init(cfg.patch.embed_dim, d_h, cfg.attn_heads, seed.wrapping_add(3))?,
            backbone: build_backbone(&cfg.backbone, seed.wrapping_add(4))?,
            head_weight,
            head_bias,
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.n_features * self.patches_per_feature
    }

    /// Forward pass for one subject; returns a scalar prediction tensor.
    pub fn forward(&self, tape: &mut Tape, series: &DistanceSeries) -> Result<Tensor> {
        if series.n_features() != self.n_features {
            return Err(Error::Train(format!(
                "series has {} features, model expects {}",
                series.n_features(),
                self.n_features
            )));
        }
        let mut token_seqs = Vec::with_capacity(self.n_features);
        for row in &series.values {
            let patches = make_patches(row, &self.cfg.patch)?;
            let embedded = embed_patches(tape, &patches, &self.patch_embedding)?;
            let tokens = reprogram_patches(tape, &embedded, &self.bank, &self.attention)?;
            token_seqs.push(tokens);
        }
        let all_tokens = concat_features(tape, &token_seqs)?;
        let hidden = backbone_forward(tape, &all_tokens, &self.backbone)?;
        let pooled = match self.cfg.pooling {
            Pooling::Flatten => tape.reshape(&hidden, vec![1, self.total_tokens() * self.cfg.backbone.d_h])?,
            Pooling::LastToken => {
                let rows = hidden.shape()[0];
                tape.slice(&hidden, 0, rows - 1, rows)?
            }
        };
        let projected = tape.matmul(&pooled, &self.head_weight)?;
        let flat = tape.reshape(&projected, vec![1])?;
        tape.add(&flat, &self.head_bias)
    }

    /// Prediction without gradient bookkeeping.
    pub fn predict(&self, series: &DistanceSeries) -> Result<f64> {
        let mut tape = Tape::new();
        Ok(self.forward(&mut tape, series)?.item())
    }

    /// The exact set of tensors training may update: patch embedding,
    /// reprogramming module, output head.
    pub fn trainable_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("patch_embedding.weight".into(), self.patch_embedding.weight.clone()),
            ("patch_embedding.bias".into(), self.patch_embedding.bias.clone()),
            ("reprogram.prototype_map".into(), self.bank.prototype_map.clone()),
            ("reprogram.wq".into(), self.attention.wq.clone()),
            ("reprogram.wk".into(), self.attention.wk.clone()),
            ("reprogram.wv".into(), self.attention.wv.clone()),
            ("reprogram.wo".into(), self.attention.wo.clone()),
            ("head.weight".into(), self.head_weight.clone()),
            ("head.bias".into(), self.head_bias.clone()),
        ]
    }

    pub fn frozen_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .backbone
            .all_tensors()
            .into_iter()
            .map(|(name, t)| (format!("backbone.{name}"), t.clone()))
            .collect();
        out.push(("reprogram.vocab_embeddings".into(), self.bank.vocab_embeddings.clone()));
        out
    }

    pub fn checksums(&self) -> BTreeMap<String, u64> {
        self.trainable_tensors()
            .into_iter()
            .chain(self.frozen_tensors())
            .map(|(name, t)| (name, t.checksum()))
            .collect()
    }

    fn all_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v = self.trainable_tensors();
        v.extend(self.frozen_tensors());
        v
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    pipeline: PipelineConfig,
    n_features: usize,
    series_steps_hint: usize,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Checkpoint directory layout: config.json, tensors.bin, revrin.json.
pub fn save_checkpoint(
    model: &ModelState,
    revrin_states: &BTreeMap<String, RevrinState>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tensors = model.all_named_tensors();
    let meta = CheckpointMeta {
        pipeline: model.cfg.clone(),
        n_features: model.n_features,
        series_steps_hint: (model.patches_per_feature - 1) * model.cfg.patch.stride
            + model.cfg.patch.patch_length,
        tensors: tensors.iter().map(|(n, t)| (n.clone(), t.shape())).collect(),
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("tensors.bin"))?);
    for (_, t) in &tensors {
        let shape = t.shape();
        let (rows, cols) = if shape.len() == 2 { (shape[0], shape[1]) } else { (shape[0], 1) };
        tensorio::write_matrix(&mut f, rows, cols, &t.data())?;
    }
    use std::io::Write;
    f.flush()?;
    std::fs::write(
        dir.join("revrin.json"),
        serde_json::to_string_pretty(revrin_states)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, BTreeMap<String, RevrinState>)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let mut model = ModelState::init(&meta.pipeline, meta.n_features, meta.series_steps_hint, 0)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(dir.join("tensors.bin"))?);
    let live: BTreeMap<String, Tensor> = model.all_named_tensors().into_iter().collect();
    for (name, shape) in &meta.tensors {
        let (rows, cols, data) = tensorio::read_matrix(&mut f)?;
        let expect = if shape.len() == 2 { (shape[0], shape[1]) } else { (shape[0], 1) };
        if (rows, cols) != expect {
            return Err(Error::Train(format!(
                "checkpoint tensor {name}: file has {rows}x{cols}, manifest says {shape:?}"
            )));
        }
        let t = live.get(name).ok_or_else(|| {
            Error::Train(format!("checkpoint tensor {name} not present in model"))
        })?;
        t.set_data(&data);
    }
    // Head input width depends on patch count; re-derive from manifest.
    let head_shape = meta
        .tensors
        .iter()
        .find(|(n, _)| n == "head.weight")
        .map(|(_, s)| s.clone())
        .ok_or_else(|| Error::Train("checkpoint missing head.weight".into()))?;
    if model.head_weight.shape() != head_shape {
        return Err(Error::Train(format!(
            "checkpoint head shape {head_shape:?} does not match rebuilt model {:?}",
            model.head_weight.shape()
        )));
    }
    model.n_features = meta.n_features;
    let revrin_states: BTreeMap<String, RevrinState> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("revrin.json"))?)?;
    Ok((model, revrin_states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic_cohort, SyntheticSpec};

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            window_length: 10,
            window_stride: 5,
            metrics: vec![Metric::Frobenius, Metric::Wass1],
            patch: PatchConfig {
                patch_length: 4,
                stride: 2,
                embed_dim: 4,
            },
            vocab_size: 40,
            n_prototypes: 6,
            attn_heads: 2,
            backbone: BackboneConfig {
                n_layers: 1,
                d_h: 8,
                n_attn_heads: 2,
                d_ff: 16,
                causal: true,
                sinusoidal_pos: false,
            },
            ..Default::default()
        }
    }

    fn tiny_cohort() -> Cohort {
        generate_synthetic_cohort(&SyntheticSpec {
            n_normal: 4,
            n_mci: 1,
            n_imp: 1,
            n_rois: 6,
            n_timepoints: 80,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn shape_contract_through_pipeline() {
        let cfg = tiny_cfg();
        let cohort = tiny_cohort();
        let prepped = preprocess_cohort(&cohort, &cfg).unwrap();
        // 80 timepoints, W=10, stride 5 -> 15 windows -> T = 14 steps.
        assert_eq!(prepped[0].series.n_steps(), 14);
        let model = ModelState::init(&cfg, 2, 14, 7).unwrap();
        // m = (14-4)/2 + 1 = 6, M = 2*6 = 12.
        assert_eq!(model.patches_per_feature, 6);
        assert_eq!(model.total_tokens(), 12);
        let pred = model.predict(&prepped[0].series).unwrap();
        assert!(pred.is_finite());
    }

    #[test]
    fn parameter_partition_is_exact() {
        let model = ModelState::init(&tiny_cfg(), 2, 14, 7).unwrap();
        for (name, t) in model.trainable_tensors() {
            assert!(t.requires_grad(), "{name} should be trainable");
        }
        for (name, t) in model.frozen_tensors() {
            assert!(!t.requires_grad(), "{name} should be frozen");
        }
        assert_eq!(model.trainable_tensors().len(), 9);
    }

    #[test]
    fn invalid_cross_field_configs_rejected() {
        let mut cfg = tiny_cfg();
        cfg.attn_heads = 3; // does not divide d_h = 8
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.patch.stride = 9; // > L
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.n_prototypes = 100; // > vocab
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = tiny_cfg();
        let cohort = tiny_cohort();
        let prepped = preprocess_cohort(&cohort, &cfg).unwrap();
        let model = ModelState::init(&cfg, 2, prepped[0].series.n_steps(), 13).unwrap();
        let mut revrin_states = BTreeMap::new();
        for p in &prepped {
            if let Some(state) = &p.revrin {
                revrin_states.insert(p.subject_id.clone(), state.clone());
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &revrin_states, dir.path()).unwrap();
        let (loaded, states) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(states.len(), revrin_states.len());
        let before = model.checksums();
        let after = loaded.checksums();
        assert_eq!(before, after);
        let a = model.predict(&prepped[0].series).unwrap();
        let b = loaded.predict(&prepped[0].series).unwrap();
        assert_eq!(a, b);
    }
}
