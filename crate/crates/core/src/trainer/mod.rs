//! Losses, the training loop, and evaluation.
//!
//! For the two-head ensemble every batch records three losses on one tape:
//!
//! ```text
//! l_head1    = mean (y1 - label)^2
//! l_head2    = mean (y2 - label)^2
//! l_ensemble = 1/2 * mean (y_ens - label)^2,   y_ens = (y1 + y2) / 2
//! l_total    = w1 * l_head1 + w2 * l_head2 + w3 * l_ensemble
//! ```
//!
//! A single-head model trains on its own MSE. One optimizer step runs per
//! batch: backward, global-norm clipping, then Adam at the OneCycle rate for
//! that step.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BundleSet, EmbeddingBundle, MutationRecord, TrackSet};
use crate::error::{Error, Result};
use crate::heads::{Architecture, Model, ModelSpec, ProjectionMode, DEFAULT_LAYERNORM_EPS};
use crate::math::{GradMap, GradTape, NodeId, ParamBinding};
use crate::metrics::MetricsReport;
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState, ClipConfig, OneCycleSchedule};

/// Weights of the three ensemble loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub head1: f64,
    pub head2: f64,
    pub ensemble: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            head1: 1.0,
            head2: 1.0,
            ensemble: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub architecture: Architecture,
    pub tracks: TrackSet,
    pub projection: ProjectionMode,
    pub d_proj: usize,
    pub layernorm_eps: f64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// Reshuffle training samples every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-5,
            epochs: 10,
            batch_size: 8,
            clip_norm: 0.1,
            seed: 0,
            architecture: Architecture::Ensemble,
            tracks: TrackSet::Seq,
            projection: ProjectionMode::Learned,
            d_proj: 128,
            layernorm_eps: DEFAULT_LAYERNORM_EPS,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return Err(Error::config("max_lr must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.d_proj == 0 {
            return Err(Error::config("d_proj must be positive"));
        }
        let w = self.loss_weights;
        if [w.head1, w.head2, w.ensemble].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        self.adam.validate()?;
        let mut probe = self.schedule(2);
        probe.total_steps = 2;
        probe.validate()
    }

    pub fn model_spec(&self, d_raw: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture,
            tracks: self.tracks,
            projection: self.projection,
            d_raw,
            d_proj: if self.projection == ProjectionMode::Identity { d_raw } else { self.d_proj },
            layernorm_eps: self.layernorm_eps,
        }
    }

    pub fn schedule(&self, total_steps: usize) -> OneCycleSchedule {
        OneCycleSchedule {
            max_lr: self.max_lr,
            total_steps,
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Loss components for one sample or one batch, in (°C)².
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_head1: f64,
    pub l_head2: f64,
    pub l_ensemble: f64,
    pub l_total: f64,
}

/// Per-sample losses under unit weights.
pub fn compute_losses(y1: f64, y2: f64, y_ens: f64, label: f64) -> Result<LossBreakdown> {
    compute_losses_weighted(y1, y2, y_ens, label, LossWeights::default())
}

pub fn compute_losses_weighted(y1: f64, y2: f64, y_ens: f64, label: f64, w: LossWeights) -> Result<LossBreakdown> {
    if let Some(v) = [y1, y2, y_ens, label].into_iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite value {v} in loss computation")));
    }
    let l_head1 = (y1 - label) * (y1 - label);
    let l_head2 = (y2 - label) * (y2 - label);
    let l_ensemble = 0.5 * (y_ens - label) * (y_ens - label);
    Ok(LossBreakdown {
        l_head1,
        l_head2,
        l_ensemble,
        l_total: w.head1 * l_head1 + w.head2 * l_head2 + w.ensemble * l_ensemble,
    })
}

/// One training example: wild-type and mutant bundles plus the label.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub wt: &'a EmbeddingBundle,
    pub mt: &'a EmbeddingBundle,
    pub label: f64,
}

/// Nodes of a recorded batch loss.
#[derive(Clone, Debug)]
pub struct BatchGraph {
    pub total: NodeId,
    pub l_head1: NodeId,
    pub l_head2: Option<NodeId>,
    pub l_ensemble: Option<NodeId>,
    pub ensemble_preds: Vec<NodeId>,
}

/// Records the forward pass and batch losses for `samples` on `tape`.
pub fn record_batch(
    model: &Model,
    tape: &mut GradTape,
    bind: &mut ParamBinding,
    samples: &[Sample<'_>],
    weights: LossWeights,
) -> Result<BatchGraph> {
    if samples.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let mut head_preds: Vec<Vec<NodeId>> = vec![Vec::new(); model.heads().len()];
    let mut ens = Vec::with_capacity(samples.len());
    for s in samples {
        let nodes = model.sample_on_tape(tape, bind, s.wt, s.mt)?;
        for (slot, h) in head_preds.iter_mut().zip(&nodes.heads) {
            slot.push(*h);
        }
        ens.push(nodes.ensemble);
    }
    if head_preds.len() == 1 {
        let l = tape.mse(&head_preds[0], &labels)?;
        return Ok(BatchGraph {
            total: l,
            l_head1: l,
            l_head2: None,
            l_ensemble: None,
            ensemble_preds: ens,
        });
    }
    let l1 = tape.mse(&head_preds[0], &labels)?;
    let l2 = tape.mse(&head_preds[1], &labels)?;
    let le_full = tape.mse(&ens, &labels)?;
    let le = tape.scale(le_full, 0.5)?;
    let t1 = tape.scale(l1, weights.head1)?;
    let t2 = tape.scale(l2, weights.head2)?;
    let t3 = tape.scale(le, weights.ensemble)?;
    let t12 = tape.add(t1, t2)?;
    let total = tape.add(t12, t3)?;
    Ok(BatchGraph {
        total,
        l_head1: l1,
        l_head2: Some(l2),
        l_ensemble: Some(le),
        ensemble_preds: ens,
    })
}

/// Batch loss breakdown, parameter gradients of `l_total`, and the
/// ensemble predictions.
pub fn loss_and_grads(model: &Model, samples: &[Sample<'_>], weights: LossWeights) -> Result<(LossBreakdown, GradMap, Vec<f64>)> {
    let mut tape = GradTape::new();
    let mut bind = ParamBinding::new(model.params());
    let g = record_batch(model, &mut tape, &mut bind, samples, weights)?;
    let breakdown = LossBreakdown {
        l_head1: tape.scalar(g.l_head1),
        l_head2: g.l_head2.map_or(0.0, |n| tape.scalar(n)),
        l_ensemble: g.l_ensemble.map_or(0.0, |n| tape.scalar(n)),
        l_total: tape.scalar(g.total),
    };
    if !breakdown.l_total.is_finite() {
        return Err(Error::numeric(format!("non-finite batch loss {}", breakdown.l_total)));
    }
    let grads = tape.backward(g.total, 1.0)?;
    let preds = g.ensemble_preds.iter().map(|&n| tape.scalar(n)).collect();
    Ok((breakdown, bind.collect(&grads, model.params()), preds))
}

/// Batch loss only, without a backward pass.
pub fn batch_loss(model: &Model, samples: &[Sample<'_>], weights: LossWeights) -> Result<f64> {
    let mut tape = GradTape::new();
    let mut bind = ParamBinding::new(model.params());
    let g = record_batch(model, &mut tape, &mut bind, samples, weights)?;
    Ok(tape.scalar(g.total))
}

/// Looks up the wild-type and mutant bundles of a record.
pub fn sample_for<'a>(record: &MutationRecord, bundles: &'a BundleSet) -> Result<Sample<'a>> {
    let find = |id: String| {
        bundles
            .get(&id)
            .ok_or_else(|| Error::data(format!("missing bundle '{id}'")))
    };
    Ok(Sample {
        wt: find(record.wt_variant_id())?,
        mt: find(record.mut_variant_id())?,
        label: record.dtm,
    })
}

/// Infers the raw embedding width shared by the bundles `records` use.
pub fn infer_d_raw(records: &[MutationRecord], bundles: &BundleSet) -> Result<usize> {
    let r = records.first().ok_or_else(|| Error::data("no training records"))?;
    sample_for(r, bundles)?.wt.d_raw()
}

/// Statistics for one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted means of the batch losses seen during the epoch.
    pub train: LossBreakdown,
    /// Sample-weighted mean of `(y_ens - label)^2` during the epoch.
    pub train_mse: f64,
    pub steps: usize,
    pub last_lr: f64,
    pub max_grad_norm: f64,
    pub val: Option<MetricsReport>,
    pub val_note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }
}

/// Owns the model and optimizer state for one training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: Vec<Sample<'a>>,
    val: Vec<(&'a MutationRecord, Sample<'a>)>,
    model: Model,
    adam: AdamState,
    schedule: OneCycleSchedule,
    step: usize,
    epochs_done: usize,
}

fn collect_samples<'a>(model: &Model, records: &'a [MutationRecord], bundles: &'a BundleSet) -> Result<Vec<(&'a MutationRecord, Sample<'a>)>> {
    let mut out = Vec::with_capacity(records.len());
    let mut problems = Vec::new();
    for r in records {
        match sample_for(r, bundles).and_then(|s| model.check_bundles(s.wt, s.mt).map(|_| s)) {
            Ok(s) => out.push((r, s)),
            Err(e) => problems.push(format!("{} {}: {e}", r.protein_id, r.mutation)),
        }
    }
    if !problems.is_empty() {
        let shown: Vec<_> = problems.iter().take(5).cloned().collect();
        return Err(Error::data(format!(
            "{} record(s) lack usable bundles: {}{}",
            problems.len(),
            shown.join("; "),
            if problems.len() > 5 { "; ..." } else { "" }
        )));
    }
    Ok(out)
}

impl<'a> Trainer<'a> {
    /// Validates the configuration and every bundle the run will touch
    /// before any parameter is updated.
    pub fn new(
        config: TrainConfig,
        train: &'a [MutationRecord],
        val: &'a [MutationRecord],
        bundles: &'a BundleSet,
    ) -> Result<Self> {
        config.validate()?;
        let d_raw = infer_d_raw(train, bundles)?;
        let model = Model::new(config.model_spec(d_raw), config.seed)?;
        let adam = AdamState::new(model.params(), config.adam);
        Self::assemble(config, train, val, bundles, model, adam, 0, 0)
    }

    /// Continues a run from a checkpoint. Training data and configuration
    /// must match the original run for the trajectory to be reproduced.
    pub fn resume(
        checkpoint: Checkpoint,
        train: &'a [MutationRecord],
        val: &'a [MutationRecord],
        bundles: &'a BundleSet,
    ) -> Result<Self> {
        let model = checkpoint.model()?;
        checkpoint.adam.check_shapes(model.params())?;
        Self::assemble(
            checkpoint.config,
            train,
            val,
            bundles,
            model,
            checkpoint.adam,
            checkpoint.step,
            checkpoint.epochs_done,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        train: &'a [MutationRecord],
        val: &'a [MutationRecord],
        bundles: &'a BundleSet,
        model: Model,
        adam: AdamState,
        step: usize,
        epochs_done: usize,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::data("no training records"));
        }
        let train_samples: Vec<Sample<'a>> = collect_samples(&model, train, bundles)?.into_iter().map(|(_, s)| s).collect();
        let val_samples = collect_samples(&model, val, bundles)?;
        let steps_per_epoch = train.len().div_ceil(config.batch_size);
        let schedule = config.schedule(config.epochs * steps_per_epoch);
        schedule.validate()?;
        if step > schedule.total_steps || epochs_done > config.epochs {
            return Err(Error::State("checkpoint is past the end of its schedule".into()));
        }
        Ok(Trainer {
            config,
            train: train_samples,
            val: val_samples,
            model,
            adam,
            schedule,
            step,
            epochs_done,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &OneCycleSchedule {
        &self.schedule
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
        }
        order
    }

    /// Runs one epoch of optimizer steps and evaluates on the validation set.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.finished() {
            return Err(Error::State("training already finished".into()));
        }
        let order = self.epoch_order(self.epochs_done);
        let mut sum = LossBreakdown::default();
        let mut mse_sum = 0.0;
        let mut max_norm: f64 = 0.0;
        let mut last_lr = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Sample<'a>> = chunk.iter().map(|&i| self.train[i]).collect();
            let (loss, mut grads, preds) = loss_and_grads(&self.model, &batch, self.config.loss_weights)?;
            let n = batch.len() as f64;
            sum.l_head1 += loss.l_head1 * n;
            sum.l_head2 += loss.l_head2 * n;
            sum.l_ensemble += loss.l_ensemble * n;
            sum.l_total += loss.l_total * n;
            mse_sum += preds.iter().zip(&batch).map(|(p, s)| (p - s.label) * (p - s.label)).sum::<f64>();
            let norm = clip_global_norm(&mut grads, ClipConfig { max_norm: self.config.clip_norm })?;
            max_norm = max_norm.max(norm);
            last_lr = self.schedule.lr(self.step)?;
            adam_step(self.model.params_mut(), &grads, &mut self.adam, last_lr)?;
            self.step += 1;
            steps += 1;
        }
        self.epochs_done += 1;
        let n = self.train.len() as f64;
        let train = LossBreakdown {
            l_head1: sum.l_head1 / n,
            l_head2: sum.l_head2 / n,
            l_ensemble: sum.l_ensemble / n,
            l_total: sum.l_total / n,
        };
        let (val, val_note) = self.validate_epoch();
        let rec = EpochRecord {
            epoch: self.epochs_done,
            train,
            train_mse: mse_sum / n,
            steps,
            last_lr,
            max_grad_norm: max_norm,
            val,
            val_note,
        };
        log::info!(
            "epoch {} loss {:.4} mse {:.4}{}",
            rec.epoch,
            rec.train.l_total,
            rec.train_mse,
            rec.val.map(|v| format!(" val r {:.3} mae {:.3}", v.r, v.mae)).unwrap_or_default()
        );
        Ok(rec)
    }

    fn validate_epoch(&self) -> (Option<MetricsReport>, Option<String>) {
        if self.val.is_empty() {
            return (None, None);
        }
        let mut preds = Vec::with_capacity(self.val.len());
        for (_, s) in &self.val {
            match self.model.predict(s.wt, s.mt) {
                Ok(p) => preds.push(p.ensemble),
                Err(e) => return (None, Some(e.to_string())),
            }
        }
        let labels: Vec<f64> = self.val.iter().map(|(_, s)| s.label).collect();
        match MetricsReport::compute(&preds, &labels) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        }
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<History> {
        let mut history = History::default();
        while !self.finished() {
            history.epochs.push(self.run_epoch()?);
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, &self.model, &self.adam, self.step, self.epochs_done)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Trains from scratch. Returns the final checkpoint and per-epoch history.
pub fn train(
    train_set: &[MutationRecord],
    val_set: &[MutationRecord],
    bundles: &BundleSet,
    config: &TrainConfig,
) -> Result<(Checkpoint, History)> {
    let mut t = Trainer::new(config.clone(), train_set, val_set, bundles)?;
    let history = t.run()?;
    Ok((t.checkpoint(), history))
}

/// Prediction for one evaluated record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub protein_id: String,
    pub mutation: String,
    pub label: f64,
    pub heads: Vec<f64>,
    pub y_ens: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub predictions: Vec<SamplePrediction>,
    /// Records skipped because a bundle was missing.
    pub skipped: Vec<String>,
}

impl Evaluation {
    /// Metrics table, the key-value line, and the skipped count.
    pub fn report(&self) -> String {
        format!("{}{} skipped={}\n", self.metrics.table(), self.metrics.key_values(), self.skipped.len())
    }

    /// `protein_id,mutation,label,y1[,y2],y_ens` rows.
    pub fn predictions_csv(&self) -> String {
        let n_heads = self.predictions.first().map_or(0, |p| p.heads.len());
        let mut out = String::from("protein_id,mutation,label");
        for i in 1..=n_heads {
            out.push_str(&format!(",y{i}"));
        }
        out.push_str(",y_ens\n");
        for p in &self.predictions {
            out.push_str(&format!("{},{},{}", p.protein_id, p.mutation, p.label));
            for h in &p.heads {
                out.push_str(&format!(",{h}"));
            }
            out.push_str(&format!(",{}\n", p.y_ens));
        }
        out
    }
}

/// Predicts every record with its bundles present and scores the ensemble
/// output. Records lacking a bundle are listed in `skipped`.
pub fn evaluate(model: &Model, records: &[MutationRecord], bundles: &BundleSet) -> Result<Evaluation> {
    evaluate_models(&[model], records, bundles)
}

/// Like [`evaluate`] but averages head and ensemble outputs across several
/// models, e.g. the same configuration trained with different seeds.
pub fn evaluate_models(models: &[&Model], records: &[MutationRecord], bundles: &BundleSet) -> Result<Evaluation> {
    let first = models.first().ok_or_else(|| Error::config("no models to evaluate"))?;
    if models.iter().any(|m| m.heads().len() != first.heads().len()) {
        return Err(Error::config("models in an ensemble must have the same heads"));
    }
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    for r in records {
        let s = match sample_for(r, bundles) {
            Ok(s) => s,
            Err(e) => {
                skipped.push(format!("{} {} ({e})", r.protein_id, r.mutation));
                continue;
            }
        };
        let mut heads = vec![0.0; first.heads().len()];
        let mut y_ens = 0.0;
        for m in models {
            let p = m.predict(s.wt, s.mt)?;
            for (acc, h) in heads.iter_mut().zip(&p.heads) {
                *acc += h;
            }
            y_ens += p.ensemble;
        }
        let k = models.len() as f64;
        predictions.push(SamplePrediction {
            protein_id: r.protein_id.clone(),
            mutation: r.mutation.to_string(),
            label: r.dtm,
            heads: heads.into_iter().map(|h| h / k).collect(),
            y_ens: y_ens / k,
        });
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} record(s) with missing bundles", skipped.len());
    }
    let pred: Vec<f64> = predictions.iter().map(|p| p.y_ens).collect();
    let label: Vec<f64> = predictions.iter().map(|p| p.label).collect();
    let metrics = MetricsReport::compute(&pred, &label)?;
    Ok(Evaluation {
        metrics,
        predictions,
        skipped,
    })
}
