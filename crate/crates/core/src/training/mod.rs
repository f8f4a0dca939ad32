//! Optimisers, loss and the early-stopped training loop.

pub mod regularization;

use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PreparedDay, Split, Vocabulary};
use crate::decoding::{beam_search, DecodeConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics::{bleu4, EvalEntry};
use crate::model::{
    build_model, make_empty_event, previous_caption_ids, target_ids, BoundModel, Model, ModelDims,
    ModelVariant, PreviousEventInput,
};
use crate::numerics::{backward, GradientSet, ParamStore, Tape, LOG_FLOOR};
use crate::rng::{stream, Stream};

use regularization::{add_l2_gradient, perturb_weights, Dropout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adadelta,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adadelta => "adadelta",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adadelta" => Ok(Optimizer::Adadelta),
            "adam" => Ok(Optimizer::Adam),
            other => Err(invalid(format!(
                "unknown optimizer `{other}`; expected adadelta or adam"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: Optimizer,
    pub adadelta_lr: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub adam_lr: f64,
    pub adam_decay_per_epoch: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub dropout_p: f64,
    pub weight_decay: f64,
    pub noise_sigma: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub eval_every_updates: usize,
    pub max_epochs: usize,
    pub max_updates: Option<usize>,
    pub beam_size: usize,
    pub max_length: usize,
    pub min_word_freq: usize,
    /// Width of every hidden layer; `None` selects the full-size layout.
    pub hidden_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adadelta,
            adadelta_lr: 1.0,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            adam_lr: 0.001,
            adam_decay_per_epoch: 0.995,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            dropout_p: 0.5,
            weight_decay: 1e-4,
            noise_sigma: 1e-2,
            batch_size: 64,
            patience: 20,
            eval_every_updates: 50,
            max_epochs: 500,
            max_updates: None,
            beam_size: 10,
            max_length: 30,
            min_word_freq: 1,
            hidden_size: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("adadelta_lr", self.adadelta_lr),
            ("adadelta_eps", self.adadelta_eps),
            ("adam_lr", self.adam_lr),
            ("adam_decay_per_epoch", self.adam_decay_per_epoch),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("adadelta_rho", self.adadelta_rho),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("dropout_p", self.dropout_p),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_every_updates", self.eval_every_updates),
            ("max_epochs", self.max_epochs),
            ("min_word_freq", self.min_word_freq),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_updates == Some(0) {
            return Err(Error::Config("max_updates must be at least 1".into()));
        }
        if self.hidden_size == Some(0) {
            return Err(Error::Config("hidden_size must be at least 1".into()));
        }
        self.decode_config().validate()
    }

    /// Override one field from its textual form, e.g. `("batch_size", "8")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&*self)?;
        let fields = obj.as_object_mut().expect("config serialises to an object");
        if !fields.contains_key(key) {
            return Err(Error::Config(format!("unknown training option `{key}`")));
        }
        let parsed = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        fields.insert(key.to_string(), parsed);
        *self = serde_json::from_value(obj)
            .map_err(|e| Error::Config(format!("`{key}={value}`: {e}")))?;
        self.validate()
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_length: self.max_length,
            length_normalization: false,
        }
    }

    pub fn model_dims(&self, feature_dim: usize) -> ModelDims {
        match self.hidden_size {
            Some(d) => ModelDims::uniform(feature_dim, d),
            None => ModelDims::full_size(feature_dim),
        }
    }

    /// Adam step size during `epoch` (0-based).
    pub fn adam_lr_at(&self, epoch: usize) -> f64 {
        self.adam_lr * self.adam_decay_per_epoch.powi(epoch as i32)
    }
}

/// `-sum_t log p_t[target_t]` with probabilities floored at `1e-12`.
/// Returns the loss and the number of floored terms.
pub fn nll_loss(dists: &[Vec<f64>], targets: &[usize]) -> Result<(f64, usize)> {
    if dists.len() != targets.len() {
        return Err(invalid(format!(
            "{} distributions for {} targets",
            dists.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut clamped = 0;
    for (d, &t) in dists.iter().zip(targets) {
        let p = *d.get(t).ok_or(Error::Index {
            index: t,
            len: d.len(),
        })?;
        if p.is_nan() || p < LOG_FLOOR {
            clamped += 1;
        }
        loss -= p.max(LOG_FLOOR).ln();
    }
    Ok((loss, clamped))
}

/// Rescale to global norm `max_norm` when it is exceeded. Returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub eg2: GradientSet,
    pub edx2: GradientSet,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Adam(AdamState),
    Adadelta(AdadeltaState),
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, params: &ParamStore) -> Self {
        let z = || GradientSet::zeros_like(params);
        match optimizer {
            Optimizer::Adam => OptimizerState::Adam(AdamState {
                m: z(),
                v: z(),
                t: 0,
            }),
            Optimizer::Adadelta => OptimizerState::Adadelta(AdadeltaState {
                eg2: z(),
                edx2: z(),
            }),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &GradientSet,
        cfg: &TrainingConfig,
        epoch: usize,
    ) -> Result<()> {
        match self {
            OptimizerState::Adam(s) => adam_step(params, grads, s, cfg.adam_lr_at(epoch), cfg),
            OptimizerState::Adadelta(s) => adadelta_step(params, grads, s, cfg),
        }
    }
}

fn check_shapes(params: &ParamStore, grads: &GradientSet, state: &GradientSet) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.tensor(name)?;
        let s = state
            .get(name)
            .ok_or_else(|| invalid(format!("optimizer has no state for `{name}`")))?;
        if p.shape() != g.shape() || s.shape() != g.shape() {
            return Err(invalid(format!("shape mismatch for `{name}`")));
        }
    }
    Ok(())
}

pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainingConfig,
) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, g) in grads.iter() {
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        let w = params.tensor_mut(name)?.data_mut();
        for i in 0..g.numel() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

pub fn adadelta_step(
    params: &mut ParamStore,
    grads: &GradientSet,
    state: &mut AdadeltaState,
    cfg: &TrainingConfig,
) -> Result<()> {
    check_shapes(params, grads, &state.eg2)?;
    let (rho, eps) = (cfg.adadelta_rho, cfg.adadelta_eps);
    for (name, g) in grads.iter() {
        let eg2 = state.eg2.get_mut(name).expect("checked").data_mut();
        let edx2 = state.edx2.get_mut(name).expect("checked").data_mut();
        let w = params.tensor_mut(name)?.data_mut();
        for i in 0..g.numel() {
            let gi = g.data()[i];
            eg2[i] = rho * eg2[i] + (1.0 - rho) * gi * gi;
            let dx = -((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * gi;
            edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
            w[i] += cfg.adadelta_lr * dx;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub update: usize,
    pub epoch: usize,
    /// Mean per-caption negative log-likelihood since the previous check.
    pub train_loss: f64,
    pub val_bleu4: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub vocabulary: Vocabulary,
    pub history: Vec<HistoryRecord>,
    pub updates: usize,
    pub stopped_early: bool,
    /// Target probabilities floored during training.
    pub clamped: usize,
}

/// Previous-event input as seen in training and validation: the previous
/// event's frames and one of its reference captions.
pub fn reference_previous(
    variant: ModelVariant,
    feature_dim: usize,
    vocab: &Vocabulary,
    day: &PreparedDay,
    event: usize,
    reference: usize,
) -> PreviousEventInput {
    match event.checked_sub(1) {
        None => make_empty_event(variant, feature_dim),
        Some(p) => {
            let prev = &day.events[p];
            PreviousEventInput {
                video: variant.uses_prev_video().then(|| prev.features.clone()),
                caption: variant
                    .uses_prev_caption()
                    .then(|| previous_caption_ids(vocab, &prev.captions[reference])),
            }
        }
    }
}

/// Beam-decode `split` with reference previous captions and score corpus
/// BLEU-4 against all references.
pub fn validation_bleu(
    model: &Model,
    vocab: &Vocabulary,
    data: &Dataset,
    split: Split,
    cfg: &DecodeConfig,
) -> Result<f64> {
    let mut corpus = Vec::new();
    for day in data.days_in(split) {
        for (e, ev) in day.events.iter().enumerate() {
            let prev = reference_previous(model.variant(), data.feature_dim, vocab, day, e, 0);
            let d = beam_search(model, &ev.features, &prev, cfg)?;
            corpus.push(EvalEntry {
                id: format!("{}/{}", day.id, ev.id),
                hypothesis: d
                    .tokens
                    .iter()
                    .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
                    .collect(),
                references: ev.captions.clone(),
            });
        }
    }
    bleu4(&corpus)
}

struct Prepared {
    day: usize,
    event: usize,
    target: Vec<usize>,
}

/// Train `variant` on the training split, selecting weights by validation
/// BLEU-4 with patience-based early stopping.
pub fn train_loop(
    data: &Dataset,
    variant: ModelVariant,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.num_events(Split::Train) == 0 || data.num_events(Split::Val) == 0 {
        return Err(Error::Config(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let vocab = data.build_vocab(cfg.min_word_freq)?;
    let dims = cfg.model_dims(data.feature_dim);
    let mut model = build_model(variant, dims, vocab.len(), cfg.seed)?;
    let decode = cfg.decode_config();

    let samples: Vec<Prepared> = data
        .samples(Split::Train)
        .into_iter()
        .map(|s| Prepared {
            day: s.day,
            event: s.event,
            target: target_ids(
                &vocab,
                &data.days[s.day].events[s.event].captions[s.caption],
            ),
        })
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    let mut caption_rng = stream(cfg.seed, Stream::Caption);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);

    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_bleu = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut bad_checks = 0usize;
    let mut updates = 0usize;
    let mut clamped = 0usize;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut stopped_early = false;
    let mut last_epoch = 0;

    let mut check = |model: &Model,
                     update: usize,
                     epoch: usize,
                     loss_sum: f64,
                     loss_count: usize|
     -> Result<bool> {
        let train_loss = loss_sum / loss_count.max(1) as f64;
        let bleu = validation_bleu(model, &vocab, data, Split::Val, &decode)?;
        let improved = bleu > best_bleu || (bleu == best_bleu && train_loss < best_loss);
        if improved {
            best_bleu = bleu;
            best_loss = train_loss;
            best = model.clone();
            bad_checks = 0;
        } else {
            bad_checks += 1;
        }
        info!("update {update} epoch {epoch}: train loss {train_loss:.4}, val BLEU-4 {bleu:.4}");
        history.push(HistoryRecord {
            update,
            epoch,
            train_loss,
            val_bleu4: bleu,
            best_so_far: best_bleu,
        });
        Ok(bad_checks > cfg.patience)
    };

    'epochs: for epoch in 0..cfg.max_epochs {
        last_epoch = epoch;
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let noisy = perturb_weights(&model.params, cfg.noise_sigma, &mut noise_rng);
            let mut grads = GradientSet::zeros_like(&model.params);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &samples[i];
                let day = &data.days[s.day];
                let reference = match s.event.checked_sub(1) {
                    Some(p) => caption_rng.gen_range(0..day.events[p].captions.len()),
                    None => 0,
                };
                let prev =
                    reference_previous(variant, data.feature_dim, &vocab, day, s.event, reference);
                let mut tape = Tape::new();
                let vars = tape.load(&noisy);
                let bound = BoundModel::bind(&model.config, vars.clone())?;
                let mut dropout = Dropout::new(cfg.dropout_p, &mut dropout_rng);
                let (loss, dists) = bound.nll(
                    &mut tape,
                    &day.events[s.event].features,
                    &prev,
                    &s.target,
                    Some(&mut dropout),
                )?;
                let value = tape.scalar_value(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at update {updates}, epoch {epoch}, day {} event {}",
                        day.id, day.events[s.event].id
                    )));
                }
                clamped += dists
                    .iter()
                    .zip(&s.target)
                    .filter(|(&d, &t)| {
                        let p = tape.data(d)[t];
                        p.is_nan() || p < LOG_FLOOR
                    })
                    .count();
                loss_sum += value;
                loss_count += 1;
                let g = backward(&tape, loss)?;
                vars.accumulate_into(&tape, &g, &mut grads, scale);
            }
            add_l2_gradient(&model.params, cfg.weight_decay, &mut grads);
            let norm = clip_gradients(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient norm at update {updates}"
                )));
            }
            opt.step(&mut model.params, &grads, cfg, epoch)?;
            updates += 1;

            if updates.is_multiple_of(cfg.eval_every_updates) {
                let stop = check(&model, updates, epoch, loss_sum, loss_count)?;
                loss_sum = 0.0;
                loss_count = 0;
                if stop {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if cfg.max_updates.is_some_and(|m| updates >= m) {
                break 'epochs;
            }
        }
    }
    if !updates.is_multiple_of(cfg.eval_every_updates) {
        check(&model, updates, last_epoch, loss_sum, loss_count)?;
    }
    if clamped > 0 {
        warn!("{clamped} target probabilities fell below {LOG_FLOOR:e} and were floored");
    }
    Ok(TrainOutcome {
        model: best,
        vocabulary: vocab,
        history,
        updates,
        stopped_early,
        clamped,
    })
}

#[cfg(test)]
mod tests;
