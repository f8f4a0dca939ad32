//! Beam search and day-level chained captioning.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::data::{tokenize, PreparedDay, Vocabulary, BOS, EOS};
use crate::error::{invalid, Result};
use crate::layers::DecoderState;
use crate::model::{
    make_empty_event, previous_caption_ids, BoundModel, Model, PreviousEventInput,
    MAX_CAPTION_WORDS,
};
use crate::numerics::{Tape, LOG_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_length: usize,
    pub length_normalization: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            max_length: MAX_CAPTION_WORDS,
            length_normalization: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(invalid("beam size must be at least 1"));
        }
        if self.max_length == 0 {
            return Err(invalid("max_length must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub state: DecoderState,
    pub finished: bool,
}

/// Result of decoding one event. `tokens` excludes EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

fn score(h: &BeamHypothesis, cfg: &DecodeConfig) -> f64 {
    if cfg.length_normalization {
        h.logprob / h.tokens.len().max(1) as f64
    } else {
        h.logprob
    }
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

/// Beam search with finished hypotheses retired into a pool. At
/// `max_length` surviving live hypotheses join the pool unfinished. The best
/// pooled hypothesis by total log-probability wins.
pub fn beam_search(
    model: &Model,
    current: &FeatureSequence,
    prev: &PreviousEventInput,
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let bound = BoundModel::load_frozen(&mut tape, &model.config, &model.params)?;
    let enc = bound.prepare(&mut tape, current, prev, None)?;
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: enc.initial,
        finished: false,
    }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();

    for step in 0..cfg.max_length {
        // (score, parent, token, next state)
        let mut candidates: Vec<(f64, usize, usize, DecoderState)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let last = h.tokens.last().copied().unwrap_or(BOS);
            let (next, probs) = bound.step(&mut tape, &enc, h.state, last, None)?;
            for (tok, &p) in tape.data(probs).iter().enumerate() {
                candidates.push((h.logprob + p.max(LOG_FLOOR).ln(), i, tok, next));
            }
        }
        let seq = |c: &(f64, usize, usize, DecoderState)| {
            let mut t = live[c.1].tokens.clone();
            t.push(c.2);
            t
        };
        candidates.sort_by(|a, b| rank(a.0, &seq(a), b.0, &seq(b)));
        candidates.truncate(cfg.beam_size);
        let mut next_live = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let h = BeamHypothesis {
                tokens: seq(c),
                logprob: c.0,
                state: c.3,
                finished: c.2 == EOS,
            };
            if h.finished {
                pool.push(h);
            } else {
                next_live.push(h);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if step + 1 == cfg.max_length {
            pool.append(&mut live);
            break;
        }
        // Log-probabilities only fall as tokens are appended, so once the
        // pool beats every live hypothesis the answer is fixed.
        if !cfg.length_normalization {
            let best_pool = pool
                .iter()
                .map(|h| h.logprob)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_live = live
                .iter()
                .map(|h| h.logprob)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_pool > best_live {
                break;
            }
        }
    }
    pool.append(&mut live);
    let best = pool
        .into_iter()
        .min_by(|a, b| rank(score(a, cfg), &a.tokens, score(b, cfg), &b.tokens))
        .expect("beam search keeps at least one hypothesis");
    let mut tokens = best.tokens;
    if best.finished {
        tokens.pop();
    }
    Ok(Decoded {
        tokens,
        logprob: best.logprob,
        finished: best.finished,
    })
}

/// Argmax decoding, ties to the smaller token id.
pub fn greedy(
    model: &Model,
    current: &FeatureSequence,
    prev: &PreviousEventInput,
    max_length: usize,
) -> Result<Decoded> {
    if max_length == 0 {
        return Err(invalid("max_length must be at least 1"));
    }
    let mut tape = Tape::new();
    let bound = BoundModel::load_frozen(&mut tape, &model.config, &model.params)?;
    let enc = bound.prepare(&mut tape, current, prev, None)?;
    let mut state = enc.initial;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut last = BOS;
    for _ in 0..max_length {
        let (next, probs) = bound.step(&mut tape, &enc, state, last, None)?;
        let p = tape.data(probs);
        let tok = (0..p.len())
            .max_by(|&a, &b| p[a].total_cmp(&p[b]).then_with(|| b.cmp(&a)))
            .expect("non-empty vocabulary");
        logprob += p[tok].max(LOG_FLOOR).ln();
        if tok == EOS {
            return Ok(Decoded {
                tokens,
                logprob,
                finished: true,
            });
        }
        tokens.push(tok);
        state = next;
        last = tok;
    }
    Ok(Decoded {
        tokens,
        logprob,
        finished: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub day_id: String,
    pub event_id: String,
    pub caption: String,
    pub logprob: f64,
}

/// Caption the events of one day in order. The first event sees the empty
/// event; later events see the previous event's frames and/or the caption
/// generated for it.
pub fn caption_day(
    model: &Model,
    vocab: &Vocabulary,
    day: &PreparedDay,
    cfg: &DecodeConfig,
) -> Result<Vec<CaptionRecord>> {
    let variant = model.variant();
    let mut out: Vec<CaptionRecord> = Vec::with_capacity(day.events.len());
    for (s, ev) in day.events.iter().enumerate() {
        let prev = if s == 0 {
            make_empty_event(variant, model.config.dims.feature_dim)
        } else {
            PreviousEventInput {
                video: variant
                    .uses_prev_video()
                    .then(|| day.events[s - 1].features.clone()),
                caption: variant
                    .uses_prev_caption()
                    .then(|| previous_caption_ids(vocab, &tokenize(&out[s - 1].caption))),
            }
        };
        let d = beam_search(model, &ev.features, &prev, cfg)?;
        out.push(CaptionRecord {
            day_id: day.id.clone(),
            event_id: ev.id.clone(),
            caption: vocab.decode(&d.tokens),
            logprob: d.logprob,
        });
    }
    Ok(out)
}
