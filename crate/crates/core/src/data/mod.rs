//! Manifests, feature files, tokenisation and the synthetic corpus.

pub mod features;
pub mod manifest;
pub mod synth;
pub mod text;

pub use features::{
    read_feature_header, read_features, subsample_frames, write_features, FeatureHeader,
    FeatureSequence,
};
pub use manifest::{
    corpus_stats, link_events, load_manifest, parse_manifest, write_manifest, CorpusStats, Day,
    Event, LinkedSample, Manifest, Split, SplitStats,
};
pub use synth::{synth_generate, SynthConfig, Transition};
pub use text::{tokenize, Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::Result;

pub const MAX_FRAMES: usize = 26;

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEvent {
    pub id: String,
    /// Subsampled to at most [`MAX_FRAMES`] frames.
    pub features: FeatureSequence,
    pub captions: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDay {
    pub id: String,
    pub split: Split,
    pub events: Vec<PreparedEvent>,
}

/// A manifest with features loaded and captions tokenised.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub days: Vec<PreparedDay>,
}

impl Dataset {
    pub fn from_manifest(m: &Manifest, max_frames: usize) -> Result<Self> {
        let mut days = Vec::with_capacity(m.days.len());
        for day in &m.days {
            let mut events = Vec::with_capacity(day.events.len());
            for ev in &day.events {
                let features = subsample_frames(&read_features(&m.feature_path(ev))?, max_frames);
                events.push(PreparedEvent {
                    id: ev.id.clone(),
                    features,
                    captions: ev.captions.iter().map(|c| tokenize(c)).collect(),
                });
            }
            days.push(PreparedDay {
                id: day.id.clone(),
                split: day.split,
                events,
            });
        }
        Ok(Self {
            feature_dim: m.feature_dim as usize,
            days,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_manifest(&load_manifest(path)?, MAX_FRAMES)
    }

    pub fn days_in(&self, split: Split) -> impl Iterator<Item = &PreparedDay> {
        self.days.iter().filter(move |d| d.split == split)
    }

    pub fn captions_in(&self, split: Split) -> impl Iterator<Item = &[String]> {
        self.days_in(split)
            .flat_map(|d| d.events.iter())
            .flat_map(|e| e.captions.iter().map(Vec::as_slice))
    }

    /// Vocabulary over the training split only.
    pub fn build_vocab(&self, min_freq: usize) -> Result<Vocabulary> {
        Vocabulary::build(self.captions_in(Split::Train), min_freq)
    }

    pub fn samples(&self, split: Split) -> Vec<LinkedSample> {
        let mut out = Vec::new();
        for (i, day) in self.days.iter().enumerate() {
            if day.split != split {
                continue;
            }
            for (e, ev) in day.events.iter().enumerate() {
                for caption in 0..ev.captions.len() {
                    out.push(LinkedSample {
                        day: i,
                        event: e,
                        previous: e.checked_sub(1),
                        caption,
                    });
                }
            }
        }
        out
    }

    pub fn num_events(&self, split: Split) -> usize {
        self.days_in(split).map(|d| d.events.len()).sum()
    }
}
