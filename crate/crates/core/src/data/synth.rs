//! Synthetic days whose captions depend on the previous event.
//!
//! Each event shows one activity. Its caption names the activity of the
//! event before it, so the first word slot can only be filled by looking
//! back in time.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::features::{write_features, FeatureSequence};
use super::manifest::{write_manifest, Day, Event, Manifest, Split};
use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};

const NAMES: [&str; 12] = [
    "walking", "eating", "working", "shopping", "cooking", "reading", "driving", "talking",
    "cycling", "cleaning", "swimming", "running",
];

pub const START: &str = "start";
pub const NOISE_SIGMA: f64 = 0.1;
pub const MIN_FRAMES: usize = 3;
pub const MAX_FRAMES: usize = 10;

pub fn activity_name(a: usize) -> String {
    NAMES
        .get(a)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("activity{a}"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transition {
    /// Next activity drawn uniformly, independent of the current one.
    Uniform,
    /// A fixed random row-stochastic matrix drawn from the seed.
    Seeded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_days: usize,
    pub events_per_day: usize,
    pub feature_dim: usize,
    pub n_activities: usize,
    pub transition: Transition,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_days: 20,
            events_per_day: 8,
            feature_dim: 16,
            n_activities: 8,
            transition: Transition::Uniform,
        }
    }
}

pub fn caption_for(previous: Option<usize>, current: usize) -> String {
    let prev = previous
        .map(activity_name)
        .unwrap_or_else(|| START.to_string());
    format!("after {prev} did {}", activity_name(current))
}

/// Day counts for train/val/test: 70/15/15, each split non-empty when
/// there are at least three days.
pub fn split_counts(n_days: usize) -> (usize, usize, usize) {
    let mut train = (0.70 * n_days as f64).round() as usize;
    let mut val = (0.15 * n_days as f64).round() as usize;
    if n_days >= 3 {
        val = val.max(1);
        train = train.min(n_days - val - 1).max(1);
    } else {
        train = train.min(n_days);
        val = val.min(n_days - train);
    }
    (train, val, n_days - train - val)
}

/// Activity labels per day, before any files are written.
pub fn activity_chains(cfg: &SynthConfig) -> Result<Vec<Vec<usize>>> {
    validate(cfg)?;
    let mut rng = stream(cfg.seed, Stream::Datagen);
    let k = cfg.n_activities;
    let matrix: Option<Vec<Vec<f64>>> = match cfg.transition {
        Transition::Uniform => None,
        Transition::Seeded => Some(
            (0..k)
                .map(|_| {
                    let row: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(3)).collect();
                    let total: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / total).collect()
                })
                .collect(),
        ),
    };
    let mut days = Vec::with_capacity(cfg.n_days);
    for _ in 0..cfg.n_days {
        let mut chain = Vec::with_capacity(cfg.events_per_day);
        let mut prev: Option<usize> = None;
        for _ in 0..cfg.events_per_day {
            let a = match (&matrix, prev) {
                (Some(m), Some(p)) => sample_row(&m[p], &mut rng),
                _ => rng.gen_range(0..k),
            };
            chain.push(a);
            prev = Some(a);
        }
        days.push(chain);
    }
    Ok(days)
}

fn sample_row(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_activities < 2 {
        return Err(invalid("n_activities must be at least 2"));
    }
    if cfg.n_days == 0 || cfg.events_per_day == 0 || cfg.feature_dim == 0 {
        return Err(invalid(
            "days, events per day and feature_dim must be positive",
        ));
    }
    Ok(())
}

/// Write `manifest.json` and `features/*.tmaf` under `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let chains = activity_chains(cfg)?;
    // Frames and splits come from separate generators so the chains stay
    // reproducible on their own.
    let mut frame_rng = stream(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, Stream::Datagen);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let (n_train, n_val, _) = split_counts(cfg.n_days);
    let mut order: Vec<usize> = (0..cfg.n_days).collect();
    order.shuffle(&mut stream(cfg.seed, Stream::Shuffle));
    let mut splits = vec![Split::Test; cfg.n_days];
    for (rank, &d) in order.iter().enumerate() {
        splits[d] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    fs::create_dir_all(out.join("features"))?;
    let mut days = Vec::with_capacity(cfg.n_days);
    for (d, chain) in chains.iter().enumerate() {
        let day_id = format!("day{d:03}");
        let mut events = Vec::with_capacity(chain.len());
        for (s, &a) in chain.iter().enumerate() {
            let frames = frame_rng.gen_range(MIN_FRAMES..=MAX_FRAMES);
            let mut data = Vec::with_capacity(frames * cfg.feature_dim);
            for _ in 0..frames {
                for i in 0..cfg.feature_dim {
                    let proto = if i == a % cfg.feature_dim { 1.0 } else { 0.0 };
                    data.push((proto + noise.sample(&mut frame_rng)) as f32);
                }
            }
            let id = format!("{day_id}_e{s:02}");
            let rel = format!("features/{id}.tmaf");
            write_features(
                &out.join(&rel),
                &FeatureSequence::new(frames, cfg.feature_dim, data)?,
            )?;
            let previous = s.checked_sub(1).map(|p| chain[p]);
            events.push(Event {
                id,
                frames: rel,
                captions: vec![caption_for(previous, a)],
            });
        }
        days.push(Day {
            id: day_id,
            split: splits[d],
            events,
        });
    }
    let manifest = Manifest {
        feature_dim: cfg.feature_dim as u32,
        days,
        root: out.to_path_buf(),
    };
    write_manifest(&manifest, &out.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;
    use crate::data::text::tokenize;
    use std::collections::BTreeMap;

    fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(p) = stack.pop() {
            for entry in fs::read_dir(&p).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).unwrap().display().to_string();
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn same_seed_gives_identical_tree() {
        let cfg = SynthConfig {
            seed: 7,
            n_days: 5,
            ..SynthConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&cfg, a.path()).unwrap();
        synth_generate(&cfg, b.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        let c = tempfile::tempdir().unwrap();
        synth_generate(&SynthConfig { seed: 8, ..cfg }, c.path()).unwrap();
        assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
    }

    #[test]
    fn generated_manifest_loads_and_follows_construction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let written = synth_generate(&cfg, dir.path()).unwrap();
        let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m, written);
        let chains = activity_chains(&cfg).unwrap();
        let mut per_split = BTreeMap::new();
        for (day, chain) in m.days.iter().zip(&chains) {
            *per_split.entry(day.split).or_insert(0) += 1;
            assert_eq!(day.events.len(), 8);
            assert_eq!(tokenize(&day.events[0].captions[0])[1], START);
            for (s, ev) in day.events.iter().enumerate().skip(1) {
                let t = tokenize(&ev.captions[0]);
                assert_eq!(t[1], activity_name(chain[s - 1]));
                assert_eq!(t[3], activity_name(chain[s]));
            }
        }
        assert_eq!(per_split[&Split::Train], 14);
        assert_eq!(per_split[&Split::Val], 3);
        assert_eq!(per_split[&Split::Test], 3);
    }

    #[test]
    fn frame_counts_and_prototypes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_days: 4,
            ..SynthConfig::default()
        };
        let m = synth_generate(&cfg, dir.path()).unwrap();
        let chains = activity_chains(&cfg).unwrap();
        for (day, chain) in m.days.iter().zip(&chains) {
            for (ev, &a) in day.events.iter().zip(chain) {
                let seq = crate::data::read_features(&m.feature_path(ev)).unwrap();
                assert!((MIN_FRAMES..=MAX_FRAMES).contains(&seq.frames()));
                for j in 0..seq.frames() {
                    let f = seq.frame(j);
                    let argmax = (0..f.len()).max_by(|&x, &y| f[x].total_cmp(&f[y])).unwrap();
                    assert_eq!(argmax, a % cfg.feature_dim);
                }
            }
        }
    }

    #[test]
    fn rejects_single_activity() {
        let cfg = SynthConfig {
            n_activities: 1,
            ..SynthConfig::default()
        };
        assert!(activity_chains(&cfg).is_err());
    }

    #[test]
    fn split_counts_cover_every_day() {
        for n in 1..60 {
            let (a, b, c) = split_counts(n);
            assert_eq!(a + b + c, n);
            if n >= 3 {
                assert!(a >= 1 && b >= 1 && c >= 1, "{n}: {a} {b} {c}");
            }
        }
        assert_eq!(split_counts(20), (14, 3, 3));
    }

    /// Plug-in mutual information, in nats, between consecutive activities.
    fn empirical_mi(chains: &[Vec<usize>], k: usize) -> f64 {
        let mut joint = vec![vec![0.0; k]; k];
        let mut n = 0.0;
        for chain in chains {
            for w in chain.windows(2) {
                joint[w[0]][w[1]] += 1.0;
                n += 1.0;
            }
        }
        let px: Vec<f64> = (0..k).map(|i| joint[i].iter().sum::<f64>() / n).collect();
        let py: Vec<f64> = (0..k)
            .map(|j| (0..k).map(|i| joint[i][j]).sum::<f64>() / n)
            .collect();
        let mut mi = 0.0;
        for i in 0..k {
            for j in 0..k {
                let p = joint[i][j] / n;
                if p > 0.0 {
                    mi += p * (p / (px[i] * py[j])).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn uniform_chain_makes_previous_activity_unpredictable() {
        let k = 8;
        let cfg = SynthConfig {
            seed: 3,
            n_days: 2000,
            events_per_day: 8,
            n_activities: k,
            ..SynthConfig::default()
        };
        let chains = activity_chains(&cfg).unwrap();
        let n = (2000 * 7) as f64;
        // Plug-in bias is about (k-1)^2 / (2n) nats.
        let bias = ((k - 1) * (k - 1)) as f64 / (2.0 * n);
        let mi = empirical_mi(&chains, k);
        assert!(mi < 3.0 * bias, "mi {mi} bias {bias}");
        let mut counts = vec![0usize; k];
        chains.iter().flatten().for_each(|&a| counts[a] += 1);
        let expected = 16000.0 / k as f64;
        assert!(counts
            .iter()
            .all(|&c| (c as f64 - expected).abs() < 0.1 * expected));

        let seeded = activity_chains(&SynthConfig {
            transition: Transition::Seeded,
            ..cfg
        })
        .unwrap();
        assert!(empirical_mi(&seeded, k) > 10.0 * bias);
    }
}
