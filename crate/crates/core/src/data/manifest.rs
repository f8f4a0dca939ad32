use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::read_feature_header;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub id: String,
    /// Feature file path, relative to the manifest.
    pub frames: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Day {
    pub id: String,
    pub split: Split,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub feature_dim: u32,
    pub days: Vec<Day>,
    /// Directory feature paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn feature_path(&self, event: &Event) -> PathBuf {
        self.root.join(&event.frames)
    }

    pub fn days_in(&self, split: Split) -> impl Iterator<Item = &Day> {
        self.days.iter().filter(move |d| d.split == split)
    }

    pub fn find_day(&self, id: &str) -> Option<&Day> {
        self.days.iter().find(|d| d.id == id)
    }

    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Manifest("feature_dim must be positive".into()));
        }
        let mut day_ids = HashSet::new();
        let mut event_ids = HashSet::new();
        for day in &self.days {
            if !day_ids.insert(day.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate day id `{}`", day.id)));
            }
            if day.events.is_empty() {
                return Err(Error::Manifest(format!("day `{}` has no events", day.id)));
            }
            for ev in &day.events {
                if !event_ids.insert(ev.id.as_str()) {
                    return Err(Error::Manifest(format!("duplicate event id `{}`", ev.id)));
                }
                if ev.captions.is_empty() {
                    return Err(Error::Manifest(format!(
                        "event `{}` has no captions",
                        ev.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Check every referenced feature file exists, is well formed, has at
    /// least one frame and matches `feature_dim`.
    pub fn validate_features(&self) -> Result<()> {
        for day in &self.days {
            for ev in &day.events {
                let path = self.feature_path(ev);
                let header = read_feature_header(&path).map_err(|e| {
                    Error::Manifest(format!("event `{}`: {}: {e}", ev.id, path.display()))
                })?;
                if header.dim != self.feature_dim as usize {
                    return Err(Error::Manifest(format!(
                        "event `{}`: feature width {} but manifest declares {}",
                        ev.id, header.dim, self.feature_dim
                    )));
                }
                if header.frames == 0 {
                    return Err(Error::Manifest(format!("event `{}` has no frames", ev.id)));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(json: &str, root: &Path) -> Result<Manifest> {
    let mut m: Manifest = serde_json::from_str(json)
        .map_err(|e| Error::Manifest(format!("schema violation: {e}")))?;
    m.root = root.to_path_buf();
    m.validate_structure()?;
    Ok(m)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let m = parse_manifest(&text, &root)?;
    m.validate_features()?;
    Ok(m)
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One training/evaluation sample: an event, its predecessor within the day
/// (or none for the first event) and which reference caption is the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkedSample {
    pub day: usize,
    pub event: usize,
    pub previous: Option<usize>,
    pub caption: usize,
}

pub fn link_events(day_index: usize, day: &Day) -> Vec<LinkedSample> {
    day.events
        .iter()
        .enumerate()
        .flat_map(|(e, ev)| {
            (0..ev.captions.len()).map(move |caption| LinkedSample {
                day: day_index,
                event: e,
                previous: e.checked_sub(1),
                caption,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub days: usize,
    pub images: usize,
    pub segments: usize,
    pub descriptions: usize,
}

impl std::ops::AddAssign for SplitStats {
    fn add_assign(&mut self, o: Self) {
        self.days += o.days;
        self.images += o.images;
        self.segments += o.segments;
        self.descriptions += o.descriptions;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
}

impl CorpusStats {
    pub fn split(&self, s: Split) -> &SplitStats {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn total(&self) -> SplitStats {
        let mut t = self.train;
        t += self.val;
        t += self.test;
        t
    }

    /// Per-split table: days, images, segments and descriptions.
    pub fn table(&self) -> String {
        let total = self.total();
        let cols = [self.train, self.val, self.test, total];
        let row = |label: &str, f: fn(&SplitStats) -> usize| {
            let mut line = format!("{label:<15}");
            for c in &cols {
                line.push_str(&format!("{:>12}", f(c)));
            }
            line
        };
        [
            format!(
                "{:<15}{:>12}{:>12}{:>12}{:>12}",
                "", "Training", "Validation", "Test", "Total"
            ),
            row("#days", |s| s.days),
            row("#images", |s| s.images),
            row("#segments", |s| s.segments),
            row("#descriptions", |s| s.descriptions),
        ]
        .join("\n")
    }
}

/// Counts per split; image counts come from feature-file headers.
pub fn corpus_stats(m: &Manifest) -> Result<CorpusStats> {
    let mut stats = CorpusStats::default();
    for day in &m.days {
        let s = match day.split {
            Split::Train => &mut stats.train,
            Split::Val => &mut stats.val,
            Split::Test => &mut stats.test,
        };
        s.days += 1;
        for ev in &day.events {
            s.segments += 1;
            s.descriptions += ev.captions.len();
            s.images += read_feature_header(&m.feature_path(ev))?.frames;
        }
    }
    Ok(stats)
}
