//! Manifest schema and the dataset-construction pipeline.
//!
//! A dataset is a list of three-frame sequences, each labelled with a class and
//! a capture domain (day RGB or night IR). Construction runs as
//! [`split_train_test`] → [`filter_categories`] → [`balance_test_domains`]; the
//! per-class, per-domain training counts that every downstream statistic uses
//! are always recomputed from the samples, never stored.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of frames kept per sequence.
pub const FRAMES_PER_SEQUENCE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Day,
    Night,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Day, Domain::Night];

    pub fn index(self) -> usize {
        match self {
            Domain::Day => 0,
            Domain::Night => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Day => Domain::Night,
            Domain::Night => Domain::Day,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Day => "day",
            Domain::Night => "night",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

/// One three-frame sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSample {
    pub id: String,
    /// Frame paths, relative to the manifest directory.
    pub frames: [String; FRAMES_PER_SEQUENCE],
    #[serde(rename = "class")]
    pub class_label: usize,
    pub domain: Domain,
    pub location: String,
    pub split: Split,
}

impl SequenceSample {
    /// Path of the past-flow file, `<id>.past.flo`, relative to the manifest directory.
    pub fn past_flow_path(&self) -> PathBuf {
        Path::new("flow").join(format!("{}.past.flo", self.id))
    }

    /// Path of the future-flow file, `<id>.future.flo`.
    pub fn future_flow_path(&self) -> PathBuf {
        Path::new("flow").join(format!("{}.future.flo", self.id))
    }
}

/// Training-split counts `n[c][z]`, indexed by class then [`Domain::index`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts(pub Vec<[usize; 2]>);

impl DomainCounts {
    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, class: usize, domain: Domain) -> usize {
        self.0[class][domain.index()]
    }

    pub fn class_total(&self, class: usize) -> usize {
        self.0[class].iter().sum()
    }

    pub fn domain_total(&self, domain: Domain) -> usize {
        self.0.iter().map(|row| row[domain.index()]).sum()
    }

    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<SequenceSample>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Counts of samples in `split`, per class and domain.
    pub fn split_counts(&self, split: Split) -> DomainCounts {
        let mut counts = vec![[0usize; 2]; self.classes.len()];
        for s in self.samples.iter().filter(|s| s.split == split) {
            counts[s.class_label][s.domain.index()] += 1;
        }
        DomainCounts(counts)
    }

    /// The training counts `n[c][z]`.
    pub fn counts(&self) -> DomainCounts {
        self.split_counts(Split::Train)
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &SequenceSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn sample(&self, id: &str) -> Option<&SequenceSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Checks the manifest's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if s.class_label >= c {
                return Err(Error::config(format!(
                    "sample {} has class {} but only {c} classes are declared",
                    s.id, s.class_label
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::config(format!("duplicate sequence id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Which domain(s) hold the most training samples of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dominance {
    Day,
    Night,
    Both,
}

impl Dominance {
    pub fn is_dominant(self, domain: Domain) -> bool {
        match self {
            Dominance::Both => true,
            Dominance::Day => domain == Domain::Day,
            Dominance::Night => domain == Domain::Night,
        }
    }
}

/// Per-class dominant domain and imbalance ratio `max_z n / min_z n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub dominant: Vec<Dominance>,
    /// Infinite when the class is missing from one domain.
    pub ratio: Vec<f64>,
}

pub fn compute_stats(counts: &DomainCounts) -> DomainStats {
    let mut dominant = Vec::with_capacity(counts.num_classes());
    let mut ratio = Vec::with_capacity(counts.num_classes());
    for &[day, night] in &counts.0 {
        dominant.push(match day.cmp(&night) {
            std::cmp::Ordering::Greater => Dominance::Day,
            std::cmp::Ordering::Less => Dominance::Night,
            std::cmp::Ordering::Equal => Dominance::Both,
        });
        let (hi, lo) = (day.max(night), day.min(night));
        ratio.push(if lo == 0 {
            if hi == 0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            hi as f64 / lo as f64
        });
    }
    DomainStats { dominant, ratio }
}

/// Classifies an image as night (IR, channel-identical) or day.
///
/// Night iff every pixel's channel spread `max(R,G,B) - min(R,G,B)` is at most
/// `tolerance`.
pub fn detect_domain(image: &DynamicImage, tolerance: u8) -> Result<Domain> {
    let DynamicImage::ImageRgb8(rgb) = image else {
        return Err(Error::MalformedImage(format!(
            "expected 8-bit 3-channel image, got {:?}",
            image.color()
        )));
    };
    Ok(detect_domain_rgb(rgb, tolerance))
}

pub fn detect_domain_rgb(image: &image::RgbImage, tolerance: u8) -> Domain {
    let gray = image.pixels().all(|p| {
        let [r, g, b] = p.0;
        r.max(g).max(b) - r.min(g).min(b) <= tolerance
    });
    if gray {
        Domain::Night
    } else {
        Domain::Day
    }
}

/// Keeps the first three frames of a capture burst; shorter bursts are rejected.
pub fn select_frames<T: Clone>(raw_sequence: &[T]) -> Option<[T; FRAMES_PER_SEQUENCE]> {
    match raw_sequence {
        [a, b, c, ..] => Some([a.clone(), b.clone(), c.clone()]),
        _ => None,
    }
}

fn stratum_train_count(n: usize, train_fraction: f64) -> usize {
    // Guard against 0.7 * 10 = 7.000000000000001 style round-off.
    let raw = (train_fraction * n as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n)
}

/// Stratified random split: within every (class, domain) stratum,
/// `ceil(fraction * n)` sequences go to train and the remainder to test.
pub fn split_train_test(
    mut manifest: DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut strata: BTreeMap<(usize, Domain), Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        strata.entry((s.class_label, s.domain)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n_train = stratum_train_count(members.len(), train_fraction);
        for (rank, &i) in members.iter().enumerate() {
            manifest.samples[i].split = if rank < n_train {
                Split::Train
            } else {
                Split::Test
            };
        }
    }
    Ok(manifest)
}

/// What [`balance_test_domains`] changed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Classes whose test samples were all dropped because one domain had none.
    pub dropped_classes: Vec<usize>,
    /// Number of test samples removed.
    pub removed: usize,
    pub warnings: Vec<String>,
}

/// Subsamples each class's majority test domain down to its minority test count.
///
/// Classes with no test samples in one domain lose their test samples entirely
/// (training samples are kept) and are listed in the report.
pub fn balance_test_domains(
    manifest: DatasetManifest,
    seed: u64,
) -> Result<(DatasetManifest, BalanceReport)> {
    let mut by_class: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.split == Split::Test {
            by_class.entry(s.class_label).or_default()[s.domain.index()].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; manifest.samples.len()];
    let mut report = BalanceReport::default();
    for (&class, cells) in by_class.iter_mut() {
        let keep = cells[0].len().min(cells[1].len());
        if keep == 0 {
            let name = manifest.classes.get(class).cloned().unwrap_or_default();
            report.dropped_classes.push(class);
            report.warnings.push(format!(
                "class {class} ({name}) has test counts day={} night={}; excluded from the test set",
                cells[0].len(),
                cells[1].len()
            ));
            log::warn!("{}", report.warnings.last().unwrap());
        }
        for cell in cells.iter_mut() {
            if cell.len() > keep {
                cell.shuffle(&mut rng);
                for &i in &cell[keep..] {
                    drop[i] = true;
                }
            }
        }
    }
    report.removed = drop.iter().filter(|&&d| d).count();
    let DatasetManifest { classes, samples } = manifest;
    let samples = samples
        .into_iter()
        .zip(drop)
        .filter_map(|(s, d)| (!d).then_some(s))
        .collect();
    Ok((DatasetManifest { classes, samples }, report))
}

/// Removes classes lacking a sample in any (domain × split) cell and re-indexes
/// the survivors densely, preserving their relative order.
pub fn filter_categories(manifest: DatasetManifest) -> Result<DatasetManifest> {
    let train = manifest.split_counts(Split::Train);
    let test = manifest.split_counts(Split::Test);
    let mut remap = vec![None; manifest.num_classes()];
    let mut classes = Vec::new();
    for c in 0..manifest.num_classes() {
        let complete = Domain::ALL
            .iter()
            .all(|&z| train.get(c, z) >= 1 && test.get(c, z) >= 1);
        if complete {
            remap[c] = Some(classes.len());
            classes.push(manifest.classes[c].clone());
        }
    }
    if classes.is_empty() {
        return Err(Error::config(
            "no class has samples in every domain and split; the filtered dataset is empty",
        ));
    }
    let samples = manifest
        .samples
        .into_iter()
        .filter_map(|mut s| {
            remap[s.class_label].map(|c| {
                s.class_label = c;
                s
            })
        })
        .collect();
    Ok(DatasetManifest { classes, samples })
}
