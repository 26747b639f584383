//! Long-tail evaluation: shot splits, major/minor samples, balanced/imbalanced
//! classes and the accuracy table built from them.
//!
//! All class statistics come from the training split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_model::{compute_stats, DatasetManifest, Domain, DomainCounts, DomainStats, Split};
use crate::error::{Error, Result};
use crate::inference::PredictionRecord;

/// Classes with at least this ratio between their domains are imbalanced.
pub const IMBALANCE_RATIO: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Many,
    Medium,
    Few,
}

impl Shot {
    pub fn from_count(train_count: usize) -> Self {
        match train_count {
            n if n > 100 => Shot::Many,
            n if n >= 20 => Shot::Medium,
            _ => Shot::Few,
        }
    }
}

/// Shot split per class from per-class training totals.
pub fn shot_split(train_counts: &DomainCounts) -> Vec<Shot> {
    (0..train_counts.num_classes())
        .map(|c| Shot::from_count(train_counts.class_total(c)))
        .collect()
}

/// Classes whose `max_z n / min_z n` reaches [`IMBALANCE_RATIO`].
pub fn imbalanced_classes(train_counts: &DomainCounts) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for (c, &[day, night]) in train_counts.0.iter().enumerate() {
        let lo = day.min(night);
        if lo == 0 {
            return Err(Error::contract(format!("class {c} has no training samples in one domain")));
        }
        if day.max(night) as f64 / lo as f64 >= IMBALANCE_RATIO {
            out.insert(c);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Major,
    Minor,
}

/// Major iff `domain` is a dominant domain of `class` (ties count as major).
pub fn label_major_minor(class: usize, domain: Domain, stats: &DomainStats) -> SampleKind {
    if stats.dominant[class].is_dominant(domain) {
        SampleKind::Major
    } else {
        SampleKind::Minor
    }
}

/// Correct/total counts of one table cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
    /// Percent; `None` when the cell is empty.
    pub accuracy: Option<f64>,
}

impl Cell {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    fn finish(&mut self) {
        self.accuracy = (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub balanced: Cell,
    pub imbalanced: Cell,
    pub total: Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// How the many/medium/few cells average: over samples, not over classes.
    pub shot_accuracy: String,
    pub num_records: usize,
    pub num_test_sequences: usize,
    pub imbalanced_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub many: Cell,
    pub medium: Cell,
    pub few: Cell,
    pub major: SampleGroup,
    pub minor: SampleGroup,
    pub all: Cell,
    pub metadata: ReportMetadata,
}

/// Fills the accuracy table from prediction records of the manifest's test
/// split. Every test sequence needs at least one record; several records per
/// sequence (one per frame) each count as a sample.
pub fn evaluate(records: &[PredictionRecord], manifest: &DatasetManifest) -> Result<EvalReport> {
    let train = manifest.counts();
    let shots = shot_split(&train);
    let imbalanced = imbalanced_classes(&train)?;
    let stats = compute_stats(&train);

    let test: BTreeMap<&str, (usize, Domain)> = manifest
        .samples_in(Split::Test)
        .map(|s| (s.id.as_str(), (s.class_label, s.domain)))
        .collect();
    let seen: BTreeSet<&str> = records.iter().map(|r| r.sequence_id.as_str()).collect();
    let missing: Vec<String> = test.keys().filter(|id| !seen.contains(*id)).map(|id| id.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }

    let mut report = EvalReport {
        many: Cell::default(),
        medium: Cell::default(),
        few: Cell::default(),
        major: SampleGroup::default(),
        minor: SampleGroup::default(),
        all: Cell::default(),
        metadata: ReportMetadata {
            shot_accuracy: "per-sample".into(),
            num_records: records.len(),
            num_test_sequences: test.len(),
            imbalanced_classes: imbalanced.iter().copied().collect(),
        },
    };
    for r in records {
        let Some(&(class, domain)) = test.get(r.sequence_id.as_str()) else {
            return Err(Error::Mismatch(format!("{} is not a test sequence of the manifest", r.sequence_id)));
        };
        if r.y_true != class {
            return Err(Error::Mismatch(format!(
                "{} has label {class} in the manifest but {} in the predictions",
                r.sequence_id, r.y_true
            )));
        }
        let ok = r.y_pred == class;
        report.all.add(ok);
        match shots[class] {
            Shot::Many => report.many.add(ok),
            Shot::Medium => report.medium.add(ok),
            Shot::Few => report.few.add(ok),
        }
        let group = match label_major_minor(class, domain, &stats) {
            SampleKind::Major => &mut report.major,
            SampleKind::Minor => &mut report.minor,
        };
        group.total.add(ok);
        if imbalanced.contains(&class) {
            group.imbalanced.add(ok);
        } else {
            group.balanced.add(ok);
        }
    }
    for cell in report.cells_mut() {
        cell.finish();
    }
    Ok(report)
}

impl EvalReport {
    fn cells_mut(&mut self) -> [&mut Cell; 10] {
        [
            &mut self.many,
            &mut self.medium,
            &mut self.few,
            &mut self.major.balanced,
            &mut self.major.imbalanced,
            &mut self.major.total,
            &mut self.minor.balanced,
            &mut self.minor.imbalanced,
            &mut self.minor.total,
            &mut self.all,
        ]
    }

    /// `(column name, cell)` in table order.
    pub fn columns(&self) -> [(&'static str, &Cell); 10] {
        [
            ("Many", &self.many),
            ("Medium", &self.medium),
            ("Few", &self.few),
            ("MJ-Bal", &self.major.balanced),
            ("MJ-Imbal", &self.major.imbalanced),
            ("MJ-Total", &self.major.total),
            ("MN-Bal", &self.minor.balanced),
            ("MN-Imbal", &self.minor.imbalanced),
            ("MN-Total", &self.minor.total),
            ("All", &self.all),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Aligned plain-text table; empty cells print as `-`.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let width = cols.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        let mut header = String::new();
        let mut acc = String::new();
        let mut counts = String::new();
        for (name, cell) in cols {
            let _ = write!(header, "{name:>width$}  ");
            match cell.accuracy {
                Some(a) => {
                    let _ = write!(acc, "{a:>width$.1}  ");
                }
                None => {
                    let _ = write!(acc, "{:>width$}  ", "-");
                }
            }
            let _ = write!(counts, "{:>width$}  ", format!("{}/{}", cell.correct, cell.total));
        }
        format!("{}\n{}\n{}\n", header.trim_end(), acc.trim_end(), counts.trim_end())
    }
}
