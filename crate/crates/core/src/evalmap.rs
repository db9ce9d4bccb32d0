//! Mapping pseudo-clusters to real classes and scoring the result.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAPPING_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Majority,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub cluster: u32,
    pub class: u32,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majority_fraction: Option<f64>,
    /// The cluster had no members when the mapping was derived.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

/// Pseudo-cluster to class table; may be partial while a user is labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub schema: u32,
    pub n_classes: usize,
    pub entries: Vec<MappingEntry>,
}

impl ClassMapping {
    pub fn new(n_classes: usize) -> Self {
        Self {
            schema: MAPPING_SCHEMA,
            n_classes,
            entries: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ClassMapping = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MAPPING_SCHEMA {
            return Err(Error::Format(format!("unsupported mapping schema {}", self.schema)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.cluster) {
                return Err(Error::Format(format!("cluster {} mapped twice", e.cluster)));
            }
            if e.class as usize >= self.n_classes {
                return Err(Error::Format(format!(
                    "cluster {} mapped to class {} outside [0, {})",
                    e.cluster, e.class, self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn class_of(&self, cluster: u32) -> Option<u32> {
        self.entries.iter().find(|e| e.cluster == cluster).map(|e| e.class)
    }

    /// Inserts or replaces entries, keeping the table sorted by cluster id.
    pub fn merge(&mut self, entries: impl IntoIterator<Item = MappingEntry>) {
        let mut table: BTreeMap<u32, MappingEntry> =
            self.entries.drain(..).map(|e| (e.cluster, e)).collect();
        for e in entries {
            table.insert(e.cluster, e);
        }
        self.entries = table.into_values().collect();
    }

    /// Cluster ids in `[0, k)` without an entry.
    pub fn unmapped(&self, k: usize) -> Vec<u32> {
        (0..k as u32).filter(|&c| self.class_of(c).is_none()).collect()
    }

    fn table(&self) -> BTreeMap<u32, u32> {
        self.entries.iter().map(|e| (e.cluster, e.class)).collect()
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("label sequences differ in length: {a} vs {b}")));
    }
    Ok(())
}

/// Maps every pseudo-cluster to its most frequent true class (lowest id on
/// ties). Empty clusters go to class 0 and are flagged.
pub fn majority_map(assignments: &[u32], true_labels: &[u32], k: usize, n_classes: usize) -> Result<ClassMapping> {
    check_lengths(assignments.len(), true_labels.len())?;
    let mut hist = vec![vec![0usize; n_classes]; k];
    for (&a, &t) in assignments.iter().zip(true_labels) {
        if a as usize >= k || t as usize >= n_classes {
            return Err(Error::Argument(format!("cluster {a} or class {t} out of range")));
        }
        hist[a as usize][t as usize] += 1;
    }
    let mut mapping = ClassMapping::new(n_classes);
    for (c, h) in hist.iter().enumerate() {
        let size: usize = h.iter().sum();
        let best = (0..n_classes).fold(0, |b, x| if h[x] > h[b] { x } else { b });
        mapping.entries.push(MappingEntry {
            cluster: c as u32,
            class: best as u32,
            provenance: Provenance::Majority,
            majority_fraction: (size > 0).then(|| h[best] as f64 / size as f64),
            empty: size == 0,
        });
    }
    Ok(mapping)
}

/// Pointwise lookup; fails listing every observed cluster without an entry.
pub fn apply_mapping(assignments: &[u32], mapping: &ClassMapping) -> Result<Vec<u32>> {
    let table = mapping.table();
    let mut missing: Vec<u32> = assignments.iter().filter(|a| !table.contains_key(a)).copied().collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Unmapped(missing));
    }
    Ok(assignments.iter().map(|a| table[a]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_points: usize,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<u64>>,
    /// `None` when a class is neither present nor predicted.
    pub iou: Vec<Option<f64>>,
    /// Per-class recall; `None` without support.
    pub accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub macc: f64,
    pub miou_ch: f64,
    pub change_classes: Vec<u32>,
}

pub fn metrics(pred: &[u32], truth: &[u32], n_classes: usize, change_class_ids: &[u32]) -> Result<MetricsReport> {
    check_lengths(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::Argument("no points to evaluate".into()));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= n_classes || t as usize >= n_classes {
            return Err(Error::Argument(format!("class id out of range: pred {p}, true {t}")));
        }
        confusion[t as usize][p as usize] += 1;
    }
    let row = |c: usize| confusion[c].iter().sum::<u64>();
    let col = |c: usize| confusion.iter().map(|r| r[c]).sum::<u64>();
    let iou: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let union = row(c) + col(c) - confusion[c][c];
            (union > 0).then(|| confusion[c][c] as f64 / union as f64)
        })
        .collect();
    let accuracy: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let r = row(c);
            (r > 0).then(|| confusion[c][c] as f64 / r as f64)
        })
        .collect();
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let macc = mean(accuracy.iter().flatten().copied().collect());
    let miou_ch = mean(
        change_class_ids
            .iter()
            .filter_map(|&c| iou.get(c as usize).copied().flatten())
            .collect(),
    );
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        n_points: pred.len(),
        overall_accuracy: correct as f64 / pred.len() as f64,
        confusion,
        iou,
        accuracy,
        macc,
        miou_ch,
        change_classes: change_class_ids.to_vec(),
    })
}

impl MetricsReport {
    /// Plain-text per-class table followed by the summary scores, in percent.
    pub fn to_table(&self, class_names: &[&str]) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:8.2}", 100.0 * x)).unwrap_or_else(|| "       -".into());
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>8} {:>8} {:>10}", "class", "IoU(%)", "Acc(%)", "support");
        for c in 0..self.iou.len() {
            let name = class_names.get(c).copied().unwrap_or("?");
            let support: u64 = self.confusion[c].iter().sum();
            let _ = writeln!(s, "{:<20} {} {} {:>10}", name, pct(self.iou[c]), pct(self.accuracy[c]), support);
        }
        let _ = writeln!(s, "{:<20} {:8.2}", "mAcc(%)", 100.0 * self.macc);
        let _ = writeln!(s, "{:<20} {:8.2}", "mIoU_ch(%)", 100.0 * self.miou_ch);
        let _ = writeln!(s, "{:<20} {:8.2}", "OA(%)", 100.0 * self.overall_accuracy);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub iou_changed: f64,
    pub iou_unchanged: f64,
    pub macc: f64,
}

/// Scores with every non-zero class merged into "changed".
pub fn binary_collapse(pred: &[u32], truth: &[u32]) -> Result<BinaryMetrics> {
    let collapse = |v: &[u32]| v.iter().map(|&l| (l != 0) as u32).collect::<Vec<_>>();
    let r = metrics(&collapse(pred), &collapse(truth), 2, &[1])?;
    Ok(BinaryMetrics {
        iou_changed: r.iou[1].unwrap_or(0.0),
        iou_unchanged: r.iou[0].unwrap_or(0.0),
        macc: r.macc,
    })
}
