//! Temporal grounding metrics.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splitter::{SplitManifest, Split, Witness};

/// IoU thresholds reported by default.
pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub query_id: String,
    /// Ranked normalized intervals, best first.
    pub intervals: Vec<(f64, f64)>,
}

impl PredictionRecord {
    pub fn new(query_id: impl Into<String>, intervals: Vec<(f64, f64)>) -> Self {
        Self {
            query_id: query_id.into(),
            intervals,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::MissingPrediction(self.query_id.clone()));
        }
        for &(s, e) in &self.intervals {
            check_interval((s, e))?;
        }
        Ok(())
    }
}

fn check_interval((s, e): (f64, f64)) -> Result<()> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&e) || s > e {
        return Err(Error::InvalidInterval(s, e));
    }
    Ok(())
}

/// Intersection over union; zero when the union has zero length.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ground-truth interval per query id.
pub type GroundTruth = BTreeMap<String, (f64, f64)>;

fn lookup<'a>(preds: &'a [PredictionRecord], gts: &GroundTruth) -> Result<Vec<(&'a PredictionRecord, (f64, f64))>> {
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.query_id.as_str(), p)).collect();
    gts.iter()
        .map(|(id, &gt)| {
            let p = by_id.get(id.as_str()).ok_or_else(|| Error::MissingPrediction(id.clone()))?;
            p.validate()?;
            check_interval(gt)?;
            Ok((*p, gt))
        })
        .collect()
}

/// Percentage of queries whose top-`n` predictions include one with IoU
/// strictly above `m`.
pub fn recall_at_n(preds: &[PredictionRecord], gts: &GroundTruth, n: usize, m: f64) -> Result<f64> {
    let pairs = lookup(preds, gts)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = pairs
        .par_iter()
        .map(|(p, gt)| usize::from(p.intervals.iter().take(n.max(1)).any(|&iv| temporal_iou(iv, *gt) > m)))
        .sum();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Average top-1 IoU as a percentage.
pub fn mean_iou(preds: &[PredictionRecord], gts: &GroundTruth) -> Result<f64> {
    let pairs = lookup(preds, gts)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let ious: Vec<f64> = pairs.par_iter().map(|(p, gt)| temporal_iou(p.intervals[0], *gt)).collect();
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub composition_type: String,
    pub queries: usize,
    pub recall_1_05: f64,
}

/// R@1, IoU=0.5 of novel-composition queries grouped by witness type.
pub fn per_type_breakdown(preds: &[PredictionRecord], gts: &GroundTruth, manifest: &SplitManifest) -> Result<Vec<TypeRow>> {
    let mut groups: BTreeMap<&'static str, GroundTruth> = BTreeMap::new();
    for a in manifest.queries(Split::NovelComposition) {
        let Some(Witness::Composition { kind, .. }) = &a.witness else {
            continue;
        };
        if let Some(&gt) = gts.get(&a.query_id) {
            groups.entry(kind.as_str()).or_default().insert(a.query_id.clone(), gt);
        }
    }
    groups
        .into_iter()
        .map(|(k, g)| {
            Ok(TypeRow {
                composition_type: k.to_string(),
                queries: g.len(),
                recall_1_05: recall_at_n(preds, &g, 1, 0.5)?,
            })
        })
        .collect()
}

/// Relative degradation `|r_orig - r_shuff| / r_orig`.
pub fn order_sensitivity(r_orig: f64, r_shuff: f64) -> Result<f64> {
    if r_orig == 0.0 {
        return Err(Error::UndefinedSensitivity);
    }
    Ok((r_orig - r_shuff).abs() / r_orig)
}

/// Mean sensitivity over several shuffled runs.
pub fn mean_order_sensitivity(r_orig: f64, shuffled: &[f64]) -> Result<f64> {
    let ratios = shuffled
        .iter()
        .map(|&r| order_sensitivity(r_orig, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ratios.iter().sum::<f64>() / ratios.len().max(1) as f64)
}

/// Mean start and mean end of the given intervals.
pub fn mean_interval<'a>(intervals: impl IntoIterator<Item = &'a (f64, f64)>) -> (f64, f64) {
    let (mut s, mut e, mut n) = (0.0, 0.0, 0usize);
    for iv in intervals {
        s += iv.0;
        e += iv.1;
        n += 1;
    }
    if n == 0 {
        (0.0, 1.0)
    } else {
        (s / n as f64, e / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub queries: usize,
    /// `"R@n,IoU=m"` → percentage.
    pub recall: BTreeMap<String, f64>,
    pub miou: f64,
}

impl SplitMetrics {
    pub fn recall(&self, n: usize, m: f64) -> Option<f64> {
        self.recall.get(&recall_key(n, m)).copied()
    }
}

pub fn recall_key(n: usize, m: f64) -> String {
    format!("R@{n},IoU={m:.1}")
}

pub fn split_metrics(split: &str, preds: &[PredictionRecord], gts: &GroundTruth, ns: &[usize]) -> Result<SplitMetrics> {
    let mut recall = BTreeMap::new();
    for &n in ns {
        for m in THRESHOLDS {
            recall.insert(recall_key(n, m), recall_at_n(preds, gts, n, m)?);
        }
    }
    Ok(SplitMetrics {
        split: split.to_string(),
        queries: gts.len(),
        recall,
        miou: mean_iou(preds, gts)?,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub splits: Vec<SplitMetrics>,
    pub per_type: Vec<TypeRow>,
    /// The same splits scored with one constant interval per query.
    pub baseline: Vec<SplitMetrics>,
}

impl MetricReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn baseline(&self, name: &str) -> Option<&SplitMetrics> {
        self.baseline.iter().find(|s| s.split == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let tagged = self.splits.iter().map(|s| ("", s)).chain(self.baseline.iter().map(|s| ("baseline ", s)));
        for (tag, s) in tagged {
            out.push_str(&format!("[{tag}{}] queries={}\n", s.split, s.queries));
            for (k, v) in &s.recall {
                out.push_str(&format!("  {k:<14} {v:>7.2}\n"));
            }
            out.push_str(&format!("  {:<14} {:>7.2}\n", "mIoU", s.miou));
        }
        if !self.per_type.is_empty() {
            out.push_str("[per-type novel-composition R@1,IoU=0.5]\n");
            for r in &self.per_type {
                out.push_str(&format!("  {:<18} {:>5} {:>7.2}\n", r.composition_type, r.queries, r.recall_1_05));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gts(items: &[(&str, (f64, f64))]) -> GroundTruth {
        items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou((0.2, 0.6), (0.2, 0.6)), 1.0);
        assert_eq!(temporal_iou((0.0, 0.2), (0.5, 0.8)), 0.0);
        assert!((temporal_iou((0.2, 0.6), (0.4, 0.8)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(temporal_iou((0.3, 0.3), (0.3, 0.3)), 0.0);
    }

    #[test]
    fn recall_examples() {
        let g = gts(&[("a", (0.2, 0.6)), ("b", (0.0, 0.2))]);
        let exact = vec![PredictionRecord::new("a", vec![(0.2, 0.6)]), PredictionRecord::new("b", vec![(0.0, 0.2)])];
        assert_eq!(recall_at_n(&exact, &g, 1, 0.5).unwrap(), 100.0);
        let half = vec![PredictionRecord::new("a", vec![(0.2, 0.6)]), PredictionRecord::new("b", vec![(0.5, 0.9)])];
        assert_eq!(recall_at_n(&half, &g, 1, 0.5).unwrap(), 50.0);
        assert_eq!(recall_at_n(&half, &g, 5, 0.5).unwrap(), 50.0);
        assert!(matches!(recall_at_n(&half[..1], &g, 1, 0.5), Err(Error::MissingPrediction(_))));
    }

    #[test]
    fn strict_threshold() {
        let g = gts(&[("a", (0.0, 1.0))]);
        let p = vec![PredictionRecord::new("a", vec![(0.0, 0.5)])];
        assert_eq!(recall_at_n(&p, &g, 1, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn miou_examples() {
        let g = gts(&[("a", (0.2, 0.6)), ("b", (0.2, 0.6))]);
        let p = vec![PredictionRecord::new("a", vec![(0.2, 0.6)]), PredictionRecord::new("b", vec![(0.4, 0.8)])];
        assert!((mean_iou(&p, &g).unwrap() - 66.6667).abs() < 0.01);
        let far = vec![PredictionRecord::new("a", vec![(0.8, 0.9)]), PredictionRecord::new("b", vec![(0.8, 0.9)])];
        assert_eq!(mean_iou(&far, &g).unwrap(), 0.0);
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(order_sensitivity(50.0, 50.0).unwrap(), 0.0);
        assert!((order_sensitivity(50.0, 40.0).unwrap() - 0.2).abs() < 1e-12);
        assert!((order_sensitivity(50.0, 60.0).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(order_sensitivity(0.0, 10.0), Err(Error::UndefinedSensitivity)));
    }

    #[test]
    fn invalid_records_rejected() {
        assert!(PredictionRecord::new("a", vec![]).validate().is_err());
        assert!(PredictionRecord::new("a", vec![(0.6, 0.2)]).validate().is_err());
        assert!(PredictionRecord::new("a", vec![(0.2, 1.2)]).validate().is_err());
    }
}
