//! Rank n@tIoU=m evaluation and ablation tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{rank_proposals, LgnModel, ModelConfig, Variant};
use crate::moment::{temporal_iou, MomentSpan};
use crate::train::{train, vocab_from_samples, TrainConfig, TrainOutput};

/// Which Rank n@m cells to report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    pub ns: Vec<usize>,
    pub ms: Vec<f64>,
    /// NMS threshold applied before taking the top n.
    pub nms_iou: Option<f64>,
    /// Count a hit only when IoU is strictly above m.
    pub strict: bool,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            ns: vec![1, 5],
            ms: vec![0.3, 0.5, 0.7],
            nms_iou: Some(0.5),
            strict: false,
        }
    }
}

impl MetricSpec {
    pub fn rank1_at(m: f64) -> Self {
        MetricSpec {
            ns: vec![1],
            ms: vec![m],
            nms_iou: None,
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ms.is_empty() {
            return Err(Error::Config("metric spec needs at least one n and one m".into()));
        }
        if self.ns.contains(&0) {
            return Err(Error::Config("rank n must be at least 1".into()));
        }
        if let Some(m) = self.ms.iter().find(|m| !(**m > 0.0 && **m <= 1.0)) {
            return Err(Error::Config(format!("tIoU threshold {m} outside (0, 1]")));
        }
        if let Some(t) = self.nms_iou.filter(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config(format!("NMS threshold {t} outside (0, 1]")));
        }
        Ok(())
    }
}

/// True iff one of the first `n` spans reaches IoU `m` with `gt`.
pub fn query_hit(ranked: &[MomentSpan], gt: &MomentSpan, n: usize, m: f64, strict: bool) -> bool {
    ranked.iter().take(n).any(|s| {
        let iou = temporal_iou(s, gt);
        if strict {
            iou > m
        } else {
            iou >= m
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub n: usize,
    pub m: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    pub queries: usize,
    /// SHA-256 of the evaluated model and metric spec.
    pub fingerprint: String,
}

impl MetricReport {
    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        self.entries.iter().find(|e| e.n == n && e.m == m).map(|e| e.percent)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one row per n.
    pub fn to_table(&self) -> String {
        let mut ns: Vec<usize> = self.entries.iter().map(|e| e.n).collect();
        ns.dedup();
        let mut ms: Vec<f64> = Vec::new();
        for e in &self.entries {
            if !ms.contains(&e.m) {
                ms.push(e.m);
            }
        }
        let mut out = format!("{:<8}", "");
        for m in &ms {
            let _ = write!(out, "{:>10}", format!("IoU={m}"));
        }
        out.push('\n');
        for n in ns {
            let _ = write!(out, "{:<8}", format!("Rank{n}"));
            for &m in &ms {
                let v = self.get(n, m).map_or("-".to_string(), |p| format!("{p:.2}"));
                let _ = write!(out, "{v:>10}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "queries: {}  fingerprint: {}", self.queries, &self.fingerprint[..16]);
        out
    }
}

/// Per-query predictions, for error analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: String,
    pub ground_truth: MomentSpan,
    pub ranked: Vec<MomentSpan>,
}

impl QueryResult {
    pub fn ious(&self) -> Vec<f64> {
        self.ranked.iter().map(|s| temporal_iou(s, &self.ground_truth)).collect()
    }
}

/// CSV with one row per query: id, ground truth and `span:iou` pairs.
pub fn per_query_csv(results: &[QueryResult]) -> String {
    let mut out = String::from("query_id,gt_start_s,gt_end_s,proposals\n");
    for r in results {
        let props: Vec<String> = r
            .ranked
            .iter()
            .zip(r.ious())
            .map(|(s, iou)| format!("{:.3}-{:.3}:{iou:.4}", s.start(), s.end()))
            .collect();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.query_id,
            r.ground_truth.start(),
            r.ground_truth.end(),
            props.join(" ")
        );
    }
    out
}

fn fingerprint(model: &LgnModel, spec: &MetricSpec) -> Result<String> {
    let mut h = Sha256::new();
    h.update(Checkpoint::from_model(model.clone()).to_bytes()?);
    h.update(serde_json::to_vec(spec)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Builds a report from ranked predictions.
pub fn report_from(results: &[QueryResult], spec: &MetricSpec, fingerprint: String) -> Result<MetricReport> {
    spec.validate()?;
    if results.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let mut entries = Vec::with_capacity(spec.ns.len() * spec.ms.len());
    for &n in &spec.ns {
        for &m in &spec.ms {
            let hits = results
                .iter()
                .filter(|r| query_hit(&r.ranked, &r.ground_truth, n, m, spec.strict))
                .count();
            entries.push(MetricEntry {
                n,
                m,
                percent: 100.0 * hits as f64 / results.len() as f64,
            });
        }
    }
    Ok(MetricReport {
        entries,
        queries: results.len(),
        fingerprint,
    })
}

/// Runs the model on every sample and ranks its proposals.
pub fn predict(model: &LgnModel, samples: &[Sample], spec: &MetricSpec) -> Result<Vec<QueryResult>> {
    spec.validate()?;
    let k = spec.ns.iter().copied().max().unwrap_or(1);
    samples
        .iter()
        .map(|s| {
            let input = model.prepare(&s.video, &s.annotation.tokens).map_err(|e| match e {
                Error::Ingestion { .. } => e,
                other => Error::Ingestion {
                    id: s.video.video_id().to_string(),
                    reason: other.to_string(),
                },
            })?;
            let scores = model.score(&input)?;
            let ranked = rank_proposals(&scores, input.map.mask(), k, spec.nms_iou, s.video.duration_s())?;
            Ok(QueryResult {
                query_id: s.query_id.clone(),
                ground_truth: s.annotation.span,
                ranked,
            })
        })
        .collect()
}

/// Rank n@m percentages of `model` on `samples`.
pub fn evaluate(model: &LgnModel, samples: &[Sample], spec: &MetricSpec) -> Result<MetricReport> {
    Ok(evaluate_detailed(model, samples, spec)?.0)
}

/// [`evaluate`] plus the per-query predictions.
pub fn evaluate_detailed(model: &LgnModel, samples: &[Sample], spec: &MetricSpec) -> Result<(MetricReport, Vec<QueryResult>)> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let results = predict(model, samples, spec)?;
    let report = report_from(&results, spec, fingerprint(model, spec)?)?;
    Ok((report, results))
}

/// Median of a non-empty list; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        (v[k - 1] + v[k]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Rank1@IoU0.5 per seed, in seed order.
    pub scores: Vec<f64>,
    pub median: f64,
    /// Median minus the baseline median.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}", "variant");
        for s in &self.seeds {
            let _ = write!(out, "{:>10}", format!("seed {s}"));
        }
        let _ = writeln!(out, "{:>10}{:>10}", "median", "delta");
        for r in &self.rows {
            let _ = write!(out, "{:<10}", r.variant.label());
            for s in &r.scores {
                let _ = write!(out, "{s:>10.2}");
            }
            let _ = writeln!(out, "{:>10.2}{:>+10.2}", r.median, r.delta);
        }
        out
    }
}

/// Trains every variant once per seed and tabulates Rank1@IoU0.5 on `test`.
pub fn ablation_report(
    train_set: &[Sample],
    test_set: &[Sample],
    base: &ModelConfig,
    train_config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let vocab = vocab_from_samples(train_set);
    let spec = MetricSpec::rank1_at(0.5);
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = ModelConfig { seed, ..base.clone() }.with_variant(variant);
            let tc = TrainConfig { seed, ..train_config.clone() };
            let model = LgnModel::new(cfg, vocab.clone())?;
            let (model, _) = train(train_set, model, &tc, &TrainOutput::default())?;
            let report = evaluate(&model, test_set, &spec)?;
            scores.push(report.entries[0].percent);
        }
        rows.push(AblationRow {
            variant,
            median: median(&scores),
            scores,
            delta: 0.0,
        });
    }
    if let Some(base_median) = rows.iter().find(|r| r.variant == Variant::Baseline).map(|r| r.median) {
        for r in &mut rows {
            r.delta = r.median - base_median;
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(a: f64, b: f64) -> MomentSpan {
        MomentSpan::new(a, b).unwrap()
    }

    #[test]
    fn query_hit_examples() {
        let gt = span(0.0, 10.0);
        let top = [span(0.0, 6.0)];
        assert!(query_hit(&top, &gt, 1, 0.5, false));
        assert!(!query_hit(&top, &gt, 1, 0.7, false));
        let five = [span(20.0, 30.0), span(15.0, 18.0), span(1.0, 9.0), span(40.0, 41.0), span(50.0, 60.0)];
        assert!(query_hit(&five, &gt, 5, 0.7, false));
        assert!(!query_hit(&five, &gt, 2, 0.7, false));
        assert!(!query_hit(&[], &gt, 5, 0.1, false));
    }

    #[test]
    fn strict_threshold_excludes_equality() {
        let gt = span(0.0, 10.0);
        let top = [span(0.0, 5.0)];
        assert!(query_hit(&top, &gt, 1, 0.5, false));
        assert!(!query_hit(&top, &gt, 1, 0.5, true));
    }

    #[test]
    fn report_counts() {
        let results = vec![
            QueryResult {
                query_id: "a".into(),
                ground_truth: span(0.0, 4.0),
                ranked: vec![span(0.0, 4.0)],
            },
            QueryResult {
                query_id: "b".into(),
                ground_truth: span(0.0, 4.0),
                ranked: vec![span(8.0, 9.0)],
            },
        ];
        let spec = MetricSpec::rank1_at(0.5);
        let r = report_from(&results, &spec, "0".repeat(64)).unwrap();
        assert_eq!(r.get(1, 0.5), Some(50.0));
        let one = report_from(&results[..1], &MetricSpec::default(), "0".repeat(64)).unwrap();
        assert!(one.entries.iter().all(|e| e.percent == 100.0));
        assert!(one.to_table().contains("Rank5"));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn spec_validation() {
        assert!(MetricSpec::default().validate().is_ok());
        assert!(MetricSpec { ns: vec![0], ..Default::default() }.validate().is_err());
        assert!(MetricSpec { ms: vec![0.0], ..Default::default() }.validate().is_err());
        assert!(MetricSpec { ms: vec![1.1], ..Default::default() }.validate().is_err());
    }
}
