//! Clip features, time spans and the 2D proposal map.
//!
//! Cell `(a, b)` of an `N×N` map is the proposal that starts at clip `a` and
//! ends at clip `b`; it is valid iff `a <= b` and covers
//! `[a·τ, (b+1)·τ]` seconds with `τ = duration / N`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Mask2d;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A non-degenerate time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpan", into = "RawSpan")]
pub struct MomentSpan {
    start_s: f64,
    end_s: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSpan {
    start_s: f64,
    end_s: f64,
}

impl TryFrom<RawSpan> for MomentSpan {
    type Error = Error;

    fn try_from(r: RawSpan) -> Result<Self> {
        MomentSpan::new(r.start_s, r.end_s)
    }
}

impl From<MomentSpan> for RawSpan {
    fn from(s: MomentSpan) -> Self {
        RawSpan {
            start_s: s.start_s,
            end_s: s.end_s,
        }
    }
}

impl MomentSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite() && start_s >= 0.0 && end_s > start_s) {
            return Err(Error::InvalidSpan { start: start_s, end: end_s });
        }
        Ok(MomentSpan { start_s, end_s })
    }

    pub fn start(&self) -> f64 {
        self.start_s
    }

    pub fn end(&self) -> f64 {
        self.end_s
    }

    pub fn length(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Intersection over union of two intervals.
pub fn temporal_iou(x: &MomentSpan, y: &MomentSpan) -> f64 {
    let inter = (x.end_s.min(y.end_s) - x.start_s.max(y.start_s)).max(0.0);
    let union = x.end_s.max(y.end_s) - x.start_s.min(y.start_s);
    inter / union
}

/// Per-clip visual features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatureSequence {
    video_id: String,
    features: Tensor,
    duration_s: f64,
}

impl ClipFeatureSequence {
    /// `features` must be `T×d_v` with `T >= 1` and finite values.
    pub fn new(video_id: impl Into<String>, features: Tensor, duration_s: f64) -> Result<Self> {
        let video_id = video_id.into();
        let s = features.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Shape(format!(
                "clip features of `{video_id}` must be a non-empty T×d matrix, got {s:?}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Shape(format!("clip features of `{video_id}` are not finite")));
        }
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::Config(format!("video `{video_id}` has duration {duration_s}")));
        }
        Ok(ClipFeatureSequence {
            video_id,
            features,
            duration_s,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn clip_count(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[1]
    }

    fn row(&self, t: usize) -> &[f64] {
        let d = self.feature_width();
        &self.features.data()[t * d..(t + 1) * d]
    }
}

/// Averages `T` clips down (or up) to `n` clips.
///
/// Output clip `i` is the mean of input clips
/// `floor(i·T/n) .. floor((i+1)·T/n)`; when that range is empty (`T < n`)
/// it copies the clip nearest to the group centre.
pub fn resample_clips(seq: &ClipFeatureSequence, n: usize) -> Result<ClipFeatureSequence> {
    if n == 0 {
        return Err(Error::Config("resample target must be at least one clip".into()));
    }
    let t = seq.clip_count();
    let d = seq.feature_width();
    if t == n {
        return Ok(seq.clone());
    }
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let lo = i * t / n;
        let hi = (i + 1) * t / n;
        if hi > lo {
            let mut acc = vec![0.0; d];
            for r in lo..hi {
                for (a, v) in acc.iter_mut().zip(seq.row(r)) {
                    *a += v;
                }
            }
            let count = (hi - lo) as f64;
            out.extend(acc.into_iter().map(|v| v / count));
        } else {
            let centre = (i as f64 + 0.5) * t as f64 / n as f64 - 0.5;
            let r = (centre.round().max(0.0) as usize).min(t - 1);
            out.extend_from_slice(seq.row(r));
        }
    }
    ClipFeatureSequence::new(seq.video_id.clone(), Tensor::new(vec![n, d], out)?, seq.duration_s)
}

/// Time span covered by map cell `(a, b)`.
pub fn cell_to_span(a: usize, b: usize, n: usize, duration_s: f64) -> Result<MomentSpan> {
    if a > b || b >= n {
        return Err(Error::InvalidCell { a, b, n });
    }
    let tau = duration_s / n as f64;
    MomentSpan::new(a as f64 * tau, (b + 1) as f64 * tau)
}

/// Valid cell whose span best overlaps `span`; ties go to the smaller start
/// and then the smaller end.
pub fn span_to_best_cell(span: &MomentSpan, n: usize, duration_s: f64) -> Result<(usize, usize)> {
    if span.end_s > duration_s + 1e-9 {
        return Err(Error::InvalidSpan {
            start: span.start_s,
            end: span.end_s,
        });
    }
    let mut best = None;
    let mut best_iou = f64::NEG_INFINITY;
    for a in 0..n {
        for b in a..n {
            let iou = temporal_iou(&cell_to_span(a, b, n, duration_s)?, span);
            if iou > best_iou {
                best_iou = iou;
                best = Some((a, b));
            }
        }
    }
    best.ok_or(Error::NoProposal)
}

/// Pooling used to build cell features from clip features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Max,
    Mean,
}

/// The 2D proposal map of one video.
#[derive(Debug, Clone)]
pub struct TemporalMap {
    n: usize,
    mask: Arc<Mask2d>,
    cell_features: Tensor,
}

impl TemporalMap {
    pub fn side(&self) -> usize {
        self.n
    }

    pub fn mask(&self) -> &Arc<Mask2d> {
        &self.mask
    }

    /// `d×N×N`, zero on invalid cells.
    pub fn cell_features(&self) -> &Tensor {
        &self.cell_features
    }

    pub fn valid_count(&self) -> usize {
        self.mask.count()
    }

    /// Feature vector of cell `(a, b)`.
    pub fn cell(&self, a: usize, b: usize) -> Vec<f64> {
        let nn = self.n * self.n;
        let d = self.cell_features.shape()[0];
        (0..d).map(|c| self.cell_features.data()[c * nn + a * self.n + b]).collect()
    }
}

/// Builds the proposal map from a sequence already resampled to `N` clips.
pub fn pool_moment_features(seq: &ClipFeatureSequence, mode: PoolingMode) -> TemporalMap {
    let n = seq.clip_count();
    let d = seq.feature_width();
    let nn = n * n;
    let mut data = vec![0.0; d * nn];
    for a in 0..n {
        let mut running = seq.row(a).to_vec();
        for b in a..n {
            if b > a {
                for (r, &v) in running.iter_mut().zip(seq.row(b)) {
                    *r = match mode {
                        PoolingMode::Max => r.max(v),
                        PoolingMode::Mean => *r + v,
                    };
                }
            }
            let count = (b - a + 1) as f64;
            for (c, &r) in running.iter().enumerate() {
                data[c * nn + a * n + b] = match mode {
                    PoolingMode::Max => r,
                    PoolingMode::Mean => r / count,
                };
            }
        }
    }
    TemporalMap {
        n,
        mask: Arc::new(Mask2d::upper_triangular(n)),
        cell_features: Tensor::new(vec![d, n, n], data).expect("sized above"),
    }
}

/// IoU of every valid cell with `gt`, row-major `N×N`, zero on invalid cells.
pub fn iou_field(n: usize, gt: &MomentSpan, duration_s: f64) -> Result<Vec<f64>> {
    let mut field = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            field[a * n + b] = temporal_iou(&cell_to_span(a, b, n, duration_s)?, gt);
        }
    }
    Ok(field)
}

/// One sentence query with its ground-truth moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub tokens: Vec<String>,
    #[serde(flatten)]
    pub span: MomentSpan,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(a: f64, b: f64) -> MomentSpan {
        MomentSpan::new(a, b).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(&span(1.0, 3.0), &span(1.0, 3.0)), 1.0);
        assert_eq!(temporal_iou(&span(0.0, 1.0), &span(2.0, 3.0)), 0.0);
        assert!((temporal_iou(&span(0.0, 4.0), &span(2.0, 6.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_spans_rejected() {
        assert!(matches!(MomentSpan::new(2.0, 2.0), Err(Error::InvalidSpan { .. })));
        assert!(MomentSpan::new(3.0, 1.0).is_err());
        assert!(MomentSpan::new(-1.0, 1.0).is_err());
        assert!(MomentSpan::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn cell_span_conversion() {
        let s = cell_to_span(0, 7, 8, 16.0).unwrap();
        assert_eq!((s.start(), s.end()), (0.0, 16.0));
        let s = cell_to_span(2, 4, 8, 16.0).unwrap();
        assert_eq!((s.start(), s.end()), (4.0, 10.0));
        assert!(matches!(cell_to_span(3, 1, 8, 16.0), Err(Error::InvalidCell { .. })));
        assert!(cell_to_span(0, 8, 8, 16.0).is_err());
    }

    #[test]
    fn best_cell_examples() {
        assert_eq!(span_to_best_cell(&span(4.0, 10.0), 8, 16.0).unwrap(), (2, 4));
        assert_eq!(span_to_best_cell(&span(0.0, 16.0), 8, 16.0).unwrap(), (0, 7));
        // brute force: (2,4) covers [4,10], IoU 6/6.2; all neighbours lower
        let near = span(3.9, 10.1);
        let mut best = (0, 0, -1.0);
        for a in 0..8 {
            for b in a..8 {
                let s = MomentSpan::new(a as f64 * 2.0, (b + 1) as f64 * 2.0).unwrap();
                let inter = (s.end().min(10.1) - s.start().max(3.9)).max(0.0);
                let union = s.end().max(10.1) - s.start().min(3.9);
                if inter / union > best.2 {
                    best = (a, b, inter / union);
                }
            }
        }
        assert_eq!((best.0, best.1), (2, 4));
        assert_eq!(span_to_best_cell(&near, 8, 16.0).unwrap(), (2, 4));
    }

    #[test]
    fn resample_examples() {
        let rows = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 9.0]]).unwrap();
        let seq = ClipFeatureSequence::new("v", rows, 8.0).unwrap();
        assert_eq!(resample_clips(&seq, 4).unwrap(), seq);
        let half = resample_clips(&seq, 2).unwrap();
        assert_eq!(half.features().data(), &[2.0, 3.0, 6.0, 7.5]);

        let constant = ClipFeatureSequence::new("c", Tensor::full(vec![5, 3], 0.25), 5.0).unwrap();
        for n in 1..12 {
            let r = resample_clips(&constant, n).unwrap();
            assert_eq!(r.clip_count(), n);
            assert!(r.features().data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn upsampling_uses_nearest_clip() {
        let seq = ClipFeatureSequence::new("v", Tensor::from_rows(&[&[1.0], &[2.0]]).unwrap(), 2.0).unwrap();
        let r = resample_clips(&seq, 4).unwrap();
        assert_eq!(r.features().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pooling_examples() {
        let seq = ClipFeatureSequence::new("v", Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]).unwrap(), 2.0).unwrap();
        let map = pool_moment_features(&seq, PoolingMode::Max);
        assert_eq!(map.cell(0, 0), vec![1.0, 5.0]);
        assert_eq!(map.cell(1, 1), vec![3.0, 2.0]);
        assert_eq!(map.cell(0, 1), vec![3.0, 5.0]);
        assert_eq!(map.cell(1, 0), vec![0.0, 0.0]);
        let mean = pool_moment_features(&seq, PoolingMode::Mean);
        assert_eq!(mean.cell(0, 1), vec![2.0, 3.5]);
    }

    #[test]
    fn iou_field_brute_force() {
        let gt = span(2.0, 6.0);
        let field = iou_field(4, &gt, 8.0).unwrap();
        // τ = 2s; hand table of the 10 valid cells
        let expected = [
            [0.0, 1.0 / 3.0, 4.0 / 6.0, 4.0 / 8.0],
            [0.0, 1.0 / 2.0, 1.0, 2.0 / 3.0],
            [0.0, 0.0, 1.0 / 2.0, 2.0 / 6.0],
            [0.0, 0.0, 0.0, 0.0],
        ];
        for a in 0..4 {
            for b in 0..4 {
                assert!((field[a * 4 + b] - expected[a][b]).abs() < 1e-15, "cell ({a},{b})");
            }
        }
        let full = iou_field(4, &span(0.0, 8.0), 8.0).unwrap();
        assert_eq!(full[3], 1.0);
    }

    #[test]
    fn annotation_json_shape() {
        let rec: AnnotationRecord =
            serde_json::from_str(r#"{"video_id":"v1","tokens":["a","b"],"start_s":1.5,"end_s":3.0}"#).unwrap();
        assert_eq!(rec.span.start(), 1.5);
        assert!(serde_json::from_str::<AnnotationRecord>(r#"{"video_id":"v1","tokens":[],"start_s":3,"end_s":1}"#).is_err());
    }
}
