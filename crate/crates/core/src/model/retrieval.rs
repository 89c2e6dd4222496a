use crate::autograd::Mask2d;
use crate::error::{Error, Result};
use crate::moment::{cell_to_span, temporal_iou, MomentSpan};

/// Valid cells ordered by descending score; ties go to the smaller start,
/// then the smaller end.
pub fn ranked_cells(scores: &[f64], mask: &Mask2d) -> Vec<(usize, usize)> {
    let n = mask.cols();
    let mut cells: Vec<(usize, usize)> = (0..mask.rows())
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| mask.is_valid(a, b))
        .collect();
    cells.sort_by(|&(a1, b1), &(a2, b2)| {
        scores[a2 * n + b2]
            .total_cmp(&scores[a1 * n + b1])
            .then(a1.cmp(&a2))
            .then(b1.cmp(&b2))
    });
    cells
}

/// The best-scoring valid cell, as a time span.
pub fn retrieve(scores: &[f64], mask: &Mask2d, duration_s: f64) -> Result<MomentSpan> {
    let &(a, b) = ranked_cells(scores, mask).first().ok_or(Error::NoProposal)?;
    cell_to_span(a, b, mask.cols(), duration_s)
}

/// Top `k` spans by score. With `nms_iou`, a candidate is dropped when its
/// IoU with an already kept span reaches the threshold.
pub fn rank_proposals(
    scores: &[f64],
    mask: &Mask2d,
    k: usize,
    nms_iou: Option<f64>,
    duration_s: f64,
) -> Result<Vec<MomentSpan>> {
    if k == 0 {
        return Err(Error::Config("rank_proposals needs k >= 1".into()));
    }
    let n = mask.cols();
    let mut kept: Vec<MomentSpan> = Vec::with_capacity(k);
    for (a, b) in ranked_cells(scores, mask) {
        let span = cell_to_span(a, b, n, duration_s)?;
        let suppressed = nms_iou.is_some_and(|t| kept.iter().any(|s| temporal_iou(s, &span) >= t));
        if !suppressed {
            kept.push(span);
            if kept.len() == k {
                break;
            }
        }
    }
    Ok(kept)
}
