//! Tape-level building blocks of the network.

use std::sync::Arc;

use rand::RngCore;

use super::config::LateNorm;
use crate::autograd::{Mask2d, NormGroup, Tape, Var, L2_EPS};
use crate::error::{Error, Result};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// `W x + b` for a vector `x`.
pub fn linear_vec(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
    crate::text::sentence_embed(tape, x, weight, bias)
}

/// Applies `W [d_out×d_in]` and `b [d_out]` to every cell of a
/// `d_in×N×N` map, then re-masks.
pub fn per_cell_linear(tape: &mut Tape, x: Var, weight: Var, bias: Var, mask: &Arc<Mask2d>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected a C×H×W map, got {s:?}")));
    }
    let flat = tape.reshape(x, vec![s[0], s[1] * s[2]])?;
    let y = tape.matmul(weight, flat)?;
    let y = tape.broadcast_add(y, bias, 0)?;
    let d_out = tape.shape(y)[0];
    let y = tape.reshape(y, vec![d_out, s[1], s[2]])?;
    tape.mask(y, mask)
}

/// Early modulation: `F = gate ∘ f_v`, with the gate `W^M f_s + b`
/// broadcast over every cell.
pub fn early_modulate(tape: &mut Tape, f_v: Var, gate: Var) -> Result<Var> {
    let (sv, sg) = (tape.shape(f_v).to_vec(), tape.shape(gate).to_vec());
    if sg.len() != 1 || sv.first() != sg.first() {
        return Err(Error::dim("early_modulate", &sv, &sg));
    }
    tape.broadcast_mul(f_v, gate, 0)
}

/// Per-cell visual stack: `linear → [modulate] → dropout`, once per layer.
///
/// `gate` is `None` for the unmodulated ablation. `rng` is `None` in
/// evaluation mode.
pub fn visual_head(
    tape: &mut Tape,
    features: Var,
    gate: Option<Var>,
    layers: &[(Var, Var)],
    mask: &Arc<Mask2d>,
    drop_probability: f64,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let mut x = features;
    for &(w, b) in layers {
        x = per_cell_linear(tape, x, w, b, mask)?;
        if let Some(g) = gate {
            x = early_modulate(tape, x, g)?;
            x = tape.mask(x, mask)?;
        }
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, drop_probability, true, r)?;
        }
    }
    Ok(x)
}

/// Projection pairs of the fusion stage.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub visual_w: Var,
    pub visual_b: Var,
    pub sentence_w: Var,
    pub sentence_b: Var,
}

/// Projects both modalities to `d_h`, takes their Hadamard product at every
/// valid cell and L2-normalizes each cell vector.
pub fn fuse(tape: &mut Tape, v: Var, f_s: Var, p: &FusionVars, mask: &Arc<Mask2d>) -> Result<Var> {
    let pv = per_cell_linear(tape, v, p.visual_w, p.visual_b, mask)?;
    let ps = linear_vec(tape, p.sentence_w, p.sentence_b, f_s)?;
    let joint = tape.broadcast_mul(pv, ps, 0)?;
    let joint = tape.mask(joint, mask)?;
    tape.l2_normalize(joint, NormGroup::Along(0), L2_EPS)
}

/// Late guidance: scales each channel by `alpha` and L2-normalizes.
pub fn late_guide(tape: &mut Tape, c: Var, alpha: Var, norm: LateNorm) -> Result<Var> {
    let (sc, sa) = (tape.shape(c).to_vec(), tape.shape(alpha).to_vec());
    if sa.len() != 1 || sc.first() != sa.first() {
        return Err(Error::dim("late_guide", &sc, &sa));
    }
    let scaled = tape.broadcast_mul(c, alpha, 0)?;
    let group = match norm {
        LateNorm::Joint => NormGroup::Along(0),
        LateNorm::PerChannel => NormGroup::Within(0),
    };
    tape.l2_normalize(scaled, group, L2_EPS)
}

/// Output of [`localize`].
#[derive(Debug, Clone)]
pub struct LocalizerOutput {
    /// Feature map after each conv layer (after late guidance, if any).
    pub layers: Vec<Var>,
    /// Masked head logits `[1×N×N]` before clamping.
    pub logits: Var,
    /// Scores `[N×N]`, in (0, 1) on valid cells and 0 elsewhere.
    pub scores: Var,
}

/// Conv layers `(kernel, bias)` and the 1×1 head of the localizer.
#[derive(Debug, Clone)]
pub struct LocalizerVars {
    pub convs: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

/// Sentence-derived channel attention applied after the first `layers`
/// conv layers.
#[derive(Debug, Clone, Copy)]
pub struct LateGuidance {
    pub alpha: Var,
    pub layers: usize,
    pub norm: LateNorm,
}

/// Masked conv + ReLU stack with optional late guidance, then a 1×1
/// scoring head with clamped logits and a sigmoid.
pub fn localize(
    tape: &mut Tape,
    fused: Var,
    guidance: Option<LateGuidance>,
    vars: &LocalizerVars,
    mask: &Arc<Mask2d>,
) -> Result<LocalizerOutput> {
    let mut x = fused;
    let mut layers = Vec::with_capacity(vars.convs.len());
    for (l, &(k, b)) in vars.convs.iter().enumerate() {
        x = tape.conv2d_masked(x, k, b, mask)?;
        x = tape.relu(x)?;
        if let Some(g) = guidance.filter(|g| l < g.layers) {
            x = late_guide(tape, x, g.alpha, g.norm)?;
            x = tape.mask(x, mask)?;
        }
        layers.push(x);
    }
    let logits = tape.conv2d_masked(x, vars.head.0, vars.head.1, mask)?;
    let clamped = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let p = tape.sigmoid(clamped)?;
    let p = tape.mask(p, mask)?;
    let n = mask.rows();
    let scores = tape.reshape(p, vec![n, mask.cols()])?;
    Ok(LocalizerOutput { layers, logits, scores })
}
