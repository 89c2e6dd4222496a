use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::lgn::LgnModel;
use crate::autograd::{grad_check, Tape, Var};
use crate::error::Result;
use crate::moment::{cell_to_span, iou_field, ClipFeatureSequence};
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::train::{label_field, LabelConfig};

/// Small configuration used for whole-model gradient checks.
pub fn grad_check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n: 4,
        d_v: 6,
        d_w: 4,
        d_h: 8,
        d_s: 5,
        max_query_len: 8,
        seed,
        ..ModelConfig::default()
    }
}

/// Gradient check of the training loss with respect to every parameter at
/// once, on a random video and a three-word query.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    let words = ["red", "ball", "rolls", "away"];
    let vocab = Vocabulary::build(words);
    let model = LgnModel::new(cfg.clone(), vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let t = cfg.n + 2;
    let feats = (0..t * cfg.d_v).map(|_| rng.sample(StandardNormal)).collect();
    let video = ClipFeatureSequence::new("check", Tensor::new(vec![t, cfg.d_v], feats)?, t as f64)?;
    let tokens: Vec<&str> = (0..3).map(|_| words[rng.random_range(0..words.len())]).collect();
    let input = model.prepare(&video, &tokens)?;
    let a = rng.random_range(0..cfg.n);
    let b = rng.random_range(a..cfg.n);
    let gt = cell_to_span(a, b, cfg.n, video.duration_s())?;
    let labels = label_field(&iou_field(cfg.n, &gt, video.duration_s())?, input.map.mask(), &LabelConfig::default())?;
    let mask = Arc::clone(input.map.mask());

    let params = model.params();
    let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.tensor().shape().to_vec()).collect();
    let flat: Vec<f64> = params.iter().flat_map(|p| p.tensor().data().iter().copied()).collect();
    let x = Tensor::vector(flat);
    grad_check(
        |tape: &mut Tape, x: Var| {
            let mut vars = Vec::with_capacity(shapes.len());
            let mut offset = 0;
            for s in &shapes {
                vars.push(tape.slice(x, offset, s.clone())?);
                offset += s.iter().product::<usize>();
            }
            let bound = params.bind_vars(vars)?;
            let trace = model.trace(tape, &bound, &input, None)?;
            tape.masked_bce(trace.scores, &labels, &mask)
        },
        &x,
        eps,
    )
}
