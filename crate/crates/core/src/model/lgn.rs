use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{self, FusionVars, LateGuidance, LocalizerOutput, LocalizerVars};
use super::params::{BoundParams, ParamStore};
use crate::autograd::{Mask2d, Tape, Var};
use crate::error::{Error, Result};
use crate::moment::{pool_moment_features, resample_clips, ClipFeatureSequence, TemporalMap};
use crate::tensor::Tensor;
use crate::text::{self, LstmVars, Vocabulary, PAD_ID};

pub const EMBEDDING: &str = "text.embedding";
pub const EARLY_W: &str = "early.w_m";
pub const EARLY_B: &str = "early.b_m";
pub const LATE_W: &str = "late.w_m";
pub const LATE_B: &str = "late.b_m";

const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±sqrt(gain / fan_in)`.
    Uniform { fan_in: usize, gain: f64 },
    Const(f64),
    Embedding,
}

/// Names, shapes and initialisers of every parameter, in checkpoint order.
fn layout(cfg: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>, Init)> {
    let lin = |fan_in| Init::Uniform { fan_in, gain: 3.0 };
    let (d_w, d_h, d_s, k) = (cfg.d_w, cfg.d_h, cfg.d_s, cfg.kernel_size);
    let mut out = vec![(EMBEDDING.to_string(), vec![vocab_size, d_w], Init::Embedding)];
    for g in GATES {
        out.push((format!("text.lstm.w_{g}"), vec![d_h, d_w + d_h], lin(d_w + d_h)));
    }
    for g in GATES {
        let init = if g == "f" { Init::Const(1.0) } else { Init::Const(0.0) };
        out.push((format!("text.lstm.b_{g}"), vec![d_h], init));
    }
    out.push(("text.proj.w".into(), vec![d_s, d_h], lin(d_h)));
    out.push(("text.proj.b".into(), vec![d_s], Init::Const(0.0)));
    for u in 0..cfg.n_early {
        let d_in = if u == 0 { cfg.d_v } else { d_h };
        out.push((format!("visual.fc{u}.w"), vec![d_h, d_in], lin(d_in)));
        out.push((format!("visual.fc{u}.b"), vec![d_h], Init::Const(0.0)));
    }
    // multiplicative gates start near the identity
    out.push((EARLY_W.into(), vec![d_h, d_s], lin(d_s)));
    out.push((EARLY_B.into(), vec![d_h], Init::Const(1.0)));
    out.push(("fusion.visual.w".into(), vec![d_h, d_h], lin(d_h)));
    out.push(("fusion.visual.b".into(), vec![d_h], Init::Const(0.0)));
    out.push(("fusion.sentence.w".into(), vec![d_h, d_s], lin(d_s)));
    out.push(("fusion.sentence.b".into(), vec![d_h], Init::Const(1.0)));
    out.push((LATE_W.into(), vec![d_h, d_s], lin(d_s)));
    out.push((LATE_B.into(), vec![d_h], Init::Const(1.0)));
    for l in 0..cfg.n_conv {
        out.push((
            format!("localizer.conv{l}.w"),
            vec![d_h, d_h, k, k],
            Init::Uniform { fan_in: d_h * k * k, gain: 6.0 },
        ));
        out.push((format!("localizer.conv{l}.b"), vec![d_h], Init::Const(0.0)));
    }
    out.push(("head.w".into(), vec![1, d_h, 1, 1], lin(d_h)));
    out.push(("head.b".into(), vec![1], Init::Const(0.0)));
    out
}

/// Expected `(name, shape)` list for a config and vocabulary size.
pub fn param_shapes(cfg: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
    layout(cfg, vocab_size).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Tape handles of one forward pass, stage by stage.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub sentence: Var,
    pub visual: Var,
    pub fused: Var,
    pub layers: Vec<Var>,
    pub logits: Var,
    pub scores: Var,
}

/// Precomputed model input for one query.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub map: TemporalMap,
    pub ids: Vec<usize>,
}

/// The full network: configuration, vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LgnModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
}

impl LgnModel {
    /// Randomly initialised model, seeded by `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config, vocab.len()) {
            let n: usize = shape.iter().product();
            let tensor = match init {
                Init::Uniform { fan_in, gain } => {
                    let bound = (gain / fan_in as f64).sqrt();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())?
                }
                Init::Const(c) => Tensor::full(shape, c),
                Init::Embedding => text::random_embeddings(vocab.len(), config.d_w, &mut rng),
            };
            let frozen = if name == EMBEDDING { vec![PAD_ID] } else { Vec::new() };
            params.insert_with(name, tensor, true, frozen)?;
        }
        Ok(LgnModel { config, vocab, params })
    }

    /// Assembles a model from stored parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config, vocab.len());
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if p.tensor().shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    p.tensor().shape()
                )));
            }
        }
        Ok(LgnModel { config, vocab, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the embedding table and marks it frozen.
    pub fn set_pretrained_embeddings(&mut self, table: Tensor) -> Result<()> {
        let p = self.params.get_mut(EMBEDDING).expect("embedding present");
        if p.tensor().shape() != table.shape() {
            return Err(Error::dim("embedding table", p.tensor().shape(), table.shape()));
        }
        *p.tensor_mut() = table;
        self.params.set_trainable(EMBEDDING, false)
    }

    /// Resamples, pools and tokenises one query.
    pub fn prepare<S: AsRef<str>>(&self, video: &ClipFeatureSequence, tokens: &[S]) -> Result<ModelInput> {
        if video.feature_width() != self.config.d_v {
            return Err(Error::Ingestion {
                id: video.video_id().to_string(),
                reason: format!(
                    "feature width {} does not match model d_v {}",
                    video.feature_width(),
                    self.config.d_v
                ),
            });
        }
        let seq = resample_clips(video, self.config.n)?;
        let map = pool_moment_features(&seq, self.config.pooling);
        let ids = text::encode_tokens(tokens, &self.vocab, self.config.max_query_len)?;
        Ok(ModelInput { map, ids })
    }

    /// Records the forward pass on `tape`. Pass an RNG to run dropout in
    /// training mode.
    pub fn trace(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: &ModelInput,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let mask = input.map.mask();
        if input.map.side() != cfg.n {
            return Err(Error::dim("forward map", &[input.map.side()], &[cfg.n]));
        }

        let lstm = LstmVars {
            weights: GATES.map(|g| bound.var(&format!("text.lstm.w_{g}"))),
            biases: GATES.map(|g| bound.var(&format!("text.lstm.b_{g}"))),
        };
        let h = text::lstm_forward(tape, &input.ids, bound.var(EMBEDDING), &lstm)?;
        let f_s = text::sentence_embed(tape, h, bound.var("text.proj.w"), bound.var("text.proj.b"))?;

        let visual = self.visual_stage(tape, bound, &input.map, f_s, rng)?;

        let fusion = FusionVars {
            visual_w: bound.var("fusion.visual.w"),
            visual_b: bound.var("fusion.visual.b"),
            sentence_w: bound.var("fusion.sentence.w"),
            sentence_b: bound.var("fusion.sentence.b"),
        };
        let fused = layers::fuse(tape, visual, f_s, &fusion, mask)?;
        let out = self.localize_stage(tape, bound, fused, f_s, mask)?;
        Ok(ForwardTrace {
            sentence: f_s,
            visual,
            fused,
            layers: out.layers,
            logits: out.logits,
            scores: out.scores,
        })
    }

    /// Per-cell visual head over `map`, modulated by `f_s` when early
    /// modulation is on.
    pub fn visual_stage(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        map: &TemporalMap,
        f_s: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let features = tape.constant(map.cell_features().clone());
        let gate = if cfg.use_early {
            Some(layers::linear_vec(tape, bound.var(EARLY_W), bound.var(EARLY_B), f_s)?)
        } else {
            None
        };
        let fc: Vec<(Var, Var)> = (0..cfg.n_early)
            .map(|u| (bound.var(&format!("visual.fc{u}.w")), bound.var(&format!("visual.fc{u}.b"))))
            .collect();
        layers::visual_head(tape, features, gate, &fc, map.mask(), cfg.drop_probability(), rng)
    }

    /// Localizer over a fused map, with late guidance from `f_s` when
    /// enabled.
    pub fn localize_stage(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        fused: Var,
        f_s: Var,
        mask: &Arc<Mask2d>,
    ) -> Result<LocalizerOutput> {
        let cfg = &self.config;
        let guidance = if cfg.use_late && cfg.n_late > 0 {
            Some(LateGuidance {
                alpha: layers::linear_vec(tape, bound.var(LATE_W), bound.var(LATE_B), f_s)?,
                layers: cfg.n_late,
                norm: cfg.late_norm,
            })
        } else {
            None
        };
        let vars = self.localizer_vars(bound);
        layers::localize(tape, fused, guidance, &vars, mask)
    }

    fn localizer_vars(&self, bound: &BoundParams) -> LocalizerVars {
        LocalizerVars {
            convs: (0..self.config.n_conv)
                .map(|l| {
                    (
                        bound.var(&format!("localizer.conv{l}.w")),
                        bound.var(&format!("localizer.conv{l}.b")),
                    )
                })
                .collect(),
            head: (bound.var("head.w"), bound.var("head.b")),
        }
    }

    /// Evaluation-mode scores for a prepared input, row-major `N×N`.
    pub fn score(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let trace = self.trace(&mut tape, &bound, input, None)?;
        Ok(tape.value(trace.scores).data().to_vec())
    }

    /// Full evaluation-mode pass: returns the score map and validity mask.
    pub fn forward<S: AsRef<str>>(&self, video: &ClipFeatureSequence, tokens: &[S]) -> Result<(Vec<f64>, Arc<Mask2d>)> {
        let input = self.prepare(video, tokens)?;
        let scores = self.score(&input)?;
        Ok((scores, input.map.mask().clone()))
    }
}
