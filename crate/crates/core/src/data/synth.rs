use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::io::{write_annotations, write_features, MANIFEST_FILE};
use super::{DatasetManifest, Sample, Split, VideoEntry};
use crate::error::{Error, Result};
use crate::moment::{cell_to_span, temporal_iou, AnnotationRecord, ClipFeatureSequence};
use crate::tensor::Tensor;

pub const SYNTH_INFO_FILE: &str = "synth.json";
const ANNOTATION_FILE: &str = "annotations.jsonl";

const VERBS: [&str; 16] = [
    "open", "close", "hold", "throw", "eat", "drink", "read", "write", "sit", "stand", "walk", "run", "laugh", "cook",
    "wash", "pour",
];
const SUBJECTS: [&[&str]; 4] = [&["the", "person"], &["someone"], &["a", "man"], &["a", "woman"]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hardness {
    /// One concept per video; the query names it.
    #[default]
    Easy,
    /// Three segments holding concept pairs `{x,y}`, `{x,z}`, `{y,z}`; the
    /// query names `x` and `y`, so only the pair identifies the target.
    Compositional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    /// Clips per video.
    pub clips: usize,
    pub d_v: usize,
    pub duration_s: f64,
    pub concepts: usize,
    /// Interchangeable words naming each concept.
    pub words_per_concept: usize,
    pub noise: f64,
    /// Span length range in clips, inclusive.
    pub span_min: usize,
    pub span_max: usize,
    pub hardness: Hardness,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_videos: 200,
            clips: 16,
            d_v: 32,
            duration_s: 16.0,
            concepts: 8,
            words_per_concept: 2,
            noise: 0.3,
            span_min: 2,
            span_max: 6,
            hardness: Hardness::Easy,
            train_fraction: 0.5,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.clips == 0 || self.d_v == 0 || self.words_per_concept == 0 {
            return bad("n_videos, clips, d_v and words_per_concept must be at least 1".into());
        }
        if self.concepts < 2 {
            return bad(format!("need at least 2 concepts, got {}", self.concepts));
        }
        if !(1 <= self.span_min && self.span_min <= self.span_max && self.span_max <= self.clips) {
            return bad(format!(
                "span range [{}, {}] must lie within [1, {}]",
                self.span_min, self.span_max, self.clips
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        let ms = (self.duration_s * 1000.0).round();
        if !(self.duration_s.is_finite() && ms >= 1.0 && ms <= u32::MAX as f64) {
            return bad(format!("invalid duration {} s", self.duration_s));
        }
        let (tf, vf) = (self.train_fraction, self.val_fraction);
        if !(0.0..=1.0).contains(&tf) || !(0.0..=1.0).contains(&vf) || tf + vf > 1.0 {
            return bad(format!("split fractions ({tf}, {vf}) must be in [0, 1] and sum to at most 1"));
        }
        if self.hardness == Hardness::Compositional {
            if self.concepts < 3 {
                return bad("compositional mode needs at least 3 concepts".into());
            }
            if 3 * self.span_min + 2 > self.clips {
                return bad(format!(
                    "three spans of at least {} clips plus gaps do not fit in {} clips",
                    self.span_min, self.clips
                ));
            }
        }
        Ok(())
    }

    /// Duration as stored on disk (whole milliseconds).
    fn stored_duration(&self) -> f64 {
        (self.duration_s * 1000.0).round() / 1000.0
    }

    fn split_of(&self, i: usize) -> Split {
        let n_train = (self.n_videos as f64 * self.train_fraction).round() as usize;
        let n_val = (self.n_videos as f64 * self.val_fraction).round() as usize;
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Everything needed to score a synthetic dataset with the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthInfo {
    pub config: SyntheticConfig,
    pub words: Vec<Vec<String>>,
    pub prototypes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

fn concept_words(c: usize, k: usize) -> Vec<String> {
    let stem = VERBS.get(c).map_or_else(|| format!("act{c}"), |v| v.to_string());
    (0..k).map(|j| if j == 0 { stem.clone() } else { format!("{stem}{j}") }).collect()
}

fn gaussian_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32 as f64).collect()
}

/// One segment: clip range and the concepts present in it.
struct Segment {
    start: usize,
    end: usize,
    concepts: Vec<usize>,
}

fn layout_easy(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Vec<Segment>, Vec<usize>) {
    let c = rng.random_range(0..cfg.concepts);
    let len = rng.random_range(cfg.span_min..=cfg.span_max);
    let start = rng.random_range(0..=cfg.clips - len);
    (
        vec![Segment {
            start,
            end: start + len - 1,
            concepts: vec![c],
        }],
        vec![c],
    )
}

fn layout_compositional(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Vec<Segment>, Vec<usize>) {
    let picked = index::sample(rng, cfg.concepts, 3).into_vec();
    let (x, y, z) = (picked[0], picked[1], picked[2]);
    let mut pairs = [vec![x, y], vec![x, z], vec![y, z]];
    pairs.shuffle(rng);
    let cap = cfg.span_max.min((cfg.clips - 2) / 3);
    let lens: Vec<usize> = (0..3).map(|_| rng.random_range(cfg.span_min..=cap)).collect();
    let mut gaps = [0usize, 1, 1, 0];
    for _ in 0..cfg.clips - lens.iter().sum::<usize>() - 2 {
        gaps[rng.random_range(0..4)] += 1;
    }
    let mut t = gaps[0];
    let mut segments = Vec::with_capacity(3);
    for (k, concepts) in pairs.into_iter().enumerate() {
        segments.push(Segment {
            start: t,
            end: t + lens[k] - 1,
            concepts,
        });
        t += lens[k] + gaps[k + 1];
    }
    (segments, vec![x, y])
}

fn query_tokens(words: &[Vec<String>], named: &[usize], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut tokens: Vec<String> = SUBJECTS[rng.random_range(0..SUBJECTS.len())]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut order = named.to_vec();
    order.shuffle(rng);
    for (i, &c) in order.iter().enumerate() {
        if i > 0 {
            tokens.push("and".into());
        }
        tokens.push(words[c][rng.random_range(0..words[c].len())].clone());
    }
    tokens
}

/// Writes a synthetic dataset to `out` (created if needed) and returns its
/// generator state. The same config always yields the same bytes.
pub fn generate(cfg: &SyntheticConfig, out: &Path) -> Result<SynthInfo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<Vec<String>> = (0..cfg.concepts).map(|c| concept_words(c, cfg.words_per_concept)).collect();
    let prototypes: Vec<Vec<f64>> = (0..cfg.concepts).map(|_| gaussian_row(&mut rng, cfg.d_v)).collect();
    let background = gaussian_row(&mut rng, cfg.d_v);
    let duration = cfg.stored_duration();

    let features_dir = out.join("features");
    fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;

    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut records = Vec::with_capacity(cfg.n_videos);
    for i in 0..cfg.n_videos {
        let (segments, named) = match cfg.hardness {
            Hardness::Easy => layout_easy(cfg, &mut rng),
            Hardness::Compositional => layout_compositional(cfg, &mut rng),
        };
        let mut data = Vec::with_capacity(cfg.clips * cfg.d_v);
        for t in 0..cfg.clips {
            let seg = segments.iter().find(|s| s.start <= t && t <= s.end);
            for j in 0..cfg.d_v {
                let base = match seg {
                    Some(s) => s.concepts.iter().map(|&c| prototypes[c][j]).sum::<f64>(),
                    None => background[j],
                };
                let noise: f64 = rng.sample(StandardNormal);
                data.push((base + cfg.noise * noise) as f32 as f64);
            }
        }
        let video_id = format!("vid{i:05}");
        let seq = ClipFeatureSequence::new(&video_id, Tensor::new(vec![cfg.clips, cfg.d_v], data)?, duration)?;
        let feature_file = format!("features/{video_id}.lgnf");
        write_features(&out.join(&feature_file), &seq)?;

        let target = &segments[segments
            .iter()
            .position(|s| s.concepts == named)
            .expect("target segment present")];
        records.push(AnnotationRecord {
            video_id: video_id.clone(),
            tokens: query_tokens(&words, &named, &mut rng),
            span: cell_to_span(target.start, target.end, cfg.clips, duration)?,
        });
        videos.push(VideoEntry {
            video_id,
            feature_file,
            split: cfg.split_of(i),
        });
    }

    write_annotations(&out.join(ANNOTATION_FILE), &records)?;
    let manifest = DatasetManifest {
        videos,
        annotations: ANNOTATION_FILE.into(),
    };
    let manifest_path = out.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;

    let info = SynthInfo {
        config: cfg.clone(),
        words,
        prototypes,
        background,
    };
    let info_path = out.join(SYNTH_INFO_FILE);
    fs::write(&info_path, serde_json::to_vec_pretty(&info)?).map_err(|e| Error::io(&info_path, e))?;
    Ok(info)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rank1 accuracy (percent) of a nearest-prototype oracle at `iou`.
///
/// Every clip is labelled with its closest state (background, a single
/// concept, or in compositional mode a concept pair); the prediction is the
/// longest run of clips carrying exactly the concepts named by the query.
pub fn oracle_rank1(samples: &[Sample], info: &SynthInfo, iou: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to score".into()));
    }
    let mut states: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), info.background.clone())];
    let c = info.prototypes.len();
    for a in 0..c {
        states.push((vec![a], info.prototypes[a].clone()));
    }
    if info.config.hardness == Hardness::Compositional {
        for a in 0..c {
            for b in a + 1..c {
                let sum = info.prototypes[a].iter().zip(&info.prototypes[b]).map(|(x, y)| x + y).collect();
                states.push((vec![a, b], sum));
            }
        }
    }

    let mut hits = 0usize;
    for s in samples {
        let mut named: Vec<usize> = (0..c)
            .filter(|&k| info.words[k].iter().any(|w| s.annotation.tokens.contains(w)))
            .collect();
        named.sort_unstable();
        let feats = s.video.features();
        let d = s.video.feature_width();
        let labels: Vec<usize> = (0..s.video.clip_count())
            .map(|t| {
                let row = &feats.data()[t * d..(t + 1) * d];
                (0..states.len())
                    .min_by(|&i, &j| sq_dist(row, &states[i].1).total_cmp(&sq_dist(row, &states[j].1)))
                    .expect("states non-empty")
            })
            .collect();

        let mut best: Option<(usize, usize)> = None;
        let mut t = 0;
        while t < labels.len() {
            if states[labels[t]].0 == named {
                let start = t;
                while t + 1 < labels.len() && labels[t + 1] == labels[start] {
                    t += 1;
                }
                if best.is_none_or(|(a, b)| t - start > b - a) {
                    best = Some((start, t));
                }
            }
            t += 1;
        }
        if let Some((a, b)) = best {
            let pred = cell_to_span(a, b, s.video.clip_count(), s.video.duration_s())?;
            if temporal_iou(&pred, &s.annotation.span) >= iou {
                hits += 1;
            }
        }
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}
