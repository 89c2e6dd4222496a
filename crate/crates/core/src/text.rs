//! Sentence encoding: tokens → ids → word embeddings → LSTM → `f_s`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token ↔ id bijection with `<pad>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary over the distinct tokens seen, in sorted order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != PAD && *t != UNK).collect();
        let list = [PAD, UNK]
            .into_iter()
            .chain(distinct)
            .map(String::from)
            .collect::<Vec<_>>();
        Self::from_list(list).expect("distinct by construction")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(Error::Config(format!(
                "vocabulary must start with `{PAD}`, `{UNK}`"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Vocabulary::from_list(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Maps tokens to ids, truncating at `max_len`.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyQuery);
    }
    Ok(tokens.iter().take(max_len).map(|t| vocab.id(t.as_ref())).collect())
}

/// Random `|V|×d_w` embedding table with an all-zero pad row.
pub fn random_embeddings<R: Rng + ?Sized>(vocab_size: usize, d_w: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (d_w as f64).sqrt()).expect("positive std");
    let mut data: Vec<f64> = (0..vocab_size * d_w).map(|_| normal.sample(rng)).collect();
    data[..d_w].iter_mut().for_each(|v| *v = 0.0);
    Tensor::new(vec![vocab_size, d_w], data).expect("sized")
}

/// Reads a text file of pretrained vectors (`token v_1 … v_dw` per line)
/// into a table aligned with `vocab`.
///
/// Vocabulary tokens missing from the file keep the rows of `fallback`;
/// the pad row is always zero.
pub fn load_pretrained_embeddings(path: &Path, vocab: &Vocabulary, fallback: Tensor) -> Result<Tensor> {
    let d_w = fallback.shape()[1];
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = fallback;
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Validation {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if values.len() != d_w {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("expected {d_w} values after the token, found {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if id == UNK_ID && token != UNK {
            continue;
        }
        table.data_mut()[id * d_w..(id + 1) * d_w].copy_from_slice(&values);
    }
    table.data_mut()[PAD_ID * d_w..(PAD_ID + 1) * d_w].iter_mut().for_each(|v| *v = 0.0);
    Ok(table)
}

/// LSTM weights on a tape, gate order: input, forget, output, candidate.
///
/// Each gate weight is `d_h×(d_w+d_h)` acting on `[x_t; h_{t-1}]`; each
/// bias is `[d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

/// Runs the recurrence from a zero state and returns `h_T` as `[d_h]`.
///
/// Trailing pad ids are ignored, so padding after truncation never
/// changes the result.
pub fn lstm_forward(tape: &mut Tape, ids: &[usize], table: Var, lstm: &LstmVars) -> Result<Var> {
    let len = ids.iter().rposition(|&id| id != PAD_ID).map_or(0, |p| p + 1);
    if len == 0 {
        return Err(Error::EmptyQuery);
    }
    let d_h = tape.shape(lstm.biases[0])[0];
    let mut h = tape.constant(Tensor::zeros(vec![d_h]));
    let mut c = tape.constant(Tensor::zeros(vec![d_h]));
    for &id in &ids[..len] {
        let x = tape.gather_rows(table, &[id])?;
        let d_w = tape.shape(x)[1];
        let x = tape.reshape(x, vec![d_w, 1])?;
        let hc = tape.reshape(h, vec![d_h, 1])?;
        let z = tape.concat(&[x, hc])?;
        let mut gates = [z; 4];
        for (k, gate) in gates.iter_mut().enumerate() {
            let pre = tape.matmul(lstm.weights[k], z)?;
            let pre = tape.reshape(pre, vec![d_h])?;
            let pre = tape.add(pre, lstm.biases[k])?;
            *gate = if k == 3 { tape.tanh(pre)? } else { tape.sigmoid(pre)? };
        }
        let [i, f, o, g] = gates;
        let keep = tape.hadamard(f, c)?;
        let write = tape.hadamard(i, g)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        h = tape.hadamard(o, tc)?;
    }
    Ok(h)
}

/// `f_s = W h_T + b`.
pub fn sentence_embed(tape: &mut Tape, h: Var, weight: Var, bias: Var) -> Result<Var> {
    let d_h = tape.shape(h)[0];
    let col = tape.reshape(h, vec![d_h, 1])?;
    let out = tape.matmul(weight, col)?;
    let d_s = tape.shape(out)[0];
    let out = tape.reshape(out, vec![d_s])?;
    tape.add(out, bias)
}
