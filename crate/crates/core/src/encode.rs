//! A small trainable text encoder.
//!
//! Tokens are embedded, optionally offset by a segment vector, then mixed
//! with their sequence context:
//!
//! ```text
//! c_t = x_t + ELU(P (λ_t x_t + mean(x)))      λ_t = (t + 1) / n
//! ```
//!
//! A pair or statement-table vector is the mean of `c_t` over the whole
//! sequence. A document is encoded one sentence at a time, and the sentence
//! vector is `c` at its `[CLS]` position.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learn::{glorot, uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tabular::{Statement, Table};
use crate::verbalize::EntitySpan;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_ID: usize = 3;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_MIN_FREQ: usize = 2;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("input has no tokens")]
    EmptyInput,
    #[error("span {start}..{end} does not cover any token of sentence {sentence}")]
    SpanOutOfRange { sentence: usize, start: usize, end: usize },
    #[error("embedding file line {line}: {message}")]
    Embeddings { line: usize, message: String },
    #[error("vocab: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercased word and punctuation tokens with byte ranges into `text`.
/// Words are runs of alphanumerics and `_`; every other non-space
/// character is a token of its own.
pub fn tokenize(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    for (i, c) in text.char_indices() {
        if is_word(c) {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push((text[s..i].to_lowercase(), s..i));
        }
        if !c.is_whitespace() {
            out.push((c.to_lowercase().collect(), i..i + c.len_utf8()));
        }
    }
    if let Some(s) = word_start {
        out.push((text[s..].to_lowercase(), s..text.len()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every token seen at least `min_freq` times in
    /// lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for (tok, _) in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = [CLS, SEP, UNK, PAD].map(String::from).to_vec();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(t, n)| *n >= min_freq.max(1) && ![CLS, SEP, UNK, PAD].contains(&t.as_str()))
                .map(|(t, _)| t),
        );
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|(t, _)| self.id(t)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EncodeError> {
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| EncodeError::Vocab(e.to_string()))?;
        if raw.tokens.len() < 4 || raw.tokens[..4] != [CLS, SEP, UNK, PAD] {
            return Err(EncodeError::Vocab("special tokens must come first".into()));
        }
        Ok(Self::from_tokens(raw.tokens))
    }

    pub fn save(&self, path: &Path) -> Result<(), EncodeError> {
        Ok(fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, EncodeError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Handles to one encoder's tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub prefix: String,
    pub dim: usize,
    pub embed: ParamId,
    pub seg_a: ParamId,
    pub seg_b: ParamId,
    pub mix: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    A,
    B,
}

impl Segment {
    /// Segment for the 1-based sentence index `i`: A when odd, B when even.
    pub fn for_sentence(i: usize) -> Segment {
        if i % 2 == 1 {
            Segment::A
        } else {
            Segment::B
        }
    }
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        assert!(dim > 0, "encoder width must be positive");
        let embed = store.add(format!("{prefix}.embed"), uniform(rng, vocab_size, dim, 0.5));
        let seg_a = store.add(format!("{prefix}.seg_a"), uniform(rng, 1, dim, 0.1));
        let seg_b = store.add(format!("{prefix}.seg_b"), uniform(rng, 1, dim, 0.1));
        let mix = store.add(format!("{prefix}.mix"), glorot(rng, dim, dim));
        Encoder {
            prefix: prefix.into(),
            dim,
            embed,
            seg_a,
            seg_b,
            mix,
        }
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, vocab_size: usize, dim: usize) -> Self {
        let embed = store.add(format!("{prefix}.embed"), Tensor::zeros(vocab_size, dim));
        let seg_a = store.add(format!("{prefix}.seg_a"), Tensor::zeros(1, dim));
        let seg_b = store.add(format!("{prefix}.seg_b"), Tensor::zeros(1, dim));
        let mix = store.add(format!("{prefix}.mix"), Tensor::zeros(dim, dim));
        Encoder {
            prefix: prefix.into(),
            dim,
            embed,
            seg_a,
            seg_b,
            mix,
        }
    }

    /// Looks up an encoder previously registered under `prefix`.
    pub fn attach(store: &ParamStore, prefix: &str) -> Option<Self> {
        let embed = store.id(&format!("{prefix}.embed"))?;
        Some(Encoder {
            prefix: prefix.into(),
            dim: store.value(embed).cols,
            embed,
            seg_a: store.id(&format!("{prefix}.seg_a"))?,
            seg_b: store.id(&format!("{prefix}.seg_b"))?,
            mix: store.id(&format!("{prefix}.mix"))?,
        })
    }

    /// Contextual vectors (n×F) for a token id sequence.
    pub fn contextual(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], segment: Option<Segment>) -> Var {
        let n = ids.len();
        let mut x = tape.embed(store, self.embed, ids);
        if let Some(seg) = segment {
            let s = tape.param(store, if seg == Segment::A { self.seg_a } else { self.seg_b });
            x = tape.add_row(x, s);
        }
        let lambda = tape.constant(Tensor::column_vector((1..=n).map(|t| t as f64 / n as f64).collect()));
        let lx = tape.scale_rows(x, lambda);
        let m = tape.mean_rows(x);
        let z = tape.add_row(lx, m);
        let mix = tape.param(store, self.mix);
        let pz = tape.matmul(z, mix);
        let e = tape.elu(pz);
        tape.add(x, e)
    }

    fn pooled(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        let c = self.contextual(tape, store, ids, None);
        tape.mean_rows(c)
    }

    /// `[CLS] s [SEP] z` mean-pooled to a 1×F vector.
    pub fn pair_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        s: &str,
        z: &str,
    ) -> Result<Var, EncodeError> {
        let a = vocab.ids(s);
        let b = vocab.ids(z);
        if a.is_empty() || b.is_empty() {
            return Err(EncodeError::EmptyInput);
        }
        let ids = pair_ids(&a, &b);
        Ok(self.pooled(tape, store, &ids))
    }

    pub fn statement_table_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        t: &Table,
        s: &Statement,
    ) -> Result<Var, EncodeError> {
        self.pooled_text(tape, store, vocab, &linearize_table(t, s))
    }

    /// `[CLS] text [SEP]` mean-pooled to a 1×F vector.
    pub fn pooled_text(&self, tape: &mut Tape, store: &ParamStore, vocab: &Vocab, text: &str) -> Result<Var, EncodeError> {
        let a = vocab.ids(text);
        if a.is_empty() {
            return Err(EncodeError::EmptyInput);
        }
        Ok(self.pooled(tape, store, &pair_ids(&a, &[])))
    }

    /// Per-sentence CLS vectors and per-span entity vectors on the tape.
    pub fn document_vars(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        sentences: &[String],
        spans: &[Vec<EntitySpan>],
    ) -> Result<DocVars, EncodeError> {
        let mut cls = Vec::with_capacity(sentences.len());
        let mut entities = Vec::with_capacity(sentences.len());
        let mut contextual = Vec::with_capacity(sentences.len());
        let mut alignment = Vec::with_capacity(sentences.len());
        for (i, sentence) in sentences.iter().enumerate() {
            let toks = tokenize(sentence);
            let mut ids = Vec::with_capacity(toks.len() + 1);
            ids.push(CLS_ID);
            ids.extend(toks.iter().map(|(t, _)| vocab.id(t)));
            let c = self.contextual(tape, store, &ids, Some(Segment::for_sentence(i + 1)));
            cls.push(tape.select_rows(c, &[0]));
            let mut ents = Vec::new();
            for span in spans.get(i).map(Vec::as_slice).unwrap_or_default() {
                let rows: Vec<usize> = toks
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, r))| r.start < span.range.end && span.range.start < r.end)
                    .map(|(k, _)| k + 1)
                    .collect();
                if rows.is_empty() || span.range.end > sentence.len() {
                    return Err(EncodeError::SpanOutOfRange {
                        sentence: i,
                        start: span.range.start,
                        end: span.range.end,
                    });
                }
                let picked = tape.select_rows(c, &rows);
                ents.push(tape.mean_rows(picked));
            }
            entities.push(ents);
            contextual.push(c);
            alignment.push(toks.into_iter().map(|(_, r)| r).collect());
        }
        Ok(DocVars {
            cls,
            entities,
            contextual,
            alignment,
        })
    }
}

fn pair_ids(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(a.len() + b.len() + 2);
    ids.push(CLS_ID);
    ids.extend_from_slice(a);
    ids.push(SEP_ID);
    ids.extend_from_slice(b);
    ids
}

#[derive(Debug, Clone)]
pub struct DocVars {
    /// One 1×F vector per sentence.
    pub cls: Vec<Var>,
    /// Entity vectors per sentence, in span order.
    pub entities: Vec<Vec<Var>>,
    /// (n+1)×F contextual vectors per sentence, CLS first.
    pub contextual: Vec<Var>,
    /// Byte range of each non-CLS token per sentence.
    pub alignment: Vec<Vec<Range<usize>>>,
}

/// Encoded document values, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct DocEncoding {
    /// M×F, one row per sentence.
    pub cls: Tensor,
    pub entities: Vec<Vec<Vec<f64>>>,
    pub tokens: Vec<Tensor>,
    /// (sentence, byte range) per token, CLS excluded.
    pub alignment: Vec<Vec<Range<usize>>>,
}

pub fn encode_pair(enc: &Encoder, store: &ParamStore, vocab: &Vocab, s: &str, z: &str) -> Result<Vec<f64>, EncodeError> {
    let mut tape = Tape::new();
    let v = enc.pair_var(&mut tape, store, vocab, s, z)?;
    Ok(tape.value(v).data.clone())
}

pub fn encode_statement_table(
    enc: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    t: &Table,
    s: &Statement,
) -> Result<Vec<f64>, EncodeError> {
    let mut tape = Tape::new();
    let v = enc.statement_table_var(&mut tape, store, vocab, t, s)?;
    Ok(tape.value(v).data.clone())
}

pub fn encode_document(
    enc: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    sentences: &[String],
    spans: &[Vec<EntitySpan>],
) -> Result<DocEncoding, EncodeError> {
    let mut tape = Tape::new();
    let vars = enc.document_vars(&mut tape, store, vocab, sentences, spans)?;
    let mut cls = Tensor::zeros(sentences.len(), enc.dim);
    for (i, v) in vars.cls.iter().enumerate() {
        cls.data[i * enc.dim..(i + 1) * enc.dim].copy_from_slice(&tape.value(*v).data);
    }
    Ok(DocEncoding {
        cls,
        entities: vars
            .entities
            .iter()
            .map(|es| es.iter().map(|v| tape.value(*v).data.clone()).collect())
            .collect(),
        tokens: vars.contextual.iter().map(|v| tape.value(*v).clone()).collect(),
        alignment: vars.alignment,
    })
}

/// Horizontal table template: "row r's <header> is <cell>" joined by " ; ",
/// then " . " and the statement.
pub fn linearize_table(t: &Table, s: &Statement) -> String {
    let mut parts = Vec::with_capacity(t.num_rows() * t.num_cols());
    for (r, row) in t.rows.iter().enumerate() {
        for (h, cell) in t.headers.iter().zip(row) {
            parts.push(format!("row {}'s {} is {}", r + 1, h, cell.raw));
        }
    }
    format!("{} . {}", parts.join(" ; "), s.text)
}

/// Copies vectors from a GloVe-style text file (`token v1 v2 ... vF` per
/// line) into the encoder's embedding rows. Returns how many vocab entries
/// were filled; unknown tokens are skipped.
pub fn import_embeddings(enc: &Encoder, store: &mut ParamStore, vocab: &Vocab, text: &str) -> Result<usize, EncodeError> {
    let mut filled = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EncodeError::Embeddings {
                line: n + 1,
                message: e.to_string(),
            })?;
        if values.len() != enc.dim {
            return Err(EncodeError::Embeddings {
                line: n + 1,
                message: format!("expected {} values, found {}", enc.dim, values.len()),
            });
        }
        let id = vocab.id(&token.to_lowercase());
        if id == UNK_ID && token != UNK {
            continue;
        }
        store.value_mut(enc.embed).data[id * enc.dim..(id + 1) * enc.dim].copy_from_slice(&values);
        filled += 1;
    }
    Ok(filled)
}
