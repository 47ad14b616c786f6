//! Verifier training and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Adam, AdamConfig, LearnError, ParamStore, Tape, Var};
use crate::encode::{linearize_table, EncodeError, Encoder, Vocab, DEFAULT_MIN_FREQ};
use crate::gvat::{bce_var, ForwardOptions, GraphStructure, Gvat, GvatError};
use crate::program::Program;
use crate::tabular::{Label, Statement, Table};
use crate::verbalize::{verbalize_with, EntitySpan, VerbalizeError, VerbalizeOptions};

pub const DOC_PREFIX: &str = "ver.doc";
pub const ST_PREFIX: &str = "ver.st";

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("{id}: {source}")]
    Verbalize { id: String, source: VerbalizeError },
    #[error(transparent)]
    Graph(#[from] GvatError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// A statement with its table and the program whose execution is the
/// evidence.
#[derive(Debug, Clone)]
pub struct VerifyExample {
    pub statement: Statement,
    pub table: Arc<Table>,
    pub program: Program,
}

/// Verbalized evidence, graph layout and statement-table text for one
/// example, computed once before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub label: Label,
    pub tag: Option<String>,
    pub sentences: Vec<String>,
    pub spans: Vec<Vec<EntitySpan>>,
    pub structure: GraphStructure,
    pub st_text: String,
}

pub fn prepare(examples: &[VerifyExample], raw_case: bool) -> Result<Vec<Prepared>, VerifyError> {
    examples
        .iter()
        .map(|ex| {
            let v = verbalize_with(&ex.program, &ex.table, VerbalizeOptions { raw_case }).map_err(|source| {
                VerifyError::Verbalize {
                    id: ex.statement.id.clone(),
                    source,
                }
            })?;
            let structure = GraphStructure::build(&ex.program, &v)?;
            Ok(Prepared {
                id: ex.statement.id.clone(),
                label: ex.statement.label,
                tag: ex.statement.tag.clone(),
                sentences: v.sentences,
                spans: v.spans,
                structure,
                st_text: linearize_table(&ex.table, &ex.statement),
            })
        })
        .collect()
}

pub fn verifier_vocab(data: &[Prepared], min_freq: usize) -> Vocab {
    let texts = data
        .iter()
        .flat_map(|p| p.sentences.iter().map(String::as_str).chain(std::iter::once(p.st_text.as_str())));
    Vocab::build(texts, min_freq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    pub dim: usize,
    pub att_dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Optimizer steps during which the statement-table encoder is frozen.
    pub freeze_steps: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub min_freq: usize,
    pub seed: u64,
    pub no_graph: bool,
    pub gate_updated: bool,
    pub raw_case: bool,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            dim: 32,
            att_dim: 16,
            layers: 1,
            epochs: 200,
            lr: 1e-3,
            batch: 8,
            freeze_steps: 0,
            patience: None,
            min_freq: DEFAULT_MIN_FREQ,
            seed: 0,
            no_graph: false,
            gate_updated: false,
            raw_case: false,
        }
    }
}

impl VerifierConfig {
    pub fn options(&self) -> ForwardOptions {
        ForwardOptions {
            no_graph: self.no_graph,
            gate_updated: self.gate_updated,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Verifier {
    pub doc: Encoder,
    pub st: Encoder,
    pub gvat: Gvat,
}

impl Verifier {
    pub fn new(store: &mut ParamStore, vocab_size: usize, config: &VerifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let doc = Encoder::new(store, DOC_PREFIX, vocab_size, config.dim, rng);
        let st = Encoder::new(store, ST_PREFIX, vocab_size, config.dim, rng);
        let gvat = Gvat::new(store, config.dim, config.att_dim, config.layers, rng);
        Verifier { doc, st, gvat }
    }

    pub fn attach(store: &ParamStore) -> Option<Self> {
        Some(Verifier {
            doc: Encoder::attach(store, DOC_PREFIX)?,
            st: Encoder::attach(store, ST_PREFIX)?,
            gvat: Gvat::attach(store)?,
        })
    }

    /// Initial K×F node features on the tape.
    pub fn features_var(&self, tape: &mut Tape, store: &ParamStore, vocab: &Vocab, ex: &Prepared) -> Result<Var, EncodeError> {
        let doc = self.doc.document_vars(tape, store, vocab, &ex.sentences, &ex.spans)?;
        let h_st = self.st.pooled_text(tape, store, vocab, &ex.st_text)?;
        let mut rows = doc.cls;
        rows.extend(doc.entities.into_iter().flatten());
        rows.push(h_st);
        Ok(tape.concat_rows(&rows))
    }

    /// Returns `(logit, probability)` vars.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        ex: &Prepared,
        options: ForwardOptions,
    ) -> Result<(Var, Var), EncodeError> {
        let h = self.features_var(tape, store, vocab, ex)?;
        let out = self.gvat.forward_var(tape, store, &ex.structure, h, options);
        Ok((out.logit, out.y))
    }

    pub fn loss_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        ex: &Prepared,
        options: ForwardOptions,
    ) -> Result<Var, EncodeError> {
        let (logit, _) = self.forward_var(tape, store, vocab, ex, options)?;
        Ok(bce_var(tape, logit, ex.label.as_f64()))
    }

    /// Probability that the statement is entailed.
    pub fn predict(&self, store: &ParamStore, vocab: &Vocab, ex: &Prepared, options: ForwardOptions) -> Result<f64, EncodeError> {
        let mut tape = Tape::new();
        let (_, y) = self.forward_var(&mut tape, store, vocab, ex, options)?;
        Ok(tape.value(y).item())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagAccuracy {
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub count: usize,
    pub tags: BTreeMap<String, TagAccuracy>,
}

/// Accuracy overall and per tag from `(predicted, gold, tag)` triples.
pub fn accuracy_report<'a>(outcomes: impl IntoIterator<Item = (Label, Label, Option<&'a str>)>) -> EvalReport {
    let mut hits = 0usize;
    let mut count = 0usize;
    let mut tags: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (pred, gold, tag) in outcomes {
        let ok = (pred == gold) as usize;
        hits += ok;
        count += 1;
        if let Some(t) = tag {
            let e = tags.entry(t.to_string()).or_default();
            e.0 += ok;
            e.1 += 1;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    EvalReport {
        accuracy: ratio(hits, count),
        count,
        tags: tags
            .into_iter()
            .map(|(t, (h, n))| {
                (
                    t,
                    TagAccuracy {
                        accuracy: ratio(h, n),
                        count: n,
                    },
                )
            })
            .collect(),
    }
}

pub fn evaluate(
    data: &[Prepared],
    store: &ParamStore,
    vocab: &Vocab,
    verifier: &Verifier,
    options: ForwardOptions,
) -> Result<EvalReport, VerifyError> {
    let mut outcomes = Vec::with_capacity(data.len());
    for ex in data {
        let y = verifier.predict(store, vocab, ex, options)?;
        outcomes.push((Label::from_bool(y >= 0.5), ex.label, ex.tag.as_deref()));
    }
    Ok(accuracy_report(outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub store: ParamStore,
    pub vocab: Vocab,
    pub verifier: Verifier,
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Mean BCE over a batch, recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    vocab: &Vocab,
    verifier: &Verifier,
    batch: &[&Prepared],
    options: ForwardOptions,
) -> Result<Var, VerifyError> {
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        losses.push(verifier.loss_var(tape, store, vocab, ex, options)?);
    }
    let stacked = tape.concat_rows(&losses);
    let sum = tape.sum_all(stacked);
    Ok(tape.scale(sum, 1.0 / batch.len() as f64))
}

/// Trains a fresh verifier. With validation data and a patience, the
/// parameters of the best validation epoch are returned.
pub fn train_verifier(train: &[Prepared], val: &[Prepared], config: &VerifierConfig) -> Result<Trained, VerifyError> {
    if train.is_empty() {
        return Err(LearnError::EmptyDataset.into());
    }
    let vocab = verifier_vocab(train, config.min_freq);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let verifier = Verifier::new(&mut store, vocab.len(), config, &mut rng);
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let options = config.options();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut steps = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch.max(1)) {
            store.set_frozen_prefix(ST_PREFIX, steps < config.freeze_steps);
            store.zero_grad();
            let mut tape = Tape::new();
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = batch_loss(&mut tape, &store, &vocab, &verifier, &batch, options)?;
            total += tape.value(loss).item() * batch.len() as f64;
            tape.backward(loss, &mut store)?;
            opt.update(&mut store);
            steps += 1;
        }
        let train_accuracy = evaluate(train, &store, &vocab, &verifier, options)?.accuracy;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate(val, &store, &vocab, &verifier, options)?.accuracy)
        };
        let m = EpochMetrics {
            epoch,
            steps,
            loss: total / train.len() as f64,
            train_accuracy,
            val_accuracy,
        };
        log::info!(
            "verify epoch {epoch}: loss {:.6} train {:.4} val {}",
            m.loss,
            m.train_accuracy,
            m.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );
        history.push(m);
        if let (Some(v), Some(patience)) = (val_accuracy, config.patience) {
            match &best {
                Some((b, _, _)) if v <= *b => {}
                _ => best = Some((v, epoch, store.clone())),
            }
            let since = epoch - best.as_ref().expect("set above").1;
            if since >= patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let last = history.len().saturating_sub(1);
    let (store, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (store, last),
    };
    Ok(Trained {
        store,
        vocab,
        verifier,
        history,
        best_epoch,
    })
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,steps,loss,train_accuracy,val_accuracy\n");
    for m in history {
        let val = m.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", m.epoch, m.steps, m.loss, m.train_accuracy, val).expect("string write");
    }
    out
}

pub fn metrics_jsonl(history: &[EpochMetrics]) -> String {
    history
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

/// Writes `metrics.csv` and `metrics.jsonl` into `dir`.
pub fn write_metrics(dir: &Path, history: &[EpochMetrics]) -> Result<(), LearnError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(history))?;
    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(history))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::grad_check;
    use crate::synth::synthetic_corpus;

    fn examples(n: usize, seed: u64) -> Vec<VerifyExample> {
        synthetic_corpus(n, seed)
            .into_iter()
            .map(|e| VerifyExample {
                statement: e.statement,
                table: Arc::new(e.table),
                program: e.program,
            })
            .collect()
    }

    fn small() -> VerifierConfig {
        VerifierConfig {
            dim: 8,
            att_dim: 4,
            epochs: 3,
            lr: 1e-2,
            ..VerifierConfig::default()
        }
    }

    #[test]
    fn empty_dataset() {
        assert!(matches!(
            train_verifier(&[], &[], &small()),
            Err(VerifyError::Learn(LearnError::EmptyDataset))
        ));
    }

    #[test]
    fn constant_labels_are_fit() {
        let mut data = prepare(&examples(16, 1), false).unwrap();
        data.iter_mut().for_each(|p| p.label = Label::Entailed);
        let trained = train_verifier(&data, &[], &VerifierConfig { epochs: 20, ..small() }).unwrap();
        assert_eq!(trained.history.last().unwrap().train_accuracy, 1.0);
    }

    #[test]
    fn frozen_statement_encoder_is_untouched() {
        let data = prepare(&examples(12, 2), false).unwrap();
        let config = small();
        let steps = config.epochs * data.len().div_ceil(config.batch);
        let frozen = train_verifier(&data, &[], &VerifierConfig { freeze_steps: steps, ..config.clone() }).unwrap();
        let vocab = verifier_vocab(&data, config.min_freq);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = ParamStore::new();
        Verifier::new(&mut init, vocab.len(), &config, &mut rng);
        for (i, name) in init.names().iter().enumerate() {
            let after = frozen.store.value(frozen.store.id(name).unwrap());
            if name.starts_with(ST_PREFIX) {
                assert_eq!(after, init.value(i), "{name}");
            } else if name.starts_with(DOC_PREFIX) && name.ends_with("mix") {
                assert_ne!(after, init.value(i), "{name}");
            }
        }
        // unfreezing after one step moves them
        let thawed = train_verifier(&data, &[], &VerifierConfig { freeze_steps: 1, ..config }).unwrap();
        let id = thawed.store.id("ver.st.mix").unwrap();
        assert_ne!(thawed.store.value(id), init.value(init.id("ver.st.mix").unwrap()));
    }

    #[test]
    fn batch_loss_is_mean_of_example_losses() {
        let data = prepare(&examples(5, 3), false).unwrap();
        let vocab = verifier_vocab(&data, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let v = Verifier::new(&mut store, vocab.len(), &small(), &mut rng);
        let refs: Vec<&Prepared> = data.iter().collect();
        let mut tape = Tape::new();
        let mean = batch_loss(&mut tape, &store, &vocab, &v, &refs, ForwardOptions::default()).unwrap();
        let mean = tape.value(mean).item();
        let each: f64 = data
            .iter()
            .map(|ex| {
                let mut t = Tape::new();
                let l = v.loss_var(&mut t, &store, &vocab, ex, ForwardOptions::default()).unwrap();
                t.value(l).item()
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!((mean - each).abs() < 1e-12);
    }

    #[test]
    fn full_model_gradients() {
        let data = prepare(&examples(4, 4), false).unwrap();
        let ex = data.iter().min_by_key(|p| p.structure.k()).unwrap();
        assert!(ex.structure.k() <= 8);
        let vocab = verifier_vocab(&data, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let v = Verifier::new(&mut store, vocab.len(), &VerifierConfig { dim: 4, att_dim: 3, ..small() }, &mut rng);
        let f = |s: &ParamStore, t: &mut Tape| v.loss_var(t, s, &vocab, ex, ForwardOptions::default()).unwrap();
        let report = grad_check(&mut store, f, 1e-4, Some(40));
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn tag_accuracies_average_to_overall() {
        use Label::*;
        let r = accuracy_report(vec![
            (Entailed, Entailed, Some("simple")),
            (Refuted, Entailed, Some("simple")),
            (Refuted, Refuted, Some("complex")),
            (Refuted, Refuted, Some("complex")),
            (Entailed, Refuted, Some("complex")),
        ]);
        assert_eq!(r.accuracy, 0.6);
        assert_eq!(r.tags["simple"], TagAccuracy { accuracy: 0.5, count: 2 });
        let weighted: f64 = r.tags.values().map(|t| t.accuracy * t.count as f64).sum::<f64>() / r.count as f64;
        assert!((weighted - r.accuracy).abs() < 1e-12);
        let all = accuracy_report(vec![(Entailed, Entailed, None), (Refuted, Refuted, None)]);
        assert_eq!(all.accuracy, 1.0);
    }

    #[test]
    fn coin_flip_classifier_near_half() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 2000;
        let r = accuracy_report((0..n).map(|i| (Label::from_bool(rng.gen_bool(0.5)), Label::from_bool(i % 2 == 0), None)));
        // 3 standard deviations of a binomial proportion
        let sd = (0.25 / n as f64).sqrt();
        assert!((r.accuracy - 0.5).abs() < 3.0 * sd, "{}", r.accuracy);
    }

    #[test]
    fn metric_files() {
        let h = vec![
            EpochMetrics { epoch: 0, steps: 2, loss: 0.5, train_accuracy: 0.75, val_accuracy: None },
            EpochMetrics { epoch: 1, steps: 4, loss: 0.25, train_accuracy: 1.0, val_accuracy: Some(0.5) },
        ];
        assert_eq!(metrics_csv(&h), "epoch,steps,loss,train_accuracy,val_accuracy\n0,2,0.5,0.75,\n1,4,0.25,1,0.5\n");
        let lines: Vec<EpochMetrics> = metrics_jsonl(&h).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, h);
    }
}
