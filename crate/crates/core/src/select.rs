//! Program selection: score each candidate against its statement and keep
//! the best one.
//!
//! `p(z | s) = sigmoid(w_r · enc(s, z))`. Training uses either the margin
//! loss `max(p_neg - p_pos + γ, 0)` over the current best label-consistent
//! and label-inconsistent programs, or the cross-entropy baseline
//! `-Σ log p(z)` over every label-consistent program.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{EncodeError, Encoder, Vocab};
use crate::learn::{glorot, Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::program::{print_program, Program};
use crate::search::CandidateSet;
use crate::tabular::Statement;

pub const DEFAULT_GAMMA: f64 = 0.15;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no label-consistent candidate")]
    NoPositive,
    #[error("no label-inconsistent candidate")]
    NoNegative,
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("margin must be non-negative, got {0}")]
    NegativeGamma(f64),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionLoss {
    Margin,
    Ce,
}

impl FromStr for SelectionLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "margin" => Ok(SelectionLoss::Margin),
            "ce" => Ok(SelectionLoss::Ce),
            other => Err(format!("unknown loss {other:?}, expected margin or ce")),
        }
    }
}

/// The selector's tensors inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Selector {
    pub encoder: Encoder,
    pub w_r: ParamId,
    pub gamma: f64,
}

impl Selector {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab_size: usize, dim: usize, gamma: f64, rng: &mut R) -> Self {
        let encoder = Encoder::new(store, "sel.enc", vocab_size, dim, rng);
        let w_r = store.add("sel.w_r", glorot(rng, dim, 1));
        Selector { encoder, w_r, gamma }
    }

    pub fn attach(store: &ParamStore, gamma: f64) -> Option<Self> {
        Some(Selector {
            encoder: Encoder::attach(store, "sel.enc")?,
            w_r: store.id("sel.w_r")?,
            gamma,
        })
    }

    /// Probability as a 1×1 tape value.
    pub fn score_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab: &Vocab,
        statement: &str,
        program_text: &str,
    ) -> Result<Var, EncodeError> {
        let h = self.encoder.pair_var(tape, store, vocab, statement, program_text)?;
        let w = tape.param(store, self.w_r);
        let logit = tape.matmul(h, w);
        Ok(tape.sigmoid(logit))
    }

    pub fn score(&self, store: &ParamStore, vocab: &Vocab, s: &Statement, z: &Program) -> Result<f64, EncodeError> {
        let mut tape = Tape::new();
        let p = self.score_var(&mut tape, store, vocab, &s.text, &print_program(z))?;
        Ok(tape.value(p).item())
    }

    pub fn rank(&self, store: &ParamStore, vocab: &Vocab, cands: &CandidateSet) -> Result<RankedCandidates, EncodeError> {
        let probs = cands
            .programs
            .iter()
            .map(|c| self.score(store, vocab, &cands.statement, &c.program))
            .collect::<Result<Vec<_>, _>>()?;
        let texts: Vec<String> = cands.programs.iter().map(|c| print_program(&c.program)).collect();
        Ok(RankedCandidates::new(probs, &texts, cands.consistent.clone(), cands.inconsistent.clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    pub probs: Vec<f64>,
    /// Best candidate overall; ties go to the smaller canonical text.
    pub argmax: Option<usize>,
    pub consistent: Vec<usize>,
    pub inconsistent: Vec<usize>,
}

/// Index of the highest score; ties go to the lexicographically smaller
/// text.
fn best_of(idx: impl Iterator<Item = usize>, probs: &[f64], texts: Option<&[String]>) -> Option<usize> {
    idx.max_by(|&a, &b| {
        probs[a].total_cmp(&probs[b]).then_with(|| match texts {
            Some(t) => t[b].cmp(&t[a]),
            None => b.cmp(&a),
        })
    })
}

impl RankedCandidates {
    pub fn new(probs: Vec<f64>, texts: &[String], consistent: Vec<usize>, inconsistent: Vec<usize>) -> Self {
        let argmax = best_of(0..probs.len(), &probs, Some(texts));
        RankedCandidates {
            probs,
            argmax,
            consistent,
            inconsistent,
        }
    }

    pub fn best_positive(&self) -> Option<usize> {
        best_of(self.consistent.iter().copied(), &self.probs, None)
    }

    pub fn best_negative(&self) -> Option<usize> {
        best_of(self.inconsistent.iter().copied(), &self.probs, None)
    }
}

pub fn margin(p_pos: f64, p_neg: f64, gamma: f64) -> f64 {
    (p_neg - p_pos + gamma).max(0.0)
}

pub fn margin_loss(c: &RankedCandidates, gamma: f64) -> Result<f64, SelectError> {
    if gamma < 0.0 {
        return Err(SelectError::NegativeGamma(gamma));
    }
    let pos = c.best_positive().ok_or(SelectError::NoPositive)?;
    let neg = c.best_negative().ok_or(SelectError::NoNegative)?;
    Ok(margin(c.probs[pos], c.probs[neg], gamma))
}

pub fn ce_loss(c: &RankedCandidates) -> f64 {
    -c.consistent.iter().map(|&i| c.probs[i].ln()).sum::<f64>()
}

/// Highest-probability program over all candidates, labels unseen.
pub fn select_top(
    store: &ParamStore,
    vocab: &Vocab,
    selector: &Selector,
    cands: &CandidateSet,
) -> Result<usize, SelectError> {
    if cands.programs.is_empty() {
        return Err(SelectError::EmptyCandidateSet);
    }
    let ranked = selector.rank(store, vocab, cands)?;
    Ok(ranked.argmax.expect("non-empty"))
}

/// Fraction of statements whose top program executes to the gold label.
/// Empty candidate sets count as wrong.
pub fn selection_accuracy(store: &ParamStore, vocab: &Vocab, selector: &Selector, data: &[CandidateSet]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .iter()
        .filter(|c| match select_top(store, vocab, selector, c) {
            Ok(i) => c.programs[i].label == c.statement.label,
            Err(_) => false,
        })
        .count();
    correct as f64 / data.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectConfig {
    pub loss: SelectionLoss,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub dim: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            loss: SelectionLoss::Margin,
            gamma: DEFAULT_GAMMA,
            epochs: 20,
            lr: 1e-3,
            dim: 32,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Statements skipped by the margin loss (one partition side empty).
    pub skipped: usize,
}

pub fn selection_vocab(data: &[CandidateSet], min_freq: usize) -> Vocab {
    let texts: Vec<String> = data
        .iter()
        .flat_map(|c| {
            std::iter::once(c.statement.text.clone()).chain(c.programs.iter().map(|p| print_program(&p.program)))
        })
        .collect();
    Vocab::build(texts.iter().map(String::as_str), min_freq)
}

/// Records one statement's loss on `tape`; `None` when the statement is
/// skipped.
fn statement_loss(
    tape: &mut Tape,
    store: &ParamStore,
    vocab: &Vocab,
    selector: &Selector,
    loss: SelectionLoss,
    cands: &CandidateSet,
) -> Result<Option<Var>, SelectError> {
    let texts: Vec<String> = cands.programs.iter().map(|c| print_program(&c.program)).collect();
    let s = cands.statement.text.as_str();
    match loss {
        SelectionLoss::Margin => {
            if cands.consistent.is_empty() || cands.inconsistent.is_empty() {
                return Ok(None);
            }
            let ranked = selector.rank(store, vocab, cands)?;
            let (pos, neg) = (
                ranked.best_positive().expect("non-empty"),
                ranked.best_negative().expect("non-empty"),
            );
            let p_pos = selector.score_var(tape, store, vocab, s, &texts[pos])?;
            let p_neg = selector.score_var(tape, store, vocab, s, &texts[neg])?;
            let d = tape.sub(p_neg, p_pos);
            let g = tape.constant(Tensor::scalar(selector.gamma));
            let z = tape.add(d, g);
            Ok(Some(tape.relu(z)))
        }
        SelectionLoss::Ce => {
            if cands.consistent.is_empty() {
                return Ok(None);
            }
            let mut logs = Vec::with_capacity(cands.consistent.len());
            for &i in &cands.consistent {
                let p = selector.score_var(tape, store, vocab, s, &texts[i])?;
                logs.push(tape.log(p));
            }
            let stacked = tape.concat_rows(&logs);
            let total = tape.sum_all(stacked);
            Ok(Some(tape.scale(total, -1.0)))
        }
    }
}

/// Trains a fresh selector. Returns the parameters and per-epoch metrics.
pub fn train_selector(
    data: &[CandidateSet],
    vocab: &Vocab,
    config: &SelectConfig,
) -> Result<(ParamStore, Selector, Vec<SelectEpoch>), SelectError> {
    if config.gamma < 0.0 {
        return Err(SelectError::NegativeGamma(config.gamma));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let selector = Selector::new(&mut store, vocab.len(), config.dim, config.gamma, &mut rng);
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut counted = 0usize;
        let mut skipped = 0usize;
        for batch in order.chunks(config.batch.max(1)) {
            store.zero_grad();
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for &i in batch {
                match statement_loss(&mut tape, &store, vocab, &selector, config.loss, &data[i])? {
                    Some(l) => losses.push(l),
                    None => {
                        skipped += 1;
                        log::debug!("skipping {} for {:?} loss", data[i].statement.id, config.loss);
                    }
                }
            }
            if losses.is_empty() {
                continue;
            }
            let stacked = tape.concat_rows(&losses);
            let sum = tape.sum_all(stacked);
            total += tape.value(sum).item();
            counted += losses.len();
            let mean = tape.scale(sum, 1.0 / losses.len() as f64);
            tape.backward(mean, &mut store).expect("scalar loss");
            opt.update(&mut store);
        }
        let acc = selection_accuracy(&store, vocab, &selector, data);
        let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
        log::info!("select epoch {epoch}: loss {loss:.6} accuracy {acc:.4}");
        history.push(SelectEpoch {
            epoch,
            loss,
            train_accuracy: acc,
            skipped,
        });
    }
    Ok((store, selector, history))
}

/// Orders candidate indices best first, ties by canonical text.
pub fn sort_by_score(probs: &[f64], texts: &[String]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| match probs[b].total_cmp(&probs[a]) {
        Ordering::Equal => texts[a].cmp(&texts[b]),
        o => o,
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::grad_check;
    use crate::program::parse_program;
    use crate::search::Candidate;
    use crate::tabular::Label;
    use proptest::prelude::*;

    fn ranked(probs: &[f64], consistent: &[usize], inconsistent: &[usize]) -> RankedCandidates {
        let texts: Vec<String> = (0..probs.len()).map(|i| format!("p{i}")).collect();
        RankedCandidates::new(probs.to_vec(), &texts, consistent.to_vec(), inconsistent.to_vec())
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(&ranked(&[0.9, 0.5], &[0], &[1]), 0.15).unwrap(), 0.0);
        let l = margin_loss(&ranked(&[0.7, 0.8], &[0], &[1]), 0.15).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
        assert_eq!(margin_loss(&ranked(&[0.6, 0.6], &[0], &[1]), 0.15).unwrap(), 0.15);
        assert!(matches!(margin_loss(&ranked(&[0.6], &[], &[0]), 0.15), Err(SelectError::NoPositive)));
        assert!(matches!(margin_loss(&ranked(&[0.6], &[0], &[]), 0.15), Err(SelectError::NoNegative)));
    }

    #[test]
    fn margin_uses_partition_maxima() {
        let r = ranked(&[0.2, 0.9, 0.1, 0.4], &[0, 1], &[2, 3]);
        assert_eq!(margin_loss(&r, 0.15).unwrap(), 0.0);
        let r = ranked(&[0.2, 0.3, 0.1, 0.4], &[0, 1], &[2, 3]);
        assert!((margin_loss(&r, 0.15).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&ranked(&[1.0], &[0], &[])), 0.0);
        assert!((ce_loss(&ranked(&[(-1f64).exp()], &[0], &[])) - 1.0).abs() < 1e-12);
        let l = ce_loss(&ranked(&[0.5, 0.5, 0.9], &[0, 1], &[2]));
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(ce_loss(&ranked(&[0.5], &[], &[0])), 0.0);
    }

    #[test]
    fn argmax_ties_by_text() {
        let texts = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let r = RankedCandidates::new(vec![0.5, 0.5, 0.1], &texts, vec![], vec![]);
        assert_eq!(r.argmax, Some(1));
        let r = RankedCandidates::new(vec![0.5, 0.7, 0.1], &texts, vec![], vec![]);
        assert_eq!(r.argmax, Some(1));
        assert_eq!(sort_by_score(&[0.5, 0.5, 0.9], &texts), vec![2, 1, 0]);
    }

    fn statement(text: &str, label: Label) -> Statement {
        Statement {
            id: format!("t#{text}"),
            table_id: "t".into(),
            text: text.into(),
            label,
            tag: None,
        }
    }

    fn cset(text: &str, progs: &[(&str, Label)], label: Label) -> CandidateSet {
        let programs: Vec<Candidate> = progs
            .iter()
            .map(|(p, l)| Candidate {
                program: parse_program(p).unwrap(),
                label: *l,
            })
            .collect();
        let consistent = (0..programs.len()).filter(|&i| programs[i].label == label).collect();
        let inconsistent = (0..programs.len()).filter(|&i| programs[i].label != label).collect();
        CandidateSet {
            statement: statement(text, label),
            programs,
            consistent,
            inconsistent,
            budget_exceeded: false,
        }
    }

    fn toy() -> Vec<CandidateSet> {
        use Label::*;
        vec![
            cset(
                "the highest score is 5",
                &[
                    ("equal { max { all_rows ; score } ; 5 }", Entailed),
                    ("equal { min { all_rows ; score } ; 5 }", Refuted),
                ],
                Entailed,
            ),
            cset(
                "the lowest score is 1",
                &[
                    ("equal { max { all_rows ; score } ; 1 }", Refuted),
                    ("equal { min { all_rows ; score } ; 1 }", Entailed),
                ],
                Entailed,
            ),
            cset(
                "the highest score is 2",
                &[
                    ("equal { max { all_rows ; score } ; 2 }", Refuted),
                    ("equal { min { all_rows ; score } ; 2 }", Refuted),
                ],
                Refuted,
            ),
        ]
    }

    #[test]
    fn zero_head_gives_half() {
        let data = toy();
        let vocab = selection_vocab(&data, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sel = Selector::new(&mut store, vocab.len(), 8, 0.15, &mut rng);
        store.value_mut(sel.w_r).data.iter_mut().for_each(|x| *x = 0.0);
        let p = sel.score(&store, &vocab, &data[0].statement, &data[0].programs[0].program).unwrap();
        assert_eq!(p, 0.5);
        // every score ties, so the top is the smaller canonical text
        let top = select_top(&store, &vocab, &sel, &data[0]).unwrap();
        assert_eq!(print_program(&data[0].programs[top].program), "equal { max { all_rows ; \"score\" } ; 5 }");
    }

    #[test]
    fn accuracy_counts_by_hand() {
        let data = toy();
        let vocab = selection_vocab(&data, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sel = Selector::new(&mut store, vocab.len(), 8, 0.15, &mut rng);
        store.value_mut(sel.w_r).data.iter_mut().for_each(|x| *x = 0.0);
        // ties pick "max" everywhere: right, wrong, right (both refuted)
        let acc = selection_accuracy(&store, &vocab, &sel, &data);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        let mut empty = data[0].clone();
        empty.programs.clear();
        empty.consistent.clear();
        empty.inconsistent.clear();
        assert_eq!(selection_accuracy(&store, &vocab, &sel, &[empty]), 0.0);
    }

    #[test]
    fn margin_training_separates_toy_set() {
        let data = toy();
        let vocab = selection_vocab(&data, 1);
        let config = SelectConfig {
            epochs: 150,
            lr: 1e-2,
            dim: 8,
            batch: 3,
            ..SelectConfig::default()
        };
        let (mut store, sel, history) = train_selector(&data, &vocab, &config).unwrap();
        assert_eq!(history.last().unwrap().train_accuracy, 1.0);
        for c in &data[..2] {
            let r = sel.rank(&store, &vocab, c).unwrap();
            assert_eq!(margin_loss(&r, 0.15).unwrap(), 0.0, "{:?}", r.probs);
        }
        // flat region of the hinge: both gradients are exactly zero
        let f = |s: &ParamStore, t: &mut Tape| {
            statement_loss(t, s, &vocab, &sel, SelectionLoss::Margin, &data[0]).unwrap().unwrap()
        };
        let report = grad_check(&mut store, f, 1e-4, Some(50));
        assert_eq!(report.max_error(), 0.0);
    }

    #[test]
    fn selector_gradients_both_losses() {
        let data = toy();
        let vocab = selection_vocab(&data, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let sel = Selector::new(&mut store, vocab.len(), 4, 0.15, &mut rng);
        for loss in [SelectionLoss::Margin, SelectionLoss::Ce] {
            let f = |s: &ParamStore, t: &mut Tape| {
                statement_loss(t, s, &vocab, &sel, loss, &data[0]).unwrap().unwrap()
            };
            let report = grad_check(&mut store, f, 1e-4, None);
            assert!(report.passed(), "{loss:?} {:?}", report.worst());
        }
    }

    proptest! {
        #[test]
        fn margin_zero_iff_separated(
            probs in proptest::collection::vec(0.001f64..0.999, 2..8),
            split in 1usize..7,
            gamma in 0.0f64..0.5,
        ) {
            let split = split.min(probs.len() - 1);
            let pos: Vec<usize> = (0..split).collect();
            let neg: Vec<usize> = (split..probs.len()).collect();
            let r = ranked(&probs, &pos, &neg);
            let pmax = pos.iter().map(|&i| probs[i]).fold(f64::MIN, f64::max);
            let nmax = neg.iter().map(|&i| probs[i]).fold(f64::MIN, f64::max);
            let l = margin_loss(&r, gamma).unwrap();
            prop_assert_eq!(l == 0.0, pmax >= nmax + gamma);
            prop_assert!((l - (nmax - pmax + gamma).max(0.0)).abs() < 1e-15);
        }

        #[test]
        fn top_invariant_under_monotone_shift(probs in proptest::collection::vec(0.01f64..0.99, 1..10), k in 0.1f64..5.0) {
            let texts: Vec<String> = (0..probs.len()).map(|i| format!("z{i}")).collect();
            let logit = |p: f64| (p / (1.0 - p)).ln();
            let shifted: Vec<f64> = probs.iter().map(|&p| 1.0 / (1.0 + (-(k * logit(p) + 0.3)).exp())).collect();
            let a = RankedCandidates::new(probs, &texts, vec![], vec![]);
            let b = RankedCandidates::new(shifted, &texts, vec![], vec![]);
            prop_assert_eq!(a.argmax, b.argmax);
        }
    }
}
