use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use progfv::exec::execute_label;
use progfv::gvat::GraphStructure;
use progfv::learn::train::{prepare, train_verifier, VerifierConfig, VerifyExample};
use progfv::program::gen::{random_program, LiteralPool};
use progfv::program::{parse_program, print_program, ValueKind};
use progfv::search::{search, verify_partition, SearchLimits};
use progfv::select::{select_top, selection_vocab, train_selector, SelectConfig};
use progfv::synth::synthetic_corpus;
use progfv::verbalize::verbalize;

fn limits() -> SearchLimits {
    SearchLimits {
        max_ops: 4,
        max_candidates: 30,
        time_budget: None,
        ..SearchLimits::default()
    }
}

#[test]
fn selected_programs_feed_the_verifier() {
    let corpus = synthetic_corpus(12, 21);
    let sets: Vec<_> = corpus.iter().map(|e| search(&e.statement, &e.table, &limits())).collect();
    let vocab = selection_vocab(&sets, 1);
    let config = SelectConfig { epochs: 2, ..SelectConfig::default() };
    let (store, selector, history) = train_selector(&sets, &vocab, &config).unwrap();
    assert_eq!(history.len(), 2);

    let mut examples = Vec::new();
    for (e, set) in corpus.iter().zip(&sets) {
        assert!(verify_partition(set, &e.table));
        let Ok(i) = select_top(&store, &vocab, &selector, set) else { continue };
        examples.push(VerifyExample {
            statement: e.statement.clone(),
            table: Arc::new(e.table.clone()),
            program: set.programs[i].program.clone(),
        });
    }
    assert!(examples.len() >= 10, "{}", examples.len());
    let data = prepare(&examples, false).unwrap();
    let config = VerifierConfig { epochs: 2, dim: 8, att_dim: 4, min_freq: 1, ..VerifierConfig::default() };
    let trained = train_verifier(&data, &data[..2], &config).unwrap();
    assert!(trained.history.iter().all(|m| m.loss.is_finite() && m.val_accuracy.is_some()));
}

#[test]
fn gold_programs_survive_printing() {
    for e in synthetic_corpus(40, 2) {
        let again = parse_program(&print_program(&e.program)).unwrap();
        assert_eq!(again, e.program);
        assert_eq!(execute_label(&again, &e.table).unwrap(), e.statement.label);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_sentence_per_operation(seed in any::<u64>()) {
        let e = &synthetic_corpus(1, seed)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_program(&mut rng, &LiteralPool::from_table(&e.table), Some(ValueKind::Bool), 3);
        if let Ok(v) = verbalize(&p, &e.table) {
            prop_assert_eq!(v.sentences.len(), p.size());
            for (sentence, spans) in v.sentences.iter().zip(&v.spans) {
                for s in spans {
                    prop_assert_eq!(&sentence[s.range.clone()], s.text.as_str());
                }
            }
            let g = GraphStructure::build(&p, &v).unwrap();
            prop_assert_eq!(g.k(), p.size() + v.entity_count() + 1);
        }
    }

    #[test]
    fn search_partitions_agree_with_interpreter(seed in 0u64..500) {
        let e = &synthetic_corpus(1, seed)[0];
        let set = search(&e.statement, &e.table, &SearchLimits { max_candidates: 10, ..limits() });
        prop_assert!(set.programs.len() <= 10);
        prop_assert!(verify_partition(&set, &e.table));
    }
}
