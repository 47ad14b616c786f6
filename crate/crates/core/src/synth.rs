//! A generated statement-table corpus whose labels are decided by short
//! gold programs. Used for desk-scale training runs and ablations.
//!
//! Every table has the columns `name`, `team`, `score` and `year`. Each
//! statement comes from one of seven templates, and the refuted half is
//! made by perturbing a literal. Single-row lookups are tagged `simple`,
//! everything else `complex`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::{execute, Value};
use crate::program::{parse_program, Program};
use crate::tabular::{Label, Statement, Table};

const NAMES: [&str; 16] = [
    "anna", "boris", "carla", "dmitri", "elena", "felix", "greta", "hugo", "ingrid", "jonas", "karin", "lars",
    "marta", "nils", "olga", "pavel",
];
const TEAMS: [&str; 4] = ["eagles", "lions", "wolves", "sharks"];

#[derive(Debug, Clone)]
pub struct SynthExample {
    pub statement: Statement,
    pub table: Table,
    /// Executes to the statement's label on `table`.
    pub program: Program,
}

struct Row {
    name: &'static str,
    team: &'static str,
    score: i64,
    year: i64,
}

fn random_rows(rng: &mut ChaCha8Rng) -> Vec<Row> {
    let n = rng.gen_range(4..=6);
    let names: Vec<&str> = NAMES.choose_multiple(rng, n).copied().collect();
    let mut scores: Vec<i64> = (40..100).collect();
    scores.shuffle(rng);
    names
        .into_iter()
        .zip(scores)
        .map(|(name, score)| Row {
            name,
            team: TEAMS[rng.gen_range(0..3)],
            score,
            year: rng.gen_range(1990..2021),
        })
        .collect()
}

fn table_text(rows: &[Row]) -> String {
    let mut out = String::from("name#team#score#year\n");
    for r in rows {
        out.push_str(&format!("{}#{}#{}#{}\n", r.name, r.team, r.score, r.year));
    }
    out
}

/// Statement text, program text and tag for a template and target label.
fn instantiate(rng: &mut ChaCha8Rng, rows: &[Row], kind: usize, truth: bool) -> (String, String, &'static str) {
    let pick = |rng: &mut ChaCha8Rng| &rows[rng.gen_range(0..rows.len())];
    match kind {
        0 => {
            let r = pick(rng);
            let score = if truth { r.score } else { r.score + rng.gen_range(1..=9) };
            (
                format!("the score of {} is {score}", r.name),
                format!("equal {{ num_hop {{ filter_eq {{ all_rows ; name ; {} }} ; score }} ; {score} }}", r.name),
                "simple",
            )
        }
        1 => {
            let r = pick(rng);
            let team = if truth {
                r.team
            } else {
                *TEAMS.iter().find(|t| **t != r.team).expect("several teams")
            };
            (
                format!("{} plays for the {team}", r.name),
                format!("equal {{ hop {{ filter_eq {{ all_rows ; name ; {} }} ; team }} ; {team} }}", r.name),
                "simple",
            )
        }
        2 => {
            let team = pick(rng).team;
            let n = rows.iter().filter(|r| r.team == team).count();
            let n = if truth { n } else { n + 1 };
            (
                format!("there are {n} players with team {team}"),
                format!("equal {{ count {{ filter_eq {{ all_rows ; team ; {team} }} }} ; {n} }}"),
                "complex",
            )
        }
        3 => {
            let best = rows.iter().max_by_key(|r| r.score).expect("rows");
            let name = if truth {
                best.name
            } else {
                rows.iter().find(|r| r.name != best.name).expect("rows").name
            };
            (
                format!("{name} has the highest score"),
                format!("equal {{ hop {{ argmax {{ all_rows ; score }} ; name }} ; {name} }}"),
                "complex",
            )
        }
        4 => {
            let mut two: Vec<&Row> = rows.iter().collect::<Vec<_>>().choose_multiple(rng, 2).copied().collect();
            two.sort_by_key(|r| std::cmp::Reverse(r.score));
            let (a, b) = if truth { (two[0], two[1]) } else { (two[1], two[0]) };
            (
                format!("{} has a higher score than {}", a.name, b.name),
                format!(
                    "greater {{ num_hop {{ filter_eq {{ all_rows ; name ; {} }} ; score }} ; \
                     num_hop {{ filter_eq {{ all_rows ; name ; {} }} ; score }} }}",
                    a.name, b.name
                ),
                "complex",
            )
        }
        5 => {
            let team = pick(rng).team;
            let total: i64 = rows.iter().filter(|r| r.team == team).map(|r| r.score).sum();
            let total = if truth { total } else { total + rng.gen_range(1..=20) };
            (
                format!("the total score of team {team} is {total}"),
                format!("equal {{ sum {{ filter_eq {{ all_rows ; team ; {team} }} ; score }} ; {total} }}"),
                "complex",
            )
        }
        _ => {
            let lowest = rows.iter().map(|r| r.year).min().expect("rows");
            let bound = if truth { lowest - rng.gen_range(1..=5) } else { lowest + rng.gen_range(0..=3) };
            (
                format!("all rows have a year greater than {bound}"),
                format!("all_greater {{ all_rows ; year ; {bound} }}"),
                "complex",
            )
        }
    }
}

/// Generates `n` statement-table pairs with alternating labels.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<SynthExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let i = out.len();
        let truth = i % 2 == 0;
        let rows = random_rows(&mut rng);
        let kind = rng.gen_range(0..7);
        let (text, program, tag) = instantiate(&mut rng, &rows, kind, truth);
        let table_id = format!("synth-{i}.csv");
        let table = Table::from_tabfact_csv(&table_id, &table_text(&rows), &table_id).expect("generated table parses");
        let program = parse_program(&program).expect("generated program parses");
        // a perturbation can land on the true value; draw again
        match execute(&program, &table) {
            Ok((Value::Bool(b), _)) if b == truth => {}
            _ => continue,
        }
        let statement = Statement {
            id: format!("synth-{i}"),
            table_id,
            text,
            label: Label::from_bool(truth),
            tag: Some(tag.to_string()),
        };
        out.push(SynthExample {
            statement,
            table,
            program,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::execute_label;

    #[test]
    fn gold_programs_decide_labels() {
        let corpus = synthetic_corpus(200, 0);
        assert_eq!(corpus.len(), 200);
        let entailed = corpus.iter().filter(|e| e.statement.label == Label::Entailed).count();
        assert_eq!(entailed, 100);
        for e in &corpus {
            assert!(e.program.depth() <= 3, "{}", e.statement.text);
            assert_eq!(execute_label(&e.program, &e.table).unwrap(), e.statement.label);
        }
        let simple = corpus.iter().filter(|e| e.statement.tag.as_deref() == Some("simple")).count();
        assert!(simple > 20 && simple < 120, "{simple}");
    }

    #[test]
    fn seeded() {
        let a = synthetic_corpus(20, 3);
        let b = synthetic_corpus(20, 3);
        let texts = |c: &[SynthExample]| c.iter().map(|e| e.statement.text.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&a), texts(&b));
        assert_ne!(texts(&a), texts(&synthetic_corpus(20, 4)));
    }
}
