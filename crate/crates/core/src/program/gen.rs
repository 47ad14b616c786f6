//! Random well-typed program generation, used by fuzz tests and the
//! synthetic corpus.

use rand::seq::SliceRandom;
use rand::Rng;

use super::ast::{Arg, Literal, Operation, Program};
use super::registry::{registry, ArgKind, Operator, ValueKind};
use crate::tabular::Table;

/// Literal material to draw leaves from.
#[derive(Debug, Clone)]
pub struct LiteralPool {
    pub columns: Vec<String>,
    /// Columns whose cells are all numeric; preferred for numeric slots.
    pub numeric_columns: Vec<String>,
    pub texts: Vec<String>,
    pub numbers: Vec<f64>,
}

impl LiteralPool {
    pub fn generic() -> Self {
        LiteralPool {
            columns: ["name", "score", "team", "games played"].map(String::from).to_vec(),
            numeric_columns: ["score", "games played"].map(String::from).to_vec(),
            texts: ["alice", "bob", "red team", "none", "-", "3"].map(String::from).to_vec(),
            numbers: vec![0.0, 1.0, 2.0, 3.5, 29.0, -4.0],
        }
    }

    pub fn from_table(table: &Table) -> Self {
        let columns = table.normalized_headers().to_vec();
        let numeric_columns = columns
            .iter()
            .enumerate()
            .filter(|(c, _)| table.rows.iter().all(|r| r[*c].numeric.is_some()))
            .map(|(_, h)| h.clone())
            .collect();
        let mut texts: Vec<String> = table.rows.iter().flatten().map(|c| c.normalized()).collect();
        texts.sort();
        texts.dedup();
        let mut numbers: Vec<f64> = table.rows.iter().flatten().filter_map(|c| c.numeric).collect();
        numbers.extend([0.0, 1.0, 2.0, 3.0]);
        numbers.sort_by(f64::total_cmp);
        numbers.dedup();
        LiteralPool {
            columns,
            numeric_columns,
            texts,
            numbers,
        }
    }

    fn column<R: Rng>(&self, rng: &mut R, numeric: bool) -> String {
        let pool = if numeric && !self.numeric_columns.is_empty() && rng.gen_bool(0.85) {
            &self.numeric_columns
        } else {
            &self.columns
        };
        pool.choose(rng).cloned().unwrap_or_else(|| "col".into())
    }
}

fn literal_able(want: ArgKind) -> bool {
    !matches!(want, ArgKind::Value(ValueKind::Row) | ArgKind::Value(ValueKind::Bool))
}

fn wants_numeric_column(op: &Operator) -> bool {
    use super::registry::OpCode::*;
    matches!(
        op.code,
        Avg | Sum | Max | Min | Argmax | Argmin | NumHop | UniqNum | FilterGreater | FilterLess
            | FilterGreaterOrEqual | FilterLessOrEqual | AllGreater | AllLess | AllGreaterOrEqual
            | AllLessOrEqual
    )
}

/// Generates a random well-typed program of at most `max_depth` nested
/// operations. With `root` set, the root operator produces that kind.
pub fn random_program<R: Rng>(
    rng: &mut R,
    pool: &LiteralPool,
    root: Option<ValueKind>,
    max_depth: usize,
) -> Program {
    let max_depth = max_depth.max(1);
    let op = random_op(rng, pool, &|k| root.is_none_or(|r| r == k), max_depth);
    Program::new(op).expect("generator only builds well-typed trees")
}

fn random_op<R: Rng>(
    rng: &mut R,
    pool: &LiteralPool,
    accept: &dyn Fn(ValueKind) -> bool,
    depth: usize,
) -> Operation {
    let candidates: Vec<&Operator> = registry()
        .iter()
        .filter(|o| accept(o.result_kind))
        .filter(|o| depth > 1 || o.arg_kinds.iter().all(|k| literal_able(*k)))
        .collect();
    let operator = *candidates.choose(rng).expect("every kind has a literal-only operator");
    let numeric_col = wants_numeric_column(operator);
    let scalar_kind = if rng.gen_bool(0.5) { ValueKind::Number } else { ValueKind::Text };
    let args = operator
        .arg_kinds
        .iter()
        .map(|&want| {
            let want = if want == ArgKind::Scalar { ArgKind::Value(scalar_kind) } else { want };
            random_arg(rng, pool, want, depth - 1, numeric_col)
        })
        .collect();
    Operation::new(operator.code, args)
}

fn random_arg<R: Rng>(
    rng: &mut R,
    pool: &LiteralPool,
    want: ArgKind,
    depth: usize,
    numeric_col: bool,
) -> Arg {
    if want == ArgKind::Column {
        return Arg::Lit(Literal::Column(pool.column(rng, numeric_col)));
    }
    let use_op = depth > 0 && (!literal_able(want) || rng.gen_bool(0.5));
    if use_op {
        return Arg::Op(random_op(rng, pool, &|k| want.accepts(k), depth));
    }
    let lit = match want {
        ArgKind::Value(ValueKind::View) | ArgKind::RowOrView => Literal::AllRows,
        ArgKind::Value(ValueKind::Number) => Literal::Number(*pool.numbers.choose(rng).unwrap_or(&1.0)),
        ArgKind::Value(ValueKind::Text) => Literal::Text(pool.texts.choose(rng).cloned().unwrap_or_default()),
        ArgKind::Cell | ArgKind::Scalar => {
            if rng.gen_bool(0.5) {
                Literal::Number(*pool.numbers.choose(rng).unwrap_or(&1.0))
            } else {
                Literal::Text(pool.texts.choose(rng).cloned().unwrap_or_default())
            }
        }
        ArgKind::Column | ArgKind::Value(ValueKind::Row) | ArgKind::Value(ValueKind::Bool) => {
            unreachable!("handled above")
        }
    };
    Arg::Lit(lit)
}
