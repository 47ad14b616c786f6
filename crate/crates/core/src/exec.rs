//! Recursive program interpreter.
//!
//! Every operation is evaluated in post-order and its resolved arguments and
//! result are recorded in a [`Trace`], which verbalization consumes.

use std::fmt;

use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::program::{format_number, Arg, Literal, NodePath, OpCode, Operation, Program, ValueKind};
use crate::tabular::{normalize, Label, Table};

/// Relative tolerance for numeric equality.
pub const NUMERIC_EPSILON: f64 = 1e-6;

/// Strings the `none` operator treats as missing values (normalized).
pub const NONE_SENTINELS: [&str; 5] = ["none", "no", "-", "n/a", ""];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("unknown column {column:?}")]
    UnknownColumn { column: String },
    #[error("{op} over an empty view")]
    EmptyViewAggregate { op: String },
    #[error("{op} needs numbers but column {column:?} has a non-numeric cell in the view")]
    NonNumericColumn { op: String, column: String },
    #[error("{op} found more than one distinct value in column {column:?}")]
    NotUnique { op: String, column: String },
    #[error("kind mismatch at {path}: {message}")]
    KindMismatch { path: NodePath, message: String },
    #[error("program root produces {0}, not Bool")]
    NonBooleanRoot(ValueKind),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Text(String),
    Bool(bool),
    Row(usize),
    /// Strictly increasing row indices.
    View(Vec<usize>),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Number(_) => ValueKind::Number,
            Value::Text(_) => ValueKind::Text,
            Value::Bool(_) => ValueKind::Bool,
            Value::Row(_) => ValueKind::Row,
            Value::View(_) => ValueKind::View,
        }
    }

    /// Equality with numeric tolerance and normalized text comparison.
    pub fn approx_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Number(a), Value::Number(b)) => numbers_equal(*a, *b),
            (Value::Text(a), Value::Text(b)) => normalize(a) == normalize(b),
            _ => self == other,
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Value::Number(v) => json!({ "kind": "Number", "value": v }),
            Value::Text(s) => json!({ "kind": "Text", "value": s }),
            Value::Bool(b) => json!({ "kind": "Bool", "value": b }),
            Value::Row(r) => json!({ "kind": "Row", "value": r }),
            Value::View(rows) => json!({ "kind": "View", "value": rows }),
        }
    }
}

/// Human-readable rendering; rows are shown 1-based.
impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => f.write_str(&format_number(*v)),
            Value::Text(s) => f.write_str(s),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Row(r) => write!(f, "row {}", r + 1),
            Value::View(rows) => {
                let idx: Vec<String> = rows.iter().map(|r| (r + 1).to_string()).collect();
                write!(f, "rows [{}]", idx.join(", "))
            }
        }
    }
}

pub fn numbers_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= NUMERIC_EPSILON * 1f64.max(a.abs()).max(b.abs())
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// One executed operation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub path: NodePath,
    pub op: OpCode,
    /// Resolved argument values; `None` for column references.
    pub args: Vec<Option<Value>>,
    pub result: Value,
}

/// Post-order execution records, one per operation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_json(&self) -> Json {
        Json::Array(
            self.records
                .iter()
                .map(|r| {
                    json!({
                        "path": r.path.to_string(),
                        "op": r.op.name(),
                        "args": r.args.iter().map(|a| a.as_ref().map_or(Json::Null, Value::to_json)).collect::<Vec<_>>(),
                        "result": r.result.to_json(),
                    })
                })
                .collect(),
        )
    }
}

pub fn execute(p: &Program, t: &Table) -> Result<(Value, Trace), ExecError> {
    let mut trace = Trace::default();
    let mut path = Vec::new();
    let root = Interpreter { table: t }.eval(&p.root, &mut path, &mut trace)?;
    Ok((root, trace))
}

/// Executes a Bool-rooted program and returns its verification label.
pub fn execute_label(p: &Program, t: &Table) -> Result<Label, ExecError> {
    if p.result_kind() != ValueKind::Bool {
        return Err(ExecError::NonBooleanRoot(p.result_kind()));
    }
    match execute(p, t)?.0 {
        Value::Bool(b) => Ok(Label::from_bool(b)),
        other => Err(ExecError::NonBooleanRoot(other.kind())),
    }
}

struct Interpreter<'t> {
    table: &'t Table,
}

/// Argument resolved for evaluation.
enum Resolved {
    Column(usize, String),
    Value(Value),
}

impl Interpreter<'_> {
    fn eval(&self, op: &Operation, path: &mut Vec<usize>, trace: &mut Trace) -> Result<Value, ExecError> {
        let mut args = Vec::with_capacity(op.args.len());
        for (i, arg) in op.args.iter().enumerate() {
            let resolved = match arg {
                Arg::Op(child) => {
                    path.push(i);
                    let v = self.eval(child, path, trace)?;
                    path.pop();
                    Resolved::Value(v)
                }
                Arg::Lit(Literal::Column(name)) => {
                    let idx = self
                        .table
                        .column_index(name)
                        .ok_or_else(|| ExecError::UnknownColumn { column: name.clone() })?;
                    Resolved::Column(idx, name.clone())
                }
                Arg::Lit(Literal::Text(s)) => Resolved::Value(Value::Text(s.clone())),
                Arg::Lit(Literal::Number(v)) => Resolved::Value(Value::Number(*v)),
                Arg::Lit(Literal::AllRows) => Resolved::Value(Value::View((0..self.table.num_rows()).collect())),
            };
            args.push(resolved);
        }
        let result = self.apply(op.op, &args, path)?;
        trace.records.push(TraceRecord {
            path: NodePath(path.clone()),
            op: op.op,
            args: args
                .into_iter()
                .map(|a| match a {
                    Resolved::Value(v) => Some(v),
                    Resolved::Column(..) => None,
                })
                .collect(),
            result: result.clone(),
        });
        Ok(result)
    }

    fn apply(&self, op: OpCode, args: &[Resolved], path: &[usize]) -> Result<Value, ExecError> {
        let name = op.name();
        let kind_err = |message: String| ExecError::KindMismatch {
            path: NodePath(path.to_vec()),
            message,
        };
        let view = |i: usize| match &args[i] {
            Resolved::Value(Value::View(v)) => Ok(v.as_slice()),
            _ => Err(kind_err(format!("{name} argument {} must be a View", i + 1))),
        };
        let row = |i: usize| match &args[i] {
            Resolved::Value(Value::Row(r)) => Ok(*r),
            _ => Err(kind_err(format!("{name} argument {} must be a Row", i + 1))),
        };
        let number = |i: usize| match &args[i] {
            Resolved::Value(Value::Number(v)) => Ok(*v),
            _ => Err(kind_err(format!("{name} argument {} must be a Number", i + 1))),
        };
        let boolean = |i: usize| match &args[i] {
            Resolved::Value(Value::Bool(b)) => Ok(*b),
            _ => Err(kind_err(format!("{name} argument {} must be a Bool", i + 1))),
        };
        let column = |i: usize| match &args[i] {
            Resolved::Column(c, n) => Ok((*c, n.as_str())),
            _ => Err(kind_err(format!("{name} argument {} must be a column", i + 1))),
        };
        let scalar = |i: usize| match &args[i] {
            Resolved::Value(v @ (Value::Number(_) | Value::Text(_))) => Ok(v),
            _ => Err(kind_err(format!("{name} argument {} must be Text or Number", i + 1))),
        };
        let rows_of = |i: usize| -> Result<Vec<usize>, ExecError> {
            match &args[i] {
                Resolved::Value(Value::View(v)) => Ok(v.clone()),
                Resolved::Value(Value::Row(r)) => Ok(vec![*r]),
                _ => Err(kind_err(format!("{name} argument {} must be a Row or View", i + 1))),
            }
        };

        use OpCode::*;
        let value = match op {
            Count => Value::Number(view(0)?.len() as f64),
            Only => Value::Bool(view(0)?.len() == 1),
            Several => Value::Bool(view(0)?.len() > 1),
            Zero => Value::Bool(numbers_equal(number(0)?, 0.0)),
            IsNone => match &args[0] {
                Resolved::Value(Value::Text(s)) => Value::Bool(NONE_SENTINELS.contains(&normalize(s).as_str())),
                _ => return Err(kind_err("none argument must be Text".into())),
            },
            With | Without => {
                let (c, _) = column(1)?;
                let target = scalar(2)?;
                let found = view(0)?.iter().any(|&r| self.cell_matches(r, c, target));
                Value::Bool(if op == With { found } else { !found })
            }
            Before | After => {
                let pivot = row(1)?;
                let kept = view(0)?
                    .iter()
                    .copied()
                    .filter(|&r| if op == Before { r < pivot } else { r > pivot })
                    .collect();
                Value::View(kept)
            }
            First | Second | Third | Fourth => {
                let k = match op {
                    First => 0,
                    Second => 1,
                    Third => 2,
                    _ => 3,
                };
                Value::Bool(view(0)?.get(k) == Some(&row(1)?))
            }
            Avg | Sum | Max | Min => {
                let (c, col) = column(1)?;
                let values = self.numeric_column(view(0)?, c, col, name)?;
                Value::Number(match op {
                    Avg => values.iter().sum::<f64>() / values.len() as f64,
                    Sum => values.iter().sum(),
                    Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    _ => values.iter().copied().fold(f64::INFINITY, f64::min),
                })
            }
            Argmax | Argmin => {
                let (c, col) = column(1)?;
                let rows = view(0)?;
                let values = self.numeric_column(rows, c, col, name)?;
                let mut best = 0;
                for (i, v) in values.iter().enumerate() {
                    let better = if op == Argmax { *v > values[best] } else { *v < values[best] };
                    if better {
                        best = i;
                    }
                }
                Value::Row(rows[best])
            }
            Hop | NumHop => {
                let (c, col) = column(1)?;
                let rows = rows_of(0)?;
                let &first = rows.first().ok_or_else(|| ExecError::EmptyViewAggregate { op: name.into() })?;
                let cell = self.table.cell(first, c);
                if op == Hop {
                    Value::Text(cell.raw.clone())
                } else {
                    Value::Number(cell.numeric.ok_or_else(|| ExecError::NonNumericColumn {
                        op: name.into(),
                        column: col.into(),
                    })?)
                }
            }
            Diff => Value::Number(number(0)? - number(1)?),
            Add => Value::Number(number(0)? + number(1)?),
            Half => Value::Number(round6(number(0)? / 2.0)),
            OneThird => Value::Number(round6(number(0)? / 3.0)),
            Greater => Value::Bool(number(0)? > number(1)? && !numbers_equal(number(0)?, number(1)?)),
            Less => Value::Bool(number(0)? < number(1)? && !numbers_equal(number(0)?, number(1)?)),
            Equal | Unequal => {
                let (a, b) = (scalar(0)?, scalar(1)?);
                if a.kind() != b.kind() {
                    return Err(kind_err(format!("{name} compares {} with {}", a.kind(), b.kind())));
                }
                let same = a.approx_eq(b);
                Value::Bool(if op == Equal { same } else { !same })
            }
            And => Value::Bool(boolean(0)? && boolean(1)?),
            Or => Value::Bool(boolean(0)? || boolean(1)?),
            FilterEq => {
                let (c, _) = column(1)?;
                let target = scalar(2)?;
                Value::View(view(0)?.iter().copied().filter(|&r| self.cell_matches(r, c, target)).collect())
            }
            FilterGreater | FilterLess | FilterGreaterOrEqual | FilterLessOrEqual => {
                let (c, _) = column(1)?;
                let bound = number(2)?;
                let kept = view(0)?
                    .iter()
                    .copied()
                    .filter(|&r| {
                        self.table
                            .cell(r, c)
                            .numeric
                            .is_some_and(|v| numeric_predicate(op, v, bound))
                    })
                    .collect();
                Value::View(kept)
            }
            AllEq => {
                let (c, _) = column(1)?;
                let target = scalar(2)?;
                let rows = non_empty(view(0)?, name)?;
                Value::Bool(rows.iter().all(|&r| self.cell_matches(r, c, target)))
            }
            AllGreater | AllLess | AllGreaterOrEqual | AllLessOrEqual => {
                let (c, _) = column(1)?;
                let bound = number(2)?;
                let rows = non_empty(view(0)?, name)?;
                Value::Bool(rows.iter().all(|&r| {
                    self.table
                        .cell(r, c)
                        .numeric
                        .is_some_and(|v| numeric_predicate(op, v, bound))
                }))
            }
            UniqNum => {
                let (c, col) = column(1)?;
                let values = self.numeric_column(view(0)?, c, col, name)?;
                if values.iter().any(|v| !numbers_equal(*v, values[0])) {
                    return Err(ExecError::NotUnique { op: name.into(), column: col.into() });
                }
                Value::Number(values[0])
            }
            UniqString => {
                let (c, col) = column(1)?;
                let rows = non_empty(view(0)?, name)?;
                let first = &self.table.cell(rows[0], c).raw;
                let key = normalize(first);
                if rows.iter().any(|&r| self.table.cell(r, c).normalized() != key) {
                    return Err(ExecError::NotUnique { op: name.into(), column: col.into() });
                }
                Value::Text(first.clone())
            }
            MostFreq => {
                let (c, _) = column(1)?;
                let rows = non_empty(view(0)?, name)?;
                // (normalized key, raw of first occurrence, count) in first-seen order
                let mut tally: Vec<(String, &str, usize)> = Vec::new();
                for &r in rows {
                    let cell = self.table.cell(r, c);
                    let key = cell.normalized();
                    match tally.iter_mut().find(|(k, _, _)| *k == key) {
                        Some(entry) => entry.2 += 1,
                        None => tally.push((key, &cell.raw, 1)),
                    }
                }
                let mut best = 0;
                for (i, entry) in tally.iter().enumerate() {
                    if entry.2 > tally[best].2 {
                        best = i;
                    }
                }
                Value::Text(tally[best].1.to_string())
            }
        };
        Ok(value)
    }

    /// Cell equality against a text or number target.
    fn cell_matches(&self, row: usize, col: usize, target: &Value) -> bool {
        let cell = self.table.cell(row, col);
        match target {
            Value::Number(v) => cell.numeric.is_some_and(|c| numbers_equal(c, *v)),
            Value::Text(s) => cell.normalized() == normalize(s),
            _ => false,
        }
    }

    fn numeric_column(&self, rows: &[usize], col: usize, col_name: &str, op: &str) -> Result<Vec<f64>, ExecError> {
        let rows = non_empty(rows, op)?;
        rows.iter()
            .map(|&r| {
                self.table.cell(r, col).numeric.ok_or_else(|| ExecError::NonNumericColumn {
                    op: op.into(),
                    column: col_name.into(),
                })
            })
            .collect()
    }
}

fn non_empty<'a>(rows: &'a [usize], op: &str) -> Result<&'a [usize], ExecError> {
    if rows.is_empty() {
        Err(ExecError::EmptyViewAggregate { op: op.into() })
    } else {
        Ok(rows)
    }
}

fn numeric_predicate(op: OpCode, v: f64, bound: f64) -> bool {
    use OpCode::*;
    let eq = numbers_equal(v, bound);
    match op {
        FilterGreater | AllGreater => v > bound && !eq,
        FilterLess | AllLess => v < bound && !eq,
        FilterGreaterOrEqual | AllGreaterOrEqual => v > bound || eq,
        FilterLessOrEqual | AllLessOrEqual => v < bound || eq,
        _ => unreachable!("not a numeric comparison"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_program;

    pub(crate) fn medals() -> Table {
        let text = "nation#gold#bronze\n\
                    sweden#3#tatiana ryabkina\n\
                    russia#5#lena eliasson\n\
                    norway#5#Tatiana  Ryabkina\n\
                    finland#1#-\n\
                    italy#2#none";
        Table::from_tabfact_csv("medals.csv", text, "medals.csv").unwrap()
    }

    fn run(program: &str, t: &Table) -> Result<Value, ExecError> {
        execute(&parse_program(program).unwrap(), t).map(|(v, _)| v)
    }

    #[test]
    fn count_all_rows() {
        let t = Table::from_tabfact_csv("t", "a\n1\n2\n3\n4", "t").unwrap();
        assert_eq!(run("count { all_rows }", &t).unwrap(), Value::Number(4.0));
    }

    #[test]
    fn bronze_counts() {
        let t = medals();
        assert_eq!(
            run("count { filter_eq { all_rows ; bronze ; \"tatiana ryabkina\" } }", &t).unwrap(),
            Value::Number(2.0)
        );
        let p = "greater { count { filter_eq { all_rows ; bronze ; \"tatiana ryabkina\" } } ; \
                 count { filter_eq { all_rows ; bronze ; \"lena eliasson\" } } }";
        assert_eq!(run(p, &t).unwrap(), Value::Bool(true));
        let (_, trace) = execute(&parse_program(p).unwrap(), &t).unwrap();
        assert_eq!(trace.len(), 5);
        let ops: Vec<_> = trace.records.iter().map(|r| r.op).collect();
        assert_eq!(ops, [OpCode::FilterEq, OpCode::Count, OpCode::FilterEq, OpCode::Count, OpCode::Greater]);
        assert_eq!(trace.records[2].path.to_string(), "root/1/0");
        assert_eq!(trace.records[0].args[1], None);
    }

    #[test]
    fn max_scan() {
        let t = Table::from_tabfact_csv("t", "score\n3\n5\n5", "t").unwrap();
        assert_eq!(run("max { all_rows ; score }", &t).unwrap(), Value::Number(5.0));
        // ties resolve to the earliest row
        assert_eq!(run("argmax { all_rows ; score }", &t).unwrap(), Value::Row(1));
        assert_eq!(run("argmin { all_rows ; score }", &t).unwrap(), Value::Row(0));
    }

    #[test]
    fn labels() {
        let t = medals();
        assert_eq!(execute_label(&parse_program("greater { 2 ; 1 }").unwrap(), &t).unwrap(), Label::Entailed);
        assert_eq!(execute_label(&parse_program("less { 2 ; 1 }").unwrap(), &t).unwrap(), Label::Refuted);
        assert_eq!(
            execute_label(&parse_program("count { all_rows }").unwrap(), &t),
            Err(ExecError::NonBooleanRoot(ValueKind::Number))
        );
    }

    #[test]
    fn aggregate_errors() {
        let t = medals();
        assert!(matches!(
            run("sum { filter_eq { all_rows ; nation ; atlantis } ; gold }", &t),
            Err(ExecError::EmptyViewAggregate { .. })
        ));
        assert!(matches!(run("sum { all_rows ; nation }", &t), Err(ExecError::NonNumericColumn { .. })));
        assert!(matches!(run("sum { all_rows ; silver }", &t), Err(ExecError::UnknownColumn { .. })));
        assert!(matches!(run("uniq_num { all_rows ; gold }", &t), Err(ExecError::NotUnique { .. })));
        assert_eq!(
            run("uniq_num { filter_eq { all_rows ; gold ; 5 } ; gold }", &t).unwrap(),
            Value::Number(5.0)
        );
    }

    #[test]
    fn arithmetic_and_text() {
        let t = medals();
        assert_eq!(run("avg { all_rows ; gold }", &t).unwrap(), Value::Number(3.2));
        assert_eq!(run("diff { 5 ; 7 }", &t).unwrap(), Value::Number(-2.0));
        assert_eq!(run("one_third { 1 }", &t).unwrap(), Value::Number(0.333333));
        assert_eq!(run("half { 5 }", &t).unwrap(), Value::Number(2.5));
        assert_eq!(run("most_freq { all_rows ; gold }", &t).unwrap(), Value::Text("5".into()));
        assert_eq!(run("most_freq { all_rows ; bronze }", &t).unwrap(), Value::Text("tatiana ryabkina".into()));
        assert_eq!(
            run("hop { argmax { all_rows ; gold } ; nation }", &t).unwrap(),
            Value::Text("russia".into())
        );
        assert_eq!(
            run("num_hop { filter_eq { all_rows ; nation ; norway } ; gold }", &t).unwrap(),
            Value::Number(5.0)
        );
        assert_eq!(
            run("none { hop { filter_eq { all_rows ; nation ; finland } ; bronze } }", &t).unwrap(),
            Value::Bool(true)
        );
        assert_eq!(run("none { \"N/A\" }", &t).unwrap(), Value::Bool(true));
        assert_eq!(run("none { \"sweden\" }", &t).unwrap(), Value::Bool(false));
        assert_eq!(run("equal { \"Sweden \" ; \"sweden\" }", &t).unwrap(), Value::Bool(true));
        assert_eq!(run("equal { 1 ; 1.0000001 }", &t).unwrap(), Value::Bool(true));
        assert_eq!(run("greater { 1.0000001 ; 1 }", &t).unwrap(), Value::Bool(false));
        assert_eq!(run("zero { diff { 3 ; 3 } }", &t).unwrap(), Value::Bool(true));
    }

    #[test]
    fn filters_and_positions() {
        let t = medals();
        assert_eq!(run("filter_greater { all_rows ; gold ; 2 }", &t).unwrap(), Value::View(vec![0, 1, 2]));
        assert_eq!(run("filter_less_or_equal { all_rows ; gold ; 2 }", &t).unwrap(), Value::View(vec![3, 4]));
        assert_eq!(run("all_greater { all_rows ; gold ; 0 }", &t).unwrap(), Value::Bool(true));
        assert_eq!(run("all_eq { all_rows ; gold ; 5 }", &t).unwrap(), Value::Bool(false));
        assert_eq!(run("with { all_rows ; nation ; italy }", &t).unwrap(), Value::Bool(true));
        assert_eq!(run("without { all_rows ; nation ; italy }", &t).unwrap(), Value::Bool(false));
        assert_eq!(
            run("first { all_rows ; argmin { all_rows ; gold } }", &t).unwrap(),
            Value::Bool(false)
        );
        assert_eq!(
            run("fourth { all_rows ; argmin { all_rows ; gold } }", &t).unwrap(),
            Value::Bool(true)
        );
        assert_eq!(
            run("before { all_rows ; argmin { all_rows ; gold } }", &t).unwrap(),
            Value::View(vec![0, 1, 2])
        );
        assert_eq!(
            run("after { filter_greater { all_rows ; gold ; 1 } ; argmax { all_rows ; gold } }", &t).unwrap(),
            Value::View(vec![2, 4])
        );
        assert_eq!(run("only { filter_eq { all_rows ; nation ; italy } }", &t).unwrap(), Value::Bool(true));
        assert_eq!(run("several { filter_eq { all_rows ; gold ; 5 } }", &t).unwrap(), Value::Bool(true));
    }

    #[test]
    fn boolean_truth_tables() {
        let t = medals();
        for a in [false, true] {
            for b in [false, true] {
                let lit = |x: bool| if x { "greater { 2 ; 1 }" } else { "greater { 1 ; 2 }" };
                let and = run(&format!("and {{ {} ; {} }}", lit(a), lit(b)), &t).unwrap();
                let or = run(&format!("or {{ {} ; {} }}", lit(a), lit(b)), &t).unwrap();
                assert_eq!(and, Value::Bool(a && b));
                assert_eq!(or, Value::Bool(a || b));
            }
        }
    }

    #[test]
    fn display() {
        assert_eq!(Value::Number(4.0).to_string(), "4");
        assert_eq!(Value::Row(4).to_string(), "row 5");
        assert_eq!(Value::View(vec![0, 2]).to_string(), "rows [1, 3]");
    }
}
