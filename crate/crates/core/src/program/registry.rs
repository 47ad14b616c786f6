//! The fixed operator registry.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Kind of a runtime value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ValueKind {
    Number,
    Text,
    Bool,
    Row,
    View,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Number => "Number",
            ValueKind::Text => "Text",
            ValueKind::Bool => "Bool",
            ValueKind::Row => "Row",
            ValueKind::View => "View",
        };
        f.write_str(s)
    }
}

/// What an argument slot accepts.
///
/// `Column` slots only take literal header names. `Cell` slots take either a
/// text or a number. `Scalar` slots are the polymorphic operands of
/// `equal`/`unequal`; both operands must resolve to the same kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArgKind {
    Value(ValueKind),
    Column,
    Cell,
    Scalar,
    RowOrView,
}

impl ArgKind {
    pub fn accepts(self, kind: ValueKind) -> bool {
        match self {
            ArgKind::Value(k) => k == kind,
            ArgKind::Column => false,
            ArgKind::Cell | ArgKind::Scalar => matches!(kind, ValueKind::Number | ValueKind::Text),
            ArgKind::RowOrView => matches!(kind, ValueKind::Row | ValueKind::View),
        }
    }
}

impl fmt::Display for ArgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgKind::Value(k) => write!(f, "{k}"),
            ArgKind::Column => f.write_str("Column"),
            ArgKind::Cell => f.write_str("Text|Number"),
            ArgKind::Scalar => f.write_str("Text|Number (matching)"),
            ArgKind::RowOrView => f.write_str("Row|View"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Aggregate,
    Filter,
    Compare,
    Boolean,
    Positional,
    Arithmetic,
    Hop,
    Superlative,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Aggregate,
        Family::Filter,
        Family::Compare,
        Family::Boolean,
        Family::Positional,
        Family::Arithmetic,
        Family::Hop,
        Family::Superlative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Aggregate => "aggregate",
            Family::Filter => "filter",
            Family::Compare => "compare",
            Family::Boolean => "boolean",
            Family::Positional => "positional",
            Family::Arithmetic => "arithmetic",
            Family::Hop => "hop",
            Family::Superlative => "superlative",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Every operator the interpreter knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpCode {
    Count,
    With,
    Without,
    IsNone,
    Before,
    After,
    First,
    Second,
    Third,
    Fourth,
    Only,
    Several,
    Zero,
    Avg,
    Sum,
    Max,
    Min,
    Argmax,
    Argmin,
    Hop,
    NumHop,
    Diff,
    Add,
    Greater,
    Less,
    Equal,
    Unequal,
    And,
    Or,
    FilterEq,
    FilterGreater,
    FilterLess,
    FilterGreaterOrEqual,
    FilterLessOrEqual,
    AllEq,
    AllGreater,
    AllLess,
    AllGreaterOrEqual,
    AllLessOrEqual,
    UniqNum,
    UniqString,
    MostFreq,
    Half,
    OneThird,
}

#[derive(Debug, Clone)]
pub struct Operator {
    pub code: OpCode,
    pub name: &'static str,
    pub arg_kinds: &'static [ArgKind],
    pub result_kind: ValueKind,
    pub family: Family,
}

impl Operator {
    pub fn arity(&self) -> usize {
        self.arg_kinds.len()
    }
}

use ArgKind::{Cell, Column, RowOrView, Scalar};
use ValueKind::{Bool, Number, Row, Text, View};

const V: ArgKind = ArgKind::Value(View);
const R: ArgKind = ArgKind::Value(Row);
const N: ArgKind = ArgKind::Value(Number);
const T: ArgKind = ArgKind::Value(Text);
const B: ArgKind = ArgKind::Value(Bool);

macro_rules! op {
    ($code:ident, $name:literal, [$($arg:expr),*], $res:ident, $fam:ident) => {
        Operator {
            code: OpCode::$code,
            name: $name,
            arg_kinds: &[$($arg),*],
            result_kind: $res,
            family: Family::$fam,
        }
    };
}

static REGISTRY: [Operator; 44] = [
    op!(Count, "count", [V], Number, Aggregate),
    op!(With, "with", [V, Column, Cell], Bool, Filter),
    op!(Without, "without", [V, Column, Cell], Bool, Filter),
    op!(IsNone, "none", [T], Bool, Boolean),
    op!(Before, "before", [V, R], View, Positional),
    op!(After, "after", [V, R], View, Positional),
    op!(First, "first", [V, R], Bool, Positional),
    op!(Second, "second", [V, R], Bool, Positional),
    op!(Third, "third", [V, R], Bool, Positional),
    op!(Fourth, "fourth", [V, R], Bool, Positional),
    op!(Only, "only", [V], Bool, Aggregate),
    op!(Several, "several", [V], Bool, Aggregate),
    op!(Zero, "zero", [N], Bool, Boolean),
    op!(Avg, "avg", [V, Column], Number, Aggregate),
    op!(Sum, "sum", [V, Column], Number, Aggregate),
    op!(Max, "max", [V, Column], Number, Superlative),
    op!(Min, "min", [V, Column], Number, Superlative),
    op!(Argmax, "argmax", [V, Column], Row, Superlative),
    op!(Argmin, "argmin", [V, Column], Row, Superlative),
    op!(Hop, "hop", [RowOrView, Column], Text, Hop),
    op!(NumHop, "num_hop", [RowOrView, Column], Number, Hop),
    op!(Diff, "diff", [N, N], Number, Arithmetic),
    op!(Add, "add", [N, N], Number, Arithmetic),
    op!(Greater, "greater", [N, N], Bool, Compare),
    op!(Less, "less", [N, N], Bool, Compare),
    op!(Equal, "equal", [Scalar, Scalar], Bool, Compare),
    op!(Unequal, "unequal", [Scalar, Scalar], Bool, Compare),
    op!(And, "and", [B, B], Bool, Boolean),
    op!(Or, "or", [B, B], Bool, Boolean),
    op!(FilterEq, "filter_eq", [V, Column, Cell], View, Filter),
    op!(FilterGreater, "filter_greater", [V, Column, N], View, Filter),
    op!(FilterLess, "filter_less", [V, Column, N], View, Filter),
    op!(FilterGreaterOrEqual, "filter_greater_or_equal", [V, Column, N], View, Filter),
    op!(FilterLessOrEqual, "filter_less_or_equal", [V, Column, N], View, Filter),
    op!(AllEq, "all_eq", [V, Column, Cell], Bool, Filter),
    op!(AllGreater, "all_greater", [V, Column, N], Bool, Filter),
    op!(AllLess, "all_less", [V, Column, N], Bool, Filter),
    op!(AllGreaterOrEqual, "all_greater_or_equal", [V, Column, N], Bool, Filter),
    op!(AllLessOrEqual, "all_less_or_equal", [V, Column, N], Bool, Filter),
    op!(UniqNum, "uniq_num", [V, Column], Number, Aggregate),
    op!(UniqString, "uniq_string", [V, Column], Text, Aggregate),
    op!(MostFreq, "most_freq", [V, Column], Text, Aggregate),
    op!(Half, "half", [N], Number, Arithmetic),
    op!(OneThird, "one_third", [N], Number, Arithmetic),
];

/// Alternate spellings accepted on parse. Canonical printing always uses the
/// registry name.
const ALIASES: &[(&str, OpCode)] = &[
    ("eq", OpCode::Equal),
    ("not_eq", OpCode::Unequal),
    ("all_equal", OpCode::AllEq),
    ("greater_or_equal", OpCode::FilterGreaterOrEqual),
    ("less_or_equal", OpCode::FilterLessOrEqual),
];

pub fn registry() -> &'static [Operator] {
    &REGISTRY
}

impl OpCode {
    pub fn operator(self) -> &'static Operator {
        let op = &REGISTRY[self as usize];
        debug_assert_eq!(op.code, self);
        op
    }

    pub fn name(self) -> &'static str {
        self.operator().name
    }

    /// Looks up a registry name or an accepted alias.
    pub fn lookup(name: &str) -> Option<OpCode> {
        REGISTRY
            .iter()
            .find(|o| o.name == name)
            .map(|o| o.code)
            .or_else(|| ALIASES.iter().find(|(a, _)| *a == name).map(|(_, c)| *c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn registry_is_indexed_by_opcode() {
        for (i, op) in registry().iter().enumerate() {
            assert_eq!(op.code as usize, i, "{}", op.name);
            assert!((1..=3).contains(&op.arity()), "{}", op.name);
        }
        let names: HashSet<_> = registry().iter().map(|o| o.name).collect();
        assert_eq!(names.len(), registry().len());
    }

    #[test]
    fn registry_matches_operation_table() {
        let expected = [
            "count", "with", "without", "none", "before", "after", "first", "second", "third",
            "fourth", "only", "several", "zero", "avg", "sum", "max", "min", "argmax", "argmin",
            "hop", "num_hop", "diff", "add", "greater", "less", "equal", "unequal", "and", "or",
            "filter_eq", "filter_greater", "filter_less", "filter_greater_or_equal",
            "filter_less_or_equal", "all_eq", "all_greater", "all_less", "all_greater_or_equal",
            "all_less_or_equal", "uniq_num", "uniq_string", "most_freq", "half", "one_third",
        ];
        let names: Vec<_> = registry().iter().map(|o| o.name).collect();
        assert_eq!(names, expected);
        assert_eq!(registry().len(), 44);
    }

    #[test]
    fn template_table_names_resolve() {
        // operator names as they are spelled in the verbalization template tables
        for name in [
            "count", "avg", "sum", "max", "min", "add", "diff", "uniq_num", "uniq_string",
            "most_freq", "half", "one_third", "num_hop", "only", "several", "zero", "none",
            "first", "second", "third", "fourth", "and", "or", "greater", "less", "equal",
            "unequal", "with", "without", "all_equal", "all_less", "all_greater",
            "all_less_or_equal", "all_greater_or_equal", "before", "after", "argmax", "argmin",
            "filter_eq", "filter_less", "filter_greater", "less_or_equal", "greater_or_equal",
            "eq",
        ] {
            assert!(OpCode::lookup(name).is_some(), "{name}");
        }
        assert!(OpCode::lookup("frobnicate").is_none());
    }
}
