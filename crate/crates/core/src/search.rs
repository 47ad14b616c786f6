//! Entity linking and latent program search.
//!
//! Candidates are enumerated bottom-up by operation count. Each pool holds
//! executed sub-programs of one result kind and size, seeded with the
//! literals linked from the statement plus `all_rows`. Every stored
//! sub-program executes without error, so every Bool-rooted candidate does
//! too.

use std::collections::{BTreeSet, HashSet};
use std::ops::Range;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::exec::{execute, execute_label, Value};
use crate::program::{
    print_program, registry, Arg, ArgKind, Family, Literal, OpCode, Operation, Operator,
    Program, ValueKind,
};
use crate::tabular::{normalize, parse_number, Label, Statement, Table};

const DEFAULT_TRIGGERS: &str = include_str!("../data/triggers.txt");

/// Spans are byte ranges into the normalized statement text.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LinkedEntities {
    pub columns: Vec<(String, Range<usize>)>,
    pub cells: Vec<(String, String, Range<usize>)>,
    pub numbers: Vec<(f64, Range<usize>)>,
}

impl LinkedEntities {
    pub fn is_empty(&self) -> bool {
        self.columns.is_empty() && self.cells.is_empty() && self.numbers.is_empty()
    }
}

const NUMBER_WORDS: [(&str, f64); 12] = [
    ("one", 1.0),
    ("two", 2.0),
    ("three", 3.0),
    ("four", 4.0),
    ("five", 5.0),
    ("six", 6.0),
    ("seven", 7.0),
    ("eight", 8.0),
    ("nine", 9.0),
    ("ten", 10.0),
    ("eleven", 11.0),
    ("twelve", 12.0),
];

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b >= 0x80
}

/// All word-boundary occurrences of `needle` in `hay`.
fn find_words(hay: &str, needle: &str) -> Vec<Range<usize>> {
    if needle.is_empty() {
        return Vec::new();
    }
    let bytes = hay.as_bytes();
    let nb = needle.as_bytes();
    let starts_word = is_word_byte(nb[0]);
    let ends_word = is_word_byte(nb[nb.len() - 1]);
    hay.match_indices(needle)
        .filter(|(i, _)| {
            let end = i + needle.len();
            let left_ok = !starts_word || *i == 0 || !is_word_byte(bytes[i - 1]);
            let right_ok = !ends_word || end == bytes.len() || !is_word_byte(bytes[end]);
            left_ok && right_ok
        })
        .map(|(i, _)| i..i + needle.len())
        .collect()
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Greedy longest-first selection of non-overlapping matches. Matches with
/// an identical range to an accepted one are kept (one surface, several
/// owners).
fn longest_matches<T: Clone>(mut found: Vec<(T, Range<usize>)>) -> Vec<(T, Range<usize>)> {
    found.sort_by(|a, b| {
        (b.1.len(), a.1.start).cmp(&(a.1.len(), b.1.start))
    });
    let mut taken: Vec<(T, Range<usize>)> = Vec::new();
    for (item, range) in found {
        if taken.iter().all(|(_, r)| *r == range || !overlaps(r, &range)) {
            taken.push((item, range));
        }
    }
    taken.sort_by_key(|(_, r)| (r.start, r.end));
    taken
}

pub fn link_entities(s: &Statement, t: &Table) -> LinkedEntities {
    let text = normalize(&s.text);

    let mut columns = Vec::new();
    for h in t.normalized_headers() {
        for r in find_words(&text, h) {
            columns.push((h.clone(), r));
        }
    }

    // numeric cells are covered by number extraction
    let mut cells = Vec::new();
    let mut seen = HashSet::new();
    for (c, h) in t.normalized_headers().iter().enumerate() {
        for row in &t.rows {
            let cell = &row[c];
            let norm = cell.normalized();
            if cell.numeric.is_some() || norm.is_empty() || !seen.insert((norm.clone(), c)) {
                continue;
            }
            for r in find_words(&text, &norm) {
                cells.push(((norm.clone(), h.clone()), r));
            }
        }
    }

    let mut numbers = Vec::new();
    let mut offset = 0;
    for token in text.split(' ') {
        let start = offset;
        offset += token.len() + 1;
        let trimmed = token.trim_end_matches([',', '.', '?', '!', ';', ':', ')']);
        let trimmed = trimmed.trim_start_matches('(');
        let lead = token.find(trimmed).unwrap_or(0);
        let value = parse_number(trimmed)
            .filter(|_| trimmed.chars().any(|c| c.is_ascii_digit()))
            .or_else(|| NUMBER_WORDS.iter().find(|(w, _)| *w == trimmed).map(|(_, v)| *v));
        if let Some(v) = value {
            numbers.push((v, start + lead..start + lead + trimmed.len()));
        }
    }

    LinkedEntities {
        columns: longest_matches(columns),
        cells: longest_matches(cells)
            .into_iter()
            .map(|((cell, header), r)| (cell, header, r))
            .collect(),
        numbers,
    }
}

/// Phrase lexicon mapping trigger words to operator families.
#[derive(Debug, Clone)]
pub struct TriggerLexicon {
    entries: Vec<(Family, Vec<String>)>,
}

impl FromStr for TriggerLexicon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        for (n, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, phrases) = line
                .split_once(':')
                .ok_or_else(|| format!("line {}: expected `family: phrases`", n + 1))?;
            let family = Family::from_name(name.trim())
                .ok_or_else(|| format!("line {}: unknown family {:?}", n + 1, name.trim()))?;
            let phrases = phrases
                .split(',')
                .map(normalize)
                .filter(|p| !p.is_empty())
                .collect();
            entries.push((family, phrases));
        }
        Ok(TriggerLexicon { entries })
    }
}

impl TriggerLexicon {
    pub fn builtin() -> &'static TriggerLexicon {
        static LEXICON: OnceLock<TriggerLexicon> = OnceLock::new();
        LEXICON.get_or_init(|| DEFAULT_TRIGGERS.parse().expect("bundled trigger lexicon parses"))
    }

    /// Families whose phrases occur in the text; all families if none do.
    pub fn families(&self, statement_text: &str) -> BTreeSet<Family> {
        let text = normalize(statement_text);
        let fired: BTreeSet<Family> = self
            .entries
            .iter()
            .filter(|(_, phrases)| phrases.iter().any(|p| !find_words(&text, p).is_empty()))
            .map(|(f, _)| *f)
            .collect();
        if fired.is_empty() {
            Family::ALL.iter().copied().collect()
        } else {
            fired
        }
    }
}

pub fn trigger_map(statement_text: &str) -> BTreeSet<Family> {
    TriggerLexicon::builtin().families(statement_text)
}

#[derive(Debug, Clone)]
pub struct SearchLimits {
    /// Maximum operations per program.
    pub max_ops: usize,
    pub max_candidates: usize,
    pub time_budget: Option<Duration>,
    /// Cap on stored sub-programs per (kind, size) pool.
    pub pool_cap: usize,
    /// Cap on combinations tried per operator and size.
    pub attempt_cap: usize,
    /// Cap on Bool programs collected before ranking.
    pub found_cap: usize,
}

impl Default for SearchLimits {
    fn default() -> Self {
        SearchLimits {
            max_ops: 7,
            max_candidates: 200,
            time_budget: Some(Duration::from_secs(1)),
            pool_cap: 300,
            attempt_cap: 4000,
            found_cap: 20_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    #[serde(serialize_with = "serialize_program")]
    pub program: Program,
    pub label: Label,
}

fn serialize_program<S: serde::Serializer>(p: &Program, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&print_program(p))
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateSet {
    pub statement: Statement,
    pub programs: Vec<Candidate>,
    pub consistent: Vec<usize>,
    pub inconsistent: Vec<usize>,
    /// Set when the candidate cap or time budget cut the search short.
    pub budget_exceeded: bool,
}

impl CandidateSet {
    pub fn trainable(&self) -> bool {
        !self.consistent.is_empty()
    }
}

const COMMUTATIVE: [OpCode; 5] = [OpCode::And, OpCode::Or, OpCode::Equal, OpCode::Unequal, OpCode::Add];

/// Operators that compare or combine scalars; pointless on literals alone.
fn needs_table_grounding(code: OpCode) -> bool {
    use OpCode::*;
    matches!(
        code,
        Greater | Less | Equal | Unequal | Diff | Add | Half | OneThird | Zero | IsNone | And | Or
    )
}

#[derive(Debug, Clone)]
struct Entry {
    op: Operation,
    text: String,
}

struct Seeds {
    columns: Vec<String>,
    texts: Vec<String>,
    numbers: Vec<f64>,
}

impl Seeds {
    fn literals(&self, want: ArgKind) -> Vec<Literal> {
        let texts = || self.texts.iter().map(|t| Literal::Text(t.clone()));
        let numbers = || self.numbers.iter().map(|v| Literal::Number(*v));
        match want {
            ArgKind::Column => self.columns.iter().map(|c| Literal::Column(c.clone())).collect(),
            ArgKind::Value(ValueKind::View) | ArgKind::RowOrView => vec![Literal::AllRows],
            ArgKind::Value(ValueKind::Number) => numbers().collect(),
            ArgKind::Value(ValueKind::Text) => texts().collect(),
            ArgKind::Cell | ArgKind::Scalar => texts().chain(numbers()).collect(),
            ArgKind::Value(ValueKind::Row) | ArgKind::Value(ValueKind::Bool) => Vec::new(),
        }
    }
}

const KINDS: [ValueKind; 5] = [
    ValueKind::Number,
    ValueKind::Text,
    ValueKind::Bool,
    ValueKind::Row,
    ValueKind::View,
];

fn kind_slot(k: ValueKind) -> usize {
    KINDS.iter().position(|x| *x == k).expect("all kinds listed")
}

/// Operator families always enabled regardless of triggers: filters and
/// hops build the views nearly every program needs.
fn always_enabled(op: &Operator) -> bool {
    matches!(op.family, Family::Filter | Family::Hop) || op.code == OpCode::Equal
}

pub fn enumerate_candidates(
    s: &Statement,
    t: &Table,
    ents: &LinkedEntities,
    limits: &SearchLimits,
) -> CandidateSet {
    let started = Instant::now();
    let families = trigger_map(&s.text);
    let operators: Vec<&Operator> = registry()
        .iter()
        .filter(|o| families.contains(&o.family) || always_enabled(o))
        .collect();

    let mut columns: Vec<String> = ents.columns.iter().map(|(c, _)| c.clone()).collect();
    columns.extend(ents.cells.iter().map(|(_, h, _)| h.clone()));
    if columns.is_empty() {
        columns = t.normalized_headers().to_vec();
    }
    dedup_stable(&mut columns);
    let mut texts: Vec<String> = ents.cells.iter().map(|(c, _, _)| c.clone()).collect();
    dedup_stable(&mut texts);
    let mut numbers: Vec<f64> = Vec::new();
    for (v, _) in &ents.numbers {
        if !numbers.contains(v) {
            numbers.push(*v);
        }
    }
    let seeds = Seeds { columns, texts, numbers };

    let linked_columns: HashSet<&str> = ents
        .columns
        .iter()
        .map(|(c, _)| c.as_str())
        .chain(ents.cells.iter().map(|(_, h, _)| h.as_str()))
        .collect();
    let triggered = families.len() < Family::ALL.len();
    let relevance = |p: &Program| -> (usize, usize) {
        let mut used: HashSet<String> = HashSet::new();
        let mut fams: BTreeSet<Family> = BTreeSet::new();
        collect_relevance(&p.root, &linked_columns, &seeds, &mut used, &mut fams);
        let fams = if triggered { fams.intersection(&families).count() } else { 0 };
        (used.len(), fams)
    };

    // pools[size][kind]
    let mut pools: Vec<[Vec<Entry>; 5]> = vec![Default::default()];
    let mut seen: HashSet<String> = HashSet::new();
    let mut found: Vec<(Program, bool)> = Vec::new();
    let mut budget_exceeded = false;

    'sizes: for size in 1..=limits.max_ops {
        let mut level: [Vec<Entry>; 5] = Default::default();
        for operator in &operators {
            let mut attempts = 0usize;
            let mut builder = Builder {
                operator,
                seeds: &seeds,
                pools: &pools,
                args: Vec::with_capacity(operator.arity()),
                attempts: &mut attempts,
                cap: limits.attempt_cap,
                emit: &mut |op: Operation| {
                    let kind = op.result_kind();
                    let slot = &mut level[kind_slot(kind)];
                    let is_bool = kind == ValueKind::Bool;
                    if slot.len() >= limits.pool_cap && (!is_bool || found.len() >= limits.found_cap) {
                        return;
                    }
                    let Ok(program) = Program::new(op) else { return };
                    let text = print_program(&program);
                    if seen.contains(&text) {
                        return;
                    }
                    let Ok((value, _)) = execute(&program, t) else { return };
                    seen.insert(text.clone());
                    if let Value::Bool(b) = value {
                        if found.len() < limits.found_cap {
                            found.push((program.clone(), b));
                        }
                    }
                    if slot.len() < limits.pool_cap {
                        slot.push(Entry { op: program.root, text });
                    }
                },
            };
            builder.fill(size - 1);
            if limits.time_budget.is_some_and(|b| started.elapsed() > b) {
                budget_exceeded = true;
                pools.push(level);
                break 'sizes;
            }
        }
        pools.push(level);
    }

    if found.len() >= limits.found_cap || found.len() > limits.max_candidates {
        budget_exceeded = true;
    }
    // most statement-relevant first; stable, so enumeration order breaks ties
    let mut ranked: Vec<((usize, usize), usize, Program, bool)> = found
        .into_iter()
        .map(|(p, b)| (relevance(&p), p.size(), p, b))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(limits.max_candidates);

    let mut out = CandidateSet {
        statement: s.clone(),
        programs: Vec::with_capacity(ranked.len()),
        consistent: Vec::new(),
        inconsistent: Vec::new(),
        budget_exceeded,
    };
    for (idx, (_, _, program, b)) in ranked.into_iter().enumerate() {
        let label = Label::from_bool(b);
        if label == s.label {
            out.consistent.push(idx);
        } else {
            out.inconsistent.push(idx);
        }
        out.programs.push(Candidate {
            program: program.with_statement(s.id.clone()),
            label,
        });
    }
    out
}

/// Linked literals a program mentions and the operator families it uses.
fn collect_relevance(
    op: &Operation,
    linked_columns: &HashSet<&str>,
    seeds: &Seeds,
    used: &mut HashSet<String>,
    fams: &mut BTreeSet<Family>,
) {
    fams.insert(op.operator().family);
    for arg in &op.args {
        match arg {
            Arg::Op(child) => collect_relevance(child, linked_columns, seeds, used, fams),
            Arg::Lit(Literal::Column(c)) if linked_columns.contains(c.as_str()) => {
                used.insert(format!("c:{c}"));
            }
            Arg::Lit(Literal::Text(x)) if seeds.texts.contains(x) => {
                used.insert(format!("t:{x}"));
            }
            Arg::Lit(Literal::Number(v)) if seeds.numbers.contains(v) => {
                used.insert(format!("n:{v}"));
            }
            _ => {}
        }
    }
}

fn dedup_stable(v: &mut Vec<String>) {
    let mut seen = HashSet::new();
    v.retain(|x| seen.insert(x.clone()));
}

struct Builder<'a, F: FnMut(Operation)> {
    operator: &'a Operator,
    seeds: &'a Seeds,
    pools: &'a [[Vec<Entry>; 5]],
    args: Vec<(Arg, Option<&'a str>)>,
    attempts: &'a mut usize,
    cap: usize,
    emit: &'a mut F,
}

impl<'a, F: FnMut(Operation)> Builder<'a, F> {
    /// Fills the remaining argument slots using exactly `budget` more
    /// operations.
    fn fill(&mut self, budget: usize) {
        if *self.attempts >= self.cap {
            return;
        }
        let i = self.args.len();
        let kinds = self.operator.arg_kinds;
        if i == kinds.len() {
            if budget == 0 {
                self.finish();
            }
            return;
        }
        let want = kinds[i];
        let literals = self.seeds.literals(want);
        for lit in literals {
            self.args.push((Arg::Lit(lit), None));
            self.fill(budget);
            self.args.pop();
        }
        if want == ArgKind::Column {
            return;
        }
        let pools = self.pools;
        for s in 1..=budget {
            let Some(level) = pools.get(s) else { break };
            for (k, entries) in KINDS.iter().zip(level.iter()) {
                if !want.accepts(*k) {
                    continue;
                }
                for e in entries {
                    self.args.push((Arg::Op(e.op.clone()), Some(e.text.as_str())));
                    self.fill(budget - s);
                    self.args.pop();
                    if *self.attempts >= self.cap {
                        return;
                    }
                }
            }
        }
    }

    fn finish(&mut self) {
        let code = self.operator.code;
        let has_op = self.args.iter().any(|(a, _)| matches!(a, Arg::Op(_)));
        if needs_table_grounding(code) && !has_op {
            return;
        }
        if self.args.len() == 2 {
            if let ((Arg::Op(_), Some(a)), (Arg::Op(_), Some(b))) = (&self.args[0], &self.args[1]) {
                if a == b || (COMMUTATIVE.contains(&code) && a > b) {
                    return;
                }
            }
        }
        *self.attempts += 1;
        let args = self.args.iter().map(|(a, _)| a.clone()).collect();
        (self.emit)(Operation::new(code, args));
    }
}

/// Links entities and enumerates candidates with the given limits.
pub fn search(s: &Statement, t: &Table, limits: &SearchLimits) -> CandidateSet {
    let ents = link_entities(s, t);
    enumerate_candidates(s, t, &ents, limits)
}

/// Re-checks the partition of a candidate set against the interpreter.
pub fn verify_partition(set: &CandidateSet, t: &Table) -> bool {
    let mut consistent = Vec::new();
    let mut inconsistent = Vec::new();
    for (i, c) in set.programs.iter().enumerate() {
        match execute_label(&c.program, t) {
            Ok(l) if l == c.label => {
                if l == set.statement.label {
                    consistent.push(i);
                } else {
                    inconsistent.push(i);
                }
            }
            _ => return false,
        }
    }
    consistent == set.consistent && inconsistent == set.inconsistent
}
