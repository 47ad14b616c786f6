//! Brace/semicolon program syntax.
//!
//! ```text
//! op  ::= NAME '{' arg (';' arg)* '}'
//! arg ::= op | 'all_rows' | "quoted string" | number | bare column name
//! ```
//!
//! Bare arguments run up to the next `;`, `{` or `}` and are trimmed, so
//! multi-word header names need no quotes. Literal kinds are resolved from
//! the operator's argument slot: the same `"bronze"` is a column reference
//! in a column slot and a text literal in a cell slot.

use std::fmt::Write as _;

use super::ast::{type_check, Arg, Literal, NodePath, Operation, Program};
use super::registry::{ArgKind, OpCode, ValueKind};
use super::ProgramError;
use crate::tabular::parse_number;

/// Formats a number as its shortest round-trip decimal, without exponent.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v}")
}

#[derive(Debug, Clone)]
enum RawArg {
    Op(RawOp),
    AllRows,
    Quoted(String),
    Number(f64, String),
    Bare(String),
}

#[derive(Debug, Clone)]
struct RawOp {
    name: String,
    position: usize,
    args: Vec<(RawArg, usize)>,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn error(&self, message: impl Into<String>) -> ProgramError {
        ProgramError::Syntax {
            position: self.pos,
            message: message.into(),
        }
    }

    fn expect(&mut self, want: char) -> Result<(), ProgramError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c == want => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(c) => Err(self.error(format!("expected {want:?}, found {c:?}"))),
            None => Err(self.error(format!("expected {want:?}, found end of input"))),
        }
    }

    /// Reads up to the next structural character.
    fn bare_word(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if matches!(c, ';' | '{' | '}' | '"') {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn quoted(&mut self) -> Result<String, ProgramError> {
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        loop {
            match self.peek() {
                None => {
                    self.pos = start;
                    return Err(self.error("unterminated string"));
                }
                Some('"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some('\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ ('"' | '\\')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => return Err(self.error("invalid escape, only \\\" and \\\\ are allowed")),
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
    }

    fn operation(&mut self) -> Result<RawOp, ProgramError> {
        self.skip_ws();
        let position = self.pos;
        let name = self.bare_word().trim_end().to_string();
        if name.is_empty() {
            return Err(self.error("expected operator name"));
        }
        self.operation_body(name, position)
    }

    fn operation_body(&mut self, name: String, position: usize) -> Result<RawOp, ProgramError> {
        if name.chars().any(char::is_whitespace) {
            return Err(ProgramError::Syntax {
                position,
                message: format!("invalid operator name {name:?}"),
            });
        }
        self.expect('{')?;
        let mut args = Vec::new();
        loop {
            args.push(self.argument()?);
            self.skip_ws();
            match self.peek() {
                Some(';') => self.pos += 1,
                Some('}') => {
                    self.pos += 1;
                    return Ok(RawOp { name, position, args });
                }
                Some(c) => return Err(self.error(format!("expected ';' or '}}', found {c:?}"))),
                None => return Err(self.error("expected ';' or '}', found end of input")),
            }
        }
    }

    fn argument(&mut self) -> Result<(RawArg, usize), ProgramError> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some('"') {
            let s = self.quoted()?;
            return Ok((RawArg::Quoted(s), start));
        }
        let word = self.bare_word().trim_end();
        self.skip_ws();
        if self.peek() == Some('{') {
            let op = self.operation_body(word.to_string(), start)?;
            return Ok((RawArg::Op(op), start));
        }
        if word.is_empty() {
            return Err(self.error("expected argument"));
        }
        let arg = match word {
            "all_rows" | "all_row" => RawArg::AllRows,
            _ => match parse_number(word) {
                Some(v) if !word.contains(',') => RawArg::Number(v, word.to_string()),
                _ => RawArg::Bare(word.to_string()),
            },
        };
        Ok((arg, start))
    }
}

pub fn parse_program(text: &str) -> Result<Program, ProgramError> {
    let mut parser = Parser { src: text, pos: 0 };
    let raw = parser.operation()?;
    parser.skip_ws();
    if parser.pos != text.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    let root = resolve_op(&raw, &mut Vec::new())?;
    let program = Program {
        root,
        source_statement: None,
    };
    type_check(&program)?;
    Ok(program)
}

fn resolve_op(raw: &RawOp, path: &mut Vec<usize>) -> Result<Operation, ProgramError> {
    let code = OpCode::lookup(&raw.name).ok_or_else(|| ProgramError::UnknownOperator {
        name: raw.name.clone(),
        position: raw.position,
    })?;
    let operator = code.operator();
    if raw.args.len() != operator.arity() {
        return Err(ProgramError::ArityMismatch {
            op: operator.name.to_string(),
            expected: operator.arity(),
            found: raw.args.len(),
            position: raw.position,
        });
    }
    // operation children first so polymorphic literal slots can follow them
    let mut resolved: Vec<Option<Arg>> = vec![None; raw.args.len()];
    for (i, (arg, _)) in raw.args.iter().enumerate() {
        if let RawArg::Op(child) = arg {
            path.push(i);
            resolved[i] = Some(Arg::Op(resolve_op(child, path)?));
            path.pop();
        }
    }
    let scalar_hint = resolved
        .iter()
        .flatten()
        .filter_map(Arg::kind)
        .find(|k| matches!(k, ValueKind::Number | ValueKind::Text));
    for (i, ((arg, _), &want)) in raw.args.iter().zip(operator.arg_kinds).enumerate() {
        if resolved[i].is_none() {
            let hint = if want == ArgKind::Scalar { scalar_hint } else { None };
            resolved[i] = Some(Arg::Lit(resolve_literal(arg, want, hint)));
        }
    }
    Ok(Operation::new(code, resolved.into_iter().flatten().collect()))
}

fn resolve_literal(arg: &RawArg, want: ArgKind, hint: Option<ValueKind>) -> Literal {
    match (arg, want) {
        (RawArg::AllRows, _) => Literal::AllRows,
        (RawArg::Quoted(s) | RawArg::Bare(s), ArgKind::Column) => Literal::column(s),
        (RawArg::Number(_, raw), ArgKind::Value(ValueKind::Text)) => Literal::Text(raw.clone()),
        (RawArg::Number(_, raw), ArgKind::Scalar) if hint == Some(ValueKind::Text) => {
            Literal::Text(raw.clone())
        }
        (RawArg::Number(v, _), _) => Literal::Number(*v),
        (RawArg::Quoted(s) | RawArg::Bare(s), _) => Literal::Text(s.clone()),
        (RawArg::Op(_), _) => unreachable!("operations are resolved separately"),
    }
}

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    print_op(&p.root, &mut out);
    out
}

fn print_op(op: &Operation, out: &mut String) {
    out.push_str(op.op.name());
    out.push_str(" { ");
    for (i, arg) in op.args.iter().enumerate() {
        if i > 0 {
            out.push_str(" ; ");
        }
        match arg {
            Arg::Op(child) => print_op(child, out),
            Arg::Lit(Literal::AllRows) => out.push_str("all_rows"),
            Arg::Lit(Literal::Number(v)) => out.push_str(&format_number(*v)),
            Arg::Lit(Literal::Column(s) | Literal::Text(s)) => {
                out.push('"');
                for c in s.chars() {
                    if c == '"' || c == '\\' {
                        out.push('\\');
                    }
                    out.push(c);
                }
                out.push('"');
            }
        }
    }
    out.push_str(" }");
}

/// Renders a type error's node path against the printed program, for
/// diagnostics.
pub fn describe_path(p: &Program, path: &NodePath) -> String {
    let mut op = &p.root;
    let mut out = String::new();
    let _ = write!(out, "{}", op.op.name());
    for &i in &path.0 {
        match op.args.get(i) {
            Some(Arg::Op(child)) => {
                op = child;
                let _ = write!(out, " > {}", op.op.name());
            }
            Some(Arg::Lit(_)) => {
                let _ = write!(out, " > arg {}", i + 1);
                break;
            }
            None => break,
        }
    }
    out
}
