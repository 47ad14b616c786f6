use std::fmt;

use serde_json::{json, Value as Json};

use super::registry::{ArgKind, OpCode, Operator, ValueKind};
use super::ProgramError;
use crate::tabular::normalize;

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    /// A header name, stored normalized.
    Column(String),
    Text(String),
    Number(f64),
    AllRows,
}

impl Literal {
    pub fn column(name: &str) -> Self {
        Literal::Column(normalize(name))
    }

    pub fn text(s: impl Into<String>) -> Self {
        Literal::Text(s.into())
    }

    pub fn kind(&self) -> Option<ValueKind> {
        match self {
            Literal::Column(_) => None,
            Literal::Text(_) => Some(ValueKind::Text),
            Literal::Number(_) => Some(ValueKind::Number),
            Literal::AllRows => Some(ValueKind::View),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Op(Operation),
    Lit(Literal),
}

impl Arg {
    pub fn kind(&self) -> Option<ValueKind> {
        match self {
            Arg::Op(op) => Some(op.result_kind()),
            Arg::Lit(l) => l.kind(),
        }
    }
}

impl From<Operation> for Arg {
    fn from(op: Operation) -> Self {
        Arg::Op(op)
    }
}

impl From<Literal> for Arg {
    fn from(l: Literal) -> Self {
        Arg::Lit(l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Operation {
    pub op: OpCode,
    pub args: Vec<Arg>,
}

impl Operation {
    pub fn new(op: OpCode, args: Vec<Arg>) -> Self {
        Operation { op, args }
    }

    pub fn operator(&self) -> &'static Operator {
        self.op.operator()
    }

    pub fn result_kind(&self) -> ValueKind {
        self.operator().result_kind
    }

    /// Number of operation nodes in this subtree.
    pub fn size(&self) -> usize {
        1 + self
            .args
            .iter()
            .map(|a| match a {
                Arg::Op(op) => op.size(),
                Arg::Lit(_) => 0,
            })
            .sum::<usize>()
    }

    /// Operation nesting depth (a lone operation has depth 1).
    pub fn depth(&self) -> usize {
        1 + self
            .args
            .iter()
            .map(|a| match a {
                Arg::Op(op) => op.depth(),
                Arg::Lit(_) => 0,
            })
            .max()
            .unwrap_or(0)
    }
}

/// Dotted child-index path from the root, e.g. `root/0/1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct NodePath(pub Vec<usize>);

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("root")?;
        for i in &self.0 {
            write!(f, "/{i}")?;
        }
        Ok(())
    }
}

/// One operation in post-order, with the post-order indices of its
/// operation children (literal arguments are not listed).
#[derive(Debug, Clone)]
pub struct PostOrderNode<'a> {
    pub op: &'a Operation,
    pub path: NodePath,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub root: Operation,
    pub source_statement: Option<String>,
}

impl Program {
    /// Wraps a tree, rejecting it if it does not type-check.
    pub fn new(root: Operation) -> Result<Self, ProgramError> {
        let p = Program {
            root,
            source_statement: None,
        };
        type_check(&p)?;
        Ok(p)
    }

    pub fn with_statement(mut self, statement: impl Into<String>) -> Self {
        self.source_statement = Some(statement.into());
        self
    }

    pub fn size(&self) -> usize {
        self.root.size()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn result_kind(&self) -> ValueKind {
        self.root.result_kind()
    }

    pub fn post_order(&self) -> Vec<PostOrderNode<'_>> {
        fn walk<'a>(op: &'a Operation, path: &mut Vec<usize>, out: &mut Vec<PostOrderNode<'a>>) -> usize {
            let mut children = Vec::new();
            for (i, arg) in op.args.iter().enumerate() {
                if let Arg::Op(child) = arg {
                    path.push(i);
                    children.push(walk(child, path, out));
                    path.pop();
                }
            }
            out.push(PostOrderNode {
                op,
                path: NodePath(path.clone()),
                children,
            });
            out.len() - 1
        }
        let mut out = Vec::with_capacity(self.size());
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    /// Parent post-order index for every post-order node (root has none).
    pub fn post_order_parents(&self) -> Vec<Option<usize>> {
        let nodes = self.post_order();
        let mut parents = vec![None; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for &c in &n.children {
                parents[c] = Some(i);
            }
        }
        parents
    }

    pub fn to_json(&self) -> Json {
        op_to_json(&self.root)
    }

    pub fn from_json(doc: &Json) -> Result<Self, ProgramError> {
        let root = op_from_json(doc)?;
        Program::new(root)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::syntax::print_program(self))
    }
}

fn op_to_json(op: &Operation) -> Json {
    let args: Vec<Json> = op
        .args
        .iter()
        .map(|a| match a {
            Arg::Op(child) => op_to_json(child),
            Arg::Lit(Literal::AllRows) => json!("all_rows"),
            Arg::Lit(Literal::Column(c)) => json!({ "column": c }),
            Arg::Lit(Literal::Text(t)) => json!({ "text": t }),
            Arg::Lit(Literal::Number(n)) => json!({ "number": n }),
        })
        .collect();
    json!({ "op": op.op.name(), "args": args })
}

fn op_from_json(doc: &Json) -> Result<Operation, ProgramError> {
    let bad = |msg: &str| ProgramError::Json(msg.to_string());
    let name = doc
        .get("op")
        .and_then(Json::as_str)
        .ok_or_else(|| bad("operation object needs a string \"op\""))?;
    let code = OpCode::lookup(name).ok_or_else(|| ProgramError::UnknownOperator {
        name: name.to_string(),
        position: 0,
    })?;
    let raw_args = doc
        .get("args")
        .and_then(Json::as_array)
        .ok_or_else(|| bad("operation object needs an \"args\" array"))?;
    let mut args = Vec::with_capacity(raw_args.len());
    for a in raw_args {
        let arg = if a.as_str().is_some_and(|s| s == "all_rows" || s == "all_row") {
            Arg::Lit(Literal::AllRows)
        } else if a.get("op").is_some() {
            Arg::Op(op_from_json(a)?)
        } else if let Some(c) = a.get("column").and_then(Json::as_str) {
            Arg::Lit(Literal::column(c))
        } else if let Some(t) = a.get("text").and_then(Json::as_str) {
            Arg::Lit(Literal::Text(t.to_string()))
        } else if let Some(n) = a.get("number").and_then(Json::as_f64) {
            Arg::Lit(Literal::Number(n))
        } else {
            return Err(bad(&format!("unrecognized argument {a}")));
        };
        args.push(arg);
    }
    Ok(Operation::new(code, args))
}

/// Checks arity and kind compatibility on every edge.
pub fn type_check(p: &Program) -> Result<(), ProgramError> {
    check_op(&p.root, &mut Vec::new())
}

fn check_op(op: &Operation, path: &mut Vec<usize>) -> Result<(), ProgramError> {
    let operator = op.operator();
    if op.args.len() != operator.arity() {
        return Err(ProgramError::ArityMismatch {
            op: operator.name.to_string(),
            expected: operator.arity(),
            found: op.args.len(),
            position: 0,
        });
    }
    for (i, (arg, &want)) in op.args.iter().zip(operator.arg_kinds).enumerate() {
        path.push(i);
        if let Arg::Op(child) = arg {
            check_op(child, path)?;
        }
        if !arg_fits(arg, want) {
            return Err(mismatch(operator, i, want, arg, path));
        }
        path.pop();
    }
    if operator.arg_kinds.iter().all(|k| *k == ArgKind::Scalar) && op.args[0].kind() != op.args[1].kind() {
        path.push(1);
        let err = mismatch(operator, 1, ArgKind::Scalar, &op.args[1], path);
        return Err(err);
    }
    Ok(())
}

fn arg_fits(arg: &Arg, want: ArgKind) -> bool {
    match (arg, want) {
        (Arg::Lit(Literal::Column(_)), ArgKind::Column) => true,
        (_, ArgKind::Column) | (Arg::Lit(Literal::Column(_)), _) => false,
        (arg, want) => arg.kind().is_some_and(|k| want.accepts(k)),
    }
}

fn mismatch(operator: &Operator, index: usize, want: ArgKind, arg: &Arg, path: &[usize]) -> ProgramError {
    let found = match arg {
        Arg::Lit(Literal::Column(c)) => format!("column {c:?}"),
        Arg::Lit(l) => format!("{} literal", l.kind().map(|k| k.to_string()).unwrap_or_default()),
        Arg::Op(op) => format!("{} ({})", op.result_kind(), op.op.name()),
    };
    ProgramError::TypeMismatch {
        path: NodePath(path.to_vec()),
        message: format!(
            "argument {} of {} expects {}, found {}",
            index + 1,
            operator.name,
            want,
            found
        ),
    }
}
