//! Operator registry, program trees, and the textual program syntax.

mod ast;
pub mod gen;
mod registry;
mod syntax;

use thiserror::Error;

pub use ast::{type_check, Arg, Literal, NodePath, Operation, PostOrderNode, Program};
pub use registry::{registry, ArgKind, Family, OpCode, Operator, ValueKind};
pub use syntax::{describe_path, format_number, parse_program, print_program};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProgramError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown operator {name:?} at byte {position}")]
    UnknownOperator { name: String, position: usize },
    #[error("{op} takes {expected} arguments, found {found} (byte {position})")]
    ArityMismatch {
        op: String,
        expected: usize,
        found: usize,
        position: usize,
    },
    #[error("type mismatch at {path}: {message}")]
    TypeMismatch { path: NodePath, message: String },
    #[error("invalid program JSON: {0}")]
    Json(String),
}
