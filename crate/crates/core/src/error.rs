use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grammar line {line}: {msg}")]
    Grammar { line: usize, msg: String },
    #[error("program: {0}")]
    Program(String),
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("malformed AST: {0}")]
    Ast(String),
    #[error("weight file line {line}: {msg}")]
    Weights { line: usize, msg: String },
    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("infeasible solution: {0}")]
    Infeasible(String),
    #[error("node {0} is unreachable from the root")]
    Unreachable(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
