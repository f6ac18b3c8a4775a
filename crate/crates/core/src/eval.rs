//! Exact-match accuracy over functional programs.

use crate::error::{Error, Result};
use crate::grammar::parse_term;

/// Marker written for sentences without a decoded program.
pub const FAIL: &str = "FAIL";

/// Whether two program strings denote the same program. Argument order is
/// ignored; unparsable text never matches.
pub fn programs_match(gold: &str, pred: &str) -> bool {
    match (parse_term(gold), parse_term(pred)) {
        (Ok(a), Ok(b)) => a.canonical() == b.canonical(),
        _ => false,
    }
}

/// Fraction of positions whose programs match.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(gold: &[S], pred: &[T]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Dimension {
            expected: gold.len(),
            got: pred.len(),
        });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| programs_match(g.as_ref(), p.as_ref()))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

pub fn format_accuracy(acc: f64) -> String {
    format!("{acc:.4}")
}

/// Non-empty lines of a program file.
pub fn program_lines(text: &str) -> Vec<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}
