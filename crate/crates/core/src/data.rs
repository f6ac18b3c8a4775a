//! Tab-separated datasets: `sentence<TAB>program[<TAB>anchoring]`.

use crate::error::{Error, Result};
use crate::grammar::{parse_valid_program, serialize_ast, Ast, Grammar};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub words: Vec<String>,
    pub program: Ast,
    /// Word (1-based) of every AST vertex, in preorder.
    pub anchoring: Option<Vec<usize>>,
}

impl Instance {
    pub fn to_line(&self, g: &Grammar) -> String {
        let mut line = format!("{}\t{}", self.words.join(" "), serialize_ast(g, &self.program));
        if let Some(a) = &self.anchoring {
            line.push('\t');
            line.push_str(&format_anchoring(a));
        }
        line
    }
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_owned).collect()
}

pub fn format_anchoring(words: &[usize]) -> String {
    words
        .iter()
        .enumerate()
        .map(|(u, w)| format!("{u}:{w}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `u:w` pairs covering every AST vertex exactly once.
pub fn parse_anchoring(text: &str, ast_len: usize, n: usize) -> std::result::Result<Vec<usize>, String> {
    let mut out = vec![0; ast_len];
    for pair in text.split_whitespace() {
        let (u, w) = pair.split_once(':').ok_or_else(|| format!("bad anchoring pair `{pair}`"))?;
        let u: usize = u.parse().map_err(|_| format!("bad AST vertex in `{pair}`"))?;
        let w: usize = w.parse().map_err(|_| format!("bad word index in `{pair}`"))?;
        if u >= ast_len {
            return Err(format!("AST vertex {u} out of range (program has {ast_len})"));
        }
        if w == 0 || w > n {
            return Err(format!("word {w} out of range 1..={n}"));
        }
        if out[u] != 0 {
            return Err(format!("AST vertex {u} anchored twice"));
        }
        out[u] = w;
    }
    if let Some(u) = out.iter().position(|&w| w == 0) {
        return Err(format!("AST vertex {u} is not anchored"));
    }
    let mut seen = vec![false; n + 1];
    if out.iter().any(|&w| std::mem::replace(&mut seen[w], true)) {
        return Err("two AST vertices share a word".into());
    }
    Ok(out)
}

/// Blank lines and lines starting with `#` are skipped.
pub fn parse_dataset(text: &str, g: &Grammar) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let err = |msg: String| Error::Dataset { line: lineno, msg };
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        let words = tokenize(fields[0]);
        if words.is_empty() {
            return Err(err("empty sentence".into()));
        }
        let program = parse_valid_program(fields[1], g).map_err(|e| err(e.to_string()))?;
        let anchoring = match fields.get(2) {
            Some(a) => Some(parse_anchoring(a, program.len(), words.len()).map_err(err)?),
            None => None,
        };
        out.push(Instance {
            words,
            program,
            anchoring,
        });
    }
    Ok(out)
}

pub fn write_dataset(data: &[Instance], g: &Grammar) -> String {
    let mut s = String::new();
    for inst in data {
        s.push_str(&inst.to_line(g));
        s.push('\n');
    }
    s
}
