//! Typed semantic grammars, program trees and their text formats.
//!
//! Grammar file, one declaration per line:
//!
//! ```text
//! # comment
//! type e
//! tag A e
//! tag P e e=1
//! ```
//!
//! Programs are written in functional notation, e.g.
//! `exclude(river_all, traverse_2(stateid))`.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub const ROOT: &str = "ROOT";
pub const NULL: &str = "NULL";

/// A semantic grammar: tags, types, the typing function and the valency
/// function.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    tags: Vec<String>,
    types: Vec<String>,
    tag_type: Vec<usize>,
    // tag_args[tag][type]
    tag_args: Vec<Vec<usize>>,
    tag_index: HashMap<String, usize>,
    type_index: HashMap<String, usize>,
}

impl Grammar {
    /// Builds a grammar from `(name, type, [(argtype, count)])` declarations.
    pub fn new<S: AsRef<str>>(types: &[S], tags: &[(S, S, Vec<(S, usize)>)]) -> Result<Self> {
        let mut g = Grammar {
            tags: Vec::new(),
            types: Vec::new(),
            tag_type: Vec::new(),
            tag_args: Vec::new(),
            tag_index: HashMap::new(),
            type_index: HashMap::new(),
        };
        for (i, t) in types.iter().enumerate() {
            g.declare_type(t.as_ref(), i + 1)?;
        }
        for (i, (name, ty, args)) in tags.iter().enumerate() {
            let args: Vec<(&str, usize)> = args.iter().map(|(a, c)| (a.as_ref(), *c)).collect();
            g.declare_tag(name.as_ref(), ty.as_ref(), &args, types.len() + i + 1)?;
        }
        g.finish();
        Ok(g)
    }

    fn declare_type(&mut self, name: &str, line: usize) -> Result<()> {
        check_name(name, line)?;
        if self.type_index.contains_key(name) {
            return Err(Error::Grammar {
                line,
                msg: format!("duplicate type `{name}`"),
            });
        }
        self.type_index.insert(name.to_string(), self.types.len());
        self.types.push(name.to_string());
        Ok(())
    }

    fn declare_tag(&mut self, name: &str, ty: &str, args: &[(&str, usize)], line: usize) -> Result<()> {
        check_name(name, line)?;
        if self.tag_index.contains_key(name) {
            return Err(Error::Grammar {
                line,
                msg: format!("duplicate tag `{name}`"),
            });
        }
        let ty = *self.type_index.get(ty).ok_or_else(|| Error::Grammar {
            line,
            msg: format!("unknown type `{ty}`"),
        })?;
        let mut counts = vec![0; self.types.len()];
        for &(arg_ty, count) in args {
            let t = *self.type_index.get(arg_ty).ok_or_else(|| Error::Grammar {
                line,
                msg: format!("unknown type `{arg_ty}`"),
            })?;
            counts[t] += count;
        }
        self.tag_index.insert(name.to_string(), self.tags.len());
        self.tags.push(name.to_string());
        self.tag_type.push(ty);
        self.tag_args.push(counts);
        Ok(())
    }

    // Argument-count rows are sized to the final number of types.
    fn finish(&mut self) {
        let nt = self.types.len();
        for counts in &mut self.tag_args {
            counts.resize(nt, 0);
        }
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn tag_name(&self, tag: usize) -> &str {
        &self.tags[tag]
    }

    pub fn type_name(&self, ty: usize) -> &str {
        &self.types[ty]
    }

    pub fn tag_id(&self, name: &str) -> Option<usize> {
        self.tag_index.get(name).copied()
    }

    pub fn type_id(&self, name: &str) -> Option<usize> {
        self.type_index.get(name).copied()
    }

    /// `f_Type`.
    pub fn tag_type(&self, tag: usize) -> usize {
        self.tag_type[tag]
    }

    /// `f_Args`.
    pub fn tag_args(&self, tag: usize, ty: usize) -> usize {
        self.tag_args[tag][ty]
    }

    pub fn arity(&self, tag: usize) -> usize {
        self.tag_args[tag].iter().sum()
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(String::as_str)
    }

    pub fn is_entity_id(&self, tag: usize) -> bool {
        self.tag_args[tag].iter().all(|&c| c == 0)
    }

    /// A tag is an entity iff it takes no argument of any type.
    pub fn is_entity(&self, tag: &str) -> Result<bool> {
        let id = self.tag_id(tag).ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
        Ok(self.is_entity_id(id))
    }

    /// Renders the grammar back into the grammar file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.types {
            out.push_str(&format!("type {t}\n"));
        }
        for (e, name) in self.tags.iter().enumerate() {
            out.push_str(&format!("tag {} {}", name, self.types[self.tag_type[e]]));
            for (t, &c) in self.tag_args[e].iter().enumerate() {
                if c > 0 {
                    out.push_str(&format!(" {}={}", self.types[t], c));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn check_name(name: &str, line: usize) -> Result<()> {
    if name == ROOT || name == NULL {
        return Err(Error::Grammar {
            line,
            msg: format!("`{name}` is reserved"),
        });
    }
    if name.is_empty() || name.contains(|c: char| c.is_whitespace() || "(),=".contains(c)) {
        return Err(Error::Grammar {
            line,
            msg: format!("invalid identifier `{name}`"),
        });
    }
    Ok(())
}

/// Parses the grammar file format. Tag and type order is file order.
pub fn parse_grammar(text: &str) -> Result<Grammar> {
    let mut g = Grammar::new::<&str>(&[], &[])?;
    let mut pending = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        match fields.next() {
            Some("type") => {
                let name = fields.next().ok_or_else(|| Error::Grammar {
                    line,
                    msg: "missing type name".into(),
                })?;
                if fields.next().is_some() {
                    return Err(Error::Grammar {
                        line,
                        msg: "trailing fields after type name".into(),
                    });
                }
                g.declare_type(name, line)?;
            }
            Some("tag") => {
                let name = fields.next();
                let ty = fields.next();
                let (Some(name), Some(ty)) = (name, ty) else {
                    return Err(Error::Grammar {
                        line,
                        msg: "expected `tag <name> <type> [<argtype>=<count> ...]`".into(),
                    });
                };
                let mut args = Vec::new();
                for f in fields {
                    let (t, c) = f.split_once('=').ok_or_else(|| Error::Grammar {
                        line,
                        msg: format!("bad argument spec `{f}`"),
                    })?;
                    let c: usize = c.parse().map_err(|_| Error::Grammar {
                        line,
                        msg: format!("bad argument count `{c}`"),
                    })?;
                    args.push((t.to_string(), c));
                }
                pending.push((line, name.to_string(), ty.to_string(), args));
            }
            Some(other) => {
                return Err(Error::Grammar {
                    line,
                    msg: format!("unknown declaration `{other}`"),
                })
            }
            None => unreachable!(),
        }
    }
    // Tags are resolved after all types so that declaration order between
    // the two kinds does not matter.
    for (line, name, ty, args) in pending {
        let args: Vec<(&str, usize)> = args.iter().map(|(t, c)| (t.as_str(), *c)).collect();
        g.declare_tag(&name, &ty, &args, line)?;
    }
    g.finish();
    Ok(g)
}

/// A grammar-free program term, as written in functional notation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub name: String,
    pub args: Vec<Term>,
}

impl Term {
    /// Canonical rendering where argument lists are sorted, so that two terms
    /// differing only in argument order render identically.
    pub fn canonical(&self) -> String {
        if self.args.is_empty() {
            return self.name.clone();
        }
        let mut args: Vec<String> = self.args.iter().map(Term::canonical).collect();
        args.sort();
        format!("{}({})", self.name, args.join(","))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        if !self.args.is_empty() {
            f.write_str("(")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{a}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Comma,
    Ident(&'a str),
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token<'_>)>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let delim = c.is_whitespace() || c == '(' || c == ')' || c == ',';
        if delim {
            if let Some(s) = start.take() {
                out.push((s, Token::Ident(&text[s..i])));
            }
            match c {
                '(' => out.push((i, Token::Open)),
                ')' => out.push((i, Token::Close)),
                ',' => out.push((i, Token::Comma)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, Token::Ident(&text[s..])));
    }
    Ok(out)
}

/// Parses functional notation without reference to a grammar.
pub fn parse_term(text: &str) -> Result<Term> {
    let tokens = tokenize(text)?;
    let mut pos = 0;
    let term = parse_term_at(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Program(format!(
            "unexpected trailing input at offset {}",
            tokens[pos].0
        )));
    }
    Ok(term)
}

fn parse_term_at(tokens: &[(usize, Token<'_>)], pos: &mut usize) -> Result<Term> {
    let name = match tokens.get(*pos) {
        Some((_, Token::Ident(name))) => name.to_string(),
        Some((off, t)) => {
            return Err(Error::Program(format!("expected a name at offset {off}, found {t:?}")));
        }
        None => return Err(Error::Program("unexpected end of input".into())),
    };
    *pos += 1;
    let mut args = Vec::new();
    if let Some((_, Token::Open)) = tokens.get(*pos) {
        *pos += 1;
        loop {
            args.push(parse_term_at(tokens, pos)?);
            match tokens.get(*pos) {
                Some((_, Token::Comma)) => *pos += 1,
                Some((_, Token::Close)) => {
                    *pos += 1;
                    break;
                }
                Some((off, t)) => {
                    return Err(Error::Program(format!("expected `,` or `)` at offset {off}, found {t:?}")));
                }
                None => return Err(Error::Program("unbalanced parentheses".into())),
            }
        }
    }
    Ok(Term { name, args })
}

/// A program tree. Vertices are `0..len()`, labelled with tag ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ast {
    labels: Vec<usize>,
    children: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    root: usize,
}

impl Ast {
    /// Builds an AST from labels, arcs and a root. Fails unless the arcs form
    /// an arborescence rooted at `root`. Children keep the order of `arcs`.
    pub fn from_arcs(labels: Vec<usize>, arcs: &[(usize, usize)], root: usize) -> Result<Self> {
        let n = labels.len();
        if root >= n {
            return Err(Error::Ast(format!("root {root} out of range")));
        }
        if arcs.len() + 1 != n {
            return Err(Error::Ast(format!("{} arcs for {} vertices", arcs.len(), n)));
        }
        let mut children = vec![Vec::new(); n];
        let mut parent = vec![None; n];
        for &(h, d) in arcs {
            if h >= n || d >= n {
                return Err(Error::Ast(format!("arc {h}->{d} out of range")));
            }
            if d == root || parent[d].is_some() {
                return Err(Error::Ast(format!("vertex {d} has more than one head")));
            }
            parent[d] = Some(h);
            children[h].push(d);
        }
        let ast = Ast {
            labels,
            children,
            parent,
            root,
        };
        if ast.preorder().len() != n {
            return Err(Error::Ast("not all vertices are reachable from the root".into()));
        }
        Ok(ast)
    }

    pub fn leaf(tag: usize) -> Self {
        Ast {
            labels: vec![tag],
            children: vec![Vec::new()],
            parent: vec![None],
            root: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn label(&self, v: usize) -> usize {
        self.labels[v]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.preorder()
            .into_iter()
            .flat_map(move |h| self.children[h].iter().map(move |&d| (h, d)))
    }

    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut seen = vec![false; self.len()];
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            out.push(v);
            stack.extend(self.children[v].iter().rev());
        }
        out
    }

    /// Children before parents.
    pub fn postorder(&self) -> Vec<usize> {
        let mut order = self.preorder();
        order.reverse();
        order
    }

    pub fn to_term(&self, g: &Grammar) -> Term {
        self.term_at(g, self.root)
    }

    fn term_at(&self, g: &Grammar, v: usize) -> Term {
        Term {
            name: g.tag_name(self.labels[v]).to_string(),
            args: self.children[v].iter().map(|&c| self.term_at(g, c)).collect(),
        }
    }

    /// Structural equality up to the order of arguments.
    pub fn same_program(&self, other: &Ast, g: &Grammar) -> bool {
        self.to_term(g).canonical() == other.to_term(g).canonical()
    }
}

/// Parses a program. Vertex ids follow the preorder of the text.
pub fn parse_program(text: &str, g: &Grammar) -> Result<Ast> {
    let term = parse_term(text)?;
    ast_from_term(&term, g)
}

pub fn ast_from_term(term: &Term, g: &Grammar) -> Result<Ast> {
    fn walk(t: &Term, g: &Grammar, labels: &mut Vec<usize>, arcs: &mut Vec<(usize, usize)>) -> Result<usize> {
        let id = labels.len();
        labels.push(g.tag_id(&t.name).ok_or_else(|| Error::UnknownTag(t.name.clone()))?);
        for a in &t.args {
            let c = walk(a, g, labels, arcs)?;
            arcs.push((id, c));
        }
        Ok(id)
    }
    let mut labels = Vec::new();
    let mut arcs = Vec::new();
    walk(term, g, &mut labels, &mut arcs)?;
    Ast::from_arcs(labels, &arcs, 0)
}

/// Canonical functional notation, children in stored order.
pub fn serialize_ast(g: &Grammar, a: &Ast) -> String {
    a.to_term(g).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub vertex: usize,
    pub tag: String,
    pub ty: String,
    pub expected: usize,
    pub found: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vertex {} ({}): expected {} argument(s) of type {}, found {}",
            self.vertex, self.tag, self.expected, self.ty, self.found
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks valency and typing at every vertex. Argument order is ignored.
pub fn validate_ast(g: &Grammar, a: &Ast) -> ValidationReport {
    let mut violations = Vec::new();
    let mut counts = vec![0usize; g.num_types()];
    for v in a.preorder() {
        counts.iter_mut().for_each(|c| *c = 0);
        for &c in a.children(v) {
            counts[g.tag_type(a.label(c))] += 1;
        }
        let tag = a.label(v);
        for (t, &found) in counts.iter().enumerate() {
            let expected = g.tag_args(tag, t);
            if found != expected {
                violations.push(Violation {
                    vertex: v,
                    tag: g.tag_name(tag).to_string(),
                    ty: g.type_name(t).to_string(),
                    expected,
                    found,
                });
            }
        }
    }
    ValidationReport { violations }
}

/// Parses and validates in one go.
pub fn parse_valid_program(text: &str, g: &Grammar) -> Result<Ast> {
    let ast = parse_program(text, g)?;
    let report = validate_ast(g, &ast);
    match report.violations.first() {
        None => Ok(ast),
        Some(v) => Err(Error::Program(v.to_string())),
    }
}
