//! The extended clustered graph built over a sentence, its weights, and
//! conversions between solution vectors, arc sets and ASTs.
//!
//! Vertex layout: vertex `0` is the root. Word `i` (1-based) owns the
//! contiguous block `1 + (i-1)(|E|+1) ..`, one vertex per tag in grammar
//! order followed by the null vertex of that word.
//!
//! Arc layout: first the root arcs `0 -> v` for every non-root `v`, at index
//! `v - 1`; then every inter-cluster arc between non-null vertices, ordered
//! by (head word, head tag, dependent word, dependent tag).

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grammar::{Ast, Grammar, NULL, ROOT};

/// Label of a graph vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Root,
    Tag(usize),
    Null,
}

impl Label {
    pub fn name(self, g: &Grammar) -> &str {
        match self {
            Label::Root => ROOT,
            Label::Null => NULL,
            Label::Tag(t) => g.tag_name(t),
        }
    }

    pub fn tag(self) -> Option<usize> {
        match self {
            Label::Tag(t) => Some(t),
            _ => None,
        }
    }
}

/// Provides vertex and arc weights while a graph is being built.
///
/// Words are 1-based; word `0` with [`Label::Root`] designates the root.
pub trait WeightSource {
    fn vertex(&self, word: usize, label: Label) -> f64;
    fn arc(&self, head_word: usize, head: Label, dep_word: usize, dep: Label) -> f64;
}

/// Every weight is zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroWeights;

impl WeightSource for ZeroWeights {
    fn vertex(&self, _: usize, _: Label) -> f64 {
        0.0
    }

    fn arc(&self, _: usize, _: Label, _: usize, _: Label) -> f64 {
        0.0
    }
}

/// Weights listed explicitly in a weight file; anything unlisted is zero.
///
/// ```text
/// vertex <word-index> <tag|NULL> <weight>
/// arc <word-index|0> <tag|ROOT> <word-index> <tag|NULL> <weight>
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    vertices: HashMap<(usize, Label), f64>,
    arcs: HashMap<(usize, Label, usize, Label), f64>,
}

impl WeightFile {
    pub fn parse(text: &str, g: &Grammar) -> Result<Self> {
        let mut wf = WeightFile::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Weights { line, msg };
            let fields: Vec<&str> = content.split_whitespace().collect();
            let label = |name: &str| -> Result<Label> {
                match name {
                    ROOT => Ok(Label::Root),
                    NULL => Ok(Label::Null),
                    t => g
                        .tag_id(t)
                        .map(Label::Tag)
                        .ok_or_else(|| err(format!("tag `{t}` is not in the grammar"))),
                }
            };
            let word = |s: &str| -> Result<usize> { s.parse().map_err(|_| err(format!("bad word index `{s}`"))) };
            let weight = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|w| w.is_finite())
                    .ok_or_else(|| err(format!("bad weight `{s}`")))
            };
            match fields.as_slice() {
                ["vertex", w, l, v] => {
                    let (w, l, v) = (word(w)?, label(l)?, weight(v)?);
                    if w == 0 || l == Label::Root {
                        return Err(err("the root vertex carries no weight".into()));
                    }
                    wf.vertices.insert((w, l), v);
                }
                ["arc", hw, hl, dw, dl, v] => {
                    let (hw, hl, dw, dl, v) = (word(hw)?, label(hl)?, word(dw)?, label(dl)?, weight(v)?);
                    if (hw == 0) != (hl == Label::Root) {
                        return Err(err("word 0 is the root and only the root".into()));
                    }
                    if dw == 0 || dl == Label::Root {
                        return Err(err("arcs cannot enter the root".into()));
                    }
                    if dl == Label::Null && hl != Label::Root {
                        return Err(err("null vertices are only reachable from the root".into()));
                    }
                    if hl == Label::Null {
                        return Err(err("null vertices have no outgoing arcs".into()));
                    }
                    if hw == dw {
                        return Err(err("arcs must connect distinct words".into()));
                    }
                    wf.arcs.insert((hw, hl, dw, dl), v);
                }
                _ => return Err(err(format!("unrecognised line `{content}`"))),
            }
        }
        Ok(wf)
    }

    /// Largest word index mentioned in the file.
    pub fn max_word(&self) -> usize {
        let v = self.vertices.keys().map(|k| k.0);
        let a = self.arcs.keys().map(|k| k.0.max(k.2));
        v.chain(a).max().unwrap_or(0)
    }

    pub fn set_vertex(&mut self, word: usize, label: Label, w: f64) {
        self.vertices.insert((word, label), w);
    }

    pub fn set_arc(&mut self, head_word: usize, head: Label, dep_word: usize, dep: Label, w: f64) {
        self.arcs.insert((head_word, head, dep_word, dep), w);
    }
}

impl WeightSource for WeightFile {
    fn vertex(&self, word: usize, label: Label) -> f64 {
        self.vertices.get(&(word, label)).copied().unwrap_or(0.0)
    }

    fn arc(&self, head_word: usize, head: Label, dep_word: usize, dep: Label) -> f64 {
        self.arcs.get(&(head_word, head, dep_word, dep)).copied().unwrap_or(0.0)
    }
}

/// Clustered graph over a sentence, extended with one null vertex per word.
#[derive(Debug, Clone)]
pub struct ExtendedGraph {
    n: usize,
    grammar: Arc<Grammar>,
    arcs: Vec<(usize, usize)>,
    incoming: Vec<Vec<usize>>,
    // outgoing[v * |T| + t]: arcs leaving v towards vertices of type t
    outgoing: Vec<Vec<usize>>,
    pub mu: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ExtendedGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn grammar_arc(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    fn block(&self) -> usize {
        self.grammar.num_tags() + 1
    }

    pub fn num_vertices(&self) -> usize {
        1 + self.n * self.block()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    /// Vertex of `label` in cluster `word`; the root for word 0.
    pub fn vertex(&self, word: usize, label: Label) -> usize {
        match label {
            Label::Root => {
                debug_assert_eq!(word, 0);
                0
            }
            Label::Tag(t) => 1 + (word - 1) * self.block() + t,
            Label::Null => 1 + (word - 1) * self.block() + self.grammar.num_tags(),
        }
    }

    pub fn null_vertex(&self, word: usize) -> usize {
        self.vertex(word, Label::Null)
    }

    /// Cluster (word index) of a vertex, 0 for the root.
    pub fn cluster_of(&self, v: usize) -> usize {
        if v == 0 {
            0
        } else {
            1 + (v - 1) / self.block()
        }
    }

    pub fn label_of(&self, v: usize) -> Label {
        if v == 0 {
            return Label::Root;
        }
        let k = (v - 1) % self.block();
        if k == self.grammar.num_tags() {
            Label::Null
        } else {
            Label::Tag(k)
        }
    }

    pub fn is_null(&self, v: usize) -> bool {
        v != 0 && self.label_of(v) == Label::Null
    }

    /// All vertices of word cluster `word`, tags first then null.
    pub fn cluster(&self, word: usize) -> std::ops::Range<usize> {
        let start = 1 + (word - 1) * self.block();
        start..start + self.block()
    }

    pub fn arc(&self, a: usize) -> (usize, usize) {
        self.arcs[a]
    }

    pub fn arcs(&self) -> &[(usize, usize)] {
        &self.arcs
    }

    pub fn root_arc(&self, v: usize) -> usize {
        debug_assert!(v > 0);
        v - 1
    }

    pub fn is_root_arc(&self, a: usize) -> bool {
        a < self.num_vertices() - 1
    }

    /// Index of the arc `src -> dst`, if the graph has one.
    pub fn arc_index(&self, src: usize, dst: usize) -> Option<usize> {
        if dst == 0 || src == dst {
            return None;
        }
        if src == 0 {
            return Some(self.root_arc(dst));
        }
        let (Label::Tag(a), Label::Tag(b)) = (self.label_of(src), self.label_of(dst)) else {
            return None;
        };
        let (i, j) = (self.cluster_of(src), self.cluster_of(dst));
        if i == j {
            return None;
        }
        let e = self.grammar.num_tags();
        let jj = if j < i { j - 1 } else { j - 2 };
        let per_head = (self.n - 1) * e;
        Some(self.num_vertices() - 1 + ((i - 1) * e + a) * per_head + jj * e + b)
    }

    pub fn incoming(&self, v: usize) -> &[usize] {
        &self.incoming[v]
    }

    /// Arcs leaving `v` whose dependent has type `ty`.
    pub fn outgoing_typed(&self, v: usize, ty: usize) -> &[usize] {
        &self.outgoing[v * self.grammar.num_types() + ty]
    }

    pub fn dim(&self) -> usize {
        self.num_vertices() + self.num_arcs()
    }

    /// The weights as a linear objective over `(x, y)`.
    pub fn weights(&self) -> SolutionVector {
        let mut data = self.mu.clone();
        data.extend_from_slice(&self.phi);
        SolutionVector {
            nx: self.num_vertices(),
            data,
        }
    }

    pub fn set_weights(&mut self, w: &SolutionVector) {
        assert_eq!(w.nx, self.num_vertices());
        self.mu.copy_from_slice(w.x());
        self.phi.copy_from_slice(w.y());
    }

    pub fn vertex_name(&self, v: usize) -> String {
        match self.label_of(v) {
            Label::Root => ROOT.to_string(),
            l => format!("{}@{}", l.name(&self.grammar), self.cluster_of(v)),
        }
    }

    pub fn arc_name(&self, a: usize) -> String {
        let (s, d) = self.arcs[a];
        format!("{}->{}", self.vertex_name(s), self.vertex_name(d))
    }
}

/// Builds the extended graph for a sentence of `n` words.
pub fn build_graph(n: usize, grammar: Arc<Grammar>, weights: &dyn WeightSource) -> ExtendedGraph {
    assert!(n >= 1, "sentences have at least one word");
    let e = grammar.num_tags();
    let nt = grammar.num_types();
    let block = e + 1;
    let nv = 1 + n * block;
    let mut arcs = Vec::with_capacity(nv - 1 + n * (n - 1) * e * e);
    for v in 1..nv {
        arcs.push((0, v));
    }
    for i in 1..=n {
        for a in 0..e {
            let src = 1 + (i - 1) * block + a;
            for j in (1..=n).filter(|&j| j != i) {
                for b in 0..e {
                    arcs.push((src, 1 + (j - 1) * block + b));
                }
            }
        }
    }
    let mut incoming = vec![Vec::new(); nv];
    let mut outgoing = vec![Vec::new(); nv * nt];
    let mut g = ExtendedGraph {
        n,
        grammar: grammar.clone(),
        arcs: Vec::new(),
        incoming: Vec::new(),
        outgoing: Vec::new(),
        mu: vec![0.0; nv],
        phi: vec![0.0; arcs.len()],
    };
    for (idx, &(s, d)) in arcs.iter().enumerate() {
        incoming[d].push(idx);
        if s != 0 {
            if let Label::Tag(b) = g.label_of(d) {
                outgoing[s * nt + grammar.tag_type(b)].push(idx);
            }
        }
    }
    for v in 1..nv {
        g.mu[v] = weights.vertex(g.cluster_of(v), g.label_of(v));
    }
    for (idx, &(s, d)) in arcs.iter().enumerate() {
        g.phi[idx] = weights.arc(g.cluster_of(s), g.label_of(s), g.cluster_of(d), g.label_of(d));
    }
    g.arcs = arcs;
    g.incoming = incoming;
    g.outgoing = outgoing;
    g
}

/// A point `z = (x, y)`: vertex coordinates followed by arc coordinates.
/// Also used for linear objectives and gradients over the same space.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionVector {
    nx: usize,
    data: Vec<f64>,
}

impl SolutionVector {
    pub fn zeros(g: &ExtendedGraph) -> Self {
        SolutionVector {
            nx: g.num_vertices(),
            data: vec![0.0; g.dim()],
        }
    }

    pub fn from_parts(x: Vec<f64>, y: Vec<f64>) -> Self {
        let nx = x.len();
        let mut data = x;
        data.extend(y);
        SolutionVector { nx, data }
    }

    pub fn x(&self) -> &[f64] {
        &self.data[..self.nx]
    }

    pub fn y(&self) -> &[f64] {
        &self.data[self.nx..]
    }

    pub fn x_mut(&mut self) -> &mut [f64] {
        &mut self.data[..self.nx]
    }

    pub fn y_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.nx..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_x(&self) -> usize {
        self.nx
    }

    pub fn dot(&self, other: &SolutionVector) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &SolutionVector) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &SolutionVector) -> SolutionVector {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        SolutionVector { nx: self.nx, data }
    }

    pub fn is_integral(&self, tol: f64) -> bool {
        self.data.iter().all(|v| (v - v.round()).abs() <= tol)
    }

    pub fn rounded(&self) -> SolutionVector {
        SolutionVector {
            nx: self.nx,
            data: self.data.iter().map(|v| v.round()).collect(),
        }
    }

    /// Indices of arcs with `y_a > tol`.
    pub fn selected_arcs(&self, tol: f64) -> Vec<usize> {
        self.y().iter().enumerate().filter(|(_, &v)| v > tol).map(|(a, _)| a).collect()
    }

    fn check_dim(&self, g: &ExtendedGraph) -> Result<()> {
        if self.nx != g.num_vertices() || self.data.len() != g.dim() {
            return Err(Error::Dimension {
                expected: g.dim(),
                got: self.data.len(),
            });
        }
        Ok(())
    }
}

/// `mu^T x + phi^T y`.
pub fn weight_of(g: &ExtendedGraph, z: &SolutionVector) -> f64 {
    let vx: f64 = g.mu.iter().zip(z.x()).map(|(a, b)| a * b).sum();
    let vy: f64 = g.phi.iter().zip(z.y()).map(|(a, b)| a * b).sum();
    vx + vy
}

/// The 0/1 point selecting `arcs`; each vertex is selected iff it has a
/// selected incoming arc, and the root always is.
pub fn solution_from_arcs(g: &ExtendedGraph, arcs: &[usize]) -> SolutionVector {
    let mut z = SolutionVector::zeros(g);
    z.x_mut()[0] = 1.0;
    for &a in arcs {
        z.y_mut()[a] += 1.0;
        let d = g.arc(a).1;
        z.x_mut()[d] += 1.0;
    }
    z
}

/// Which family of constraints an integral point violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintClass {
    Integrality,
    Spanning,
    SingleRootArc,
    Valency,
}

impl fmt::Display for ConstraintClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintClass::Integrality => "integrality",
            ConstraintClass::Spanning => "spanning",
            ConstraintClass::SingleRootArc => "single root arc",
            ConstraintClass::Valency => "valency",
        })
    }
}

/// Checks that `z` is a 0-rooted generalized valency-constrained spanning
/// arborescence of the extended graph.
pub fn check_feasible(g: &ExtendedGraph, z: &SolutionVector) -> std::result::Result<(), (ConstraintClass, String)> {
    if z.check_dim(g).is_err() {
        return Err((ConstraintClass::Integrality, "dimension mismatch".into()));
    }
    let tol = 1e-9;
    if let Some(i) = z.as_slice().iter().position(|&v| v.abs() > tol && (v - 1.0).abs() > tol) {
        return Err((ConstraintClass::Integrality, format!("coordinate {i} is {}", z.as_slice()[i])));
    }
    let on = |v: f64| v > 0.5;
    if !on(z.x()[0]) {
        return Err((ConstraintClass::Spanning, "root vertex not selected".into()));
    }
    // one incoming arc per cluster, vertex/arc consistency
    let mut head_cluster = vec![0usize; g.n() + 1];
    for i in 1..=g.n() {
        let mut count = 0;
        for v in g.cluster(i) {
            let inc = g.incoming(v).iter().filter(|&&a| on(z.y()[a])).count();
            if inc != on(z.x()[v]) as usize {
                return Err((
                    ConstraintClass::Spanning,
                    format!("vertex {} selection disagrees with its incoming arcs", g.vertex_name(v)),
                ));
            }
            for &a in g.incoming(v) {
                if on(z.y()[a]) {
                    head_cluster[i] = g.cluster_of(g.arc(a).0);
                }
            }
            count += inc;
        }
        if count != 1 {
            return Err((ConstraintClass::Spanning, format!("cluster {i} has {count} incoming arcs")));
        }
    }
    for i in 1..=g.n() {
        let mut c = i;
        for _ in 0..=g.n() {
            if c == 0 {
                break;
            }
            c = head_cluster[c];
        }
        if c != 0 {
            return Err((ConstraintClass::Spanning, format!("cluster {i} lies on a cycle")));
        }
    }
    let root_children = (1..g.num_vertices())
        .filter(|&v| !g.is_null(v) && on(z.y()[g.root_arc(v)]))
        .count();
    if root_children != 1 {
        return Err((
            ConstraintClass::SingleRootArc,
            format!("{root_children} root arcs enter non-null vertices"),
        ));
    }
    let gr = g.grammar();
    for v in 1..g.num_vertices() {
        let Label::Tag(tag) = g.label_of(v) else { continue };
        let xv = on(z.x()[v]) as usize;
        for t in 0..gr.num_types() {
            let found = g.outgoing_typed(v, t).iter().filter(|&&a| on(z.y()[a])).count();
            if found != xv * gr.tag_args(tag, t) {
                return Err((
                    ConstraintClass::Valency,
                    format!(
                        "{} has {found} argument(s) of type {}, needs {}",
                        g.vertex_name(v),
                        gr.type_name(t),
                        xv * gr.tag_args(tag, t)
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// An AST together with the graph vertex each of its vertices is anchored on.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredAst {
    pub ast: Ast,
    pub anchors: Vec<usize>,
}

impl AnchoredAst {
    /// Word index of every AST vertex.
    pub fn words(&self, g: &ExtendedGraph) -> Vec<usize> {
        self.anchors.iter().map(|&v| g.cluster_of(v)).collect()
    }
}

/// Reads the program off a feasible integral point.
pub fn solution_to_ast(g: &ExtendedGraph, z: &SolutionVector) -> Result<AnchoredAst> {
    check_feasible(g, z).map_err(|(class, msg)| Error::Infeasible(format!("{class}: {msg}")))?;
    let root_child = (1..g.num_vertices())
        .find(|&v| !g.is_null(v) && z.y()[g.root_arc(v)] > 0.5)
        .expect("feasibility guarantees a root child");
    let mut anchors = Vec::new();
    let mut labels = Vec::new();
    let mut ast_arcs = Vec::new();
    let mut stack = vec![(root_child, None)];
    while let Some((v, head)) = stack.pop() {
        let id = anchors.len();
        anchors.push(v);
        labels.push(g.label_of(v).tag().expect("non-null vertex"));
        if let Some(h) = head {
            ast_arcs.push((h, id));
        }
        let mut kids: Vec<usize> = (0..g.grammar().num_types())
            .flat_map(|t| g.outgoing_typed(v, t).iter().copied())
            .filter(|&a| z.y()[a] > 0.5)
            .collect();
        kids.sort_unstable();
        for &a in kids.iter().rev() {
            stack.push((g.arc(a).1, Some(id)));
        }
    }
    let ast = Ast::from_arcs(labels, &ast_arcs, 0)?;
    Ok(AnchoredAst { ast, anchors })
}

/// The feasible 0/1 point encoding an AST anchored on graph vertices.
pub fn anchored_ast_to_solution(g: &ExtendedGraph, ast: &Ast, anchors: &[usize]) -> Result<SolutionVector> {
    let mut arcs = vec![g.root_arc(anchors[ast.root()])];
    for (h, d) in ast.arcs() {
        let a = g
            .arc_index(anchors[h], anchors[d])
            .ok_or_else(|| Error::Infeasible(format!("no arc between anchors of AST vertices {h} and {d}")))?;
        arcs.push(a);
    }
    let full = extend_solution(g, &arcs)?;
    Ok(solution_from_arcs(g, &full))
}

/// Checks that `arcs` is a generalized 0-rooted arborescence of the core
/// graph (no null vertices, at most one vertex per cluster).
fn check_generalized(g: &ExtendedGraph, arcs: &[usize]) -> Result<()> {
    let mut head_of = HashMap::new();
    let mut chosen = vec![None; g.n() + 1];
    for &a in arcs {
        if a >= g.num_arcs() {
            return Err(Error::Infeasible(format!("arc {a} out of range")));
        }
        let (s, d) = g.arc(a);
        if g.is_null(d) {
            return Err(Error::Infeasible(format!("arc {} enters a null vertex", g.arc_name(a))));
        }
        if head_of.insert(d, s).is_some() {
            return Err(Error::Infeasible(format!("{} has two incoming arcs", g.vertex_name(d))));
        }
        let c = g.cluster_of(d);
        if chosen[c].replace(d).is_some() {
            return Err(Error::Infeasible(format!("cluster {c} is used twice")));
        }
    }
    for &d in head_of.keys() {
        let mut v = d;
        let mut steps = 0;
        while v != 0 {
            v = *head_of.get(&v).ok_or_else(|| {
                Error::Infeasible(format!("{} is used but has no incoming arc", g.vertex_name(v)))
            })?;
            steps += 1;
            if steps > arcs.len() {
                return Err(Error::Infeasible("arcs contain a cycle".into()));
            }
        }
    }
    Ok(())
}

/// Adds `0 -> null(i)` for every cluster untouched by `arcs`.
pub fn extend_solution(g: &ExtendedGraph, arcs: &[usize]) -> Result<Vec<usize>> {
    check_generalized(g, arcs)?;
    let mut covered = vec![false; g.n() + 1];
    for &a in arcs {
        covered[g.cluster_of(g.arc(a).1)] = true;
    }
    let mut out = arcs.to_vec();
    for (i, &c) in covered.iter().enumerate().skip(1) {
        if !c {
            out.push(g.root_arc(g.null_vertex(i)));
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Drops every arc entering a null vertex.
pub fn restrict_solution(g: &ExtendedGraph, arcs: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = arcs.iter().copied().filter(|&a| !g.is_null(g.arc(a).1)).collect();
    out.sort_unstable();
    out
}
