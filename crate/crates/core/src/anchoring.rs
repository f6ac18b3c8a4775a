//! Alignment of a known AST onto the graph of its sentence.
//!
//! Finding the best anchoring with at most one AST vertex per word is
//! NP-hard. Dropping the per-word constraint leaves a tree-shaped dynamic
//! program over (AST vertex, graph vertex) pairs, which serves as the linear
//! maximization oracle of the relaxed problem. Fractional solutions are
//! turned back into proper anchorings with the Hungarian algorithm.

use crate::error::{Error, Result};
use crate::grammar::Ast;
use crate::graph::{ExtendedGraph, Label, SolutionVector};

/// Map from AST vertex to graph vertex.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Alignment {
    pub assign: Vec<usize>,
}

impl Alignment {
    /// Word (cluster) of every AST vertex.
    pub fn words(&self, g: &ExtendedGraph) -> Vec<usize> {
        self.assign.iter().map(|&v| g.cluster_of(v)).collect()
    }

    /// At most one AST vertex per cluster.
    pub fn is_injective(&self, g: &ExtendedGraph) -> bool {
        let mut seen = vec![false; g.n() + 1];
        self.assign
            .iter()
            .all(|&v| !std::mem::replace(&mut seen[g.cluster_of(v)], true))
    }

    /// `astVertexIndex:wordIndex` pairs, space separated.
    pub fn to_pairs(&self, g: &ExtendedGraph) -> String {
        self.words(g)
            .iter()
            .enumerate()
            .map(|(u, w)| format!("{u}:{w}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Objective value of an alignment: anchored vertex scores, the root arc into
/// the anchor of the AST root, and one arc score per AST arc. `None` when an
/// AST arc would join two vertices of the same cluster.
pub fn alignment_score(g: &ExtendedGraph, ast: &Ast, al: &Alignment, psi: &SolutionVector) -> Option<f64> {
    let mut s = psi.y()[g.root_arc(al.assign[ast.root()])];
    for u in 0..ast.len() {
        s += psi.x()[al.assign[u]];
    }
    for (h, d) in ast.arcs() {
        s += psi.y()[g.arc_index(al.assign[h], al.assign[d])?];
    }
    Some(s)
}

/// Dynamic-programming chart over (AST vertex, word).
///
/// Every AST vertex can only sit on the single vertex of a cluster carrying
/// its label, so the graph-vertex axis is indexed by word.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentChart {
    n: usize,
    // chart[u * n + (i - 1)]
    chart: Vec<f64>,
    // back[u][(i - 1) * k + c]: word of the c-th child of u when u sits on i
    back: Vec<Vec<usize>>,
}

impl AlignmentChart {
    pub fn value(&self, u: usize, word: usize) -> f64 {
        self.chart[u * self.n + word - 1]
    }
}

/// Best unconstrained alignment value, and the chart that produced it.
pub fn dp_align(g: &ExtendedGraph, ast: &Ast, psi: &SolutionVector) -> Result<(f64, AlignmentChart)> {
    let n = g.n();
    let ntags = g.grammar().num_tags();
    if let Some(&bad) = ast.labels().iter().find(|&&t| t >= ntags) {
        return Err(Error::UnknownTag(format!("#{bad}")));
    }
    let m = ast.len();
    let mut chart = vec![f64::NEG_INFINITY; m * n];
    let mut back = vec![Vec::new(); m];
    let (px, py) = (psi.x(), psi.y());
    for u in ast.postorder() {
        let kids = ast.children(u);
        let k = kids.len();
        let mut bp = vec![0usize; n * k];
        let lu = Label::Tag(ast.label(u));
        for i in 1..=n {
            let src = g.vertex(i, lu);
            let mut total = px[src];
            for (c, &v) in kids.iter().enumerate() {
                let lv = Label::Tag(ast.label(v));
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for j in (1..=n).filter(|&j| j != i) {
                    let dst = g.vertex(j, lv);
                    let a = g.arc_index(src, dst).expect("inter-cluster arc");
                    let s = chart[v * n + j - 1] + py[a];
                    if s > best {
                        best = s;
                        arg = j;
                    }
                }
                total += best;
                bp[(i - 1) * k + c] = arg;
            }
            chart[u * n + i - 1] = total;
        }
        back[u] = bp;
    }
    let r = ast.root();
    let value = (1..=n)
        .map(|i| chart[r * n + i - 1] + py[g.root_arc(g.vertex(i, Label::Tag(ast.label(r))))])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((value, AlignmentChart { n, chart, back }))
}

/// Follows back-pointers from the best root placement.
pub fn backtrack(g: &ExtendedGraph, ast: &Ast, chart: &AlignmentChart, psi: &SolutionVector) -> Alignment {
    let n = chart.n;
    let r = ast.root();
    let lr = Label::Tag(ast.label(r));
    let mut best = f64::NEG_INFINITY;
    let mut root_word = 1;
    for i in 1..=n {
        let s = chart.value(r, i) + psi.y()[g.root_arc(g.vertex(i, lr))];
        if s > best {
            best = s;
            root_word = i;
        }
    }
    let mut word = vec![0usize; ast.len()];
    word[r] = root_word;
    for u in ast.preorder() {
        let kids = ast.children(u);
        let k = kids.len();
        for (c, &v) in kids.iter().enumerate() {
            word[v] = chart.back[u][(word[u] - 1) * k + c];
        }
    }
    Alignment {
        assign: (0..ast.len()).map(|u| g.vertex(word[u], Label::Tag(ast.label(u)))).collect(),
    }
}

/// Count vector of an alignment: `x_v` counts AST vertices placed on `v`,
/// `y_a` counts AST arcs realized by `a`, plus the root arc.
pub fn alignment_vector(g: &ExtendedGraph, ast: &Ast, al: &Alignment) -> Result<SolutionVector> {
    let mut z = SolutionVector::zeros(g);
    z.y_mut()[g.root_arc(al.assign[ast.root()])] += 1.0;
    for u in 0..ast.len() {
        z.x_mut()[al.assign[u]] += 1.0;
    }
    for (h, d) in ast.arcs() {
        let a = g
            .arc_index(al.assign[h], al.assign[d])
            .ok_or_else(|| Error::Infeasible(format!("AST arc {h}->{d} stays inside one word")))?;
        z.y_mut()[a] += 1.0;
    }
    Ok(z)
}

/// Linear maximization oracle over the relaxed alignment set.
pub fn lmo_align(g: &ExtendedGraph, ast: &Ast, psi: &SolutionVector) -> Result<SolutionVector> {
    let (value, chart) = dp_align(g, ast, psi)?;
    if value == f64::NEG_INFINITY {
        return Err(Error::Infeasible("the AST does not fit on the sentence".into()));
    }
    let al = backtrack(g, ast, &chart, psi);
    alignment_vector(g, ast, &al)
}

/// Maximum-weight assignment of rows to distinct columns (`rows <= cols`).
///
/// `None` entries are forbidden pairs. Returns the column of every row, or
/// `None` when no complete assignment avoids forbidden pairs.
pub fn max_weight_assignment(cost: &[Vec<Option<f64>>]) -> Option<Vec<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Some(Vec::new());
    }
    let cols = cost[0].len();
    if rows > cols {
        return None;
    }
    // Forbidden pairs get a penalty large enough that any assignment using
    // one is worse than every assignment avoiding them.
    let finite_max = cost
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, &c| m.max(c.abs()));
    let big = (finite_max + 1.0) * (rows as f64 + 1.0) * 4.0;
    // Shortest augmenting path Hungarian algorithm on a min-cost matrix,
    // rows padded to a square with zero-cost dummies.
    let n = cols;
    let c = |i: usize, j: usize| -> f64 {
        if i < rows {
            match cost[i][j] {
                Some(v) => -v,
                None => big,
            }
        } else {
            0.0
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows {
            out[p[j] - 1] = j - 1;
        }
    }
    if out.iter().enumerate().any(|(i, &j)| cost[i][j].is_none()) {
        return None;
    }
    Some(out)
}

/// Rounds a fractional point to an injective alignment.
///
/// The profit of placing AST vertex `u` on word `i` is the fractional mass
/// `x` of the cluster-`i` vertex carrying `u`'s label.
pub fn hungarian_round(g: &ExtendedGraph, ast: &Ast, z: &SolutionVector) -> Result<Alignment> {
    let n = g.n();
    if ast.len() > n {
        return Err(Error::Infeasible(format!(
            "{} AST vertices cannot be anchored on {} words",
            ast.len(),
            n
        )));
    }
    let cost: Vec<Vec<Option<f64>>> = (0..ast.len())
        .map(|u| {
            let l = Label::Tag(ast.label(u));
            (1..=n).map(|i| Some(z.x()[g.vertex(i, l)])).collect()
        })
        .collect();
    let cols = max_weight_assignment(&cost).ok_or_else(|| Error::Infeasible("no injective anchoring".into()))?;
    Ok(Alignment {
        assign: (0..ast.len())
            .map(|u| g.vertex(cols[u] + 1, Label::Tag(ast.label(u))))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{parse_grammar, parse_program};
    use crate::graph::{build_graph, tests::toy_graph, ZeroWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn permutations(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n, k - 1) {
            for j in 0..n {
                if !p.contains(&j) {
                    let mut q = p.clone();
                    q.push(j);
                    out.push(q);
                }
            }
        }
        out
    }

    #[test]
    fn single_vertex() {
        let gr = Arc::new(parse_grammar("type e\ntag A e").unwrap());
        let mut g = build_graph(1, gr.clone(), &ZeroWeights);
        g.mu[1] = 2.0;
        g.phi[0] = 1.0;
        let ast = parse_program("A", &gr).unwrap();
        let (value, chart) = dp_align(&g, &ast, &g.weights()).unwrap();
        assert_eq!(value, 3.0);
        let al = backtrack(&g, &ast, &chart, &g.weights());
        assert_eq!(al.assign, vec![1]);
        let z = lmo_align(&g, &ast, &g.weights()).unwrap();
        assert_eq!(z.x().iter().sum::<f64>(), 1.0);
        assert_eq!(z.x()[1], 1.0);
        assert_eq!(z.y().iter().sum::<f64>(), 1.0);
        assert_eq!(z.y()[0], 1.0);
    }

    #[test]
    fn two_vertices_against_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = toy_graph(2);
        let ast = parse_program("P(A)", g.grammar()).unwrap();
        for _ in 0..20 {
            g.mu.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
            g.phi.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
            let psi = g.weights();
            let mut best = f64::NEG_INFINITY;
            for i in 1..=2 {
                for j in 1..=2 {
                    let al = Alignment {
                        assign: vec![g.vertex(i, Label::Tag(1)), g.vertex(j, Label::Tag(0))],
                    };
                    if let Some(s) = alignment_score(&g, &ast, &al, &psi) {
                        best = best.max(s);
                    }
                }
            }
            let (value, chart) = dp_align(&g, &ast, &psi).unwrap();
            assert!((value - best).abs() < 1e-12);
            let al = backtrack(&g, &ast, &chart, &psi);
            assert!((alignment_score(&g, &ast, &al, &psi).unwrap() - value).abs() < 1e-12);
        }
    }

    #[test]
    fn unconstrained_dp_reuses_vertices() {
        let gr = Arc::new(parse_grammar("type e\ntag A e\ntag P e e=2").unwrap());
        let mut g = build_graph(3, gr.clone(), &ZeroWeights);
        let ast = parse_program("P(A,A)", &gr).unwrap();
        let a3 = g.vertex(3, Label::Tag(0));
        g.mu[a3] = 5.0;
        let z = lmo_align(&g, &ast, &g.weights()).unwrap();
        assert_eq!(z.x()[a3], 2.0);
    }

    #[test]
    fn rounding_identity_on_integral_points() {
        let gr = Arc::new(parse_grammar("type e\ntag A e\ntag P e e=1").unwrap());
        let g = build_graph(3, gr.clone(), &ZeroWeights);
        let ast = parse_program("P(A)", &gr).unwrap();
        let al = Alignment {
            assign: vec![g.vertex(3, Label::Tag(1)), g.vertex(1, Label::Tag(0))],
        };
        let z = alignment_vector(&g, &ast, &al).unwrap();
        assert_eq!(hungarian_round(&g, &ast, &z).unwrap(), al);
    }

    #[test]
    fn hungarian_small_case() {
        let cost = vec![vec![Some(0.9), Some(0.1)], vec![Some(0.8), Some(0.2)]];
        let cols = max_weight_assignment(&cost).unwrap();
        assert_eq!(cols, vec![0, 1]);
        let total: f64 = cols.iter().enumerate().map(|(i, &j)| cost[i][j].unwrap()).sum();
        assert!((total - 1.1).abs() < 1e-12);
    }

    #[test]
    fn hungarian_forbidden_pairs() {
        let cost = vec![vec![None, Some(0.1)], vec![None, Some(5.0)]];
        assert_eq!(max_weight_assignment(&cost), None);
        let cost = vec![vec![None, Some(0.1), Some(0.0)], vec![None, Some(5.0), None]];
        assert_eq!(max_weight_assignment(&cost), Some(vec![2, 1]));
        assert_eq!(max_weight_assignment(&[vec![Some(1.0)], vec![Some(1.0)]]), None);
    }

    #[test]
    fn hungarian_matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let cols = rng.gen_range(1..=6);
            let rows = rng.gen_range(1..=cols);
            let cost: Vec<Vec<Option<f64>>> = (0..rows)
                .map(|_| (0..cols).map(|_| Some(rng.gen_range(-1.0..1.0))).collect())
                .collect();
            let got = max_weight_assignment(&cost).unwrap();
            let total = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| cost[i][j].unwrap()).sum() };
            let best = permutations(cols, rows).iter().map(|p| total(p)).fold(f64::NEG_INFINITY, f64::max);
            let mut distinct = got.clone();
            distinct.sort();
            distinct.dedup();
            assert_eq!(distinct.len(), rows);
            assert!(total(&got) >= best - 1e-9, "{} < {}", total(&got), best);
        }
    }

    #[test]
    fn rounding_is_injective() {
        let gr = Arc::new(parse_grammar("type e\ntag A e\ntag P e e=2").unwrap());
        let mut g = build_graph(3, gr.clone(), &ZeroWeights);
        let ast = parse_program("P(A,A)", &gr).unwrap();
        let idx = g.vertex(3, Label::Tag(0));
        g.mu[idx] = 5.0;
        let z = lmo_align(&g, &ast, &g.weights()).unwrap();
        let al = hungarian_round(&g, &ast, &z).unwrap();
        assert!(al.is_injective(&g));
        let too_big = parse_program("P(A,A)", &gr).unwrap();
        let g2 = build_graph(2, gr, &ZeroWeights);
        assert!(hungarian_round(&g2, &too_big, &SolutionVector::zeros(&g2)).is_err());
    }

    #[test]
    fn single_word_cannot_hold_an_arc() {
        let gr = Arc::new(parse_grammar("type e\ntag A e\ntag P e e=1").unwrap());
        let g = build_graph(1, gr.clone(), &ZeroWeights);
        let ast = parse_program("P(A)", &gr).unwrap();
        assert_eq!(dp_align(&g, &ast, &g.weights()).unwrap().0, f64::NEG_INFINITY);
        assert!(lmo_align(&g, &ast, &g.weights()).is_err());
    }
}
