//! Brute-force references for tiny instances.
//!
//! Every feasible structure is built top-down: pick the root child, then fill
//! the valency slots of each placed vertex (in FIFO order) with sets of unused
//! words, and finally send every untouched word to its null vertex. Child sets
//! are chosen as increasing word combinations, so each structure comes out
//! exactly once.

use std::collections::VecDeque;
use std::ops::ControlFlow;

use crate::anchoring::Alignment;
use crate::error::{Error, Result};
use crate::grammar::Ast;
use crate::graph::{solution_from_arcs, ExtendedGraph, Label, SolutionVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_len: usize,
    pub max_tags: usize,
    pub max_structures: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget {
            max_len: 4,
            max_tags: 3,
            max_structures: 1_000_000,
        }
    }
}

impl EnumerationBudget {
    fn check_graph(&self, g: &ExtendedGraph) -> Result<()> {
        if g.n() > self.max_len {
            return Err(Error::Budget(format!("sentence length {} > {}", g.n(), self.max_len)));
        }
        if g.grammar().num_tags() > self.max_tags {
            return Err(Error::Budget(format!(
                "{} tags > {}",
                g.grammar().num_tags(),
                self.max_tags
            )));
        }
        Ok(())
    }
}

struct Enumerator<'a, F> {
    g: &'a ExtendedGraph,
    used: Vec<bool>,
    arcs: Vec<usize>,
    pending: VecDeque<(usize, usize, usize)>,
    // tags of every type
    by_type: Vec<Vec<usize>>,
    count: usize,
    limit: usize,
    visit: F,
}

impl<F: FnMut(&[usize]) -> ControlFlow<()>> Enumerator<'_, F> {
    fn place(&mut self, v: usize) {
        let gr = self.g.grammar();
        let tag = self.g.label_of(v).tag().expect("tag vertex");
        for t in 0..gr.num_types() {
            let c = gr.tag_args(tag, t);
            if c > 0 {
                self.pending.push_back((v, t, c));
            }
        }
    }

    fn slots(&mut self) -> Result<ControlFlow<()>> {
        let Some((u, t, c)) = self.pending.pop_front() else {
            return self.emit();
        };
        let free: Vec<usize> = (1..=self.g.n())
            .filter(|&i| !self.used[i] && i != self.g.cluster_of(u))
            .collect();
        let mut flow = ControlFlow::Continue(());
        let mut combo = Vec::with_capacity(c);
        if free.len() >= c {
            flow = self.choose(u, t, c, &free, 0, &mut combo)?;
        }
        self.pending.push_front((u, t, c));
        Ok(flow)
    }

    fn choose(
        &mut self,
        u: usize,
        t: usize,
        c: usize,
        free: &[usize],
        start: usize,
        combo: &mut Vec<usize>,
    ) -> Result<ControlFlow<()>> {
        if combo.len() == c {
            return self.label_children(u, t, combo, 0);
        }
        for k in start..free.len() {
            if free.len() - k < c - combo.len() {
                break;
            }
            combo.push(free[k]);
            let flow = self.choose(u, t, c, free, k + 1, combo)?;
            combo.pop();
            if flow.is_break() {
                return Ok(flow);
            }
        }
        Ok(ControlFlow::Continue(()))
    }

    fn label_children(&mut self, u: usize, t: usize, combo: &[usize], k: usize) -> Result<ControlFlow<()>> {
        if k == combo.len() {
            let before = self.pending.len();
            for &i in combo {
                let v = self.g.vertex(i, Label::Tag(self.arc_tag(i)));
                self.place(v);
            }
            let flow = self.slots()?;
            self.pending.truncate(before);
            return Ok(flow);
        }
        let i = combo[k];
        for ti in 0..self.by_type[t].len() {
            let tag = self.by_type[t][ti];
            let v = self.g.vertex(i, Label::Tag(tag));
            let a = self.g.arc_index(u, v).expect("inter-cluster arc");
            self.used[i] = true;
            self.arcs.push(a);
            let flow = self.label_children(u, t, combo, k + 1)?;
            self.arcs.pop();
            self.used[i] = false;
            if flow.is_break() {
                return Ok(flow);
            }
        }
        Ok(ControlFlow::Continue(()))
    }

    // Tag chosen for cluster `i` by the most recent arc entering it.
    fn arc_tag(&self, i: usize) -> usize {
        let a = *self
            .arcs
            .iter()
            .rev()
            .find(|&&a| self.g.cluster_of(self.g.arc(a).1) == i)
            .expect("cluster has an arc");
        self.g.label_of(self.g.arc(a).1).tag().expect("tag vertex")
    }

    fn emit(&mut self) -> Result<ControlFlow<()>> {
        self.count += 1;
        if self.count > self.limit {
            return Err(Error::Budget(format!("more than {} structures", self.limit)));
        }
        let mut arcs = self.arcs.clone();
        for i in 1..=self.g.n() {
            if !self.used[i] {
                arcs.push(self.g.root_arc(self.g.null_vertex(i)));
            }
        }
        arcs.sort_unstable();
        Ok((self.visit)(&arcs))
    }
}

/// Calls `visit` on the sorted arc list of every feasible structure; returns
/// how many were visited.
pub fn for_each_feasible<F>(g: &ExtendedGraph, budget: &EnumerationBudget, visit: F) -> Result<usize>
where
    F: FnMut(&[usize]) -> ControlFlow<()>,
{
    budget.check_graph(g)?;
    let gr = g.grammar();
    let mut by_type = vec![Vec::new(); gr.num_types()];
    for tag in 0..gr.num_tags() {
        by_type[gr.tag_type(tag)].push(tag);
    }
    let mut e = Enumerator {
        g,
        used: vec![false; g.n() + 1],
        arcs: Vec::new(),
        pending: VecDeque::new(),
        by_type,
        count: 0,
        limit: budget.max_structures,
        visit,
    };
    'outer: for i in 1..=g.n() {
        for tag in 0..gr.num_tags() {
            let v = g.vertex(i, Label::Tag(tag));
            e.used[i] = true;
            e.arcs.push(g.root_arc(v));
            e.place(v);
            let flow = e.slots()?;
            e.pending.clear();
            e.arcs.pop();
            e.used[i] = false;
            if flow.is_break() {
                break 'outer;
            }
        }
    }
    Ok(e.count)
}

/// All feasible integral points.
pub fn enumerate_feasible(g: &ExtendedGraph, budget: &EnumerationBudget) -> Result<Vec<SolutionVector>> {
    let mut out = Vec::new();
    for_each_feasible(g, budget, |arcs| {
        out.push(solution_from_arcs(g, arcs));
        ControlFlow::Continue(())
    })?;
    Ok(out)
}

fn arcs_weight(g: &ExtendedGraph, arcs: &[usize]) -> f64 {
    arcs.iter().map(|&a| g.phi[a] + g.mu[g.arc(a).1]).sum()
}

/// Best feasible point; ties go to the lexicographically smallest arc list.
pub fn exact_map(g: &ExtendedGraph, budget: &EnumerationBudget) -> Result<Option<(f64, SolutionVector)>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_feasible(g, budget, |arcs| {
        let w = arcs_weight(g, arcs);
        let better = match &best {
            None => true,
            Some((bw, ba)) => w > *bw || (w == *bw && arcs < ba.as_slice()),
        };
        if better {
            best = Some((w, arcs.to_vec()));
        }
        ControlFlow::Continue(())
    })?;
    Ok(best.map(|(w, arcs)| (w, solution_from_arcs(g, &arcs))))
}

/// `log sum exp(weight)` over all feasible points.
pub fn exact_log_partition(g: &ExtendedGraph, budget: &EnumerationBudget) -> Result<f64> {
    let mut weights = Vec::new();
    for_each_feasible(g, budget, |arcs| {
        weights.push(arcs_weight(g, arcs));
        ControlFlow::Continue(())
    })?;
    Ok(log_sum_exp(&weights))
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// All label-compatible placements of the AST vertices on words; the
/// constrained variant keeps only those using each word at most once.
///
/// Placements putting an AST arc inside a single word are kept in the
/// unconstrained stream; they have no arc and therefore no score.
pub fn enumerate_alignments(
    g: &ExtendedGraph,
    ast: &Ast,
    constrained: bool,
    budget: &EnumerationBudget,
) -> Result<Vec<Alignment>> {
    if g.n() > budget.max_len.max(5) {
        return Err(Error::Budget(format!("sentence length {} too long", g.n())));
    }
    let total = (g.n() as f64).powi(ast.len() as i32);
    if !constrained && total > budget.max_structures as f64 {
        return Err(Error::Budget(format!("{total} alignments > {}", budget.max_structures)));
    }
    let mut out = Vec::new();
    let mut words = vec![1usize; ast.len()];
    if ast.is_empty() {
        return Ok(out);
    }
    loop {
        let ok = !constrained || {
            let mut seen = vec![false; g.n() + 1];
            words.iter().all(|&w| !std::mem::replace(&mut seen[w], true))
        };
        if ok {
            if out.len() >= budget.max_structures {
                return Err(Error::Budget(format!("more than {} alignments", budget.max_structures)));
            }
            out.push(Alignment {
                assign: (0..ast.len())
                    .map(|u| g.vertex(words[u], Label::Tag(ast.label(u))))
                    .collect(),
            });
        }
        // odometer increment, last vertex fastest
        let mut k = ast.len();
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            if words[k] < g.n() {
                words[k] += 1;
                break;
            }
            words[k] = 1;
        }
    }
}
