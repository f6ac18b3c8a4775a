//! Smoothed conditional gradient for MAP decoding and latent anchoring.
//!
//! Both problems have the form `max theta^T z` over the convex hull of an
//! easy combinatorial set, subject to extra linear constraints `Az = b`
//! (decoding) or `Az <= b` (anchoring). The extra constraints are replaced by
//! the quadratic penalty `||Az - b||^2 / 2beta` (resp. its clipped
//! counterpart `||[Az - b]_+||^2 / 2beta`) and the resulting smooth concave
//! objective is maximized with Frank-Wolfe steps, `beta` shrinking as
//! `beta0 / sqrt(k + 1)`.

use std::collections::VecDeque;
use std::fmt;

use crate::anchoring::{alignment_vector, hungarian_round, lmo_align, Alignment};
use crate::arborescence::{arborescence_weight, lmo_sa, msa, ContractedGraph};
use crate::error::{Error, Result};
use crate::grammar::Ast;
use crate::graph::{check_feasible, solution_from_arcs, weight_of, ExtendedGraph, Label, SolutionVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Equality,
    Inequality,
}

/// Sparse linear constraints over the concatenated `(x, y)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
    pub kind: ConstraintKind,
    pub dim: usize,
}

impl ConstraintSystem {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, c)| c * z[j]).sum())
            .collect()
    }

    /// `Az - b`, clipped at zero for inequality systems.
    pub fn residual(&self, z: &[f64]) -> Vec<f64> {
        let mut r = self.apply(z);
        for (ri, bi) in r.iter_mut().zip(&self.rhs) {
            *ri -= bi;
            if self.kind == ConstraintKind::Inequality {
                *ri = ri.max(0.0);
            }
        }
        r
    }

    /// `A^T r`
    pub fn transpose_apply(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, &ri) in self.rows.iter().zip(r) {
            if ri != 0.0 {
                for &(j, c) in row {
                    out[j] += c * ri;
                }
            }
        }
        out
    }
}

/// Equality rows of MAP decoding: a single root arc into a non-null vertex,
/// and for every tag vertex `u` and type `t`, as many outgoing arcs of type
/// `t` as the valency of `u`'s tag requires when `u` is selected.
pub fn build_ilp1_constraints(g: &ExtendedGraph) -> ConstraintSystem {
    let nx = g.num_vertices();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let root_row: Vec<(usize, f64)> = (1..nx)
        .filter(|&v| !g.is_null(v))
        .map(|v| (nx + g.root_arc(v), 1.0))
        .collect();
    rows.push(root_row);
    rhs.push(1.0);
    let gr = g.grammar();
    for u in 1..nx {
        let Label::Tag(tag) = g.label_of(u) else { continue };
        for t in 0..gr.num_types() {
            let mut row: Vec<(usize, f64)> = g.outgoing_typed(u, t).iter().map(|&a| (nx + a, 1.0)).collect();
            let f = gr.tag_args(tag, t);
            if f > 0 {
                row.push((u, -(f as f64)));
            }
            if !row.is_empty() {
                rows.push(row);
                rhs.push(0.0);
            }
        }
    }
    ConstraintSystem {
        rows,
        rhs,
        kind: ConstraintKind::Equality,
        dim: g.dim(),
    }
}

/// Inequality rows of latent anchoring: at most one anchored vertex per word.
pub fn build_ilp2_constraints(g: &ExtendedGraph) -> ConstraintSystem {
    let rows = (1..=g.n())
        .map(|i| g.cluster(i).filter(|&v| !g.is_null(v)).map(|v| (v, 1.0)).collect())
        .collect();
    ConstraintSystem {
        rows,
        rhs: vec![1.0; g.n()],
        kind: ConstraintKind::Inequality,
        dim: g.dim(),
    }
}

/// Smoothed indicator of the constraint set and its gradient in `z`.
pub fn penalty_value_grad(cs: &ConstraintSystem, z: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let r = cs.residual(z);
    let value = r.iter().map(|v| v * v).sum::<f64>() / (2.0 * beta);
    let mut grad = cs.transpose_apply(&r);
    grad.iter_mut().for_each(|v| *v /= beta);
    (value, grad)
}

/// `theta^T z - penalty(z)`.
pub fn smoothed_objective(theta: &SolutionVector, cs: &ConstraintSystem, z: &SolutionVector, beta: f64) -> f64 {
    let r = cs.residual(z.as_slice());
    theta.dot(z) - r.iter().map(|v| v * v).sum::<f64>() / (2.0 * beta)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact line search along `d` for the equality-smoothed objective.
pub fn step_size_equality(
    theta: &SolutionVector,
    cs: &ConstraintSystem,
    z: &SolutionVector,
    d: &SolutionVector,
    beta: f64,
) -> f64 {
    let ad = cs.apply(d.as_slice());
    let az = cs.apply(z.as_slice());
    let td = theta.dot(d);
    let norm2 = dot(&ad, &ad);
    if norm2 == 0.0 {
        return if td > 0.0 { 1.0 } else { 0.0 };
    }
    let gamma = (beta * td + dot(&ad, &cs.rhs) - dot(&ad, &az)) / norm2;
    gamma.clamp(0.0, 1.0)
}

/// Line search along `d` for the inequality-smoothed objective, by bisection
/// on the derivative.
pub fn step_size_inequality(
    theta: &SolutionVector,
    cs: &ConstraintSystem,
    z: &SolutionVector,
    d: &SolutionVector,
    beta: f64,
    iters: usize,
) -> f64 {
    let ad = cs.apply(d.as_slice());
    let az = cs.apply(z.as_slice());
    let td = theta.dot(d);
    let slope = |gamma: f64| -> f64 {
        let mut s = 0.0;
        for ((&a, &b), &bi) in ad.iter().zip(&az).zip(&cs.rhs) {
            let r = b + gamma * a - bi;
            if r > 0.0 {
                s += a * r;
            }
        }
        td - s / beta
    };
    if slope(0.0) <= 0.0 {
        return 0.0;
    }
    if slope(1.0) >= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    // The slope is non-negative on [0, lo], so lo never decreases the
    // objective; the midpoint may overshoot a very short optimal step.
    let value = |gamma: f64| -> f64 {
        let pen: f64 = ad
            .iter()
            .zip(&az)
            .zip(&cs.rhs)
            .map(|((&a, &b), &bi)| (b + gamma * a - bi).max(0.0).powi(2))
            .sum();
        gamma * td - pen / (2.0 * beta)
    };
    if value(mid) >= value(0.0) {
        mid
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub beta0: f64,
    pub max_iters: usize,
    pub eps: f64,
    pub bisection_iters: usize,
    /// Support threshold for the rounding step.
    pub support_tol: f64,
    /// Keep `beta = beta0` for every iteration.
    pub freeze_beta: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            beta0: 1.0,
            max_iters: 500,
            eps: 1e-6,
            bisection_iters: 10,
            support_tol: 1e-6,
            freeze_beta: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0) || self.max_iters == 0 || !(self.eps >= 0.0) {
            return Err(Error::Infeasible(format!(
                "invalid solver configuration: beta0={} max_iters={} eps={}",
                self.beta0, self.max_iters, self.eps
            )));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        if self.freeze_beta {
            self.beta0
        } else {
            self.beta0 / ((k + 1) as f64).sqrt()
        }
    }
}

/// One line of solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub beta: f64,
    pub objective: f64,
    pub gap: f64,
    pub step: f64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} beta={:.6e} objective={:.9e} gap={:.6e} step={:.6e}",
            self.iteration, self.beta, self.objective, self.gap, self.step
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub z_fractional: SolutionVector,
    pub dual_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
    pub z_integral: Option<SolutionVector>,
    pub integral_feasible: bool,
}

/// Frank-Wolfe on `theta^T z - penalty(z)` starting from `lmo(theta)`.
///
/// At most `max_iters` steps are taken; the gap is evaluated once more at
/// the final point.
pub fn conditional_gradient<F>(mut lmo: F, theta: &SolutionVector, cs: &ConstraintSystem, cfg: &SolverConfig) -> Result<SolveResult>
where
    F: FnMut(&SolutionVector) -> Result<SolutionVector>,
{
    cfg.validate()?;
    let mut z = lmo(theta)?;
    let mut trace = Vec::new();
    let mut grad = theta.clone();
    for k in 0..=cfg.max_iters {
        let beta = cfg.beta(k);
        let (pen, pen_grad) = penalty_value_grad(cs, z.as_slice(), beta);
        for ((g, &t), &p) in grad.as_mut_slice().iter_mut().zip(theta.as_slice()).zip(&pen_grad) {
            *g = t - p;
        }
        let s = lmo(&grad)?;
        let d = s.sub(&z);
        let gap = grad.dot(&d);
        let objective = theta.dot(&z) - pen;
        if gap <= cfg.eps || k == cfg.max_iters {
            trace.push(TraceRecord {
                iteration: k,
                beta,
                objective,
                gap,
                step: 0.0,
            });
            return Ok(SolveResult {
                z_fractional: z,
                dual_gap: gap,
                iterations: k,
                converged: gap <= cfg.eps,
                trace,
                z_integral: None,
                integral_feasible: false,
            });
        }
        let gamma = match cs.kind {
            ConstraintKind::Equality => step_size_equality(theta, cs, &z, &d, beta),
            ConstraintKind::Inequality => step_size_inequality(theta, cs, &z, &d, beta, cfg.bisection_iters),
        };
        trace.push(TraceRecord {
            iteration: k,
            beta,
            objective,
            gap,
            step: gamma,
        });
        z.add_scaled(gamma, &d);
    }
    unreachable!("the loop returns at k == max_iters")
}

/// The smoothed relaxation alone: `z_integral` is left empty.
pub fn map_relaxation(g: &ExtendedGraph, cfg: &SolverConfig) -> Result<SolveResult> {
    let cs = build_ilp1_constraints(g);
    conditional_gradient(|psi| Ok(lmo_sa(g, psi)), &g.weights(), &cs, cfg)
}

/// MAP decoding: smoothed conditional gradient over generalized spanning
/// arborescences, then rounding when the relaxed point is not a feasible
/// integral solution.
pub fn map_inference(g: &ExtendedGraph, cfg: &SolverConfig) -> Result<SolveResult> {
    let cs = build_ilp1_constraints(g);
    let mut res = map_relaxation(g, cfg)?;
    let zf = &res.z_fractional;
    if zf.is_integral(1e-9) && check_feasible(g, &zf.rounded()).is_ok() {
        res.z_integral = Some(zf.rounded());
    } else {
        let beta = cfg.beta(res.iterations);
        let l: Vec<f64> = cs.residual(zf.as_slice()).iter().map(|r| r / beta).collect();
        res.z_integral = round_support_with(g, zf, cfg.support_tol, Some(&l));
    }
    res.integral_feasible = res.z_integral.as_ref().is_some_and(|z| check_feasible(g, z).is_ok());
    Ok(res)
}

/// Exact decoding restricted to the arcs carrying fractional mass above
/// `tau`. The threshold is halved while the restricted problem is infeasible;
/// once no smaller positive mass remains the whole graph is searched.
pub fn round_support(g: &ExtendedGraph, z: &SolutionVector, tau: f64) -> Option<SolutionVector> {
    round_support_with(g, z, tau, None)
}

/// As [`round_support`], with starting multipliers for the search bound
/// (one per row of the decoding constraints).
pub fn round_support_with(
    g: &ExtendedGraph,
    z: &SolutionVector,
    tau: f64,
    multipliers: Option<&[f64]>,
) -> Option<SolutionVector> {
    let cs = build_ilp1_constraints(g);
    let solve = |allowed: &[bool]| {
        if g.n() <= SUBSET_DP_MAX_WORDS {
            return subset_dp(g, allowed).map(|arcs| solution_from_arcs(g, &arcs));
        }
        let lagr = Lagrangian::fit(g, &cs, allowed, multipliers);
        branch_and_bound(g, allowed, lagr.as_ref()).map(|arcs| solution_from_arcs(g, &arcs))
    };
    let mut tau = tau;
    let mut last_support = usize::MAX;
    loop {
        let allowed: Vec<bool> = z.y().iter().map(|&m| m > tau).collect();
        let size = allowed.iter().filter(|&&b| b).count();
        if size != last_support {
            if let Some(r) = solve(&allowed) {
                return Some(r);
            }
            last_support = size;
        }
        let smaller = z.y().iter().any(|&m| m > 0.0 && m <= tau);
        if !smaller || tau < f64::MIN_POSITIVE {
            break;
        }
        tau /= 2.0;
    }
    solve(&vec![true; g.num_arcs()])
}

/// Decoding weights with the constraint rows moved into the objective:
/// for any multipliers `l`, `theta^T z = (theta - A^T l)^T z + l^T b` on every
/// feasible `z`, so a maximum spanning arborescence under the adjusted
/// weights bounds every feasible completion.
struct Lagrangian {
    adjusted: SolutionVector,
    offset: f64,
}

impl Lagrangian {
    const ITERS: usize = 60;

    fn with(g: &ExtendedGraph, cs: &ConstraintSystem, l: &[f64]) -> Self {
        let mut adjusted = g.weights();
        for (w, p) in adjusted.as_mut_slice().iter_mut().zip(cs.transpose_apply(l)) {
            *w -= p;
        }
        Lagrangian {
            adjusted,
            offset: dot(l, &cs.rhs),
        }
    }

    /// Subgradient descent on the dual over the allowed arcs, keeping the
    /// tightest multipliers seen. `None` when no arborescence exists.
    fn fit(g: &ExtendedGraph, cs: &ConstraintSystem, allowed: &[bool], start: Option<&[f64]>) -> Option<Self> {
        let mut l = match start {
            Some(s) if s.len() == cs.len() => s.to_vec(),
            _ => vec![0.0; cs.len()],
        };
        let mut best: Option<(f64, Lagrangian)> = None;
        for k in 0..Self::ITERS {
            let lag = Lagrangian::with(g, cs, &l);
            let (value, arcs) = restricted_msa(g, &lag.adjusted, |a| allowed[a])?;
            let bound = value + lag.offset;
            if best.as_ref().is_none_or(|(b, _)| bound < *b) {
                best = Some((bound, lag));
            }
            let z = solution_from_arcs(g, &arcs);
            let mut sub = cs.rhs.clone();
            for (s, az) in sub.iter_mut().zip(cs.apply(z.as_slice())) {
                *s -= az;
            }
            let norm = dot(&sub, &sub).sqrt();
            if norm == 0.0 {
                break;
            }
            let step = 1.0 / (norm * ((k + 1) as f64).sqrt());
            for (li, si) in l.iter_mut().zip(&sub) {
                *li -= step * si;
            }
        }
        best.map(|b| b.1)
    }
}

/// Maximum spanning arborescence of the contracted graph using only arcs
/// accepted by `keep`; returns its weight and arcs.
fn restricted_msa(g: &ExtendedGraph, psi: &SolutionVector, keep: impl Fn(usize) -> bool) -> Option<(f64, Vec<usize>)> {
    let nodes = g.n() + 1;
    let mut w = vec![f64::NEG_INFINITY; nodes * nodes];
    let mut origin = vec![usize::MAX; nodes * nodes];
    for (a, &(s, d)) in g.arcs().iter().enumerate() {
        if !keep(a) {
            continue;
        }
        let cell = g.cluster_of(s) * nodes + g.cluster_of(d);
        let wa = psi.y()[a] + psi.x()[d];
        if origin[cell] == usize::MAX || wa > w[cell] {
            w[cell] = wa;
            origin[cell] = a;
        }
    }
    let cg = ContractedGraph::from_dense(nodes, w);
    let heads = msa(&cg).ok()?;
    let arcs = (1..nodes).map(|d| origin[heads[d].expect("spanning") * nodes + d]).collect();
    Some((arborescence_weight(&cg, &heads), arcs))
}

// Clusters left unused must take their null arc; a missing null arc is
// priced so that no such completion can win.
const MISSING_NULL: f64 = -1e12;

/// Largest sentence decoded by the subset dynamic program; longer ones use
/// the branch-and-bound search.
const SUBSET_DP_MAX_WORDS: usize = 12;

/// Exact decoding over the allowed arcs by dynamic programming over word
/// subsets.
///
/// `best[v][S]` is the largest gain over leaving words null of a subtree
/// rooted at the tag vertex `v` whose descendants lie in the word set `S`.
/// Argument slots are filled one at a time, each taking a disjoint part of
/// `S`, so the cost is `O(3^n)` per slot.
fn subset_dp(g: &ExtendedGraph, allowed: &[bool]) -> Option<Vec<usize>> {
    let n = g.n();
    let gr = g.grammar();
    let full = (1usize << n) - 1;
    let bit = |j: usize| 1usize << (j - 1);
    let mut null_w = vec![0.0; n + 1];
    for i in 1..=n {
        let v = g.null_vertex(i);
        let a = g.root_arc(v);
        null_w[i] = if allowed[a] { g.phi[a] + g.mu[v] } else { MISSING_NULL };
    }
    let gain = |a: usize| {
        let d = g.arc(a).1;
        g.phi[a] + g.mu[d] - null_w[g.cluster_of(d)]
    };

    // per tag vertex: argument slot types, slot tables and their choices
    struct Node {
        slots: Vec<usize>,
        // best[s][S]: slots 0..=s filled from S
        best: Vec<Vec<f64>>,
        split: Vec<Vec<u32>>,
        // reach[t][S]: best child of type t with its subtree in S
        reach: Vec<Vec<f64>>,
        child: Vec<Vec<u32>>,
    }
    let size = full + 1;
    let nodes: Vec<Option<Node>> = (0..g.num_vertices())
        .map(|v| {
            let c = match g.label_of(v) {
                Label::Tag(c) if v != 0 => c,
                _ => return None,
            };
            let slots: Vec<usize> = (0..gr.num_types())
                .flat_map(|t| std::iter::repeat_n(t, gr.tag_args(c, t)))
                .collect();
            let used_types = if slots.is_empty() { 0 } else { gr.num_types() };
            Some(Node {
                best: vec![vec![f64::NEG_INFINITY; size]; slots.len()],
                split: vec![vec![0; size]; slots.len()],
                reach: vec![vec![f64::NEG_INFINITY; size]; used_types],
                child: vec![vec![u32::MAX; size]; used_types],
                slots,
            })
        })
        .collect();
    let mut nodes = nodes;
    let subtree = |nodes: &[Option<Node>], v: usize, s: usize| -> f64 {
        match &nodes[v] {
            Some(node) if node.slots.is_empty() => 0.0,
            Some(node) => node.best[node.slots.len() - 1][s],
            None => f64::NEG_INFINITY,
        }
    };

    let mut order: Vec<usize> = (1..=full).collect();
    order.sort_by_key(|s| (s.count_ones(), *s));
    for &s in &order {
        for u in 1..g.num_vertices() {
            let Some(node) = &nodes[u] else { continue };
            if node.slots.is_empty() || s & bit(g.cluster_of(u)) != 0 {
                continue;
            }
            let mut reach = Vec::with_capacity(node.reach.len());
            for t in 0..node.reach.len() {
                let mut best = (f64::NEG_INFINITY, u32::MAX);
                if node.slots.contains(&t) {
                    for &a in g.outgoing_typed(u, t) {
                        let d = g.arc(a).1;
                        let j = g.cluster_of(d);
                        if !allowed[a] || s & bit(j) == 0 {
                            continue;
                        }
                        let w = gain(a) + subtree(&nodes, d, s & !bit(j));
                        if w > best.0 {
                            best = (w, a as u32);
                        }
                    }
                }
                reach.push(best);
            }
            let node = nodes[u].as_mut().expect("tag vertex");
            for (t, (w, a)) in reach.into_iter().enumerate() {
                node.reach[t][s] = w;
                node.child[t][s] = a;
            }
            node.best[0][s] = node.reach[node.slots[0]][s];
            node.split[0][s] = s as u32;
            for k in 1..node.slots.len() {
                let t = node.slots[k];
                let mut best = (f64::NEG_INFINITY, 0u32);
                let mut part = s;
                while part != 0 {
                    let w = node.reach[t][part] + node.best[k - 1][s & !part];
                    if w > best.0 {
                        best = (w, part as u32);
                    }
                    part = (part - 1) & s;
                }
                node.best[k][s] = best.0;
                node.split[k][s] = best.1;
            }
        }
    }

    let base: f64 = null_w[1..].iter().sum();
    let mut top = (f64::NEG_INFINITY, usize::MAX);
    for v in 1..g.num_vertices() {
        let a = g.root_arc(v);
        if g.is_null(v) || !allowed[a] {
            continue;
        }
        let j = g.cluster_of(v);
        let w = gain(a) + subtree(&nodes, v, full & !bit(j));
        if w > top.0 {
            top = (w, a);
        }
    }
    if base + top.0 <= MISSING_NULL / 2.0 {
        return None;
    }

    let mut arcs = vec![top.1];
    let root_child = g.arc(top.1).1;
    let mut pending = vec![(root_child, full & !bit(g.cluster_of(root_child)))];
    while let Some((u, mut s)) = pending.pop() {
        let node = nodes[u].as_ref().expect("tag vertex");
        for k in (0..node.slots.len()).rev() {
            let part = node.split[k][s] as usize;
            let a = node.child[node.slots[k]][part] as usize;
            let d = g.arc(a).1;
            arcs.push(a);
            pending.push((d, part & !bit(g.cluster_of(d))));
            s &= !part;
        }
    }
    for i in 1..=n {
        if !arcs.iter().any(|&a| g.cluster_of(g.arc(a).1) == i) {
            arcs.push(g.root_arc(g.null_vertex(i)));
        }
    }
    arcs.sort_unstable();
    Some(arcs)
}


struct Search<'a> {
    g: &'a ExtendedGraph,
    allowed: &'a [bool],
    lagr: Option<&'a Lagrangian>,
    // fewest words needed to fill a slot of each type
    min_slot: Vec<usize>,
    // vertex picked in every used cluster
    chosen: Vec<Option<usize>>,
    null_w: Vec<f64>,
    // optimistic gain of a subtree rooted at a vertex of each tag
    subtree: Vec<f64>,
    used: Vec<bool>,
    // open argument slots: (head vertex, type, count, smallest usable word)
    slots: VecDeque<(usize, usize, usize, usize)>,
    stack: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

/// Depth-first branch-and-bound over the trees of the support.
///
/// Trees are grown from the root child by filling argument slots in FIFO
/// order, so every leaf of the search is valency-complete and acyclic. A
/// node's value is the weight gained over leaving the used words null.
fn branch_and_bound(g: &ExtendedGraph, allowed: &[bool], lagr: Option<&Lagrangian>) -> Option<Vec<usize>> {
    let n = g.n();
    let gr = g.grammar();
    let mut null_w = vec![0.0; n + 1];
    for i in 1..=n {
        let v = g.null_vertex(i);
        let a = g.root_arc(v);
        null_w[i] = if allowed[a] { g.phi[a] + g.mu[v] } else { MISSING_NULL };
    }
    // best gain of placing a tag anywhere below the root
    let mut place = vec![f64::NEG_INFINITY; gr.num_tags()];
    for (a, &(s, d)) in g.arcs().iter().enumerate() {
        if s == 0 || !allowed[a] {
            continue;
        }
        if let Label::Tag(c) = g.label_of(d) {
            let w = g.phi[a] + g.mu[d] - null_w[g.cluster_of(d)];
            place[c] = place[c].max(w);
        }
    }
    // subtree[c]: optimistic gain of the descendants of a c-vertex, over
    // subtrees of depth at most n
    let mut subtree: Vec<f64> = (0..gr.num_tags())
        .map(|c| if gr.is_entity_id(c) { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    for _ in 0..n {
        let next: Vec<f64> = (0..gr.num_tags())
            .map(|c| {
                let mut total = 0.0;
                for t in 0..gr.num_types() {
                    let k = gr.tag_args(c, t);
                    if k == 0 {
                        continue;
                    }
                    let best = (0..gr.num_tags())
                        .filter(|&d| gr.tag_type(d) == t)
                        .map(|d| place[d] + subtree[d])
                        .fold(f64::NEG_INFINITY, f64::max);
                    total += k as f64 * best;
                }
                total.max(subtree[c])
            })
            .collect();
        subtree = next;
    }
    // fewest words a subtree of each type can occupy
    let mut min_size = vec![usize::MAX; gr.num_tags()];
    for _ in 0..=n {
        for c in 0..gr.num_tags() {
            let mut size = 1usize;
            for t in 0..gr.num_types() {
                let k = gr.tag_args(c, t);
                if k > 0 {
                    let m = (0..gr.num_tags())
                        .filter(|&d| gr.tag_type(d) == t)
                        .map(|d| min_size[d])
                        .min()
                        .unwrap_or(usize::MAX);
                    size = size.saturating_add(m.saturating_mul(k));
                }
            }
            min_size[c] = size.min(n + 1);
        }
    }
    let min_slot = (0..gr.num_types())
        .map(|t| {
            (0..gr.num_tags())
                .filter(|&d| gr.tag_type(d) == t)
                .map(|d| min_size[d])
                .min()
                .unwrap_or(n + 1)
        })
        .collect();
    let mut s = Search {
        g,
        allowed,
        lagr,
        min_slot,
        chosen: vec![None; n + 1],
        null_w,
        subtree,
        used: vec![false; n + 1],
        slots: VecDeque::new(),
        stack: Vec::new(),
        best: None,
    };
    let base: f64 = s.null_w[1..].iter().sum();
    let mut roots: Vec<(usize, f64)> = (1..g.num_vertices())
        .filter(|&v| !g.is_null(v) && allowed[g.root_arc(v)])
        .map(|v| {
            let a = g.root_arc(v);
            let c = g.label_of(v).tag().expect("tag vertex");
            (v, g.phi[a] + g.mu[v] - s.null_w[g.cluster_of(v)] + s.subtree[c])
        })
        .filter(|&(_, opt)| opt > f64::NEG_INFINITY)
        .collect();
    roots.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (v, _) in roots {
        let a = g.root_arc(v);
        let i = g.cluster_of(v);
        let gain = g.phi[a] + g.mu[v] - s.null_w[i];
        s.used[i] = true;
        s.chosen[i] = Some(v);
        s.stack.push(a);
        s.open(v);
        s.dfs(base + gain);
        s.slots.clear();
        s.stack.pop();
        s.chosen[i] = None;
        s.used[i] = false;
    }
    s.best.map(|(_, mut arcs)| {
        for i in 1..=n {
            if !arcs.iter().any(|&a| g.cluster_of(g.arc(a).1) == i) {
                arcs.push(g.root_arc(g.null_vertex(i)));
            }
        }
        arcs.sort_unstable();
        arcs
    })
}

impl Search<'_> {
    fn open(&mut self, v: usize) {
        let gr = self.g.grammar();
        let c = self.g.label_of(v).tag().expect("tag vertex");
        for t in 0..gr.num_types() {
            let k = gr.tag_args(c, t);
            if k > 0 {
                self.slots.push_back((v, t, k, 1));
            }
        }
    }

    // Candidate children of a slot with their gains and optimistic values.
    fn candidates(&self, u: usize, t: usize, from: usize) -> Vec<(usize, f64, f64, f64)> {
        let g = self.g;
        let gr = g.grammar();
        let mut out = Vec::new();
        for j in from..=g.n() {
            if self.used[j] {
                continue;
            }
            for c in 0..gr.num_tags() {
                if gr.tag_type(c) != t || self.subtree[c] == f64::NEG_INFINITY {
                    continue;
                }
                let v = g.vertex(j, Label::Tag(c));
                let Some(a) = g.arc_index(u, v) else { continue };
                if self.allowed[a] {
                    let gain = g.phi[a] + g.mu[v] - self.null_w[j];
                    let key = match self.lagr {
                        Some(l) => {
                            let null = g.null_vertex(j);
                            let (x, y) = (l.adjusted.x(), l.adjusted.y());
                            y[a] + x[v] - y[g.root_arc(null)] - x[null]
                        }
                        None => gain + self.subtree[c],
                    };
                    out.push((a, gain, gain + self.subtree[c], key));
                }
            }
        }
        out
    }

    /// Lagrangian bound over all completions of the current tree: used
    /// words keep their arc, the others may hang off tree vertices with an
    /// open slot of the right type, off unused words, or take their null arc.
    /// `None` means no completion exists.
    fn lagrangian_bound(&self) -> Option<f64> {
        let Some(lagr) = self.lagr else { return Some(f64::INFINITY) };
        let g = self.g;
        let gr = g.grammar();
        let mut open = vec![0usize; (g.n() + 1) * gr.num_types()];
        for &(u, t, k, _) in &self.slots {
            open[g.cluster_of(u) * gr.num_types() + t] += k;
        }
        let in_tree = |a: usize| self.stack.contains(&a);
        let keep = |a: usize| -> bool {
            let (s, d) = g.arc(a);
            let j = g.cluster_of(d);
            if self.used[j] {
                return in_tree(a);
            }
            if !self.allowed[a] {
                return false;
            }
            if s == 0 {
                return g.is_null(d);
            }
            let sc = g.cluster_of(s);
            if !self.used[sc] {
                return true;
            }
            let Label::Tag(c) = g.label_of(d) else { return false };
            self.chosen[sc] == Some(s) && open[sc * gr.num_types() + gr.tag_type(c)] > 0
        };
        restricted_msa(g, &lagr.adjusted, keep).map(|(w, _)| w + lagr.offset)
    }

    fn bound(&self, value: f64) -> f64 {
        let mut b = value;
        for &(u, t, k, from) in &self.slots {
            let best = self
                .candidates(u, t, from)
                .iter()
                .map(|c| c.2)
                .fold(f64::NEG_INFINITY, f64::max);
            b += k as f64 * best;
        }
        b
    }

    fn dfs(&mut self, value: f64) {
        let free = self.used[1..].iter().filter(|&&u| !u).count();
        let needed: usize = self.slots.iter().map(|&(_, t, k, _)| k * self.min_slot[t]).sum();
        if needed > free {
            return;
        }
        let best = self.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
        let optimistic = self.bound(value);
        if optimistic == f64::NEG_INFINITY || (self.best.is_some() && optimistic <= best) {
            return;
        }
        match self.lagrangian_bound() {
            Some(b) if b > best => {}
            _ => return,
        }
        let Some((u, t, k, from)) = self.slots.pop_front() else {
            let complete = (1..=self.g.n()).all(|i| self.used[i] || self.null_w[i] != MISSING_NULL);
            if complete && self.best.as_ref().is_none_or(|(b, _)| value > *b) {
                self.best = Some((value, self.stack.clone()));
            }
            return;
        };
        let mut cands = self.candidates(u, t, from);
        cands.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)));
        for (a, gain, _, _) in cands {
            let v = self.g.arc(a).1;
            let j = self.g.cluster_of(v);
            let before = self.slots.len();
            self.used[j] = true;
            self.chosen[j] = Some(v);
            self.stack.push(a);
            if k > 1 {
                // siblings of the same slot take increasing words
                self.slots.push_front((u, t, k - 1, j + 1));
            }
            self.open(v);
            self.dfs(value + gain);
            if k > 1 {
                self.slots.pop_front();
            }
            self.slots.truncate(before);
            self.stack.pop();
            self.chosen[j] = None;
            self.used[j] = false;
        }
        self.slots.push_front((u, t, k, from));
    }
}

/// Result of latent anchoring.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorResult {
    pub alignment: Alignment,
    pub solve: SolveResult,
}

/// Latent anchoring: smoothed conditional gradient over the relaxed
/// alignment set, then Hungarian rounding of the vertex mass.
pub fn latent_anchor(g: &ExtendedGraph, ast: &Ast, cfg: &SolverConfig) -> Result<AnchorResult> {
    if ast.len() > g.n() {
        return Err(Error::Infeasible(format!(
            "{} AST vertices cannot be anchored on {} words",
            ast.len(),
            g.n()
        )));
    }
    let theta = g.weights();
    let cs = build_ilp2_constraints(g);
    let mut solve = conditional_gradient(|psi| lmo_align(g, ast, psi), &theta, &cs, cfg)?;
    let alignment = hungarian_round(g, ast, &solve.z_fractional)?;
    let z = alignment_vector(g, ast, &alignment)?;
    solve.integral_feasible = alignment.is_injective(g);
    solve.z_integral = Some(z);
    Ok(AnchorResult { alignment, solve })
}

/// Objective value of a decoded solution, if any.
pub fn integral_weight(g: &ExtendedGraph, res: &SolveResult) -> Option<f64> {
    res.z_integral.as_ref().map(|z| weight_of(g, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{list_states, toy_graph};
    use crate::graph::{solution_from_arcs, solution_to_ast};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ilp1_row_counts() {
        let g = toy_graph(2);
        let cs = build_ilp1_constraints(&g);
        assert_eq!(cs.len(), 5);
        assert_eq!(cs.kind, ConstraintKind::Equality);
    }

    #[test]
    fn list_states_loc_row() {
        let g = list_states();
        let cs = build_ilp1_constraints(&g);
        let nx = g.num_vertices();
        let loc = g.vertex(1, Label::Tag(1));
        let arg = g.arc_index(loc, g.vertex(2, Label::Tag(0))).unwrap();
        let other = g.arc_index(loc, g.vertex(2, Label::Tag(1))).unwrap();
        let mut expected = vec![(nx + arg, 1.0), (nx + other, 1.0), (loc, -1.0)];
        expected.sort_by_key(|e| e.0);
        let found = cs.rows.iter().any(|r| {
            let mut r = r.clone();
            r.sort_by_key(|e| e.0);
            r == expected
        });
        assert!(found);
    }

    #[test]
    fn ilp2_rows_and_residual() {
        let g = toy_graph(3);
        let cs = build_ilp2_constraints(&g);
        assert_eq!(cs.len(), 3);
        let mut z = SolutionVector::zeros(&g);
        z.x_mut()[g.vertex(2, Label::Tag(0))] = 2.0;
        let r = cs.residual(z.as_slice());
        assert_eq!(r, vec![0.0, 1.0, 0.0]);
        let (v, _) = penalty_value_grad(&cs, z.as_slice(), 1.0);
        assert_eq!(v, 0.5);
    }

    #[test]
    fn penalty_vanishes_on_feasible_points() {
        let g = toy_graph(2);
        let cs = build_ilp1_constraints(&g);
        let p1 = g.vertex(1, Label::Tag(1));
        let a2 = g.vertex(2, Label::Tag(0));
        let z = solution_from_arcs(&g, &[g.root_arc(p1), g.arc_index(p1, a2).unwrap()]);
        let (v, grad) = penalty_value_grad(&cs, z.as_slice(), 0.3);
        assert_eq!(v, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equality_step_edge_cases() {
        let g = toy_graph(2);
        let cs = build_ilp1_constraints(&g);
        let z = SolutionVector::zeros(&g);
        let mut theta = SolutionVector::zeros(&g);
        // direction touching no constrained coordinate: null vertex only
        let mut d = SolutionVector::zeros(&g);
        d.x_mut()[g.null_vertex(1)] = 1.0;
        theta.x_mut()[g.null_vertex(1)] = 1.0;
        assert_eq!(step_size_equality(&theta, &cs, &z, &d, 1.0), 1.0);
        theta.x_mut()[g.null_vertex(1)] = -1.0;
        assert_eq!(step_size_equality(&theta, &cs, &z, &d, 1.0), 0.0);
    }

    #[test]
    fn inequality_step_edge_cases() {
        let g = toy_graph(2);
        let cs = build_ilp2_constraints(&g);
        let z = SolutionVector::zeros(&g);
        let mut theta = SolutionVector::zeros(&g);
        let mut d = SolutionVector::zeros(&g);
        d.x_mut()[g.vertex(1, Label::Tag(0))] = 1.0;
        theta.x_mut()[g.vertex(1, Label::Tag(0))] = 1.0;
        assert_eq!(step_size_inequality(&theta, &cs, &z, &d, 1.0, 10), 1.0);
        // moving towards a violated row while losing objective
        let mut z2 = SolutionVector::zeros(&g);
        z2.x_mut()[g.vertex(1, Label::Tag(0))] = 1.0;
        theta.x_mut()[g.vertex(1, Label::Tag(0))] = -1.0;
        assert_eq!(step_size_inequality(&theta, &cs, &z2, &d, 1.0, 10), 0.0);
    }

    #[test]
    fn feasible_start_terminates_immediately() {
        let mut g = toy_graph(2);
        let a1 = g.vertex(1, Label::Tag(0));
        g.mu[a1] = 3.0;
        let idx = g.root_arc(a1);
        g.phi[idx] = 1.0;
        // the second word prefers its null vertex
        let idx = g.root_arc(g.null_vertex(2));
        g.phi[idx] = 1.0;
        let res = map_inference(&g, &SolverConfig::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.dual_gap <= 1e-6);
        assert!(res.integral_feasible);
        assert_eq!(res.z_integral.as_ref().unwrap(), &res.z_fractional);
    }

    #[test]
    fn list_states_pipeline() {
        let g = list_states();
        let res = map_inference(&g, &SolverConfig::default()).unwrap();
        let z = res.z_integral.unwrap();
        assert!((weight_of(&g, &z) - 2.5).abs() < 1e-9);
        let parsed = solution_to_ast(&g, &z).unwrap();
        assert_eq!(crate::grammar::serialize_ast(g.grammar(), &parsed.ast), "state_all");
        assert_eq!(parsed.words(&g), vec![2]);
        assert_eq!(z.x()[g.null_vertex(1)], 1.0);
    }

    #[test]
    fn frozen_beta_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = SolverConfig {
            freeze_beta: true,
            max_iters: 100,
            ..SolverConfig::default()
        };
        for _ in 0..20 {
            let mut g = toy_graph(3);
            g.mu.iter_mut().skip(1).for_each(|w| *w = rng.gen_range(-1.0..1.0));
            g.phi.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
            let res = map_inference(&g, &cfg).unwrap();
            for w in res.trace.windows(2) {
                assert!(w[1].objective >= w[0].objective - 1e-9);
            }
            assert!(res.dual_gap >= -1e-9);
        }
    }

    #[test]
    fn support_rounding_is_identity_on_feasible_points() {
        let g = toy_graph(2);
        let p1 = g.vertex(1, Label::Tag(1));
        let a2 = g.vertex(2, Label::Tag(0));
        let z = solution_from_arcs(&g, &[g.root_arc(p1), g.arc_index(p1, a2).unwrap()]);
        assert_eq!(round_support(&g, &z, 1e-6).unwrap(), z);
    }

    #[test]
    fn support_rounding_falls_back_to_full_graph() {
        let g = list_states();
        // unconstrained optimum is infeasible and has a support that holds no
        // feasible structure
        let z = lmo_sa(&g, &g.weights());
        let r = round_support(&g, &z, 1e-6).unwrap();
        assert!(check_feasible(&g, &r).is_ok());
        assert!((weight_of(&g, &r) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn search_matches_oracle_on_full_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let budget = crate::oracle::EnumerationBudget::default();
        for _ in 0..300 {
            let n = rng.gen_range(1..=4);
            let (tags, types) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
            let g = crate::synth::random_instance(&mut rng, n, tags, types);
            let (best, _) = crate::oracle::exact_map(&g, &budget).unwrap().unwrap();
            let allowed = vec![true; g.num_arcs()];
            let cs = build_ilp1_constraints(&g);
            let lagr = Lagrangian::fit(&g, &cs, &allowed, None);
            let arcs = branch_and_bound(&g, &allowed, lagr.as_ref()).unwrap();
            let z = solution_from_arcs(&g, &arcs);
            assert!(check_feasible(&g, &z).is_ok());
            assert!((weight_of(&g, &z) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn subset_dp_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let budget = crate::oracle::EnumerationBudget::default();
        for _ in 0..300 {
            let n = rng.gen_range(1..=4);
            let (tags, types) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
            let g = crate::synth::random_instance(&mut rng, n, tags, types);
            let (best, _) = crate::oracle::exact_map(&g, &budget).unwrap().unwrap();
            let arcs = subset_dp(&g, &vec![true; g.num_arcs()]).unwrap();
            let z = solution_from_arcs(&g, &arcs);
            assert!(check_feasible(&g, &z).is_ok());
            assert!((weight_of(&g, &z) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn subset_dp_agrees_with_search_on_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(3..=6);
            let (tags, types) = (rng.gen_range(2..=5), rng.gen_range(1..=2));
            let g = crate::synth::random_instance(&mut rng, n, tags, types);
            let allowed: Vec<bool> = (0..g.num_arcs()).map(|_| rng.gen_bool(0.6)).collect();
            let a = subset_dp(&g, &allowed);
            let b = branch_and_bound(&g, &allowed, None).filter(|arcs| arcs.iter().all(|&x| allowed[x]));
            match (a, b) {
                (Some(a), Some(b)) => {
                    let wa = weight_of(&g, &solution_from_arcs(&g, &a));
                    let wb = weight_of(&g, &solution_from_arcs(&g, &b));
                    assert!((wa - wb).abs() < 1e-9, "{wa} vs {wb}");
                }
                (None, None) => {}
                (a, b) => panic!("disagree: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn subset_dp_respects_support() {
        let g = list_states();
        let mut allowed = vec![false; g.num_arcs()];
        allowed[g.root_arc(g.vertex(1, Label::Tag(1)))] = true;
        allowed[g.root_arc(g.null_vertex(2))] = true;
        assert!(subset_dp(&g, &allowed).is_none());
        allowed[g.root_arc(g.vertex(2, Label::Tag(0)))] = true;
        allowed[g.root_arc(g.null_vertex(1))] = true;
        let arcs = subset_dp(&g, &allowed).unwrap();
        assert_eq!(arcs, vec![g.root_arc(g.null_vertex(1)), g.root_arc(g.vertex(2, Label::Tag(0)))]);
    }

    #[test]
    fn search_respects_support() {
        let g = list_states();
        // only the root arcs into the first word's loc_1 and the second
        // word's null are allowed: loc_1 has no argument to take
        let mut allowed = vec![false; g.num_arcs()];
        allowed[g.root_arc(g.vertex(1, Label::Tag(1)))] = true;
        allowed[g.root_arc(g.null_vertex(2))] = true;
        assert!(branch_and_bound(&g, &allowed, None).is_none());
        allowed[g.root_arc(g.vertex(2, Label::Tag(0)))] = true;
        allowed[g.root_arc(g.null_vertex(1))] = true;
        let arcs = branch_and_bound(&g, &allowed, None).unwrap();
        assert_eq!(arcs, vec![g.root_arc(g.null_vertex(1)), g.root_arc(g.vertex(2, Label::Tag(0)))]);
    }

    #[test]
    fn anchoring_with_unique_choice() {
        let gr = std::sync::Arc::new(crate::grammar::parse_grammar("type e\ntag A e\ntag P e e=1").unwrap());
        let g = crate::graph::build_graph(2, gr.clone(), &crate::graph::ZeroWeights);
        let ast = crate::grammar::parse_program("P(A)", &gr).unwrap();
        let mut g = g;
        let idx = g.vertex(1, Label::Tag(1));
        g.mu[idx] = 2.0;
        let idx = g.vertex(2, Label::Tag(0));
        g.mu[idx] = 2.0;
        let res = latent_anchor(&g, &ast, &SolverConfig::default()).unwrap();
        assert_eq!(res.alignment.words(&g), vec![1, 2]);
    }
}
