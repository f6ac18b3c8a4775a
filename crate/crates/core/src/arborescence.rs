//! Maximum spanning arborescence over the cluster-contracted graph.
//!
//! Maximizing a linear objective over generalized spanning arborescences of
//! the extended graph reduces to a plain maximum spanning arborescence once
//! each cluster is contracted to a single node: the contracted arc `i -> j`
//! carries the best `arc + destination vertex` score among the original arcs
//! from cluster `i` into cluster `j`.

use crate::error::{Error, Result};
use crate::graph::{ExtendedGraph, SolutionVector};

/// One node per cluster, node `0` being the root.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractedGraph {
    nodes: usize,
    // dense nodes x nodes, weight[h * nodes + d]
    weight: Vec<f64>,
    // original arc realizing the contracted arc
    origin: Vec<Option<usize>>,
}

impl ContractedGraph {
    /// Builds a contracted graph directly from a dense weight matrix;
    /// `NEG_INFINITY` marks a missing arc.
    pub fn from_dense(nodes: usize, weight: Vec<f64>) -> Self {
        assert_eq!(weight.len(), nodes * nodes);
        ContractedGraph {
            nodes,
            origin: vec![None; weight.len()],
            weight,
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn weight(&self, head: usize, dep: usize) -> f64 {
        self.weight[head * self.nodes + dep]
    }

    /// The original arc behind the contracted arc `head -> dep`.
    pub fn origin(&self, head: usize, dep: usize) -> Option<usize> {
        self.origin[head * self.nodes + dep]
    }
}

/// Contracts every cluster to one node. Among parallel candidates the one
/// maximizing `psi_arc + psi_destination` wins, ties going to the lowest
/// arc index.
pub fn contract(g: &ExtendedGraph, psi: &SolutionVector) -> ContractedGraph {
    let nodes = g.n() + 1;
    let mut weight = vec![f64::NEG_INFINITY; nodes * nodes];
    let mut origin = vec![None; nodes * nodes];
    let (px, py) = (psi.x(), psi.y());
    for (a, &(s, d)) in g.arcs().iter().enumerate() {
        let cell = g.cluster_of(s) * nodes + g.cluster_of(d);
        let w = py[a] + px[d];
        if origin[cell].is_none() || w > weight[cell] {
            weight[cell] = w;
            origin[cell] = Some(a);
        }
    }
    ContractedGraph { nodes, weight, origin }
}

/// Maximum-weight spanning arborescence rooted at node 0 (Chu-Liu/Edmonds).
///
/// Returns the head of every node; `heads[0]` is `None`.
pub fn msa(cg: &ContractedGraph) -> Result<Vec<Option<usize>>> {
    let n = cg.nodes;
    let mut reached = vec![false; n];
    reached[0] = true;
    let mut stack = vec![0];
    while let Some(h) = stack.pop() {
        for d in 1..n {
            if !reached[d] && d != h && cg.weight(h, d) > f64::NEG_INFINITY {
                reached[d] = true;
                stack.push(d);
            }
        }
    }
    if let Some(d) = reached.iter().position(|&r| !r) {
        return Err(Error::Unreachable(d));
    }
    Ok(chu_liu_edmonds(n, &cg.weight))
}

fn chu_liu_edmonds(n: usize, w: &[f64]) -> Vec<Option<usize>> {
    let mut heads = vec![None; n];
    for d in 1..n {
        let mut best: Option<usize> = None;
        for h in 0..n {
            if h == d {
                continue;
            }
            if best.is_none_or(|b| w[h * n + d] > w[b * n + d]) {
                best = Some(h);
            }
        }
        heads[d] = best;
    }
    let cycle = match find_cycle(&heads) {
        Some(c) => c,
        None => return heads,
    };

    // Contract the cycle into a fresh node; other nodes keep their relative
    // order so that ties still break towards lower indices.
    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    let mut new_id = vec![0; n];
    let mut old_of = Vec::new();
    for v in 0..n {
        if !in_cycle[v] {
            new_id[v] = old_of.len();
            old_of.push(v);
        }
    }
    let c = old_of.len();
    for &v in &cycle {
        new_id[v] = c;
    }
    let m = c + 1;
    let mut w2 = vec![f64::NEG_INFINITY; m * m];
    // which original (head, dep) realizes each contracted arc
    let mut via = vec![(0usize, 0usize); m * m];
    let cycle_in = |v: usize| w[heads[v].unwrap() * n + v];
    for h in 0..n {
        for d in 0..n {
            if h == d || d == 0 {
                continue;
            }
            let (nh, nd) = (new_id[h], new_id[d]);
            if nh == nd {
                continue;
            }
            let score = if in_cycle[d] {
                w[h * n + d] - cycle_in(d)
            } else {
                w[h * n + d]
            };
            let cell = nh * m + nd;
            if score > w2[cell] {
                w2[cell] = score;
                via[cell] = (h, d);
            }
        }
    }
    let sub = chu_liu_edmonds(m, &w2);
    let mut out = heads.clone();
    for nd in 1..m {
        let nh = sub[nd].expect("every non-root node has a head");
        let (h, d) = via[nh * m + nd];
        // For the cycle node this breaks the cycle at `d`, every other cycle
        // member keeps its cycle head.
        out[d] = Some(h);
    }
    out
}

fn find_cycle(heads: &[Option<usize>]) -> Option<Vec<usize>> {
    let n = heads.len();
    // 0 = unvisited, 1 = on current path, 2 = done
    let mut state = vec![0u8; n];
    state[0] = 2;
    for start in 1..n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            match heads[v] {
                Some(h) => v = h,
                None => break,
            }
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).unwrap();
            return Some(path[pos..].to_vec());
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

/// Total weight of an arborescence given by head pointers.
pub fn arborescence_weight(cg: &ContractedGraph, heads: &[Option<usize>]) -> f64 {
    heads
        .iter()
        .enumerate()
        .filter_map(|(d, h)| h.map(|h| cg.weight(h, d)))
        .sum()
}

/// Linear maximization oracle over generalized spanning arborescences of the
/// extended graph: contract, solve the MSA, expand back to indicators.
pub fn lmo_sa(g: &ExtendedGraph, psi: &SolutionVector) -> SolutionVector {
    let cg = contract(g, psi);
    let heads = msa(&cg).expect("the root reaches every cluster in an extended graph");
    let mut z = SolutionVector::zeros(g);
    z.x_mut()[0] = 1.0;
    for (d, h) in heads.iter().enumerate().skip(1) {
        let a = cg.origin(h.unwrap(), d).expect("contracted arcs come from real arcs");
        z.y_mut()[a] = 1.0;
        let v = g.arc(a).1;
        z.x_mut()[v] = 1.0;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{list_states, toy_graph};
    use crate::graph::{check_feasible, weight_of, Label};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NEG: f64 = f64::NEG_INFINITY;

    /// Enumerates every head assignment and keeps the best arborescence.
    fn brute_force(cg: &ContractedGraph) -> (f64, Vec<Option<usize>>) {
        let n = cg.nodes();
        let mut best = (NEG, vec![]);
        let mut heads = vec![0usize; n];
        let total = (n as u64).pow(n as u32 - 1);
        for code in 0..total {
            let mut c = code;
            for h in heads.iter_mut().skip(1) {
                *h = (c % n as u64) as usize;
                c /= n as u64;
            }
            let ok = (1..n).all(|d| {
                if heads[d] == d {
                    return false;
                }
                let mut v = d;
                for _ in 0..n {
                    if v == 0 {
                        return true;
                    }
                    v = heads[v];
                }
                v == 0
            });
            if !ok {
                continue;
            }
            let w: f64 = (1..n).map(|d| cg.weight(heads[d], d)).sum();
            if w > best.0 {
                best = (w, std::iter::once(None).chain(heads[1..].iter().map(|&h| Some(h))).collect());
            }
        }
        best
    }

    fn is_arborescence(heads: &[Option<usize>]) -> bool {
        heads[0].is_none()
            && (1..heads.len()).all(|d| {
                let mut v = d;
                for _ in 0..heads.len() {
                    match heads[v] {
                        Some(h) => v = h,
                        None => return v == 0,
                    }
                }
                false
            })
    }

    #[test]
    fn chain() {
        let cg = ContractedGraph::from_dense(2, vec![NEG, 1.0, NEG, NEG]);
        assert_eq!(msa(&cg).unwrap(), vec![None, Some(0)]);
    }

    #[test]
    fn triangle() {
        // root->a=1, root->b=0, a->b=2, b->a=2
        let cg = ContractedGraph::from_dense(3, vec![NEG, 1.0, 0.0, NEG, NEG, 2.0, NEG, 2.0, NEG]);
        let heads = msa(&cg).unwrap();
        assert_eq!(heads, vec![None, Some(0), Some(1)]);
        assert_eq!(arborescence_weight(&cg, &heads), 3.0);
        assert_eq!(brute_force(&cg).0, 3.0);
    }

    #[test]
    fn unreachable_node() {
        let cg = ContractedGraph::from_dense(3, vec![NEG, 1.0, NEG, NEG, NEG, NEG, NEG, NEG, NEG]);
        assert!(matches!(msa(&cg), Err(Error::Unreachable(2))));
        // 2 and 3 only point at each other
        let mut w = vec![NEG; 16];
        w[1] = 1.0;
        w[2 * 4 + 3] = 1.0;
        w[3 * 4 + 2] = 1.0;
        assert!(matches!(msa(&ContractedGraph::from_dense(4, w)), Err(Error::Unreachable(_))));
    }

    #[test]
    fn matches_brute_force_on_random_dense_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(2..=6);
            let mut w = vec![NEG; n * n];
            for h in 0..n {
                for d in 1..n {
                    if h != d {
                        // coarse weights produce plenty of ties
                        w[h * n + d] = (rng.gen_range(-4..=4) as f64) * 0.5;
                    }
                }
            }
            let cg = ContractedGraph::from_dense(n, w);
            let heads = msa(&cg).unwrap();
            assert!(is_arborescence(&heads), "{heads:?}");
            let (best, _) = brute_force(&cg);
            assert!((arborescence_weight(&cg, &heads) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn list_states_contraction() {
        let g = list_states();
        let cg = contract(&g, &g.weights());
        assert_eq!(cg.weight(0, 2), 2.5);
        assert_eq!(cg.weight(0, 1), 1.0);
        assert_eq!(cg.weight(1, 2), 0.0);
        assert_eq!(cg.weight(2, 1), -1.0);
        let heads = msa(&cg).unwrap();
        assert_eq!(heads, vec![None, Some(0), Some(0)]);
        assert_eq!(arborescence_weight(&cg, &heads), 3.5);

        let z = lmo_sa(&g, &g.weights());
        let loc = g.vertex(1, Label::Tag(1));
        let sa = g.vertex(2, Label::Tag(0));
        assert_eq!(z.x()[loc], 1.0);
        assert_eq!(z.x()[sa], 1.0);
        assert!((weight_of(&g, &z) - 3.5).abs() < 1e-12);
        // the unconstrained optimum leaves loc_1 without argument
        assert!(check_feasible(&g, &z).is_err());
    }

    #[test]
    fn zero_weights_pick_lowest_indices() {
        let g = toy_graph(2);
        let cg = contract(&g, &SolutionVector::zeros(&g));
        for h in 0..3 {
            for d in 1..3 {
                if h != d {
                    assert_eq!(cg.weight(h, d), 0.0);
                    let a = cg.origin(h, d).unwrap();
                    let lowest = g.arcs().iter().position(|&(s, t)| {
                        g.cluster_of(s) == h && g.cluster_of(t) == d
                    });
                    assert_eq!(Some(a), lowest);
                }
            }
        }
    }

    #[test]
    fn contraction_keeps_best_parallel_arc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = toy_graph(3);
        for _ in 0..50 {
            let mut psi = SolutionVector::zeros(&g);
            psi.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let cg = contract(&g, &psi);
            for h in 0..=3 {
                for d in 1..=3 {
                    if h == d {
                        continue;
                    }
                    let best = g
                        .arcs()
                        .iter()
                        .enumerate()
                        .filter(|(_, &(s, t))| g.cluster_of(s) == h && g.cluster_of(t) == d)
                        .map(|(a, &(_, t))| psi.y()[a] + psi.x()[t])
                        .fold(NEG, f64::max);
                    assert_eq!(cg.weight(h, d), best);
                }
            }
        }
    }
}
