//! Training losses and a hashed linear scorer.
//!
//! The log-partition over feasible structures is intractable, so it is
//! replaced by an upper bound that decomposes over words: one log-sum-exp over
//! the vertices of each cluster plus one over the arcs entering it. The root
//! cluster takes no part in either sum.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;
use rayon::prelude::*;

use crate::anchoring::Alignment;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::eval::programs_match;
use crate::grammar::{serialize_ast, Ast, Grammar};
use crate::graph::{
    anchored_ast_to_solution, build_graph, solution_to_ast, AnchoredAst, ExtendedGraph, Label, SolutionVector,
    WeightSource,
};
use crate::oracle::log_sum_exp;
use crate::solver::{latent_anchor, map_inference, SolveResult, SolverConfig};

/// Upper bound on the log-partition and its gradient (per-cluster softmax
/// marginals).
pub fn surrogate_log_partition(g: &ExtendedGraph) -> (f64, SolutionVector) {
    let mut grad = SolutionVector::zeros(g);
    let mut value = 0.0;
    for i in 1..=g.n() {
        let vs: Vec<usize> = g.cluster(i).collect();
        let w: Vec<f64> = vs.iter().map(|&v| g.mu[v]).collect();
        let l = log_sum_exp(&w);
        value += l;
        for (&v, &wv) in vs.iter().zip(&w) {
            grad.x_mut()[v] = (wv - l).exp();
        }
        let arcs: Vec<usize> = vs.iter().flat_map(|&v| g.incoming(v).iter().copied()).collect();
        let w: Vec<f64> = arcs.iter().map(|&a| g.phi[a]).collect();
        let l = log_sum_exp(&w);
        value += l;
        for (&a, &wa) in arcs.iter().zip(&w) {
            grad.y_mut()[a] = (wa - l).exp();
        }
    }
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Gradient of the loss with respect to the graph weights `(mu, phi)`.
    pub grad: SolutionVector,
}

/// Negated log-likelihood bound of `target` under the surrogate partition.
pub fn supervised_loss(g: &ExtendedGraph, target: &SolutionVector) -> Result<LossReport> {
    if target.len() != g.dim() || target.num_x() != g.num_vertices() {
        return Err(Error::Dimension {
            expected: g.dim(),
            got: target.len(),
        });
    }
    let (c, mut grad) = surrogate_log_partition(g);
    let loss = c - g.weights().dot(target);
    grad.add_scaled(-1.0, target);
    Ok(LossReport { loss, grad })
}

/// Hard-EM loss: the best constrained anchoring of `ast` under the current
/// weights becomes the supervised target.
pub fn weak_loss(g: &ExtendedGraph, ast: &Ast, cfg: &SolverConfig) -> Result<(LossReport, Alignment)> {
    let target = anchoring_target(g, ast, cfg)?;
    let rep = supervised_loss(g, &target.1)?;
    Ok((rep, target.0))
}

fn anchoring_target(g: &ExtendedGraph, ast: &Ast, cfg: &SolverConfig) -> Result<(Alignment, SolutionVector)> {
    let res = latent_anchor(g, ast, cfg)?;
    let z = anchored_ast_to_solution(g, ast, &res.alignment.assign)?;
    Ok((res.alignment, z))
}

/// Expected structure when every injective anchoring of `ast` is equally
/// likely.
pub fn uniform_anchoring_target(g: &ExtendedGraph, ast: &Ast) -> Result<SolutionVector> {
    let n = g.n();
    let k = ast.len();
    if k > n {
        return Err(Error::Infeasible(format!("{k} AST vertices cannot be anchored on {n} words")));
    }
    let nf = n as f64;
    let mut z = SolutionVector::zeros(g);
    let unused = 1.0 - k as f64 / nf;
    for i in 1..=n {
        let null = g.null_vertex(i);
        z.x_mut()[null] += unused;
        z.y_mut()[g.root_arc(null)] += unused;
        z.y_mut()[g.root_arc(g.vertex(i, Label::Tag(ast.label(ast.root()))))] += 1.0 / nf;
        for u in 0..k {
            z.x_mut()[g.vertex(i, Label::Tag(ast.label(u)))] += 1.0 / nf;
        }
    }
    if n > 1 {
        let pair = 1.0 / (nf * (nf - 1.0));
        for (h, d) in ast.arcs() {
            for i in 1..=n {
                for j in 1..=n {
                    if i != j {
                        let hv = g.vertex(i, Label::Tag(ast.label(h)));
                        let dv = g.vertex(j, Label::Tag(ast.label(d)));
                        z.y_mut()[g.arc_index(hv, dv).expect("inter-cluster arc")] += pair;
                    }
                }
            }
        }
    }
    Ok(z)
}

const CHECKPOINT_HEADER: &str = "semgraph-params";
const CHECKPOINT_VERSION: u32 = 1;

/// Linear model over hashed features of a sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub vertex_weights: Vec<f64>,
    pub arc_weights: Vec<f64>,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ScorerParams {
    pub const DEFAULT_SLOTS: usize = 1 << 20;

    pub fn new(slots: usize, learning_rate: f64, seed: u64) -> Self {
        assert!(slots.is_power_of_two(), "slot count must be a power of two");
        ScorerParams {
            vertex_weights: vec![0.0; slots],
            arc_weights: vec![0.0; slots],
            learning_rate,
            seed,
        }
    }

    pub fn slots(&self) -> usize {
        self.vertex_weights.len()
    }

    fn hash(&self, parts: &[&str]) -> usize {
        let mut h = FnvHasher::default();
        h.write(&self.seed.to_le_bytes());
        for p in parts {
            h.write(p.as_bytes());
            h.write_u8(0xff);
        }
        (h.finish() as usize) & (self.slots() - 1)
    }

    /// Feature slots of a vertex: the word with its label, and a label bias.
    pub fn vertex_features(&self, words: &[String], word: usize, label: &str) -> [usize; 2] {
        [
            self.hash(&["v", &words[word - 1], label]),
            self.hash(&["vb", label]),
        ]
    }

    /// Feature slots of an arc: the two words with their labels, the label
    /// pair with the direction, and the label pair with the clipped distance.
    /// Root arcs use the dependent's position instead.
    pub fn arc_features(&self, words: &[String], hw: usize, hl: &str, dw: usize, dl: &str) -> [usize; 3] {
        let head = if hw == 0 { "<ROOT>" } else { &words[hw - 1] };
        let (dir, dist) = if hw == 0 {
            ("r", (dw as i64).min(6))
        } else {
            let d = dw as i64 - hw as i64;
            (if d > 0 { ">" } else { "<" }, d.clamp(-6, 6))
        };
        let dist = dist.to_string();
        [
            self.hash(&["a", head, hl, &words[dw - 1], dl]),
            self.hash(&["ad", hl, dl, dir]),
            self.hash(&["ak", hl, dl, &dist]),
        ]
    }

    /// Gradient step on the features of `g`: `w -= lr * dL/dw`.
    pub fn apply_gradient(&mut self, g: &ExtendedGraph, words: &[String], grad: &SolutionVector) {
        let lr = self.learning_rate;
        let gr = g.grammar();
        for v in 1..g.num_vertices() {
            let d = grad.x()[v];
            if d != 0.0 {
                let (w, l) = (g.cluster_of(v), g.label_of(v));
                for f in self.vertex_features(words, w, l.name(gr)) {
                    self.vertex_weights[f] -= lr * d;
                }
            }
        }
        for (a, &(s, t)) in g.arcs().iter().enumerate() {
            let d = grad.y()[a];
            if d != 0.0 {
                let (hw, hl) = (g.cluster_of(s), g.label_of(s));
                let (dw, dl) = (g.cluster_of(t), g.label_of(t));
                for f in self.arc_features(words, hw, hl.name(gr), dw, dl.name(gr)) {
                    self.arc_weights[f] -= lr * d;
                }
            }
        }
    }

    /// Sparse text dump; only nonzero weights are written.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{CHECKPOINT_HEADER} {CHECKPOINT_VERSION}\nseed {}\nslots {}\nlr {}\n",
            self.seed,
            self.slots(),
            self.learning_rate
        );
        for (tag, table) in [("v", &self.vertex_weights), ("a", &self.arc_weights)] {
            for (i, &w) in table.iter().enumerate() {
                if w != 0.0 {
                    writeln!(s, "{tag} {i} {w:e}").unwrap();
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` line")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(k), Some(v), None) if k == key => Ok(v.to_string()),
                _ => Err(Error::Checkpoint(format!("expected `{key} <value>`, found `{line}`"))),
            }
        };
        let version = header(CHECKPOINT_HEADER)?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let bad = |what: &str, v: &str| Error::Checkpoint(format!("bad {what} `{v}`"));
        let seed_s = header("seed")?;
        let seed: u64 = seed_s.parse().map_err(|_| bad("seed", &seed_s))?;
        let slots_s = header("slots")?;
        let slots: usize = slots_s.parse().map_err(|_| bad("slots", &slots_s))?;
        if !slots.is_power_of_two() {
            return Err(bad("slots", &slots_s));
        }
        let lr_s = header("lr")?;
        let lr: f64 = lr_s.parse().map_err(|_| bad("lr", &lr_s))?;
        let mut p = ScorerParams::new(slots, lr, seed);
        for (k, line) in lines.enumerate() {
            let lineno = k + 5;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let entry = || Error::Checkpoint(format!("line {lineno}: bad entry `{line}`"));
            if f.len() != 3 {
                return Err(entry());
            }
            let idx: usize = f[1].parse().map_err(|_| entry())?;
            let w: f64 = f[2].parse().map_err(|_| entry())?;
            let table = match f[0] {
                "v" => &mut p.vertex_weights,
                "a" => &mut p.arc_weights,
                _ => return Err(entry()),
            };
            *table.get_mut(idx).ok_or_else(entry)? = w;
        }
        Ok(p)
    }
}

struct Scored<'a> {
    params: &'a ScorerParams,
    words: &'a [String],
    grammar: &'a Grammar,
}

impl WeightSource for Scored<'_> {
    fn vertex(&self, word: usize, label: Label) -> f64 {
        if word == 0 {
            return 0.0;
        }
        let p = self.params;
        p.vertex_features(self.words, word, label.name(self.grammar))
            .iter()
            .map(|&f| p.vertex_weights[f])
            .sum()
    }

    fn arc(&self, hw: usize, hl: Label, dw: usize, dl: Label) -> f64 {
        let p = self.params;
        let g = self.grammar;
        p.arc_features(self.words, hw, hl.name(g), dw, dl.name(g))
            .iter()
            .map(|&f| p.arc_weights[f])
            .sum()
    }
}

/// Graph of a sentence with weights read off the scorer.
pub fn score_graph(params: &ScorerParams, words: &[String], grammar: &Arc<Grammar>) -> ExtendedGraph {
    let src = Scored {
        params,
        words,
        grammar,
    };
    build_graph(words.len(), grammar.clone(), &src)
}

/// Decoded program of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub parse: Option<AnchoredAst>,
    pub solve: SolveResult,
}

impl Prediction {
    pub fn program(&self, g: &Grammar) -> Option<String> {
        self.parse.as_ref().map(|p| serialize_ast(g, &p.ast))
    }
}

pub fn decode(g: &ExtendedGraph, cfg: &SolverConfig) -> Result<Prediction> {
    let solve = map_inference(g, cfg)?;
    let parse = match &solve.z_integral {
        Some(z) if solve.integral_feasible => Some(solution_to_ast(g, z)?),
        _ => None,
    };
    Ok(Prediction { parse, solve })
}

pub fn predict(params: &ScorerParams, words: &[String], grammar: &Arc<Grammar>, cfg: &SolverConfig) -> Result<Prediction> {
    decode(&score_graph(params, words, grammar), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Supervised,
    Weak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Used for the anchoring step and for decoding the dev set.
    pub solver: SolverConfig,
    /// Stop once dev exact match reaches this value.
    pub target_dev: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Supervised,
            epochs: 25,
            solver: SolverConfig::default(),
            target_dev: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev_exact: Option<f64>,
}

/// Exact match of the decoded programs on `data`.
pub fn dev_exact_match(params: &ScorerParams, data: &[Instance], grammar: &Arc<Grammar>, cfg: &SolverConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = data
        .par_iter()
        .map(|inst| -> Result<bool> {
            let p = predict(params, &inst.words, grammar, cfg)?;
            Ok(p
                .program(grammar)
                .is_some_and(|s| programs_match(&serialize_ast(grammar, &inst.program), &s)))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Plain stochastic gradient descent over `data` in order.
///
/// In weak mode the anchorings are recomputed once per epoch from the
/// parameters at the start of the epoch. Before the first epoch every
/// parameter is zero and all anchorings tie, so that epoch uses the
/// expectation under uniformly random anchorings instead.
pub fn train(
    data: &[Instance],
    grammar: &Arc<Grammar>,
    cfg: &TrainConfig,
    params: &mut ScorerParams,
    dev: &[Instance],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut logs = Vec::new();
    if data.is_empty() {
        return Ok(logs);
    }
    if cfg.mode == TrainMode::Supervised {
        if let Some(k) = data.iter().position(|d| d.anchoring.is_none()) {
            return Err(Error::Dataset {
                line: k + 1,
                msg: "supervised training needs an anchoring".into(),
            });
        }
    }
    for epoch in 0..cfg.epochs {
        let targets: Option<Vec<SolutionVector>> = match cfg.mode {
            TrainMode::Weak if epoch > 0 => Some(
                data.par_iter()
                    .map(|inst| {
                        let g = score_graph(params, &inst.words, grammar);
                        anchoring_target(&g, &inst.program, &cfg.solver).map(|t| t.1)
                    })
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let mut total = 0.0;
        for (k, inst) in data.iter().enumerate() {
            let g = score_graph(params, &inst.words, grammar);
            let target = match (&targets, cfg.mode) {
                (Some(t), _) => t[k].clone(),
                (None, TrainMode::Weak) => uniform_anchoring_target(&g, &inst.program)?,
                (None, TrainMode::Supervised) => {
                    let words = inst.anchoring.as_ref().expect("checked above");
                    let anchors: Vec<usize> = (0..inst.program.len())
                        .map(|u| g.vertex(words[u], Label::Tag(inst.program.label(u))))
                        .collect();
                    anchored_ast_to_solution(&g, &inst.program, &anchors)?
                }
            };
            let rep = supervised_loss(&g, &target)?;
            total += rep.loss;
            params.apply_gradient(&g, &inst.words, &rep.grad);
        }
        let dev_exact = if dev.is_empty() {
            None
        } else {
            Some(dev_exact_match(params, dev, grammar, &cfg.solver)?)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            loss: total / data.len() as f64,
            dev_exact,
        };
        on_epoch(&log);
        logs.push(log);
        if let (Some(goal), Some(d)) = (cfg.target_dev, dev_exact) {
            if d >= goal {
                break;
            }
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{parse_grammar, parse_program};
    use crate::graph::tests::toy_graph;
    use crate::graph::ZeroWeights;
    use crate::oracle::{exact_log_partition, EnumerationBudget};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<String> {
        crate::data::tokenize(s)
    }

    #[test]
    fn uniform_single_word() {
        let gr = Arc::new(parse_grammar("type e\ntag A e").unwrap());
        let g = build_graph(1, gr, &ZeroWeights);
        let (c, _) = surrogate_log_partition(&g);
        assert!((c - 2.0 * 2f64.ln()).abs() < 1e-12);
        let z = crate::graph::solution_from_arcs(&g, &[g.root_arc(1)]);
        let rep = supervised_loss(&g, &z).unwrap();
        assert!((rep.loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bound_dominates_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let mut g = toy_graph(3);
            g.mu.iter_mut().skip(1).for_each(|w| *w = rng.gen_range(-2.0..2.0));
            g.phi.iter_mut().for_each(|w| *w = rng.gen_range(-2.0..2.0));
            let c = exact_log_partition(&g, &EnumerationBudget::default()).unwrap();
            assert!(surrogate_log_partition(&g).0 >= c - 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let g = toy_graph(2);
        let z = SolutionVector::zeros(&toy_graph(1));
        assert!(matches!(supervised_loss(&g, &z), Err(Error::Dimension { .. })));
    }

    #[test]
    fn uniform_target_is_distribution_per_cluster() {
        let g = toy_graph(3);
        let ast = parse_program("P(A)", g.grammar()).unwrap();
        let z = uniform_anchoring_target(&g, &ast).unwrap();
        for i in 1..=3 {
            let vx: f64 = g.cluster(i).map(|v| z.x()[v]).sum();
            let vy: f64 = g.cluster(i).flat_map(|v| g.incoming(v).to_vec()).map(|a| z.y()[a]).sum();
            assert!((vx - 1.0).abs() < 1e-12 && (vy - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_zero_weights_and_determinism() {
        let gr = Arc::new(parse_grammar("type e\ntag A e\ntag P e e=1").unwrap());
        let p = ScorerParams::new(1 << 10, 0.5, 1);
        let w = words("the p a");
        let g = score_graph(&p, &w, &gr);
        assert!(g.mu.iter().chain(&g.phi).all(|&x| x == 0.0));
        let mut p2 = p.clone();
        p2.vertex_weights[3] = 1.0;
        let (a, b) = (score_graph(&p2, &w, &gr), score_graph(&p2, &w, &gr));
        assert_eq!((a.mu, a.phi), (b.mu, b.phi));
    }

    #[test]
    fn sparse_update() {
        let gr = Arc::new(parse_grammar("type e\ntag A e\ntag P e e=1").unwrap());
        let mut p = ScorerParams::new(1 << 16, 0.5, 1);
        let w = words("p a");
        let g = score_graph(&p, &w, &gr);
        let ast = parse_program("P(A)", &gr).unwrap();
        let anchors = vec![g.vertex(1, Label::Tag(1)), g.vertex(2, Label::Tag(0))];
        let z = anchored_ast_to_solution(&g, &ast, &anchors).unwrap();
        let rep = supervised_loss(&g, &z).unwrap();
        p.apply_gradient(&g, &w, &rep.grad);
        // a sentence sharing no word keeps only label-level features
        let other = words("zz yy");
        let before = score_graph(&ScorerParams::new(1 << 16, 0.5, 1), &other, &gr);
        let after = score_graph(&p, &other, &gr);
        for v in 1..after.num_vertices() {
            let lex = p.vertex_features(&other, after.cluster_of(v), after.label_of(v).name(&gr))[0];
            assert_eq!(p.vertex_weights[lex], 0.0);
        }
        assert_eq!(before.num_vertices(), after.num_vertices());
        assert!(p.vertex_weights.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut p = ScorerParams::new(1 << 8, 0.25, 42);
        p.vertex_weights[5] = -1.5;
        p.arc_weights[255] = 1e-7;
        let q = ScorerParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, q);
        assert!(ScorerParams::from_text("semgraph-params 9\n").is_err());
        assert!(ScorerParams::from_text("semgraph-params 1\nseed 1\nslots 3\nlr 1\n").is_err());
        assert!(ScorerParams::from_text("semgraph-params 1\nseed 1\nslots 4\nlr 1\nv 4 1\n").is_err());
    }

    #[test]
    fn single_instance_fit() {
        let gr = Arc::new(parse_grammar("type e\ntag A e\ntag B e\ntag P e e=1\ntag Q e e=1").unwrap());
        let w = words("q x a");
        let ast = parse_program("Q(A)", &gr).unwrap();
        let inst = Instance {
            words: w.clone(),
            program: ast.clone(),
            anchoring: Some(vec![1, 3]),
        };
        let mut p = ScorerParams::new(1 << 12, 0.5, 0);
        let cfg = TrainConfig {
            epochs: 100,
            ..Default::default()
        };
        train(&[inst], &gr, &cfg, &mut p, &[], |_| {}).unwrap();
        let pred = predict(&p, &w, &gr, &SolverConfig::default()).unwrap();
        assert_eq!(pred.program(&gr).as_deref(), Some("Q(A)"));
        assert_eq!(pred.parse.unwrap().words(&score_graph(&p, &w, &gr)), vec![1, 3]);
    }

    #[test]
    fn empty_dataset_keeps_params() {
        let gr = Arc::new(parse_grammar("type e\ntag A e").unwrap());
        let mut p = ScorerParams::new(1 << 4, 0.5, 0);
        let logs = train(&[], &gr, &TrainConfig::default(), &mut p, &[], |_| {}).unwrap();
        assert!(logs.is_empty());
        assert_eq!(p, ScorerParams::new(1 << 4, 0.5, 0));
    }
}
