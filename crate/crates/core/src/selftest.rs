//! Oracle-backed property checks, runnable from the library, the command line
//! and the test-suite. Every check is seeded, so a report depends only on its
//! configuration.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchoring::{alignment_score, dp_align};
use crate::arborescence::lmo_sa;
use crate::grammar::{parse_grammar, serialize_ast};
use crate::graph::{build_graph, check_feasible, solution_to_ast, weight_of, SolutionVector, WeightFile};
use crate::losses::{surrogate_log_partition, supervised_loss};
use crate::oracle::{enumerate_alignments, exact_log_partition, exact_map, EnumerationBudget};
use crate::solver::{
    build_ilp1_constraints, build_ilp2_constraints, latent_anchor, map_inference, penalty_value_grad,
    step_size_equality, step_size_inequality, ConstraintSystem, SolverConfig,
};
use crate::synth::{random_ast, random_instance};
use crate::ExtendedGraph;

/// Two-word example: "List states" under a grammar where `loc_1` needs a
/// state argument.
pub const LIST_STATES_GRAMMAR: &str = "type state\ntag state_all state\ntag loc_1 state state=1\n";
pub const LIST_STATES_SENTENCE: &str = "List states";
pub const LIST_STATES_WEIGHTS: &str = "\
# vertices
vertex 1 state_all -1
vertex 1 loc_1 0
vertex 1 NULL 0
vertex 2 state_all 1
vertex 2 loc_1 -1
vertex 2 NULL 0
# arcs from the root
arc 0 ROOT 1 NULL 0
arc 0 ROOT 1 state_all 1
arc 0 ROOT 1 loc_1 1
arc 0 ROOT 2 NULL 0
arc 0 ROOT 2 state_all 1.5
arc 0 ROOT 2 loc_1 1.5
# arcs between words
arc 1 state_all 2 state_all -1
arc 1 state_all 2 loc_1 -1
arc 1 loc_1 2 state_all -1
arc 1 loc_1 2 loc_1 -1
arc 2 state_all 1 state_all -1
arc 2 state_all 1 loc_1 -1
arc 2 loc_1 1 state_all -1
arc 2 loc_1 1 loc_1 -1
";

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestConfig {
    pub seed: u64,
    pub instances: usize,
    /// Multiplies every numeric tolerance.
    pub tolerance_scale: f64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig {
            seed: 7,
            instances: 200,
            tolerance_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn rng_for(cfg: &SelftestConfig, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

/// Random tiny graph: n in 2..=4, up to 3 tags, up to 2 types.
pub fn tiny_instance(rng: &mut ChaCha8Rng) -> ExtendedGraph {
    let n = rng.gen_range(2..=4);
    let tags = rng.gen_range(1..=3);
    let types = rng.gen_range(1..=2);
    random_instance(rng, n, tags, types)
}

/// Tiny instances shared by the decoding and partition checks.
pub fn tiny_instances(cfg: &SelftestConfig) -> Vec<ExtendedGraph> {
    let mut rng = rng_for(cfg, 1);
    (0..cfg.instances).map(|_| tiny_instance(&mut rng)).collect()
}

/// Decoding against exhaustive search.
pub fn check_map_oracle(cfg: &SelftestConfig, graphs: &[ExtendedGraph]) -> CheckResult {
    let tol = 1e-6 * cfg.tolerance_scale;
    let solver = SolverConfig::default();
    let budget = EnumerationBudget::default();
    let (mut feasible, mut bounded, mut optimal) = (0, 0, 0);
    let mut worst_excess = f64::NEG_INFINITY;
    for g in graphs {
        let res = map_inference(g, &solver).expect("valid configuration");
        let Some(z) = res.z_integral.as_ref().filter(|z| check_feasible(g, z).is_ok()) else {
            continue;
        };
        feasible += 1;
        let w = weight_of(g, z);
        let frac = weight_of(g, &res.z_fractional);
        worst_excess = worst_excess.max(w - frac);
        if w <= frac + tol {
            bounded += 1;
        }
        let (best, _) = exact_map(g, &budget).expect("within budget").expect("an entity exists");
        if (w - best).abs() <= tol {
            optimal += 1;
        }
    }
    let total = graphs.len();
    let passed = total > 0 && feasible == total && bounded == total && optimal as f64 >= 0.95 * total as f64;
    CheckResult {
        id: "1",
        name: "map-oracle-equivalence",
        passed,
        detail: format!(
            "instances={total} feasible={feasible} bounded={bounded} optimal={optimal} ({:.4}) max(weight-frac)={worst_excess:.3e}",
            optimal as f64 / total.max(1) as f64
        ),
    }
}

pub fn check_upper_bound(cfg: &SelftestConfig, graphs: &[ExtendedGraph]) -> CheckResult {
    let tol = 1e-9 * cfg.tolerance_scale;
    let budget = EnumerationBudget::default();
    let mut ok = 0;
    let mut min_slack = f64::INFINITY;
    for g in graphs {
        let c = exact_log_partition(g, &budget).expect("within budget");
        let s = surrogate_log_partition(g).0;
        min_slack = min_slack.min(s - c);
        if s >= c - tol {
            ok += 1;
        }
    }
    CheckResult {
        id: "2",
        name: "surrogate-upper-bound",
        passed: ok == graphs.len() && ok > 0,
        detail: format!("instances={} holds={ok} min(surrogate-exact)={min_slack:.3e}", graphs.len()),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest relative error between `grad` and central differences of `f`.
fn fd_error(z: &[f64], grad: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-4;
    let mut p = z.to_vec();
    let mut worst: f64 = 0.0;
    for j in 0..z.len() {
        p[j] = z[j] + h;
        let up = f(&p);
        p[j] = z[j] - h;
        let down = f(&p);
        p[j] = z[j];
        worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * h)));
    }
    worst
}

fn graph_with(g: &ExtendedGraph, theta: &[f64]) -> ExtendedGraph {
    let mut h = g.clone();
    h.set_weights(&SolutionVector::from_parts(
        theta[..g.num_vertices()].to_vec(),
        theta[g.num_vertices()..].to_vec(),
    ));
    h
}

/// Analytic gradients against central finite differences.
pub fn check_gradients(cfg: &SelftestConfig) -> CheckResult {
    let tol = 1e-5 * cfg.tolerance_scale;
    let mut rng = rng_for(cfg, 3);
    let runs = 50.max(cfg.instances / 4);
    let mut worst = [0.0f64; 4];
    for _ in 0..runs {
        let g = tiny_instance(&mut rng);
        let theta = g.weights();
        // surrogate log-partition (root weight is not a free parameter)
        let (_, grad) = surrogate_log_partition(&g);
        let e = fd_error(theta.as_slice(), grad.as_slice(), &mut |t| surrogate_log_partition(&graph_with(&g, t)).0);
        worst[0] = worst[0].max(e);
        // supervised loss against the best feasible structure
        let (_, target) = exact_map(&g, &EnumerationBudget::default())
            .expect("within budget")
            .expect("an entity exists");
        let rep = supervised_loss(&g, &target).expect("matching dimensions");
        let e = fd_error(theta.as_slice(), rep.grad.as_slice(), &mut |t| {
            supervised_loss(&graph_with(&g, t), &target).unwrap().loss
        });
        worst[1] = worst[1].max(e);
        // both penalties at a random point of the box
        let z: Vec<f64> = (0..g.dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let beta = rng.gen_range(0.1..2.0);
        for (k, cs) in [build_ilp1_constraints(&g), build_ilp2_constraints(&g)].iter().enumerate() {
            let (_, grad) = penalty_value_grad(cs, &z, beta);
            let e = fd_error(&z, &grad, &mut |p| penalty_value_grad(cs, p, beta).0);
            worst[2 + k] = worst[2 + k].max(e);
        }
    }
    CheckResult {
        id: "3",
        name: "gradient-checks",
        passed: worst.iter().all(|&w| w <= tol),
        detail: format!(
            "instances={runs} max_rel_err surrogate={:.3e} supervised={:.3e} penalty_eq={:.3e} penalty_ineq={:.3e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    }
}

/// The alignment dynamic program against exhaustive unconstrained search.
pub fn check_dp_exact(cfg: &SelftestConfig) -> CheckResult {
    let tol = 1e-9 * cfg.tolerance_scale;
    let mut rng = rng_for(cfg, 4);
    let budget = EnumerationBudget {
        max_len: 5,
        ..Default::default()
    };
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    let total = cfg.instances;
    for _ in 0..total {
        let (g, ast) = loop {
            let n = rng.gen_range(1..=5);
            let (tags, types) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
            let g = random_instance(&mut rng, n, tags, types);
            if let Some(a) = random_ast(&mut rng, g.grammar(), 5, false) {
                break (g, a);
            }
        };
        let theta = g.weights();
        let (value, _) = dp_align(&g, &ast, &theta).expect("valid AST");
        let best = enumerate_alignments(&g, &ast, false, &budget)
            .expect("within budget")
            .iter()
            .filter_map(|al| alignment_score(&g, &ast, al, &theta))
            .fold(f64::NEG_INFINITY, f64::max);
        let err = if value == best { 0.0 } else { (value - best).abs() };
        worst = worst.max(err);
        if err <= tol {
            ok += 1;
        }
    }
    CheckResult {
        id: "4",
        name: "alignment-dp-exactness",
        passed: ok == total && total > 0,
        detail: format!("pairs={total} exact={ok} max_abs_err={worst:.3e}"),
    }
}

fn line_objective(theta: &SolutionVector, cs: &ConstraintSystem, z: &SolutionVector, d: &SolutionVector, beta: f64, gamma: f64) -> f64 {
    let mut p = z.clone();
    p.add_scaled(gamma, d);
    crate::solver::smoothed_objective(theta, cs, &p, beta)
}

fn grid_argmax(f: impl Fn(f64) -> f64, points: usize) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=points {
        let g = k as f64 / points as f64;
        let v = f(g);
        if v > best.0 {
            best = (v, g);
        }
    }
    best.1
}

/// Line searches against a dense grid.
pub fn check_step_sizes(cfg: &SelftestConfig) -> CheckResult {
    let tol_eq = 1e-4 * cfg.tolerance_scale;
    let tol_ineq = (2f64.powi(-10) + 1e-6) * cfg.tolerance_scale;
    let mut rng = rng_for(cfg, 5);
    let pairs = 100.max(cfg.instances / 2);
    let (mut ok_eq, mut ok_ineq) = (0, 0);
    let (mut worst_eq, mut worst_ineq): (f64, f64) = (0.0, 0.0);
    for _ in 0..pairs {
        let g = tiny_instance(&mut rng);
        let theta = g.weights();
        // z: mixture of two LMO vertices, d towards a third
        let mut z = lmo_sa(&g, &random_psi(&mut rng, &g));
        let other = lmo_sa(&g, &random_psi(&mut rng, &g));
        let lam = rng.gen_range(0.0..1.0);
        z.add_scaled(lam, &other.sub(&z));
        let d = lmo_sa(&g, &random_psi(&mut rng, &g)).sub(&z);
        let beta = rng.gen_range(0.05..2.0);

        let cs = build_ilp1_constraints(&g);
        let step = step_size_equality(&theta, &cs, &z, &d, beta);
        let grid = grid_argmax(|gm| line_objective(&theta, &cs, &z, &d, beta, gm), 100_000);
        let e = (step - grid).abs();
        worst_eq = worst_eq.max(e);
        if e <= tol_eq {
            ok_eq += 1;
        }

        let cs = build_ilp2_constraints(&g);
        // scale up to make the inequality rows bind
        let mut z2 = z.clone();
        z2.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
        let step = step_size_inequality(&theta, &cs, &z2, &d, beta, 10);
        let grid = grid_argmax(|gm| line_objective(&theta, &cs, &z2, &d, beta, gm), 100_000);
        let e = (step - grid).abs();
        worst_ineq = worst_ineq.max(e);
        if e <= tol_ineq {
            ok_ineq += 1;
        }
    }
    CheckResult {
        id: "5",
        name: "step-size-correctness",
        passed: ok_eq == pairs && ok_ineq == pairs,
        detail: format!(
            "pairs={pairs} closed_form_ok={ok_eq} (max_err={worst_eq:.3e}) bisection_ok={ok_ineq} (max_err={worst_ineq:.3e})"
        ),
    }
}

fn random_psi(rng: &mut ChaCha8Rng, g: &ExtendedGraph) -> SolutionVector {
    let mut s = SolutionVector::zeros(g);
    s.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    s
}

/// Monotone objective with frozen beta, and the share of default runs
/// reaching the gap tolerance.
pub fn check_fw_sanity(cfg: &SelftestConfig, graphs: &[ExtendedGraph]) -> CheckResult {
    let tol = 1e-9 * cfg.tolerance_scale;
    let frozen = SolverConfig {
        freeze_beta: true,
        max_iters: 100,
        ..Default::default()
    };
    let mut rng = rng_for(cfg, 6);
    let mut runs = 0;
    let mut monotone = 0;
    let mut check = |trace: &[crate::solver::TraceRecord]| {
        runs += 1;
        if trace.windows(2).all(|w| w[1].objective >= w[0].objective - tol) {
            monotone += 1;
        }
    };
    for g in graphs {
        check(&map_inference(g, &frozen).expect("valid configuration").trace);
        if let Some(ast) = random_ast(&mut rng, g.grammar(), g.n(), false) {
            if let Ok(r) = latent_anchor(g, &ast, &frozen) {
                check(&r.solve.trace);
            }
        }
    }
    let default = SolverConfig::default();
    let mut converged = 0;
    let mut min_gap = f64::INFINITY;
    let mut gaps = Vec::new();
    for g in graphs {
        let r = map_inference(g, &default).expect("valid configuration");
        min_gap = min_gap.min(r.dual_gap);
        gaps.push(r.dual_gap);
        if r.dual_gap <= default.eps * cfg.tolerance_scale {
            converged += 1;
        }
    }
    gaps.sort_by(f64::total_cmp);
    let median = gaps.get(gaps.len() / 2).copied().unwrap_or(0.0);
    let share = converged as f64 / graphs.len().max(1) as f64;
    CheckResult {
        id: "6",
        name: "conditional-gradient-sanity",
        passed: monotone == runs && share >= 0.9 && min_gap >= -1e-9,
        detail: format!(
            "frozen_runs={runs} monotone={monotone} converged={converged}/{} ({share:.4}) median_gap={median:.3e} min_gap={min_gap:.3e}",
            graphs.len()
        ),
    }
}

/// The two-word example decoded from its weight file.
pub fn check_list_states(_cfg: &SelftestConfig) -> CheckResult {
    let run = || -> crate::Result<(String, Vec<usize>, f64, f64)> {
        let gr = Arc::new(parse_grammar(LIST_STATES_GRAMMAR)?);
        let w = WeightFile::parse(LIST_STATES_WEIGHTS, &gr)?;
        let n = LIST_STATES_SENTENCE.split_whitespace().count();
        let g = build_graph(n, gr.clone(), &w);
        let unconstrained = weight_of(&g, &lmo_sa(&g, &g.weights()));
        let res = map_inference(&g, &SolverConfig::default())?;
        let z = res
            .z_integral
            .ok_or_else(|| crate::Error::Infeasible("no integral solution".into()))?;
        let parse = solution_to_ast(&g, &z)?;
        Ok((serialize_ast(&gr, &parse.ast), parse.words(&g), weight_of(&g, &z), unconstrained))
    };
    match run() {
        Ok((program, words, w, unc)) => CheckResult {
            id: "9",
            name: "list-states-example",
            passed: program == "state_all" && words == [2] && (w - 2.5).abs() < 1e-9 && (unc - 3.5).abs() < 1e-9,
            detail: format!("program={program} words={words:?} objective={w} unconstrained={unc}"),
        },
        Err(e) => CheckResult {
            id: "9",
            name: "list-states-example",
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Every timing-independent check.
pub fn run_selftest(cfg: &SelftestConfig) -> Vec<CheckResult> {
    let graphs = tiny_instances(cfg);
    vec![
        check_map_oracle(cfg, &graphs),
        check_upper_bound(cfg, &graphs),
        check_gradients(cfg),
        check_dp_exact(cfg),
        check_step_sizes(cfg),
        check_fw_sanity(cfg, &graphs),
        check_list_states(cfg),
    ]
}

/// One line per check followed by a summary line.
pub fn format_report(cfg: &SelftestConfig, results: &[CheckResult]) -> String {
    let mut s = format!(
        "selftest seed={} instances={} tolerance_scale={}\n",
        cfg.seed, cfg.instances, cfg.tolerance_scale
    );
    for r in results {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    let passed = results.iter().filter(|r| r.passed).count();
    s.push_str(&format!("summary passed={passed} failed={}\n", results.len() - passed));
    s
}
