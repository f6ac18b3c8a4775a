//! Browser demo: every export takes plain text and returns a JSON string,
//! `{"error": ...}` on bad input.

use std::sync::Arc;

use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use semgraph::arborescence::lmo_sa;
use semgraph::data::tokenize;
use semgraph::grammar::{parse_grammar, parse_valid_program, serialize_ast};
use semgraph::graph::{build_graph, weight_of, WeightFile};
use semgraph::losses::{decode, surrogate_log_partition};
use semgraph::oracle::{exact_log_partition, exact_map, EnumerationBudget};
use semgraph::selftest::{LIST_STATES_GRAMMAR, LIST_STATES_SENTENCE, LIST_STATES_WEIGHTS};
use semgraph::solver::{latent_anchor, SolveResult, SolverConfig, TraceRecord};
use semgraph::{Error, ExtendedGraph};

#[wasm_bindgen]
pub fn default_grammar() -> String {
    LIST_STATES_GRAMMAR.to_string()
}

#[wasm_bindgen]
pub fn default_sentence() -> String {
    LIST_STATES_SENTENCE.to_string()
}

#[wasm_bindgen]
pub fn default_weights() -> String {
    LIST_STATES_WEIGHTS.to_string()
}

fn graph(grammar: &str, sentence: &str, weights: &str) -> Result<ExtendedGraph, Error> {
    let gr = Arc::new(parse_grammar(grammar)?);
    let words = tokenize(sentence);
    if words.is_empty() {
        return Err(Error::Program("the sentence is empty".into()));
    }
    let wf = WeightFile::parse(weights, &gr)?;
    if wf.max_word() > words.len() {
        return Err(Error::Dimension {
            expected: words.len(),
            got: wf.max_word(),
        });
    }
    Ok(build_graph(words.len(), gr, &wf))
}

fn config(iters: u32, beta0: f64) -> Result<SolverConfig, Error> {
    let cfg = SolverConfig {
        max_iters: iters as usize,
        beta0,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn trace(records: &[TraceRecord]) -> Value {
    records
        .iter()
        .map(|r| json!({"iter": r.iteration, "beta": r.beta, "objective": r.objective, "gap": r.gap, "step": r.step}))
        .collect()
}

fn solve_json(solve: &SolveResult) -> Value {
    json!({
        "gap": solve.dual_gap,
        "iterations": solve.iterations,
        "converged": solve.converged,
        "trace": trace(&solve.trace),
    })
}

fn respond(r: Result<Value, Error>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// MAP decoding with its Frank-Wolfe trace and the relaxed arc masses.
#[wasm_bindgen]
pub fn decode_sentence(grammar: &str, sentence: &str, weights: &str, iters: u32, beta0: f64) -> String {
    respond((|| {
        let g = graph(grammar, sentence, weights)?;
        let p = decode(&g, &config(iters, beta0)?)?;
        let z = &p.solve.z_fractional;
        let mass: Vec<Value> = (0..g.num_arcs())
            .filter(|&a| z.y()[a] > 1e-6)
            .map(|a| json!({"arc": g.arc_name(a), "mass": z.y()[a]}))
            .collect();
        let words = tokenize(sentence);
        let anchors: Vec<Value> = p
            .parse
            .as_ref()
            .map(|parse| {
                parse
                    .words(&g)
                    .iter()
                    .enumerate()
                    .map(|(u, &w)| json!({"vertex": u, "tag": g.grammar().tag_name(parse.ast.label(u)), "word": words[w - 1]}))
                    .collect()
            })
            .unwrap_or_default();
        let unconstrained = weight_of(&g, &lmo_sa(&g, &g.weights()));
        let mut out = solve_json(&p.solve);
        out["program"] = json!(p.program(g.grammar()));
        out["anchors"] = json!(anchors);
        out["objective"] = json!(p.solve.z_integral.as_ref().map(|z| weight_of(&g, z)));
        out["unconstrained"] = json!(unconstrained);
        out["integral"] = json!(p.solve.integral_feasible);
        out["fractional"] = json!(mass);
        Ok(out)
    })())
}

/// Latent anchoring of a given program on the sentence.
#[wasm_bindgen]
pub fn anchor_program(grammar: &str, sentence: &str, weights: &str, program: &str, iters: u32, beta0: f64) -> String {
    respond((|| {
        let g = graph(grammar, sentence, weights)?;
        let ast = parse_valid_program(program, g.grammar())?;
        let r = latent_anchor(&g, &ast, &config(iters, beta0)?)?;
        let words = tokenize(sentence);
        let pairs: Vec<Value> = r
            .alignment
            .words(&g)
            .iter()
            .enumerate()
            .map(|(u, &w)| json!({"vertex": u, "tag": g.grammar().tag_name(ast.label(u)), "word_index": w, "word": words[w - 1]}))
            .collect();
        let mut out = solve_json(&r.solve);
        out["program"] = json!(serialize_ast(g.grammar(), &ast));
        out["pairs"] = json!(pairs);
        out["injective"] = json!(r.solve.integral_feasible);
        Ok(out)
    })())
}

/// Surrogate log-partition next to the exact one and the exact MAP value
/// (sentences of at most four words).
#[wasm_bindgen]
pub fn partition_bound(grammar: &str, sentence: &str, weights: &str) -> String {
    respond((|| {
        let g = graph(grammar, sentence, weights)?;
        let budget = EnumerationBudget::default();
        let (surrogate, _) = surrogate_log_partition(&g);
        let exact = exact_log_partition(&g, &budget)?;
        let map = exact_map(&g, &budget)?.map(|(w, _)| w);
        Ok(json!({
            "surrogate": surrogate,
            "exact": exact,
            "slack": surrogate - exact,
            "map": map,
        }))
    })())
}
