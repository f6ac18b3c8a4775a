//! Random grammars, programs, graphs and toy corpora.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Instance;
use crate::error::Result;
use crate::grammar::{ast_from_term, Ast, Grammar, Term};
use crate::graph::{build_graph, ExtendedGraph, ZeroWeights};

/// Grammar with `num_tags` tags over `num_types` types. Tag 0 is always an
/// entity; every other tag is an entity with probability 1/2 and otherwise
/// takes one or two arguments.
pub fn random_grammar<R: Rng>(rng: &mut R, num_tags: usize, num_types: usize) -> Grammar {
    assert!(num_tags >= 1 && num_types >= 1);
    let types: Vec<String> = (0..num_types).map(|t| format!("t{t}")).collect();
    let mut tags = Vec::new();
    for k in 0..num_tags {
        let ty = types[rng.gen_range(0..num_types)].clone();
        let mut args: Vec<(String, usize)> = Vec::new();
        if k > 0 && rng.gen_bool(0.5) {
            for _ in 0..rng.gen_range(1..=2) {
                let at = types[rng.gen_range(0..num_types)].clone();
                match args.iter_mut().find(|(t, _)| *t == at) {
                    Some(e) => e.1 += 1,
                    None => args.push((at, 1)),
                }
            }
        }
        tags.push((format!("g{k}"), ty, args));
    }
    Grammar::new(&types, &tags).expect("generated grammar is well formed")
}

/// Graph over a random grammar with every weight uniform in `[-1, 1]` (the
/// root vertex stays at 0).
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, num_tags: usize, num_types: usize) -> ExtendedGraph {
    let gr = Arc::new(random_grammar(rng, num_tags, num_types));
    random_weights(rng, build_graph(n, gr, &ZeroWeights))
}

pub fn random_weights<R: Rng>(rng: &mut R, mut g: ExtendedGraph) -> ExtendedGraph {
    for w in g.mu.iter_mut().skip(1) {
        *w = rng.gen_range(-1.0..=1.0);
    }
    for w in g.phi.iter_mut() {
        *w = rng.gen_range(-1.0..=1.0);
    }
    g
}

/// Random valid program with at most `max_vertices` vertices, or `None` when
/// 200 attempts fail. With `distinct`, no tag occurs twice.
pub fn random_ast<R: Rng>(rng: &mut R, g: &Grammar, max_vertices: usize, distinct: bool) -> Option<Ast> {
    for _ in 0..200 {
        let mut used = vec![false; g.num_tags()];
        let mut size = 0;
        let root = rng.gen_range(0..g.num_tags());
        if let Some(t) = grow(rng, g, root, &mut used, &mut size, max_vertices, distinct) {
            return Some(ast_from_term(&t, g).expect("generated program is valid"));
        }
    }
    None
}

fn grow<R: Rng>(
    rng: &mut R,
    g: &Grammar,
    tag: usize,
    used: &mut [bool],
    size: &mut usize,
    max: usize,
    distinct: bool,
) -> Option<Term> {
    *size += 1;
    used[tag] = true;
    if *size > max {
        return None;
    }
    let mut args = Vec::new();
    for t in 0..g.num_types() {
        for _ in 0..g.tag_args(tag, t) {
            let cands: Vec<usize> = (0..g.num_tags())
                .filter(|&k| g.tag_type(k) == t && !(distinct && used[k]))
                .collect();
            let &child = cands.choose(rng)?;
            args.push(grow(rng, g, child, used, size, max, distinct)?);
        }
    }
    args.shuffle(rng);
    Some(Term {
        name: g.tag_name(tag).to_string(),
        args,
    })
}

/// Grammar, lexicon and filler vocabulary of a toy corpus.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub grammar: Arc<Grammar>,
    pub lexicon: Vec<Vec<String>>,
    pub fillers: Vec<String>,
}

impl SyntheticCorpus {
    /// Two types `a` and `b`, two entities per type, and `num_tags - 4`
    /// predicates of arity one or two. Every tag gets one or two words of its
    /// own.
    pub fn new<R: Rng>(rng: &mut R, num_tags: usize) -> Self {
        assert!(num_tags > 4);
        let types = ["a", "b"];
        let mut tags: Vec<(String, String, Vec<(String, usize)>)> = Vec::new();
        for ty in types {
            for k in 0..2 {
                tags.push((format!("{ty}{k}"), ty.to_string(), vec![]));
            }
        }
        for k in 0..num_tags - 4 {
            let ty = types[rng.gen_range(0..2)];
            let mut args: Vec<(String, usize)> = Vec::new();
            for _ in 0..rng.gen_range(1..=2) {
                let at = types[rng.gen_range(0..2)].to_string();
                match args.iter_mut().find(|(t, _)| *t == at) {
                    Some(e) => e.1 += 1,
                    None => args.push((at, 1)),
                }
            }
            tags.push((format!("p{k}"), ty.to_string(), args));
        }
        let grammar = Arc::new(Grammar::new(&types.map(String::from), &tags).expect("valid grammar"));
        let lexicon = (0..num_tags)
            .map(|k| (0..rng.gen_range(1..=2)).map(|s| format!("w{k}{}", ['x', 'y'][s])).collect())
            .collect();
        let fillers = (0..6).map(|k| format!("f{k}")).collect();
        SyntheticCorpus {
            grammar,
            lexicon,
            fillers,
        }
    }

    /// A program with distinct tags written in preorder, one word per
    /// vertex, with up to `max_fillers` filler words mixed in.
    pub fn sample<R: Rng>(&self, rng: &mut R, max_vertices: usize, max_fillers: usize) -> Instance {
        let program = loop {
            if let Some(a) = random_ast(rng, &self.grammar, max_vertices, true) {
                break a;
            }
        };
        let mut tokens: Vec<Option<usize>> = (0..program.len()).map(Some).collect();
        for _ in 0..rng.gen_range(0..=max_fillers) {
            let pos = rng.gen_range(0..=tokens.len());
            tokens.insert(pos, None);
        }
        let mut anchoring = vec![0; program.len()];
        let words = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| match *t {
                Some(u) => {
                    anchoring[u] = i + 1;
                    self.lexicon[program.label(u)].choose(rng).unwrap().clone()
                }
                None => self.fillers.choose(rng).unwrap().clone(),
            })
            .collect();
        Instance {
            words,
            program,
            anchoring: Some(anchoring),
        }
    }
}

/// Train and test splits drawn from one corpus.
pub fn synthetic_dataset<R: Rng>(
    rng: &mut R,
    num_tags: usize,
    train: usize,
    test: usize,
) -> Result<(SyntheticCorpus, Vec<Instance>, Vec<Instance>)> {
    let corpus = SyntheticCorpus::new(rng, num_tags);
    let tr = (0..train).map(|_| corpus.sample(rng, 5, 4)).collect();
    let te = (0..test).map(|_| corpus.sample(rng, 5, 4)).collect();
    Ok((corpus, tr, te))
}
