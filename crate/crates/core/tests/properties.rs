use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semgraph::anchoring::alignment_score;
use semgraph::data::{parse_dataset, write_dataset};
use semgraph::graph::{check_feasible, weight_of};
use semgraph::losses::{surrogate_log_partition, ScorerParams};
use semgraph::oracle::{enumerate_alignments, enumerate_feasible, exact_log_partition, exact_map, EnumerationBudget};
use semgraph::solver::{build_ilp1_constraints, latent_anchor, map_inference, penalty_value_grad, SolverConfig};
use semgraph::synth::{random_ast, random_instance, SyntheticCorpus};
use semgraph::ExtendedGraph;

fn tiny(seed: u64) -> ExtendedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let (tags, types) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
    random_instance(&mut rng, n, tags, types)
}

fn solver() -> SolverConfig {
    SolverConfig {
        max_iters: 100,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoding_is_feasible_and_never_beats_the_oracle(seed in any::<u64>()) {
        let g = tiny(seed);
        let r = map_inference(&g, &solver()).unwrap();
        let zf = r.z_fractional.as_slice();
        prop_assert!(zf.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        prop_assert!(r.dual_gap >= -1e-9);
        let z = r.z_integral.expect("small instances always round");
        prop_assert!(check_feasible(&g, &z).is_ok());
        let (best, _) = exact_map(&g, &EnumerationBudget::default()).unwrap().unwrap();
        prop_assert!(weight_of(&g, &z) <= best + 1e-9);
    }

    #[test]
    fn penalty_vanishes_on_every_feasible_structure(seed in any::<u64>()) {
        let g = tiny(seed);
        let cs = build_ilp1_constraints(&g);
        for z in enumerate_feasible(&g, &EnumerationBudget::default()).unwrap() {
            let (p, grad) = penalty_value_grad(&cs, z.as_slice(), 0.5);
            prop_assert_eq!(p, 0.0);
            prop_assert!(grad.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn surrogate_bounds_the_log_partition(seed in any::<u64>()) {
        let g = tiny(seed);
        let exact = exact_log_partition(&g, &EnumerationBudget::default()).unwrap();
        prop_assert!(surrogate_log_partition(&g).0 >= exact - 1e-9);
    }

    #[test]
    fn anchorings_are_injective_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=5);
        let g = random_instance(&mut rng, n, 3, 2);
        let Some(ast) = random_ast(&mut rng, g.grammar(), n, false) else { return Ok(()) };
        let r = latent_anchor(&g, &ast, &solver()).unwrap();
        prop_assert!(r.alignment.is_injective(&g));
        let theta = g.weights();
        let got = alignment_score(&g, &ast, &r.alignment, &theta).unwrap();
        let best = enumerate_alignments(&g, &ast, true, &EnumerationBudget::default())
            .unwrap()
            .iter()
            .filter_map(|a| alignment_score(&g, &ast, a, &theta))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(got <= best + 1e-9);
    }

    #[test]
    fn datasets_roundtrip(seed in any::<u64>(), tags in 5usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = SyntheticCorpus::new(&mut rng, tags);
        let data: Vec<_> = (0..10).map(|_| corpus.sample(&mut rng, 5, 4)).collect();
        let text = write_dataset(&data, &corpus.grammar);
        prop_assert_eq!(parse_dataset(&text, &corpus.grammar).unwrap(), data);
    }

    #[test]
    fn checkpoints_roundtrip(
        seed in any::<u64>(),
        lr in 0.01f64..2.0,
        updates in prop::collection::vec((0usize..64, -5.0f64..5.0, any::<bool>()), 0..20),
    ) {
        let mut p = ScorerParams::new(64, lr, seed);
        for (i, w, vertex) in updates {
            if vertex { p.vertex_weights[i] = w } else { p.arc_weights[i] = w }
        }
        prop_assert_eq!(ScorerParams::from_text(&p.to_text()).unwrap(), p);
    }
}
