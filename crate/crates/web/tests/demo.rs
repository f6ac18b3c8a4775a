use serde_json::Value;

use semgraph_web::{anchor_program, decode_sentence, default_grammar, default_sentence, default_weights, partition_bound};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).expect("valid JSON")
}

#[test]
fn decode_reproduces_list_states() {
    let v = parse(decode_sentence(&default_grammar(), &default_sentence(), &default_weights(), 500, 1.0));
    assert_eq!(v["program"], "state_all");
    assert_eq!(v["integral"], true);
    assert!((v["objective"].as_f64().unwrap() - 2.5).abs() < 1e-9);
    assert!((v["unconstrained"].as_f64().unwrap() - 3.5).abs() < 1e-9);
    assert_eq!(v["anchors"][0]["word"], "states");
    let trace = v["trace"].as_array().unwrap();
    assert_eq!(trace.len(), v["iterations"].as_u64().unwrap() as usize + 1);
    assert!(trace.iter().all(|r| r["gap"].as_f64().unwrap() >= -1e-9));
    assert!(!v["fractional"].as_array().unwrap().is_empty());
}

#[test]
fn anchor_lands_on_the_only_matching_word() {
    let v = parse(anchor_program(&default_grammar(), &default_sentence(), &default_weights(), "state_all", 200, 1.0));
    assert_eq!(v["injective"], true);
    assert_eq!(v["pairs"][0]["word_index"], 2);
    assert_eq!(v["pairs"][0]["word"], "states");
}

#[test]
fn surrogate_bounds_exact_partition() {
    let v = parse(partition_bound(&default_grammar(), &default_sentence(), &default_weights()));
    let (s, e) = (v["surrogate"].as_f64().unwrap(), v["exact"].as_f64().unwrap());
    assert!(s >= e);
    assert!((v["slack"].as_f64().unwrap() - (s - e)).abs() < 1e-12);
    assert!((v["map"].as_f64().unwrap() - 2.5).abs() < 1e-9);
}

#[test]
fn bad_input_becomes_an_error_object() {
    let g = default_grammar();
    let w = default_weights();
    for out in [
        decode_sentence("tag x", "a b", "", 10, 1.0),
        decode_sentence(&g, "   ", "", 10, 1.0),
        decode_sentence(&g, "states", &w, 10, 1.0),
        decode_sentence(&g, "List states", &w, 10, -1.0),
        anchor_program(&g, "List states", &w, "loc_1", 10, 1.0),
        partition_bound(&g, "a b c d e f", ""),
    ] {
        let v = parse(out);
        assert!(v["error"].is_string(), "{v}");
    }
}
