use serde_json::{json, Value};

use paretomerge_web::{optimize_json, partition_json, select_json};

fn call(f: fn(&str) -> Result<String, String>, input: Value) -> Value {
    serde_json::from_str(&f(&input.to_string()).unwrap()).unwrap()
}

#[test]
fn partition_splits_at_the_jump() {
    let out = call(
        partition_json,
        json!({"d": [1.0, 1.0, 1.0, 5.0, 5.0, 5.0], "K": 2, "lambda": 0.0}),
    );
    assert_eq!(out["report"]["blocks"], json!([[0, 2], [3, 5]]));
    let costs: Vec<f64> = serde_json::from_value(out["block_costs"].clone()).unwrap();
    assert_eq!(costs, vec![0.0, 0.0]);
}

#[test]
fn partition_reports_bad_input() {
    assert!(partition_json(r#"{"d": [1.0], "K": 3}"#).is_err());
    assert!(partition_json("not json").is_err());
}

#[test]
fn optimize_returns_the_full_budget() {
    let out = call(
        optimize_json,
        json!({"a": [0.2, 0.8], "b": [0.8, 0.3], "n0": 4, "t": 2, "q": 2, "seed": 1, "raw_batches": 32}),
    );
    assert_eq!(out["points"].as_array().unwrap().len(), 4 + 2 * 2);
    let hv: Vec<f64> = serde_json::from_value(out["hypervolume"].clone()).unwrap();
    assert_eq!(hv.len(), 3);
    assert!(hv.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(out["true_front"].as_array().unwrap().len(), 51);
}

#[test]
fn select_drops_dominated_points() {
    let out = call(
        select_json,
        json!({"points": [[1.0, 0.0], [0.5, 0.5], [0.4, 0.4], [0.0, 1.0]], "divisions": 2, "top_k": 1}),
    );
    assert_eq!(out["front_indices"], json!([0, 1, 3]));
    let picks: Vec<usize> = out["selection"]["by_preference"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["index"].as_u64().unwrap() as usize)
        .collect();
    // Preferences (0,1), (0.5,0.5), (1,0).
    assert_eq!(picks, vec![3, 1, 0]);
}
