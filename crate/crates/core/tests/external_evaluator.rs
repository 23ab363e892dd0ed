//! The shell-command evaluator against small mock scripts.

use std::time::{Duration, Instant};

use paretomerge::objectives::ExternalCommandEvaluator;
use paretomerge::tensor_store::{load_tensor_map, TensorMap};
use paretomerge::Error;

fn model() -> TensorMap {
    let mut m = TensorMap::new();
    m.push("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    m
}

fn script(dir: &tempfile::TempDir, body: &str) -> String {
    let path = dir.path().join("eval.sh");
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    format!("sh {} {{model}} {{output}}", path.display())
}

#[test]
fn scores_are_read_from_the_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("seen.btc");
    let cmd = script(
        &dir,
        &format!(
            "cp \"$1\" {}\necho '{{\"scores\": {{\"gpqa\": 0.41, \"aime\": 0.2}}}}' > \"$2\"",
            marker.display()
        ),
    );
    let eval = ExternalCommandEvaluator::new(cmd, Duration::from_secs(30)).unwrap();
    let scores = eval.run(&model()).unwrap();
    assert_eq!(scores.get("gpqa"), Some(0.41));
    assert_eq!(scores.get("aime"), Some(0.2));
    // The command saw the model we passed in.
    assert!(load_tensor_map(&marker).unwrap().bit_eq(&model()));
}

#[test]
fn nonzero_exit_is_an_evaluation_error_with_output() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(&dir, "echo 'benchmark harness crashed' >&2\nexit 1");
    let eval = ExternalCommandEvaluator::new(cmd, Duration::from_secs(30)).unwrap();
    match eval.run(&model()) {
        Err(Error::Evaluation(msg)) => assert!(msg.contains("benchmark harness crashed"), "{msg}"),
        other => panic!("expected evaluation error, got {other:?}"),
    }
}

#[test]
fn missing_score_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(&dir, "true");
    let eval = ExternalCommandEvaluator::new(cmd, Duration::from_secs(30)).unwrap();
    assert!(matches!(eval.run(&model()), Err(Error::Format(_))));
}

#[test]
fn slow_command_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = script(&dir, "sleep 5");
    let eval = ExternalCommandEvaluator::new(cmd, Duration::from_millis(200)).unwrap();
    let start = Instant::now();
    assert!(matches!(eval.run(&model()), Err(Error::Timeout(_))));
    assert!(start.elapsed() < Duration::from_secs(4));
}

#[test]
fn template_without_placeholders_is_rejected() {
    assert!(matches!(
        ExternalCommandEvaluator::new("run-eval", Duration::from_secs(1)),
        Err(Error::Config(_))
    ));
}
