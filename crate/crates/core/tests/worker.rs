use std::collections::BTreeMap;
use std::sync::Arc;

use modecfg::evaluation::{Cost, EvalCache, EvalRequest, Evaluator, ResponseMatrix};
use modecfg::interface::worker::{PoolConfig, WorkerEvaluator, WorkerPool, MAX_RESTARTS};
use modecfg::paramspace::Configuration;
use modecfg::Error;

fn demo(args: &[&str], workers: usize, window: usize) -> PoolConfig {
    let mut command = vec![env!("CARGO_BIN_EXE_modecfg-demo-worker").to_string()];
    command.extend(args.iter().map(|a| a.to_string()));
    PoolConfig {
        command,
        workers,
        max_outstanding: window,
    }
}

fn script(body: &str) -> PoolConfig {
    PoolConfig {
        command: vec!["sh".into(), "-c".into(), body.into()],
        workers: 1,
        max_outstanding: 1,
    }
}

fn config(a: f64, b: f64) -> Configuration {
    [("a".to_string(), a), ("b".to_string(), b)].into_iter().collect()
}

fn ids(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

const INSTANCES: [&str; 8] = ["0", "0.5", "1", "1.5", "2", "-1", "3", "0.25"];

fn evaluate(cfg: PoolConfig, instances: &[&str]) -> Result<(BTreeMap<String, Cost>, usize), Error> {
    let eval = WorkerEvaluator::new(WorkerPool::spawn(cfg)?, Arc::new(EvalCache::new()), ids(instances));
    let out = eval.evaluate_config(&config(2.0, 0.5), instances)?;
    Ok((out, eval.restarts()))
}

#[test]
fn demo_worker_costs() {
    let (out, _) = evaluate(demo(&[], 1, 1), &["0", "1"]).unwrap();
    let l2 = 2f64.ln();
    let l05 = 0.5f64.ln();
    assert_eq!(out["0"], Cost::Value(l2 * l2 + l05 * l05));
    assert_eq!(out["1"], Cost::Value((l2 - 1.0).powi(2) + (l05 - 1.0).powi(2)));
}

#[test]
fn reverse_order_responses_give_identical_results() {
    let (in_order, _) = evaluate(demo(&[], 1, 1), &INSTANCES).unwrap();
    let (reversed, _) = evaluate(demo(&["--reverse", "4"], 1, 4), &INSTANCES).unwrap();
    let (pooled, _) = evaluate(demo(&[], 3, 3), &INSTANCES).unwrap();
    assert_eq!(in_order, reversed);
    assert_eq!(in_order, pooled);
}

#[test]
fn instance_order_does_not_change_costs() {
    let (a, _) = evaluate(demo(&[], 2, 2), &INSTANCES).unwrap();
    let mut shuffled = INSTANCES;
    shuffled.reverse();
    shuffled.swap(1, 5);
    let (b, _) = evaluate(demo(&[], 2, 2), &shuffled).unwrap();
    assert_eq!(a, b);
}

#[test]
fn crash_fails_outstanding_and_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("marker");
    let marker = marker.to_str().unwrap();
    let (clean, _) = evaluate(demo(&[], 1, 1), &INSTANCES).unwrap();
    let (out, restarts) = evaluate(demo(&["--crash-on", "1.5", "--crash-marker", marker], 1, 1), &INSTANCES).unwrap();
    assert_eq!(restarts, 1);
    for (k, v) in &out {
        if k == "1.5" {
            assert_eq!(*v, Cost::Failed);
        } else {
            assert_eq!(*v, clean[k]);
        }
    }
}

#[test]
fn restarts_are_bounded() {
    // crashes on every request, so the pool eventually runs out of workers
    let cfg = script(r#"read l; echo '{"hello":1}'; read l; exit 1"#);
    let err = evaluate(cfg, &INSTANCES).unwrap_err();
    assert!(matches!(err, Error::Worker(_)), "{err}");
    let cfg = script(r#"read l; echo '{"hello":1}'; read l; exit 1"#);
    let (out, restarts) = evaluate(cfg, &INSTANCES[..MAX_RESTARTS + 1]).unwrap();
    assert_eq!(restarts, MAX_RESTARTS);
    assert!(out.values().all(|c| *c == Cost::Failed));
}

#[test]
fn fail_response_is_a_failed_cost() {
    let cfg = script(r#"read l; echo '{"hello":1}'; read l; echo '{"id":0,"cost":"fail"}'; read l"#);
    let (out, _) = evaluate(cfg, &["x"]).unwrap();
    assert_eq!(out["x"], Cost::Failed);

    let mut m = ResponseMatrix::new(ids(&["x", "y"]));
    m.push_partial(config(1.0, 1.0), &[0, 1], &[out["x"], Cost::Value(3.0)]).unwrap();
    assert_eq!(m.mean_per_config(None).unwrap(), vec![(6.0 + 3.0) / 2.0]);
}

#[test]
fn protocol_violations_abort_with_the_line() {
    let cases = [
        (r#"read l; echo '{"hello":1}'; read l; echo 'garbage here'; read l"#, "garbage here"),
        (r#"read l; echo '{"hello":1}'; read l; echo '{"id":999,"cost":1.0}'; read l"#, r#"{"id":999,"cost":1.0}"#),
        (r#"read l; echo '{"hello":1}'; read l; echo '{"id":0}'; read l"#, r#"{"id":0}"#),
    ];
    for (body, line) in cases {
        match evaluate(script(body), &["x"]) {
            Err(Error::Protocol { line: got, .. }) => assert_eq!(got, line),
            other => panic!("expected protocol error, got {other:?}"),
        }
    }
}

#[test]
fn bad_handshake_is_rejected() {
    match WorkerPool::spawn(script("read l; echo hi")) {
        Err(Error::Protocol { line, .. }) => assert_eq!(line, "hi"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("handshake accepted"),
    }
    assert!(matches!(
        WorkerPool::spawn(PoolConfig::from_command_line("/nonexistent/worker", 1).unwrap()),
        Err(Error::Worker(_))
    ));
}

#[test]
fn cache_hits_send_no_requests() {
    let cache = Arc::new(EvalCache::new());
    let names = ids(&INSTANCES);
    let first = WorkerEvaluator::new(WorkerPool::spawn(demo(&[], 2, 2)).unwrap(), cache.clone(), names.clone());
    let cfg = config(1.5, 4.0);
    let all: Vec<usize> = (0..names.len()).collect();
    let a = first.evaluate(&[EvalRequest { config: &cfg, instances: &all }]).unwrap();
    assert_eq!(first.requests_sent(), INSTANCES.len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    cache.save(&path).unwrap();
    let reloaded = Arc::new(EvalCache::load(&path).unwrap());
    let second = WorkerEvaluator::new(WorkerPool::spawn(demo(&[], 1, 1)).unwrap(), reloaded, names);
    let b = second.evaluate(&[EvalRequest { config: &cfg, instances: &all }]).unwrap();
    assert_eq!(second.requests_sent(), 0);
    assert_eq!(a, b);
}

#[test]
fn duplicate_requests_in_a_batch_are_sent_once() {
    let eval = WorkerEvaluator::new(
        WorkerPool::spawn(demo(&[], 1, 1)).unwrap(),
        Arc::new(EvalCache::new()),
        ids(&["0", "1"]),
    );
    let cfg = config(2.0, 2.0);
    let same = config(2.0, 2.0);
    let out = eval
        .evaluate(&[
            EvalRequest { config: &cfg, instances: &[0, 1] },
            EvalRequest { config: &same, instances: &[1] },
        ])
        .unwrap();
    assert_eq!(eval.requests_sent(), 2);
    assert_eq!(out[0][1], out[1][0]);
}
