use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srnas::costmodel::arch_flops;
use srnas::evaluators::{
    EvalError, Evaluator, ExternalConfig, ExternalEvaluator, ExternalPool, SurrogateConfig, SurrogateEvaluator,
};
use srnas::searchspace::{random_arch, ArchSpec, SpaceConfig};
use tempfile::TempDir;

fn surrogate_endpoint() -> ExternalConfig {
    ExternalConfig::new(vec![env!("CARGO_BIN_EXE_srnas").into(), "serve-surrogate".into()])
}

/// An endpoint written as a shell loop; `$id` holds the request id.
fn scripted(body: &str) -> ExternalConfig {
    let script = format!(
        "while IFS= read -r line; do id=$(printf '%s' \"$line\" | sed 's/.*\"id\":\\([0-9]*\\).*/\\1/'); {body}; done"
    );
    let mut cfg = ExternalConfig::new(vec!["sh".into(), "-c".into(), script]);
    cfg.timeout = Duration::from_secs(10);
    cfg
}

fn archs(n: usize, seed: u64) -> Vec<ArchSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_arch(&SpaceConfig::default(), &mut rng)).collect()
}

fn local_surrogate() -> SurrogateEvaluator {
    SurrogateEvaluator::new(SpaceConfig::default(), SurrogateConfig::default())
}

#[test]
fn surrogate_endpoint_round_trips() {
    let mut remote = ExternalEvaluator::spawn(surrogate_endpoint()).unwrap();
    remote.ping().unwrap();
    let mut local = local_surrogate();
    for arch in archs(5, 1) {
        let r = remote.evaluate(&arch).unwrap();
        let l = local.evaluate(&arch).unwrap();
        assert_eq!(r.psnr, l.psnr);
        assert_eq!(r.cost, l.cost);
        assert_eq!(r.meta.evaluator, "external");
    }
    let ack = remote.train_hook(&archs(3, 2), 10, 1e-3).unwrap();
    assert_eq!(ack.archs_received, 3);
}

#[test]
fn raw_wire_format() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_srnas"))
        .arg("serve-surrogate")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut ask = |line: &str| -> serde_json::Value {
        writeln!(stdin, "{line}").unwrap();
        serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap()
    };

    let pong = ask(r#"{"protocol":1,"id":4,"cmd":"ping"}"#);
    assert_eq!(pong["id"], 4);
    assert_eq!(pong["ok"], true);

    let arch = ArchSpec::zero(&SpaceConfig::default()).to_json().replace('\n', "");
    let eval = ask(&format!(r#"{{"protocol":1,"id":5.0,"cmd":"eval","arch":{arch},"scale":2,"seed":0}}"#));
    assert_eq!(eval["id"], 5);
    assert!(eval["psnr"].as_f64().unwrap() > 0.0);

    let train = ask(&format!(r#"{{"protocol":1,"id":6,"cmd":"train","archs":[{arch}],"steps":3,"lr":0.01}}"#));
    assert_eq!(train["ok"], true);
    assert_eq!(train["echo"].as_array().unwrap().len(), 1);

    let wrong_version = ask(r#"{"protocol":99,"id":7,"cmd":"ping"}"#);
    assert_eq!(wrong_version["ok"], false);
    assert_eq!(wrong_version["id"], 7);

    let missing_version = ask(r#"{"id":8,"cmd":"ping"}"#);
    assert_eq!(missing_version["ok"], false);

    let garbage = ask("not json");
    assert_eq!(garbage["ok"], false);

    let fractional = ask(r#"{"protocol":1,"id":9.5,"cmd":"ping"}"#);
    assert_eq!(fractional["ok"], false);

    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn missing_cost_falls_back_to_the_cost_model() {
    let cfg = scripted(r#"echo "{\"id\":$id,\"ok\":true,\"psnr\":31.2,\"cost\":null}""#);
    let (shape, cost) = (cfg.cost_shape, cfg.cost);
    let mut ev = ExternalEvaluator::spawn(cfg).unwrap();
    let arch = &archs(1, 3)[0];
    let m = ev.evaluate(arch).unwrap();
    assert_eq!(m.psnr, 31.2);
    assert_eq!(m.cost, arch_flops(arch, shape, &cost).unwrap().total_macs as f64);
}

#[test]
fn reported_cost_is_used() {
    let mut ev =
        ExternalEvaluator::spawn(scripted(r#"echo "{\"id\":$id,\"ok\":true,\"psnr\":30,\"cost\":2.5e9}""#)).unwrap();
    assert_eq!(ev.evaluate(&archs(1, 4)[0]).unwrap().cost, 2.5e9);
}

#[test]
fn missing_psnr_is_malformed() {
    let mut ev = ExternalEvaluator::spawn(scripted(r#"echo "{\"id\":$id,\"ok\":true}""#)).unwrap();
    assert!(matches!(ev.evaluate(&archs(1, 5)[0]), Err(EvalError::Malformed(_))));
}

#[test]
fn non_finite_psnr_is_rejected() {
    let mut ev = ExternalEvaluator::spawn(scripted(r#"echo "{\"id\":$id,\"ok\":true,\"psnr\":-1e999}""#)).unwrap();
    assert!(ev.evaluate(&archs(1, 5)[0]).is_err());
}

#[test]
fn remote_failure_is_reported() {
    let mut ev =
        ExternalEvaluator::spawn(scripted(r#"echo "{\"id\":$id,\"ok\":false,\"error\":\"out of memory\"}""#)).unwrap();
    match ev.evaluate(&archs(1, 6)[0]) {
        Err(EvalError::Remote(msg)) => assert_eq!(msg, "out of memory"),
        other => panic!("expected a remote error, got {other:?}"),
    }
}

#[test]
fn slow_endpoint_times_out() {
    let mut cfg = scripted(r#"sleep 5; echo "{\"id\":$id,\"ok\":true,\"psnr\":30}""#);
    cfg.timeout = Duration::from_millis(200);
    let mut ev = ExternalEvaluator::spawn(cfg).unwrap();
    assert!(matches!(ev.evaluate(&archs(1, 7)[0]), Err(EvalError::Timeout(_))));
}

#[test]
fn stale_responses_are_skipped() {
    let mut ev = ExternalEvaluator::spawn(scripted(
        r#"echo "{\"id\":999,\"ok\":true,\"psnr\":1}"; echo "{\"id\":$id,\"ok\":true,\"psnr\":33}""#,
    ))
    .unwrap();
    assert_eq!(ev.evaluate(&archs(1, 8)[0]).unwrap().psnr, 33.0);
}

#[test]
fn wrong_protocol_version_is_malformed() {
    let mut ev =
        ExternalEvaluator::spawn(scripted(r#"echo "{\"protocol\":2,\"id\":$id,\"ok\":true,\"psnr\":30}""#)).unwrap();
    assert!(matches!(ev.evaluate(&archs(1, 9)[0]), Err(EvalError::Malformed(_))));
}

#[test]
fn crashed_endpoint_is_relaunched() {
    let dir = TempDir::new().unwrap();
    let marker = dir.path().join("crashed");
    let script = format!(
        "if [ -e '{m}' ]; then while IFS= read -r line; do id=$(printf '%s' \"$line\" | sed 's/.*\"id\":\\([0-9]*\\).*/\\1/'); \
         echo \"{{\\\"id\\\":$id,\\\"ok\\\":true,\\\"psnr\\\":30}}\"; done; else touch '{m}'; read -r line; exit 1; fi",
        m = marker.display()
    );
    let mut cfg = ExternalConfig::new(vec!["sh".into(), "-c".into(), script]);
    cfg.timeout = Duration::from_secs(10);
    let mut ev = ExternalEvaluator::spawn(cfg).unwrap();
    let arch = &archs(1, 10)[0];
    assert!(matches!(ev.evaluate(arch), Err(EvalError::Closed)));
    assert_eq!(ev.evaluate(arch).unwrap().psnr, 30.0);
}

#[test]
fn train_echo_must_match() {
    let mut ev = ExternalEvaluator::spawn(scripted(r#"echo "{\"id\":$id,\"ok\":true,\"echo\":[]}""#)).unwrap();
    assert!(matches!(ev.train_hook(&archs(2, 11), 5, 1e-3), Err(EvalError::EchoMismatch)));
    assert_eq!(ev.train_hook(&[], 5, 1e-3).unwrap().archs_received, 0);
}

#[test]
fn pool_preserves_batch_order() {
    let mut pool = ExternalPool::spawn(surrogate_endpoint(), 3).unwrap();
    assert_eq!(pool.size(), 3);
    let batch = archs(10, 12);
    let remote = pool.evaluate_batch(&batch).unwrap();
    let mut local = local_surrogate();
    for (arch, r) in batch.iter().zip(remote) {
        assert_eq!(r.psnr, local.evaluate(arch).unwrap().psnr);
    }
    assert_eq!(pool.train_hook(&batch[..2], 4, 1e-3).unwrap().archs_received, 2);
}

#[test]
fn pool_train_fails_if_any_worker_fails() {
    let mut pool = ExternalPool::spawn(scripted(r#"echo "{\"id\":$id,\"ok\":false,\"error\":\"busy\"}""#), 2).unwrap();
    assert!(matches!(pool.train_hook(&archs(1, 13), 1, 1e-3), Err(EvalError::Remote(_))));
}
