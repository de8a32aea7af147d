use opchain::config::{resolve_config, Override, RunConfig};
use opchain::Error;

#[test]
fn empty_file_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "").unwrap();
    let c = resolve_config(Some(&p), &[]).unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.model.lambda1, 0.5);
    assert_eq!(c.model.lambda2, 0.5);
    assert_eq!(c.train.lr0, 0.01);
    assert_eq!(c.train.momentum, 0.9);
    assert_eq!(c.train.weight_decay, 0.0005);
    assert_eq!(c.train.epochs, 150);
    assert_eq!(c.model.dropout, 0.5);
    assert_eq!(c.dataset.ratios, [0.81, 0.09, 0.10]);
}

#[test]
fn flag_overrides_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "[model]\nlambda1 = 0.8\nlambda2 = 0.3\n").unwrap();
    let c = resolve_config(Some(&p), &[Override::flag("model.lambda1", 0, "--lambda1")]).unwrap();
    assert_eq!(c.model.lambda1, 0.0);
    assert_eq!(c.model.lambda2, 0.3);
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "[model]\nlamda1 = 0.1\n[trian]\nx = 1\n").unwrap();
    let err = resolve_config(Some(&p), &[]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("model.lamda1") && msg.contains("trian"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn conflicting_overrides_are_listed() {
    let o = [Override::flag("model.lambda1", 0.1, "--lambda1"), Override::parse("model.lambda1=0.2").unwrap()];
    let err = resolve_config(None, &o).unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("model.lambda1")), "{err}");
    // The same value twice is not a conflict.
    let o = [Override::flag("model.lambda1", 0.1, "--lambda1"), Override::parse("model.lambda1=0.1").unwrap()];
    assert_eq!(resolve_config(None, &o).unwrap().model.lambda1, 0.1);
}

#[test]
fn wrong_type_is_config_error() {
    let err = resolve_config(None, &[Override::parse("train.epochs=many").unwrap()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn echoed_config_reproduces_itself() {
    let o = [Override::parse("train.epochs=7").unwrap(), Override::parse("dataset.chains=[\"AU\",\"MF5\"]").unwrap()];
    let c = resolve_config(None, &o).unwrap();
    assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    let header = c.comment_header();
    assert!(header.lines().all(|l| l.starts_with("# ")));
    let stripped: String = header.lines().map(|l| format!("{}\n", &l[2..])).collect();
    assert_eq!(RunConfig::from_toml(&stripped).unwrap(), c);
}

#[test]
fn model_config_validation_is_a_config_error() {
    let mut c = RunConfig::default();
    c.model.noise_input = "both".into();
    assert!(matches!(c.model_config(5), Err(Error::Config(_))));
}
