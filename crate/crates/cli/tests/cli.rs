use std::path::Path;
use std::process::{Command, Output};

fn mmgr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = mmgr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY: &str = "synth_items = 32\nsynth_users = 30\nsynth_bits = 2\nsynth_emb_dim = 8\n\
    rq_depth = 1\nrq_codebook_size = 4\nrq_latent_dim = 8\nrq_hidden_dim = 16\nrq_epochs = 2\n\
    layers = 1\nd_model = 16\nd_ff = 32\nmax_len = 9\nepochs = 1\nbatch_size = 32\neval_users = 10\n";

fn prepared(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let (d, c) = (data.to_str().unwrap().to_string(), cfg.to_str().unwrap().to_string());
    ok(&["synth", "--out", &d, "--config", &c]);
    ok(&["tokenize", "--data", &d, "--config", &c]);
    (d, c)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = mmgr(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmgr(&["synth", "--out", dir.path().to_str().unwrap(), "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{err}");
    assert!(err.contains("no_such_key"));
}

#[test]
fn variant_flag_reaches_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (d, c) = prepared(dir.path());
    let ck = dir.path().join("m.ckpt");
    let curve = dir.path().join("curve.csv");
    ok(&[
        "train", "--data", &d, "--config", &c, "--variant", "wo_SCL",
        "--out", ck.to_str().unwrap(), "--curve", curve.to_str().unwrap(),
    ]);
    let meta = std::fs::read_to_string(mmgr::backbone::meta_path(&ck)).unwrap();
    assert!(meta.lines().any(|l| l.replace(' ', "") == "variant=wo_SCL"), "{meta}");
    // The contrastive term is never computed for this variant.
    let curve = std::fs::read_to_string(curve).unwrap();
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("0")), "{}", rows[0]);
}

#[test]
fn eval_and_share_reports_have_headers() {
    let dir = tempfile::tempdir().unwrap();
    let (d, c) = prepared(dir.path());
    let ck = dir.path().join("m.ckpt");
    let ck = ck.to_str().unwrap();
    ok(&["train", "--data", &d, "--config", &c, "--out", ck]);
    let out = mmgr(&["eval", "--checkpoint", ck, "--data", &d, "--input", "text"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("hr@10"));
    let share = mmgr(&["attn-share", "--checkpoint", ck, "--data", &d]);
    let text = String::from_utf8(share.stdout).unwrap();
    assert!(text.starts_with("sequence,l_t,l_v,share_t,share_v\n"));
    assert!(text.lines().last().unwrap().starts_with("mean,"));
    let bad = mmgr(&["pid", "--checkpoint", ck, "--data", &d, "--metric", "hr@50"]);
    assert_eq!(bad.status.code(), Some(1));
}
