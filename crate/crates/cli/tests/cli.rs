use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
model.image_size = 8
model.patch = 4
model.dim = 8
model.attn_heads = 2
model.ffn_dim = 16
model.enc_layers = 2
model.dec_layers = 2
model.heads = 2
model.n_queries = 4
scene.image_size = 8
scene.max_objects = 2
scene.min_side = 0.25
scene.max_side = 0.5
train.steps = 3
train.batch = 2
train.eval.n_scenes = 6
"#;

fn midetr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midetr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn run_dir_from(out: &Output) -> PathBuf {
    let v: serde_json::Value = serde_json::from_str(stdout(out).lines().last().unwrap()).unwrap();
    PathBuf::from(v["run_dir"].as_str().unwrap())
}

#[test]
fn help_lists_every_flag_and_subcommand() {
    let o = midetr(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in [
        "--config", "--set", "--out", "--seed", "--steps", "--heads", "--lite", "--fusion", "--ufi", "--aux-loss",
        "--mask-rescale", "--eval-scenes", "--eval-seed",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for cmd in ["gradcheck", "train", "eval", "ablate", "paramcount", "export-queries"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(midetr(&["--out", out, "--no-such-flag", "paramcount"]).status.code(), Some(2));
    assert_eq!(midetr(&["--out", out, "--set", "model.depth=2", "paramcount"]).status.code(), Some(2));
    let o = midetr(&["--out", out, "--set", "model.dec_layers=4", "paramcount"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth"));
    let o = midetr(&["--out", out, "--fusion", "linear-concat", "--heads", "3", "paramcount"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(midetr(&["--out", out, "paramcount"]).status.code(), Some(0));
}

#[test]
fn paramcount_is_idempotent_outside_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let a = midetr(&["--out", out, "paramcount"]);
    let b = midetr(&["--out", out, "paramcount"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["consistent"], true);
}

#[test]
fn train_resume_eval_export_and_head_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();

    let full = midetr(&["--config", &cfg, "--out", out, "train"]);
    assert!(full.status.success(), "{}", String::from_utf8_lossy(&full.stderr));
    let full_dir = run_dir_from(&full);
    let again = midetr(&["--config", &cfg, "--out", out, "train"]);
    assert_eq!(run_dir_from(&again), full_dir);
    let trace = fs::read_to_string(full_dir.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    // Two steps, then resume to three.
    let half = midetr(&["--config", &cfg, "--out", out, "--steps", "2", "train"]);
    let half_dir = run_dir_from(&half);
    let ckpt = half_dir.join("checkpoint.bin");
    let resumed = midetr(&["--config", &cfg, "--out", out, "train", "--resume", ckpt.to_str().unwrap()]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    let resumed_dir = run_dir_from(&resumed);
    let head: Vec<&str> = fs::read_to_string(half_dir.join("trace.jsonl")).unwrap().leak().lines().collect();
    let tail = fs::read_to_string(resumed_dir.join("trace.jsonl")).unwrap();
    let joined: Vec<&str> = head.into_iter().chain(tail.lines()).collect();
    assert_eq!(joined, trace.lines().collect::<Vec<_>>());
    assert_eq!(
        fs::read(full_dir.join("checkpoint.bin")).unwrap(),
        fs::read(resumed_dir.join("checkpoint.bin")).unwrap()
    );

    let ckpt = full_dir.join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    let e = midetr(&["--config", &cfg, "--out", out, "eval", "--checkpoint", ckpt, "--mask", "10"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let report: serde_json::Value = serde_json::from_str(stdout(&e).trim()).unwrap();
    assert!(report["ap50"].as_f64().unwrap() <= 1.0);
    assert_eq!(midetr(&["--config", &cfg, "--out", out, "eval", "--checkpoint", ckpt, "--mask", "111"]).status.code(), Some(2));

    let x = midetr(&["--config", &cfg, "--out", out, "export-queries", "--checkpoint", ckpt, "--top-k", "3"]);
    assert!(x.status.success(), "{}", String::from_utf8_lossy(&x.stderr));
    let xdir = PathBuf::from(stdout(&x).trim());
    let bundle: serde_json::Value = serde_json::from_str(&fs::read_to_string(xdir.join("export.json")).unwrap()).unwrap();
    assert_eq!(bundle["heads"].as_array().unwrap().len(), 2);
    let rows = fs::read_to_string(xdir.join("head1.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert_eq!(rows.lines().next().unwrap().split(',').count(), 4 + 8);
    let bad = midetr(&["--config", &cfg, "--out", out, "export-queries", "--checkpoint", ckpt, "--layer", "3"]);
    assert_eq!(bad.status.code(), Some(2));

    let a = midetr(&["--config", &cfg, "--out", out, "ablate", "--protocol", "heads", "--checkpoint", ckpt]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let csv_path = PathBuf::from(stdout(&a).lines().last().unwrap());
    let table = fs::read_to_string(csv_path).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mask,ap50,ap50_class0,ap50_class1,ap50_class2");
    assert_eq!(lines.len(), 4);
}

#[test]
fn fusion_protocol_trains_every_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let a = midetr(&["--config", &cfg, "--out", out.to_str().unwrap(), "ablate", "--protocol", "fusion", "--seeds", "0"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let table = fs::read_to_string(stdout(&a).lines().last().unwrap()).unwrap();
    let variants: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["add", "linear-concat", "concat-linear"]);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_midetr"))
        .arg("paramcount")
        .env("MIDETR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
