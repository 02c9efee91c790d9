use std::path::Path;
use std::process::{Command, Output};

fn matret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matret")).args(args).env_remove("MARI_DATA_DIR").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_lines(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join("manifest.jsonl")).unwrap().lines().count()
}

const SMALL_MODEL: &str = r#"
[encoder]
resolution = 32
patch_size = 8
embed_dim = 16
n_blocks = 1
n_heads = 2
output_dim = 8

[train]
batch_size = 2
stages = [
    { dataset = "synthetic", epochs = 1, lr = 1e-4 },
    { dataset = "real", epochs = 1, lr = 1e-5 },
]
"#;

#[test]
fn bad_flags_exit_2_with_usage() {
    let out = matret(&["gen-synthetic", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(matret(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(matret(&["query"]).status.code(), Some(2));
    assert_eq!(matret(&["query", "--image", "x.ppm", "-k", "many"]).status.code(), Some(2));
    assert!(matret(&["--help"]).status.success());
}

#[test]
fn runtime_failure_is_one_json_line_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = matret(&["build-index", "--ckpt", s(&missing), "--gallery", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["message"].as_str().unwrap().contains("missing.ckpt"));
}

#[test]
fn gen_synthetic_counts_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["gen-synthetic", "--materials", "32", "--shapes", "4", "--views", "8", "--seed", "1", "--out"];
    let out = ok(&matret(&[&args[..], &[s(&a)]].concat()));
    assert!(out.starts_with("samples 1024 "), "{out}");
    assert_eq!(manifest_lines(&a), 1024);
    ok(&matret(&[&args[..], &[s(&b)]].concat()));
    for f in ["manifest.jsonl", "header.json", "gallery.json", "images/syn-wood-g0000-sphere-00.ppm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_overrides_flags_and_data_dir_comes_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "views = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_matret"))
        .args(["gen-synthetic", "--materials", "2", "--shapes", "1", "--views", "3", "--config", s(&cfg)])
        .env("MARI_DATA_DIR", dir.path())
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(stdout.starts_with("samples 2 "), "{stdout}");
    assert_eq!(manifest_lines(&dir.path().join("synthetic")), 2);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("gen-synthetic config: {") && stderr.contains("\"views\":1"), "{stderr}");

    std::fs::write(&cfg, "nonsense = 1\n").unwrap();
    let out = matret(&["gen-synthetic", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&matret(&["gradcheck"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("infonce max_rel_error ") && lines[0].ends_with("PASS"), "{out}");
    assert!(lines[1].starts_with("triplet max_rel_error ") && lines[1].ends_with("PASS"), "{out}");
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("model.toml");
    std::fs::write(&cfg, SMALL_MODEL).unwrap();
    let data = ["--data-dir", s(d), "--seed", "4"];
    ok(&matret(&[&["gen-synthetic", "--materials", "6", "--shapes", "2", "--views", "2"], &data[..]].concat()));
    let out = ok(&matret(&[&["gen-real", "--materials", "6", "--samples", "12", "--no-rejection"], &data[..]].concat()));
    assert!(out.starts_with("samples 12 rejected 0 "), "{out}");

    let train = |out_dir: &str| {
        let out = ok(&matret(&[&["train", "--config", s(&cfg), "--out", out_dir], &data[..]].concat()));
        assert!(out.starts_with("epochs 2 "), "{out}");
    };
    train(s(&d.join("model")));
    train(s(&d.join("model2")));
    for f in ["image.ckpt", "material.ckpt", "history.csv"] {
        assert_eq!(std::fs::read(d.join("model").join(f)).unwrap(), std::fs::read(d.join("model2").join(f)).unwrap(), "{f}");
    }

    let out = ok(&matret(&[&["build-index"], &data[..]].concat()));
    assert!(out.starts_with("entries 6 dim 8 mode scaled_dot "), "{out}");

    let image = d.join("synthetic/images/syn-wood-g0000-sphere-00.ppm");
    let mask = d.join("synthetic/masks/syn-wood-g0000-sphere-00.pgm");
    let out = ok(&matret(&[&["query", "--image", s(&image), "--mask", s(&mask), "-k", "3"], &data[..]].concat()));
    let lines: Vec<Vec<&str>> = out.lines().map(|l| l.split(' ').collect()).collect();
    assert_eq!(lines.len(), 3);
    let mut last = f64::INFINITY;
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l.len(), 4);
        assert_eq!(l[0], (i + 1).to_string());
        assert!(l[1].contains("-g000"));
        assert!(l[1].starts_with(l[2]));
        let score: f64 = l[3].parse().unwrap();
        assert!(score <= last);
        last = score;
    }

    let report = d.join("report");
    let out = ok(&matret(&[&["eval", "--data", s(&d.join("synthetic")), "--out", s(&report)], &data[..]].concat()));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_queries"], 24);
    for k in ["t1i", "t5i", "t1c", "t3iou"] {
        let x = v[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
    assert!(std::fs::read_to_string(report.join("report.csv")).unwrap().starts_with("T1I,T5I,T1C,T3IoU"));
}
