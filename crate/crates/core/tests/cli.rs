use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netwarp::ParamSet;

fn netwarp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netwarp")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SPEC: &str = r#"
seed = 7
train_sequences = 2
test_sequences = 1

[scene]
height = 32
width = 32
length = 5
bar_length = [12.0, 28.0]
blob_size = [8.0, 14.0]
"#;

/// A tiny dataset plus an experiment config pointing at it.
fn workspace(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
    let out = netwarp(&["gen", "--config", p(&dir.path().join("spec.toml")), "--out", p(&dir.path().join("data"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, format!("dataset = \"data\"\nsteps = 3\n{extra}\n[segnet]\nchannels = [4, 4, 4]\n")).unwrap();
    (dir, cfg)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    for name in ["a", "b"] {
        assert_eq!(code(&netwarp(&["gen", "--config", p(&spec), "--out", p(&dir.path().join(name))])), 0);
    }
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let manifest = fs::read_to_string(dir.path().join("a/train/seq_000/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 5);

    assert_eq!(code(&netwarp(&["gen", "--config", p(&spec), "--out", p(&dir.path().join("c")), "--seed", "8"])), 0);
    assert_ne!(tree(&dir.path().join("c")), a);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&netwarp(&["gen", "--config", "/nonexistent/spec.toml", "--out", "/tmp/unused"])), 1);
    assert_eq!(code(&netwarp(&["train", "--config", "/nonexistent/exp.toml", "--out", "/tmp/unused"])), 1);
    assert_eq!(code(&netwarp(&["bench", "--shape", "1,2,3"])), 1);
    assert_eq!(code(&netwarp(&["frobnicate"])), 1);
    assert_eq!(code(&netwarp(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "stepz = 3\n").unwrap();
    let out = netwarp(&["train", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn untrained_netwarp_matches_its_baseline_row() {
    let (dir, cfg) = workspace("");
    let run = dir.path().join("run");
    let out = netwarp(&["train", "--config", p(&cfg), "--mode", "netwarp", "--steps", "0", "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), "step,loss\n");

    let csv = dir.path().join("metrics.csv");
    let out = netwarp(&["eval", "--config", p(&cfg), "--checkpoint", p(&run.join("checkpoint.nwa")), "--out", p(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows = |mode: &str| -> Vec<String> {
        text.lines().filter_map(|l| l.strip_prefix(&format!("{mode},"))).map(str::to_owned).collect()
    };
    assert_eq!(rows("baseline").len(), 4);
    assert_eq!(rows("baseline"), rows("netwarp"));
}

#[test]
fn train_and_eval_all_modes() {
    let (dir, cfg) = workspace("");
    let mut ckpts = Vec::new();
    for mode in ["baseline", "netwarp-noflowcnn", "netwarp"] {
        let run = dir.path().join(mode);
        let out = netwarp(&["train", "--config", p(&cfg), "--mode", mode, "--out", p(&run)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 4);
        ckpts.push(run.join("checkpoint.nwa"));
    }
    let mut args = vec!["eval", "--config", p(&cfg)];
    for c in &ckpts {
        args.extend(["--checkpoint", p(c)]);
    }
    let out = netwarp(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for mode in ["baseline", "netwarp-noflowcnn", "netwarp"] {
        assert!(text.lines().any(|l| l.starts_with(mode)), "{text}");
    }
    let ps = ParamSet::<f32>::read_archive(&mut fs::File::open(&ckpts[2]).unwrap()).unwrap();
    assert!(ps.contains("flowcnn.conv1.w"));
}

#[test]
fn fine_tuning_with_a_frozen_base() {
    let (dir, cfg) = workspace("");
    let base = dir.path().join("base");
    assert_eq!(code(&netwarp(&["train", "--config", p(&cfg), "--mode", "baseline", "--out", p(&base)])), 0);
    let ft_cfg = dir.path().join("ft.toml");
    fs::write(
        &ft_cfg,
        "dataset = \"data\"\nsteps = 3\nfreeze_base = true\ninit_checkpoint = \"base/checkpoint.nwa\"\n[segnet]\nchannels = [4, 4, 4]\n",
    )
    .unwrap();
    let ft = dir.path().join("ft");
    let out = netwarp(&["train", "--config", p(&ft_cfg), "--mode", "netwarp", "--out", p(&ft)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let read = |path: PathBuf| ParamSet::<f32>::read_archive(&mut fs::File::open(path).unwrap()).unwrap();
    let (before, after) = (read(base.join("checkpoint.nwa")), read(ft.join("checkpoint.nwa")));
    for (name, t) in before.iter() {
        assert_eq!(after.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn gradcheck_exit_codes() {
    let ok = netwarp(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert_eq!(stdout(&ok), stdout(&netwarp(&["gradcheck", "--seeds", "1"])));
    assert_eq!(code(&netwarp(&["gradcheck", "--seeds", "1", "--inject-fault", "warp"])), 2);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = netwarp(&["bench", "--shape", "1,1,2,2", "--iters", "5", "--out", p(&csv)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("reference: 2.5 ms"));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("op,n,c,h,w,iters,threads,median_ms,p95_ms"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let (median, p95): (f64, f64) = (cols[7].parse().unwrap(), cols[8].parse().unwrap());
        assert!(median >= 0.0 && median < 1.0 && p95 >= median, "{line}");
    }
}
