use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sre"))
        .args(args)
        .env_remove("SRE_SEED")
        .output()
        .expect("spawn sre")
}

fn ok(args: &[&str]) -> String {
    let out = sre(args);
    assert!(
        out.status.success(),
        "sre {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    sre(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small_data(dir: &Path) {
    ok(&[
        "gen-data",
        "--out",
        p(dir),
        "--per-family",
        "3",
        "--points",
        "128",
        "--views",
        "4",
        "--seed",
        "5",
    ]);
}

fn metric(report: &str, level: &str, name: &str) -> f64 {
    report
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["level"] == level && v["metric"] == name)
        .and_then(|v| v["value"].as_f64())
        .unwrap_or_else(|| panic!("no {level} {name} in report"))
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    for dir in [&a, &b] {
        ok(&["gen-data", "--recipe", "default", "--seed", "1", "--out", p(dir)]);
    }
    let ta = tree(&a);
    let tb = tree(&b);
    let differing: Vec<_> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    assert!(differing.is_empty() && ta.len() == tb.len(), "differing files: {differing:?}");
    assert_eq!(ta.keys().filter(|k| k.extension().is_some_and(|e| e == "spcd")).count(), 64);
    assert_eq!(ta.keys().filter(|k| k.extension().is_some_and(|e| e == "vfeat")).count(), 768);
    let echo = String::from_utf8(ta[Path::new("run_config.txt")].clone()).unwrap();
    assert!(echo.contains("seed=1\n") && echo.contains("recipe=default\n"), "{echo}");
}

#[test]
fn existing_outputs_need_force() {
    let root = tempfile::tempdir().unwrap();
    small_data(root.path());
    assert_eq!(code(&["gen-data", "--out", p(root.path()), "--per-family", "3"]), 2);
    ok(&[
        "gen-data",
        "--out",
        p(root.path()),
        "--per-family",
        "3",
        "--points",
        "128",
        "--views",
        "4",
        "--force",
    ]);
}

#[test]
fn hcl_log_steps_beta_through_five_stages() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    small_data(&data);
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--loss",
        "hcl",
        "--beta0",
        "0.5",
        "--epochs",
        "10",
        "--batch-size",
        "4",
    ]);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let mut betas: Vec<f64> = Vec::new();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "step", "loss", "beta", "tau"] {
            assert!(v.get(key).is_some(), "{line}");
        }
        let b = v["beta"].as_f64().unwrap();
        if betas.last() != Some(&b) {
            betas.push(b);
        }
    }
    assert_eq!(betas, vec![0.5, 0.4, 0.3, 0.2, 0.1]);
    let echo = fs::read_to_string(run.join("run_config.txt")).unwrap();
    assert!(echo.contains("loss=hcl\n") && echo.contains("beta0=0.5\n"), "{echo}");
}

#[test]
fn config_file_with_flag_override_and_seed_env() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    small_data(&data);
    let cfg = root.path().join("train.cfg");
    fs::write(
        &cfg,
        format!(
            "# short run\ndata={}\nout={}\nepochs=4\nbatch_size=4\nloss=hcl\n",
            data.display(),
            root.path().join("run").display()
        ),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sre"))
        .args(["train", "--config", p(&cfg), "--epochs", "2"])
        .env("SRE_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = fs::read_to_string(root.path().join("run/run_config.txt")).unwrap();
    assert!(echo.contains("epochs=2\n"), "{echo}");
    assert!(echo.contains("batch-size=4\n"), "{echo}");
    assert!(echo.contains("seed=77\n"), "{echo}");

    // The echoed config replays the run.
    let replay = root.path().join("replay.cfg");
    fs::write(
        &replay,
        echo.replace("command=train\n", "")
            .replace("/run\n", "/replay\n"),
    )
    .unwrap();
    ok(&["train", "--config", p(&replay)]);
    assert_eq!(
        fs::read(root.path().join("run/checkpoint.enck")).unwrap(),
        fs::read(root.path().join("replay/checkpoint.enck")).unwrap()
    );

    fs::write(&cfg, "data=x\nout=y\nbogus=1\n").unwrap();
    assert_eq!(code(&["train", "--config", p(&cfg)]), 2);
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--nonsense"]), 2);
    assert_eq!(code(&["train", "--out", p(root.path())]), 2);
    let missing = root.path().join("missing");
    assert_eq!(
        code(&["train", "--data", p(&missing), "--out", p(&root.path().join("o"))]),
        3
    );
    let data = root.path().join("data");
    small_data(&data);
    fs::write(data.join("clouds/sphere_000.spcd"), b"garbage").unwrap();
    assert_eq!(
        code(&["train", "--data", p(&data), "--out", p(&root.path().join("o"))]),
        3
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&root.path().join("o")),
            "--batch-size",
            "1000"
        ]),
        3
    );
}

#[test]
fn strict_mode_refuses_foreign_index() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    small_data(&data);
    let mut ckpts = Vec::new();
    for seed in ["1", "2"] {
        let run = root.path().join(format!("run{seed}"));
        ok(&[
            "train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--batch-size", "4", "--seed", seed,
        ]);
        ckpts.push(run.join("checkpoint.enck"));
    }
    let index = root.path().join("index.sidx");
    ok(&["build-index", "--checkpoint", p(&ckpts[0]), "--data", p(&data), "--out", p(&index)]);
    assert!(root.path().join("index.sidx.run_config.txt").exists());
    let eval = |ckpt: &Path, strict: bool, out: &str| {
        let out = root.path().join(out);
        let mut args = vec!["eval", "--index", p(&index), "--checkpoint", p(ckpt), "--data", p(&data), "--out", p(&out)];
        if strict {
            args.push("--strict");
        }
        code(&args)
    };
    assert_eq!(eval(&ckpts[1], true, "e1"), 3);
    assert_eq!(eval(&ckpts[1], false, "e2"), 0);
    assert_eq!(eval(&ckpts[0], true, "e3"), 0);

    let listing = ok(&[
        "query",
        "--index",
        p(&index),
        "--checkpoint",
        p(&ckpts[0]),
        "--data",
        p(&data),
        "--shape",
        "box_001",
        "--view-index",
        "2",
        "--k",
        "3",
        "--strict",
    ]);
    assert_eq!(listing.lines().count(), 4, "{listing}");
    let view = data.join("views/box_001_02.vfeat");
    let direct = ok(&["query", "--index", p(&index), "--checkpoint", p(&ckpts[0]), "--view", p(&view), "--k", "3"]);
    assert_eq!(listing, direct);
}

#[test]
fn pipeline_smoke_and_self_query() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let index = root.path().join("index.sidx");
    ok(&["gen-data", "--recipe", "default", "--seed", "3", "--out", p(&data)]);
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--loss", "infonce", "--epochs", "60", "--warmup", "60", "--lr", "1e-3",
        "--seed", "3",
    ]);
    let ckpt = run.join("checkpoint.enck");
    ok(&["build-index", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&index)]);
    let eval_dir = root.path().join("eval");
    let summary = ok(&[
        "eval", "--index", p(&index), "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&eval_dir), "--strict",
    ]);
    assert!(summary.contains("Acc@1"), "{summary}");
    let report = fs::read_to_string(eval_dir.join("report.jsonl")).unwrap();
    let acc1 = metric(&report, "instance", "acc_top1");
    assert!(acc1 >= 10.0 / 64.0, "held-out Acc@1 {acc1}");
    assert_eq!(fs::read_to_string(eval_dir.join("ranks.jsonl")).unwrap().lines().count(), 384);

    let self_dir = root.path().join("self");
    ok(&["eval", "--index", p(&index), "--checkpoint", p(&ckpt), "--self-query", "--out", p(&self_dir)]);
    let report = fs::read_to_string(self_dir.join("report.jsonl")).unwrap();
    for name in ["acc_top1", "acc_top10", "map_at_10"] {
        assert_eq!(metric(&report, "instance", name), 1.0);
    }
    assert_eq!(code(&["eval", "--index", p(&index), "--checkpoint", p(&ckpt), "--self-query", "--out", p(&self_dir)]), 2);
}
