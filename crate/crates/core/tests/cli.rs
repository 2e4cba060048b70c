use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rankforge"));
    c.env_remove("RANKFORGE_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset, a one-epoch dense model, a plan and a latency table.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let r = s(&root);
        ok(&["synth", "--samples", "320", "--classes", "10", "--seed", "3", "--out", r]);
        ok(&["train", "--network", "desk", "--data", &format!("{r}/data.csv"), "--epochs", "1", "--out", r]);
        ok(&["latency-table", "--network", "desk", "--out", r]);
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_string()
    }

    fn search(&self, out: &str, extra: &[&str]) -> Output {
        let (model, data) = (self.p("dense.ckpt"), self.p("data.csv"));
        let mut args = vec!["search", "--model", &model, "--data", &data, "--alpha", "4"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--budget", "0.6", "--epochs", "1", "--seed", "5", "--finetune-epochs", "0", "--out", out]);
        run(&args)
    }
}

#[test]
fn plan_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = ok(&["plan", "--network", "desk", "--alpha", "4", "--out", s(d.path())]);
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.contains("conv2"), "{text}");
    }
    for f in ["plan.json", "plan.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let o = ok(&["plan", "--network", "resnet18", "--alpha", "4", "--out", s(a.path())]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("search space"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&["plan", "--network", "desk", "--alpha", "1"]), 1);
    assert_eq!(code(&["plan", "--network", "desk", "--alpha", "0.5"]), 1);
    assert_eq!(code(&["no-such-verb"]), 1);
    assert_eq!(code(&["plan", "--bogus"]), 1);
    assert_eq!(code(&["--help"]), 0);
    let o = run(&["plan", "--network", "desk", "--alpha", "1"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "label,p0\n1,oops\n").unwrap();
    let r = s(dir.path());
    assert_eq!(code(&["train", "--network", "desk", "--data", s(&bad), "--out", r]), 2);
    assert_eq!(code(&["eval", "--model", s(&dir.path().join("missing.ckpt")), "--data", s(&bad)]), 2);
    let net = dir.path().join("net.csv");
    fs::write(&net, "# input=1x8x8\n# classes=2\nlayer_id,kind,F,C,K1,K2,stride,padding,searched\na,conv,4,3,3,3,1,1,true\n").unwrap();
    let o = run(&["plan", "--network", s(&net), "--alpha", "2", "--out", r]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("layer `a`") && err.contains(":4:"), "{err}");
}

#[test]
fn pipeline_is_deterministic_and_reports_consistently() {
    let fx = Fixture::new();
    // a cost source is mandatory
    let o = fx.search(&fx.p("nocost"), &[]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cost source"));
    let table = fx.p("latency.csv");
    let both = fx.search(&fx.p("both"), &["--latency-table", &table, "--flops-proxy"]);
    assert_eq!(both.status.code(), Some(1));

    let (a, b) = (fx.p("run_a"), fx.p("run_b"));
    for out in [&a, &b] {
        let o = fx.search(out, &["--latency-table", &table]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["selection.json", "search.ckpt", "compressed.ckpt", "report.json", "metrics.jsonl"] {
        let (x, y) = (fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let metrics = fs::read_to_string(Path::new(&a).join("metrics.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "expected_cost", "entropy", "val_ce"] {
        assert!(line.get(key).is_some(), "metrics lack {key}");
    }

    let compressed = format!("{a}/compressed.ckpt");
    let eval = |m: &str| ok(&["eval", "--model", m, "--data", &fx.p("data.csv"), "--latency-table", &table]).stdout;
    let e1 = eval(&compressed);
    assert_eq!(e1, eval(&compressed));
    let ev: serde_json::Value = serde_json::from_slice(&e1).unwrap();
    let sel: serde_json::Value = serde_json::from_str(&fs::read_to_string(format!("{a}/selection.json")).unwrap()).unwrap();
    let ec = ev["expected_cost"].as_f64().unwrap();
    assert!((ec - sel["expected_cost"].as_f64().unwrap()).abs() < 1e-12);

    // FLOPs reduction in the report agrees with the counts eval prints
    let dense_eval: serde_json::Value = serde_json::from_slice(&eval(&fx.p("dense.ckpt"))).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(format!("{a}/report.json")).unwrap()).unwrap();
    let (f0, f1) = (dense_eval["flops"].as_f64().unwrap(), ev["flops"].as_f64().unwrap());
    let pct = report["flops_reduction_pct"].as_f64().unwrap();
    assert!((pct - 100.0 * (f0 - f1) / f0).abs() < 1e-9, "{pct} vs {f0} {f1}");

    ok(&["report", "--model", &compressed, "--dense", &fx.p("dense.ckpt")]);
    let ft = fx.p("ft");
    ok(&["finetune", "--model", &compressed, "--data", &fx.p("data.csv"), "--epochs", "1", "--out", &ft]);
    assert!(Path::new(&ft).join("finetuned.ckpt").exists());
    assert_eq!(code(&["finetune", "--model", &compressed, "--data", &fx.p("data.csv"), "--lambda", "0.1", "--out", &ft]), 1);

    // resuming a finished run appends nothing new but keeps the checkpoint
    let resumed = fx.search(&a, &["--latency-table", &table, "--resume", &format!("{a}/search.ckpt")]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(fs::read(format!("{a}/selection.json")).unwrap(), fs::read(format!("{b}/selection.json")).unwrap());
}

#[test]
fn decompose_reports_honestly() {
    let fx = Fixture::new();
    let full = fx.p("full.csv");
    fs::write(&full, "layer_id,r1,r2\nconv2,32,16\nconv3,32,32\nconv4,32,32\n").unwrap();
    let out = fx.p("dec");
    ok(&["decompose", "--model", &fx.p("dense.ckpt"), "--ranks", &full, "--out", &out]);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(format!("{out}/decompose_report.json")).unwrap()).unwrap();
    assert!(rep["params_reduction_pct"].as_f64().unwrap() < 0.0);
    for l in rep["layers"].as_array().unwrap() {
        assert!(l["relative_error"].as_f64().unwrap() < 1e-8);
        assert!(l["n_tucker"].as_u64().unwrap() > l["n_org"].as_u64().unwrap());
    }
    let partial = fx.p("partial.csv");
    fs::write(&partial, "layer_id,r1,r2\nconv2,8,8\nconv3,8,8\n").unwrap();
    let o = run(&["decompose", "--model", &fx.p("dense.ckpt"), "--ranks", &partial, "--out", &out]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("conv4"));
    let big = fx.p("big.csv");
    fs::write(&big, "layer_id,r1,r2\nconv2,8,8\nconv3,8,8\nconv4,99,8\n").unwrap();
    let o = run(&["decompose", "--model", &fx.p("dense.ckpt"), "--ranks", &big, "--out", &out]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("conv4"));
}

#[test]
fn config_file_and_environment_supply_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let from_cfg = dir.path().join("from_cfg");
    fs::write(&cfg, format!("[paths]\nnetwork = \"desk\"\nout = \"{}\"\n\n[plan]\nalpha = 4.0\n", s(&from_cfg))).unwrap();
    ok(&["--config", s(&cfg), "plan"]);
    assert!(from_cfg.join("plan.json").exists());
    // flags beat the file
    let flagged = dir.path().join("flagged");
    ok(&["--config", s(&cfg), "plan", "--alpha", "8", "--out", s(&flagged)]);
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(flagged.join("plan.json")).unwrap()).unwrap();
    assert_eq!(a["alpha"].as_f64(), Some(8.0));
    // environment fills in when neither names an output directory
    let env_dir = dir.path().join("env");
    let o = bin()
        .args(["plan", "--network", "desk", "--alpha", "4"])
        .env("RANKFORGE_OUT", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("plan.json").exists());
    fs::write(&cfg, "[plan]\nalhpa = 4.0\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "plan", "--network", "desk"]), 2);
}
