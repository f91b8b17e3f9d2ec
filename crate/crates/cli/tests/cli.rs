use std::path::Path;
use std::process::{Command, Output};

fn dseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dseq"))
        .args(args)
        .env_remove("DSEQ_THREADS")
        .output()
        .expect("spawn dseq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

#[test]
fn help_exits_zero() {
    let o = dseq(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("pretrain"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(dseq(&["datagen", "--bogus"]).status.code(), Some(2));
    assert_eq!(dseq(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dseq(&[]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_dseq"))
        .args(["gradcheck", "--instances", "1"])
        .env("DSEQ_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dseq(&["probe", "--checkpoint", p(&dir.path().join("nope.dsqc")), "--train", "x", "--test", "y"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dseq(&["pretrain", "--set", "epochs=zero", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));
}

/// datagen -> pretrain (2 epochs) -> regions / probe / cluster / steps.
#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, ptr, pte, run) = (root.join("data"), root.join("ptr"), root.join("pte"), root.join("run"));
    ok(&dseq(&["datagen", "--n", "16", "--seed", "1", "--out", p(&data), "--preview", "2"]));
    ok(&dseq(&["datagen", "--n", "16", "--seed", "2", "--out", p(&ptr)]));
    ok(&dseq(&["datagen", "--n", "8", "--seed", "3", "--out", p(&pte)]));
    assert!(data.join("preview_0001.pgm").exists());

    let cfg = root.join("cfg.txt");
    std::fs::write(
        &cfg,
        format!("# smoke\nepochs = 2\nbatch_size = 8\ndataset = {}\n", data.display()),
    )
    .unwrap();
    let o = dseq(&["pretrain", "--config", p(&cfg), "--out", p(&run), "--quiet"]);
    ok(&o);
    assert!(stdout(&o).contains("config hash"));
    let ckpt = run.join("final.dsqc");
    assert!(ckpt.exists() && run.join("epoch_0002.dsqc").exists());
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss,lambda,lr,wd,ema\n"));
    assert_eq!(log.lines().count(), 1 + 4);

    let img = data.join("preview_0000.pgm");
    let out = root.join("regions");
    ok(&dseq(&[
        "regions", "--image", p(&img), "--checkpoint", p(&ckpt), "--epoch", "1", "--out", p(&out), "--dump-saliency",
    ]));
    for f in ["region_0.dsqt", "region_4.dsqt", "regions.json", "overlay.pgm", "saliency.dsqt", "saliency.pgm"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("regions.json")).unwrap()).unwrap();
    assert_eq!(side["regions"].as_array().unwrap().len(), 5);
    assert_eq!(side["lambda"], 1.0);

    let o = dseq(&["probe", "--checkpoint", p(&ckpt), "--train", p(&ptr), "--test", p(&pte), "--epochs", "3"]);
    ok(&o);
    assert!(stdout(&o).contains("probe accuracy"));

    let pgm = root.join("clusters.pgm");
    ok(&dseq(&["cluster", "--checkpoint", p(&ckpt), "--image", p(&img), "--k", "3", "--pgm-out", p(&pgm)]));
    assert!(pgm.exists());

    let steps = root.join("steps.csv");
    ok(&dseq(&["steps", "--checkpoint", p(&ckpt), "--dataset", p(&pte), "--out", p(&steps)]));
    assert_eq!(std::fs::read_to_string(&steps).unwrap().lines().count(), 5);
}

#[test]
fn pretrain_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&dseq(&["datagen", "--n", "8", "--seed", "4", "--out", p(&data)]));
    let set = ["--set", "epochs=2", "--set", "batch_size=4", "--set", "checkpoint_every=1"];
    let ds = format!("dataset={}", data.display());
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["pretrain", "--quiet", "--out", p(out), "--set", &ds];
        args.extend_from_slice(&set);
        args.extend_from_slice(extra);
        ok(&dseq(&args));
    };
    let (a, b) = (root.join("a"), root.join("b"));
    run(&a, &[]);
    run(&b, &[]);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "final.dsqc"), read(&b, "final.dsqc"));

    // Resume from the first epoch and finish: same bytes as the straight run.
    let c = root.join("c");
    std::fs::create_dir_all(&c).unwrap();
    std::fs::copy(a.join("loss.csv"), c.join("loss.csv")).unwrap();
    let e1 = a.join("epoch_0001.dsqc");
    run(&c, &["--resume", p(&e1)]);
    assert_eq!(read(&a, "final.dsqc"), read(&c, "final.dsqc"));
    assert_eq!(read(&a, "loss.csv"), read(&c, "loss.csv"));

    // A different config refuses to resume.
    let mut args = vec!["pretrain", "--quiet", "--out", p(&c), "--set", &ds, "--resume", p(&e1)];
    args.extend_from_slice(&set);
    args.extend_from_slice(&["--set", "seed=5"]);
    assert_eq!(dseq(&args).status.code(), Some(1));
}

#[test]
fn gradcheck_subcommand_passes() {
    let o = dseq(&["gradcheck", "--instances", "2"]);
    ok(&o);
    assert!(stdout(&o).contains("dseq_loss/sequential"));
}
