use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": {"hidden": 8, "heads": 2, "mlp_hidden": 16},
  "train": {"epochs": 1, "student_epochs": 1, "batch_size": 16},
  "data": {"train_scenes": 10, "test_scenes": 3}
}"#;

fn mcm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcm"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    dir
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn synth_writes_dataset_and_config_deterministically() {
    let dir = setup();
    let d = dir.path();
    ok(mcm(&["synth", "--config", "c.json", "--out", "a"], d));
    ok(mcm(&["synth", "--config", "c.json", "--out", "b"], d));
    for f in [
        "items.jsonl",
        "scenes.jsonl",
        "config.json",
        "vocab.json",
        "summary.md",
    ] {
        assert!(d.join("a").join(f).is_file(), "{f}");
    }
    for f in ["items.jsonl", "scenes.jsonl", "config.json"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    ok(mcm(
        &["synth", "--config", "c.json", "--seed", "5", "--out", "c"],
        d,
    ));
    assert_ne!(read(d.join("a/items.jsonl")), read(d.join("c/items.jsonl")));
    let cfg = String::from_utf8(read(d.join("c/config.json"))).unwrap();
    assert!(cfg.contains("\"seed\": 5"), "{cfg}");
}

#[test]
fn usage_errors_exit_1() {
    let dir = setup();
    assert_eq!(code(&mcm(&["bogus"], dir.path())), 1);
    assert_eq!(
        code(&mcm(&["synth", "--out", "x", "--frobnicate"], dir.path())),
        1
    );
    assert_eq!(code(&mcm(&["synth"], dir.path())), 1);
    let o = mcm(
        &[
            "distill",
            "--out",
            "x",
            "--checkpoint",
            "t.ckpt",
            "--ablate",
            "everything",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_configuration_and_data_exit_2() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let o = mcm(&["synth", "--config", "bad.json", "--out", "x"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
    let o = mcm(
        &[
            "eval",
            "--config",
            "c.json",
            "--checkpoint",
            "missing.ckpt",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt"));
    let o = mcm(
        &[
            "align",
            "--config",
            "c.json",
            "--languages",
            "zz",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_training_exits_3() {
    let dir = setup();
    let d = dir.path();
    let cfg = TINY.replace("\"epochs\": 1,", "\"epochs\": 1, \"lr\": 1e300,");
    fs::write(d.join("hot.json"), cfg).unwrap();
    let o = mcm(&["train-teacher", "--config", "hot.json", "--out", "t"], d);
    assert_eq!(
        code(&o),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn gradcheck_prints_every_op_and_passes() {
    let dir = setup();
    let o = ok(mcm(&["gradcheck", "--seed", "7", "--out", "g"], dir.path()));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() > 30);
    assert!(text.lines().all(|l| l.ends_with(" ok")), "{text}");
    assert!(text.contains("total_loss."));
    assert!(dir.path().join("g/gradcheck.csv").is_file());
}

#[test]
fn report_compares_runs_per_language() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (run, acc) in [("a", "0.5"), ("b", "0.75")] {
        fs::create_dir(d.join(run)).unwrap();
        fs::write(
            d.join(run).join("eval.csv"),
            format!("lang,items,accuracy\nxa,4,{acc}\nxb,4,1\n"),
        )
        .unwrap();
        fs::write(
            d.join(run).join("answer_types.csv"),
            "lang,answer_type,items,accuracy\nxa,color,4,0.5\nxb,color,4,1\n",
        )
        .unwrap();
    }
    ok(mcm(&["report", "--runs", "a", "b", "--out", "r"], d));
    let csv = String::from_utf8(read(d.join("r/comparison.csv"))).unwrap();
    assert_eq!(csv, "run,xa,xb,mean\na,0.5,1,0.75\nb,0.75,1,0.875\n");
    let md = String::from_utf8(read(d.join("r/summary.md"))).unwrap();
    assert!(md.contains("| a | 0.5000 | 1.0000 | 0.7500 |"), "{md}");
    assert_eq!(
        code(&mcm(&["report", "--runs", "nowhere", "--out", "r2"], d)),
        2
    );
}

#[test]
fn codemix_and_metrics_cover_every_sentence() {
    let dir = setup();
    let d = dir.path();
    ok(mcm(&["synth", "--config", "c.json", "--out", "data"], d));
    ok(mcm(
        &[
            "align", "--config", "c.json", "--data", "data", "--out", "al",
        ],
        d,
    ));
    let al = String::from_utf8(read(d.join("al/alignment.csv"))).unwrap();
    assert_eq!(al.lines().count(), 5);
    ok(mcm(
        &[
            "codemix",
            "--config",
            "c.json",
            "--data",
            "data",
            "--languages",
            "xa",
            "--out",
            "cm",
        ],
        d,
    ));
    let cm = String::from_utf8(read(d.join("cm/codemix.csv"))).unwrap();
    assert!(cm.lines().nth(1).unwrap().starts_with("en-xa,"), "{cm}");
    assert!(
        cm.lines().nth(1).unwrap().contains(",0,"),
        "MLF violations: {cm}"
    );

    ok(mcm(
        &[
            "metrics",
            "--config",
            "c.json",
            "--data",
            "data",
            "--languages",
            "en-xa",
            "--out",
            "m",
        ],
        d,
    ));
    let text = String::from_utf8(read(d.join("m/metrics.csv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,lang,tokens,cmi,spf,bleu,rouge_l,ter,cf2,cf3");
    let items = String::from_utf8(read(d.join("data/items.jsonl"))).unwrap();
    let mixed = items
        .lines()
        .filter(|l| l.contains("\"lang\":\"en-xa\""))
        .count();
    assert_eq!(lines.len(), 1 + mixed + 1);
    assert!(lines.last().unwrap().starts_with("corpus,en-xa,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",n/a,n/a")));
}

#[test]
fn pipeline_is_reproducible_and_leaves_inputs_alone() {
    let dir = setup();
    let d = dir.path();
    ok(mcm(&["synth", "--config", "c.json", "--out", "data"], d));
    let items = read(d.join("data/items.jsonl"));
    ok(mcm(
        &[
            "train-teacher",
            "--config",
            "c.json",
            "--data",
            "data",
            "--out",
            "t",
        ],
        d,
    ));
    let ckpt = read(d.join("t/model.ckpt"));
    for run in ["s1", "s2"] {
        ok(mcm(
            &[
                "distill",
                "--data",
                "data",
                "--checkpoint",
                "t/model.ckpt",
                "--out",
                run,
            ],
            d,
        ));
    }
    for f in [
        "model.ckpt",
        "eval.csv",
        "answer_types.csv",
        "loss_history.csv",
        "epochs.csv",
        "config.json",
    ] {
        assert_eq!(
            read(d.join("s1").join(f)),
            read(d.join("s2").join(f)),
            "{f}"
        );
    }
    ok(mcm(
        &[
            "baseline",
            "--data",
            "data",
            "--checkpoint",
            "t/model.ckpt",
            "--out",
            "base",
        ],
        d,
    ));
    ok(mcm(
        &[
            "distill",
            "--data",
            "data",
            "--checkpoint",
            "t/model.ckpt",
            "--ablate",
            "object",
            "--out",
            "noobj",
        ],
        d,
    ));
    let cfg = String::from_utf8(read(d.join("noobj/config.json"))).unwrap();
    assert!(cfg.contains("\"w_object\": 0.0"), "{cfg}");
    assert_ne!(
        read(d.join("s1/model.ckpt")),
        read(d.join("base/model.ckpt"))
    );
    let o = mcm(
        &[
            "baseline",
            "--data",
            "data",
            "--checkpoint",
            "t/model.ckpt",
            "--ablate",
            "cls",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!(code(&o), 2);

    ok(mcm(
        &[
            "eval",
            "--data",
            "data",
            "--checkpoint",
            "s1/model.ckpt",
            "--languages",
            "xa,xe",
            "--out",
            "ev",
        ],
        d,
    ));
    let ev = String::from_utf8(read(d.join("ev/eval.csv"))).unwrap();
    let langs: Vec<&str> = ev
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(langs, ["xa", "xe"]);

    ok(mcm(
        &[
            "analyze",
            "--data",
            "data",
            "--checkpoint",
            "s1/model.ckpt",
            "--checkpoint",
            "base/model.ckpt",
            "--out",
            "an",
        ],
        d,
    ));
    let an = String::from_utf8(read(d.join("an/analysis.csv"))).unwrap();
    assert!(
        an.starts_with("run,alignment,zero_shot,full_question\ns1,"),
        "{an}"
    );
    for f in ["partial_questions.csv", "zero_shot.csv", "alignment.csv"] {
        assert!(d.join("an/base").join(f).is_file(), "{f}");
    }

    ok(mcm(
        &["report", "--runs", "s1", "base", "noobj", "--out", "rep"],
        d,
    ));
    let rep = String::from_utf8(read(d.join("rep/comparison.csv"))).unwrap();
    let names: Vec<&str> = rep
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["s1", "base", "noobj"]);

    assert_eq!(read(d.join("data/items.jsonl")), items);
    assert_eq!(read(d.join("t/model.ckpt")), ckpt);
}
