use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn srcr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srcr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn srcr")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = srcr(args, dir);
    assert!(
        out.status.success(),
        "srcr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 12] = [
    "synth",
    "--categories",
    "6",
    "--per-category",
    "5",
    "--modalities",
    "3",
    "--dim",
    "8",
    "--seed",
    "3",
    "--out",
];

const TINY: [&str; 14] = [
    "--set",
    "knn_k=3",
    "--set",
    "n_anchors=6",
    "--set",
    "unified_dim=4",
    "--set",
    "anchor_dim=4",
    "--set",
    "hidden=8",
    "--set",
    "rce_epochs=3",
    "--set",
    "hsl_epochs=3",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String], dir: &Path) -> String {
    let v: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&v, dir)
}

#[test]
fn synth_counts_objects_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        &[
            "synth",
            "--categories",
            "30",
            "--per-category",
            "20",
            "--modalities",
            "3",
            "--dim",
            "64",
            "--seed",
            "2022",
            "--out",
            "a.ocmf",
        ],
        d,
    );
    assert!(out.contains("N=600"), "{out}");
    ok(
        &[
            "synth",
            "--categories",
            "30",
            "--per-category",
            "20",
            "--modalities",
            "3",
            "--dim",
            "64",
            "--seed",
            "2022",
            "--out",
            "b.ocmf",
        ],
        d,
    );
    let a = fs::read(d.join("a.ocmf")).unwrap();
    assert_eq!(a, fs::read(d.join("b.ocmf")).unwrap());
    assert_eq!(&a[..4], b"OCMF");
    assert_eq!(u32::from_le_bytes(a[8..12].try_into().unwrap()), 600);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        srcr(&["synth", "--modalities", "0", "--out", "x.ocmf"], d)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(srcr(&["frobnicate"], d).status.code(), Some(2));
    assert_eq!(
        srcr(&["train", "--data", "missing.ocmf", "--out-dir", "m"], d)
            .status
            .code(),
        Some(1)
    );
    run(&with(&SMALL, &["d.ocmf"]), d);
    assert_eq!(
        srcr(&["train", "--data", "d.ocmf", "--set", "nope=1", "--out-dir", "m"], d)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        srcr(
            &[
                "train",
                "--data",
                "d.ocmf",
                "--variant",
                "category-center",
                "--out-dir",
                "m"
            ],
            d
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        srcr(
            &[
                "split",
                "--data",
                "d.ocmf",
                "--unseen-fraction",
                "1.0",
                "--out-dir",
                "s"
            ],
            d
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn full_pipeline_emits_six_reports_and_stable_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&with(&SMALL, &["d.ocmf"]), d);
    ok(
        &[
            "split",
            "--data",
            "d.ocmf",
            "--unseen-fraction",
            "0.5",
            "--out-dir",
            "s",
        ],
        d,
    );
    let train = with(
        &[
            "train",
            "--data",
            "d.ocmf",
            "--indices",
            "s/train.idx",
            "--out-dir",
            "m",
        ],
        &TINY,
    );
    run(&train, d);
    let hsl = fs::read_to_string(d.join("m/hsl_loss.csv")).unwrap();
    assert!(hsl.starts_with("# config-hash "));
    assert_eq!(hsl.lines().count(), 2 + 3);
    let embed = |out: &str| {
        ok(
            &[
                "embed",
                "--checkpoint",
                "m/model.srcr",
                "--data",
                "d.ocmf",
                "--indices",
                "s/test.idx",
                "--out",
                out,
            ],
            d,
        )
    };
    embed("e1.ocmf");
    embed("e2.ocmf");
    assert_eq!(
        fs::read(d.join("e1.ocmf")).unwrap(),
        fs::read(d.join("e2.ocmf")).unwrap()
    );

    let table = ok(&["eval", "--embeddings", "e1.ocmf", "--out-dir", "r"], d);
    assert!(table.contains("mean"));
    let csvs: Vec<_> = fs::read_dir(d.join("r"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let reports = csvs
        .iter()
        .filter(|n| n.ends_with(".csv") && !n.ends_with("_pr.csv") && *n != "mean.csv");
    assert_eq!(reports.count(), 6);
    assert_eq!(csvs.iter().filter(|n| n.ends_with("_pr.svg")).count(), 6);
    let hash_line = fs::read_to_string(d.join("m/rce_loss.csv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    for name in &csvs {
        let text = fs::read_to_string(d.join("r").join(name)).unwrap();
        assert!(text.contains(&hash_line[2..]), "{name} lacks the config hash");
    }
    let report = fs::read_to_string(d.join("r/image-to-point.csv")).unwrap();
    assert!(report.contains("metric,value\nmap,"));

    let risk = ok(&["risk", "--embeddings", "e1.ocmf", "--out", "risk.csv"], d);
    assert!(risk.contains("mean"));
    assert!(fs::read_to_string(d.join("risk.csv")).unwrap().contains("risk_mean,"));
}

#[test]
fn ablate_lists_label_free_variants_unless_asked() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&with(&SMALL, &["d.ocmf"]), d);
    run(
        &with(
            &[
                "ablate",
                "--data",
                "d.ocmf",
                "--unseen-fraction",
                "0.5",
                "--out",
                "t.csv",
            ],
            &TINY,
        ),
        d,
    );
    let t = fs::read_to_string(d.join("t.csv")).unwrap();
    let rows: Vec<&str> = t.lines().skip(2).map(|l| l.rsplitn(4, ',').last().unwrap()).collect();
    assert_eq!(
        rows,
        [
            "Random",
            "Raw features",
            "Direct Center+HSL",
            "RCE+HSL w/o E_m",
            "\"RCE+HSL w/o E_m,E_o\"",
            "RCE+GCN-based HSL",
            "RCE+MLP-based HSL",
            "RCE+HSL"
        ]
    );
    run(
        &with(
            &[
                "ablate",
                "--data",
                "d.ocmf",
                "--unseen-fraction",
                "0.5",
                "--use-labels",
                "--out",
                "u.csv",
            ],
            &TINY,
        ),
        d,
    );
    assert!(fs::read_to_string(d.join("u.csv"))
        .unwrap()
        .contains("Category Center+HSL"));
    run(
        &with(
            &[
                "ablate",
                "--data",
                "d.ocmf",
                "--unseen-fraction",
                "0.5",
                "--out",
                "t2.csv",
            ],
            &TINY,
        ),
        d,
    );
    assert_eq!(t, fs::read_to_string(d.join("t2.csv")).unwrap());
}

#[test]
fn outputs_create_missing_parent_directories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&with(&SMALL, &["nested/data/s.ocmf"]), d);
    assert!(d.join("nested/data/s.ocmf.manifest").is_file());
}
