//! End-to-end tests of the `i2cl` binary: exit codes, artifact shapes and
//! rerun determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use i2cl_core::report::{read_result_rows, read_rows, summarize};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_i2cl")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn i2cl")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Shared scratch area holding a small untrained checkpoint and a task spec.
struct Fixture {
    dir: PathBuf,
    model: PathBuf,
    task: PathBuf,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("i2cl-cli-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let model = dir.join("model.bin");
        let out = run(&[
            "pretrain",
            "--out",
            model.to_str().unwrap(),
            "--steps",
            "0",
            "--layers",
            "2",
            "--d-model",
            "16",
            "--heads",
            "2",
            "--max-seq",
            "192",
            "--min-pattern-len",
            "2",
            "--max-pattern-len",
            "4",
        ]);
        assert_ok(&out);
        let task = dir.join("task.spec");
        std::fs::write(
            &task,
            "name = demo\nclasses = A,B,C\ngenerators = letters,specials,digits\nmin_len = 2\nmax_len = 4\nseed = 5\n",
        )
        .unwrap();
        Fixture { dir, model, task }
    })
}

fn eval_args<'a>(
    fx: &'a Fixture,
    out_dir: &'a Path,
    method: &'a str,
    seeds: &'a str,
    extra: &[&'a str],
) -> Vec<&'a str> {
    let mut args = vec![
        "eval",
        "--model",
        fx.model.to_str().unwrap(),
        "--task",
        fx.task.to_str().unwrap(),
        "--method",
        method,
        "--seeds",
        seeds,
        "--out",
        out_dir.to_str().unwrap(),
        "--eval-size",
        "12",
        "--train-pool",
        "30",
        "--holdout",
        "6",
        "--demos-per-class",
        "2",
        "--epochs",
        "4",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn eval_zero_shot_single_seed_writes_one_row() {
    let fx = fixture();
    let out_dir = fx.dir.join("zs");
    let leaked: &'static Path = Box::leak(out_dir.into_boxed_path());
    let out = run(&eval_args(fx, leaked, "zero_shot", "0", &[]));
    assert_ok(&out);
    let rows = read_result_rows(&leaked.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, "zero_shot");
    assert_eq!(rows[0].task, "demo");
    assert_eq!(rows[0].cached_scalars, 0);
    assert!(leaked.join("queries_zero_shot_demo_0.csv").exists());
}

#[test]
fn missing_model_exits_2_and_names_path() {
    let fx = fixture();
    let out_dir = fx.dir.join("missing");
    let out = run(&[
        "eval",
        "--model",
        "/nonexistent/model.bin",
        "--task",
        fx.task.to_str().unwrap(),
        "--method",
        "zero_shot",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/model.bin"), "stderr: {stderr}");
}

#[test]
fn unknown_method_exits_2() {
    let fx = fixture();
    let out_dir = fx.dir.join("unknown");
    let out = run(&eval_args(fx, Box::leak(out_dir.into_boxed_path()), "bogus", "0", &[]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn three_methods_five_seeds_gives_fifteen_rows_and_consistent_summary() {
    let fx = fixture();
    let out_dir: &'static Path = Box::leak(fx.dir.join("grid").into_boxed_path());
    for method in ["zero_shot", "icl", "i2cl"] {
        let out = run(&eval_args(fx, out_dir, method, "0,1,2,3,4", &[]));
        assert_ok(&out);
    }
    let rows = read_result_rows(&out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 15);
    for method in ["zero_shot", "icl", "i2cl"] {
        assert_eq!(rows.iter().filter(|r| r.method == method).count(), 5);
    }

    // recompute the mean/std summary from the raw rows
    let i2cl_rows: Vec<_> = rows.iter().filter(|r| r.method == "i2cl").cloned().collect();
    let expected_mean =
        i2cl_rows.iter().map(|r| r.accuracy).sum::<f64>() / i2cl_rows.len() as f64;
    let summary = summarize(&rows);
    let (_, mean, _, n) = summary.iter().find(|(m, ..)| m == "i2cl").unwrap();
    assert!((mean - expected_mean).abs() < 1e-12);
    assert_eq!(*n, 5);

    // ICL pays M+T tokens and caches 2MDL scalars; injection caches 2DL+4L
    let icl_row = rows.iter().find(|r| r.method == "icl").unwrap();
    let zs_row = rows.iter().find(|r| r.method == "zero_shot").unwrap();
    assert!(icl_row.tokens_per_query > zs_row.tokens_per_query);
    assert!(icl_row.cached_scalars > 0);
    let i2cl_row = rows.iter().find(|r| r.method == "i2cl").unwrap();
    assert_eq!(i2cl_row.cached_scalars, (2 * 16 * 2 + 4 * 2) as u64);
    assert_eq!(i2cl_row.tokens_per_query, zs_row.tokens_per_query);
}

#[test]
fn demo_count_sweep_writes_grid_rows() {
    let fx = fixture();
    let out_dir: &'static Path = Box::leak(fx.dir.join("sweep").into_boxed_path());
    let mut args = eval_args(fx, out_dir, "i2cl", "0,1,2", &[]);
    args[0] = "sweep";
    args.extend_from_slice(&["--axis", "demos", "--values", "1,3,5"]);
    let out = run(&args);
    assert_ok(&out);
    let rows = read_result_rows(&out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 9);
    for value in ["1", "3", "5"] {
        let tag = format!("i2cl[demos={value}]");
        assert_eq!(rows.iter().filter(|r| r.method == tag).count(), 3);
    }
}

#[test]
fn module_sweep_is_tagged_with_row_names() {
    let fx = fixture();
    let out_dir: &'static Path = Box::leak(fx.dir.join("modsweep").into_boxed_path());
    let mut args = eval_args(fx, out_dir, "i2cl", "0", &[]);
    args[0] = "sweep";
    args.extend_from_slice(&["--axis", "modules", "--values", "mha,mlp,mha+mlp"]);
    let out = run(&args);
    assert_ok(&out);
    let rows = read_result_rows(&out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for tag in ["i2cl[modules=mha]", "i2cl[modules=mlp]", "i2cl[modules=mha+mlp]"] {
        assert_eq!(rows.iter().filter(|r| r.method == tag).count(), 1, "{tag}");
    }
}

/// Strip the wall-clock column from a per-query CSV for comparison.
fn strip_wall(path: &Path) -> Vec<Vec<String>> {
    let (header, mut rows) = read_rows(path).unwrap();
    let wall_idx = header.iter().position(|h| h == "wall_ms").unwrap();
    for row in &mut rows {
        row.remove(wall_idx);
    }
    rows
}

#[test]
fn reruns_reproduce_all_rows_exactly() {
    let fx = fixture();
    let a: &'static Path = Box::leak(fx.dir.join("det_a").into_boxed_path());
    let b: &'static Path = Box::leak(fx.dir.join("det_b").into_boxed_path());
    for dir in [a, b] {
        let out = run(&eval_args(fx, dir, "i2cl", "0,1", &[]));
        assert_ok(&out);
    }
    let rows_a = read_result_rows(&a.join("results.csv")).unwrap();
    let rows_b = read_result_rows(&b.join("results.csv")).unwrap();
    assert_eq!(rows_a, rows_b);
    for seed in 0..2 {
        let qa = strip_wall(&a.join(format!("queries_i2cl_demo_{seed}.csv")));
        let qb = strip_wall(&b.join(format!("queries_i2cl_demo_{seed}.csv")));
        assert_eq!(qa, qb);
    }
}

#[test]
fn calibrate_transfer_export_roundtrip() {
    let fx = fixture();
    let registry: &'static Path = Box::leak(fx.dir.join("anchors").into_boxed_path());
    let anchor_dir = registry.join("demo");
    let out = run(&[
        "calibrate",
        "--model",
        fx.model.to_str().unwrap(),
        "--task",
        fx.task.to_str().unwrap(),
        "--out-anchor",
        anchor_dir.to_str().unwrap(),
        "--train-pool",
        "30",
        "--demos-per-class",
        "2",
        "--epochs",
        "4",
    ]);
    assert_ok(&out);
    assert!(anchor_dir.join("context.i2clv").exists());
    assert!(anchor_dir.join("coefficients.i2clc").exists());
    assert!(anchor_dir.join("manifest.txt").exists());
    let (header, loss_rows) = read_rows(&anchor_dir.join("calibration_loss.csv")).unwrap();
    assert_eq!(header, vec!["epoch", "lr", "loss"]);
    assert_eq!(loss_rows.len(), 4);

    // second task to transfer onto
    let task2 = fx.dir.join("task2.spec");
    std::fs::write(
        &task2,
        "name = shifted\nclasses = A,B,C\ngenerators = specials,digits,letters\nmin_len = 2\nmax_len = 4\nseed = 6\n",
    )
    .unwrap();
    let transfer_out: &'static Path = Box::leak(fx.dir.join("transfer").into_boxed_path());
    let out = run(&[
        "transfer",
        "--model",
        fx.model.to_str().unwrap(),
        "--task",
        task2.to_str().unwrap(),
        "--anchors",
        registry.to_str().unwrap(),
        "--out",
        transfer_out.to_str().unwrap(),
        "--train-pool",
        "30",
        "--eval-size",
        "12",
        "--demos-per-class",
        "2",
        "--epochs",
        "4",
    ]);
    assert_ok(&out);
    let rows = read_result_rows(&transfer_out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().any(|r| r.method == "i2cl_transfer"));
    assert!(rows.iter().any(|r| r.method == "i2cl_no_transfer"));

    let export_out: &'static Path = Box::leak(fx.dir.join("export").into_boxed_path());
    let out = run(&[
        "export",
        "--anchors",
        registry.to_str().unwrap(),
        "--out",
        export_out.to_str().unwrap(),
    ]);
    assert_ok(&out);
    for file in ["coefficients.csv", "context_vectors.csv", "cosine_matrix.csv"] {
        assert!(export_out.join(file).exists(), "{file}");
    }
    let (header, rows) = read_rows(&export_out.join("coefficients.csv")).unwrap();
    assert_eq!(header.len(), 1 + 4 * 2);
    assert_eq!(rows.len(), 1);
    let (_, cos_rows) = read_rows(&export_out.join("cosine_matrix.csv")).unwrap();
    let diag: f64 = cos_rows[0][1].parse().unwrap();
    assert!((diag - 1.0).abs() < 1e-9);
}

#[test]
fn pretrain_loss_log_written() {
    let fx = fixture();
    let model2 = fx.dir.join("m2.bin");
    let out = run(&[
        "pretrain",
        "--out",
        model2.to_str().unwrap(),
        "--steps",
        "2",
        "--batch",
        "1",
        "--layers",
        "1",
        "--d-model",
        "8",
        "--heads",
        "1",
        "--max-seq",
        "96",
        "--min-pattern-len",
        "2",
        "--max-pattern-len",
        "3",
    ]);
    assert_ok(&out);
    let (header, rows) = read_rows(&model2.with_extension("loss.csv")).unwrap();
    assert_eq!(header, vec!["step", "lr", "loss"]);
    assert_eq!(rows.len(), 2);
}
