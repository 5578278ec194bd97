use std::process::{Command, Output};

fn robquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robquant")).args(args).output().unwrap()
}

fn body(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn data_lines(s: &str) -> Vec<&str> {
    s.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn error_curves_rows_and_exit_code() {
    let out = robquant(&["error-curves", "--d_grid", "1:2:0.5", "--bits_list", "2,4"]);
    assert_eq!(out.status.code(), Some(0));
    let s = body(&out);
    assert_eq!(data_lines(&s).len(), 1 + 3 * 2);
    assert!(s.contains("# dominance = pass"));
    assert!(s.lines().any(|l| l.starts_with("# generated_unix = ")));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(robquant(&["nonsense"]).status.code(), Some(2));
    assert_eq!(robquant(&["ptq", "--no.such.key", "1"]).status.code(), Some(2));
    assert_eq!(robquant(&["ptq", "--fit", "median"]).status.code(), Some(2));
    assert_eq!(robquant(&[]).status.code(), Some(2));
}

#[test]
fn config_file_and_reproducible_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\ndata.n = 400\ndata.dim = 8\nmodel.widths = 8,16,4\ntrain.epochs = 3\nseeds = 1,2\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.rqck");
    let args = [
        "ptq",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bits_w",
        "3",
        "--jobs",
        "2",
        "--no-timestamp",
    ];
    let a = robquant(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(dir.path().join("m.s1.rqck").exists() && dir.path().join("m.s2.rqck").exists());
    let b = robquant(&args);
    assert_eq!(body(&a), body(&b));
    let s = body(&a);
    assert!(s.contains("# bits_w = 3"));
    let rows = data_lines(&s);
    assert_eq!(rows[0], "seed,bits_w,bits_a,fit,fp_accuracy,accuracy,drop,drift_max");
    assert_eq!(rows.len(), 3);

    let out = dir.path().join("kl.csv");
    let k = robquant(&["kl", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--bits_w", "FP", "--out", out.to_str().unwrap()]);
    assert_eq!(k.status.code(), Some(0));
    let csv = std::fs::read_to_string(out).unwrap();
    for line in data_lines(&csv).iter().skip(1) {
        assert!(line.ends_with(",0"), "{line}");
    }
}

#[test]
fn gradcheck_passes() {
    let out = robquant(&["gradcheck", "--gradcheck.points", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_lines(&body(&out)).len(), 21);
}
