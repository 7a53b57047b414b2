use std::process::{Command, Output};

fn flashblock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashblock"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_passes_and_reports_errors() {
    let o = flashblock(&["verify", "--trials", "20", "--seed", "0"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("PASS")).count(),
        5,
        "{text}"
    );
    assert!(text.contains("decomposition_exactness max_error="));
}

#[test]
fn verify_with_no_blocks_notes_empty_trace() {
    let o = flashblock(&["verify", "--blocks", "0", "--trials", "5"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("trace is empty"));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(flashblock(&["verify", "--tau", "0"]).status.code(), Some(2));
    assert_eq!(
        flashblock(&["verify", "--trials", "many"]).status.code(),
        Some(2)
    );
    assert_eq!(
        flashblock(&["sweep-context", "--contexts", "512,128"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        flashblock(&["sweep-density", "--densities", "0.0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(flashblock(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn csv_starts_with_invocation() {
    let o = flashblock(&[
        "sweep-context",
        "--contexts",
        "16,32",
        "--tau",
        "2",
        "--policy",
        "dense",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("# flashblock sweep-context --contexts 16,32 --tau 2 --policy dense")
    );
    assert_eq!(
        lines.next(),
        Some("context,tau,policy,step,keys_attended,kv_rows_read,wall_ns")
    );
    assert_eq!(lines.count(), 2 * 8);
}

#[test]
fn single_step_similarity_is_empty_with_warning() {
    let o = flashblock(&["analyze-similarity", "--steps", "1"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn gate_json_records_gamma() {
    let o = flashblock(&["calibrate-gates", "--gamma", "0.9", "--samples", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("\"gamma\": 0.9"), "{text}");
    assert!(text.contains("\"enabled\""));
}
