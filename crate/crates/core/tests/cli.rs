mod common;

use std::process::{Command, Output};

use common::corpus_dir;

fn cachesym(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cachesym"))
        .args(args)
        .output()
        .unwrap()
}

fn corpus(name: &str) -> String {
    corpus_dir().join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn analyze_reports_the_concurrent_leak() {
    let o = cachesym(&[
        "analyze",
        &corpus("concurrent.ir"),
        "--preset",
        "paper-fig3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let top: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("  \"")?.split('"').next())
        .collect();
    assert_eq!(
        top,
        ["program", "cache", "mode", "leaks", "stats", "complete"]
    );
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(
        v["cache"],
        serde_json::json!({"size": 512, "line": 1, "assoc": 1})
    );
    let leak = &v["leaks"][0];
    assert_eq!(leak["site"], "11");
    assert_eq!(
        leak["schedule"],
        serde_json::json!([[1, "6"], [1, "9"], [2, "13"], [1, "11"]])
    );
    assert_eq!(leak["replay_confirmed"], true);
    assert_eq!(leak["cross_thread"], true);
    assert_eq!(v["complete"], true);
}

#[test]
fn repaired_program_exits_zero() {
    let o = cachesym(&[
        "analyze",
        &corpus("seq_repaired.ir"),
        "--preset",
        "paper-fig3",
        "--mode",
        "two-step",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["leaks"], serde_json::json!([]));
    assert_eq!(v["mode"], "two-step");
}

#[test]
fn exhausted_budget_exits_three() {
    let o = cachesym(&[
        "analyze",
        &corpus("concurrent_symbolic.ir"),
        "--preset",
        "paper-fig3",
        "--max-interleavings",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["complete"], false);
}

#[test]
fn syntax_errors_exit_two_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.ir");
    std::fs::write(
        &f,
        "array p [4] elem 1 at 0\nthread 1 critical {\n  load r, p[\n}\n",
    )
    .unwrap();
    let o = cachesym(&["analyze", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("bad.ir") && err.contains("4:"), "{err}");
}

#[test]
fn out_flag_writes_the_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = cachesym(&[
        "analyze",
        &corpus("seq_leaky.ir"),
        "--preset",
        "paper-fig3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["leaks"][0]["site"], "11");
}

#[test]
fn reduction_flags_do_not_change_sites() {
    let sites = |extra: &[&str]| {
        let mut args = vec!["analyze", "--cache-size", "256", "--line-size", "16"];
        let f = corpus("sbox_store.ir");
        args.push(&f);
        args.extend_from_slice(extra);
        let v: serde_json::Value = serde_json::from_str(&stdout(&cachesym(&args))).unwrap();
        let mut s: Vec<String> = v["leaks"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["site"].to_string())
            .collect();
        s.sort();
        s.dedup();
        s
    };
    assert_eq!(
        sites(&[]),
        sites(&[
            "--no-reduce-concretize",
            "--no-reduce-tables",
            "--no-reduce-layout"
        ])
    );
}

#[test]
fn replay_prints_critical_sequence() {
    let p = corpus("concurrent.ir");
    let o = cachesym(&[
        "replay",
        &p,
        "--preset",
        "paper-fig3",
        "--schedule",
        "1,1,2,1",
        "--set",
        "k=1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).ends_with("critical: <miss, miss, miss>\n"),
        "{}",
        stdout(&o)
    );
    let o = cachesym(&[
        "replay",
        &p,
        "--preset",
        "paper-fig3",
        "--schedule",
        "1,1,2,1",
        "--set",
        "k=0",
    ]);
    assert!(stdout(&o).ends_with("critical: <miss, miss, hit>\n"));
}

#[test]
fn replay_rejects_a_disabled_thread() {
    let p = corpus("seq_leaky.ir");
    let o = cachesym(&[
        "replay",
        &p,
        "--preset",
        "paper-fig3",
        "--schedule",
        "1,2",
        "--set",
        "k=3",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn brute_force_subcommand_lists_sites() {
    let o = cachesym(&[
        "brute-force",
        &corpus("seq_leaky.ir"),
        "--preset",
        "paper-fig3",
        "--key-bits",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o), "line 11 schedule 1,1,1\n");
}

#[test]
fn print_ir_output_parses_back() {
    let o = cachesym(&[
        "print-ir",
        &corpus("sbox_feistel.ir"),
        "--adversary",
        "synthesize",
        "--cache-size",
        "256",
        "--line-size",
        "16",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("adv_probe"));
    let p = cachesym::ir::parse_program(&text).unwrap();
    assert_eq!(p.threads.len(), 2);
}

#[test]
fn unknown_preset_is_an_error() {
    let o = cachesym(&["analyze", &corpus("seq_leaky.ir"), "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(2));
}
