//! End-to-end CLI tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn mcqa_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcqa"))
}

fn run(args: &[&str]) -> Output {
    mcqa_bin().args(args).output().expect("binary runs")
}

fn write_demo_dataset(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("demo.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"id":"d1","stem":"Greenhouses are great for plants like","options":["Pizza","Lollipops","Candles","French beans"],"gold_index":3}"#,
            "\n",
            r#"{"id":"d2","stem":"The pond froze over for the winter so","options":["People skated on the pond.","People brought boats to the pond."],"gold_index":0}"#,
            "\n",
            r#"{"id":"d3","stem":"Ice is best described as","options":["hot","cold","loud"],"gold_index":1}"#,
            "\n",
        ),
    )
    .unwrap();
    path
}

#[test]
fn validate_accepts_clean_and_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let output = run(&["validate", "--dataset", dataset.to_str().unwrap()]);
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("no invariant violations"));

    let dup = dir.path().join("dup.jsonl");
    std::fs::write(
        &dup,
        concat!(
            r#"{"id":"same","stem":"s","options":["a","b"],"gold_index":0}"#,
            "\n",
            r#"{"id":"same","stem":"t","options":["c","d"],"gold_index":1}"#,
            "\n",
        ),
    )
    .unwrap();
    let output = run(&["validate", "--dataset", dup.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(3), "data errors exit 3");
    assert!(String::from_utf8_lossy(&output.stdout).contains("appears 2 times"));
}

#[test]
fn eval_oracle_reports_perfect_accuracy_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let out_path = dir.path().join("report.json");
    let output = run(&[
        "eval",
        "--dataset",
        dataset.to_str().unwrap(),
        "--protocol",
        "mcp",
        "--backend",
        "mock:oracle",
        "--format",
        "json",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report = mcqa::parse_report(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report.metrics.accuracy, 1.0);
    assert_eq!(report.metrics.call_count, 3);
    assert_eq!(report.records.len(), 3);
}

#[test]
fn eval_runs_are_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let out_a = dir.path().join("a.json");
    let out_b = dir.path().join("b.json");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "eval",
            "--dataset",
            dataset.to_str().unwrap(),
            "--protocol",
            "cp",
            "--cp-strategy",
            "best_of_all",
            "--backend",
            "mock:seeded-hash",
            "--mock-seed",
            "31",
            "--seed",
            "7",
            "--format",
            "json",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success());
    }
    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap(),
        "same config and backend must give identical bytes"
    );
}

#[test]
fn eval_config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        format!(
            "dataset = {:?}\nprotocol = \"mcp\"\nseed = 3\nshots = 0\n\n[backend]\nkind = \"mock:first-symbol\"\n",
            dataset.to_str().unwrap()
        ),
    )
    .unwrap();
    let out_path = dir.path().join("report.json");
    // Override the backend to the oracle: accuracy goes to 1.0.
    let output = run(&[
        "eval",
        "--config",
        config_path.to_str().unwrap(),
        "--backend",
        "mock:oracle",
        "--format",
        "json",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report = mcqa::parse_report(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report.config.seed, 3, "config file field survived");
    assert_eq!(report.config.backend.kind, "mock:oracle", "flag overrode the file");
    assert_eq!(report.metrics.accuracy, 1.0);
}

#[test]
fn unknown_backend_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let output = run(&[
        "eval",
        "--dataset",
        dataset.to_str().unwrap(),
        "--backend",
        "mock:banana",
    ]);
    assert_eq!(output.status.code(), Some(2), "config errors exit 2");
}

#[test]
fn missing_dataset_file_is_a_data_error() {
    let output = run(&["eval", "--dataset", "/nonexistent/nope.jsonl"]);
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn ppa_first_symbol_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let out_path = dir.path().join("ppa.tsv");
    let output = run(&[
        "ppa",
        "--dataset",
        dataset.to_str().unwrap(),
        "--backend",
        "mock:first-symbol",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let table = std::fs::read_to_string(&out_path).unwrap();
    assert!(table.contains("d1\t4\t24\t6\t0.250000"), "table:\n{table}");
    assert!(table.lines().last().unwrap().starts_with("ALL\t"));
}

#[test]
fn import_converts_label_layout_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("hf.jsonl");
    std::fs::write(
        &source,
        concat!(
            r#"{"id":"q1","question_stem":"Greenhouses are great for plants like","choices":{"text":["Pizza","Lollipops","Candles","French beans"],"label":["A","B","C","D"]},"answerKey":"D"}"#,
            "\n",
            r#"{"id":"q2","question_stem":"Frozen ponds are good for","choices":{"text":["skating","swimming"],"label":["A","B"]},"answerKey":"A"}"#,
            "\n",
        ),
    )
    .unwrap();
    let output_path = dir.path().join("canonical.jsonl");
    let output = run(&[
        "import",
        "--input",
        source.to_str().unwrap(),
        "--output",
        output_path.to_str().unwrap(),
        "--stem-field",
        "question_stem",
        "--id-prefix",
        "obqa/",
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let questions = mcqa::load_questions(&output_path).unwrap();
    assert_eq!(questions.len(), 2);
    assert_eq!(questions[0].id, "obqa/q1");
    assert_eq!(questions[0].gold_index, 3);
    assert_eq!(questions[1].gold_index, 0);

    let check = run(&["validate", "--dataset", output_path.to_str().unwrap()]);
    assert!(check.status.success());
}

#[test]
fn import_rejects_unresolvable_gold() {
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("bad.jsonl");
    std::fs::write(
        &source,
        r#"{"id":"q1","question":"stem","choices":["a","b"],"answerKey":"Z"}"#,
    )
    .unwrap();
    let output = run(&[
        "import",
        "--input",
        source.to_str().unwrap(),
        "--output",
        dir.path().join("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("gold answer"));
}

#[test]
fn partial_records_flush_during_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let partial = dir.path().join("partial.jsonl");
    let output = run(&[
        "eval",
        "--dataset",
        dataset.to_str().unwrap(),
        "--backend",
        "mock:oracle",
        "--partial",
        partial.to_str().unwrap(),
        "--format",
        "json",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let lines = std::fs::read_to_string(&partial).unwrap();
    assert_eq!(lines.lines().count(), 3, "one JSONL line per completed record");
    for line in lines.lines() {
        let record: mcqa::EvalRecord = serde_json::from_str(line).unwrap();
        assert!(record.skipped.is_none());
    }
}

#[test]
fn config_file_ppa_flag_routes_to_agreement_run() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_demo_dataset(dir.path());
    let config_path = dir.path().join("ppa.toml");
    std::fs::write(
        &config_path,
        format!(
            "dataset = {:?}\nppa = true\nppa_cap = 720\n\n[backend]\nkind = \"mock:first-symbol\"\n",
            dataset.to_str().unwrap()
        ),
    )
    .unwrap();
    let out_path = dir.path().join("agreement.tsv");
    let output = run(&[
        "eval",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let table = std::fs::read_to_string(&out_path).unwrap();
    assert!(table.starts_with("id\tn\torderings_used"));
    assert!(table.contains("d1\t4\t24\t6\t0.250000"));
}
