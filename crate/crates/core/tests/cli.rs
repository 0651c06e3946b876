//! End-to-end runs of the `textcot` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use textcot::dataset::load_manifest;
use textcot::harness::{read_results, read_traces, RESULTS_FILE, TRACES_FILE};
use textcot::metrics::aggregate;

fn textcot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textcot"))
        .args(args)
        .env_remove("TEXTCOT_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let suite = dir.join("suite");
    let out = textcot(&["synth", "--n", &n.to_string(), "--seed", "3", "--output", s(&suite)]);
    assert!(out.status.success(), "{}", stderr(&out));
    suite
}

fn write_config(dir: &Path, strategies: &str, seed: u64) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            "datasets = [\"suite/manifest.jsonl\"]\nstrategies = [{strategies}]\noutput_dir = \"out\"\nseed = {seed}\n\n\
             [backend]\nkind = \"oracle\"\nscenes = \"suite/scenes.json\"\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn run_writes_reloadable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let suite = synth(dir.path(), 10);
    let config = write_config(dir.path(), "\"direct\", \"textcot\"", 1);
    let out = textcot(&["run", "--config", s(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("| direct |"));
    assert!(report.contains("| textcot | 100.00 |"));

    let out_dir = dir.path().join("out");
    let traces = read_traces(&out_dir.join(TRACES_FILE)).unwrap();
    assert_eq!(traces.len(), 20);
    let results = read_results(&out_dir.join(RESULTS_FILE)).unwrap();
    let rebuilt = aggregate(&results);
    assert_eq!(fs::read_to_string(out_dir.join("report.md")).unwrap(), rebuilt.to_markdown());
    assert_eq!(fs::read_to_string(out_dir.join("report.csv")).unwrap(), rebuilt.to_csv());
    assert_eq!(load_manifest(&suite.join("manifest.jsonl")).unwrap().samples.len(), 10);

    let snapshot = fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    let snapshot: toml::Value = toml::from_str(&snapshot).unwrap();
    assert_eq!(snapshot["seed"].as_integer(), Some(1));

    // the report subcommand rebuilds the same table
    let again = textcot(&["report", s(&out_dir.join(RESULTS_FILE))]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), rebuilt.to_markdown());
}

#[test]
fn resume_refuses_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 5);
    let config = write_config(dir.path(), "\"direct\"", 1);
    assert!(textcot(&["run", "--config", s(&config)]).status.success());

    let out = textcot(&["run", "--config", s(&config), "--resume", "--seed", "2"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("config hash"), "{}", stderr(&out));

    let fresh = tempfile::tempdir().unwrap();
    let out = textcot(&["run", "--config", s(&config), "--resume", "--output", s(fresh.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no previous run"), "{}", stderr(&out));
}

#[test]
fn resume_after_interruption_finishes_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 6);
    let config = write_config(dir.path(), "\"direct\", \"textcot\"", 1);
    assert!(textcot(&["run", "--config", s(&config)]).status.success());
    let traces_path = dir.path().join("out").join(TRACES_FILE);
    let complete = fs::read_to_string(&traces_path).unwrap();

    // keep four whole traces plus half of the fifth, as if the process died mid-write
    let lines: Vec<&str> = complete.lines().collect();
    let mut partial = lines[..4].join("\n");
    partial.push('\n');
    partial.push_str(&lines[4][..lines[4].len() / 2]);
    fs::write(&traces_path, partial).unwrap();

    let out = textcot(&["run", "--config", s(&config), "--resume"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("(4 resumed"), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&traces_path).unwrap(), complete);
}

#[test]
fn per_sample_failures_are_recorded_and_set_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::write(dir.path().join("images/broken.png"), b"not a png").unwrap();
    image::RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]))
        .save(dir.path().join("images/fine.png"))
        .unwrap();
    fs::write(
        dir.path().join("data.jsonl"),
        "{\"id\":\"a\",\"image\":\"images/broken.png\",\"question\":\"q?\",\"answers\":[\"x\"]}\n\
         {\"id\":\"b\",\"image\":\"images/fine.png\",\"question\":\"q?\",\"answers\":[\"legible\"]}\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "datasets = [\"data.jsonl\"]\nstrategies = [\"direct\"]\noutput_dir = \"out\"\n[backend]\nkind = \"mock\"\n",
    )
    .unwrap();
    let out = textcot(&["run", "--config", s(&dir.path().join("run.toml"))]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let traces = read_traces(&dir.path().join("out").join(TRACES_FILE)).unwrap();
    assert_eq!(traces.len(), 2);
    assert!(traces[0].error.is_some());
    assert!(traces[1].error.is_none());
    assert!(fs::read_to_string(dir.path().join("out/report.md")).unwrap().contains("failed"));
}

#[test]
fn ask_prints_answers_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    image::RgbImage::from_pixel(900, 700, image::Rgb([200, 200, 200])).save(&img).unwrap();

    let out = textcot(&["ask", s(&img), "What is written?", "--strategy", "direct"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "The text is not legible to me.");

    let out = textcot(&["ask", s(&img), "What is written?", "--trace"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let trace: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(trace["calls"].as_array().unwrap().len(), 3);
    assert!(trace["caption_answer"].is_string());
    assert_eq!(trace["parsed_box"], serde_json::json!({"x1": 225, "y1": 175, "x2": 675, "y2": 525}));
    // 450-pixel box, 675-pixel square clamped to the 700-pixel height
    assert_eq!(trace["crop_region"]["x2"].as_u64().unwrap() - trace["crop_region"]["x1"].as_u64().unwrap(), 675);
    assert!(trace["final_answer"].is_string());

    let out = textcot(&["ask", s(&dir.path().join("missing.png")), "q"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.png"));
}

#[test]
fn empty_ablation_matrix_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 5);
    let config = write_config(dir.path(), "\"direct\"", 1);
    let out = textcot(&["ablate", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablation_matrices_produce_one_row_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 10);
    let config = write_config(dir.path(), "\"direct\"", 1);
    let out = textcot(&["ablate", "--config", s(&config), "--reasoning", "--cropping"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = report.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(
        rows,
        [
            "direct",
            "textcot:no-crop,no-caption",
            "textcot:no-caption",
            "textcot",
            "textcot:mode=strict_rect",
            "textcot:mode=square",
            "textcot:mode=full_image",
        ]
    );
}

#[test]
fn convert_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.json");
    fs::write(
        &raw,
        r#"{"data": [{"question_id": 7, "image_id": "img7", "question": "what brand?", "answers": ["acme", "acme"]}]}"#,
    )
    .unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::write(dir.path().join("images/img7.jpg"), b"").unwrap();
    let manifest = dir.path().join("m.jsonl");
    let out = textcot(&["convert", "--format", "textvqa_json", "--input", s(&raw), "--output", s(&manifest)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.samples.len(), 1);
    assert_eq!(m.samples[0].question, "what brand?");
}

#[test]
fn cache_commands_report_and_clean() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 5);
    let config = write_config(dir.path(), "\"direct\"", 1);
    let cache = dir.path().join("cache");
    assert!(textcot(&["run", "--config", s(&config), "--cache-dir", s(&cache)]).status.success());
    fs::write(cache.join(".tmp-leftover"), b"x").unwrap();

    let stats: Value = serde_json::from_slice(&textcot(&["cache", "stats", "--dir", s(&cache)]).stdout).unwrap();
    assert_eq!(stats["entries"], 5);
    assert_eq!(stats["temp_files"], 1);

    let gc: Value = serde_json::from_slice(&textcot(&["cache", "gc", "--dir", s(&cache)]).stdout).unwrap();
    assert_eq!(gc["removed_temp"], 1);
    assert_eq!(gc["kept"], 5);
}
