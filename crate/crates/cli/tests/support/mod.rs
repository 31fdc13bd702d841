#![allow(dead_code)]

use std::path::{Path, PathBuf};

use scene_elab_cli::{run, CliError, Outcome};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fx(name: &str) -> String {
    fixture(name).display().to_string()
}

pub fn no_env(_: &str) -> Option<String> {
    None
}

/// Runs a command with the stub backend and a private run registry.
pub fn stub_run(runs: &Path, args: &[&str]) -> Result<Outcome, CliError> {
    let runs = runs.display().to_string();
    let mut argv = vec!["scene-elab", "--stub", "--runs-dir", runs.as_str()];
    argv.extend_from_slice(args);
    run(&argv, &no_env)
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

pub fn corpus_args(out: &str) -> Vec<String> {
    vec![
        "build-corpus".into(),
        "--input".into(),
        format!("story_cs={}", fx("story_cs.csv")),
        "--map".into(),
        format!("story_cs={}", fx("story_cs.map.toml")),
        "--input".into(),
        format!("social_chem={}", fx("social_chem.tsv")),
        "--map".into(),
        format!("social_chem={}", fx("social_chem.map.toml")),
        "--input".into(),
        format!("moral_stories={}", fx("moral_stories.jsonl")),
        "--map".into(),
        format!("moral_stories={}", fx("moral_stories.map.toml")),
        "--out".into(),
        out.into(),
    ]
}

pub fn siqa_args() -> Vec<String> {
    vec![
        "--dataset".into(),
        "social_iqa_test".into(),
        "--input".into(),
        fx("social_iqa_synth.jsonl"),
        "--labels".into(),
        fx("social_iqa_synth-labels.lst"),
    ]
}

pub fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}
