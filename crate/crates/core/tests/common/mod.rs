//! Scripted project layout shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pustage_core::backend::ScriptEntry;
use pustage_core::domain::StageLabel;

pub const PNG: &[u8] = b"\x89PNG\r\n\x1a\nfixture-bytes";

/// Writes a manifest of `n` cases (stages cycling I..IV, one image each),
/// a generator script answering each case with its true stage, an
/// always-approving critic and a run config for `mode`.
pub fn project(dir: &Path, n: usize, mode: &str, k: usize) -> PathBuf {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut manifest = String::from("case_id,image_path,stage,note\n");
    let mut generator = String::new();
    for i in 0..n {
        let stage = StageLabel::from_index(i % 4).unwrap();
        let id = format!("p{i:03}");
        std::fs::write(dir.join(format!("images/{id}.png")), PNG).unwrap();
        manifest.push_str(&format!("{id},images/{id}.png,{},ref {id}.\n", stage.roman()));
        let entry = ScriptEntry::new(format!("ref {id}."), format!("Stage: {}\nRationale: scripted.", stage.roman()));
        generator.push_str(&(serde_json::to_string(&entry).unwrap() + "\n"));
    }
    std::fs::write(dir.join("manifest.csv"), manifest).unwrap();
    std::fs::write(dir.join("generator.jsonl"), generator).unwrap();
    std::fs::write(dir.join("critic.jsonl"), serde_json::to_string(&ScriptEntry::new("", "OK")).unwrap() + "\n")
        .unwrap();
    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        format!(
            r#"manifest_path = "manifest.csv"
mode = "{mode}"
k_folds = {k}
seed = 1
output_dir = "run"

[generator]
kind = "scripted"
script = "generator.jsonl"

[critic]
kind = "scripted"
script = "critic.jsonl"
"#
        ),
    )
    .unwrap();
    config
}
