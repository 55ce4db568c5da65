#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crener::config::ModelConfig;
use crener::corpus::{generate_synthetic_corpus, write_jsonl, GeneratorOptions, Sentence};

pub fn crener(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crener")).args(args).env_remove("CRENER_SEED").output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn synthetic(seed: u64, count: usize, max_len: usize) -> Vec<Sentence> {
    let types = vec!["LOC".to_string(), "PER".to_string()];
    generate_synthetic_corpus(seed, count, max_len, &types, GeneratorOptions::default())
}

pub fn write_corpus(dir: &Path, name: &str, sentences: &[Sentence]) -> PathBuf {
    let path = dir.join(name);
    write_jsonl(&path, sentences).unwrap();
    path
}

/// A run file for the compact test model with the given paths and epochs.
pub fn run_toml(cfg: &ModelConfig, train: &Path, dev: Option<&Path>, ckpt: &Path) -> String {
    let mut text = toml::to_string(cfg).unwrap();
    text.push_str(&format!("\n[paths]\ntrain = {:?}\ncheckpoint_dir = {:?}\n", train, ckpt));
    if let Some(dev) = dev {
        text.push_str(&format!("dev = {dev:?}\n"));
    }
    text
}

pub fn tiny(epochs: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.optimizer.epochs = epochs;
    cfg
}
