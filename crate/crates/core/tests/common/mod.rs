#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use construct_core::config::RunConfig;
use construct_core::pipeline::Pipeline;
use construct_core::review::DecisionInput;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn config(name: &str) -> RunConfig {
    RunConfig::load(&fixture(&format!("{name}/construct.toml"))).expect("fixture config loads")
}

pub fn open(name: &str, run: &Path) -> Pipeline {
    Pipeline::open(config(name), run).expect("pipeline opens")
}

pub fn decisions(rel: &str) -> Vec<DecisionInput> {
    fs::read_to_string(fixture(rel))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// unit_id -> planted class name.
pub fn planted_truth() -> BTreeMap<String, String> {
    let mut rdr = csv::Reader::from_path(fixture("planted/truth.csv")).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect()
}

pub const PLANTED: [&str; 5] = ["AI Risks", "AI Benefits", "AI Regulation", "AI Ethics", "AI Innovation"];
