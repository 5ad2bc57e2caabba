#![allow(dead_code)]

use std::path::{Path, PathBuf};

use eps_core::config::{self, ScenarioConfig};
use eps_core::engine::Scenario;

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn reference(name: &str) -> Scenario {
    config::load(&configs_dir().join(name)).expect("shipped config loads").1
}

pub fn vit() -> Scenario {
    reference("vit_reference.json")
}

/// Builds a scenario from inline JSON.
pub fn from_json(text: &str) -> Scenario {
    ScenarioConfig::from_json(text)
        .and_then(|c| c.build(Path::new(".")))
        .expect("inline scenario is valid")
}
