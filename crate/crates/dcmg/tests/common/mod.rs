#![allow(dead_code)]

use std::path::PathBuf;

pub fn shipped() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/table1_fig4.json")
}

pub fn shipped_json() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(shipped()).unwrap()).unwrap()
}
