#![allow(dead_code)]

pub mod mock_server;

use std::path::{Path, PathBuf};

use untangler::changegraph::FileVersions;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Loads `old/` and `new/` snapshots for the given relative paths.
pub fn load_versions(dir: &Path, paths: &[&str]) -> Vec<FileVersions> {
    paths
        .iter()
        .map(|p| FileVersions {
            path: p.to_string(),
            old: std::fs::read_to_string(dir.join("old").join(p)).ok(),
            new: std::fs::read_to_string(dir.join("new").join(p)).ok(),
        })
        .collect()
}

/// A fresh copy of the scripted fixture repository.
pub fn fixture_repo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let status = std::process::Command::new("bash")
        .arg(fixture("make_repo.sh"))
        .arg(dir.path())
        .status()
        .expect("bash is available");
    assert!(status.success(), "fixture repository script failed");
    dir
}
