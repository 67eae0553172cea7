#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard};

pub mod oracle;

use rio::middleware::{open_backend, BackendHandle, BackendKind};

static TIMING: Mutex<()> = Mutex::new(());

/// Serializes timing-sensitive tests within one test binary.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn kind(name: &str, tag: &str) -> BackendKind {
    match name {
        "inproc" => BackendKind::Inproc,
        "shm" => BackendKind::Shm { namespace: format!("t{}-{tag}", std::process::id()) },
        "tcp" => BackendKind::Tcp { host: "127.0.0.1".into(), port: 0 },
        other => panic!("unknown backend {other}"),
    }
}

pub fn open(name: &str, tag: &str) -> BackendHandle {
    open_backend(&kind(name, tag)).unwrap()
}

pub const BACKENDS: [&str; 3] = ["inproc", "shm", "tcp"];

pub fn config_path(file: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(file)
}

/// A shipped config, optionally moved onto another backend.
pub fn config(file: &str, backend: Option<(&str, &str)>) -> rio::station::StationConfig {
    let mut cfg = rio::station::StationConfig::load(config_path(file)).unwrap();
    if let Some((name, tag)) = backend {
        cfg.middleware = kind(name, tag);
    }
    cfg
}

pub const CONFIGS: [&str; 2] = ["single_arm.toml", "bimanual.toml"];
