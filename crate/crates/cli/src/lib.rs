//! Library surface backing the `dicache` binary: run configs, report
//! assembly, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod report;

use std::sync::OnceLock;

fn log_level() -> u8 {
    static LEVEL: OnceLock<u8> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("DICACHE_LOG").as_deref() {
        Ok("debug") => 2,
        Ok("info") => 1,
        _ => 0,
    })
}

pub fn log_info(msg: &str) {
    if log_level() >= 1 {
        eprintln!("[dicache] {msg}");
    }
}

pub fn log_debug(msg: &str) {
    if log_level() >= 2 {
        eprintln!("[dicache] {msg}");
    }
}
