//! Run manifests: every resolved setting of a command as `key=value` lines.

use std::path::Path;
use std::time::Instant;

use msafeb_core::config::KvConfig;

pub struct RunManifest {
    kv: KvConfig,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut kv = KvConfig::default();
        kv.set("command", command);
        kv.set("version", concat!("msafeb ", env!("CARGO_PKG_VERSION")));
        Self {
            kv,
            started: Instant::now(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.kv.set(key, value);
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for k in other.keys() {
            self.kv.set(k, other.get_str(k).unwrap_or_default());
        }
    }

    pub fn write(mut self, dir: &Path) -> std::io::Result<()> {
        self.kv.set("wall_clock_secs", format!("{:.3}", self.started.elapsed().as_secs_f64()));
        std::fs::write(dir.join("manifest.txt"), self.kv.render())
    }
}
