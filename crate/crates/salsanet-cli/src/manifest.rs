//! Run manifests: every command records what it did, with which inputs
//! and settings, as `manifest.txt` in its output directory.

use std::fmt::Display;
use std::path::Path;

use anyhow::Context;

/// Ordered key/value record of a single command invocation.
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    /// Starts a manifest for the named subcommand.
    pub fn new(command: &str) -> RunManifest {
        let mut manifest = RunManifest {
            entries: Vec::new(),
        };
        manifest.push("command", command);
        manifest.push("artifact_version", env!("CARGO_PKG_VERSION"));
        manifest
    }

    /// Appends one entry; insertion order is preserved in the output.
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Appends pre-formatted `key = value` lines, e.g. a resolved
    /// training configuration, under a `prefix.` namespace.
    pub fn push_key_values(&mut self, prefix: &str, text: &str) {
        for line in text.lines() {
            if let Some((key, value)) = line.split_once('=') {
                self.push(&format!("{prefix}.{}", key.trim()), value.trim());
            }
        }
    }

    /// Renders the manifest as `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.entries {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(value);
            out.push('\n');
        }
        out
    }

    /// Writes `manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.render())
            .with_context(|| format!("writing {}", path.display()))
    }
}
