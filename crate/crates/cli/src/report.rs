//! CSV emission: every file starts with a comment line recording the hash of
//! the effective (post-override) configuration, then a header row.

use crate::CliError;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Hex digest (16 chars) of the canonical TOML form of a config.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let canon = toml::to_string(config).unwrap_or_default();
    let digest = Sha256::digest(canon.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub struct CsvFile {
    w: BufWriter<File>,
}

impl CsvFile {
    pub fn create(path: &Path, hash: &str, header: &str) -> Result<CsvFile, CliError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# config_sha256={hash}")?;
        writeln!(w, "{header}")?;
        Ok(CsvFile { w })
    }

    pub fn row(&mut self, fields: std::fmt::Arguments<'_>) -> Result<(), CliError> {
        writeln!(self.w, "{fields}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.w.flush()?;
        Ok(())
    }
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
