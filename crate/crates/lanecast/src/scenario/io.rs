//! Scenario persistence: one JSON document per line. Units are meters,
//! radians, and m/s at the fixed `dt` carried by each record; the full field
//! schema is documented in `docs/formats.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Scenario;
use crate::error::{Error, Result};

pub fn save_all(scenarios: &[Scenario], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for s in scenarios {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::invalid(format!("serialize scenario {}: {e}", s.id)))?;
        writeln!(w, "{line}").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    Ok(())
}

pub fn save(scenario: &Scenario, path: &Path) -> Result<()> {
    save_all(std::slice::from_ref(scenario), path)
}

pub fn load_all(path: &Path) -> Result<Vec<Scenario>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scenario: Scenario = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        scenario.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(scenario);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Scenario> {
    load_all(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::invalid(format!("{}: no scenarios", path.display())))
}
