//! On-disk record formats. Every JSONL line and JSON document carries a
//! `schema_version`; readers accept lines without one as the current version.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidelines::Her2Class;
use crate::model::{Logits, Patch, Slide};

pub const SCHEMA_VERSION: u32 = 1;

fn current_version() -> u32 {
    SCHEMA_VERSION
}

/// One slide per line of a cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideRecord {
    #[serde(default = "current_version")]
    pub schema_version: u32,
    pub id: String,
    pub label: Her2Class,
    pub patches: Vec<Patch>,
}

impl SlideRecord {
    pub fn from_slide(slide: &Slide) -> Self {
        SlideRecord {
            schema_version: SCHEMA_VERSION,
            id: slide.id.clone(),
            label: slide.label,
            patches: slide.patches.clone(),
        }
    }

    pub fn into_slide(self) -> Result<Slide> {
        check_version(self.schema_version)?;
        Slide::new(self.id, self.label, self.patches)
    }
}

/// A rater's slide score, one per line of a rater label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    #[serde(default = "current_version")]
    pub schema_version: u32,
    pub id: String,
    pub label: Her2Class,
}

/// Frozen logits of one patch, one per line of a logits dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitRecord {
    #[serde(default = "current_version")]
    pub schema_version: u32,
    pub slide: String,
    pub patch: String,
    pub logits: Logits,
    pub weight: f64,
    pub label: Her2Class,
}

pub fn check_version(v: u32) -> Result<()> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "unsupported schema_version {v} (expected {SCHEMA_VERSION})"
        )))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_cohort(path: &Path) -> Result<Vec<Slide>> {
    read_jsonl::<SlideRecord>(path)?
        .into_iter()
        .map(SlideRecord::into_slide)
        .collect()
}

pub fn write_cohort(path: &Path, slides: &[Slide]) -> Result<()> {
    let records: Vec<_> = slides.iter().map(SlideRecord::from_slide).collect();
    write_jsonl(path, &records)
}
