//! JSON-lines dataset files.
//!
//! Line 1 is a [`DatasetHeader`]; every following non-empty line is one record:
//! a [`PoseSample`] for `full3d`/`weak2d` files, an [`ArchiveEntry`] for `archive` files.
//! Loading is all-or-nothing and every failure names its 1-based line.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{PoseSample, Supervision};
use crate::skeleton::{DepthVector, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Full3d,
    Weak2d,
    Archive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    /// Unit of 2D coordinates; only `"px"` is supported.
    pub xy: String,
    /// Unit of depth values: `"px"` or `"mm"`.
    pub depth: String,
    pub pixels_per_mm: f64,
}

impl Units {
    /// Pixels per stored depth unit.
    pub fn depth_scale(&self) -> Result<f64> {
        match self.depth.as_str() {
            "px" => Ok(1.0),
            "mm" => Ok(self.pixels_per_mm),
            other => Err(Error::Config(format!("unsupported depth unit '{other}'"))),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.xy != "px" {
            return Err(format!("unsupported 2D unit '{}'", self.xy));
        }
        if self.depth != "px" && self.depth != "mm" {
            return Err(format!("unsupported depth unit '{}'", self.depth));
        }
        if !(self.pixels_per_mm.is_finite() && self.pixels_per_mm > 0.0) {
            return Err(format!(
                "pixels_per_mm must be > 0, got {}",
                self.pixels_per_mm
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub kind: DatasetKind,
    pub schema_hash: String,
    pub units: Units,
    pub field_size: f64,
}

impl DatasetHeader {
    pub const FORMAT: &'static str = "weakpose-dataset";
    pub const VERSION: u32 = 1;

    fn validate(&self) -> std::result::Result<(), String> {
        if self.format != Self::FORMAT {
            return Err(format!(
                "format must be '{}', got '{}'",
                Self::FORMAT,
                self.format
            ));
        }
        if self.version != Self::VERSION {
            return Err(format!("unsupported format version {}", self.version));
        }
        if !(self.field_size.is_finite() && self.field_size > 0.0) {
            return Err(format!("field_size must be > 0, got {}", self.field_size));
        }
        self.units.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveEntry {
    pub id: String,
    pub depths: DepthVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<PoseSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub lines: usize,
    pub records: usize,
    pub full3d: usize,
    pub weak2d: usize,
}

fn header_line(header: &DatasetHeader) -> String {
    serde_json::to_string(header).expect("header serializes")
}

/// Parse the header line and check it against the skeleton. Returns the header and
/// an iterator over the remaining `(line_number, text)` pairs.
fn split_header<'a>(
    text: &'a str,
    skeleton: &Skeleton,
) -> Result<(DatasetHeader, impl Iterator<Item = (usize, &'a str)>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (n, first) = lines
        .next()
        .ok_or_else(|| Error::data(1, "empty file: missing header line"))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| Error::data(n, format!("bad header: {e}")))?;
    header
        .validate()
        .map_err(|m| Error::data(n, format!("bad header: {m}")))?;
    let expected = skeleton.schema_hash();
    if header.schema_hash != expected {
        return Err(Error::data(
            n,
            format!(
                "schema hash mismatch: file has {}, skeleton is {expected}",
                header.schema_hash
            ),
        ));
    }
    Ok((header, lines))
}

impl DatasetFile {
    pub fn to_jsonl(&self) -> String {
        let mut out = header_line(&self.header);
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Parse and validate a sample file (`full3d` or `weak2d`).
    pub fn parse(text: &str, skeleton: &Skeleton) -> Result<(DatasetFile, ValidationReport)> {
        let (header, lines) = split_header(text, skeleton)?;
        if header.kind == DatasetKind::Archive {
            return Err(Error::data(1, "expected a sample file, found an archive"));
        }
        let mut report = ValidationReport {
            lines: 1,
            ..ValidationReport::default()
        };
        let mut records = Vec::new();
        let mut seen = HashMap::new();
        for (n, line) in lines {
            report.lines = n;
            let sample: PoseSample = serde_json::from_str(line)
                .map_err(|e| Error::data(n, format!("malformed record: {e}")))?;
            sample
                .validate(skeleton)
                .map_err(|e| Error::data(n, e.to_string()))?;
            let kind_ok = match header.kind {
                DatasetKind::Full3d => sample.supervision == Supervision::Full3d,
                DatasetKind::Weak2d => sample.supervision == Supervision::Weak2d,
                DatasetKind::Archive => false,
            };
            if !kind_ok {
                return Err(Error::data(
                    n,
                    format!(
                        "record {} has supervision {:?} in a {:?} file",
                        sample.id, sample.supervision, header.kind
                    ),
                ));
            }
            if let Some(prev) = seen.insert(sample.id.clone(), n) {
                return Err(Error::data(
                    n,
                    format!("duplicate id '{}' (first on line {prev})", sample.id),
                ));
            }
            match sample.supervision {
                Supervision::Full3d => report.full3d += 1,
                Supervision::Weak2d => report.weak2d += 1,
            }
            records.push(sample);
        }
        report.records = records.len();
        Ok((DatasetFile { header, records }, report))
    }

    pub fn load(path: &Path, skeleton: &Skeleton) -> Result<(DatasetFile, ValidationReport)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DatasetFile::parse(&text, skeleton).map_err(|e| e.with_path(path))
    }

    /// Convert depth labels to pixels according to the header's declared unit.
    pub fn into_pixel_depths(mut self) -> Result<Self> {
        let scale = self.header.units.depth_scale()?;
        if scale != 1.0 {
            for r in &mut self.records {
                if let Some(d) = &mut r.depths {
                    d.0.iter_mut().for_each(|v| *v *= scale);
                }
            }
            self.header.units.depth = "px".into();
        }
        Ok(self)
    }

    /// Records whose source tag ends with `/{split}`.
    pub fn split(&self, split: &str) -> Vec<PoseSample> {
        let suffix = format!("/{split}");
        self.records
            .iter()
            .filter(|r| r.source.ends_with(&suffix))
            .cloned()
            .collect()
    }
}

pub fn archive_to_jsonl(header: &DatasetHeader, entries: &[ArchiveEntry]) -> String {
    let mut out = header_line(header);
    out.push('\n');
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("archive entry serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_archive(
    text: &str,
    skeleton: &Skeleton,
) -> Result<(DatasetHeader, Vec<ArchiveEntry>)> {
    let (header, lines) = split_header(text, skeleton)?;
    if header.kind != DatasetKind::Archive {
        return Err(Error::data(1, "expected an archive file"));
    }
    let j = skeleton.num_joints();
    let mut entries = Vec::new();
    for (n, line) in lines {
        let entry: ArchiveEntry = serde_json::from_str(line)
            .map_err(|e| Error::data(n, format!("malformed archive entry: {e}")))?;
        if entry.depths.len() != j {
            return Err(Error::data(
                n,
                format!("expected {j} depths, got {}", entry.depths.len()),
            ));
        }
        if !entry.depths.is_finite() {
            return Err(Error::data(n, "non-finite depth value"));
        }
        entries.push(entry);
    }
    Ok((header, entries))
}

pub fn load_archive(
    path: &Path,
    skeleton: &Skeleton,
) -> Result<(DatasetHeader, Vec<ArchiveEntry>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_archive(&text, skeleton).map_err(|e| e.with_path(path))
}

/// Archive depths converted to pixels according to the header's declared unit.
pub fn archive_in_pixels(
    header: &DatasetHeader,
    entries: Vec<ArchiveEntry>,
) -> Result<Vec<ArchiveEntry>> {
    let scale = header.units.depth_scale()?;
    Ok(entries
        .into_iter()
        .map(|mut e| {
            e.depths.0.iter_mut().for_each(|v| *v *= scale);
            e
        })
        .collect())
}

/// Fill in held-out depths for weak records from an archive.
pub fn attach_archive(records: &[PoseSample], archive: &[ArchiveEntry]) -> Result<Vec<PoseSample>> {
    let by_id: HashMap<&str, &DepthVector> =
        archive.iter().map(|e| (e.id.as_str(), &e.depths)).collect();
    records
        .iter()
        .map(|r| {
            let depths = by_id
                .get(r.id.as_str())
                .ok_or_else(|| Error::MalformedSample {
                    id: r.id.clone(),
                    message: "no archived depths for this record".into(),
                })?;
            Ok(PoseSample {
                depths: Some((*depths).clone()),
                ..r.clone()
            })
        })
        .collect()
}
