//! Dataset manifest: a header line followed by one tab-separated record per
//! video.
//!
//! ```text
//! #rtfm-manifest	version=1	snippets=32	feature_dim=64
//! train_a_0000	train/train_a_0000.rtfm	1	0,0,1,1,1,0,...
//! train_n_0000	train/train_n_0000.rtfm	0
//! ```
//!
//! Paths are relative to the manifest's directory. The fourth column, the
//! comma-separated per-snippet labels, is optional.
#![allow(clippy::tabs_in_doc_comments)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::features::{read_feature_header, read_features, write_features};
use super::{Dataset, LabeledVideo};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const HEADER_TAG: &str = "#rtfm-manifest";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: u8,
    pub snippet_labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    pub snippets: usize,
    pub feature_dim: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(snippets: usize, feature_dim: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            snippets,
            feature_dim,
            entries: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_TAG}\tversion={}\tsnippets={}\tfeature_dim={}\n",
            self.version, self.snippets, self.feature_dim
        );
        for e in &self.entries {
            write!(out, "{}\t{}\t{}", e.id, e.path.display(), e.label).expect("string write");
            if let Some(labels) = &e.snippet_labels {
                let joined: Vec<String> = labels.iter().map(u8::to_string).collect();
                write!(out, "\t{}", joined.join(",")).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Field-level checks that need no file access.
    fn validate_entries(&self) -> Result<()> {
        let mut offenders = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            let mut problems = Vec::new();
            if !seen.insert(e.id.as_str()) {
                problems.push("duplicate id".to_string());
            }
            if let Some(labels) = &e.snippet_labels {
                if labels.len() != self.snippets {
                    problems.push(format!("{} snippet labels for T={}", labels.len(), self.snippets));
                }
                let positives = labels.iter().filter(|&&l| l == 1).count();
                if e.label == 1 && positives == 0 {
                    problems.push("abnormal video without abnormal snippets".into());
                }
                if e.label == 0 && positives > 0 {
                    problems.push("normal video with abnormal snippets".into());
                }
            }
            if !problems.is_empty() {
                offenders.push(format!("{} ({})", e.id, problems.join("; ")));
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("inconsistent manifest entries: {}", offenders.join(", "))))
        }
    }
}

fn parse_label(s: &str, line: usize) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Validation(format!("line {line}: label must be 0 or 1, got {other:?}"))),
    }
}

fn header_field(field: Option<&str>, key: &str) -> Result<usize> {
    field
        .and_then(|f| f.strip_prefix(key))
        .and_then(|f| f.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Validation(format!("manifest header: missing or malformed {key}")))
}

/// Parses manifest text without touching the referenced files.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Validation("empty manifest".into()))?;
    let mut fields = header.split('\t');
    if fields.next() != Some(HEADER_TAG) {
        return Err(Error::Validation(format!("manifest header must start with {HEADER_TAG}")));
    }
    let version = header_field(fields.next(), "version")? as u32;
    if version != MANIFEST_VERSION {
        return Err(Error::Validation(format!("unsupported manifest version {version}")));
    }
    let snippets = header_field(fields.next(), "snippets")?;
    let feature_dim = header_field(fields.next(), "feature_dim")?;
    let mut manifest = DatasetManifest {
        version,
        snippets,
        feature_dim,
        entries: Vec::new(),
    };
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(Error::Validation(format!(
                "line {lineno}: expected 3 or 4 tab-separated fields, got {}",
                cols.len()
            )));
        }
        let snippet_labels = cols
            .get(3)
            .map(|s| s.split(',').map(|l| parse_label(l.trim(), lineno)).collect::<Result<Vec<_>>>())
            .transpose()?;
        manifest.entries.push(ManifestEntry {
            id: cols[0].to_string(),
            path: PathBuf::from(cols[1]),
            label: parse_label(cols[2], lineno)?,
            snippet_labels,
        });
    }
    manifest.validate_entries()?;
    Ok(manifest)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads and validates a manifest, probing every referenced feature file's
/// header for the manifest's `T` and `D`.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    let dir = base_dir(path);
    let mut offenders = Vec::new();
    for e in &manifest.entries {
        match read_feature_header(dir.join(&e.path)) {
            Ok((t, d)) if t == manifest.snippets && d == manifest.feature_dim => {}
            Ok((t, d)) => offenders.push(format!(
                "{} is {t}×{d}, manifest declares {}×{}",
                e.id, manifest.snippets, manifest.feature_dim
            )),
            Err(err) => offenders.push(format!("{}: {err}", e.id)),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Validation(format!(
            "feature files inconsistent with manifest: {}",
            offenders.join("; ")
        )));
    }
    Ok(manifest)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and every feature file it references.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let dir = base_dir(path);
    let videos = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(LabeledVideo {
                id: e.id.clone(),
                features: read_features(dir.join(&e.path))?,
                label: e.label,
                snippet_labels: e.snippet_labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest.snippets, manifest.feature_dim, videos)
}

/// Writes `<dir>/<name>/<id>.rtfm` for every video plus `<dir>/<name>.manifest`,
/// returning the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, name: &str, dataset: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let sub = dir.join(name);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut manifest = DatasetManifest::new(dataset.snippets, dataset.feature_dim);
    for v in &dataset.videos {
        let rel = PathBuf::from(name).join(format!("{}.rtfm", v.id));
        write_features(dir.join(&rel), &v.features)?;
        manifest.entries.push(ManifestEntry {
            id: v.id.clone(),
            path: rel,
            label: v.label,
            snippet_labels: v.snippet_labels.clone(),
        });
    }
    let path = dir.join(format!("{name}.manifest"));
    write_manifest(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_video_list_is_valid() {
        let m = parse_manifest("#rtfm-manifest\tversion=1\tsnippets=4\tfeature_dim=8\n").unwrap();
        assert!(m.entries.is_empty());
        assert_eq!((m.snippets, m.feature_dim), (4, 8));
        assert_eq!(parse_manifest(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn text_round_trip() {
        let mut m = DatasetManifest::new(3, 4);
        m.entries.push(ManifestEntry {
            id: "a".into(),
            path: "x/a.rtfm".into(),
            label: 1,
            snippet_labels: Some(vec![0, 1, 0]),
        });
        m.entries.push(ManifestEntry {
            id: "b".into(),
            path: "x/b.rtfm".into(),
            label: 0,
            snippet_labels: None,
        });
        let text = m.to_text();
        assert!(text.contains("a\tx/a.rtfm\t1\t0,1,0\n"));
        assert_eq!(parse_manifest(&text).unwrap(), m);
    }

    #[test]
    fn malformed_records_rejected() {
        let head = "#rtfm-manifest\tversion=1\tsnippets=2\tfeature_dim=4\n";
        assert!(parse_manifest("").is_err());
        assert!(parse_manifest("nonsense\n").is_err());
        assert!(parse_manifest(&format!("{head}a\tp\t2\n")).is_err());
        assert!(parse_manifest(&format!("{head}a\tp\n")).is_err());
        // wrong label count, and abnormal video with no abnormal snippet
        let err = parse_manifest(&format!("{head}a\tp\t1\t0,0,1\nb\tq\t1\t0,0\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a (") && msg.contains("b ("), "{msg}");
    }
}
