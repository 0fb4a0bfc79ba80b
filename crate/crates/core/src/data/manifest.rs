//! JSON-Lines dataset manifest loader.

use super::{ClassLabel, ImageRecord, Split};
use crate::{Error, Result};
use serde::Deserialize;
use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

#[derive(Deserialize)]
struct RawRow {
    image_path: String,
    label: String,
    #[serde(default)]
    saliency_path: Option<String>,
    split: String,
}

/// A loaded manifest: records in file order plus the directory they are
/// relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for r in &self.records {
            match r.split {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    pub fn of_split(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Reads a manifest. Each non-empty line must be a JSON object with keys
/// `image_path`, `label` (normal | heart_failure | chf | pneumonia),
/// `saliency_path` (string or null) and `split` (train | val | test).
/// Relative paths are resolved against the manifest's directory. Only the
/// manifest itself is read eagerly; pixel data stays on disk.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::new();
    let mut seen_paths: HashSet<PathBuf> = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RawRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let label = ClassLabel::parse(&row.label).map_err(|e| at_line(e, path, lineno))?;
        let split = Split::parse(&row.split).map_err(|e| at_line(e, path, lineno))?;
        let image_path = resolve(base, &row.image_path);
        if !seen_paths.insert(image_path.clone()) {
            return Err(Error::Validation(format!(
                "{}:{lineno}: duplicate image_path {:?}",
                path.display(),
                row.image_path
            )));
        }
        records.push(ImageRecord {
            image_path,
            label,
            saliency_path: row.saliency_path.as_deref().map(|p| resolve(base, p)),
            split,
        });
    }
    let manifest = Manifest {
        path: path.to_path_buf(),
        records,
    };
    let (train, val, test) = manifest.split_counts();
    log::info!(
        "loaded {} records from {} (train {train} / val {val} / test {test})",
        manifest.records.len(),
        path.display()
    );
    Ok(manifest)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}

fn at_line(e: Error, path: &Path, lineno: usize) -> Error {
    match e {
        Error::Validation(msg) => {
            Error::Validation(format!("{}:{lineno}: {msg}", path.display()))
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("manifest.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        path
    }

    #[test]
    fn three_line_manifest_maps_labels_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"image_path":"a.png","label":"normal","saliency_path":null,"split":"train"}"#,
                r#"{"image_path":"b.png","label":"chf","saliency_path":"b_sal.png","split":"train"}"#,
                r#"{"image_path":"c.png","label":"pneumonia","saliency_path":null,"split":"test"}"#,
            ],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 3);
        let labels: Vec<usize> = m.records.iter().map(|r| r.label.index()).collect();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(m.records[1].saliency_path.as_ref().unwrap(), &dir.path().join("b_sal.png"));
        assert_eq!(m.records[0].image_path, dir.path().join("a.png"));
        assert_eq!(m.split_counts(), (2, 0, 1));
    }

    #[test]
    fn unknown_label_is_a_validation_error_naming_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"image_path":"a.png","label":"normal","saliency_path":null,"split":"train"}"#,
                r#"{"image_path":"b.png","label":"flu","saliency_path":null,"split":"train"}"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err();
        match &err {
            Error::Validation(msg) => {
                assert!(msg.contains(":2:"), "{msg}");
                assert!(msg.contains("flu"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error_naming_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"image_path":"a.png","label":"normal","saliency_path":null,"split":"train"}"#,
                r#"{not json"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err();
        match &err {
            Error::Parse { line, .. } => assert_eq!(*line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn duplicate_image_path_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"image_path":"a.png","label":"normal","saliency_path":null,"split":"train"}"#,
                r#"{"image_path":"a.png","label":"pneumonia","saliency_path":null,"split":"test"}"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err:?}");
    }

    #[test]
    fn missing_saliency_key_defaults_to_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[r#"{"image_path":"a.png","label":"normal","split":"val"}"#],
        );
        let m = load_manifest(&path).unwrap();
        assert!(m.records[0].saliency_path.is_none());
        assert_eq!(m.records[0].split, Split::Val);
    }

    #[test]
    fn large_split_counts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        for i in 0..1083 {
            let split = if i < 983 { "train" } else { "test" };
            lines.push(format!(
                r#"{{"image_path":"img_{i}.png","label":"normal","saliency_path":null,"split":"{split}"}}"#
            ));
        }
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let path = write_manifest(dir.path(), &refs);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.split_counts(), (983, 0, 100));
    }
}
