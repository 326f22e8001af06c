//! Line-delimited dataset manifest.
//!
//! ```text
//! manifest-version 1
//! acq a0001 patient p001 grade 0 structure t/a0001_structure.ften flow t/a0001_flow.ften lso t/a0001_lso.ften
//! ```
//!
//! Blank lines and `#` comments are permitted. The version line must be
//! the first significant line. Tensor paths are stored relative to the
//! manifest's own directory and are resolved lazily at load time; fields
//! are whitespace-separated, so paths must not contain whitespace.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::{AcquisitionMeta, DataError, Result};

pub const MANIFEST_VERSION: u32 = 1;

// ── Parsing ──────────────────────────────────────────────────────────

/// Parse manifest text into acquisition descriptors.
pub fn parse_manifest(text: &str) -> Result<Vec<AcquisitionMeta>> {
    let mut entries = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut version_seen = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !version_seen {
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some("manifest-version"), Some(v), None) => {
                    let v: u32 = v.parse().map_err(|_| DataError::Parse {
                        line: line_no,
                        msg: format!("unparseable version '{v}'"),
                    })?;
                    if v != MANIFEST_VERSION {
                        return Err(DataError::Parse {
                            line: line_no,
                            msg: format!(
                                "unsupported manifest version {v} (supported: {MANIFEST_VERSION})"
                            ),
                        });
                    }
                    version_seen = true;
                    continue;
                }
                _ => {
                    return Err(DataError::Parse {
                        line: line_no,
                        msg: "expected 'manifest-version <n>' before entries".into(),
                    });
                }
            }
        }

        let entry = parse_entry(line, line_no)?;
        if !seen.insert(entry.acquisition_id.clone()) {
            return Err(DataError::DuplicateId(entry.acquisition_id));
        }
        entries.push(entry);
    }

    if !version_seen {
        return Err(DataError::Parse {
            line: 1,
            msg: "empty manifest: missing 'manifest-version' line".into(),
        });
    }
    Ok(entries)
}

fn parse_entry(line: &str, line_no: usize) -> Result<AcquisitionMeta> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let fail = |msg: String| DataError::Parse { line: line_no, msg };
    if toks.len() != 12 {
        return Err(fail(format!(
            "expected 12 fields 'acq <id> patient <id> grade <g> structure <p> flow <p> lso <p>', found {}",
            toks.len()
        )));
    }
    let expect_kw = |pos: usize, kw: &str| -> Result<()> {
        if toks[pos] != kw {
            Err(fail(format!("expected keyword '{kw}', found '{}'", toks[pos])))
        } else {
            Ok(())
        }
    };
    expect_kw(0, "acq")?;
    expect_kw(2, "patient")?;
    expect_kw(4, "grade")?;
    expect_kw(6, "structure")?;
    expect_kw(8, "flow")?;
    expect_kw(10, "lso")?;

    let grade: u8 = toks[5]
        .parse()
        .map_err(|_| fail(format!("unparseable grade '{}'", toks[5])))?;
    if grade > 4 {
        return Err(fail(format!("grade {grade} out of range 0-4")));
    }
    let path_field = |pos: usize| -> Result<PathBuf> {
        let p = toks[pos];
        if Path::new(p).is_absolute() {
            return Err(fail(format!("path '{p}' must be relative to the manifest")));
        }
        Ok(PathBuf::from(p))
    };
    Ok(AcquisitionMeta {
        acquisition_id: toks[1].to_string(),
        patient_id: toks[3].to_string(),
        icdr_grade: grade,
        structure_path: path_field(7)?,
        flow_path: path_field(9)?,
        lso_path: path_field(11)?,
    })
}

// ── File IO ──────────────────────────────────────────────────────────

/// Read and parse a manifest file.
pub fn load_manifest(path: &Path) -> Result<Vec<AcquisitionMeta>> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text)
}

/// Render manifest text for a set of entries.
pub fn render_manifest(entries: &[AcquisitionMeta]) -> String {
    let mut out = format!("manifest-version {MANIFEST_VERSION}\n");
    for e in entries {
        out.push_str(&format!(
            "acq {} patient {} grade {} structure {} flow {} lso {}\n",
            e.acquisition_id,
            e.patient_id,
            e.icdr_grade,
            e.structure_path.display(),
            e.flow_path.display(),
            e.lso_path.display(),
        ));
    }
    out
}

/// Write a manifest file (entries with paths relative to its directory).
pub fn save_manifest(entries: &[AcquisitionMeta], path: &Path) -> Result<()> {
    std::fs::write(path, render_manifest(entries)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ── Dataset IO ───────────────────────────────────────────────────────

/// Write a full dataset under `dir`: tensors as `tensors/<id>_<mod>.ften`
/// plus a `manifest.txt` describing them. Returns the manifest path.
pub fn save_dataset(acqs: &[super::Acquisition], dir: &Path) -> Result<PathBuf> {
    let tensor_dir = dir.join("tensors");
    std::fs::create_dir_all(&tensor_dir).map_err(|source| DataError::Io {
        path: tensor_dir.clone(),
        source,
    })?;
    let mut entries = Vec::with_capacity(acqs.len());
    for a in acqs {
        a.validate()?;
        let rel = |suffix: &str| PathBuf::from(format!("tensors/{}_{suffix}.ften", a.acquisition_id));
        let s_rel = rel("structure");
        let f_rel = rel("flow");
        let l_rel = rel("lso");
        crate::ften::save(&a.structure, &dir.join(&s_rel))?;
        crate::ften::save(&a.flow, &dir.join(&f_rel))?;
        crate::ften::save(&a.lso, &dir.join(&l_rel))?;
        entries.push(AcquisitionMeta {
            acquisition_id: a.acquisition_id.clone(),
            patient_id: a.patient_id.clone(),
            icdr_grade: a.icdr_grade,
            structure_path: s_rel,
            flow_path: f_rel,
            lso_path: l_rel,
        });
    }
    if entries.iter().map(|e| &e.acquisition_id).collect::<HashSet<_>>().len() != entries.len() {
        let dup = entries
            .iter()
            .enumerate()
            .find(|(i, e)| entries[..*i].iter().any(|p| p.acquisition_id == e.acquisition_id))
            .map(|(_, e)| e.acquisition_id.clone())
            .unwrap_or_default();
        return Err(DataError::DuplicateId(dup));
    }
    let manifest_path = dir.join("manifest.txt");
    save_manifest(&entries, &manifest_path)?;
    Ok(manifest_path)
}

/// Load every acquisition referenced by a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<super::Acquisition>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let metas = load_manifest(manifest_path)?;
    metas.iter().map(|m| m.load(base)).collect()
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_text() -> String {
        "manifest-version 1\n\
         # comment\n\
         acq a1 patient p1 grade 4 structure s/a1_s.ften flow s/a1_f.ften lso s/a1_l.ften\n\
         acq a2 patient p2 grade 0 structure s/a2_s.ften flow s/a2_f.ften lso s/a2_l.ften\n"
            .to_string()
    }

    #[test]
    fn parse_roundtrip() {
        let entries = parse_manifest(&sample_text()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].acquisition_id, "a1");
        assert_eq!(entries[0].patient_id, "p1");
        assert!(entries[0].label());
        assert!(!entries[1].label());
        let rendered = render_manifest(&entries);
        let reparsed = parse_manifest(&rendered).unwrap();
        assert_eq!(entries, reparsed);
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = sample_text().replace("acq a2", "acq a1");
        match parse_manifest(&text) {
            Err(DataError::DuplicateId(id)) => assert_eq!(id, "a1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn version_line_required() {
        let text = "acq a1 patient p1 grade 0 structure s flow f lso l\n";
        assert!(matches!(
            parse_manifest(text),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(parse_manifest("").is_err());
    }

    #[test]
    fn unsupported_version_rejected() {
        let err = parse_manifest("manifest-version 2\n").unwrap_err();
        assert!(err.to_string().contains("unsupported manifest version 2"));
    }

    #[test]
    fn malformed_lines_name_line_number() {
        let text = "manifest-version 1\nacq a1 patient p1 grade 9 structure s flow f lso l\n";
        match parse_manifest(text) {
            Err(DataError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("out of range"));
            }
            other => panic!("expected Parse error, got {other:?}"),
        }
        let text = "manifest-version 1\nacq a1 patient p1\n";
        assert!(matches!(
            parse_manifest(text),
            Err(DataError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn absolute_paths_rejected() {
        let text =
            "manifest-version 1\nacq a1 patient p1 grade 0 structure /abs/s flow f lso l\n";
        let err = parse_manifest(text).unwrap_err();
        assert!(err.to_string().contains("must be relative"));
    }

    #[test]
    fn missing_file_error_names_id_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let entries = parse_manifest(&sample_text()).unwrap();
        match entries[0].load(dir.path()) {
            Err(DataError::MissingFile { id, path }) => {
                assert_eq!(id, "a1");
                assert!(path.ends_with("s/a1_s.ften"));
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }
}
