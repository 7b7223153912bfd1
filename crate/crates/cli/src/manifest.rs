//! TSV manifests (`id`, `path`, `n_samples`, optional `transcript`) and unit files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pss_core::audio::{load_wav, Waveform};
use pss_core::labels::UnitSequence;

use crate::error::CliError;

pub const HEADER: &str = "id\tpath\tn_samples\ttranscript";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: String,
    pub path: PathBuf,
    pub n_samples: usize,
    pub transcript: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub entry: Entry,
    pub wave: Waveform,
}

/// Parses manifest text; relative paths resolve against `base`.
pub fn parse(text: &str, base: &Path) -> Result<Vec<Entry>, CliError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::Data("empty manifest".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 3 || cols[..3] != ["id", "path", "n_samples"] || (cols.len() == 4 && cols[3] != "transcript") || cols.len() > 4 {
        return Err(CliError::Data(format!("manifest header must be `{HEADER}` (transcript optional)")));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 || f.len() > cols.len() {
            return Err(CliError::Data(format!("manifest line {}: {} fields", n + 2, f.len())));
        }
        let id = f[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(CliError::Data(format!("duplicate id `{id}`")));
        }
        let n_samples = f[2]
            .parse()
            .map_err(|_| CliError::Data(format!("manifest line {}: bad n_samples `{}`", n + 2, f[2])))?;
        let p = Path::new(f[1]);
        out.push(Entry {
            id,
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            n_samples,
            transcript: f.get(3).map(|t| t.to_string()).filter(|t| !t.is_empty()),
        });
    }
    if out.is_empty() {
        return Err(CliError::Data("manifest has no rows".into()));
    }
    Ok(out)
}

/// Reads a manifest and its audio, checking every `n_samples`.
pub fn load(path: &Path) -> Result<Vec<Loaded>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base)?
        .into_iter()
        .map(|entry| {
            let wave = load_wav(&entry.path)?;
            if wave.len() != entry.n_samples {
                return Err(CliError::Data(format!(
                    "`{}`: manifest says {} samples, file has {}",
                    entry.id,
                    entry.n_samples,
                    wave.len()
                )));
            }
            Ok(Loaded { entry, wave })
        })
        .collect()
}

/// Manifest text with paths written as given.
pub fn render(entries: &[Entry]) -> String {
    let mut s = format!("{HEADER}\n");
    for e in entries {
        let t = e.transcript.as_deref().unwrap_or("");
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.id, e.path.display(), e.n_samples, t);
    }
    s
}

/// `id<TAB>u u u ...` per line.
pub fn render_units(rows: &[(String, UnitSequence)]) -> String {
    let mut s = String::new();
    for (id, u) in rows {
        let _ = writeln!(s, "{id}\t{}", u.to_line());
    }
    s
}

pub fn parse_units(text: &str, sil: u32) -> Result<BTreeMap<String, UnitSequence>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, units) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Data(format!("units line {}: missing tab", n + 1)))?;
        out.insert(id.to_string(), UnitSequence::parse_line(units, sil)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_checks_header_ids_and_fields() {
        let ok = "id\tpath\tn_samples\ttranscript\na\tx.wav\t10\thi there\nb\t/abs.wav\t5\t\n";
        let e = parse(ok, Path::new("/base")).unwrap();
        assert_eq!(e[0].path, Path::new("/base/x.wav"));
        assert_eq!(e[0].transcript.as_deref(), Some("hi there"));
        assert_eq!(e[1].path, Path::new("/abs.wav"));
        assert_eq!(e[1].transcript, None);
        assert_eq!(parse(&render(&e), Path::new("/")).unwrap(), e);

        assert!(parse("id\tpath\n", Path::new(".")).is_err());
        assert!(parse("id\tpath\tn_samples\na\tx\t1\na\ty\t2\n", Path::new(".")).is_err());
        assert!(parse("id\tpath\tn_samples\na\tx\tmany\n", Path::new(".")).is_err());
        assert!(parse("id\tpath\tn_samples\n", Path::new(".")).is_err());
    }

    #[test]
    fn units_round_trip() {
        let rows = vec![("u1".to_string(), UnitSequence::new(vec![0, 3, 16], 16))];
        let back = parse_units(&render_units(&rows), 16).unwrap();
        assert_eq!(back["u1"], rows[0].1);
    }
}
