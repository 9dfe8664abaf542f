//! Dataset manifest: a tab-separated index of cases.
//!
//! ```text
//! # comment lines are ignored
//! case_id	flair	t1	t2	truth
//! phantom-1	cases/phantom-1/flair.mvol	cases/phantom-1/t1.mvol	cases/phantom-1/t2.mvol	cases/phantom-1/truth.mvol
//! ```
//!
//! The header names the modality columns; a trailing `truth` column is
//! optional, and `-` marks a case without ground truth. Relative paths resolve
//! against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{HarnessError, PhantomConfig};
use crate::volio::{generate_phantom, read_volume, write_atomic, write_volume, MultiModalCase};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub modalities: BTreeMap<String, PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub modalities: Vec<String>,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path, source: &Path) -> Result<Self, HarnessError> {
        let err = |line: usize, msg: &str| HarnessError::Manifest {
            path: source.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.first() != Some(&"case_id") {
            return Err(err(hline, "first column must be case_id"));
        }
        let has_truth = cols.last() == Some(&"truth");
        let modalities: Vec<String> = cols[1..cols.len() - usize::from(has_truth)]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if modalities.is_empty() {
            return Err(err(hline, "no modality columns"));
        }
        let mut entries: Vec<DatasetEntry> = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols.len() {
                return Err(err(n, &format!("expected {} fields, found {}", cols.len(), f.len())));
            }
            let id = f[0].to_string();
            if entries.iter().any(|e| e.id == id) {
                return Err(err(n, &format!("duplicate case id {id:?}")));
            }
            let modal = modalities
                .iter()
                .zip(&f[1..])
                .map(|(m, p)| (m.clone(), PathBuf::from(p)))
                .collect();
            let truth = match (has_truth, f.last()) {
                (true, Some(&"-")) | (false, _) => None,
                (true, Some(p)) => Some(PathBuf::from(p)),
                (true, None) => None,
            };
            entries.push(DatasetEntry {
                id,
                modalities: modal,
                truth,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            modalities,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root, path)
    }

    pub fn to_tsv(&self) -> String {
        let has_truth = self.entries.iter().any(|e| e.truth.is_some());
        let mut out = format!("case_id\t{}", self.modalities.join("\t"));
        if has_truth {
            out.push_str("\ttruth");
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&e.id);
            for m in &self.modalities {
                let _ = write!(out, "\t{}", e.modalities[m].display());
            }
            if has_truth {
                let t = e.truth.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string());
                let _ = write!(out, "\t{t}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        write_atomic(path, self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Result<&DatasetEntry, HarnessError> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| HarnessError::UnknownCase(id.to_string()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads every modality and the truth mask (if listed) of one case.
    pub fn load_case(&self, id: &str) -> Result<MultiModalCase, HarnessError> {
        let e = self.entry(id)?;
        let mut modalities = BTreeMap::new();
        for (m, p) in &e.modalities {
            modalities.insert(m.clone(), read_volume(self.resolve(p))?);
        }
        let truth = match &e.truth {
            Some(p) => Some(read_volume(self.resolve(p))?),
            None => None,
        };
        Ok(MultiModalCase::new(id, modalities, truth)?)
    }
}

/// Writes `cfg.count` phantoms under `dir/cases/<id>/` and returns their
/// manifest (already saved as `dir/dataset.tsv`).
pub fn generate_phantom_dataset(cfg: &PhantomConfig, dir: &Path) -> Result<DatasetManifest, HarnessError> {
    let mut entries = Vec::with_capacity(cfg.count);
    let mut modalities: Vec<String> = Vec::new();
    for i in 0..cfg.count {
        let case = generate_phantom(&cfg.spec(i))?;
        let id = case.case_id().to_string();
        let rel = PathBuf::from("cases").join(&id);
        std::fs::create_dir_all(dir.join(&rel))?;
        let mut paths = BTreeMap::new();
        for (m, v) in case.modalities() {
            let p = rel.join(format!("{m}.mvol"));
            write_volume(v, dir.join(&p))?;
            paths.insert(m.clone(), p);
        }
        if modalities.is_empty() {
            modalities = case.modalities().keys().cloned().collect();
        }
        let truth = match case.truth() {
            Some(t) => {
                let p = rel.join("truth.mvol");
                write_volume(t, dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(DatasetEntry {
            id,
            modalities: paths,
            truth,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        modalities,
        entries,
    };
    manifest.save(&dir.join("dataset.tsv"))?;
    Ok(manifest)
}
