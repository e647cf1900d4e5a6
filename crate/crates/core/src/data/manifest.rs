use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{shuffled_batches, AttackType, DataError, Dataset, Sample};
use crate::model::Label;
use crate::pem::PatchSet;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Relative to the manifest directory.
    pub patchset: PathBuf,
    pub label: Label,
    pub attack_type: AttackType,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    patchset: String,
    label: u8,
    attack_type: AttackType,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    patch_size: usize,
    generator_digest: String,
    bona_fide: usize,
    attack: usize,
}

impl SampleRecord {
    fn to_line(&self) -> RecordLine {
        RecordLine {
            patchset: self.patchset.to_string_lossy().replace('\\', "/"),
            label: self.label as u8,
            attack_type: self.attack_type,
            seed: self.seed,
        }
    }

    fn from_line(line: RecordLine) -> Result<Self, DataError> {
        let label = Label::from_index(line.label).ok_or_else(|| DataError::Invalid(format!("label {} is not 0 or 1", line.label)))?;
        if label != line.attack_type.label() {
            return Err(DataError::Invalid(format!(
                "label {} contradicts attack type {}",
                line.label,
                line.attack_type.name()
            )));
        }
        Ok(SampleRecord {
            patchset: PathBuf::from(line.patchset),
            label,
            attack_type: line.attack_type,
            seed: line.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory holding `manifest.jsonl`; record paths resolve against it.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub patch_size: usize,
    pub generator_digest: String,
}

impl DatasetManifest {
    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn save(&self) -> Result<(), DataError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, &r.to_line())?;
            out.push(b'\n');
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| DataError::Io(path.display().to_string(), e))?;
        let meta = Meta {
            patch_size: self.patch_size,
            generator_digest: self.generator_digest.clone(),
            bona_fide: self.count(Label::BonaFide),
            attack: self.count(Label::Attack),
        };
        let path = self.root.join(META_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| DataError::Io(path.display().to_string(), e))
    }

    /// Epoch-shuffled record indices in batches of `batch_size`.
    pub fn batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        shuffled_batches(self.records.len(), batch_size, rng)
    }
}

/// Reads `manifest.jsonl` and `meta.json` from `dir` and checks every
/// referenced patch file exists.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let meta_path = dir.join(META_FILE);
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| DataError::Io(meta_path.display().to_string(), e))?)?;
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let wrap = |e: DataError| DataError::Record {
            record: format!("line {}", i + 1),
            source: Box::new(e),
        };
        let parsed: RecordLine = serde_json::from_str(line).map_err(|e| wrap(e.into()))?;
        let record = SampleRecord::from_line(parsed).map_err(wrap)?;
        let file = dir.join(&record.patchset);
        if !file.is_file() {
            return Err(DataError::Record {
                record: record.patchset.display().to_string(),
                source: Box::new(DataError::Io(
                    file.display().to_string(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "patch file missing"),
                )),
            });
        }
        records.push(record);
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        records,
        patch_size: meta.patch_size,
        generator_digest: meta.generator_digest,
    };
    if manifest.count(Label::BonaFide) != meta.bona_fide || manifest.count(Label::Attack) != meta.attack {
        return Err(DataError::Invalid("class counts in meta.json disagree with the manifest".into()));
    }
    Ok(manifest)
}

/// Parses every patch file into memory.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset, DataError> {
    let samples = manifest
        .records
        .iter()
        .map(|r| {
            let wrap = |e: DataError| DataError::Record {
                record: r.patchset.display().to_string(),
                source: Box::new(e),
            };
            let path = manifest.root.join(&r.patchset);
            let bytes = fs::read(&path).map_err(|e| wrap(DataError::Io(path.display().to_string(), e)))?;
            let set = PatchSet::from_w32(&bytes).map_err(|e| wrap(e.into()))?;
            if set.patch_size() != Some(manifest.patch_size) {
                return Err(wrap(DataError::Invalid(format!(
                    "patches are {:?}px, manifest says {}px",
                    set.patch_size(),
                    manifest.patch_size
                ))));
            }
            Ok(Sample {
                patches: set.patches,
                label: r.label,
                attack_type: r.attack_type,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(Dataset {
        samples,
        patch_size: manifest.patch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn corpus(dir: &Path) -> DatasetManifest {
        synth_generate(
            dir,
            &SynthConfig {
                n_per_class: 3,
                patch_size: 8,
                seed: 9,
            },
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        let ds = load_dataset(&back).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.count(Label::BonaFide), 3);
        for (s, r) in ds.samples.iter().zip(&back.records) {
            assert_eq!(s.label, r.attack_type.label());
            assert_eq!(s.patches.len(), 3);
        }
    }

    #[test]
    fn manifest_lines_use_numeric_labels() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["label"], 1);
        assert_eq!(first["attack_type"], "None");
        assert!(first["patchset"].as_str().unwrap().ends_with(".w32"));
        assert!(first["seed"].is_u64());
    }

    #[test]
    fn missing_patch_file_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        fs::remove_file(dir.path().join(&m.records[5].patchset)).unwrap();
        let err = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000005"), "{err}");
    }

    #[test]
    fn contradictory_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replacen("\"label\":1", "\"label\":0", 1);
        fs::write(&path, text).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }
}
