//! Labelled sample sets: a JSON manifest naming a raw sample file and a label
//! file. Samples are `u8` (read as `value / 255`) or little-endian `f32`;
//! labels are little-endian `u32`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunnerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    U8,
    F32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub count: usize,
    pub dtype: SampleType,
    pub samples_file: PathBuf,
    pub labels_file: PathBuf,
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

fn err(path: &Path, msg: impl std::fmt::Display) -> RunnerError {
    RunnerError::Dataset(format!("{}: {msg}", path.display()))
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| err(manifest_path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| err(manifest_path, e))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let sp = base.join(&m.samples_file);
        let lp = base.join(&m.labels_file);
        let raw = std::fs::read(&sp).map_err(|e| err(&sp, e))?;
        let width = match m.dtype {
            SampleType::U8 => 1,
            SampleType::F32 => 4,
        };
        if raw.len() != m.count * m.dim * width {
            return Err(err(&sp, format!("expected {} bytes, found {}", m.count * m.dim * width, raw.len())));
        }
        let values: Vec<f64> = match m.dtype {
            SampleType::U8 => raw.iter().map(|&b| b as f64 / 255.0).collect(),
            SampleType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        let lraw = std::fs::read(&lp).map_err(|e| err(&lp, e))?;
        if lraw.len() != m.count * 4 {
            return Err(err(&lp, format!("expected {} labels, found {} bytes", m.count, lraw.len())));
        }
        let labels: Vec<u32> = lraw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(k) = m.classes {
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
                return Err(err(&lp, format!("label {bad} outside {k} classes")));
            }
        }
        let samples =
            if m.dim == 0 { vec![Vec::new(); m.count] } else { values.chunks(m.dim).map(<[f64]>::to_vec).collect() };
        Ok(Dataset { name: m.name, dim: m.dim, samples, labels })
    }

    /// Writes `name.json`, `name.samples` and `name.labels` into `dir` as `f32`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, RunnerError> {
        let manifest = DatasetManifest {
            name: self.name.clone(),
            dim: self.dim,
            count: self.len(),
            dtype: SampleType::F32,
            samples_file: format!("{}.samples", self.name).into(),
            labels_file: format!("{}.labels", self.name).into(),
            classes: None,
        };
        let io = |e: std::io::Error| RunnerError::Dataset(e.to_string());
        let bytes: Vec<u8> = self.samples.iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        std::fs::write(dir.join(&manifest.samples_file), bytes).map_err(io)?;
        let labels: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        std::fs::write(dir.join(&manifest.labels_file), labels).map_err(io)?;
        let path = dir.join(format!("{}.json", self.name));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serialises")).map_err(io)?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            dim: self.dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}
