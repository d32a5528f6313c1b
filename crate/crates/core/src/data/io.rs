//! Dataset files: a JSON manifest, an EHR CSV table and a raw ECG blob of
//! little-endian `f32` in (sample, frame, channel) order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sample_from_parts, Dataset, SplitDataset};
use crate::error::{LemofError, Result};

pub const MANIFEST_SCHEMA: &str = "lemof-manifest/1";
const EHR_FILE: &str = "ehr.csv";
const ECG_FILE: &str = "ecg.f32";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    /// Relative paths resolve against the manifest's directory.
    pub ehr_path: PathBuf,
    pub ecg_path: PathBuf,
    pub ehr_features: Vec<String>,
    /// `[samples, frames, channels]`.
    pub ecg_shape: [usize; 3],
    pub label_column: String,
    pub split: SplitSpec,
}

/// Writes the three files into `dir` and returns the manifest path.
pub fn save_dataset(data: &Dataset, dir: &Path, split: SplitSpec) -> Result<PathBuf> {
    data.validate()?;
    fs::create_dir_all(dir)?;
    let (frames, channels) = data.ecg_shape();

    let mut csv = String::new();
    csv.push_str("label");
    for name in &data.ehr_features {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for s in &data.samples {
        csv.push_str(&s.label.to_string());
        for v in s.ehr.data() {
            // `Display` for f64 is the shortest string that parses back exactly.
            csv.push(',');
            csv.push_str(&v.to_string());
        }
        csv.push('\n');
    }
    fs::write(dir.join(EHR_FILE), csv)?;

    let mut blob = Vec::with_capacity(data.len() * frames * channels * 4);
    for s in &data.samples {
        for &v in s.ecg.data() {
            let q = v as f32;
            if q as f64 != v {
                return Err(LemofError::Data(format!(
                    "ECG value {v} is not representable as f32"
                )));
            }
            blob.extend_from_slice(&q.to_le_bytes());
        }
    }
    fs::write(dir.join(ECG_FILE), blob)?;

    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        ehr_path: EHR_FILE.into(),
        ecg_path: ECG_FILE.into(),
        ehr_features: data.ehr_features.clone(),
        ecg_shape: [data.len(), frames, channels],
        label_column: "label".into(),
        split,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| LemofError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| LemofError::Data(format!("invalid manifest {}: {e}", path.display())))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(LemofError::Data(format!(
            "manifest schema {:?}, expected {MANIFEST_SCHEMA:?}",
            manifest.schema
        )));
    }
    Ok(manifest)
}

fn read_ehr(path: &Path, manifest: &DatasetManifest) -> Result<(Vec<u8>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| LemofError::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| LemofError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LemofError::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let label_col = column(&manifest.label_column)?;
    let feature_cols = manifest
        .ehr_features
        .iter()
        .map(|f| column(f))
        .collect::<Result<Vec<_>>>()?;

    let (mut labels, mut rows) = (Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = r + 2;
        let record =
            record.map_err(|e| LemofError::Data(format!("{} row {row}: {e}", path.display())))?;
        let cell = |c: usize, name: &str| -> Result<&str> {
            record.get(c).ok_or_else(|| {
                LemofError::Data(format!("row {row}, column {name:?}: missing cell"))
            })
        };
        let label = match cell(label_col, &manifest.label_column)?.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(LemofError::Data(format!(
                    "row {row}, column {:?}: label {other:?} is not 0 or 1",
                    manifest.label_column
                )))
            }
        };
        let mut values = Vec::with_capacity(feature_cols.len());
        for (&c, name) in feature_cols.iter().zip(&manifest.ehr_features) {
            let text = cell(c, name)?.trim();
            let v: f64 = text.parse().map_err(|_| {
                LemofError::Data(format!("row {row}, column {name:?}: cannot parse {text:?}"))
            })?;
            if !v.is_finite() {
                return Err(LemofError::Data(format!(
                    "row {row}, column {name:?}: value {text} is not finite"
                )));
            }
            values.push(v);
        }
        labels.push(label);
        rows.push(values);
    }
    Ok((labels, rows))
}

fn read_ecg(path: &Path, shape: [usize; 3]) -> Result<Vec<f64>> {
    let bytes = fs::read(path)
        .map_err(|e| LemofError::Data(format!("cannot read {}: {e}", path.display())))?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(LemofError::Data(format!(
            "{} has {} bytes but shape {shape:?} needs {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        let per_sample = shape[1] * shape[2];
        return Err(LemofError::Data(format!(
            "ECG sample {}, frame {}, channel {} is not finite",
            i / per_sample,
            (i % per_sample) / shape[2],
            i % shape[2]
        )));
    }
    Ok(values)
}

/// Reads a dataset exactly as stored, without standardization.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (labels, rows) = read_ehr(&base.join(&manifest.ehr_path), &manifest)?;
    let [n, frames, channels] = manifest.ecg_shape;
    if rows.len() != n {
        return Err(LemofError::Data(format!(
            "EHR table has {} rows but the ECG shape declares {n} samples",
            rows.len()
        )));
    }
    let ecg = read_ecg(&base.join(&manifest.ecg_path), manifest.ecg_shape)?;
    let per_sample = frames * channels;
    let samples = labels
        .into_iter()
        .zip(rows)
        .enumerate()
        .map(|(i, (label, ehr))| {
            sample_from_parts(
                ecg[i * per_sample..(i + 1) * per_sample].to_vec(),
                frames,
                channels,
                ehr,
                label,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset {
        samples,
        ehr_features: manifest.ehr_features.clone(),
    };
    Ok((manifest, data))
}

/// Loads a dataset and splits it as its manifest prescribes, standardizing
/// every split with training-split statistics.
pub fn load_split_dataset(manifest_path: &Path) -> Result<(DatasetManifest, SplitDataset)> {
    let (manifest, data) = load_dataset(manifest_path)?;
    let split = SplitDataset::new(&data, manifest.split.ratios, manifest.split.seed)?;
    Ok((manifest, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn small() -> Dataset {
        generate_synthetic(&SynthConfig {
            n_samples: 40,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = small();
        let path = save_dataset(&data, dir.path(), SplitSpec::default()).unwrap();
        let (manifest, back) = load_dataset(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(manifest.ecg_shape, [40, 64, 2]);

        let again = tempfile::tempdir().unwrap();
        let path2 = save_dataset(&back, again.path(), SplitSpec::default()).unwrap();
        for f in [EHR_FILE, ECG_FILE, MANIFEST_FILE] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap()
            );
        }
        assert!(path2.ends_with(MANIFEST_FILE));
    }

    #[test]
    fn mismatched_counts_name_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(&small(), dir.path(), SplitSpec::default()).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("40,", "41,");
        fs::write(&path, text).unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("40") && msg.contains("41"), "{msg}");
    }

    #[test]
    fn bad_cells_report_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(&small(), dir.path(), SplitSpec::default()).unwrap();
        let csv_path = dir.path().join(EHR_FILE);
        let original = fs::read_to_string(&csv_path).unwrap();
        let mut lines: Vec<String> = original.lines().map(String::from).collect();

        let mut cells: Vec<&str> = lines[3].split(',').collect();
        cells[2] = "NaN";
        lines[3] = cells.join(",");
        fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("row 4") && msg.contains("feat_01"), "{msg}");

        let mut lines: Vec<String> = original.lines().map(String::from).collect();
        lines[5] = lines[5].replacen(|c: char| c.is_ascii_digit(), "2", 1);
        fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("row 6") && msg.contains("label"), "{msg}");

        let mut lines: Vec<String> = original.lines().map(String::from).collect();
        let mut cells: Vec<&str> = lines[2].split(',').collect();
        cells[4] = "";
        lines[2] = cells.join(",");
        fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("row 3") && msg.contains("feat_03"), "{msg}");
    }

    #[test]
    fn truncated_blob_and_wrong_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(&small(), dir.path(), SplitSpec::default()).unwrap();
        let blob = dir.path().join(ECG_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(LemofError::Data(_))));

        let text = fs::read_to_string(&path)
            .unwrap()
            .replace(MANIFEST_SCHEMA, "lemof-manifest/0");
        fs::write(&path, text).unwrap();
        assert!(load_dataset(&path)
            .unwrap_err()
            .to_string()
            .contains("schema"));
    }

    #[test]
    fn split_loading_standardizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(
            &small(),
            dir.path(),
            SplitSpec {
                ratios: [0.5, 0.25, 0.25],
                seed: 3,
            },
        )
        .unwrap();
        let (_, split) = load_split_dataset(&path).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (20, 10, 10)
        );
        let mean: f64 = split
            .train
            .samples
            .iter()
            .map(|s| s.ehr.get(0, 0))
            .sum::<f64>()
            / 20.0;
        assert!(mean.abs() < 1e-9);
    }
}
