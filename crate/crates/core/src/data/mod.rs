//! Two-modality datasets: synthetic generation, on-disk ingestion,
//! stratified splitting and standardization.

mod io;
mod synth;

pub use io::{
    load_dataset, load_split_dataset, save_dataset, DatasetManifest, SplitSpec, MANIFEST_SCHEMA,
};
pub use synth::{generate_synthetic, SignalPlan, SignalPlans, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{LemofError, Result};
use crate::numeric::{Matrix2D, RngState, TokenSeq};

/// One subject: an ECG window (frames × channels), an EHR row (1 × features)
/// and a binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ecg: TokenSeq,
    pub ehr: TokenSeq,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub ehr_features: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `(frames, channels)` of the ECG windows.
    pub fn ecg_shape(&self) -> (usize, usize) {
        self.samples.first().map_or((0, 0), |s| s.ecg.shape())
    }

    pub fn ehr_dim(&self) -> usize {
        self.ehr_features.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ehr_features: self.ehr_features.clone(),
        }
    }

    /// Checks that every sample has the same shapes and a binary label.
    pub fn validate(&self) -> Result<()> {
        let (frames, channels) = self.ecg_shape();
        for (i, s) in self.samples.iter().enumerate() {
            if s.ecg.shape() != (frames, channels) {
                return Err(LemofError::Data(format!(
                    "sample {i}: ECG shape {:?}, expected {:?}",
                    s.ecg.shape(),
                    (frames, channels)
                )));
            }
            if s.ehr.shape() != (1, self.ehr_dim()) {
                return Err(LemofError::Data(format!(
                    "sample {i}: EHR shape {:?}, expected {:?}",
                    s.ehr.shape(),
                    (1, self.ehr_dim())
                )));
            }
            if s.label > 1 {
                return Err(LemofError::Data(format!(
                    "sample {i}: label {} is not binary",
                    s.label
                )));
            }
        }
        Ok(())
    }
}

/// Index sets of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified three-way split.
///
/// Validation and test sizes are `round(n·ratio)`; training takes the rest.
/// Each class is shuffled and laid out by fractional position, so every
/// split receives each class in close to its global proportion.
pub fn split(labels: &[u8], ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(LemofError::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = labels.len();
    let n_val = (n as f64 * ratios[1]).round() as usize;
    let n_test = (n as f64 * ratios[2]).round() as usize;
    if n_val + n_test >= n {
        return Err(LemofError::Data(format!(
            "{n} samples leave no training split"
        )));
    }

    let rng = RngState::new(seed).split("split");
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(n);
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        rng.split_indexed("class", class as u64)
            .shuffle(&mut members);
        let count = members.len() as f64;
        for (pos, i) in members.into_iter().enumerate() {
            keyed.push(((pos as f64 + 0.5) / count, class, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();

    let n_train = n - n_val - n_test;
    let out = SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    for (name, part) in [
        ("train", &out.train),
        ("val", &out.val),
        ("test", &out.test),
    ] {
        for class in [0u8, 1] {
            if !part.iter().any(|&i| labels[i] == class) {
                return Err(LemofError::Data(format!(
                    "{name} split has no samples of class {class}"
                )));
            }
        }
    }
    Ok(out)
}

/// Per-feature affine statistics, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub ecg_mean: Vec<f64>,
    pub ecg_sd: Vec<f64>,
    pub ehr_mean: Vec<f64>,
    pub ehr_sd: Vec<f64>,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0.0, 0.0);
    for v in values.clone() {
        n += 1.0;
        sum += v;
    }
    let mean = sum / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // Constant columns are centered but not scaled.
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, sd)
}

impl Standardization {
    /// ECG statistics are per channel over all frames; EHR per feature.
    /// Standard deviations are population deviations.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(LemofError::Data("cannot standardize an empty split".into()));
        }
        let (_, channels) = train.ecg_shape();
        let (mut ecg_mean, mut ecg_sd) = (Vec::new(), Vec::new());
        for c in 0..channels {
            let it = train
                .samples
                .iter()
                .flat_map(move |s| (0..s.ecg.rows()).map(move |t| s.ecg.get(t, c)));
            let (m, sd) = mean_sd(it);
            ecg_mean.push(m);
            ecg_sd.push(sd);
        }
        let (mut ehr_mean, mut ehr_sd) = (Vec::new(), Vec::new());
        for j in 0..train.ehr_dim() {
            let (m, sd) = mean_sd(train.samples.iter().map(move |s| s.ehr.get(0, j)));
            ehr_mean.push(m);
            ehr_sd.push(sd);
        }
        Ok(Standardization {
            ecg_mean,
            ecg_sd,
            ehr_mean,
            ehr_sd,
        })
    }

    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let (frames, channels) = sample.ecg.shape();
        if channels != self.ecg_mean.len() || sample.ehr.cols() != self.ehr_mean.len() {
            return Err(LemofError::dim(
                "standardize",
                (self.ecg_mean.len(), self.ehr_mean.len()),
                (channels, sample.ehr.cols()),
            ));
        }
        let mut ecg = sample.ecg.clone();
        for t in 0..frames {
            for c in 0..channels {
                ecg.set(t, c, (ecg.get(t, c) - self.ecg_mean[c]) / self.ecg_sd[c]);
            }
        }
        let mut ehr = sample.ehr.clone();
        for j in 0..ehr.cols() {
            ehr.set(0, j, (ehr.get(0, j) - self.ehr_mean[j]) / self.ehr_sd[j]);
        }
        Ok(Sample {
            ecg,
            ehr,
            label: sample.label,
        })
    }

    pub fn apply_all(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            samples: data
                .samples
                .iter()
                .map(|s| self.apply(s))
                .collect::<Result<_>>()?,
            ehr_features: data.ehr_features.clone(),
        })
    }
}

/// Standardized train/validation/test splits of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub indices: SplitIndices,
    pub standardization: Standardization,
}

impl SplitDataset {
    pub fn new(data: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Self> {
        data.validate()?;
        let indices = split(&data.labels(), ratios, seed)?;
        let train = data.subset(&indices.train);
        let standardization = Standardization::fit(&train)?;
        Ok(SplitDataset {
            train: standardization.apply_all(&train)?,
            val: standardization.apply_all(&data.subset(&indices.val))?,
            test: standardization.apply_all(&data.subset(&indices.test))?,
            indices,
            standardization,
        })
    }
}

/// Builds a dataset from rows, used by tests and by ingestion.
pub(crate) fn sample_from_parts(
    ecg: Vec<f64>,
    frames: usize,
    channels: usize,
    ehr: Vec<f64>,
    label: u8,
) -> Result<Sample> {
    Ok(Sample {
        ecg: Matrix2D::from_vec(frames, channels, ecg)?,
        ehr: Matrix2D::row_vector(&ehr),
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(n: usize, positives: usize) -> Vec<u8> {
        (0..n).map(|i| u8::from(i < positives)).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split(&labels(1000, 400), [0.7, 0.15, 0.15], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 150, 150));
    }

    #[test]
    fn split_rejects_bad_ratios_and_empty_classes() {
        assert!(matches!(
            split(&labels(100, 50), [0.5, 0.5, 0.1], 1),
            Err(LemofError::Config(_))
        ));
        assert!(matches!(
            split(&labels(100, 50), [1.0, 0.0, 0.0], 1),
            Err(LemofError::Config(_))
        ));
        let err = split(&labels(20, 1), [0.6, 0.2, 0.2], 1).unwrap_err();
        assert!(matches!(err, LemofError::Data(_)), "{err}");
    }

    proptest! {
        #[test]
        fn split_partitions_and_stratifies(n in 40usize..400, frac in 0.2f64..0.8, seed in any::<u64>()) {
            let y = labels(n, (n as f64 * frac) as usize);
            let s = split(&y, [0.7, 0.15, 0.15], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let global = y.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
            for part in [&s.train, &s.val, &s.test] {
                let pos = part.iter().filter(|&&i| y[i] == 1).count() as f64;
                prop_assert!((pos - global * part.len() as f64).abs() <= 2.0);
            }
            prop_assert_eq!(split(&y, [0.7, 0.15, 0.15], seed).unwrap(), s);
        }
    }

    fn toy(n: usize) -> Dataset {
        let mut rng = RngState::new(3);
        let samples = (0..n)
            .map(|i| {
                let ecg: Vec<f64> = (0..8 * 2).map(|_| rng.normal() * 3.0 + 1.0).collect();
                let ehr = vec![rng.normal() * 5.0 - 2.0, 4.0, rng.uniform(0.0, 10.0)];
                sample_from_parts(ecg, 8, 2, ehr, (i % 2) as u8).unwrap()
            })
            .collect();
        Dataset {
            samples,
            ehr_features: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn standardized_train_has_unit_moments() {
        let sd = SplitDataset::new(&toy(200), [0.7, 0.15, 0.15], 9).unwrap();
        let st = Standardization::fit(&sd.train).unwrap();
        for m in st.ecg_mean.iter().chain(&st.ehr_mean) {
            assert!(m.abs() < 1e-9);
        }
        for (j, s) in st.ecg_sd.iter().chain(&st.ehr_sd).enumerate() {
            // The constant EHR column keeps its unit placeholder.
            assert!((s - 1.0).abs() < 1e-9, "column {j}: {s}");
        }
        assert_eq!(sd.standardization.ehr_sd[1], 1.0);
    }

    #[test]
    fn validate_catches_shape_drift() {
        let mut d = toy(4);
        d.samples[2].ehr = Matrix2D::row_vector(&[1.0, 2.0]);
        assert!(d.validate().is_err());
    }
}
