use std::fmt;

use serde::{Deserialize, Serialize};

/// The two input streams of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityId {
    /// Sequential signal windows (time × channels).
    M1Ecg,
    /// Standardized tabular features.
    M2Ehr,
}

impl ModalityId {
    pub const ALL: [ModalityId; 2] = [ModalityId::M1Ecg, ModalityId::M2Ehr];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityId::M1Ecg => "m1_ecg",
            ModalityId::M2Ehr => "m2_ehr",
        }
    }

    pub fn index(self) -> usize {
        match self {
            ModalityId::M1Ecg => 0,
            ModalityId::M2Ehr => 1,
        }
    }

    pub fn other(self) -> ModalityId {
        match self {
            ModalityId::M1Ecg => ModalityId::M2Ehr,
            ModalityId::M2Ehr => ModalityId::M1Ecg,
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
