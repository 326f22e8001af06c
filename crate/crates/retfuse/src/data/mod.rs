//! Dataset model: tri-modal acquisitions, manifests, patient-grouped
//! splits, preprocessing, and the synthetic generator.

mod manifest;
mod preprocess;
mod split;
mod synth;

pub use manifest::{
    load_dataset, load_manifest, parse_manifest, render_manifest, save_dataset, save_manifest,
    MANIFEST_VERSION,
};
pub use preprocess::{preprocess, resample_nlinear, TargetGrids};
pub use split::{split_by_patient, SplitRecord, DEFAULT_FRACTIONS};
pub use synth::{contrast_score, synth_generate, ComplementarityMode, GridSpec, SynthConfig};

use std::path::PathBuf;

use thiserror::Error;

use crate::ften::FtenError;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate acquisition id '{0}'")]
    DuplicateId(String),
    #[error("acquisition '{id}' references missing tensor file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("cannot satisfy >=1 positive and >=1 negative in split '{split}' after {attempts} attempts")]
    InfeasibleSplit { split: &'static str, attempts: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ften(#[from] FtenError),
    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// ICDR grade 4 (proliferative disease) is the positive class.
pub const POSITIVE_GRADE: u8 = 4;

/// One tri-modal acquisition with tensors in memory.
///
/// `structure` and `flow` are `[D, H, W]` volumes; `lso` is an `[H', W']`
/// planar image. The binary label is derived from the ICDR grade.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub acquisition_id: String,
    pub patient_id: String,
    pub icdr_grade: u8,
    pub structure: Tensor,
    pub flow: Tensor,
    pub lso: Tensor,
}

impl Acquisition {
    pub fn label(&self) -> bool {
        self.icdr_grade == POSITIVE_GRADE
    }

    pub fn label_f32(&self) -> f32 {
        if self.label() {
            1.0
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.icdr_grade > 4 {
            return Err(DataError::BadConfig(format!(
                "acquisition '{}' has ICDR grade {} (valid: 0-4)",
                self.acquisition_id, self.icdr_grade
            )));
        }
        if self.structure.rank() != 3 || self.flow.rank() != 3 {
            return Err(DataError::BadConfig(format!(
                "acquisition '{}': structure/flow must be rank-3 volumes",
                self.acquisition_id
            )));
        }
        if self.lso.rank() != 2 {
            return Err(DataError::BadConfig(format!(
                "acquisition '{}': lso must be a rank-2 image",
                self.acquisition_id
            )));
        }
        Ok(())
    }
}

/// Manifest entry: metadata plus tensor paths, resolved lazily.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcquisitionMeta {
    pub acquisition_id: String,
    pub patient_id: String,
    pub icdr_grade: u8,
    /// Paths relative to the manifest's directory.
    pub structure_path: PathBuf,
    pub flow_path: PathBuf,
    pub lso_path: PathBuf,
}

impl AcquisitionMeta {
    pub fn label(&self) -> bool {
        self.icdr_grade == POSITIVE_GRADE
    }

    /// Load the three tensors, resolving paths against `base`.
    pub fn load(&self, base: &std::path::Path) -> Result<Acquisition> {
        let read = |rel: &PathBuf| -> Result<Tensor> {
            let path = base.join(rel);
            if !path.is_file() {
                return Err(DataError::MissingFile {
                    id: self.acquisition_id.clone(),
                    path,
                });
            }
            Ok(crate::ften::load(&path)?)
        };
        let acq = Acquisition {
            acquisition_id: self.acquisition_id.clone(),
            patient_id: self.patient_id.clone(),
            icdr_grade: self.icdr_grade,
            structure: read(&self.structure_path)?,
            flow: read(&self.flow_path)?,
            lso: read(&self.lso_path)?,
        };
        acq.validate()?;
        Ok(acq)
    }
}

/// Patient-grouped partition of acquisition ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.train.iter().any(|x| x == id)
            || self.val.iter().any(|x| x == id)
            || self.test.iter().any(|x| x == id)
    }
}
