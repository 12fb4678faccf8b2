//! Checkpoint directory: `params.json` (tensor file) and `manifest.json`
//! (config, vocabulary, morph table, abstract labels).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Captioner, CaptionerError, ModelConfig};
use crate::datakit::MorphTable;
use crate::numcore::{load_tensors, save_tensors, TensorError};
use crate::tokens::Vocabulary;

pub const MANIFEST_FORMAT: &str = "copycap-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub morph: MorphTable,
    pub abstract_labels: Vec<String>,
}

fn tensor_err(e: TensorError) -> CaptionerError {
    match e {
        TensorError::Io(io) => CaptionerError::Io(io),
        other => CaptionerError::Format(other.to_string()),
    }
}

impl Captioner {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            config: self.config().clone(),
            vocabulary: self.vocab().clone(),
            morph: self.morph().clone(),
            abstract_labels: self.abstract_labels().to_vec(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CaptionerError> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| CaptionerError::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), manifest)?;
        save_tensors(self.params(), &dir.join("params.json")).map_err(tensor_err)
    }

    pub fn load(dir: &Path) -> Result<Self, CaptionerError> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CaptionerError::Format(e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != 1 {
            return Err(CaptionerError::Format(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        let params = load_tensors(&dir.join("params.json")).map_err(tensor_err)?;
        Self::from_parts(m.config, m.vocabulary, m.morph, m.abstract_labels, params)
    }
}
