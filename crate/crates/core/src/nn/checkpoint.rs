use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar};

const FORMAT: &str = "leancl-checkpoint";
const VERSION: u32 = 1;

/// Self-describing JSON model container: layer kinds, shapes, flat weight
/// arrays and a precision tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Checkpoint<F> {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    pub model: Model<F>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    precision: Precision,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(model: Model<F>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            precision: F::PRECISION,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported checkpoint {} v{}", header.format, header.version),
            });
        }
        if header.precision != F::PRECISION {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "checkpoint precision {:?} does not match requested {:?}",
                    header.precision,
                    F::PRECISION
                ),
            });
        }
        let ck: Checkpoint<F> = serde_json::from_str(text)?;
        // Re-run construction-time shape validation on the decoded layers.
        let mut model = Model::new(
            ck.model.input_shape().to_vec(),
            ck.model.layers().to_vec(),
            ck.model.class_count(),
        )?;
        for r in ck.model.task_class_ranges() {
            model.push_task_range(*r)?;
        }
        Ok(Self { model, ..ck })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Reads only the precision tag of a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text)?;
    Ok(header.precision)
}
