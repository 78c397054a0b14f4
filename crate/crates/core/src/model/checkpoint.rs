//! Versioned JSON checkpoints: a config echo plus named parameter arrays.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Meldae, ModelConfig, ParamGroup};
use crate::error::{Error, IoContext, Result};
use crate::tape::Mat;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "meldae-checkpoint";

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<StoredParam>,
}

pub fn save_checkpoint(model: &Meldae, path: &Path) -> Result<()> {
    let stored = Stored {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|p| StoredParam {
                name: p.name.clone(),
                group: p.group,
                shape: [p.value.nrows(), p.value.ncols()],
                data: p.value.iter().copied().collect(),
            })
            .collect(),
    };
    let file = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &stored).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.flush().at(path)
}

/// Loads a checkpoint. When `expected` is given, the stored config must equal
/// it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Meldae> {
    let file = fs::File::open(path).at(path)?;
    let stored: Stored = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if stored.format != FORMAT || stored.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            stored.format,
            stored.version
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != stored.config {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint config {:?} does not match requested config {:?}",
                path.display(),
                stored.config,
                cfg
            )));
        }
    }
    let mut model = Meldae::new(stored.config, 0)?;
    let mut params = model.params().clone();
    if params.len() != stored.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter arrays, found {}",
            params.len(),
            stored.params.len()
        )));
    }
    for (slot, sp) in params.iter_mut().zip(stored.params) {
        let shape = (sp.shape[0], sp.shape[1]);
        if slot.name != sp.name || slot.value.dim() != shape || slot.group != sp.group {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match stored `{}` {:?}",
                slot.name,
                slot.value.dim(),
                sp.name,
                shape
            )));
        }
        slot.value = Mat::from_shape_vec(shape, sp.data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    model.replace_params(params);
    Ok(model)
}
