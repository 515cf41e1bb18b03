//! The `SCLVM1` model container: a format tag line followed by a JSON body.
//! Floats are written with shortest round-trip formatting, so every stored
//! real reloads bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SclvmError};
use crate::model::FittedModel;

pub const FORMAT_TAG: &str = "SCLVM1";

pub fn write_model<W: Write>(model: &FittedModel, mut w: W) -> Result<()> {
    writeln!(w, "{FORMAT_TAG}")?;
    serde_json::to_writer(&mut w, model).map_err(|e| SclvmError::Format(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

pub fn to_bytes(model: &FittedModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<FittedModel> {
    let tag = format!("{FORMAT_TAG}\n");
    let body = bytes
        .strip_prefix(tag.as_bytes())
        .ok_or_else(|| SclvmError::Format(format!("missing {FORMAT_TAG} format tag")))?;
    let model: FittedModel = serde_json::from_slice(body).map_err(|e| SclvmError::Format(e.to_string()))?;
    model.state.validate()?;
    if model.psi1_t_y.nrows() != model.state.inducing.len() || model.psi1_t_y.ncols() != model.y_sq.len() {
        return Err(SclvmError::Format("data summary shape disagrees with the model".into()));
    }
    Ok(model)
}

pub fn read_model<R: Read>(mut r: R) -> Result<FittedModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save(model: &FittedModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FittedModel> {
    from_bytes(&fs::read(path)?)
}
