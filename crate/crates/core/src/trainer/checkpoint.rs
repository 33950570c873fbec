//! Checkpoint directory layout:
//!
//! ```text
//! checkpoint.json          step counters, config snapshot, dims, bank cursors
//! params/<name>.aahr       live parameters (e.g. encoder.projection.img_region.weight)
//! momentum/<name>.aahr     momentum encoder copy (encoder names without the prefix)
//! optim/m/<name>.aahr      AdamW first moments
//! optim/v/<name>.aahr      AdamW second moments
//! bank/image.aahr          image memory bank storage, N × d
//! bank/text.aahr
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, ModelParams, TrainConfig, TrainState};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::momentum::{MemoryBank, MomentumEncoder};
use crate::tensorio::{read_mat, write_mat, FeatureDims};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BankMeta {
    capacity: usize,
    write_index: usize,
    filled: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: u32,
    step: u64,
    total_steps: u64,
    seed: u64,
    dims: FeatureDims,
    config: TrainConfig,
    bank_image: BankMeta,
    bank_text: BankMeta,
    parameters: Vec<String>,
}

fn bank_meta(b: &MemoryBank) -> BankMeta {
    BankMeta {
        capacity: b.capacity(),
        write_index: b.write_index(),
        filled: b.filled(),
    }
}

fn tensor_path(dir: &Path, sub: &str, name: &str) -> std::path::PathBuf {
    dir.join(sub).join(format!("{name}.aahr"))
}

fn write_tree(dir: &Path, sub: &str, visit: impl FnOnce(&mut dyn FnMut(String, &Mat))) -> Result<()> {
    let mut result = Ok(());
    visit(&mut |name, m| {
        if result.is_ok() {
            result = write_mat(m, tensor_path(dir, sub, &name));
        }
    });
    result
}

fn read_tree(dir: &Path, sub: &str, visit: impl FnOnce(&mut dyn FnMut(String, &mut Mat))) -> Result<()> {
    let mut result = Ok(());
    visit(&mut |name, m| {
        if result.is_err() {
            return;
        }
        let path = tensor_path(dir, sub, &name);
        result = read_mat(&path).and_then(|loaded| {
            if loaded.dim() != m.dim() {
                return Err(Error::Congruence(format!(
                    "{} has shape {:?}, expected {:?}",
                    path.display(),
                    loaded.dim(),
                    m.dim()
                )));
            }
            *m = loaded;
            Ok(())
        });
    });
    result
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::new();
    state.params.visit("", &mut |n, _| parameters.push(n));
    write_tree(dir, "params", |f| state.params.visit("", f))?;
    write_tree(dir, "momentum", |f| state.momentum.params.visit("", f))?;
    write_tree(dir, "optim/m", |f| state.optimizer.m.visit("", f))?;
    write_tree(dir, "optim/v", |f| state.optimizer.v.visit("", f))?;
    write_mat(state.bank_image.buffer(), dir.join("bank/image.aahr"))?;
    write_mat(state.bank_text.buffer(), dir.join("bank/text.aahr"))?;
    let meta = Meta {
        format: FORMAT,
        step: state.step,
        total_steps: state.total_steps,
        seed: state.config.seed,
        dims: state.dims,
        config: state.config.clone(),
        bank_image: bank_meta(&state.bank_image),
        bank_text: bank_meta(&state.bank_text),
        parameters,
    };
    let path = dir.join(CHECKPOINT_FILE);
    let mut text = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_bank(dir: &Path, name: &str, meta: &BankMeta, d: usize) -> Result<MemoryBank> {
    let buffer = read_mat(dir.join(format!("bank/{name}.aahr")))?;
    if buffer.dim() != (meta.capacity, d) {
        return Err(Error::Congruence(format!(
            "{name} bank has shape {:?}, expected ({}, {d})",
            buffer.dim(),
            meta.capacity
        )));
    }
    MemoryBank::from_parts(buffer, meta.write_index, meta.filled)
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.format != FORMAT {
        return Err(Error::Format(format!("{}: unsupported checkpoint format {}", path.display(), meta.format)));
    }
    meta.config.validate()?;
    let mut params = ModelParams::init(&meta.config, meta.dims)?;
    let mut names = Vec::new();
    params.visit("", &mut |n, _| names.push(n));
    if names != meta.parameters {
        return Err(Error::Congruence(format!(
            "{}: parameter list does not match the configured model",
            path.display()
        )));
    }
    read_tree(dir, "params", |f| params.visit_mut("", f))?;
    let mut momentum = MomentumEncoder::new(&params.encoder, meta.config.m_tilde)?;
    read_tree(dir, "momentum", |f| momentum.params.visit_mut("", f))?;
    let mut optimizer = AdamW::new(&params);
    read_tree(dir, "optim/m", |f| optimizer.m.visit_mut("", f))?;
    read_tree(dir, "optim/v", |f| optimizer.v.visit_mut("", f))?;
    let d = meta.config.embed_dim;
    Ok(TrainState {
        bank_image: load_bank(dir, "image", &meta.bank_image, d)?,
        bank_text: load_bank(dir, "text", &meta.bank_text, d)?,
        config: meta.config,
        dims: meta.dims,
        params,
        momentum,
        optimizer,
        step: meta.step,
        total_steps: meta.total_steps,
    })
}
