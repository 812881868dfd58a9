//! Checkpoint file format.
//!
//! A checkpoint is a single self-describing binary file:
//!
//! ```text
//! bytes 0..8    magic "CROSSRNK"
//! bytes 8..12   format_version, u32 little-endian
//! bytes 12..16  metadata length M, u32 little-endian
//! bytes 16..16+M  metadata, UTF-8 JSON (config, epoch, rng cursor,
//!                 metric history, encoder dims, Adam step counters)
//! next 8 bytes  value count V, u64 little-endian
//! V × 8 bytes   parameter and moment arrays, f64 little-endian, in order:
//!               student_image, teacher_image, gene (each: per layer weight
//!               row-major then bias), adam_image, adam_gene (each: per layer
//!               m_weight, m_bias, v_weight, v_bias)
//! ```
//!
//! Writes are atomic (temp file then rename); loads of truncated or corrupt
//! files fail without partial state.

use super::adam::AdamState;
use super::{TrainConfig, TrainHistory};
use crate::encoders::EncoderState;
use crate::error::{Error, Result};
use crate::numcore::{MlpParams, MLP_LAYERS};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CROSSRNK";

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub encoders: EncoderState,
    pub adam_image: AdamState,
    pub adam_gene: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: TrainHistory,
}

/// Position of the functional RNG scheme: all draws derive from
/// (seed, stage, epoch, ...), so the cursor is just the seed and the next
/// epoch to run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RngCursor {
    seed: u64,
    next_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    rng: RngCursor,
    history: TrainHistory,
    gene_dims: [usize; MLP_LAYERS + 1],
    image_dims: [usize; MLP_LAYERS + 1],
    embed_dim: usize,
    adam_image_step: u64,
    adam_gene_step: u64,
}

fn flatten(ckpt: &Checkpoint) -> Vec<f64> {
    let mut values = Vec::new();
    ckpt.encoders.student_image.flatten_into(&mut values);
    ckpt.encoders.teacher_image.flatten_into(&mut values);
    ckpt.encoders.gene.flatten_into(&mut values);
    ckpt.adam_image.flatten_into(&mut values);
    ckpt.adam_gene.flatten_into(&mut values);
    values
}

/// Serializes a checkpoint to bytes in the documented layout.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        rng: RngCursor {
            seed: ckpt.config.seed,
            next_epoch: ckpt.epoch,
        },
        history: ckpt.history.clone(),
        gene_dims: ckpt.encoders.gene.dims(),
        image_dims: ckpt.encoders.student_image.dims(),
        embed_dim: ckpt.encoders.embed_dim,
        adam_image_step: ckpt.adam_image.step,
        adam_gene_step: ckpt.adam_gene.step,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Parse {
        path: "<checkpoint meta>".into(),
        detail: e.to_string(),
    })?;
    let values = flatten(ckpt);

    let mut bytes = Vec::with_capacity(24 + meta_json.len() + values.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&ckpt.format_version.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    file.write_all(&bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + len > self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.clone(),
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes; fails without partial state on any corruption.
pub fn checkpoint_from_bytes(bytes: &[u8], path_label: &str) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        offset: 0,
        path: path_label.to_string(),
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            path: path_label.into(),
            detail: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Parse {
        path: path_label.into(),
        detail: format!("metadata: {e}"),
    })?;
    let n_values = r.u64("value count")? as usize;
    let raw = r.take(n_values * 8, "value section")?;
    if r.offset != bytes.len() {
        return Err(Error::Parse {
            path: path_label.into(),
            detail: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let param_len = |dims: &[usize; MLP_LAYERS + 1]| -> usize {
        (0..MLP_LAYERS).map(|l| dims[l] * dims[l + 1] + dims[l + 1]).sum()
    };
    let image_len = param_len(&meta.image_dims);
    let gene_len = param_len(&meta.gene_dims);

    let mut offset = 0usize;
    let mut take = |len: usize| -> Result<std::ops::Range<usize>> {
        if offset + len > values.len() {
            return Err(Error::Parse {
                path: path_label.into(),
                detail: "value section shorter than the declared layout".into(),
            });
        }
        let range = offset..offset + len;
        offset += len;
        Ok(range)
    };

    let student_image = MlpParams::from_flat(&meta.image_dims, &values[take(image_len)?])?;
    let teacher_image = MlpParams::from_flat(&meta.image_dims, &values[take(image_len)?])?;
    let gene = MlpParams::from_flat(&meta.gene_dims, &values[take(gene_len)?])?;
    let mut adam_image = AdamState::zeros_like(&student_image);
    adam_image.set_flat(&values[take(adam_image.flat_len())?])?;
    adam_image.step = meta.adam_image_step;
    let mut adam_gene = AdamState::zeros_like(&gene);
    adam_gene.set_flat(&values[take(adam_gene.flat_len())?])?;
    adam_gene.step = meta.adam_gene_step;
    if offset != values.len() {
        return Err(Error::Parse {
            path: path_label.into(),
            detail: format!("{} unread values", values.len() - offset),
        });
    }

    Ok(Checkpoint {
        format_version: version,
        encoders: EncoderState {
            student_image,
            teacher_image,
            gene,
            embed_dim: meta.embed_dim,
        },
        adam_image,
        adam_gene,
        config: meta.config,
        epoch: meta.epoch,
        history: meta.history,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}
