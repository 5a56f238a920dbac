//! Versioned binary model checkpoints.
//!
//! A checkpoint is self-contained for inference: it embeds the
//! architecture, the training seed and the normalizer statistics along
//! with every parameter tensor. All multi-byte values are little-endian;
//! floats are IEEE-754 binary64, so checkpoints round-trip bit-exactly.
//!
//! Byte layout (version 1):
//!
//! ```text
//! magic               4  bytes   "DTML"
//! format_version      u32
//! variant             u8        0 = full, 1 = no_temporal, 2 = shallow
//! aggregation         u8        0 = max, 1 = mean, 2 = noisy_or, 3 = smooth_max
//! smooth_max_alpha    f64       0.0 unless aggregation = smooth_max
//! input_dim           u32
//! gru_units           u32
//! dense_units         u32
//! seed                u64
//! n_channels          u32       (equals input_dim)
//! norm_mean           n_channels x f64
//! norm_sd             n_channels x f64
//! norm_fitted_records u64
//! norm_fitted_steps   u64
//! parameters          f64 tensors in declared block order, row-major:
//!                     gru.w_update [H x (H+D)], gru.b_update [H],
//!                     gru.w_reset, gru.b_reset, gru.w_cand, gru.b_cand
//!                     (full/shallow only); dense.w [M x in], dense.b [M]
//!                     (full/no_temporal only); logistic.w, logistic.b.
//! ```

use std::fs;
use std::path::Path;

use crate::agg::Aggregation;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ModelArch, ModelParams, ModelVariant};
use crate::nn::InitScheme;

const MAGIC: &[u8; 4] = b"DTML";
const VERSION: u32 = 1;

/// A trained (or initial) model plus everything needed to run it on raw
/// exported features.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub norm: NormStats,
    pub seed: u64,
}

fn variant_code(v: ModelVariant) -> u8 {
    match v {
        ModelVariant::Full => 0,
        ModelVariant::NoTemporal => 1,
        ModelVariant::Shallow => 2,
    }
}

fn agg_code(a: Aggregation) -> (u8, f64) {
    match a {
        Aggregation::Max => (0, 0.0),
        Aggregation::Mean => (1, 0.0),
        Aggregation::NoisyOr => (2, 0.0),
        Aggregation::SmoothMax { alpha } => (3, alpha),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let arch = &ckpt.params.arch;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(variant_code(arch.variant));
    let (agg, alpha) = agg_code(arch.aggregation);
    buf.push(agg);
    buf.extend_from_slice(&alpha.to_le_bytes());
    buf.extend_from_slice(&(arch.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.gru_units as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.dense_units as u32).to_le_bytes());
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&(ckpt.norm.mean.len() as u32).to_le_bytes());
    for v in ckpt.norm.mean.iter().chain(ckpt.norm.sd.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(ckpt.norm.fitted_records as u64).to_le_bytes());
    buf.extend_from_slice(&(ckpt.norm.fitted_steps as u64).to_le_bytes());
    for (_, block) in ckpt.params.blocks() {
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                path: self.path.display().to_string(),
                line: 0,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    let mut r = Reader {
        path,
        data: &data,
        pos: 0,
    };

    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "not a dtmil checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: version,
            expected: VERSION,
        });
    }

    let variant = match r.u8("variant")? {
        0 => ModelVariant::Full,
        1 => ModelVariant::NoTemporal,
        2 => ModelVariant::Shallow,
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: format!("unknown variant code {other}"),
            })
        }
    };
    let agg_code = r.u8("aggregation")?;
    let alpha = r.f64("alpha")?;
    let aggregation = match agg_code {
        0 => Aggregation::Max,
        1 => Aggregation::Mean,
        2 => Aggregation::NoisyOr,
        3 => Aggregation::SmoothMax { alpha },
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: format!("unknown aggregation code {other}"),
            })
        }
    };

    let input_dim = r.u32("input_dim")? as usize;
    let gru_units = r.u32("gru_units")? as usize;
    let dense_units = r.u32("dense_units")? as usize;
    let seed = r.u64("seed")?;
    let n_channels = r.u32("n_channels")? as usize;
    let mean = r.f64_vec(n_channels, "norm mean")?;
    let sd = r.f64_vec(n_channels, "norm sd")?;
    let fitted_records = r.u64("fitted_records")? as usize;
    let fitted_steps = r.u64("fitted_steps")? as usize;

    let arch = ModelArch {
        variant,
        input_dim,
        gru_units,
        dense_units,
        aggregation,
    };
    let mut params = ModelParams::init(arch, InitScheme::Zeros, 0)?;
    for (name, block) in params.blocks_mut() {
        let values = r.f64_vec(block.len(), name)?;
        block.copy_from_slice(&values);
    }
    if r.pos != data.len() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("{} trailing bytes after parameters", data.len() - r.pos),
        });
    }

    Ok(Checkpoint {
        params,
        norm: NormStats {
            mean,
            sd,
            fitted_records,
            fitted_steps,
        },
        seed,
    })
}
