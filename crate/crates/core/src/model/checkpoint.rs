//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "TRMCKPT\0"
//! version     u32
//! config      u32 x 9  hidden_dim, embed_dim, n_trunk_layers, n_heads, ffn_expansion,
//!                      lower_cycles, higher_cycles, supervision_steps, canvas_side
//!             u8 x 2   embedding_mode (0 per-variant, 1 explicit), halt_early
//! rows        u64      task embedding rows
//! registry    u8 flag, u64 digest
//! adapters    u8 flag, then u32 rank and f64 alpha when set
//! tensors     f32 values in `ModelParams::tensors` order, then adapter A/B pairs
//! ```

use std::path::Path;

use super::{EmbeddingMode, LoraAdapters, ModelConfig, ModelParams, ModelState};
use crate::error::{Result, TrmError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TRMCKPT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    /// Digest of the variant registry whose rows the embedding table follows.
    pub registry_digest: Option<u64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.state.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            cfg.hidden_dim,
            cfg.embed_dim,
            cfg.n_trunk_layers,
            cfg.n_heads,
            cfg.ffn_expansion,
            cfg.lower_cycles,
            cfg.higher_cycles,
            cfg.supervision_steps,
            cfg.canvas_side,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match cfg.embedding_mode {
            EmbeddingMode::PerVariant => 0,
            EmbeddingMode::Explicit => 1,
        });
        out.push(cfg.halt_early as u8);
        out.extend_from_slice(&(self.state.params.n_embedding_rows() as u64).to_le_bytes());
        out.push(self.registry_digest.is_some() as u8);
        out.extend_from_slice(&self.registry_digest.unwrap_or(0).to_le_bytes());
        match &self.state.adapters {
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&(a.rank as u32).to_le_bytes());
                out.extend_from_slice(&a.alpha.to_le_bytes());
            }
            None => out.push(0),
        }
        let adapter_tensors = self.state.adapters.as_ref().map(LoraAdapters::tensors).unwrap_or_default();
        let tensors = self.state.params.tensors().into_iter().map(|(_, _, t)| t).chain(adapter_tensors);
        for t in tensors {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut dims = [0usize; 9];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let embedding_mode = match r.u8()? {
            0 => EmbeddingMode::PerVariant,
            1 => EmbeddingMode::Explicit,
            m => return Err(format!("unknown embedding mode {m}")),
        };
        let halt_early = r.u8()? != 0;
        let config = ModelConfig {
            hidden_dim: dims[0],
            embed_dim: dims[1],
            n_trunk_layers: dims[2],
            n_heads: dims[3],
            ffn_expansion: dims[4],
            lower_cycles: dims[5],
            higher_cycles: dims[6],
            supervision_steps: dims[7],
            canvas_side: dims[8],
            embedding_mode,
            halt_early,
        };
        config.validate().map_err(|e| e.to_string())?;
        let rows = usize::try_from(r.u64()?).map_err(|_| "row count overflow".to_string())?;
        let has_digest = r.u8()? != 0;
        let digest = r.u64()?;
        let adapters = if r.u8()? != 0 {
            let rank = r.u32()? as usize;
            let alpha = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            if rank == 0 {
                return Err("adapter rank 0".into());
            }
            Some(LoraAdapters::<f32>::new(&config, rank, alpha, 0).zeros_like())
        } else {
            None
        };
        let expected = super::count_parameters(&config, rows).total()
            + adapters.as_ref().map_or(0, LoraAdapters::parameter_count);
        if r.remaining() != expected * 4 {
            return Err(format!(
                "tensor section holds {} bytes, shapes need {}",
                r.remaining(),
                expected * 4
            ));
        }
        let mut params = ModelParams::<f32>::zeros(&config, rows);
        let mut adapters = adapters;
        let adapter_slices = adapters.as_mut().map(|a| a.tensors_mut()).unwrap_or_default();
        for (_, t) in params.tensors_mut().into_iter().chain(adapter_slices) {
            for x in t.iter_mut() {
                *x = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            }
        }
        let state = ModelState {
            config,
            params,
            adapters,
        };
        if !state.params.all_finite() {
            return Err("non-finite parameter values".into());
        }
        Ok(Checkpoint {
            state,
            registry_digest: has_digest.then_some(digest),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| TrmError::io(path, e))
}

/// Loads a checkpoint. With `expected_registry` set, the stored registry
/// digest must be present and equal, otherwise the embedding rows cannot be
/// matched to tasks and loading fails with `ContinuedPretrainMappingLost`.
pub fn load_checkpoint(path: &Path, expected_registry: Option<u64>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| TrmError::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|message| TrmError::Checkpoint {
        path: path.to_path_buf(),
        message,
    })?;
    if let Some(expected) = expected_registry {
        match ckpt.registry_digest {
            None => {
                return Err(TrmError::ContinuedPretrainMappingLost(format!(
                    "{} records no registry digest",
                    path.display()
                )))
            }
            Some(found) if found != expected => {
                return Err(TrmError::ContinuedPretrainMappingLost(format!(
                    "{} was trained against registry {found:016x}, expected {expected:016x}",
                    path.display()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample(mode: EmbeddingMode, adapters: bool) -> Checkpoint {
        let cfg = ModelConfig { embedding_mode: mode, ..ModelConfig::desk() };
        let mut state = init_model::<f32>(&cfg, 3, 5);
        if adapters {
            let mut a = LoraAdapters::new(&cfg, 4, 8.0, 1);
            a.layers[0].q.b[[0, 0]] = 0.5;
            state.adapters = Some(a);
        }
        Checkpoint {
            state,
            registry_digest: Some(0xdead_beef),
        }
    }

    #[test]
    fn round_trip() {
        for (mode, adapters) in [
            (EmbeddingMode::PerVariant, false),
            (EmbeddingMode::Explicit, false),
            (EmbeddingMode::PerVariant, true),
        ] {
            let c = sample(mode, adapters);
            assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample(EmbeddingMode::PerVariant, false).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn registry_digest_is_verified() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut c = sample(EmbeddingMode::PerVariant, false);
        save_checkpoint(&path, &c).unwrap();
        assert!(load_checkpoint(&path, Some(0xdead_beef)).is_ok());
        assert!(matches!(
            load_checkpoint(&path, Some(1)),
            Err(TrmError::ContinuedPretrainMappingLost(_))
        ));
        c.registry_digest = None;
        save_checkpoint(&path, &c).unwrap();
        assert!(load_checkpoint(&path, None).is_ok());
        assert!(matches!(
            load_checkpoint(&path, Some(0xdead_beef)),
            Err(TrmError::ContinuedPretrainMappingLost(_))
        ));
    }
}
