//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `SPTCKPT1`, a little-endian `u64` header length, a
//! UTF-8 JSON header, then every tensor listed in the header as
//! little-endian `f64`, in header order. The header records the
//! architecture, input width, objective, step count and the full training
//! configuration. Tensor names are prefixed `online.`, `target.` (BYOL
//! only), `adam.m.` and `adam.v.`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::objectives::ObjectiveKind;
use crate::optim::OptimizerState;
use crate::trainer::{Network, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPTCKPT1";
pub const ARCHITECTURE: &str = "spt-encoder";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: String,
    pub d_in: usize,
    pub objective: ObjectiveKind,
    pub step: u64,
    pub optimizer_step: u64,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub d_in: usize,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(d_in: usize, config: TrainConfig, state: TrainState) -> Self {
        Self { d_in, config, state }
    }

    pub fn network(&self) -> &Network {
        &self.state.network
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.config.objective.kind
    }

    /// Rejects resuming with a configuration that changes the parameter layout
    /// or the objective.
    pub fn check_compatible(&self, d_in: usize, cfg: &TrainConfig) -> Result<()> {
        if d_in != self.d_in {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects d_in={} but the data has d={d_in}",
                self.d_in
            )));
        }
        if cfg.model != self.config.model {
            return Err(Error::Checkpoint("model configuration differs from the checkpoint".into()));
        }
        if cfg.objective.kind != self.config.objective.kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with {:?}, not {:?}",
                self.config.objective.kind, cfg.objective.kind
            )));
        }
        Ok(())
    }

    fn sections(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        let online = self.state.network.tensors();
        for t in &online {
            out.push((format!("online.{}", t.name), t.shape.clone(), t.data));
        }
        if let Some(target) = &self.state.target {
            for t in target.tensors() {
                out.push((format!("target.{}", t.name), t.shape, t.data));
            }
        }
        for (t, m) in online.iter().zip(&self.state.optimizer.m) {
            out.push((format!("adam.m.{}", t.name), t.shape.clone(), m.as_slice()));
        }
        for (t, v) in online.iter().zip(&self.state.optimizer.v) {
            out.push((format!("adam.v.{}", t.name), t.shape.clone(), v.as_slice()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sections = self.sections();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            architecture: ARCHITECTURE.to_string(),
            d_in: self.d_in,
            objective: self.config.objective.kind,
            step: self.state.step,
            optimizer_step: self.state.optimizer.step,
            config: self.config.clone(),
            tensors: sections
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = sections.iter().map(|(_, _, d)| d.len() * 8).sum();
        let mut buf = Vec::with_capacity(16 + json.len() + payload);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, _, data) in &sections {
            for v in *data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint(reason);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION || header.architecture != ARCHITECTURE {
            return Err(bad(format!(
                "unsupported checkpoint {} v{}",
                header.architecture, header.format_version
            )));
        }
        header.config.model.validate()?;
        let kind = header.config.objective.kind;
        if kind != header.objective {
            return Err(bad("objective in header disagrees with the config snapshot".into()));
        }

        let mut network = Network::init(header.d_in, &header.config.model, kind, 0);
        let mut target = (kind == ObjectiveKind::Byol).then(|| network.clone());
        let mut optimizer = OptimizerState::new(&network);
        optimizer.step = header.optimizer_step;

        let expected: Vec<TensorEntry> = {
            let skeleton = Checkpoint::new(
                header.d_in,
                header.config.clone(),
                TrainState {
                    network: network.clone(),
                    target: target.clone(),
                    optimizer: optimizer.clone(),
                    step: header.step,
                },
            );
            skeleton
                .sections()
                .into_iter()
                .map(|(name, shape, _)| TensorEntry { name, shape })
                .collect()
        };
        if expected != header.tensors {
            return Err(bad("tensor table does not match the recorded architecture".into()));
        }

        let mut dests: Vec<&mut [f64]> = network.tensors_mut();
        if let Some(t) = target.as_mut() {
            dests.extend(t.tensors_mut());
        }
        dests.extend(optimizer.m.iter_mut().map(|m| m.as_mut_slice()));
        dests.extend(optimizer.v.iter_mut().map(|v| v.as_mut_slice()));
        let total: usize = dests.iter().map(|d| d.len()).sum();
        let payload = &bytes[16 + hlen..];
        if payload.len() != total * 8 {
            return Err(bad(format!(
                "expected {} tensor bytes, found {}",
                total * 8,
                payload.len()
            )));
        }
        let mut chunks = payload.chunks_exact(8);
        for dst in dests {
            for (d, c) in dst.iter_mut().zip(chunks.by_ref()) {
                *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        Ok(Checkpoint {
            d_in: header.d_in,
            config: header.config,
            state: TrainState {
                network,
                target,
                optimizer,
                step: header.step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(reason) => Error::Checkpoint(format!("{}: {reason}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn tiny(kind: ObjectiveKind) -> Checkpoint {
        let cfg = TrainConfig {
            model: ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                ffn_mult: 2,
                fourier_dim: 4,
                pos_hidden: 6,
                proj_hidden: 5,
                d_proj: 3,
                init_std: 0.02,
            },
            objective: crate::objectives::ObjectiveConfig {
                kind,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut state = TrainState::init(4, &cfg);
        state.step = 17;
        state.optimizer.step = 17;
        state.optimizer.m[0][0] = 0.25;
        state.optimizer.v[1][0] = -1.5e-300;
        Checkpoint::new(4, cfg, state)
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [ObjectiveKind::SimClr, ObjectiveKind::Byol] {
            let ck = tiny(kind);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn byol_checkpoint_holds_target() {
        let ck = tiny(ObjectiveKind::Byol);
        let names: Vec<_> = ck.sections().into_iter().map(|s| s.0).collect();
        assert!(names.iter().any(|n| n.starts_with("target.")));
        let ck = tiny(ObjectiveKind::Vicreg);
        assert!(!ck.sections().iter().any(|s| s.0.starts_with("target.")));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = tiny(ObjectiveKind::SimClr).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn incompatible_resume_is_rejected() {
        let ck = tiny(ObjectiveKind::SimClr);
        let mut cfg = ck.config.clone();
        assert!(ck.check_compatible(4, &cfg).is_ok());
        assert!(ck.check_compatible(5, &cfg).is_err());
        cfg.model.d_model = 16;
        assert!(ck.check_compatible(4, &cfg).is_err());
    }
}
