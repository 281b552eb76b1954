//! Restartable chain checkpoints.
//!
//! A checkpoint is a JSON snapshot of a [`ChainPosition`]: completed sweeps,
//! the current state, the retained draws so far, the Metropolis tuning, and
//! the exact generator position. Floats survive the JSON round trip
//! bit-for-bit, and every Metropolis proposal consumes a fixed number of
//! variates, so a resumed chain continues on the same trajectory the
//! uninterrupted chain would have taken.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FitContext;
use crate::state::ChainState;

use super::{ChainPosition, MhSet};

/// Format marker for forward compatibility.
const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha generator: seed, stream, and word position,
/// all hex-encoded (the word position exceeds the integer range JSON can
/// carry faithfully).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngPosition {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngPosition {
            seed: hex_encode(&rng.get_seed()),
            stream: format!("{:x}", rng.get_stream()),
            word_pos: format!("{:x}", rng.get_word_pos()),
        }
    }

    pub fn restore(&self) -> Result<ChaCha20Rng> {
        let seed_bytes = hex_decode(&self.seed)?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Config("checkpoint seed must be 32 bytes".into()))?;
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(parse_hex_u64(&self.stream)?);
        rng.set_word_pos(parse_hex_u128(&self.word_pos)?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub sweep: usize,
    pub state: ChainState,
    pub rng: RngPosition,
    pub blocks: MhSet,
    pub kept: Vec<ChainState>,
    pub deviances: Vec<f64>,
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Config("hex value with odd length".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|e| Error::Config(format!("invalid hex byte: {e}")))
        })
        .collect()
}

fn parse_hex_u64(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|e| Error::Config(format!("invalid hex integer: {e}")))
}

fn parse_hex_u128(s: &str) -> Result<u128> {
    u128::from_str_radix(s, 16).map_err(|e| Error::Config(format!("invalid hex integer: {e}")))
}

/// Write a checkpoint atomically (temp file + rename) so an interrupted
/// write never destroys the previous checkpoint.
pub fn write_checkpoint(ctx: &FitContext, path: &Path, pos: &ChainPosition) -> Result<()> {
    let snapshot = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: crate::config::config_hash(ctx.config()),
        sweep: pos.sweep,
        state: pos.state.clone(),
        rng: RngPosition::capture(&pos.rng),
        blocks: pos.blocks.clone(),
        kept: pos.kept.clone(),
        deviances: pos.deviances.clone(),
    };
    let json = serde_json::to_string(&snapshot)
        .map_err(|e| Error::Numeric(format!("checkpoint serialization failed: {e}")))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load a checkpoint and validate it against the fitting context.
pub fn read_checkpoint(ctx: &FitContext, path: &Path) -> Result<ChainPosition> {
    let json =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let snapshot: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::Config(format!("unreadable checkpoint {}: {e}", path.display())))?;
    if snapshot.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} not supported (expected {})",
            snapshot.version, CHECKPOINT_VERSION
        )));
    }
    let expected = crate::config::config_hash(ctx.config());
    if snapshot.config_hash != expected {
        return Err(Error::Config(format!(
            "checkpoint was written under configuration {} but the current configuration is {}",
            snapshot.config_hash, expected
        )));
    }
    if snapshot.sweep > ctx.config().mcmc.n_iter {
        return Err(Error::Config(format!(
            "checkpoint is at sweep {} but the schedule has only {}",
            snapshot.sweep,
            ctx.config().mcmc.n_iter
        )));
    }
    ctx.check_state(&snapshot.state)?;
    Ok(ChainPosition {
        sweep: snapshot.sweep,
        state: snapshot.state,
        rng: snapshot.rng.restore()?,
        blocks: snapshot.blocks,
        kept: snapshot.kept,
        deviances: snapshot.deviances,
    })
}
