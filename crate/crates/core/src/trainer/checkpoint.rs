use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Agent, TrainerConfig};
use crate::envs::EnvSpec;
use crate::error::{IdacError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON document holding everything needed to resume evaluation of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub config: TrainerConfig,
    pub env_spec: EnvSpec,
    pub agent: Agent,
}

impl Checkpoint {
    pub fn new(step: u64, config: TrainerConfig, env_spec: EnvSpec, agent: Agent) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            step,
            config,
            env_spec,
            agent,
        }
    }
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, ckpt)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, refusing other format versions before parsing the body.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| IdacError::InvalidInput(format!("{} has no format_version", path.display())))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(IdacError::IncompatibleCheckpoint {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(value)?;
    let agent = &ckpt.agent;
    let nets = std::iter::once(agent.actor.net())
        .chain(agent.critics.online().iter().map(|c| c.net()))
        .chain(agent.critics.delayed().iter().map(|c| c.net()));
    for net in nets {
        if !net.is_finite() {
            return Err(IdacError::InvalidInput(format!("{} holds non-finite parameters", path.display())));
        }
    }
    Ok(ckpt)
}
