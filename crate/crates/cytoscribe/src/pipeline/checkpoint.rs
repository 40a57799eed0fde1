//! Durable run state. A checkpoint is written only when a shard has been
//! flushed, so the record set it describes is always fully on disk.

use super::{shard::write_atomic, PipelineError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Hash of the tile manifest this run was started from; resuming
    /// against a different manifest is refused.
    pub manifest_hash: String,
    pub completed_tile_ids: BTreeSet<String>,
    /// Index the next shard will be written at.
    pub shard_index: u64,
    /// Records buffered toward an unflushed shard. Checkpoints are only
    /// taken at flush boundaries, so a well-formed file always says 0;
    /// anything else means the file was produced by something other than
    /// this writer.
    pub records_in_current_shard: u64,
}

impl Checkpoint {
    pub fn path(output_dir: &Path) -> PathBuf {
        output_dir.join(CHECKPOINT_FILE)
    }

    pub fn exists(output_dir: &Path) -> bool {
        Checkpoint::path(output_dir).is_file()
    }

    pub fn load(output_dir: &Path) -> Result<Option<Checkpoint>, PipelineError> {
        let path = Checkpoint::path(output_dir);
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(err) => return Err(PipelineError::Io { path, source: err }),
        };
        let checkpoint: Checkpoint =
            serde_json::from_str(&text).map_err(|err| PipelineError::CheckpointCorrupt {
                path: path.clone(),
                reason: err.to_string(),
            })?;
        if checkpoint.records_in_current_shard != 0 {
            return Err(PipelineError::CheckpointCorrupt {
                path,
                reason: format!(
                    "records_in_current_shard is {}, expected 0 at a flush boundary",
                    checkpoint.records_in_current_shard
                ),
            });
        }
        Ok(Some(checkpoint))
    }

    pub fn save(&self, output_dir: &Path) -> Result<(), PipelineError> {
        let path = Checkpoint::path(output_dir);
        let mut body = serde_json::to_vec_pretty(self).expect("checkpoint serializes");
        body.push(b'\n');
        write_atomic(&path, &body).map_err(|source| PipelineError::Io { path, source })
    }
}
