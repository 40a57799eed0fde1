//! Sharded line-delimited JSON persistence with atomic flushes.
//!
//! Shards are only ever observed complete: content accumulates in memory
//! and reaches disk as a whole file via write-to-temp-then-rename. The
//! dataset manifest lists every flushed shard with its record count and
//! content hash.

use super::PipelineError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const DATASET_MANIFEST_FILE: &str = "dataset-manifest.json";

/// Writes `bytes` to `path` atomically: the content lands under a
/// temporary name in the same directory and is renamed into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("output");
    let temp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut file = std::fs::File::create(&temp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&temp, path)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub records: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub shards: Vec<ShardInfo>,
    pub total_records: u64,
}

impl DatasetManifest {
    pub fn path(output_dir: &Path) -> PathBuf {
        output_dir.join(DATASET_MANIFEST_FILE)
    }

    pub fn load(output_dir: &Path) -> Result<Option<DatasetManifest>, PipelineError> {
        let path = DatasetManifest::path(output_dir);
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(err) => return Err(PipelineError::Io { path, source: err }),
        };
        let manifest = serde_json::from_str(&text).map_err(|err| PipelineError::ManifestInvalid(
            format!("{}: {err}", path.display()),
        ))?;
        Ok(Some(manifest))
    }

    pub fn save(&self, output_dir: &Path) -> Result<(), PipelineError> {
        let path = DatasetManifest::path(output_dir);
        let mut body = serde_json::to_vec_pretty(self).expect("manifest serializes");
        body.push(b'\n');
        write_atomic(&path, &body).map_err(|source| PipelineError::Io { path, source })
    }
}

pub fn shard_file_name(index: u64) -> String {
    format!("shard-{index:06}.jsonl")
}

/// Accumulates serialized records and flushes them as `shard-{index}.jsonl`
/// files of `shard_size` records each.
pub struct ShardWriter {
    output_dir: PathBuf,
    shard_size: usize,
    next_index: u64,
    buffer: Vec<String>,
    completed: Vec<ShardInfo>,
}

impl ShardWriter {
    pub fn new(output_dir: &Path, shard_size: usize) -> ShardWriter {
        assert!(shard_size >= 1, "shard_size must be >= 1");
        ShardWriter {
            output_dir: output_dir.to_path_buf(),
            shard_size,
            next_index: 0,
            buffer: Vec::new(),
            completed: Vec::new(),
        }
    }

    /// Continues writing after the shards recorded in `prior`, starting at
    /// `next_index`.
    pub fn resume(
        output_dir: &Path,
        shard_size: usize,
        next_index: u64,
        prior: Vec<ShardInfo>,
    ) -> ShardWriter {
        let mut writer = ShardWriter::new(output_dir, shard_size);
        writer.next_index = next_index;
        writer.completed = prior;
        writer
    }

    pub fn next_index(&self) -> u64 {
        self.next_index
    }

    pub fn buffered_records(&self) -> usize {
        self.buffer.len()
    }

    /// Appends one serialized record (no trailing newline). Returns the
    /// shard info when this append completed a shard and flushed it.
    pub fn append(&mut self, line: String) -> Result<Option<ShardInfo>, PipelineError> {
        self.buffer.push(line);
        if self.buffer.len() >= self.shard_size {
            return self.flush_shard().map(Some);
        }
        Ok(None)
    }

    fn flush_shard(&mut self) -> Result<ShardInfo, PipelineError> {
        let file = shard_file_name(self.next_index);
        let path = self.output_dir.join(&file);
        let mut content = String::new();
        for line in &self.buffer {
            content.push_str(line);
            content.push('\n');
        }
        write_atomic(&path, content.as_bytes())
            .map_err(|source| PipelineError::ShardWrite { path, source })?;
        let info = ShardInfo {
            file,
            records: self.buffer.len() as u64,
            sha256: hex::encode(Sha256::digest(content.as_bytes())),
        };
        self.buffer.clear();
        self.next_index += 1;
        self.completed.push(info.clone());
        Ok(info)
    }

    /// Manifest over the shards flushed so far; taken at checkpoint time.
    pub fn manifest_snapshot(&self) -> DatasetManifest {
        DatasetManifest {
            shards: self.completed.clone(),
            total_records: self.completed.iter().map(|s| s.records).sum(),
        }
    }

    /// Flushes any partial shard and returns the final manifest. The
    /// manifest is not written to disk here; callers persist it alongside
    /// their checkpoint.
    pub fn finalize(mut self) -> Result<DatasetManifest, PipelineError> {
        if !self.buffer.is_empty() {
            self.flush_shard()?;
        }
        Ok(self.manifest_snapshot())
    }
}

/// Writes an already-materialized record sequence as shards plus manifest.
pub fn write_shards<I, T>(
    records: I,
    shard_size: usize,
    output_dir: &Path,
) -> Result<DatasetManifest, PipelineError>
where
    I: IntoIterator<Item = T>,
    T: Serialize,
{
    if shard_size < 1 {
        return Err(PipelineError::ManifestInvalid(
            "shard_size must be >= 1".into(),
        ));
    }
    std::fs::create_dir_all(output_dir).map_err(|source| PipelineError::Io {
        path: output_dir.to_path_buf(),
        source,
    })?;
    let mut writer = ShardWriter::new(output_dir, shard_size);
    for record in records {
        let line = serde_json::to_string(&record).map_err(|err| {
            PipelineError::ManifestInvalid(format!("record failed to serialize: {err}"))
        })?;
        writer.append(line)?;
    }
    let manifest = writer.finalize()?;
    manifest.save(output_dir)?;
    Ok(manifest)
}
