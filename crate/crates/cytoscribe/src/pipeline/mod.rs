//! End-to-end orchestrator: tile manifest in, dataset shards out.
//!
//! Per tile: fan out to the weak annotators, parse replies, fuse consensus,
//! synthesize the narrative, refine through the expert when configured,
//! then hand the record to a single shard writer. Up to `tile_concurrency`
//! tiles are in flight at once; the ordered hand-off keeps shard contents
//! in manifest order regardless of completion order. Checkpoints are taken
//! exactly at shard flushes, so a resumed run continues from a
//! fully-durable prefix and reproduces the uninterrupted output byte for
//! byte (stamp records via `fixed_created_at` to keep them clock-free).

mod checkpoint;
mod shard;

pub use checkpoint::{Checkpoint, CHECKPOINT_FILE};
pub use shard::{
    shard_file_name, write_shards, DatasetManifest, ShardInfo, ShardWriter,
    DATASET_MANIFEST_FILE,
};

use crate::config::PipelineSetup;
use crate::endpoints::{fan_out, ChatClient, ChatRequest};
use crate::fusion::{fuse_consensus, summarize_narrative, FusedDescription, IntegratorHandle};
use crate::refine::{refine_expert, FinalDescription};
use crate::schema::{parse_structured_caption, StructuredCaption};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// One pre-cut image tile from a slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTile {
    pub tile_id: String,
    /// File path or http(s) URL to the image bytes.
    pub uri: String,
    pub source_slide_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<TileRegion>,
    #[serde(default = "default_media_type")]
    pub media_type: String,
}

fn default_media_type() -> String {
    "image/png".to_string()
}

/// Tile position in slide pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRegion {
    pub x: u64,
    pub y: u64,
    pub width: u64,
    pub height: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Raw {
    pub endpoint_id: String,
    pub text: String,
}

/// One output record: the final description plus full provenance back
/// through every stage. Images stay referenced by tile id and URI, never
/// embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tile_id: String,
    #[serde(rename = "final")]
    pub final_description: FinalDescription,
    pub stage1_raw: Vec<Stage1Raw>,
    pub fused: FusedDescription,
    pub pipeline_config_hash: String,
    pub created_at: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("tile manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error("pipeline config invalid: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint {path} is corrupt: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },
    #[error(
        "output dir {path} already has a checkpoint; pass resume to continue it or clear the directory"
    )]
    CheckpointExists { path: PathBuf },
    #[error("resume requested but {path} has no checkpoint")]
    MissingCheckpoint { path: PathBuf },
    #[error(
        "checkpoint belongs to a different tile manifest (checkpoint {found}, current {expected})"
    )]
    ManifestHashMismatch { expected: String, found: String },
    #[error("failed to write shard {path}: {source}")]
    ShardWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Validates tile-id uniqueness and region sanity.
pub fn validate_manifest(tiles: &[ImageTile]) -> Result<(), PipelineError> {
    if tiles.is_empty() {
        return Err(PipelineError::ManifestInvalid("manifest is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for tile in tiles {
        if tile.tile_id.trim().is_empty() {
            return Err(PipelineError::ManifestInvalid("empty tile id".into()));
        }
        if !seen.insert(tile.tile_id.as_str()) {
            return Err(PipelineError::ManifestInvalid(format!(
                "duplicate tile id `{}`",
                tile.tile_id
            )));
        }
        if let Some(region) = &tile.region {
            if region.width == 0 || region.height == 0 {
                return Err(PipelineError::ManifestInvalid(format!(
                    "tile `{}` has a zero-sized region",
                    tile.tile_id
                )));
            }
        }
    }
    Ok(())
}

/// Loads a line-delimited JSON tile manifest and validates it.
pub fn load_tile_manifest(path: &Path) -> Result<Vec<ImageTile>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut tiles = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tile: ImageTile = serde_json::from_str(line).map_err(|err| {
            PipelineError::ManifestInvalid(format!(
                "{} line {}: {err}",
                path.display(),
                idx + 1
            ))
        })?;
        tiles.push(tile);
    }
    validate_manifest(&tiles)?;
    Ok(tiles)
}

/// Content identity of a manifest, recorded in checkpoints.
pub fn manifest_hash(tiles: &[ImageTile]) -> String {
    let mut hasher = Sha256::new();
    for tile in tiles {
        hasher.update(serde_json::to_string(tile).expect("tile serializes").as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Reads an image from a file path or http(s) URL.
pub(crate) async fn fetch_uri_bytes(client: &ChatClient, uri: &str) -> Result<Vec<u8>, String> {
    if uri.starts_with("http://") || uri.starts_with("https://") {
        let response = client
            .http()
            .get(uri)
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|err| format!("fetching {uri}: {err}"))?;
        response
            .bytes()
            .await
            .map(|b| b.to_vec())
            .map_err(|err| format!("reading {uri}: {err}"))
    } else {
        tokio::fs::read(uri)
            .await
            .map_err(|err| format!("reading {uri}: {err}"))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    pub resume: bool,
    /// Stop (reporting `interrupted`) after this many shard flushes in this
    /// invocation; used for staged backfills and interrupt testing.
    pub stop_after_shards: Option<u64>,
    /// Cooperative cancellation (Ctrl-C). When it turns true the run stops
    /// issuing tiles, leaves the current partial shard unflushed, and
    /// reports `interrupted`; the last checkpoint stays authoritative.
    pub cancel: Option<tokio::sync::watch::Receiver<bool>>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PipelineRunSummary {
    pub succeeded: u64,
    pub failed: u64,
    /// Tiles skipped because the checkpoint already covered them.
    pub skipped: u64,
    /// (tile id, failure reason) for every tile counted in `failed`.
    pub failed_tiles: Vec<(String, String)>,
    pub shard_paths: Vec<PathBuf>,
    pub interrupted: bool,
    pub config_hash: String,
}

enum TileOutcome {
    Record(Box<DatasetRecord>),
    Failed { tile_id: String, reason: String },
}

async fn process_tile(
    tile: &ImageTile,
    setup: &PipelineSetup,
    client: &ChatClient,
    annotator_prompt: &str,
    created_at: &str,
) -> TileOutcome {
    let failed = |reason: String| {
        tracing::warn!(tile = %tile.tile_id, %reason, "tile failed");
        TileOutcome::Failed {
            tile_id: tile.tile_id.clone(),
            reason,
        }
    };

    let bytes = match fetch_uri_bytes(client, &tile.uri).await {
        Ok(bytes) => bytes,
        Err(reason) => return failed(reason),
    };

    let responses = fan_out(client, &setup.config.annotators, |endpoint| {
        ChatRequest::new(endpoint).user_text_image(
            annotator_prompt.to_string(),
            bytes.clone(),
            tile.media_type.clone(),
        )
    })
    .await;

    let mut stage1_raw = Vec::new();
    let mut captions: Vec<(String, StructuredCaption)> = Vec::new();
    for (endpoint_id, result) in responses {
        match result {
            Ok(response) => {
                match parse_structured_caption(&response.text, &setup.lexicon) {
                    Ok(caption) => captions.push((endpoint_id.clone(), caption)),
                    Err(err) => tracing::warn!(
                        tile = %tile.tile_id,
                        endpoint = %endpoint_id,
                        error = %err,
                        "annotator reply unusable"
                    ),
                }
                stage1_raw.push(Stage1Raw {
                    endpoint_id,
                    text: response.text,
                });
            }
            Err(err) => tracing::warn!(
                tile = %tile.tile_id,
                endpoint = %endpoint_id,
                error = %err,
                "annotator failed"
            ),
        }
    }
    if captions.is_empty() {
        return failed("all annotators failed or returned unusable captions".into());
    }

    let mut fused = match fuse_consensus(&captions, &setup.config.fusion) {
        Ok(fused) => fused,
        Err(err) => return failed(format!("fusion failed: {err}")),
    };

    let narratives: Vec<String> = captions
        .iter()
        .map(|(_, caption)| caption.narrative.clone())
        .collect();
    let integrator = setup.config.integrator.as_ref().map(|endpoint| IntegratorHandle {
        client,
        endpoint,
        template: &setup.prompts.integrator,
    });
    fused.narrative = match summarize_narrative(&fused, &narratives, integrator).await {
        Ok(narrative) => narrative,
        Err(err) => return failed(format!("integrator failed: {err}")),
    };

    let final_description = match &setup.config.expert {
        Some(expert) => {
            match refine_expert(
                &bytes,
                &tile.media_type,
                &fused,
                expert,
                client,
                &setup.lexicon,
                &setup.prompts.expert,
            )
            .await
            {
                Ok(final_description) => final_description,
                Err(err) => return failed(format!("expert failed: {err}")),
            }
        }
        None => FinalDescription::from_consensus(&fused),
    };

    TileOutcome::Record(Box::new(DatasetRecord {
        tile_id: tile.tile_id.clone(),
        final_description,
        stage1_raw,
        fused,
        pipeline_config_hash: setup.config_hash.clone(),
        created_at: created_at.to_string(),
    }))
}

/// Runs the full pipeline over `manifest`, appending records to shards in
/// `options.output_dir`.
///
/// Tiles already covered by the checkpoint are skipped when resuming. A
/// tile whose Stage-1 annotators all fail is recorded as failed and never
/// blocks its siblings. Without `resume`, a pre-existing checkpoint is an
/// error so two runs cannot interleave records.
pub async fn run_pipeline(
    manifest: &[ImageTile],
    setup: &PipelineSetup,
    client: &ChatClient,
    options: RunOptions,
) -> Result<PipelineRunSummary, PipelineError> {
    validate_manifest(manifest)?;
    if setup.config.annotators.is_empty() {
        return Err(PipelineError::ConfigInvalid(
            "at least one annotator endpoint is required".into(),
        ));
    }
    let output_dir = options.output_dir.clone();
    std::fs::create_dir_all(&output_dir).map_err(|source| PipelineError::Io {
        path: output_dir.clone(),
        source,
    })?;

    let hash = manifest_hash(manifest);
    let existing = Checkpoint::load(&output_dir)?;
    let (mut completed, mut writer) = match (options.resume, existing) {
        (false, Some(_)) => {
            return Err(PipelineError::CheckpointExists {
                path: Checkpoint::path(&output_dir),
            })
        }
        (false, None) => (
            BTreeSet::new(),
            ShardWriter::new(&output_dir, setup.config.shard_size),
        ),
        (true, None) => {
            return Err(PipelineError::MissingCheckpoint {
                path: Checkpoint::path(&output_dir),
            })
        }
        (true, Some(checkpoint)) => {
            if checkpoint.manifest_hash != hash {
                return Err(PipelineError::ManifestHashMismatch {
                    expected: hash,
                    found: checkpoint.manifest_hash,
                });
            }
            let prior = DatasetManifest::load(&output_dir)?.unwrap_or_default();
            if prior.shards.len() as u64 != checkpoint.shard_index {
                return Err(PipelineError::ManifestInvalid(format!(
                    "dataset manifest lists {} shards but checkpoint expects {}",
                    prior.shards.len(),
                    checkpoint.shard_index
                )));
            }
            let writer = ShardWriter::resume(
                &output_dir,
                setup.config.shard_size,
                checkpoint.shard_index,
                prior.shards,
            );
            (checkpoint.completed_tile_ids, writer)
        }
    };

    let created_at = setup
        .config
        .fixed_created_at
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339());
    let annotator_prompt = {
        let mut values = std::collections::BTreeMap::new();
        values.insert("dimension_list", crate::prompts::dimension_list());
        setup.prompts.annotator.render(&values)
    };

    let mut summary = PipelineRunSummary {
        skipped: completed.len() as u64,
        config_hash: setup.config_hash.clone(),
        ..PipelineRunSummary::default()
    };

    let pending: Vec<&ImageTile> = manifest
        .iter()
        .filter(|tile| !completed.contains(&tile.tile_id))
        .collect();

    let mut results = futures::stream::iter(pending.into_iter().map(|tile| {
        process_tile(tile, setup, client, &annotator_prompt, &created_at)
    }))
    .buffered(setup.config.tile_concurrency);

    // Tile ids appended to the writer since the last flush; they move into
    // the durable completed set only when their shard hits disk.
    let mut unflushed_ids: Vec<String> = Vec::new();
    let mut flushes_this_run = 0u64;
    let mut interrupted = false;

    while let Some(outcome) = results.next().await {
        match outcome {
            TileOutcome::Failed { tile_id, reason } => {
                summary.failed += 1;
                summary.failed_tiles.push((tile_id, reason));
            }
            TileOutcome::Record(record) => {
                let line = serde_json::to_string(record.as_ref())
                    .expect("dataset record serializes");
                let tile_id = record.tile_id.clone();
                let flushed = writer.append(line)?;
                unflushed_ids.push(tile_id);
                summary.succeeded += 1;
                if let Some(info) = flushed {
                    completed.extend(unflushed_ids.drain(..));
                    writer.manifest_snapshot().save(&output_dir)?;
                    Checkpoint {
                        manifest_hash: hash.clone(),
                        completed_tile_ids: completed.clone(),
                        shard_index: writer.next_index(),
                        records_in_current_shard: 0,
                    }
                    .save(&output_dir)?;
                    tracing::info!(shard = %info.file, records = info.records, "shard flushed");
                    flushes_this_run += 1;
                    if options.stop_after_shards == Some(flushes_this_run) {
                        interrupted = true;
                        break;
                    }
                }
            }
        }
        if let Some(cancel) = &options.cancel {
            if *cancel.borrow() {
                tracing::info!("cancellation requested; stopping before next tile");
                interrupted = true;
                break;
            }
        }
    }
    drop(results);

    let dataset_manifest = if interrupted {
        // Buffered records are discarded; their tiles are not in the
        // completed set and will be reprocessed on resume, which is what
        // makes the resumed byte stream identical to an uninterrupted run.
        summary.succeeded = summary
            .succeeded
            .saturating_sub(unflushed_ids.len() as u64);
        summary.interrupted = true;
        // Persist the durable state even when the interrupt lands before
        // the first shard flush, so `--resume` always has a checkpoint.
        let snapshot = writer.manifest_snapshot();
        snapshot.save(&output_dir)?;
        Checkpoint {
            manifest_hash: hash,
            completed_tile_ids: completed,
            shard_index: snapshot.shards.len() as u64,
            records_in_current_shard: 0,
        }
        .save(&output_dir)?;
        snapshot
    } else {
        let manifest = writer.finalize()?;
        completed.extend(unflushed_ids.drain(..));
        manifest.save(&output_dir)?;
        Checkpoint {
            manifest_hash: hash,
            completed_tile_ids: completed,
            shard_index: manifest.shards.len() as u64,
            records_in_current_shard: 0,
        }
        .save(&output_dir)?;
        manifest
    };

    summary.shard_paths = dataset_manifest
        .shards
        .iter()
        .map(|shard| output_dir.join(&shard.file))
        .collect();
    Ok(summary)
}

/// Loads every record from a shard directory written by this pipeline.
pub fn load_dataset_records(dir: &Path) -> Result<Vec<DatasetRecord>, PipelineError> {
    let manifest = DatasetManifest::load(dir)?.ok_or_else(|| {
        PipelineError::ManifestInvalid(format!("{} has no dataset manifest", dir.display()))
    })?;
    let mut records = Vec::new();
    for shard in &manifest.shards {
        let path = dir.join(&shard.file);
        let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: DatasetRecord = serde_json::from_str(line).map_err(|err| {
                PipelineError::ManifestInvalid(format!(
                    "{} line {}: {err}",
                    path.display(),
                    idx + 1
                ))
            })?;
            records.push(record);
        }
    }
    Ok(records)
}
