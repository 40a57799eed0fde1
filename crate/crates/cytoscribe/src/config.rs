//! Pipeline configuration: TOML file loading, validation, prompt/lexicon
//! resolution, and the content hash recorded in every dataset record.

use crate::endpoints::EndpointConfig;
use crate::fusion::FusionPolicy;
use crate::prompts::{self, PromptTemplate};
use crate::schema::Lexicon;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
}

/// Optional per-role prompt template paths; unset roles use the built-in
/// defaults. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPaths {
    pub annotator: Option<PathBuf>,
    pub integrator: Option<PathBuf>,
    pub expert: Option<PathBuf>,
    pub domain_generator: Option<PathBuf>,
    pub general_generator: Option<PathBuf>,
    pub bench_morpho: Option<PathBuf>,
    pub bench_tbs: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Records per dataset shard.
    #[serde(default = "defaults::shard_size")]
    pub shard_size: usize,
    /// Tiles processed concurrently by the pipeline orchestrator.
    #[serde(default = "defaults::tile_concurrency")]
    pub tile_concurrency: usize,
    /// Lexicon file; unset uses the built-in phrase table.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// RFC 3339 timestamp stamped on every record instead of the wall
    /// clock. Set this to make dataset bytes reproducible across runs.
    #[serde(default)]
    pub fixed_created_at: Option<String>,
    #[serde(default)]
    pub fusion: FusionPolicy,
    #[serde(default)]
    pub prompts: PromptPaths,
    /// Stage-1 weak annotators.
    #[serde(default)]
    pub annotators: Vec<EndpointConfig>,
    /// Optional Stage-2 narrative integrator; without it the deterministic
    /// template narrative is used.
    #[serde(default)]
    pub integrator: Option<EndpointConfig>,
    /// Optional Stage-3 expert; without it fused output is final.
    #[serde(default)]
    pub expert: Option<EndpointConfig>,
    /// Replay QA generator.
    #[serde(default)]
    pub generator: Option<EndpointConfig>,
    /// Model under evaluation for the benchmark commands.
    #[serde(default)]
    pub model: Option<EndpointConfig>,
}

mod defaults {
    pub fn shard_size() -> usize {
        1000
    }
    pub fn tile_concurrency() -> usize {
        4
    }
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            shard_size: defaults::shard_size(),
            tile_concurrency: defaults::tile_concurrency(),
            lexicon: None,
            fixed_created_at: None,
            fusion: FusionPolicy::default(),
            prompts: PromptPaths::default(),
            annotators: Vec::new(),
            integrator: None,
            expert: None,
            generator: None,
            model: None,
        }
    }
}

/// All prompt templates resolved to text.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub annotator: PromptTemplate,
    pub integrator: PromptTemplate,
    pub expert: PromptTemplate,
    pub domain_generator: PromptTemplate,
    pub general_generator: PromptTemplate,
    pub bench_morpho: PromptTemplate,
    pub bench_tbs: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> PromptSet {
        PromptSet {
            annotator: prompts::default_annotator(),
            integrator: prompts::default_integrator(),
            expert: prompts::default_expert(),
            domain_generator: prompts::default_domain_generator(),
            general_generator: prompts::default_general_generator(),
            bench_morpho: prompts::default_bench_morpho(),
            bench_tbs: prompts::default_bench_tbs(),
        }
    }
}

/// A parsed, validated config with its lexicon and prompts loaded and the
/// content hash computed.
#[derive(Debug)]
pub struct PipelineSetup {
    pub config: PipelineConfig,
    pub lexicon: Lexicon,
    pub prompts: PromptSet,
    pub config_hash: String,
}

impl PipelineSetup {
    pub fn load(path: &Path) -> Result<PipelineSetup, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: PipelineConfig = toml::from_str(&text).map_err(|err| ConfigError::Parse {
            path: path.display().to_string(),
            message: err.to_string(),
        })?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        PipelineSetup::from_config(config, base_dir)
    }

    /// Builds a setup from an in-memory config; relative lexicon and prompt
    /// paths resolve against `base_dir`.
    pub fn from_config(config: PipelineConfig, base_dir: &Path) -> Result<PipelineSetup, ConfigError> {
        validate(&config)?;

        let resolve = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                base_dir.join(p)
            }
        };

        let lexicon = match &config.lexicon {
            Some(path) => Lexicon::load(&resolve(path))?,
            None => Lexicon::default(),
        };

        let load_prompt = |path: &Option<PathBuf>, default: PromptTemplate| match path {
            Some(p) => PromptTemplate::load(&resolve(p)),
            None => Ok(default),
        };
        let prompt_defaults = PromptSet::default();
        let prompts = PromptSet {
            annotator: load_prompt(&config.prompts.annotator, prompt_defaults.annotator)?,
            integrator: load_prompt(&config.prompts.integrator, prompt_defaults.integrator)?,
            expert: load_prompt(&config.prompts.expert, prompt_defaults.expert)?,
            domain_generator: load_prompt(
                &config.prompts.domain_generator,
                prompt_defaults.domain_generator,
            )?,
            general_generator: load_prompt(
                &config.prompts.general_generator,
                prompt_defaults.general_generator,
            )?,
            bench_morpho: load_prompt(&config.prompts.bench_morpho, prompt_defaults.bench_morpho)?,
            bench_tbs: load_prompt(&config.prompts.bench_tbs, prompt_defaults.bench_tbs)?,
        };

        prompts.annotator.check_placeholders(&["dimension_list"])?;
        prompts
            .integrator
            .check_placeholders(&["consensus_table", "narratives"])?;
        prompts
            .expert
            .check_placeholders(&["missing_dimensions", "fused_narrative"])?;
        prompts.domain_generator.check_placeholders(&["narrative"])?;
        prompts.general_generator.check_placeholders(&[])?;
        prompts.bench_morpho.check_placeholders(&[
            "dimension_code",
            "dimension_name",
            "positive_label",
            "negative_label",
        ])?;
        prompts.bench_tbs.check_placeholders(&["category_list"])?;

        let config_hash = config_hash(&config, &lexicon, &prompts);
        Ok(PipelineSetup {
            config,
            lexicon,
            prompts,
            config_hash,
        })
    }
}

fn validate(config: &PipelineConfig) -> Result<(), ConfigError> {
    if config.shard_size < 1 {
        return Err(ConfigError::Invalid("shard_size must be >= 1".into()));
    }
    if config.tile_concurrency < 1 {
        return Err(ConfigError::Invalid("tile_concurrency must be >= 1".into()));
    }
    if let Some(ts) = &config.fixed_created_at {
        chrono::DateTime::parse_from_rfc3339(ts).map_err(|err| {
            ConfigError::Invalid(format!("fixed_created_at is not RFC 3339: {err}"))
        })?;
    }
    config
        .fusion
        .validate()
        .map_err(|err| ConfigError::Invalid(err.to_string()))?;

    let mut seen_ids = std::collections::BTreeSet::new();
    for endpoint in all_endpoints(config) {
        endpoint
            .validate()
            .map_err(|err| ConfigError::Invalid(err.to_string()))?;
        if !seen_ids.insert(endpoint.id.clone()) {
            return Err(ConfigError::Invalid(format!(
                "endpoint id `{}` is not unique",
                endpoint.id
            )));
        }
    }
    Ok(())
}

fn all_endpoints(config: &PipelineConfig) -> impl Iterator<Item = &EndpointConfig> {
    config
        .annotators
        .iter()
        .chain(&config.integrator)
        .chain(&config.expert)
        .chain(&config.generator)
        .chain(&config.model)
}

/// Content hash over the parts of the config that shape dataset records:
/// prompt templates, lexicon, fusion policy, and endpoint model names.
/// Identical configuration yields an identical hash regardless of where
/// files live on disk.
fn config_hash(config: &PipelineConfig, lexicon: &Lexicon, prompts: &PromptSet) -> String {
    fn section(hasher: &mut Sha256, tag: &str, content: &str) {
        hasher.update((content.len() as u64).to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update(content.as_bytes());
    }

    let mut hasher = Sha256::new();
    section(&mut hasher, "prompt.annotator", prompts.annotator.text());
    section(&mut hasher, "prompt.integrator", prompts.integrator.text());
    section(&mut hasher, "prompt.expert", prompts.expert.text());
    section(
        &mut hasher,
        "prompt.domain_generator",
        prompts.domain_generator.text(),
    );
    section(
        &mut hasher,
        "prompt.general_generator",
        prompts.general_generator.text(),
    );
    section(&mut hasher, "prompt.bench_morpho", prompts.bench_morpho.text());
    section(&mut hasher, "prompt.bench_tbs", prompts.bench_tbs.text());
    section(&mut hasher, "lexicon", &lexicon.to_file_string());
    section(
        &mut hasher,
        "policy",
        &serde_json::to_string(&config.fusion).expect("policy serializes"),
    );
    let annotator_models: Vec<&str> = config
        .annotators
        .iter()
        .map(|e| e.model_name.as_str())
        .collect();
    section(&mut hasher, "models.annotators", &annotator_models.join("\n"));
    let role_model = |e: &Option<EndpointConfig>| {
        e.as_ref().map(|e| e.model_name.clone()).unwrap_or_default()
    };
    section(&mut hasher, "models.integrator", &role_model(&config.integrator));
    section(&mut hasher, "models.expert", &role_model(&config.expert));
    section(&mut hasher, "models.generator", &role_model(&config.generator));
    section(&mut hasher, "models.model", &role_model(&config.model));

    hex::encode(hasher.finalize())
}
