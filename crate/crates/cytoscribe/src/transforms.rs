//! Training-data transforms: reformatting dataset records into
//! instruction-following dialogues, and generating/mixing knowledge-replay
//! streams.
//!
//! All three operations are deterministic given (inputs, seed, endpoint
//! replies). Reformatting and mixing run single-threaded — they are cheap
//! next to the network stages — while replay generation fans out per item
//! under the endpoints module's concurrency contract.

use crate::endpoints::{ChatClient, ChatRequest, EndpointConfig};
use crate::pipeline::{DatasetRecord, ImageTile};
use crate::prompts::PromptTemplate;
use crate::schema::MorphDimension;
use futures::StreamExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// sample model

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    VisionText,
    TextOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOrigin {
    Reformatted,
    DomainReplay,
    GeneralReplay,
}

/// One chat-transcript training sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub sample_id: String,
    pub modality: Modality,
    /// Tile carrying the image for vision samples; text-only samples have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub turns: Vec<Turn>,
    pub template_id: String,
    pub origin: SampleOrigin,
}

impl InstructionSample {
    /// Checks the structural invariants every emitted sample must satisfy:
    /// at most one leading System turn, strict User/Assistant alternation
    /// starting with User, at least one Assistant turn, and the
    /// modality/image-ref coupling.
    pub fn validate(&self) -> Result<(), TransformError> {
        let invalid = |reason: &str| {
            Err(TransformError::SampleInvalid {
                sample_id: self.sample_id.clone(),
                reason: reason.to_string(),
            })
        };
        let mut turns = self.turns.as_slice();
        if let Some((first, rest)) = turns.split_first() {
            if first.role == Role::System {
                turns = rest;
            }
        }
        if turns.iter().any(|t| t.role == Role::System) {
            return invalid("System is only allowed as the first turn");
        }
        let mut expected = Role::User;
        for turn in turns {
            if turn.role != expected {
                return invalid("turns must alternate User/Assistant starting with User");
            }
            expected = match expected {
                Role::User => Role::Assistant,
                _ => Role::User,
            };
        }
        if !turns.iter().any(|t| t.role == Role::Assistant) {
            return invalid("at least one Assistant turn is required");
        }
        match (self.modality, &self.image_ref) {
            (Modality::VisionText, None) => invalid("vision samples must carry an image-ref"),
            (Modality::TextOnly, Some(_)) => invalid("text-only samples must not carry an image-ref"),
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// dialogue templates

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnTemplate {
    pub role: Role,
    pub text: String,
}

/// A dialogue skeleton whose turn texts may contain placeholders:
///
/// - `{narrative}` — the record's final narrative
/// - `{assertions}` — all asserted dimensions rendered as canonical sentences
/// - `{tile_id}` — the record's tile id
/// - `{focus_dimension}` / `{focus_assertion}` — name and canonical sentence
///   of one asserted dimension, drawn per record
/// - `{assertion:CODE}` / `{dimension:CODE}` — a specific dimension's
///   canonical sentence / display name
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueTemplate {
    pub template_id: String,
    pub turns: Vec<TurnTemplate>,
    pub multi_turn: bool,
}

impl DialogueTemplate {
    pub fn validate(&self) -> Result<(), TransformError> {
        let invalid = |reason: String| {
            Err(TransformError::TemplateInvalid {
                template_id: self.template_id.clone(),
                reason,
            })
        };
        if self.template_id.trim().is_empty() {
            return Err(TransformError::TemplateInvalid {
                template_id: "<unnamed>".into(),
                reason: "empty template id".into(),
            });
        }
        // The skeleton must already be a well-formed dialogue ending on an
        // Assistant turn; placeholder filling never changes turn structure.
        let mut turns = self.turns.as_slice();
        if let Some((first, rest)) = turns.split_first() {
            if first.role == Role::System {
                turns = rest;
            }
        }
        if turns.iter().any(|t| t.role == Role::System) {
            return invalid("System is only allowed as the first turn".into());
        }
        let mut expected = Role::User;
        for turn in turns {
            if turn.role != expected {
                return invalid("turns must alternate User/Assistant starting with User".into());
            }
            expected = match expected {
                Role::User => Role::Assistant,
                _ => Role::User,
            };
        }
        let exchanges = turns.iter().filter(|t| t.role == Role::Assistant).count();
        if exchanges == 0 || turns.last().map(|t| t.role) != Some(Role::Assistant) {
            return invalid("template must end with an Assistant turn".into());
        }
        if self.multi_turn != (exchanges >= 2) {
            return invalid(format!(
                "multi_turn={} but template has {exchanges} exchange(s)",
                self.multi_turn
            ));
        }
        for name in self.placeholders() {
            match name.as_str() {
                "narrative" | "assertions" | "tile_id" | "focus_dimension"
                | "focus_assertion" => {}
                _ => {
                    let known_code = name
                        .strip_prefix("assertion:")
                        .or_else(|| name.strip_prefix("dimension:"))
                        .is_some_and(|code| MorphDimension::from_code(code).is_some());
                    if !known_code {
                        return invalid(format!("unknown placeholder `{{{name}}}`"));
                    }
                }
            }
        }
        Ok(())
    }

    fn placeholders(&self) -> Vec<String> {
        let mut names = Vec::new();
        for turn in &self.turns {
            for name in PromptTemplate::new(turn.text.clone()).placeholders() {
                if !names.contains(&name) {
                    names.push(name);
                }
            }
        }
        names
    }

    /// Whether every placeholder can be filled from this record.
    fn resolvable_for(&self, record: &DatasetRecord) -> bool {
        let assertions = &record.final_description.assertions;
        self.placeholders().iter().all(|name| match name.as_str() {
            "narrative" | "tile_id" => true,
            "assertions" | "focus_dimension" | "focus_assertion" => !assertions.is_empty(),
            _ => match name.strip_prefix("assertion:") {
                Some(code) => MorphDimension::from_code(code)
                    .is_some_and(|dim| assertions.contains_key(&dim)),
                // dimension:CODE is a static name lookup.
                None => true,
            },
        })
    }

    fn uses_focus(&self) -> bool {
        self.placeholders()
            .iter()
            .any(|name| name == "focus_dimension" || name == "focus_assertion")
    }
}

/// Loads dialogue templates from a line-delimited JSON file and validates
/// each one.
pub fn load_templates(path: &Path) -> Result<Vec<DialogueTemplate>, TransformError> {
    let text = std::fs::read_to_string(path).map_err(|source| TransformError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut templates = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let template: DialogueTemplate =
            serde_json::from_str(line).map_err(|err| TransformError::TemplateInvalid {
                template_id: format!("{} line {}", path.display(), idx + 1),
                reason: err.to_string(),
            })?;
        template.validate()?;
        templates.push(template);
    }
    if templates.is_empty() {
        return Err(TransformError::NoTemplates);
    }
    Ok(templates)
}

/// The built-in template set: two single-turn shapes and one two-exchange
/// multi-turn shape.
pub fn default_templates() -> Vec<DialogueTemplate> {
    let system = "You are an expert cytopathology assistant.";
    let templates = vec![
        DialogueTemplate {
            template_id: "describe".into(),
            multi_turn: false,
            turns: vec![
                TurnTemplate {
                    role: Role::System,
                    text: system.into(),
                },
                TurnTemplate {
                    role: Role::User,
                    text: "Describe the morphological findings in this cervical cytology image."
                        .into(),
                },
                TurnTemplate {
                    role: Role::Assistant,
                    text: "{narrative}".into(),
                },
            ],
        },
        DialogueTemplate {
            template_id: "findings".into(),
            multi_turn: false,
            turns: vec![
                TurnTemplate {
                    role: Role::System,
                    text: system.into(),
                },
                TurnTemplate {
                    role: Role::User,
                    text: "List the key nuclear and cellular features visible in this image."
                        .into(),
                },
                TurnTemplate {
                    role: Role::Assistant,
                    text: "{assertions}".into(),
                },
            ],
        },
        DialogueTemplate {
            template_id: "describe-then-focus".into(),
            multi_turn: true,
            turns: vec![
                TurnTemplate {
                    role: Role::System,
                    text: system.into(),
                },
                TurnTemplate {
                    role: Role::User,
                    text: "Describe the morphological findings in this cervical cytology image."
                        .into(),
                },
                TurnTemplate {
                    role: Role::Assistant,
                    text: "{narrative}".into(),
                },
                TurnTemplate {
                    role: Role::User,
                    text: "Focus on {focus_dimension}. What do you observe?".into(),
                },
                TurnTemplate {
                    role: Role::Assistant,
                    text: "{focus_assertion}".into(),
                },
            ],
        },
    ];
    debug_assert!(templates.iter().all(|t| t.validate().is_ok()));
    templates
}

// ---------------------------------------------------------------------------
// reformatting

#[derive(Clone, Debug, Default, Serialize)]
pub struct ReformatSummary {
    pub samples_emitted: u64,
    pub records_skipped: u64,
    pub warnings: Vec<String>,
}

/// Pairs each record with one template chosen by a seeded draw among the
/// templates whose placeholders the record can fill, and renders it.
///
/// Output order is record order; `sample_id` is `{tile_id}-{template_id}`.
/// A record no template can serve is skipped with a warning and consumes no
/// randomness, so it does not perturb the draws of later records.
pub fn reformat_instructions(
    records: &[DatasetRecord],
    templates: &[DialogueTemplate],
    seed: u64,
) -> Result<(Vec<InstructionSample>, ReformatSummary), TransformError> {
    if templates.is_empty() {
        return Err(TransformError::NoTemplates);
    }
    for template in templates {
        template.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut summary = ReformatSummary::default();

    for record in records {
        let eligible: Vec<&DialogueTemplate> = templates
            .iter()
            .filter(|t| t.resolvable_for(record))
            .collect();
        if eligible.is_empty() {
            let warning = format!(
                "record `{}` skipped: no template is resolvable from its assertions",
                record.tile_id
            );
            tracing::warn!("{warning}");
            summary.warnings.push(warning);
            summary.records_skipped += 1;
            continue;
        }
        let template = eligible[rng.random_range(0..eligible.len())];

        let assertions = &record.final_description.assertions;
        let mut values: BTreeMap<&str, String> = BTreeMap::new();
        values.insert("narrative", record.final_description.narrative.clone());
        values.insert("tile_id", record.tile_id.clone());
        values.insert(
            "assertions",
            assertions
                .iter()
                .map(|(dim, a)| dim.canonical_sentence(a.verdict).to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        let mut keyed: Vec<(String, String)> = Vec::new();
        for dim in MorphDimension::ALL {
            keyed.push((format!("dimension:{}", dim.code()), dim.display_name().into()));
        }
        for (dim, assertion) in assertions {
            keyed.push((
                format!("assertion:{}", dim.code()),
                dim.canonical_sentence(assertion.verdict).into(),
            ));
        }
        if template.uses_focus() {
            let asserted: Vec<&MorphDimension> = assertions.keys().collect();
            let focus = *asserted[rng.random_range(0..asserted.len())];
            values.insert("focus_dimension", focus.display_name().into());
            values.insert(
                "focus_assertion",
                focus.canonical_sentence(assertions[&focus].verdict).into(),
            );
        }
        for (key, value) in &keyed {
            values.insert(key.as_str(), value.clone());
        }

        let sample = InstructionSample {
            sample_id: format!("{}-{}", record.tile_id, template.template_id),
            modality: Modality::VisionText,
            image_ref: Some(record.tile_id.clone()),
            turns: template
                .turns
                .iter()
                .map(|turn| Turn {
                    role: turn.role,
                    text: PromptTemplate::new(turn.text.clone()).render(&values),
                })
                .collect(),
            template_id: template.template_id.clone(),
            origin: SampleOrigin::Reformatted,
        };
        debug_assert!(sample.validate().is_ok());
        samples.push(sample);
        summary.samples_emitted += 1;
    }
    Ok((samples, summary))
}

// ---------------------------------------------------------------------------
// replay generation

/// Input to replay generation: finished dataset records (text-only QA) or a
/// general-domain image manifest (VQA).
pub enum ReplaySource<'a> {
    Domain(&'a [DatasetRecord]),
    General(&'a [ImageTile]),
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ReplaySummary {
    pub items_processed: u64,
    pub items_skipped: u64,
    pub samples_emitted: u64,
}

/// Splits a generator reply into (question, answer) pairs using the
/// `Q:`/`A:` line convention the generator prompts ask for. Continuation
/// lines attach to the open section; pairs missing either side are dropped.
pub fn parse_qa_pairs(text: &str) -> Vec<(String, String)> {
    enum Section {
        None,
        Question,
        Answer,
    }
    let mut pairs = Vec::new();
    let mut question = String::new();
    let mut answer = String::new();
    let mut open = Section::None;

    let mut flush = |question: &mut String, answer: &mut String| {
        if !question.trim().is_empty() && !answer.trim().is_empty() {
            pairs.push((question.trim().to_string(), answer.trim().to_string()));
        }
        question.clear();
        answer.clear();
    };

    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("Q:") {
            flush(&mut question, &mut answer);
            question = rest.trim().to_string();
            open = Section::Question;
        } else if let Some(rest) = trimmed.strip_prefix("A:") {
            answer = rest.trim().to_string();
            open = Section::Answer;
        } else {
            let target = match open {
                Section::Question => &mut question,
                Section::Answer => &mut answer,
                Section::None => continue,
            };
            if !trimmed.trim().is_empty() {
                if !target.is_empty() {
                    target.push(' ');
                }
                target.push_str(trimmed.trim());
            }
        }
    }
    flush(&mut question, &mut answer);
    pairs
}

/// Prompts the generator endpoint once per source item and turns each
/// parsed QA pair into an instruction sample tagged with its origin.
/// Endpoint failures and unparseable replies skip the item and are counted;
/// they never abort the batch. Items run concurrently up to the endpoint's
/// `max_in_flight`, and output order follows input order.
pub async fn generate_replay(
    source: ReplaySource<'_>,
    generator: &EndpointConfig,
    client: &ChatClient,
    domain_prompt: &PromptTemplate,
    general_prompt: &PromptTemplate,
) -> Result<(Vec<InstructionSample>, ReplaySummary), TransformError> {
    struct Item {
        id: String,
        result: Result<String, String>,
    }

    let replies: Vec<Item> = match source {
        ReplaySource::Domain(records) => {
            let queries = records.iter().map(|record| {
                let mut values = BTreeMap::new();
                values.insert("narrative", record.final_description.narrative.clone());
                let prompt = domain_prompt.render(&values);
                async move {
                    let request = ChatRequest::new(generator).user_text(prompt);
                    Item {
                        id: record.tile_id.clone(),
                        result: client
                            .send_chat(generator, request)
                            .await
                            .map(|r| r.text)
                            .map_err(|e| e.to_string()),
                    }
                }
            });
            futures::stream::iter(queries)
                .buffered(generator.max_in_flight)
                .collect()
                .await
        }
        ReplaySource::General(tiles) => {
            let prompt = general_prompt.render(&BTreeMap::new());
            let queries = tiles.iter().map(|tile| {
                let prompt = prompt.clone();
                async move {
                    let result = match crate::pipeline::fetch_uri_bytes(client, &tile.uri).await {
                        Ok(bytes) => {
                            let request = ChatRequest::new(generator).user_text_image(
                                prompt,
                                bytes,
                                tile.media_type.clone(),
                            );
                            client
                                .send_chat(generator, request)
                                .await
                                .map(|r| r.text)
                                .map_err(|e| e.to_string())
                        }
                        Err(err) => Err(err),
                    };
                    Item {
                        id: tile.tile_id.clone(),
                        result,
                    }
                }
            });
            futures::stream::iter(queries)
                .buffered(generator.max_in_flight)
                .collect()
                .await
        }
    };

    let (origin, modality, template_id) = match source {
        ReplaySource::Domain(_) => (SampleOrigin::DomainReplay, Modality::TextOnly, "replay-domain"),
        ReplaySource::General(_) => (
            SampleOrigin::GeneralReplay,
            Modality::VisionText,
            "replay-general",
        ),
    };

    let mut samples = Vec::new();
    let mut summary = ReplaySummary::default();
    for item in replies {
        summary.items_processed += 1;
        let text = match item.result {
            Ok(text) => text,
            Err(err) => {
                tracing::warn!(item = %item.id, error = %err, "replay generation failed");
                summary.items_skipped += 1;
                continue;
            }
        };
        let pairs = parse_qa_pairs(&text);
        if pairs.is_empty() {
            tracing::warn!(item = %item.id, "generator reply had no Q:/A: pairs");
            summary.items_skipped += 1;
            continue;
        }
        for (j, (question, answer)) in pairs.into_iter().enumerate() {
            let sample = InstructionSample {
                sample_id: format!("{}-replay-{j}", item.id),
                modality,
                image_ref: match modality {
                    Modality::VisionText => Some(item.id.clone()),
                    Modality::TextOnly => None,
                },
                turns: vec![
                    Turn {
                        role: Role::User,
                        text: question,
                    },
                    Turn {
                        role: Role::Assistant,
                        text: answer,
                    },
                ],
                template_id: template_id.to_string(),
                origin,
            };
            debug_assert!(sample.validate().is_ok());
            samples.push(sample);
            summary.samples_emitted += 1;
        }
    }
    Ok((samples, summary))
}

// ---------------------------------------------------------------------------
// mixing

/// Interleaves streams by seeded weighted sampling: each draw picks a
/// stream with probability proportional to its weight and takes that
/// stream's next sample, so within-stream order is preserved and every
/// input sample appears exactly once. Zero-weight streams drain last, in
/// listed order.
pub fn mix_replay(
    streams: Vec<(Vec<InstructionSample>, f64)>,
    seed: u64,
) -> Result<Vec<InstructionSample>, TransformError> {
    for (idx, (_, weight)) in streams.iter().enumerate() {
        if !weight.is_finite() || *weight < 0.0 {
            return Err(TransformError::InvalidWeights(format!(
                "stream {idx} has weight {weight}; weights must be finite and non-negative"
            )));
        }
    }
    if streams.iter().all(|(samples, _)| samples.is_empty()) {
        return Err(TransformError::AllStreamsEmpty);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = streams.iter().map(|(s, _)| s.len()).sum();
    let mut queues: Vec<(std::collections::VecDeque<InstructionSample>, f64)> = streams
        .into_iter()
        .map(|(samples, weight)| (samples.into(), weight))
        .collect();

    let mut output = Vec::with_capacity(total);
    loop {
        let total_weight: f64 = queues
            .iter()
            .filter(|(queue, weight)| !queue.is_empty() && *weight > 0.0)
            .map(|(_, weight)| *weight)
            .sum();
        if total_weight <= 0.0 {
            break;
        }
        let mut draw = rng.random_range(0.0..total_weight);
        for (queue, weight) in &mut queues {
            if queue.is_empty() || *weight <= 0.0 {
                continue;
            }
            if draw < *weight {
                output.push(queue.pop_front().expect("non-empty queue"));
                break;
            }
            draw -= *weight;
        }
    }
    for (queue, _) in &mut queues {
        output.extend(queue.drain(..));
    }
    debug_assert_eq!(output.len(), total);
    Ok(output)
}

// ---------------------------------------------------------------------------
// serialization helpers

/// Renders samples as line-delimited JSON chat transcripts.
pub fn samples_to_jsonl(samples: &[InstructionSample]) -> String {
    let mut out = String::new();
    for sample in samples {
        out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
        out.push('\n');
    }
    out
}

/// Loads samples back from line-delimited JSON.
pub fn load_samples(path: &Path) -> Result<Vec<InstructionSample>, TransformError> {
    let text = std::fs::read_to_string(path).map_err(|source| TransformError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: InstructionSample =
            serde_json::from_str(line).map_err(|err| TransformError::SampleInvalid {
                sample_id: format!("{} line {}", path.display(), idx + 1),
                reason: err.to_string(),
            })?;
        samples.push(sample);
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// errors

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("no dialogue templates provided")]
    NoTemplates,
    #[error("template `{template_id}` invalid: {reason}")]
    TemplateInvalid { template_id: String, reason: String },
    #[error("sample `{sample_id}` invalid: {reason}")]
    SampleInvalid { sample_id: String, reason: String },
    #[error("invalid mix weights: {0}")]
    InvalidWeights(String),
    #[error("all replay streams are empty")]
    AllStreamsEmpty,
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
