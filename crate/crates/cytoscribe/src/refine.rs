//! Expert-model injection of assertions for the dimensions the ensemble
//! could not settle, and final description assembly.
//!
//! The expert strictly supplements: consensus assertions are never
//! overwritten, only dimensions from the fused missing set are adopted.
//! When the expert contradicts consensus the contradiction is recorded as
//! a warning and otherwise ignored.

use crate::endpoints::{ChatClient, ChatRequest, EndpointConfig, EndpointError};
use crate::fusion::FusedDescription;
use crate::prompts::PromptTemplate;
use crate::schema::{
    parse_structured_caption, DimensionAssertion, Lexicon, MorphDimension, StructuredCaption,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Origin of one final assertion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Consensus,
    Expert,
}

/// Stage-3 output: the union of consensus and expert-supplied assertions
/// with per-dimension provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalDescription {
    pub assertions: BTreeMap<MorphDimension, DimensionAssertion>,
    pub narrative: String,
    pub provenance: BTreeMap<MorphDimension, Provenance>,
    pub expert_endpoint_id: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FinalDescription {
    /// The no-expert result: fused content verbatim, everything tagged
    /// Consensus.
    pub fn from_consensus(fused: &FusedDescription) -> FinalDescription {
        FinalDescription {
            assertions: fused.consensus.clone(),
            narrative: fused.narrative.clone(),
            provenance: fused
                .consensus
                .keys()
                .map(|dim| (*dim, Provenance::Consensus))
                .collect(),
            expert_endpoint_id: None,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
}

/// Pure merge of a parsed expert reply into the fused description.
///
/// Adopted assertions are exactly those whose dimension is in the fused
/// missing set; they are tagged Expert. Expert assertions on consensus
/// dimensions are discarded (a contradicting verdict is additionally
/// recorded as a warning). The expert paragraph is appended to the
/// narrative only when at least one assertion was adopted; a reply that
/// fills nothing leaves the description consensus-only with a warning.
pub fn merge_expert_reply(
    fused: &FusedDescription,
    reply: &StructuredCaption,
    expert_endpoint_id: &str,
) -> FinalDescription {
    let mut result = FinalDescription::from_consensus(fused);
    result.expert_endpoint_id = Some(expert_endpoint_id.to_string());

    let mut adopted = 0usize;
    for (dimension, assertion) in &reply.assertions {
        if let Some(consensus) = fused.consensus.get(dimension) {
            if consensus.verdict != assertion.verdict {
                result.warnings.push(format!(
                    "expert contradicted consensus on {} ({} vs {}); consensus kept",
                    dimension.code(),
                    assertion.verdict,
                    consensus.verdict
                ));
            }
            continue;
        }
        if fused.missing_dimensions.contains(dimension) {
            result.assertions.insert(*dimension, assertion.clone());
            result.provenance.insert(*dimension, Provenance::Expert);
            adopted += 1;
        }
    }

    let unfilled: Vec<&str> = fused
        .missing_dimensions
        .iter()
        .filter(|dim| !result.assertions.contains_key(dim))
        .map(|dim| dim.code())
        .collect();
    if !unfilled.is_empty() {
        result.warnings.push(format!(
            "expert left dimensions unfilled: {}",
            unfilled.join(", ")
        ));
    }

    if adopted > 0 && !reply.narrative.trim().is_empty() {
        if result.narrative.is_empty() {
            result.narrative = reply.narrative.clone();
        } else {
            result.narrative = format!("{}\n\n{}", result.narrative, reply.narrative);
        }
    }

    result
}

/// Bullet list of the unsettled dimensions for the expert prompt.
pub fn missing_dimension_list(fused: &FusedDescription) -> String {
    fused
        .missing_dimensions
        .iter()
        .map(|dim| {
            format!(
                "- {} ({}): {} or {}",
                dim.code(),
                dim.display_name(),
                dim.positive_label(),
                dim.negative_label()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Stage 3: asks the expert endpoint about the missing dimensions and
/// merges its parsed reply. With nothing missing the call is skipped
/// entirely (zero network traffic) and the fused content is returned
/// verbatim.
pub async fn refine_expert(
    tile_image: &[u8],
    media_type: &str,
    fused: &FusedDescription,
    expert: &EndpointConfig,
    client: &ChatClient,
    lexicon: &Lexicon,
    template: &PromptTemplate,
) -> Result<FinalDescription, RefineError> {
    if fused.missing_dimensions.is_empty() {
        return Ok(FinalDescription::from_consensus(fused));
    }

    let mut values = BTreeMap::new();
    values.insert("missing_dimensions", missing_dimension_list(fused));
    values.insert("fused_narrative", fused.narrative.clone());
    let prompt = template.render(&values);

    let request =
        ChatRequest::new(expert).user_text_image(prompt, tile_image.to_vec(), media_type);
    let response = client.send_chat(expert, request).await?;

    // An empty or unmatchable reply is not a fault: it merges as zero
    // assertions and surfaces through the unfilled-dimensions warning.
    let reply = parse_structured_caption(&response.text, lexicon).unwrap_or_else(|_| {
        StructuredCaption {
            assertions: BTreeMap::new(),
            narrative: response.text.clone(),
        }
    });

    Ok(merge_expert_reply(fused, &reply, &expert.id))
}
