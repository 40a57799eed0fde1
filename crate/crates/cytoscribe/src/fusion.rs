//! Consensus extraction over parsed annotator captions, conflict
//! resolution, missing-dimension filtering, and narrative synthesis.
//!
//! Consensus and conflict logic is a deterministic structured vote so it
//! can be tested and audited; a model endpoint (the integrator) is only
//! ever responsible for prose fluency, never for which findings survive.

use crate::endpoints::{ChatClient, ChatRequest, EndpointConfig, EndpointError};
use crate::prompts::PromptTemplate;
use crate::schema::{DimensionAssertion, MorphDimension, StructuredCaption, Verdict};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Vote policy for consensus extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionPolicy {
    /// Votes the winning verdict must reach. `None` means strict majority
    /// of the annotators that addressed the dimension.
    pub min_votes_for_consensus: Option<u32>,
    /// Annotators that must address a dimension for it to be fusable.
    pub min_coverage: u32,
    /// When true, votes are summed assertion confidences instead of counts.
    pub confidence_weighting: bool,
}

impl Default for FusionPolicy {
    fn default() -> FusionPolicy {
        FusionPolicy {
            min_votes_for_consensus: None,
            min_coverage: 2,
            confidence_weighting: false,
        }
    }
}

impl FusionPolicy {
    /// Single-annotator identity policy: one vote decides.
    pub fn passthrough() -> FusionPolicy {
        FusionPolicy {
            min_votes_for_consensus: Some(1),
            min_coverage: 1,
            confidence_weighting: false,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.min_coverage < 1 {
            return Err(FusionError::InvalidPolicy(
                "min_coverage must be >= 1".into(),
            ));
        }
        if let Some(votes) = self.min_votes_for_consensus {
            // An explicit threshold may not be weaker than a majority at
            // minimum coverage, or split votes could reach consensus.
            let floor = (self.min_coverage + 1).div_ceil(2);
            if votes < floor {
                return Err(FusionError::InvalidPolicy(format!(
                    "min_votes_for_consensus {votes} is below the majority floor {floor} \
                     for min_coverage {}",
                    self.min_coverage
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Consensus,
    Dropped,
}

/// One annotator's vote as recorded in the conflict log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub endpoint_id: String,
    pub verdict: Verdict,
    pub confidence: f64,
}

/// Log entry for a dimension whose votes were split, whether the split was
/// outvoted (Consensus) or unresolvable (Dropped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictEntry {
    pub dimension: MorphDimension,
    pub votes: Vec<VoteRecord>,
    pub resolution: Resolution,
}

/// Stage-2 output: settled assertions, the dimensions the ensemble could
/// not settle, and the audit trail of conflicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedDescription {
    pub consensus: BTreeMap<MorphDimension, DimensionAssertion>,
    pub missing_dimensions: BTreeSet<MorphDimension>,
    pub conflict_log: Vec<ConflictEntry>,
    pub narrative: String,
    pub source_annotators: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("no captions to fuse")]
    EmptyInput,
    #[error("invalid fusion policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
}

/// Extracts per-dimension consensus from annotator captions.
///
/// For each of the nine dimensions: the annotators asserting it cast votes
/// (one each, or their confidences when the policy weights votes). The
/// winning verdict enters consensus when the dimension was addressed by at
/// least `min_coverage` annotators and the winner reaches the vote
/// threshold; otherwise the dimension is missing. Split votes are logged
/// either way. Consensus confidence is winning votes over votes cast; it is
/// a vote fraction, not a calibrated probability.
///
/// Output is invariant under permutation of the input list: per-dimension
/// iteration and evidence concatenation order by ascending endpoint id.
pub fn fuse_consensus(
    captions: &[(String, StructuredCaption)],
    policy: &FusionPolicy,
) -> Result<FusedDescription, FusionError> {
    if captions.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    policy.validate()?;

    let mut ordered: Vec<&(String, StructuredCaption)> = captions.iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));

    let mut consensus = BTreeMap::new();
    let mut missing_dimensions = BTreeSet::new();
    let mut conflict_log = Vec::new();

    for dimension in MorphDimension::ALL {
        let voters: Vec<(&str, &DimensionAssertion)> = ordered
            .iter()
            .filter_map(|(id, caption)| {
                caption
                    .assertions
                    .get(&dimension)
                    .map(|assertion| (id.as_str(), assertion))
            })
            .collect();
        if voters.is_empty() {
            missing_dimensions.insert(dimension);
            continue;
        }

        let weight_of = |assertion: &DimensionAssertion| {
            if policy.confidence_weighting {
                assertion.confidence
            } else {
                1.0
            }
        };
        let positive_mass: f64 = voters
            .iter()
            .filter(|(_, a)| a.verdict == Verdict::Positive)
            .map(|(_, a)| weight_of(a))
            .sum();
        let negative_mass: f64 = voters
            .iter()
            .filter(|(_, a)| a.verdict == Verdict::Negative)
            .map(|(_, a)| weight_of(a))
            .sum();
        let total_mass = positive_mass + negative_mass;
        let split = voters.iter().any(|(_, a)| a.verdict == Verdict::Positive)
            && voters.iter().any(|(_, a)| a.verdict == Verdict::Negative);

        let winner = if positive_mass > negative_mass {
            Some((Verdict::Positive, positive_mass))
        } else if negative_mass > positive_mass {
            Some((Verdict::Negative, negative_mass))
        } else {
            None
        };

        let coverage_met = voters.len() as u32 >= policy.min_coverage;
        let settled = match winner {
            Some((verdict, winning_mass)) if coverage_met => {
                let threshold_met = match policy.min_votes_for_consensus {
                    Some(votes) => winning_mass >= f64::from(votes),
                    None => winning_mass * 2.0 > total_mass,
                };
                threshold_met.then_some((verdict, winning_mass))
            }
            _ => None,
        };

        if split {
            conflict_log.push(ConflictEntry {
                dimension,
                votes: voters
                    .iter()
                    .map(|(id, a)| VoteRecord {
                        endpoint_id: (*id).to_string(),
                        verdict: a.verdict,
                        confidence: a.confidence,
                    })
                    .collect(),
                resolution: if settled.is_some() {
                    Resolution::Consensus
                } else {
                    Resolution::Dropped
                },
            });
        }

        match settled {
            Some((verdict, winning_mass)) => {
                let evidence = voters
                    .iter()
                    .filter(|(_, a)| a.verdict == verdict && !a.evidence.is_empty())
                    .map(|(_, a)| a.evidence.as_str())
                    .collect::<Vec<_>>()
                    .join("; ");
                consensus.insert(
                    dimension,
                    DimensionAssertion {
                        dimension,
                        verdict,
                        confidence: winning_mass / total_mass,
                        evidence,
                    },
                );
            }
            None => {
                missing_dimensions.insert(dimension);
            }
        }
    }

    let mut source_annotators: Vec<String> = ordered.iter().map(|(id, _)| id.clone()).collect();
    source_annotators.dedup();

    Ok(FusedDescription {
        consensus,
        missing_dimensions,
        conflict_log,
        narrative: String::new(),
        source_annotators,
    })
}

/// Deterministic template narrative: one canonical sentence per consensus
/// dimension in fixed dimension order.
pub fn render_template_narrative(fused: &FusedDescription) -> String {
    if fused.consensus.is_empty() {
        return "No consensus morphological findings were identified across the annotators."
            .to_string();
    }
    fused
        .consensus
        .values()
        .map(|a| a.dimension.canonical_sentence(a.verdict))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Text table of consensus findings, used in integrator prompts and audit
/// output.
pub fn consensus_table(fused: &FusedDescription) -> String {
    if fused.consensus.is_empty() {
        return "(no consensus findings)".to_string();
    }
    fused
        .consensus
        .values()
        .map(|a| {
            format!(
                "- {} ({}): {} (agreement {:.2})",
                a.dimension.code(),
                a.dimension.display_name(),
                a.dimension.label_for(a.verdict),
                a.confidence
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Access to the optional integrator endpoint for
/// [`summarize_narrative`].
pub struct IntegratorHandle<'a> {
    pub client: &'a ChatClient,
    pub endpoint: &'a EndpointConfig,
    pub template: &'a PromptTemplate,
}

/// Produces the fused narrative paragraph. With an integrator endpoint the
/// consensus table and source narratives go to the model and its paragraph
/// is returned; without one, the deterministic template rendering is used.
pub async fn summarize_narrative(
    fused: &FusedDescription,
    source_narratives: &[String],
    integrator: Option<IntegratorHandle<'_>>,
) -> Result<String, FusionError> {
    let Some(integrator) = integrator else {
        return Ok(render_template_narrative(fused));
    };

    let narratives = source_narratives
        .iter()
        .enumerate()
        .map(|(i, text)| format!("Annotator {}:\n{}", i + 1, text))
        .collect::<Vec<_>>()
        .join("\n\n");
    let mut values = BTreeMap::new();
    values.insert("consensus_table", consensus_table(fused));
    values.insert("narratives", narratives);
    let prompt = integrator.template.render(&values);

    let request = ChatRequest::new(integrator.endpoint).user_text(prompt);
    let response = integrator
        .client
        .send_chat(integrator.endpoint, request)
        .await?;
    Ok(response.text)
}
