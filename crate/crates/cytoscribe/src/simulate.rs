//! Synthetic weak annotators and ground truth for desk-scale, oracle-backed
//! testing of the fusion stage without real model endpoints.
//!
//! Randomness comes exclusively from ChaCha8 streams seeded by stable
//! derivations of (seed, case id, profile seed), so trial outputs are
//! bit-identical across platforms and safe to pin as golden values.
//! Simulated errors are independent across annotators and dimensions; real
//! model errors correlate, so measured gains here validate the contract,
//! not deployed fusion quality.

use crate::fusion::{fuse_consensus, FusionPolicy};
use crate::schema::{Lexicon, MorphDimension, StructuredCaption, TbsCategory, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Uniform or per-dimension probability table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimensionMap {
    Uniform(f64),
    PerDimension(BTreeMap<MorphDimension, f64>),
}

impl DimensionMap {
    pub fn get(&self, dimension: MorphDimension) -> f64 {
        match self {
            DimensionMap::Uniform(p) => *p,
            DimensionMap::PerDimension(map) => map.get(&dimension).copied().unwrap_or(0.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let check = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("probability {p} outside [0,1]"))
            }
        };
        match self {
            DimensionMap::Uniform(p) => check(*p),
            DimensionMap::PerDimension(map) => map.values().try_for_each(|p| check(*p)),
        }
    }
}

/// One simulated annotator: how often it addresses each dimension, how
/// often its verdict matches ground truth, and how it words assertions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub profile_id: String,
    pub accuracy: DimensionMap,
    pub coverage: DimensionMap,
    /// Per-dimension (positive sentence, negative sentence) overrides;
    /// dimensions without an override render their canonical sentence.
    /// Override wording must still round-trip through the lexicon in use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbosity: Option<BTreeMap<MorphDimension, (String, String)>>,
    pub seed: u64,
}

impl AnnotatorProfile {
    /// Identical accuracy and full coverage on every dimension.
    pub fn uniform(profile_id: impl Into<String>, accuracy: f64, seed: u64) -> AnnotatorProfile {
        AnnotatorProfile {
            profile_id: profile_id.into(),
            accuracy: DimensionMap::Uniform(accuracy),
            coverage: DimensionMap::Uniform(1.0),
            verbosity: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.accuracy.validate()?;
        self.coverage.validate()
    }

    fn sentence(&self, dimension: MorphDimension, verdict: Verdict) -> String {
        if let Some(overrides) = &self.verbosity {
            if let Some((positive, negative)) = overrides.get(&dimension) {
                return match verdict {
                    Verdict::Positive => positive.clone(),
                    Verdict::Negative => negative.clone(),
                };
            }
        }
        dimension.canonical_sentence(verdict).to_string()
    }
}

/// Ground truth for one synthetic tile: a verdict on all nine dimensions
/// plus a diagnostic category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub case_id: String,
    pub ground_truth: BTreeMap<MorphDimension, Verdict>,
    pub ground_truth_tbs: TbsCategory,
}

fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Generates `n` cases with independently uniform verdicts and categories.
pub fn generate_cases(n: usize, seed: u64) -> Vec<SyntheticCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cases"));
    (0..n)
        .map(|i| {
            let ground_truth = MorphDimension::ALL
                .into_iter()
                .map(|dim| {
                    let verdict = if rng.random::<bool>() {
                        Verdict::Positive
                    } else {
                        Verdict::Negative
                    };
                    (dim, verdict)
                })
                .collect();
            let ground_truth_tbs = TbsCategory::ALL[rng.random_range(0..TbsCategory::ALL.len())];
            SyntheticCase {
                case_id: format!("case-{seed:08x}-{i:06}"),
                ground_truth,
                ground_truth_tbs,
            }
        })
        .collect()
}

/// Simulates one annotator's caption for one case. Per dimension the
/// annotator addresses it with its coverage probability and matches ground
/// truth with its accuracy, otherwise flips. The rendered sentences go
/// through [`parse_structured_caption`](crate::schema::parse_structured_caption)
/// so downstream consumers exercise the real text path. Deterministic in
/// (case id, profile seed).
pub fn simulate_annotator(
    case: &SyntheticCase,
    profile: &AnnotatorProfile,
    lexicon: &Lexicon,
) -> StructuredCaption {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, &case.case_id));
    let mut sentences = Vec::new();
    for dimension in MorphDimension::ALL {
        // Both draws happen unconditionally so the stream stays aligned
        // across profiles that differ only in coverage.
        let address: f64 = rng.random();
        let correct: f64 = rng.random();
        if address >= profile.coverage.get(dimension) {
            continue;
        }
        let truth = case.ground_truth[&dimension];
        let verdict = if correct < profile.accuracy.get(dimension) {
            truth
        } else {
            truth.flipped()
        };
        sentences.push(profile.sentence(dimension, verdict));
    }
    if sentences.is_empty() {
        return StructuredCaption::default();
    }
    let narrative = sentences.join(" ");
    crate::schema::parse_structured_caption(&narrative, lexicon)
        .expect("rendered narrative is non-empty")
}

/// Exact expected fused accuracy per dimension for `n` i.i.d. annotators of
/// accuracy `p` at full coverage, by enumerating all 2^n correctness
/// patterns and applying the policy's vote rule. Pure arithmetic,
/// independent of the fusion implementation, usable as a test oracle.
///
/// `n` is capped at 5 per the harness contract (enumeration is exact, the
/// cap just keeps configs honest).
pub fn fused_accuracy_oracle(n_annotators: u32, accuracy: f64, policy: &FusionPolicy) -> f64 {
    assert!(
        (1..=5).contains(&n_annotators),
        "oracle supports 1..=5 annotators"
    );
    let n = n_annotators;
    let mut expected = 0.0;
    for pattern in 0u32..(1 << n) {
        let correct = pattern.count_ones();
        let wrong = n - correct;
        let probability =
            accuracy.powi(correct as i32) * (1.0 - accuracy).powi(wrong as i32);

        // All annotators address the dimension, so the truth verdict gets
        // `correct` votes and the flipped verdict gets `wrong` votes.
        if n < policy.min_coverage {
            continue;
        }
        let (winner_is_truth, winning) = if correct > wrong {
            (true, correct)
        } else if wrong > correct {
            (false, wrong)
        } else {
            continue;
        };
        let threshold_met = match policy.min_votes_for_consensus {
            Some(votes) => winning >= votes,
            None => winning * 2 > n,
        };
        if winner_is_truth && threshold_met {
            expected += probability;
        }
    }
    expected
}

/// A fusion-trial description, loadable from TOML.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub cases: usize,
    pub seed: u64,
    #[serde(default)]
    pub policy: FusionPolicy,
    pub profiles: Vec<AnnotatorProfile>,
}

impl TrialConfig {
    pub fn load(path: &std::path::Path) -> Result<TrialConfig, crate::config::ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| crate::config::ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
        let config: TrialConfig =
            toml::from_str(&text).map_err(|err| crate::config::ConfigError::Parse {
                path: path.display().to_string(),
                message: err.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), crate::config::ConfigError> {
        let invalid = |reason: String| Err(crate::config::ConfigError::Invalid(reason));
        if self.cases < 1 {
            return invalid("trial needs at least one case".into());
        }
        if self.profiles.is_empty() {
            return invalid("trial needs at least one annotator profile".into());
        }
        for profile in &self.profiles {
            profile
                .validate()
                .map_err(|reason| {
                    crate::config::ConfigError::Invalid(format!(
                        "profile `{}`: {reason}",
                        profile.profile_id
                    ))
                })?;
        }
        self.policy
            .validate()
            .map_err(|err| crate::config::ConfigError::Invalid(err.to_string()))
    }

    /// When every profile shares one uniform accuracy at full coverage the
    /// closed-form oracle applies; returns that accuracy.
    pub fn uniform_accuracy(&self) -> Option<f64> {
        if self.profiles.len() > 5 {
            return None;
        }
        let mut shared: Option<f64> = None;
        for profile in &self.profiles {
            match (&profile.accuracy, &profile.coverage) {
                (DimensionMap::Uniform(p), DimensionMap::Uniform(c)) if *c == 1.0 => {
                    match shared {
                        None => shared = Some(*p),
                        Some(existing) if existing == *p => {}
                        _ => return None,
                    }
                }
                _ => return None,
            }
        }
        shared
    }
}

/// Per-annotator score from a trial: accuracy over the assertions the
/// annotator actually made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorScore {
    pub profile_id: String,
    pub accuracy: f64,
    pub assertions: u64,
}

/// Monte-Carlo trial result. Fused accuracy counts an unsettled dimension
/// as incorrect; annotator accuracy is conditional on the annotator having
/// addressed the dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub n_cases: u64,
    pub fused_per_dimension: BTreeMap<MorphDimension, f64>,
    pub fused_overall: f64,
    pub per_annotator: Vec<AnnotatorScore>,
}

/// Runs the real parse → fuse path over generated cases and scores fused
/// output and individual annotators against ground truth. Deterministic
/// per seed; cases are scored independently, so partitioning a trial by
/// case ranges and summing partial counts reproduces the same totals.
pub fn run_fusion_trial(
    n_cases: usize,
    profiles: &[AnnotatorProfile],
    policy: &FusionPolicy,
    seed: u64,
    lexicon: &Lexicon,
) -> TrialResult {
    assert!(n_cases >= 1, "trial needs at least one case");
    let cases = generate_cases(n_cases, seed);

    let mut fused_correct: BTreeMap<MorphDimension, u64> =
        MorphDimension::ALL.into_iter().map(|d| (d, 0)).collect();
    let mut annotator_correct = vec![0u64; profiles.len()];
    let mut annotator_asserted = vec![0u64; profiles.len()];

    for case in &cases {
        let captions: Vec<(String, StructuredCaption)> = profiles
            .iter()
            .map(|profile| {
                (
                    profile.profile_id.clone(),
                    simulate_annotator(case, profile, lexicon),
                )
            })
            .collect();

        for (i, (_, caption)) in captions.iter().enumerate() {
            for (dimension, assertion) in &caption.assertions {
                annotator_asserted[i] += 1;
                if assertion.verdict == case.ground_truth[dimension] {
                    annotator_correct[i] += 1;
                }
            }
        }

        let fused = fuse_consensus(&captions, policy).expect("profiles are non-empty");
        for (dimension, assertion) in &fused.consensus {
            if assertion.verdict == case.ground_truth[dimension] {
                *fused_correct.get_mut(dimension).expect("all dims") += 1;
            }
        }
    }

    let n = n_cases as f64;
    let fused_per_dimension: BTreeMap<MorphDimension, f64> = fused_correct
        .iter()
        .map(|(dim, correct)| (*dim, *correct as f64 / n))
        .collect();
    let fused_overall =
        fused_correct.values().sum::<u64>() as f64 / (n * MorphDimension::ALL.len() as f64);
    let per_annotator = profiles
        .iter()
        .zip(annotator_correct.iter().zip(&annotator_asserted))
        .map(|(profile, (correct, asserted))| AnnotatorScore {
            profile_id: profile.profile_id.clone(),
            accuracy: if *asserted == 0 {
                0.0
            } else {
                *correct as f64 / *asserted as f64
            },
            assertions: *asserted,
        })
        .collect();

    TrialResult {
        n_cases: n_cases as u64,
        fused_per_dimension,
        fused_overall,
        per_annotator,
    }
}
