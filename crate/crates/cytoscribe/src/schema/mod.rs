//! Closed morphological and diagnostic vocabularies plus the structured
//! caption model that flows between pipeline stages.
//!
//! The nine morphological dimensions and six Bethesda categories are fixed
//! enumerations; nothing in the system constructs values outside them.
//! Free text from annotator models is bridged into structure by
//! [`parse_structured_caption`] using a [`Lexicon`] of phrase patterns.

mod lexicon;

pub use lexicon::{Lexicon, LexiconEntry};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;

/// One of the nine binary morphological observations scored by the
/// perception benchmark. Ordering follows the benchmark table layout and is
/// the canonical iteration order everywhere (maps keyed by dimension sort
/// this way).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MorphDimension {
    NuclearEnlargement,
    NuclearAtypia,
    NuclearHyperchromasia,
    Koilocyte,
    ChromatinTexture,
    Nucleolus,
    NuclearCount,
    NuclearToCytoplasmicRatio,
    NuclearMembrane,
}

impl MorphDimension {
    /// All nine dimensions in canonical order.
    pub const ALL: [MorphDimension; 9] = [
        MorphDimension::NuclearEnlargement,
        MorphDimension::NuclearAtypia,
        MorphDimension::NuclearHyperchromasia,
        MorphDimension::Koilocyte,
        MorphDimension::ChromatinTexture,
        MorphDimension::Nucleolus,
        MorphDimension::NuclearCount,
        MorphDimension::NuclearToCytoplasmicRatio,
        MorphDimension::NuclearMembrane,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MorphDimension::NuclearEnlargement => "NE",
            MorphDimension::NuclearAtypia => "NA",
            MorphDimension::NuclearHyperchromasia => "NH",
            MorphDimension::Koilocyte => "Koilocyte",
            MorphDimension::ChromatinTexture => "CT",
            MorphDimension::Nucleolus => "Nucleolus",
            MorphDimension::NuclearCount => "NC",
            MorphDimension::NuclearToCytoplasmicRatio => "NCR",
            MorphDimension::NuclearMembrane => "NM",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            MorphDimension::NuclearEnlargement => "Nuclear Enlargement",
            MorphDimension::NuclearAtypia => "Nuclear Atypia",
            MorphDimension::NuclearHyperchromasia => "Nuclear Hyperchromasia",
            MorphDimension::Koilocyte => "Koilocyte",
            MorphDimension::ChromatinTexture => "Chromatin Texture",
            MorphDimension::Nucleolus => "Nucleolus",
            MorphDimension::NuclearCount => "Nuclear Count",
            MorphDimension::NuclearToCytoplasmicRatio => "Nuclear-to-Cytoplasmic Ratio",
            MorphDimension::NuclearMembrane => "Nuclear Membrane",
        }
    }

    /// Label describing the Positive verdict, e.g. NE Positive = "enlarged".
    pub fn positive_label(self) -> &'static str {
        match self {
            MorphDimension::NuclearEnlargement => "enlarged",
            MorphDimension::NuclearAtypia => "atypical",
            MorphDimension::NuclearHyperchromasia => "hyperchromatic",
            MorphDimension::Koilocyte => "present",
            MorphDimension::ChromatinTexture => "coarse",
            MorphDimension::Nucleolus => "prominent",
            MorphDimension::NuclearCount => "multinucleated",
            MorphDimension::NuclearToCytoplasmicRatio => "increased",
            MorphDimension::NuclearMembrane => "irregular",
        }
    }

    pub fn negative_label(self) -> &'static str {
        match self {
            MorphDimension::NuclearEnlargement => "normal-sized",
            MorphDimension::NuclearAtypia => "bland",
            MorphDimension::NuclearHyperchromasia => "normochromatic",
            MorphDimension::Koilocyte => "absent",
            MorphDimension::ChromatinTexture => "fine",
            MorphDimension::Nucleolus => "inconspicuous",
            MorphDimension::NuclearCount => "mononucleated",
            MorphDimension::NuclearToCytoplasmicRatio => "normal",
            MorphDimension::NuclearMembrane => "smooth",
        }
    }

    pub fn label_for(self, verdict: Verdict) -> &'static str {
        match verdict {
            Verdict::Positive => self.positive_label(),
            Verdict::Negative => self.negative_label(),
        }
    }

    pub fn from_code(code: &str) -> Option<MorphDimension> {
        MorphDimension::ALL.into_iter().find(|d| d.code() == code)
    }

    /// Canonical one-sentence rendering of a verdict on this dimension.
    /// The default lexicon round-trips every one of these sentences back to
    /// exactly the (dimension, verdict) pair that produced it.
    pub fn canonical_sentence(self, verdict: Verdict) -> &'static str {
        match (self, verdict) {
            (MorphDimension::NuclearEnlargement, Verdict::Positive) => {
                "The nuclei are markedly enlarged."
            }
            (MorphDimension::NuclearEnlargement, Verdict::Negative) => {
                "The nuclei are normal in size."
            }
            (MorphDimension::NuclearAtypia, Verdict::Positive) => {
                "The nuclei show significant atypia."
            }
            (MorphDimension::NuclearAtypia, Verdict::Negative) => {
                "The nuclei appear bland and regular."
            }
            (MorphDimension::NuclearHyperchromasia, Verdict::Positive) => {
                "The nuclei are hyperchromatic."
            }
            (MorphDimension::NuclearHyperchromasia, Verdict::Negative) => {
                "The nuclear staining is normochromatic."
            }
            (MorphDimension::Koilocyte, Verdict::Positive) => "Koilocytes are present.",
            (MorphDimension::Koilocyte, Verdict::Negative) => "No koilocytes are identified.",
            (MorphDimension::ChromatinTexture, Verdict::Positive) => {
                "The chromatin is coarse and irregularly distributed."
            }
            (MorphDimension::ChromatinTexture, Verdict::Negative) => {
                "The chromatin is fine and evenly distributed."
            }
            (MorphDimension::Nucleolus, Verdict::Positive) => "Prominent nucleoli are seen.",
            (MorphDimension::Nucleolus, Verdict::Negative) => "Nucleoli are inconspicuous.",
            (MorphDimension::NuclearCount, Verdict::Positive) => {
                "Multinucleated cells are observed."
            }
            (MorphDimension::NuclearCount, Verdict::Negative) => "The cells are mononucleated.",
            (MorphDimension::NuclearToCytoplasmicRatio, Verdict::Positive) => {
                "The nuclear-to-cytoplasmic ratio is increased."
            }
            (MorphDimension::NuclearToCytoplasmicRatio, Verdict::Negative) => {
                "The nuclear-to-cytoplasmic ratio is within normal limits."
            }
            (MorphDimension::NuclearMembrane, Verdict::Positive) => {
                "The nuclear membrane is irregular."
            }
            (MorphDimension::NuclearMembrane, Verdict::Negative) => {
                "The nuclear membrane is smooth."
            }
        }
    }
}

impl fmt::Display for MorphDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Serialize for MorphDimension {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for MorphDimension {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = String::deserialize(deserializer)?;
        MorphDimension::from_code(&code)
            .ok_or_else(|| D::Error::custom(format!("unknown morphological dimension `{code}`")))
    }
}

/// One of the six Bethesda reporting categories scored by the
/// classification benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TbsCategory {
    Nilm,
    AscUs,
    Lsil,
    AscH,
    Hsil,
    Agc,
}

impl TbsCategory {
    pub const ALL: [TbsCategory; 6] = [
        TbsCategory::Nilm,
        TbsCategory::AscUs,
        TbsCategory::Lsil,
        TbsCategory::AscH,
        TbsCategory::Hsil,
        TbsCategory::Agc,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TbsCategory::Nilm => "NILM",
            TbsCategory::AscUs => "ASC-US",
            TbsCategory::Lsil => "LSIL",
            TbsCategory::AscH => "ASC-H",
            TbsCategory::Hsil => "HSIL",
            TbsCategory::Agc => "AGC",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TbsCategory::Nilm => "Negative for Intraepithelial Lesion or Malignancy",
            TbsCategory::AscUs => "Atypical Squamous Cells of Undetermined Significance",
            TbsCategory::Lsil => "Low-grade Squamous Intraepithelial Lesion",
            TbsCategory::AscH => "Atypical Squamous Cells, cannot exclude HSIL",
            TbsCategory::Hsil => "High-grade Squamous Intraepithelial Lesion",
            TbsCategory::Agc => "Atypical Glandular Cells",
        }
    }

    pub fn from_code(code: &str) -> Option<TbsCategory> {
        TbsCategory::ALL.into_iter().find(|c| c.code() == code)
    }
}

impl fmt::Display for TbsCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Serialize for TbsCategory {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for TbsCategory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = String::deserialize(deserializer)?;
        TbsCategory::from_code(&code)
            .ok_or_else(|| D::Error::custom(format!("unknown TBS category `{code}`")))
    }
}

/// Binary verdict on a morphological dimension. The meaning of Positive is
/// the dimension's positive polarity label (NE Positive = "enlarged").
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Negative,
}

impl Verdict {
    pub fn flipped(self) -> Verdict {
        match self {
            Verdict::Positive => Verdict::Negative,
            Verdict::Negative => Verdict::Positive,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Positive => f.write_str("positive"),
            Verdict::Negative => f.write_str("negative"),
        }
    }
}

/// A single binary claim about one dimension, with a confidence in [0,1]
/// and optional supporting text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionAssertion {
    pub dimension: MorphDimension,
    pub verdict: Verdict,
    pub confidence: f64,
    #[serde(default)]
    pub evidence: String,
}

/// Per-dimension assertions plus the free-text narrative they came from.
/// The assertion map is partial: an absent key means the source did not
/// address that dimension.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct StructuredCaption {
    pub assertions: BTreeMap<MorphDimension, DimensionAssertion>,
    pub narrative: String,
}

/// A structural problem found by [`validate_schema`]. Violations are data,
/// not faults: deserialized captions may carry them and still be inspected.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SchemaViolation {
    /// Map key and the assertion's own dimension disagree.
    MismatchedKey {
        key: MorphDimension,
        dimension: MorphDimension,
    },
    /// Confidence outside [0,1] (NaN included).
    ConfidenceOutOfRange { dimension: MorphDimension, value: f64 },
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaViolation::MismatchedKey { key, dimension } => {
                write!(f, "assertion under key {key} claims dimension {dimension}")
            }
            SchemaViolation::ConfidenceOutOfRange { dimension, value } => {
                write!(f, "confidence {value} on {dimension} outside [0,1]")
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("caption text is empty")]
    EmptyCaption,
    #[error("lexicon line {line}: {reason}")]
    LexiconParse { line: usize, reason: String },
    #[error("lexicon invalid: {0}")]
    LexiconInvalid(String),
    #[error("failed to read lexicon {path}: {source}")]
    LexiconIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Checks every caption invariant and returns all violations found.
/// An empty list means the caption is well-formed; an empty assertion map
/// is legal (partial coverage).
pub fn validate_schema(caption: &StructuredCaption) -> Vec<SchemaViolation> {
    let mut violations = Vec::new();
    for (key, assertion) in &caption.assertions {
        if *key != assertion.dimension {
            violations.push(SchemaViolation::MismatchedKey {
                key: *key,
                dimension: assertion.dimension,
            });
        }
        if !(0.0..=1.0).contains(&assertion.confidence) {
            violations.push(SchemaViolation::ConfidenceOutOfRange {
                dimension: assertion.dimension,
                value: assertion.confidence,
            });
        }
    }
    violations
}

/// Extracts per-dimension assertions from free annotator text by matching
/// lexicon phrases (case-insensitive substring match).
///
/// For each dimension with at least one match, the verdict whose matched
/// entries carry the greater summed base confidence wins and the assertion
/// confidence is winning-sum / total-sum. An exact mass tie resolves to
/// Negative at confidence 0.5: with the evidence balanced we refuse to
/// claim the finding is present. Evidence lists the winning side's matched
/// phrases. The narrative is the raw text verbatim.
pub fn parse_structured_caption(
    raw: &str,
    lexicon: &Lexicon,
) -> Result<StructuredCaption, SchemaError> {
    if raw.trim().is_empty() {
        return Err(SchemaError::EmptyCaption);
    }
    let haystack = raw.to_lowercase();

    #[derive(Default)]
    struct Tally {
        positive_mass: f64,
        negative_mass: f64,
        positive_phrases: Vec<String>,
        negative_phrases: Vec<String>,
    }

    let mut tallies: BTreeMap<MorphDimension, Tally> = BTreeMap::new();
    for entry in lexicon.entries() {
        if !haystack.contains(&entry.phrase.to_lowercase()) {
            continue;
        }
        let tally = tallies.entry(entry.dimension).or_default();
        match entry.verdict {
            Verdict::Positive => {
                tally.positive_mass += entry.base_confidence;
                tally.positive_phrases.push(entry.phrase.clone());
            }
            Verdict::Negative => {
                tally.negative_mass += entry.base_confidence;
                tally.negative_phrases.push(entry.phrase.clone());
            }
        }
    }

    let mut assertions = BTreeMap::new();
    for (dimension, tally) in tallies {
        let total = tally.positive_mass + tally.negative_mass;
        let (verdict, winning_mass, phrases) = if tally.positive_mass > tally.negative_mass {
            (Verdict::Positive, tally.positive_mass, &tally.positive_phrases)
        } else {
            (Verdict::Negative, tally.negative_mass, &tally.negative_phrases)
        };
        // Zero total mass (all matched entries at confidence 0) degrades to
        // the tie outcome rather than dividing by zero.
        let confidence = if total > 0.0 && winning_mass * 2.0 != total {
            winning_mass / total
        } else {
            0.5
        };
        // A tie decided without any phrase on the winning side still cites
        // everything that matched.
        let evidence = if phrases.is_empty() {
            tally
                .positive_phrases
                .iter()
                .chain(&tally.negative_phrases)
                .cloned()
                .collect::<Vec<_>>()
                .join(", ")
        } else {
            phrases.join(", ")
        };
        assertions.insert(
            dimension,
            DimensionAssertion {
                dimension,
                verdict,
                confidence,
                evidence,
            },
        );
    }

    Ok(StructuredCaption {
        assertions,
        narrative: raw.to_string(),
    })
}
