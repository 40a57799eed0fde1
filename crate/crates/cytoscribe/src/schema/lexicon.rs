//! Phrase lexicon mapping free-text wording to dimension verdicts.
//!
//! The lexicon is configuration data, not code: it loads from a
//! tab-separated text file so the phrase table can be extended without a
//! rebuild. Matching is case-insensitive literal substring search; anything
//! smarter (stemming, embeddings) is out of scope.

use super::{MorphDimension, SchemaError, Verdict};
use std::path::Path;

/// One phrase pattern. When `phrase` occurs in a caption it contributes
/// `base_confidence` mass toward `verdict` on `dimension`.
#[derive(Clone, Debug, PartialEq)]
pub struct LexiconEntry {
    pub dimension: MorphDimension,
    pub phrase: String,
    pub verdict: Verdict,
    pub base_confidence: f64,
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
}

impl Lexicon {
    /// Builds a lexicon from explicit entries without validating coverage.
    /// Harnesses and tests construct deliberately partial lexicons; file
    /// loading ([`Lexicon::load`]) is the validated path.
    pub fn from_entries(entries: Vec<LexiconEntry>) -> Lexicon {
        Lexicon { entries }
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    /// Parses the line-oriented file format:
    /// `<dimension-code>\t<verdict:+|->\t<base-confidence>\t<phrase>`.
    /// Lines starting with `#` and blank lines are ignored. The phrase field
    /// may itself contain tabs; only the first three separators split.
    pub fn parse(text: &str) -> Result<Lexicon, SchemaError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = line.splitn(4, '\t');
            let code = fields.next().unwrap_or("").trim();
            let verdict = fields.next().unwrap_or("").trim();
            let confidence = fields.next().unwrap_or("").trim();
            let phrase = fields.next().unwrap_or("").trim();

            let dimension = MorphDimension::from_code(code).ok_or_else(|| {
                SchemaError::LexiconParse {
                    line: line_no,
                    reason: format!("unknown dimension code `{code}`"),
                }
            })?;
            let verdict = match verdict {
                "+" => Verdict::Positive,
                "-" => Verdict::Negative,
                other => {
                    return Err(SchemaError::LexiconParse {
                        line: line_no,
                        reason: format!("verdict must be `+` or `-`, got `{other}`"),
                    })
                }
            };
            let base_confidence: f64 =
                confidence.parse().map_err(|_| SchemaError::LexiconParse {
                    line: line_no,
                    reason: format!("base confidence `{confidence}` is not a number"),
                })?;
            if !(0.0..=1.0).contains(&base_confidence) {
                return Err(SchemaError::LexiconParse {
                    line: line_no,
                    reason: format!("base confidence {base_confidence} outside [0,1]"),
                });
            }
            if phrase.is_empty() {
                return Err(SchemaError::LexiconParse {
                    line: line_no,
                    reason: "phrase is empty".to_string(),
                });
            }
            entries.push(LexiconEntry {
                dimension,
                phrase: phrase.to_string(),
                verdict,
                base_confidence,
            });
        }
        Ok(Lexicon { entries })
    }

    /// Loads and validates a lexicon file. Pipeline configs go through this
    /// path, which additionally enforces full-coverage invariants.
    pub fn load(path: &Path) -> Result<Lexicon, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::LexiconIo {
            path: path.display().to_string(),
            source,
        })?;
        let lexicon = Lexicon::parse(&text)?;
        lexicon.validate()?;
        Ok(lexicon)
    }

    /// Checks the coverage and consistency invariants: every dimension has
    /// at least one Positive-implying and one Negative-implying entry, and
    /// no phrase maps to conflicting verdicts on the same dimension.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut problems = Vec::new();
        for dimension in MorphDimension::ALL {
            let has = |verdict| {
                self.entries
                    .iter()
                    .any(|e| e.dimension == dimension && e.verdict == verdict)
            };
            if !has(Verdict::Positive) {
                problems.push(format!("{dimension} has no Positive-implying entry"));
            }
            if !has(Verdict::Negative) {
                problems.push(format!("{dimension} has no Negative-implying entry"));
            }
        }
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                if a.dimension == b.dimension
                    && a.verdict != b.verdict
                    && a.phrase.eq_ignore_ascii_case(&b.phrase)
                {
                    problems.push(format!(
                        "phrase `{}` maps to conflicting verdicts on {}",
                        a.phrase, a.dimension
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SchemaError::LexiconInvalid(problems.join("; ")))
        }
    }

    /// Renders the file format, one entry per line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# dimension-code\tverdict\tbase-confidence\tphrase\n");
        for e in &self.entries {
            let verdict = match e.verdict {
                Verdict::Positive => "+",
                Verdict::Negative => "-",
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.dimension.code(),
                verdict,
                e.base_confidence,
                e.phrase
            ));
        }
        out
    }
}

/// The built-in phrase table. Negation phrases ("no koilocytes") carry more
/// mass than any positive phrase they contain ("koilocyte") so the summed
/// vote resolves the embedded-substring case to Negative. Every canonical
/// sentence from [`MorphDimension::canonical_sentence`] parses back to
/// exactly its own (dimension, verdict) pair under this table.
impl Default for Lexicon {
    fn default() -> Lexicon {
        let mut entries = Vec::new();
        let mut add = |code: &str, verdict: Verdict, confidence: f64, phrase: &str| {
            entries.push(LexiconEntry {
                dimension: MorphDimension::from_code(code).expect("built-in code"),
                phrase: phrase.to_string(),
                verdict,
                base_confidence: confidence,
            });
        };
        use Verdict::{Negative as Neg, Positive as Pos};

        add("NE", Pos, 0.9, "markedly enlarged");
        add("NE", Pos, 0.85, "nuclear enlargement");
        add("NE", Pos, 0.85, "nuclei are enlarged");
        add("NE", Pos, 0.6, "enlarged");
        add("NE", Neg, 0.95, "no nuclear enlargement");
        add("NE", Neg, 0.95, "not enlarged");
        add("NE", Neg, 0.9, "normal in size");
        add("NE", Neg, 0.9, "normal-sized");
        add("NE", Neg, 0.9, "normal nuclear size");

        add("NA", Pos, 0.85, "atypia");
        add("NA", Pos, 0.85, "atypical nuclei");
        add("NA", Neg, 0.95, "no atypia");
        add("NA", Neg, 0.95, "without atypia");
        add("NA", Neg, 0.9, "bland");
        add("NA", Neg, 0.85, "unremarkable nuclei");

        add("NH", Pos, 0.9, "hyperchromatic");
        add("NH", Pos, 0.85, "hyperchromasia");
        add("NH", Neg, 0.95, "no hyperchromasia");
        add("NH", Neg, 0.9, "normochromatic");
        add("NH", Neg, 0.85, "pale chromatin");

        add("Koilocyte", Pos, 0.85, "koilocyte");
        add("Koilocyte", Pos, 0.85, "perinuclear halo");
        add("Koilocyte", Neg, 0.95, "no koilocyte");
        add("Koilocyte", Neg, 0.95, "no perinuclear halo");
        add("Koilocyte", Neg, 0.95, "without koilocyte");

        add("CT", Pos, 0.9, "coarse chromatin");
        add("CT", Pos, 0.85, "chromatin is coarse");
        add("CT", Pos, 0.6, "coarse");
        add("CT", Pos, 0.85, "clumped chromatin");
        add("CT", Neg, 0.9, "chromatin is fine");
        add("CT", Neg, 0.9, "fine chromatin");
        add("CT", Neg, 0.85, "finely granular chromatin");
        add("CT", Neg, 0.85, "evenly distributed");

        add("Nucleolus", Pos, 0.9, "prominent nucleoli");
        add("Nucleolus", Pos, 0.9, "prominent nucleolus");
        add("Nucleolus", Neg, 0.95, "no prominent nucleoli");
        add("Nucleolus", Neg, 0.9, "inconspicuous");
        add("Nucleolus", Neg, 0.85, "nucleoli are absent");

        add("NC", Pos, 0.9, "multinucleat");
        add("NC", Pos, 0.85, "binucleat");
        add("NC", Neg, 0.95, "no multinucleat");
        add("NC", Neg, 0.9, "mononucleat");
        add("NC", Neg, 0.85, "single nucleus");

        add("NCR", Pos, 0.9, "ratio is increased");
        add("NCR", Pos, 0.9, "increased nuclear-to-cytoplasmic");
        add("NCR", Pos, 0.85, "high n/c ratio");
        add("NCR", Pos, 0.85, "elevated n/c");
        add("NCR", Neg, 0.9, "ratio is within normal limits");
        add("NCR", Neg, 0.9, "normal n/c ratio");
        add("NCR", Neg, 0.85, "ratio is normal");
        add("NCR", Neg, 0.85, "ratio is preserved");

        add("NM", Pos, 0.9, "membrane is irregular");
        add("NM", Pos, 0.9, "irregular nuclear membrane");
        add("NM", Pos, 0.85, "membrane irregularit");
        add("NM", Pos, 0.85, "irregular nuclear contour");
        add("NM", Neg, 0.9, "membrane is smooth");
        add("NM", Neg, 0.9, "smooth nuclear membrane");
        add("NM", Neg, 0.85, "smooth nuclear contour");

        let lexicon = Lexicon { entries };
        debug_assert!(lexicon.validate().is_ok());
        lexicon
    }
}
