//! Prompt templates with `{placeholder}` substitution.
//!
//! Every model-facing prompt in the pipeline and the benchmarks is a
//! template loadable from a text file; the defaults shipped here are plain
//! wording chosen to pair with the default lexicon, not reproductions of
//! any particular deployment's prompts.

use crate::schema::MorphDimension;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("failed to read prompt template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt template uses unsupported placeholder {{{name}}}; allowed: {allowed}")]
    UnknownPlaceholder { name: String, allowed: String },
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> PromptTemplate {
        PromptTemplate { text: text.into() }
    }

    pub fn load(path: &Path) -> Result<PromptTemplate, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(PromptTemplate::new(text))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Placeholder names appearing in the template, in order of first
    /// occurrence. A placeholder is `{` + [A-Za-z0-9_:-] characters + `}`;
    /// anything else between braces is treated as literal text.
    pub fn placeholders(&self) -> Vec<String> {
        let mut found = Vec::new();
        let bytes = self.text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' {
                if let Some(rel_end) = self.text[i + 1..].find(['{', '}']) {
                    let end = i + 1 + rel_end;
                    if bytes[end] == b'}' {
                        let name = &self.text[i + 1..end];
                        if !name.is_empty()
                            && name
                                .chars()
                                .all(|c| c.is_ascii_alphanumeric() || "_:-".contains(c))
                            && !found.iter().any(|f| f == name)
                        {
                            found.push(name.to_string());
                        }
                        i = end + 1;
                        continue;
                    }
                }
            }
            i += 1;
        }
        found
    }

    /// Errors unless every placeholder in the template is in `allowed`.
    pub fn check_placeholders(&self, allowed: &[&str]) -> Result<(), PromptError> {
        for name in self.placeholders() {
            let permitted = allowed.contains(&name.as_str())
                || allowed
                    .iter()
                    .any(|a| a.ends_with(':') && name.starts_with(a));
            if !permitted {
                return Err(PromptError::UnknownPlaceholder {
                    name,
                    allowed: allowed.join(", "),
                });
            }
        }
        Ok(())
    }

    /// Substitutes `{name}` for each provided value. Placeholders without a
    /// value are left verbatim; callers validate coverage up front via
    /// [`PromptTemplate::check_placeholders`].
    pub fn render(&self, values: &BTreeMap<&str, String>) -> String {
        let mut out = self.text.clone();
        for (name, value) in values {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }
}

/// Bullet list of all nine dimensions with codes, display names, and the
/// two polarity labels; interpolated into annotator and expert prompts.
pub fn dimension_list() -> String {
    let mut out = String::new();
    for dim in MorphDimension::ALL {
        out.push_str(&format!(
            "- {} ({}): {} or {}\n",
            dim.code(),
            dim.display_name(),
            dim.positive_label(),
            dim.negative_label()
        ));
    }
    out
}

pub fn default_annotator() -> PromptTemplate {
    PromptTemplate::new(
        "You are a cytopathology assistant examining one cervical cytology image tile.\n\
         Describe the cellular morphology you observe, explicitly addressing each of\n\
         these dimensions with one sentence per dimension:\n{dimension_list}\n\
         State plainly for each dimension which of its two findings applies. If the\n\
         image does not let you judge a dimension, omit it rather than guessing.",
    )
}

pub fn default_integrator() -> PromptTemplate {
    PromptTemplate::new(
        "Several annotators described the same cervical cytology image tile. Their\n\
         individual narratives were:\n{narratives}\n\n\
         The panel reached consensus on these morphological findings:\n{consensus_table}\n\n\
         Write one fluent paragraph that presents exactly the consensus findings.\n\
         Do not introduce findings outside the consensus table.",
    )
}

pub fn default_expert() -> PromptTemplate {
    PromptTemplate::new(
        "You are a senior cytopathologist reviewing a cervical cytology image tile.\n\
         A first-pass panel description reads:\n{fused_narrative}\n\n\
         The panel could not settle the following morphological dimensions:\n{missing_dimensions}\n\
         Examine the image and state, one sentence per dimension, your finding for\n\
         each unsettled dimension. Address only those dimensions.",
    )
}

pub fn default_domain_generator() -> PromptTemplate {
    PromptTemplate::new(
        "Below is a description of a cervical cytology image tile:\n{narrative}\n\n\
         Write two question-answer pairs quizzing a student on the described\n\
         morphology. Format each pair as two lines, exactly:\nQ: <question>\nA: <answer>",
    )
}

pub fn default_general_generator() -> PromptTemplate {
    PromptTemplate::new(
        "Look at the attached image and write two question-answer pairs about its\n\
         visible content. Format each pair as two lines, exactly:\nQ: <question>\nA: <answer>",
    )
}

pub fn default_bench_morpho() -> PromptTemplate {
    PromptTemplate::new(
        "Examine the cervical cytology image tile and answer one question.\n\
         Question: regarding {dimension_name}, is the finding {positive_label} (A)\n\
         or {negative_label} (B)?\nAnswer with A or B.",
    )
}

pub fn default_bench_tbs() -> PromptTemplate {
    PromptTemplate::new(
        "Classify the cervical cytology image tile into exactly one Bethesda\n\
         reporting category among: {category_list}.\nAnswer with the category code only.",
    )
}
