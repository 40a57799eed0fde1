//! Benchmark harness: binary morphological-perception items and 6-way
//! TBS-classification items, scored as per-group accuracy with unweighted
//! macro averages, confusion matrices, and pairwise inter-rater agreement.
//!
//! Replies the extractors cannot resolve score as incorrect (never
//! excluded), and per-item endpoint failures degrade to unparseable rather
//! than aborting the run. Scoring is a pure fold over (item, answer) pairs,
//! so reports are independent of evaluation order.

use crate::endpoints::{ChatClient, ChatRequest, EndpointConfig};
use crate::pipeline::ImageTile;
use crate::prompts::PromptTemplate;
use crate::schema::{parse_structured_caption, Lexicon, MorphDimension, TbsCategory, Verdict};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// items

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphoBenchItem {
    pub item_id: String,
    pub tile: ImageTile,
    pub dimension: MorphDimension,
    pub ground_truth: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CytoBenchItem {
    pub item_id: String,
    pub tile: ImageTile,
    pub ground_truth: TbsCategory,
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Morpho,
    Tbs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupScore {
    pub total: u64,
    pub correct: u64,
}

impl GroupScore {
    pub fn accuracy(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64 * 100.0
        }
    }
}

/// Counts indexed (truth row, prediction column); the last column is
/// always Unparseable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub truth_labels: Vec<String>,
    pub prediction_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    fn new(truth_labels: Vec<String>, mut prediction_labels: Vec<String>) -> ConfusionMatrix {
        prediction_labels.push("Unparseable".to_string());
        let counts = vec![vec![0; prediction_labels.len()]; truth_labels.len()];
        ConfusionMatrix {
            truth_labels,
            prediction_labels,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn unparseable_total(&self) -> u64 {
        self.counts
            .iter()
            .map(|row| row.last().copied().unwrap_or(0))
            .sum()
    }
}

/// Accuracy report for one benchmark run. `per_group` holds only groups
/// with at least one item; the macro average is the unweighted mean over
/// those groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: BenchKind,
    pub per_group: BTreeMap<String, GroupScore>,
    pub macro_average: f64,
    pub confusion: ConfusionMatrix,
    pub n_items: u64,
    pub n_unparseable: u64,
    pub model_name: String,
    pub run_config_hash: String,
}

fn macro_average(per_group: &BTreeMap<String, GroupScore>) -> f64 {
    if per_group.is_empty() {
        return 0.0;
    }
    per_group.values().map(|s| s.accuracy()).sum::<f64>() / per_group.len() as f64
}

fn run_config_hash(template: &PromptTemplate, model_name: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(template.text().as_bytes());
    hasher.update([0]);
    hasher.update(model_name.as_bytes());
    hex::encode(hasher.finalize())
}

// ---------------------------------------------------------------------------
// answer extraction

fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

/// Spans where `needle` occurs in `haystack` with non-alphanumeric
/// characters (or string edges) on both sides.
fn find_word_spans<'a>(
    haystack: &'a str,
    needle: &'a str,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let needle_len = needle.len();
    haystack.match_indices(needle).filter_map(move |(start, _)| {
        let end = start + needle_len;
        let left_ok = start == 0
            || !haystack[..start]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_ascii_alphanumeric());
        let right_ok = end == haystack.len()
            || !haystack[end..]
                .chars()
                .next()
                .is_some_and(|c| c.is_ascii_alphanumeric());
        (left_ok && right_ok).then_some((start, end))
    })
}

const NEGATORS: [&str; 7] = ["not", "no", "without", "never", "neither", "lacks", "lacking"];

/// Whether the word span at `start` is preceded by a negator within the
/// three tokens before it.
fn negated_at(lower: &str, start: usize) -> bool {
    let before = &lower[..start];
    let tokens = word_tokens(before);
    tokens
        .iter()
        .rev()
        .take(3)
        .any(|t| NEGATORS.contains(&t.as_str()))
}

/// Resolves a free-text reply to a binary verdict for one dimension.
///
/// In order: leading or unambiguous yes/no token; a leading option letter
/// (`A` = positive, `B` = negative) when it stands alone or is followed by
/// punctuation; a non-negated occurrence of exactly one of the dimension's
/// polarity labels; finally a lexicon parse restricted to the queried
/// dimension. `None` means unparseable and scores as incorrect.
pub fn extract_binary_answer(
    raw: &str,
    dimension: MorphDimension,
    lexicon: &Lexicon,
) -> Option<Verdict> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return None;
    }
    let lower = trimmed.to_ascii_lowercase();
    let tokens = word_tokens(&lower);

    let has_yes = tokens.iter().any(|t| t == "yes");
    let has_no = tokens.iter().any(|t| t == "no");
    match tokens.first().map(String::as_str) {
        Some("yes") => return Some(Verdict::Positive),
        Some("no") => return Some(Verdict::Negative),
        _ => {
            if has_yes && has_no {
                return None;
            }
            if has_yes {
                return Some(Verdict::Positive);
            }
            if has_no {
                return Some(Verdict::Negative);
            }
        }
    }

    let mut chars = lower.chars();
    if let Some(first) = chars.next() {
        let next = chars.next();
        let option_like = next.is_none_or(|c| matches!(c, '.' | ')' | ':' | ',' | ';' | '!'));
        if option_like {
            match first {
                'a' => return Some(Verdict::Positive),
                'b' => return Some(Verdict::Negative),
                _ => {}
            }
        }
    }

    let label_hit = |label: &str| {
        find_word_spans(&lower, &label.to_ascii_lowercase())
            .any(|(start, _)| !negated_at(&lower, start))
    };
    let positive_hit = label_hit(dimension.positive_label());
    let negative_hit = label_hit(dimension.negative_label());
    match (positive_hit, negative_hit) {
        (true, false) => return Some(Verdict::Positive),
        (false, true) => return Some(Verdict::Negative),
        _ => {}
    }

    parse_structured_caption(trimmed, lexicon)
        .ok()
        .and_then(|caption| caption.assertions.get(&dimension).map(|a| a.verdict))
}

/// Resolves a free-text reply to a TBS category by case-insensitive code
/// and full-name matching. A match whose span lies inside a longer match
/// is discarded (so the `HSIL` inside "cannot exclude HSIL" never fires);
/// anything other than exactly one surviving category is unparseable.
pub fn extract_tbs_answer(raw: &str) -> Option<TbsCategory> {
    let lower = raw.trim().to_ascii_lowercase();
    if lower.is_empty() {
        return None;
    }

    let patterns: [(&str, TbsCategory); 17] = [
        ("nilm", TbsCategory::Nilm),
        ("negative for intraepithelial lesion or malignancy", TbsCategory::Nilm),
        ("negative for intraepithelial lesion", TbsCategory::Nilm),
        ("asc-us", TbsCategory::AscUs),
        ("ascus", TbsCategory::AscUs),
        ("atypical squamous cells of undetermined significance", TbsCategory::AscUs),
        ("lsil", TbsCategory::Lsil),
        ("low-grade squamous intraepithelial lesion", TbsCategory::Lsil),
        ("low grade squamous intraepithelial lesion", TbsCategory::Lsil),
        ("asc-h", TbsCategory::AscH),
        ("cannot exclude hsil", TbsCategory::AscH),
        ("atypical squamous cells, cannot exclude", TbsCategory::AscH),
        ("hsil", TbsCategory::Hsil),
        ("high-grade squamous intraepithelial lesion", TbsCategory::Hsil),
        ("high grade squamous intraepithelial lesion", TbsCategory::Hsil),
        ("atypical glandular cells", TbsCategory::Agc),
        ("agc", TbsCategory::Agc),
    ];
    let mut spans: Vec<(usize, usize, TbsCategory)> = Vec::new();
    for (pattern, category) in patterns {
        for (start, end) in find_word_spans(&lower, pattern) {
            spans.push((start, end, category));
        }
    }

    let surviving: BTreeSet<TbsCategory> = spans
        .iter()
        .filter(|(start, end, _)| {
            !spans
                .iter()
                .any(|(s2, e2, _)| s2 <= start && end <= e2 && (e2 - s2) > (end - start))
        })
        .map(|(_, _, category)| *category)
        .collect();
    if surviving.len() == 1 {
        surviving.into_iter().next()
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("benchmark has no items")]
    NoItems,
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("inter-rater agreement needs at least 2 raters, found {found}")]
    InsufficientRaters { found: usize },
    #[error("rater `{rater}` annotates unknown item `{item_id}`")]
    UnknownItem { rater: String, item_id: String },
    #[error("no dimension has a comparable rater pair")]
    NoOverlap,
    #[error("benchmark manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn check_unique_ids<'a, I: Iterator<Item = &'a str>>(ids: I) -> Result<(), BenchError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(BenchError::DuplicateItem(id.to_string()));
        }
    }
    Ok(())
}

/// Queries the endpoint once per item and returns each reply in item
/// order; fetch failures and endpoint errors yield `None` for that item.
async fn collect_replies<'a, It, F>(
    items: It,
    model: &EndpointConfig,
    client: &ChatClient,
    build: F,
) -> Vec<Option<String>>
where
    It: Iterator<Item = (&'a str, &'a ImageTile, String)>,
    F: Fn(String, Vec<u8>, String) -> ChatRequest,
{
    let build = &build;
    let queries = items.map(|(item_id, tile, prompt)| async move {
        let bytes = match crate::pipeline::fetch_uri_bytes(client, &tile.uri).await {
            Ok(bytes) => bytes,
            Err(err) => {
                tracing::warn!(item = %item_id, error = %err, "image fetch failed");
                return None;
            }
        };
        let request = build(prompt, bytes, tile.media_type.clone());
        match client.send_chat(model, request).await {
            Ok(response) => Some(response.text),
            Err(err) => {
                tracing::warn!(item = %item_id, error = %err, "model query failed");
                None
            }
        }
    });
    futures::stream::iter(queries)
        .buffered(model.max_in_flight.max(1))
        .collect()
        .await
}

/// Scores morphological-perception items: per-dimension accuracy, the
/// unweighted macro average over dimensions that appear, and an aggregate
/// Positive/Negative × Positive/Negative/Unparseable confusion matrix.
pub async fn evaluate_morpho(
    items: &[MorphoBenchItem],
    model: &EndpointConfig,
    client: &ChatClient,
    template: &PromptTemplate,
    lexicon: &Lexicon,
) -> Result<EvalReport, BenchError> {
    if items.is_empty() {
        return Err(BenchError::NoItems);
    }
    check_unique_ids(items.iter().map(|i| i.item_id.as_str()))?;

    let prompts: Vec<String> = items
        .iter()
        .map(|item| {
            let mut values = BTreeMap::new();
            values.insert("dimension_code", item.dimension.code().to_string());
            values.insert("dimension_name", item.dimension.display_name().to_string());
            values.insert("positive_label", item.dimension.positive_label().to_string());
            values.insert("negative_label", item.dimension.negative_label().to_string());
            template.render(&values)
        })
        .collect();
    let replies = collect_replies(
        items
            .iter()
            .zip(&prompts)
            .map(|(item, prompt)| (item.item_id.as_str(), &item.tile, prompt.clone())),
        model,
        client,
        |prompt, bytes, media_type| {
            ChatRequest::new(model).user_text_image(prompt, bytes, media_type)
        },
    )
    .await;

    let answers: Vec<Option<Verdict>> = items
        .iter()
        .zip(&replies)
        .map(|(item, reply)| {
            reply
                .as_deref()
                .and_then(|text| extract_binary_answer(text, item.dimension, lexicon))
        })
        .collect();
    Ok(score_morpho(items, &answers, model, template))
}

/// Pure scoring fold, split from the network phase so tests can drive it
/// directly.
pub fn score_morpho(
    items: &[MorphoBenchItem],
    answers: &[Option<Verdict>],
    model: &EndpointConfig,
    template: &PromptTemplate,
) -> EvalReport {
    assert_eq!(items.len(), answers.len());
    let mut per_group: BTreeMap<String, GroupScore> = BTreeMap::new();
    let mut confusion = ConfusionMatrix::new(
        vec!["Positive".into(), "Negative".into()],
        vec!["Positive".into(), "Negative".into()],
    );
    let mut n_unparseable = 0;
    for (item, answer) in items.iter().zip(answers) {
        let score = per_group.entry(item.dimension.code().to_string()).or_default();
        score.total += 1;
        if *answer == Some(item.ground_truth) {
            score.correct += 1;
        }
        let row = match item.ground_truth {
            Verdict::Positive => 0,
            Verdict::Negative => 1,
        };
        let col = match answer {
            Some(Verdict::Positive) => 0,
            Some(Verdict::Negative) => 1,
            None => {
                n_unparseable += 1;
                2
            }
        };
        confusion.counts[row][col] += 1;
    }
    EvalReport {
        kind: BenchKind::Morpho,
        macro_average: macro_average(&per_group),
        per_group,
        confusion,
        n_items: items.len() as u64,
        n_unparseable,
        model_name: model.model_name.clone(),
        run_config_hash: run_config_hash(template, &model.model_name),
    }
}

/// One line per category for the TBS prompt's `{category_list}`.
pub fn tbs_category_list() -> String {
    TbsCategory::ALL
        .iter()
        .map(|c| format!("- {}: {}", c.code(), c.display_name()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Scores TBS-classification items: per-category recall, macro average
/// over categories that appear, and the full 6×7 confusion matrix.
pub async fn evaluate_tbs(
    items: &[CytoBenchItem],
    model: &EndpointConfig,
    client: &ChatClient,
    template: &PromptTemplate,
) -> Result<EvalReport, BenchError> {
    if items.is_empty() {
        return Err(BenchError::NoItems);
    }
    check_unique_ids(items.iter().map(|i| i.item_id.as_str()))?;

    let prompt = {
        let mut values = BTreeMap::new();
        values.insert("category_list", tbs_category_list());
        template.render(&values)
    };
    let replies = collect_replies(
        items
            .iter()
            .map(|item| (item.item_id.as_str(), &item.tile, prompt.clone())),
        model,
        client,
        |prompt, bytes, media_type| {
            ChatRequest::new(model).user_text_image(prompt, bytes, media_type)
        },
    )
    .await;

    let answers: Vec<Option<TbsCategory>> = replies
        .iter()
        .map(|reply| reply.as_deref().and_then(extract_tbs_answer))
        .collect();
    Ok(score_tbs(items, &answers, model, template))
}

/// Pure scoring fold for the TBS benchmark.
pub fn score_tbs(
    items: &[CytoBenchItem],
    answers: &[Option<TbsCategory>],
    model: &EndpointConfig,
    template: &PromptTemplate,
) -> EvalReport {
    assert_eq!(items.len(), answers.len());
    let labels: Vec<String> = TbsCategory::ALL.iter().map(|c| c.code().to_string()).collect();
    let index_of = |category: TbsCategory| {
        TbsCategory::ALL
            .iter()
            .position(|c| *c == category)
            .expect("category indexed")
    };
    let mut per_group: BTreeMap<String, GroupScore> = BTreeMap::new();
    let mut confusion = ConfusionMatrix::new(labels.clone(), labels);
    let mut n_unparseable = 0;
    for (item, answer) in items.iter().zip(answers) {
        let score = per_group
            .entry(item.ground_truth.code().to_string())
            .or_default();
        score.total += 1;
        if *answer == Some(item.ground_truth) {
            score.correct += 1;
        }
        let row = index_of(item.ground_truth);
        let col = match answer {
            Some(category) => index_of(*category),
            None => {
                n_unparseable += 1;
                6
            }
        };
        confusion.counts[row][col] += 1;
    }
    EvalReport {
        kind: BenchKind::Tbs,
        macro_average: macro_average(&per_group),
        per_group,
        confusion,
        n_items: items.len() as u64,
        n_unparseable,
        model_name: model.model_name.clone(),
        run_config_hash: run_config_hash(template, &model.model_name),
    }
}

// ---------------------------------------------------------------------------
// inter-rater agreement

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterAnnotations {
    pub rater_id: String,
    pub verdicts: BTreeMap<String, Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgreementReport {
    /// Pairwise percent agreement per dimension, only for dimensions with
    /// at least one comparable rater pair.
    pub per_dimension: BTreeMap<String, f64>,
    pub average: f64,
    pub n_raters: u64,
    pub n_pairs: u64,
}

/// Pairwise percent agreement: per dimension, the share of (item,
/// rater-pair) combinations whose two verdicts match, pooled over all
/// items of that dimension; the average is the unweighted mean over
/// dimensions that have at least one pair.
pub fn inter_rater_agreement(
    raters: &[RaterAnnotations],
    items: &[MorphoBenchItem],
) -> Result<AgreementReport, BenchError> {
    if raters.len() < 2 {
        return Err(BenchError::InsufficientRaters {
            found: raters.len(),
        });
    }
    let known: BTreeSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
    for rater in raters {
        for item_id in rater.verdicts.keys() {
            if !known.contains(item_id.as_str()) {
                return Err(BenchError::UnknownItem {
                    rater: rater.rater_id.clone(),
                    item_id: item_id.clone(),
                });
            }
        }
    }

    let mut pairs: BTreeMap<&str, (u64, u64)> = BTreeMap::new(); // code -> (agree, total)
    for item in items {
        let verdicts: Vec<Verdict> = raters
            .iter()
            .filter_map(|r| r.verdicts.get(&item.item_id).copied())
            .collect();
        if verdicts.len() < 2 {
            continue;
        }
        let entry = pairs.entry(item.dimension.code()).or_default();
        for (i, a) in verdicts.iter().enumerate() {
            for b in &verdicts[i + 1..] {
                entry.1 += 1;
                if a == b {
                    entry.0 += 1;
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(BenchError::NoOverlap);
    }
    let per_dimension: BTreeMap<String, f64> = pairs
        .iter()
        .map(|(code, (agree, total))| (code.to_string(), *agree as f64 / *total as f64 * 100.0))
        .collect();
    let average = per_dimension.values().sum::<f64>() / per_dimension.len() as f64;
    Ok(AgreementReport {
        average,
        per_dimension,
        n_raters: raters.len() as u64,
        n_pairs: pairs.values().map(|(_, total)| total).sum(),
    })
}

// ---------------------------------------------------------------------------
// rendering

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

/// Renders a report either as a fixed-width table mirroring the benchmark's
/// column layout (group codes plus `Avg`, `–` for absent groups) or as one
/// pretty-printed JSON document. Both are deterministic.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut text =
                serde_json::to_string_pretty(report).expect("report serializes");
            text.push('\n');
            text
        }
        ReportFormat::Table => {
            let (title, codes): (&str, Vec<&str>) = match report.kind {
                BenchKind::Morpho => (
                    "Morphological perception benchmark",
                    MorphDimension::ALL.iter().map(|d| d.code()).collect(),
                ),
                BenchKind::Tbs => (
                    "TBS classification benchmark",
                    TbsCategory::ALL.iter().map(|c| c.code()).collect(),
                ),
            };
            let mut out = String::new();
            out.push_str(&format!("{title} — model: {}\n", report.model_name));
            out.push_str(&format!(
                "items: {}  unparseable: {}\n\n",
                report.n_items, report.n_unparseable
            ));
            let mut header = String::new();
            let mut values = String::new();
            for code in &codes {
                header.push_str(&format!("{code:<12}"));
                match report.per_group.get(*code) {
                    Some(score) => values.push_str(&format!("{:<12.1}", score.accuracy())),
                    None => values.push_str(&format!("{:<12}", "–")),
                }
            }
            header.push_str("Avg");
            values.push_str(&format!("{:.1}", report.macro_average));
            out.push_str(&header);
            out.push('\n');
            out.push_str(&values);
            out.push_str("\n\nConfusion (rows = truth, columns = prediction):\n");
            out.push_str(&format!("{:<12}", ""));
            for label in &report.confusion.prediction_labels {
                out.push_str(&format!("{label:<12}"));
            }
            out.push('\n');
            for (label, row) in report
                .confusion
                .truth_labels
                .iter()
                .zip(&report.confusion.counts)
            {
                out.push_str(&format!("{label:<12}"));
                for count in row {
                    out.push_str(&format!("{count:<12}"));
                }
                out.push('\n');
            }
            out
        }
    }
}

/// Renders an agreement report in the selected format.
pub fn render_agreement(report: &AgreementReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut text =
                serde_json::to_string_pretty(report).expect("report serializes");
            text.push('\n');
            text
        }
        ReportFormat::Table => {
            let mut out = String::new();
            out.push_str(&format!(
                "Inter-rater agreement — raters: {}  pairs: {}\n\n",
                report.n_raters, report.n_pairs
            ));
            let mut header = String::new();
            let mut values = String::new();
            for dim in MorphDimension::ALL {
                header.push_str(&format!("{:<12}", dim.code()));
                match report.per_dimension.get(dim.code()) {
                    Some(pct) => values.push_str(&format!("{pct:<12.1}")),
                    None => values.push_str(&format!("{:<12}", "–")),
                }
            }
            header.push_str("Avg");
            values.push_str(&format!("{:.1}", report.average));
            out.push_str(&header);
            out.push('\n');
            out.push_str(&values);
            out.push('\n');
            out
        }
    }
}

// ---------------------------------------------------------------------------
// manifest loaders

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(line).map_err(|err| {
            BenchError::ManifestInvalid(format!("{} line {}: {err}", path.display(), idx + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn load_morpho_items(path: &Path) -> Result<Vec<MorphoBenchItem>, BenchError> {
    let items: Vec<MorphoBenchItem> = load_jsonl(path)?;
    if items.is_empty() {
        return Err(BenchError::NoItems);
    }
    check_unique_ids(items.iter().map(|i| i.item_id.as_str()))?;
    Ok(items)
}

pub fn load_tbs_items(path: &Path) -> Result<Vec<CytoBenchItem>, BenchError> {
    let items: Vec<CytoBenchItem> = load_jsonl(path)?;
    if items.is_empty() {
        return Err(BenchError::NoItems);
    }
    check_unique_ids(items.iter().map(|i| i.item_id.as_str()))?;
    Ok(items)
}

/// Loads one rater's verdicts from a line-delimited file of
/// `{"item_id": ..., "verdict": ...}` entries; the rater id is the file
/// stem.
pub fn load_rater_file(path: &Path) -> Result<RaterAnnotations, BenchError> {
    #[derive(Deserialize)]
    struct Line {
        item_id: String,
        verdict: Verdict,
    }
    let lines: Vec<Line> = load_jsonl(path)?;
    let rater_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "rater".to_string());
    let mut verdicts = BTreeMap::new();
    for line in lines {
        if verdicts.insert(line.item_id.clone(), line.verdict).is_some() {
            return Err(BenchError::ManifestInvalid(format!(
                "rater `{rater_id}` lists item `{}` twice",
                line.item_id
            )));
        }
    }
    Ok(RaterAnnotations { rater_id, verdicts })
}
