//! Tests for the evaluation harness: answer extraction, scoring against an
//! independent recount oracle, inter-rater agreement, report rendering, and
//! the end-to-end mock-model paths.

use std::collections::BTreeMap;
use std::path::Path;

use cytoscribe::bench::{
    evaluate_morpho, evaluate_tbs, extract_binary_answer, extract_tbs_answer,
    inter_rater_agreement, load_morpho_items, load_rater_file, load_tbs_items, render_report,
    score_morpho, score_tbs, BenchError, BenchKind, CytoBenchItem, EvalReport, MorphoBenchItem,
    RaterAnnotations, ReportFormat,
};
use cytoscribe::config::PromptSet;
use cytoscribe::endpoints::{ChatClient, EndpointConfig};
use cytoscribe::pipeline::ImageTile;
use cytoscribe::schema::{Lexicon, MorphDimension, TbsCategory, Verdict};
use cytoscribe::testkit::{MockReply, MockServer};
use proptest::prelude::*;

use MorphDimension as Dim;

fn tile(id: &str) -> ImageTile {
    ImageTile {
        tile_id: id.into(),
        uri: format!("/unused/{id}.png"),
        source_slide_id: "slide".into(),
        region: None,
        media_type: "image/png".into(),
    }
}

fn morpho_item(id: &str, dimension: Dim, truth: Verdict) -> MorphoBenchItem {
    MorphoBenchItem {
        item_id: id.into(),
        tile: tile(id),
        dimension,
        ground_truth: truth,
    }
}

fn tbs_item(id: &str, truth: TbsCategory) -> CytoBenchItem {
    CytoBenchItem {
        item_id: id.into(),
        tile: tile(id),
        ground_truth: truth,
    }
}

fn offline_model() -> EndpointConfig {
    EndpointConfig {
        id: "scorer".into(),
        base_url: url::Url::parse("http://localhost:9/").unwrap(),
        model_name: "offline-model".into(),
        api_key_env: None,
        max_in_flight: 1,
        requests_per_minute: None,
        timeout_secs: 1.0,
        max_retries: 0,
        retry_backoff_base_ms: 1,
        temperature: 0.0,
        seed: None,
        max_output_tokens: 16,
    }
}

// ---------------------------------------------------------------------------
// extract_binary_answer
// ---------------------------------------------------------------------------

#[test]
fn binary_extraction_resolves_explicit_tokens() {
    let lexicon = Lexicon::default();
    let ne = Dim::NuclearEnlargement;

    assert_eq!(
        extract_binary_answer("Yes, the nucleus is enlarged.", ne, &lexicon),
        Some(Verdict::Positive)
    );
    assert_eq!(
        extract_binary_answer("No.", ne, &lexicon),
        Some(Verdict::Negative)
    );
    assert_eq!(
        extract_binary_answer("NO, nothing of the sort", ne, &lexicon),
        Some(Verdict::Negative),
        "token matching is case-insensitive"
    );
    assert_eq!(extract_binary_answer("", ne, &lexicon), None);
    assert_eq!(extract_binary_answer("   \n ", ne, &lexicon), None);

    // Both tokens present with neither leading: ambiguous.
    assert_eq!(
        extract_binary_answer("Well, yes and no.", ne, &lexicon),
        None
    );
}

#[test]
fn binary_extraction_reads_option_letters() {
    let lexicon = Lexicon::default();
    let ne = Dim::NuclearEnlargement;

    assert_eq!(
        extract_binary_answer("A.", ne, &lexicon),
        Some(Verdict::Positive)
    );
    assert_eq!(
        extract_binary_answer("B) the nuclei look normal here", ne, &lexicon),
        Some(Verdict::Negative)
    );
    assert_eq!(
        extract_binary_answer("a", ne, &lexicon),
        Some(Verdict::Positive)
    );
    // "A" as an article is not an option pick: it falls through to the
    // later stages, which find no NE content in a chromatin sentence.
    assert_eq!(
        extract_binary_answer("A coarse chromatin pattern dominates.", ne, &lexicon),
        None
    );
}

#[test]
fn binary_extraction_matches_polarity_labels_for_the_queried_dimension() {
    let lexicon = Lexicon::default();

    assert_eq!(
        extract_binary_answer(
            "The chromatin appears coarse.",
            Dim::ChromatinTexture,
            &lexicon
        ),
        Some(Verdict::Positive)
    );
    // Same reply judged for NE: no NE content anywhere → unparseable. The
    // CT content must not leak across dimensions.
    assert_eq!(
        extract_binary_answer(
            "The chromatin appears coarse.",
            Dim::NuclearEnlargement,
            &lexicon
        ),
        None
    );

    // A negated label does not count as a label hit; the lexicon fallback
    // then reads the negation phrase correctly.
    assert_eq!(
        extract_binary_answer(
            "The nuclei are not enlarged.",
            Dim::NuclearEnlargement,
            &lexicon
        ),
        Some(Verdict::Negative)
    );

    // Lexicon fallback: phrasing that matches no explicit token or label
    // but does match a lexicon phrase for the queried dimension.
    assert_eq!(
        extract_binary_answer(
            "There is marked nuclear enlargement throughout.",
            Dim::NuclearEnlargement,
            &lexicon
        ),
        Some(Verdict::Positive)
    );
    assert_eq!(
        extract_binary_answer(
            "Perinuclear halos surround many nuclei.",
            Dim::Koilocyte,
            &lexicon
        ),
        Some(Verdict::Positive)
    );
}

// ---------------------------------------------------------------------------
// extract_tbs_answer
// ---------------------------------------------------------------------------

#[test]
fn tbs_extraction_follows_the_spec_conventions() {
    assert_eq!(extract_tbs_answer("Diagnosis: LSIL."), Some(TbsCategory::Lsil));
    assert_eq!(extract_tbs_answer("This could be LSIL or HSIL."), None);
    assert_eq!(
        extract_tbs_answer("negative for intraepithelial lesion or malignancy"),
        Some(TbsCategory::Nilm)
    );
    assert_eq!(extract_tbs_answer(""), None);
    assert_eq!(extract_tbs_answer("I see squamous cells."), None);

    // Code matching is case-insensitive.
    assert_eq!(extract_tbs_answer("likely hsil"), Some(TbsCategory::Hsil));
    assert_eq!(extract_tbs_answer("NILM"), Some(TbsCategory::Nilm));
    assert_eq!(extract_tbs_answer("ASC-US"), Some(TbsCategory::AscUs));
    assert_eq!(extract_tbs_answer("ASCUS"), Some(TbsCategory::AscUs));
    assert_eq!(extract_tbs_answer("AGC"), Some(TbsCategory::Agc));

    // Containment pruning: the HSIL inside "cannot exclude HSIL" belongs
    // to the longer ASC-H phrase and must not register as HSIL.
    assert_eq!(
        extract_tbs_answer("Atypical squamous cells — cannot exclude HSIL."),
        Some(TbsCategory::AscH)
    );
    assert_eq!(extract_tbs_answer("ASC-H"), Some(TbsCategory::AscH));

    // Full names map to their categories.
    assert_eq!(
        extract_tbs_answer("low-grade squamous intraepithelial lesion"),
        Some(TbsCategory::Lsil)
    );
    assert_eq!(
        extract_tbs_answer("High grade squamous intraepithelial lesion is favored."),
        Some(TbsCategory::Hsil)
    );
    assert_eq!(
        extract_tbs_answer("atypical glandular cells"),
        Some(TbsCategory::Agc)
    );

    // Repeated mentions of one category are fine; two distinct are not.
    assert_eq!(
        extract_tbs_answer("LSIL. To repeat: LSIL."),
        Some(TbsCategory::Lsil)
    );
    assert_eq!(extract_tbs_answer("NILM or maybe AGC"), None);

    // Substring hygiene: the "agc" inside an unrelated word never fires.
    assert_eq!(extract_tbs_answer("the bagcheck protocol"), None);
}

// ---------------------------------------------------------------------------
// scoring vs an independent recount oracle
// ---------------------------------------------------------------------------

/// Naive recount, written independently of the scoring fold: group items,
/// count matches, average the represented groups' percentages.
fn oracle_scores<K: Ord + Copy, V: PartialEq + Copy, T>(
    items: &[T],
    answers: &[Option<V>],
    key: impl Fn(&T) -> K,
    truth: impl Fn(&T) -> V,
) -> (BTreeMap<K, (u64, u64)>, f64) {
    let mut groups: BTreeMap<K, (u64, u64)> = BTreeMap::new();
    for (item, answer) in items.iter().zip(answers) {
        let entry = groups.entry(key(item)).or_insert((0, 0));
        entry.1 += 1;
        if *answer == Some(truth(item)) {
            entry.0 += 1;
        }
    }
    let mean = groups
        .values()
        .map(|(correct, total)| *correct as f64 / *total as f64 * 100.0)
        .sum::<f64>()
        / groups.len() as f64;
    (groups, mean)
}

#[test]
fn morpho_scoring_matches_naive_recount() {
    // A deterministic pseudo-random scatter of ≤100 items over dimensions,
    // truths, and answer kinds (correct / flipped / unparseable).
    let mut state = 0x9E3779B97F4A7C15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut items = Vec::new();
    let mut answers: Vec<Option<Verdict>> = Vec::new();
    for i in 0..97 {
        let dim = Dim::ALL[(next() % 9) as usize];
        let truth = if next() % 2 == 0 { Verdict::Positive } else { Verdict::Negative };
        items.push(morpho_item(&format!("item-{i}"), dim, truth));
        answers.push(match next() % 4 {
            0 | 1 => Some(truth),
            2 => Some(match truth {
                Verdict::Positive => Verdict::Negative,
                Verdict::Negative => Verdict::Positive,
            }),
            _ => None,
        });
    }

    let model = offline_model();
    let template = PromptSet::default().bench_morpho;
    let report = score_morpho(&items, &answers, &model, &template);

    let (oracle_groups, oracle_macro) =
        oracle_scores(&items, &answers, |i| i.dimension, |i| i.ground_truth);
    assert_eq!(report.per_group.len(), oracle_groups.len());
    for (dim, (correct, total)) in &oracle_groups {
        let group = &report.per_group[dim.code()];
        assert_eq!((group.correct, group.total), (*correct, *total), "{}", dim.code());
    }
    assert!((report.macro_average - oracle_macro).abs() < 1e-9);
    assert_eq!(report.n_items, 97);
    assert_eq!(report.kind, BenchKind::Morpho);

    // Confusion conservation.
    assert_eq!(report.confusion.total(), 97);
    let n_unparseable = answers.iter().filter(|a| a.is_none()).count() as u64;
    assert_eq!(report.n_unparseable, n_unparseable);
    assert_eq!(report.confusion.unparseable_total(), n_unparseable);

    // Accuracy bounds and macro range.
    let accuracies: Vec<f64> = report.per_group.values().map(|g| g.accuracy()).collect();
    for accuracy in &accuracies {
        assert!((0.0..=100.0).contains(accuracy));
    }
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(report.macro_average >= min - 1e-9 && report.macro_average <= max + 1e-9);
}

#[test]
fn tbs_scoring_matches_naive_recount() {
    let mut state = 0xA5A5A5A55A5A5A5Au64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut items = Vec::new();
    let mut answers: Vec<Option<TbsCategory>> = Vec::new();
    for i in 0..90 {
        let truth = TbsCategory::ALL[(next() % 6) as usize];
        items.push(tbs_item(&format!("case-{i}"), truth));
        answers.push(match next() % 4 {
            0 | 1 => Some(truth),
            2 => Some(TbsCategory::ALL[(next() % 6) as usize]),
            _ => None,
        });
    }

    let model = offline_model();
    let template = PromptSet::default().bench_tbs;
    let report = score_tbs(&items, &answers, &model, &template);

    let (oracle_groups, oracle_macro) =
        oracle_scores(&items, &answers, |i| i.ground_truth, |i| i.ground_truth);
    for (category, (correct, total)) in &oracle_groups {
        let group = &report.per_group[category.code()];
        assert_eq!((group.correct, group.total), (*correct, *total));
    }
    assert!((report.macro_average - oracle_macro).abs() < 1e-9);

    // 6×7 confusion with exact row/column conservation.
    assert_eq!(report.confusion.truth_labels.len(), 6);
    assert_eq!(report.confusion.prediction_labels.len(), 7);
    assert_eq!(report.confusion.prediction_labels[6], "Unparseable");
    assert_eq!(report.confusion.total(), 90);
    assert_eq!(
        report.confusion.unparseable_total(),
        answers.iter().filter(|a| a.is_none()).count() as u64
    );
    // Row sums equal per-class totals.
    for (row, label) in report.confusion.counts.iter().zip(&report.confusion.truth_labels) {
        assert_eq!(row.iter().sum::<u64>(), report.per_group[label].total);
    }
}

#[test]
fn scoring_is_permutation_invariant() {
    let items: Vec<MorphoBenchItem> = (0..30)
        .map(|i| {
            morpho_item(
                &format!("item-{i}"),
                Dim::ALL[i % 9],
                if i % 3 == 0 { Verdict::Positive } else { Verdict::Negative },
            )
        })
        .collect();
    let answers: Vec<Option<Verdict>> = (0..30)
        .map(|i| match i % 4 {
            0 => None,
            1 => Some(Verdict::Positive),
            _ => Some(Verdict::Negative),
        })
        .collect();

    let model = offline_model();
    let template = PromptSet::default().bench_morpho;
    let forward = score_morpho(&items, &answers, &model, &template);

    let mut paired: Vec<(MorphoBenchItem, Option<Verdict>)> =
        items.into_iter().zip(answers).collect();
    paired.reverse();
    paired.swap(3, 17);
    let (shuffled_items, shuffled_answers): (Vec<_>, Vec<_>) = paired.into_iter().unzip();
    let shuffled = score_morpho(&shuffled_items, &shuffled_answers, &model, &template);

    assert_eq!(forward.per_group, shuffled.per_group);
    assert_eq!(forward.macro_average, shuffled.macro_average);
    assert_eq!(forward.confusion, shuffled.confusion);
}

#[test]
fn single_nilm_item_scores_macro_100_over_represented_classes() {
    let items = vec![tbs_item("only", TbsCategory::Nilm)];
    let answers = vec![Some(TbsCategory::Nilm)];
    let model = offline_model();
    let template = PromptSet::default().bench_tbs;
    let report = score_tbs(&items, &answers, &model, &template);

    assert_eq!(report.per_group.len(), 1);
    assert_eq!(report.per_group["NILM"].accuracy(), 100.0);
    assert_eq!(report.macro_average, 100.0);
}

// ---------------------------------------------------------------------------
// inter-rater agreement
// ---------------------------------------------------------------------------

fn rater(id: &str, verdicts: &[(&str, Verdict)]) -> RaterAnnotations {
    RaterAnnotations {
        rater_id: id.into(),
        verdicts: verdicts
            .iter()
            .map(|(item, verdict)| (item.to_string(), *verdict))
            .collect(),
    }
}

#[test]
fn identical_raters_agree_100() {
    let items: Vec<MorphoBenchItem> = (0..10)
        .map(|i| morpho_item(&format!("i{i}"), Dim::ALL[i % 3], Verdict::Positive))
        .collect();
    let verdicts: Vec<(&str, Verdict)> = [
        "i0", "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8", "i9",
    ]
    .iter()
    .enumerate()
    .map(|(i, id)| {
        (
            *id,
            if i % 2 == 0 { Verdict::Positive } else { Verdict::Negative },
        )
    })
    .collect();

    let report =
        inter_rater_agreement(&[rater("r1", &verdicts), rater("r2", &verdicts)], &items).unwrap();
    assert_eq!(report.average, 100.0, "identical raters agree exactly");
    for (code, pct) in &report.per_dimension {
        assert_eq!(*pct, 100.0, "dimension {code}");
    }
    assert_eq!(report.n_raters, 2);
    assert_eq!(report.n_pairs, 10);
}

#[test]
fn three_of_ten_disagreements_score_70() {
    let items: Vec<MorphoBenchItem> = (0..10)
        .map(|i| morpho_item(&format!("i{i}"), Dim::NuclearEnlargement, Verdict::Positive))
        .collect();
    let all_positive: Vec<(&str, Verdict)> = [
        "i0", "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8", "i9",
    ]
    .iter()
    .map(|id| (*id, Verdict::Positive))
    .collect();
    let mut three_flipped = all_positive.clone();
    for flip in &mut three_flipped[..3] {
        flip.1 = Verdict::Negative;
    }

    let report = inter_rater_agreement(
        &[rater("r1", &all_positive), rater("r2", &three_flipped)],
        &items,
    )
    .unwrap();
    assert_eq!(report.per_dimension.len(), 1);
    assert_eq!(report.per_dimension["NE"], 70.0);
    assert_eq!(report.average, 70.0);
}

#[test]
fn two_agreeing_of_three_raters_give_one_third() {
    let items = vec![morpho_item("solo", Dim::Koilocyte, Verdict::Positive)];
    let raters = [
        rater("r1", &[("solo", Verdict::Positive)]),
        rater("r2", &[("solo", Verdict::Positive)]),
        rater("r3", &[("solo", Verdict::Negative)]),
    ];
    let report = inter_rater_agreement(&raters, &items).unwrap();
    // C(3,2) = 3 pairs, exactly one agrees.
    assert_eq!(report.n_pairs, 3);
    assert!((report.per_dimension["Koilocyte"] - 100.0 / 3.0).abs() < 1e-9);
    assert!((report.average - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn agreement_error_paths() {
    let items = vec![morpho_item("a", Dim::NuclearEnlargement, Verdict::Positive)];

    let err = inter_rater_agreement(&[rater("r1", &[("a", Verdict::Positive)])], &items)
        .unwrap_err();
    assert!(matches!(err, BenchError::InsufficientRaters { found: 1 }));

    let err = inter_rater_agreement(
        &[
            rater("r1", &[("a", Verdict::Positive)]),
            rater("r2", &[("ghost", Verdict::Positive)]),
        ],
        &items,
    )
    .unwrap_err();
    match err {
        BenchError::UnknownItem { rater, item_id } => {
            assert_eq!(rater, "r2");
            assert_eq!(item_id, "ghost");
        }
        other => panic!("expected UnknownItem, got {other:?}"),
    }

    // Two raters with disjoint coverage: no comparable pair anywhere.
    let items = vec![
        morpho_item("a", Dim::NuclearEnlargement, Verdict::Positive),
        morpho_item("b", Dim::NuclearEnlargement, Verdict::Positive),
    ];
    let err = inter_rater_agreement(
        &[
            rater("r1", &[("a", Verdict::Positive)]),
            rater("r2", &[("b", Verdict::Positive)]),
        ],
        &items,
    )
    .unwrap_err();
    assert!(matches!(err, BenchError::NoOverlap));
}

#[test]
fn raters_covering_different_subsets_pool_only_shared_items() {
    // Items i0 and i1; r3 only saw i0. Pairs: i0 has C(3,2)=3, i1 has 1.
    let items = vec![
        morpho_item("i0", Dim::NuclearEnlargement, Verdict::Positive),
        morpho_item("i1", Dim::NuclearEnlargement, Verdict::Positive),
    ];
    let raters = [
        rater("r1", &[("i0", Verdict::Positive), ("i1", Verdict::Positive)]),
        rater("r2", &[("i0", Verdict::Positive), ("i1", Verdict::Negative)]),
        rater("r3", &[("i0", Verdict::Negative)]),
    ];
    let report = inter_rater_agreement(&raters, &items).unwrap();
    assert_eq!(report.n_pairs, 4);
    // Agreeing pairs: i0 (r1,r2) only → 1; i1 (r1,r2) disagree → 0.
    assert!((report.per_dimension["NE"] - 25.0).abs() < 1e-9);
}

// ---------------------------------------------------------------------------
// report rendering
// ---------------------------------------------------------------------------

#[test]
fn reports_render_deterministically_with_placeholder_columns() {
    // Only two dimensions represented: the other seven columns print "–".
    let items = vec![
        morpho_item("a", Dim::NuclearEnlargement, Verdict::Positive),
        morpho_item("b", Dim::NuclearMembrane, Verdict::Negative),
    ];
    let answers = vec![Some(Verdict::Positive), None];
    let model = offline_model();
    let template = PromptSet::default().bench_morpho;
    let report = score_morpho(&items, &answers, &model, &template);

    let table_once = render_report(&report, ReportFormat::Table);
    let table_twice = render_report(&report, ReportFormat::Table);
    assert_eq!(table_once, table_twice);

    assert!(table_once.contains("model: offline-model"));
    assert!(table_once.contains("items: 2  unparseable: 1"));
    assert_eq!(
        table_once.matches('–').count(),
        7,
        "seven absent dimensions render as dashes:\n{table_once}"
    );
    // Header carries every dimension code plus the average column.
    for dim in Dim::ALL {
        assert!(table_once.contains(dim.code()));
    }
    assert!(table_once.contains("Avg"));
    assert!(table_once.contains("100.0"), "NE accuracy");
    assert!(table_once.contains("50.0"), "macro over the two groups");

    let json_text = render_report(&report, ReportFormat::Json);
    assert_eq!(json_text, render_report(&report, ReportFormat::Json));
    let parsed: EvalReport = serde_json::from_str(&json_text).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn morpho_table_golden() {
    let items = vec![
        morpho_item("a", Dim::NuclearEnlargement, Verdict::Positive),
        morpho_item("b", Dim::NuclearEnlargement, Verdict::Positive),
    ];
    let answers = vec![Some(Verdict::Positive), Some(Verdict::Negative)];
    let model = offline_model();
    let template = PromptSet::default().bench_morpho;
    let report = score_morpho(&items, &answers, &model, &template);

    // Every confusion cell is left-padded to 12 columns, including the last
    // in each row, so those rows carry trailing spaces.
    let expected = "\
Morphological perception benchmark — model: offline-model
items: 2  unparseable: 0

NE          NA          NH          Koilocyte   CT          Nucleolus   NC          NCR         NM          Avg
50.0        –           –           –           –           –           –           –           –           50.0

Confusion (rows = truth, columns = prediction):
            Positive    Negative    Unparseable \n\
Positive    1           1           0           \n\
Negative    0           0           0           \n";
    assert_eq!(render_report(&report, ReportFormat::Table), expected);
}

// ---------------------------------------------------------------------------
// end-to-end evaluation against a mock model
// ---------------------------------------------------------------------------

#[tokio::test]
async fn always_correct_mock_scores_100_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    // 18 items: each dimension once per truth; the tile pixels carry the
    // expected answer so the mock can always be right.
    let mut items = Vec::new();
    for (i, dim) in Dim::ALL.iter().enumerate() {
        for (j, truth) in [Verdict::Positive, Verdict::Negative].into_iter().enumerate() {
            let id = format!("m-{i}-{j}");
            let file = tmp.path().join(format!("{id}.png"));
            let answer = match truth {
                Verdict::Positive => "yes",
                Verdict::Negative => "no",
            };
            std::fs::write(&file, answer).unwrap();
            let mut item = morpho_item(&id, *dim, truth);
            item.tile.uri = file.display().to_string();
            items.push(item);
        }
    }

    let server = MockServer::start(|req| {
        MockReply::text(req.image_text().unwrap_or_default())
    })
    .await;
    let model = server.endpoint("scored-model");
    let prompts = PromptSet::default();

    let report = evaluate_morpho(
        &items,
        &model,
        &ChatClient::new(),
        &prompts.bench_morpho,
        &Lexicon::default(),
    )
    .await
    .unwrap();

    assert_eq!(server.hits(), 18);
    assert_eq!(report.n_items, 18);
    assert_eq!(report.n_unparseable, 0);
    assert_eq!(report.macro_average, 100.0);
    assert_eq!(report.per_group.len(), 9);
    for (code, group) in &report.per_group {
        assert_eq!(group.accuracy(), 100.0, "dimension {code}");
    }
}

#[tokio::test]
async fn endpoint_exhaustion_marks_items_unparseable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut items = Vec::new();
    for i in 0..4 {
        let id = format!("t-{i}");
        let file = tmp.path().join(format!("{id}.png"));
        std::fs::write(&file, format!("pix-{i}")).unwrap();
        let mut item = morpho_item(&id, Dim::NuclearEnlargement, Verdict::Positive);
        item.tile.uri = file.display().to_string();
        items.push(item);
    }

    // pix-2 always 500s; the rest answer correctly.
    let server = MockServer::start(|req| {
        if req.image_text().unwrap_or_default() == "pix-2" {
            MockReply::status(500)
        } else {
            MockReply::text("Yes.")
        }
    })
    .await;
    let mut model = server.endpoint("flaky-model");
    model.max_retries = 1;
    let prompts = PromptSet::default();

    let report = evaluate_morpho(
        &items,
        &model,
        &ChatClient::new(),
        &prompts.bench_morpho,
        &Lexicon::default(),
    )
    .await
    .unwrap();
    assert_eq!(report.n_items, 4);
    assert_eq!(report.n_unparseable, 1, "the exhausted item scores unparseable");
    assert_eq!(report.per_group["NE"].correct, 3);
    assert!((report.macro_average - 75.0).abs() < 1e-9);
}

#[tokio::test]
async fn tbs_evaluation_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut items = Vec::new();
    for (i, truth) in TbsCategory::ALL.into_iter().enumerate() {
        let id = format!("c-{i}");
        let file = tmp.path().join(format!("{id}.png"));
        std::fs::write(&file, truth.code()).unwrap();
        let mut item = tbs_item(&id, truth);
        item.tile.uri = file.display().to_string();
        items.push(item);
    }

    let server = MockServer::start(|req| {
        // The prompt must list the categories; echo the truth code back.
        if !req.text.contains("NILM") || !req.text.contains("AGC") {
            return MockReply::status(422);
        }
        MockReply::text(format!(
            "Diagnosis: {}.",
            req.image_text().unwrap_or_default()
        ))
    })
    .await;
    let model = server.endpoint("tbs-model");
    let prompts = PromptSet::default();

    let report = evaluate_tbs(&items, &model, &ChatClient::new(), &prompts.bench_tbs)
        .await
        .unwrap();
    assert_eq!(report.kind, BenchKind::Tbs);
    assert_eq!(report.macro_average, 100.0);
    assert_eq!(report.per_group.len(), 6);
    // Diagonal confusion matrix.
    for (row_idx, row) in report.confusion.counts.iter().enumerate() {
        for (col_idx, count) in row.iter().enumerate() {
            assert_eq!(*count, u64::from(row_idx == col_idx));
        }
    }
}

#[tokio::test]
async fn empty_and_duplicate_item_lists_are_rejected() {
    let model = offline_model();
    let prompts = PromptSet::default();
    let client = ChatClient::new();

    let err = evaluate_morpho(&[], &model, &client, &prompts.bench_morpho, &Lexicon::default())
        .await
        .unwrap_err();
    assert!(matches!(err, BenchError::NoItems));

    let dup = vec![
        morpho_item("same", Dim::NuclearEnlargement, Verdict::Positive),
        morpho_item("same", Dim::NuclearAtypia, Verdict::Negative),
    ];
    let err = evaluate_morpho(&dup, &model, &client, &prompts.bench_morpho, &Lexicon::default())
        .await
        .unwrap_err();
    assert!(matches!(err, BenchError::DuplicateItem(id) if id == "same"));

    let err = evaluate_tbs(&[], &model, &client, &prompts.bench_tbs)
        .await
        .unwrap_err();
    assert!(matches!(err, BenchError::NoItems));
}

// ---------------------------------------------------------------------------
// manifest loaders
// ---------------------------------------------------------------------------

#[test]
fn benchmark_manifests_load_and_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("morpho.jsonl");

    let a = serde_json::to_string(&morpho_item("a", Dim::NuclearEnlargement, Verdict::Positive))
        .unwrap();
    let b = serde_json::to_string(&morpho_item("b", Dim::Koilocyte, Verdict::Negative)).unwrap();
    std::fs::write(&path, format!("{a}\n\n{b}\n")).unwrap();
    let items = load_morpho_items(&path).unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0].dimension, Dim::NuclearEnlargement);

    std::fs::write(&path, format!("{a}\n{a}\n")).unwrap();
    assert!(matches!(
        load_morpho_items(&path).unwrap_err(),
        BenchError::DuplicateItem(id) if id == "a"
    ));

    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_morpho_items(&path).unwrap_err(), BenchError::NoItems));

    std::fs::write(&path, "garbage\n").unwrap();
    let err = load_morpho_items(&path).unwrap_err();
    assert!(err.to_string().contains("line 1"), "got {err}");

    let tbs_path = tmp.path().join("tbs.jsonl");
    let c = serde_json::to_string(&tbs_item("c", TbsCategory::Hsil)).unwrap();
    std::fs::write(&tbs_path, format!("{c}\n")).unwrap();
    let items = load_tbs_items(&tbs_path).unwrap();
    assert_eq!(items[0].ground_truth, TbsCategory::Hsil);

    assert!(matches!(
        load_morpho_items(Path::new("/nonexistent/list.jsonl")).unwrap_err(),
        BenchError::Io { .. }
    ));
}

#[test]
fn rater_files_take_their_id_from_the_file_stem() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("alice.jsonl");
    std::fs::write(
        &path,
        "{\"item_id\":\"i0\",\"verdict\":\"positive\"}\n{\"item_id\":\"i1\",\"verdict\":\"negative\"}\n",
    )
    .unwrap();
    let rater = load_rater_file(&path).unwrap();
    assert_eq!(rater.rater_id, "alice");
    assert_eq!(rater.verdicts.len(), 2);
    assert_eq!(rater.verdicts["i0"], Verdict::Positive);
    assert_eq!(rater.verdicts["i1"], Verdict::Negative);

    // Duplicate item rows in one rater file are rejected.
    std::fs::write(
        &path,
        "{\"item_id\":\"i0\",\"verdict\":\"positive\"}\n{\"item_id\":\"i0\",\"verdict\":\"negative\"}\n",
    )
    .unwrap();
    let err = load_rater_file(&path).unwrap_err();
    assert!(err.to_string().contains("twice"), "got {err}");
}

// ---------------------------------------------------------------------------
// property tests
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Scoring equals the naive recount for arbitrary item/answer vectors.
    #[test]
    fn morpho_scores_match_oracle_for_arbitrary_inputs(
        rows in prop::collection::vec((0usize..9, any::<bool>(), 0u8..3), 1..100)
    ) {
        let items: Vec<MorphoBenchItem> = rows
            .iter()
            .enumerate()
            .map(|(i, (dim, truth, _))| {
                morpho_item(
                    &format!("p-{i}"),
                    Dim::ALL[*dim],
                    if *truth { Verdict::Positive } else { Verdict::Negative },
                )
            })
            .collect();
        let answers: Vec<Option<Verdict>> = rows
            .iter()
            .map(|(_, truth, kind)| match kind {
                0 => Some(if *truth { Verdict::Positive } else { Verdict::Negative }),
                1 => Some(if *truth { Verdict::Negative } else { Verdict::Positive }),
                _ => None,
            })
            .collect();

        let model = offline_model();
        let template = PromptSet::default().bench_morpho;
        let report = score_morpho(&items, &answers, &model, &template);

        let (groups, oracle_macro) =
            oracle_scores(&items, &answers, |i| i.dimension, |i| i.ground_truth);
        prop_assert_eq!(report.per_group.len(), groups.len());
        for (dim, (correct, total)) in &groups {
            let group = &report.per_group[dim.code()];
            prop_assert_eq!((group.correct, group.total), (*correct, *total));
        }
        prop_assert!((report.macro_average - oracle_macro).abs() < 1e-9);
        prop_assert_eq!(report.confusion.total(), items.len() as u64);
        prop_assert_eq!(
            report.confusion.unparseable_total(),
            answers.iter().filter(|a| a.is_none()).count() as u64
        );
    }

    /// Extraction never panics and always lands in {Some(P), Some(N), None}.
    #[test]
    fn binary_extraction_total_function(raw in ".{0,120}", dim in 0usize..9) {
        let _ = extract_binary_answer(&raw, Dim::ALL[dim], &Lexicon::default());
    }

    #[test]
    fn tbs_extraction_total_function(raw in ".{0,120}") {
        let _ = extract_tbs_answer(&raw);
    }
}
