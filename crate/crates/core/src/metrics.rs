//! Answer normalisation, micro precision/recall/F1 and perturbation flip
//! rates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetShard, QAItem, QaKind};
use crate::error::{Error, Result};

/// Surface forms per disease label. Synonym lists are lowercase and may
/// span several words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelLexicon {
    pub synonyms: BTreeMap<String, Vec<String>>,
}

impl Default for LabelLexicon {
    fn default() -> Self {
        let table: &[(&str, &[&str])] = &[
            ("atelectasis", &["atelectasis", "collapse"]),
            ("cardiomegaly", &["cardiomegaly", "enlarged heart"]),
            ("nodule/mass", &["nodule/mass", "nodule", "mass", "nodules", "masses"]),
            ("pleural effusion", &["pleural effusion", "effusion"]),
            ("pneumonia", &["pneumonia"]),
            ("pulmonary fibrosis", &["pulmonary fibrosis", "fibrosis"]),
        ];
        Self::new(
            table
                .iter()
                .map(|(l, syn)| (l.to_string(), syn.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
        .expect("built-in lexicon is disjoint")
    }
}

impl LabelLexicon {
    pub fn new(synonyms: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (label, forms) in &synonyms {
            for form in forms {
                if let Some(other) = owner.insert(form.as_str(), label.as_str()) {
                    if other != label {
                        return Err(Error::InvalidConfig(format!(
                            "synonym `{form}` belongs to both `{other}` and `{label}`"
                        )));
                    }
                }
            }
        }
        Ok(Self { synonyms })
    }

    /// A lexicon whose only surface form per label is the label itself.
    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        Self {
            synonyms: labels.into_iter().map(|l| (l.clone(), vec![l])).collect(),
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.synonyms.keys().map(String::as_str)
    }
}

const NEGATIONS: [&str; 4] = ["no", "without", "not", "absent"];
const NEGATION_WINDOW: usize = 3;

fn is_punct(token: &str) -> bool {
    matches!(token, "," | "." | ";" | ":" | "?" | "!")
}

/// Lowercase word tokens; clause punctuation becomes its own token and `/`
/// stays inside words.
fn scan_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '/' || ch == '-' {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if matches!(ch, ',' | '.' | ';' | ':' | '?' | '!') {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Labels mentioned in `answer`. Longest surface form wins at each
/// position; a mention with a negation among the three preceding tokens of
/// the same clause is dropped.
pub fn extract_labels(answer: &str, lexicon: &LabelLexicon) -> BTreeSet<String> {
    let tokens = scan_tokens(answer);
    let mut forms: Vec<(Vec<String>, &str)> = lexicon
        .synonyms
        .iter()
        .flat_map(|(label, syn)| syn.iter().map(move |s| (scan_tokens(s), label.as_str())))
        .filter(|(toks, _)| !toks.is_empty())
        .collect();
    forms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));

    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = forms
            .iter()
            .find(|(form, _)| tokens[i..].starts_with(form));
        match hit {
            Some((form, label)) => {
                let negated = tokens[..i]
                    .iter()
                    .rev()
                    .take(NEGATION_WINDOW)
                    .take_while(|t| !is_punct(t))
                    .any(|t| NEGATIONS.contains(&t.as_str()));
                if !negated {
                    found.insert(label.to_string());
                }
                i += form.len();
            }
            None => i += 1,
        }
    }
    found
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YesNo {
    Yes,
    No,
    Unparseable,
}

pub fn normalize_yesno(answer: &str) -> YesNo {
    let lowered = answer.trim().to_lowercase();
    let first = lowered
        .split(|c: char| c.is_whitespace() || c == ',' || c == '.' || c == '!' || c == ';')
        .find(|t| !t.is_empty())
        .unwrap_or("");
    let first = first.trim_matches(|c: char| !c.is_alphanumeric());
    match first {
        "yes" => YesNo::Yes,
        "no" => YesNo::No,
        _ => YesNo::Unparseable,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub items: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, items: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1, tp, fp, fn_, items }
    }
}

/// Micro-averaged precision/recall/F1 with confusion cells pooled over all
/// items.
pub fn micro_prf(predicted: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: gold.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_, gold.len()))
}

/// Fraction of perturbed answers that are "no". Every `before` answer must be
/// "yes"; unparseable `after` answers are not flips.
pub fn flip_rate(before: &[YesNo], after: &[YesNo]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            left: before.len(),
            right: after.len(),
        });
    }
    if before.is_empty() {
        return Err(Error::EmptyInput("flip rate needs at least one true positive"));
    }
    if let Some(i) = before.iter().position(|b| *b != YesNo::Yes) {
        return Err(Error::InvalidInput(format!(
            "item {i} was not a \"yes\" before perturbation"
        )));
    }
    let flips = after.iter().filter(|a| **a == YesNo::No).count();
    Ok(flips as f64 / after.len() as f64)
}

/// Label sets for a closed item. "yes" maps to `{disease}`, "no" to the
/// empty set, and an unparseable prediction to the opposite of the gold
/// answer.
pub fn closed_label_sets(item: &QAItem, answer: &str) -> (BTreeSet<String>, BTreeSet<String>) {
    let disease = item.disease.clone().unwrap_or_default();
    let as_set = |yes: bool| -> BTreeSet<String> {
        if yes {
            [disease.clone()].into_iter().collect()
        } else {
            BTreeSet::new()
        }
    };
    let gold_yes = item.kind == QaKind::PositiveClosed;
    let pred_yes = match normalize_yesno(answer) {
        YesNo::Yes => true,
        YesNo::No => false,
        YesNo::Unparseable => !gold_yes,
    };
    (as_set(pred_yes), as_set(gold_yes))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by question kind plus the pooled groups "closed", "open" and
    /// "all".
    pub groups: BTreeMap<String, Prf>,
    pub tpt_score: Option<f64>,
    pub vpt_score: Option<f64>,
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn f1(&self, group: &str) -> f64 {
        self.groups.get(group).map(|p| p.f1).unwrap_or(0.0)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>6} {:>9} {:>7} {:>7}", "group", "items", "precision", "recall", "f1");
        for (name, p) in &self.groups {
            let _ = writeln!(
                out,
                "{:<22} {:>6} {:>9.3} {:>7.3} {:>7.3}",
                name, p.items, p.precision, p.recall, p.f1
            );
        }
        if let Some(t) = self.tpt_score {
            let _ = writeln!(out, "TPT flip rate: {:.3} ({} items)", t, self.counts.get("tpt").copied().unwrap_or(0));
        }
        if let Some(v) = self.vpt_score {
            let _ = writeln!(out, "VPT flip rate: {:.3} ({} items)", v, self.counts.get("vpt").copied().unwrap_or(0));
        }
        out
    }
}

/// Per-kind and pooled micro P/R/F1 of `predictions` (qa_id → answer text)
/// against the shard's gold answers.
pub fn evaluate(
    shard: &DatasetShard,
    predictions: &BTreeMap<String, String>,
    lexicon: &LabelLexicon,
) -> Result<EvalReport> {
    let mut sets: BTreeMap<String, (Vec<BTreeSet<String>>, Vec<BTreeSet<String>>)> = BTreeMap::new();
    for item in &shard.qa {
        let answer = predictions
            .get(&item.qa_id)
            .ok_or_else(|| Error::MissingPrediction(item.qa_id.clone()))?;
        let (pred, gold) = if item.kind.is_closed() {
            closed_label_sets(item, answer)
        } else {
            (
                extract_labels(answer, lexicon),
                item.gold_labels.iter().cloned().collect(),
            )
        };
        let pooled = if item.kind.is_closed() { "closed" } else { "open" };
        for key in [item.kind.as_str(), pooled, "all"] {
            let entry = sets.entry(key.to_string()).or_default();
            entry.0.push(pred.clone());
            entry.1.push(gold.clone());
        }
    }
    let mut report = EvalReport::default();
    for (key, (pred, gold)) in sets {
        let prf = micro_prf(&pred, &gold)?;
        report.counts.insert(key.clone(), prf.items);
        report.groups.insert(key, prf);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extracts_worked_example() {
        let lex = LabelLexicon::default();
        assert_eq!(
            extract_labels("The heart suffers from pneumonia, pulmonary fibrosis and nodule/mass", &lex),
            set(&["pneumonia", "pulmonary fibrosis", "nodule/mass"])
        );
    }

    #[test]
    fn extraction_edge_cases() {
        let lex = LabelLexicon::default();
        assert!(extract_labels("", &lex).is_empty());
        assert_eq!(extract_labels("no pneumonia, but shows nodule", &lex), set(&["nodule/mass"]));
        assert!(extract_labels("Lungs without pleural effusion.", &lex).is_empty());
        assert!(extract_labels("No abnormalities are present in the heart.", &lex).is_empty());
        // longest form wins: "pulmonary fibrosis" is one mention, not "fibrosis"
        assert_eq!(extract_labels("PULMONARY FIBROSIS", &lex), set(&["pulmonary fibrosis"]));
        // the negation window is three tokens
        assert_eq!(
            extract_labels("no change seen here pneumonia", &lex),
            set(&["pneumonia"])
        );
    }

    #[test]
    fn lexicon_rejects_shared_synonyms() {
        let mut syn = LabelLexicon::default().synonyms;
        syn.get_mut("pneumonia").unwrap().push("mass".into());
        assert!(LabelLexicon::new(syn).is_err());
    }

    #[test]
    fn yes_no_normalisation() {
        assert_eq!(normalize_yesno("Yes."), YesNo::Yes);
        assert_eq!(normalize_yesno("No, there is nothing"), YesNo::No);
        assert_eq!(normalize_yesno("Possibly"), YesNo::Unparseable);
        assert_eq!(normalize_yesno("  yes"), YesNo::Yes);
        assert_eq!(normalize_yesno(""), YesNo::Unparseable);
    }

    #[test]
    fn prf_cases() {
        let g = vec![set(&["a"]), set(&["b", "c"])];
        let p = micro_prf(&g, &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));

        let empty = vec![set(&[]), set(&[])];
        let p = micro_prf(&empty, &g).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));

        // TP = 3, FP = 1, FN = 2
        let gold = vec![set(&["a", "b"]), set(&["c", "d"]), set(&["e"])];
        let pred = vec![set(&["a", "b"]), set(&["c", "x"]), set(&[])];
        let p = micro_prf(&pred, &gold).unwrap();
        assert_eq!((p.tp, p.fp, p.fn_), (3, 1, 2));
        assert!((p.precision - 0.75).abs() < 1e-15);
        assert!((p.recall - 0.6).abs() < 1e-15);
        assert!((p.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);

        assert!(micro_prf(&pred, &gold[..2]).is_err());
    }

    #[test]
    fn flip_rate_cases() {
        use YesNo::*;
        assert_eq!(flip_rate(&[Yes, Yes], &[No, No]).unwrap(), 1.0);
        assert_eq!(flip_rate(&[Yes, Yes], &[Yes, Unparseable]).unwrap(), 0.0);
        let after: Vec<YesNo> = (0..10).map(|i| if i < 7 { No } else { Yes }).collect();
        assert_eq!(flip_rate(&[Yes; 10], &after).unwrap(), 0.7);
        assert!(flip_rate(&[], &[]).is_err());
        assert!(flip_rate(&[No], &[No]).is_err());
    }

    fn brute_prf(pred: &[BTreeSet<String>], gold: &[BTreeSet<String>], universe: &[&str]) -> (usize, usize, usize) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in pred.iter().zip(gold) {
            for l in universe {
                match (p.contains(*l), g.contains(*l)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        (tp, fp, fn_)
    }

    const UNIVERSE: [&str; 5] = ["a", "b", "c", "d", "e"];

    fn label_sets(n: usize) -> impl Strategy<Value = Vec<BTreeSet<String>>> {
        proptest::collection::vec(
            proptest::collection::btree_set(proptest::sample::select(&UNIVERSE[..]).prop_map(String::from), 0..4),
            n,
        )
    }

    proptest! {
        #[test]
        fn prf_matches_confusion_enumeration((pred, gold) in (1usize..12).prop_flat_map(|n| (label_sets(n), label_sets(n)))) {
            let got = micro_prf(&pred, &gold).unwrap();
            let (tp, fp, fn_) = brute_prf(&pred, &gold, &UNIVERSE);
            prop_assert_eq!((got.tp, got.fp, got.fn_), (tp, fp, fn_));
            prop_assert!((0.0..=1.0).contains(&got.f1));
        }

        #[test]
        fn flip_rate_permutation_invariant(after in proptest::collection::vec(0u8..3, 1..30), rot in 0usize..30) {
            let map = |v: u8| match v { 0 => YesNo::Yes, 1 => YesNo::No, _ => YesNo::Unparseable };
            let after: Vec<YesNo> = after.into_iter().map(map).collect();
            let mut rotated = after.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let before = vec![YesNo::Yes; after.len()];
            prop_assert_eq!(flip_rate(&before, &after).unwrap(), flip_rate(&before, &rotated).unwrap());
        }

        #[test]
        fn extraction_is_subset_and_idempotent(words in proptest::collection::vec(
            proptest::sample::select(vec!["no", "pneumonia", "mass", "pulmonary", "fibrosis", "and", ",", "the", "heart", "without", "effusion", "pleural"]), 0..16)) {
            let lex = LabelLexicon::default();
            let text = words.join(" ");
            let labels = extract_labels(&text, &lex);
            let known: BTreeSet<&str> = lex.labels().collect();
            prop_assert!(labels.iter().all(|l| known.contains(l.as_str())));
            prop_assert_eq!(extract_labels(&text, &lex), labels.clone());
            let rejoined = labels.iter().cloned().collect::<Vec<_>>().join(", ");
            prop_assert_eq!(extract_labels(&rejoined, &lex), labels);
        }
    }
}
