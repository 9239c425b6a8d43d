//! Report-style captions rendered from score records.
//!
//! Three template styles describe the same record: grouped by finding
//! ([`TemplateKind::Abnormality`]), grouped by compartment
//! ([`TemplateKind::Location`]) and a two-sentence summary
//! ([`TemplateKind::Overall`]). The grammar is closed, so every caption can
//! be parsed back ([`parse_caption`]) and tokenized without unknown words
//! ([`Vocabulary`]).

mod parse;
mod vocab;

pub use parse::{parse_caption, ParseError, ParsedCaption};
pub use vocab::{tokenize, tokenize_words, TokenSequence, Vocabulary, DEFAULT_MAX_LEN, PAD, UNK};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::score::{Alignment, Feature, FeatureValue, OaScoreRecord, SeveritySignature, Site};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Abnormality,
    Location,
    Overall,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [TemplateKind::Abnormality, TemplateKind::Location, TemplateKind::Overall];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Abnormality => "abnormality",
            TemplateKind::Location => "location",
            TemplateKind::Overall => "overall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionOptions {
    /// Emit "no ..." clauses for grade-0 findings and absent flags.
    pub include_zero_grades: bool,
    /// Add "The patient is a {age} year old {sex}." after the lead sentence.
    pub include_demographics: bool,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        CaptionOptions { include_zero_grades: true, include_demographics: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    pub kind: TemplateKind,
    pub signature: SeveritySignature,
}

impl Caption {
    pub fn sentences(&self) -> Vec<String> {
        split_sentences(&self.text)
    }
}

/// All views of one record, in [`TemplateKind::ALL`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionBag {
    pub captions: Vec<Caption>,
}

impl CaptionBag {
    pub fn get(&self, kind: TemplateKind) -> &Caption {
        self.captions.iter().find(|c| c.kind == kind).expect("bag holds every kind")
    }

    pub fn signature(&self) -> SeveritySignature {
        self.captions[0].signature
    }
}

fn kl_sentence(record: &OaScoreRecord) -> String {
    format!("{} osteoarthritis.", record.kl.word())
}

fn abnormality_entry(value: FeatureValue, site: Site, opts: &CaptionOptions) -> Option<String> {
    match value {
        FeatureValue::Grade(g) if g.value() > 0 || opts.include_zero_grades => {
            Some(format!("{} in {}", g.word(), site.phrase()))
        }
        FeatureValue::Flag(true) => Some(format!("sign in {}", site.phrase())),
        FeatureValue::Flag(false) if opts.include_zero_grades => Some(format!("no sign in {}", site.phrase())),
        _ => None,
    }
}

fn location_item(feature: Feature, value: FeatureValue, opts: &CaptionOptions) -> Option<String> {
    match value {
        FeatureValue::Grade(g) if g.value() > 0 || opts.include_zero_grades => {
            Some(format!("{} {}", g.word(), feature.noun()))
        }
        FeatureValue::Flag(true) => Some(format!("sign of {}", feature.noun())),
        FeatureValue::Flag(false) if opts.include_zero_grades => Some(format!("no sign of {}", feature.noun())),
        _ => None,
    }
}

/// Joins clauses as "a", "a and b" or "a, b, and c".
fn join_clauses(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

fn overall_item(record: &OaScoreRecord, feature: Feature, opts: &CaptionOptions) -> Option<String> {
    let present = if feature.is_flag() {
        record.any_flag(feature).then(|| format!("sign of {}", feature.noun()))
    } else {
        let g = record.max_grade(feature);
        (g.value() > 0).then(|| format!("sign of {} {}", g.word(), feature.noun()))
    };
    match present {
        Some(s) => Some(s),
        None if opts.include_zero_grades => Some(format!("no sign of {}", feature.noun())),
        None => None,
    }
}

/// Findings summarised by overall captions, in sentence order.
pub const OVERALL_FEATURES: [Feature; 4] =
    [Feature::Sclerosis, Feature::Cysts, Feature::Chondrocalcinosis, Feature::Osteophytes];

pub fn render_caption(record: &OaScoreRecord, kind: TemplateKind, include_zero_grades: bool) -> Caption {
    render_caption_with(record, kind, &CaptionOptions { include_zero_grades, ..Default::default() })
}

pub fn render_caption_with(record: &OaScoreRecord, kind: TemplateKind, opts: &CaptionOptions) -> Caption {
    let mut sentences = Vec::new();
    match kind {
        TemplateKind::Overall => sentences.push(format!(
            "Image shows {} osteoarthritis in the {} knee.",
            record.kl.word(),
            record.side.word()
        )),
        _ => sentences.push(kl_sentence(record)),
    }
    if opts.include_demographics {
        sentences.push(format!("The patient is a {} year old {}.", record.age, record.sex.word()));
    }
    match kind {
        TemplateKind::Abnormality => {
            for feature in Feature::ALL {
                let entries: Vec<String> = feature
                    .sites()
                    .iter()
                    .filter_map(|s| abnormality_entry(record.value(feature, *s).unwrap(), *s, opts))
                    .collect();
                if !entries.is_empty() {
                    sentences.push(format!("{}: {}.", feature.title(), entries.join(", ")));
                }
            }
        }
        TemplateKind::Location => {
            for site in Site::LOCATION_ORDER {
                let items: Vec<String> = Feature::ALL
                    .into_iter()
                    .filter(|f| f.has_site(site))
                    .filter_map(|f| location_item(f, record.value(f, site).unwrap(), opts))
                    .collect();
                if !items.is_empty() {
                    sentences.push(format!("In {} compartment: {}.", site.phrase(), items.join(", ")));
                }
            }
        }
        TemplateKind::Overall => {
            let items: Vec<String> = OVERALL_FEATURES
                .into_iter()
                .filter_map(|f| overall_item(record, f, opts))
                .collect();
            if !items.is_empty() {
                sentences.push(format!("It shows {}.", join_clauses(&items)));
            }
        }
    }
    if record.alignment != Alignment::Neutral {
        sentences.push(format!("knee is {}.", record.alignment.word()));
    }
    Caption { text: sentences.join(" "), kind, signature: record.signature() }
}

pub fn build_caption_bag(record: &OaScoreRecord, include_zero_grades: bool) -> CaptionBag {
    build_caption_bag_with(record, &CaptionOptions { include_zero_grades, ..Default::default() })
}

pub fn build_caption_bag_with(record: &OaScoreRecord, opts: &CaptionOptions) -> CaptionBag {
    CaptionBag {
        captions: TemplateKind::ALL.iter().map(|k| render_caption_with(record, *k, opts)).collect(),
    }
}

/// Splits period-terminated text into sentences, each keeping its period.
pub fn split_sentences(text: &str) -> Vec<String> {
    let body = text.trim();
    let body = body.strip_suffix('.').unwrap_or(body);
    if body.is_empty() {
        return Vec::new();
    }
    body.split(". ").map(|s| format!("{s}.")).collect()
}

/// Sentence-shuffled view of a caption.
pub fn shuffle_sentences<R: Rng + ?Sized>(caption: &Caption, rng: &mut R) -> Caption {
    let mut sentences = split_sentences(&caption.text);
    sentences.shuffle(rng);
    Caption { text: sentences.join(" "), ..caption.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::score::{perturb_negative, sample_record, Grade, Sex, Side};

    fn g(v: u8) -> Grade {
        Grade::new(v).unwrap()
    }

    fn healthy() -> OaScoreRecord {
        OaScoreRecord::healthy("k", Side::Left, 60, Sex::Male, Alignment::Neutral)
    }

    #[test]
    fn abnormality_matches_reference_phrasing() {
        let mut r = healthy();
        r.kl = g(2);
        r.osteophytes[0] = g(2);
        r.osteophytes[2] = g(1);
        r.sclerosis[0] = g(2);
        r.sclerosis[2] = g(2);
        r.jsn[0] = g(2);
        let c = render_caption(&r, TemplateKind::Abnormality, false);
        assert_eq!(
            c.text,
            "mild osteoarthritis. Osteophytes: mild in femur medial, early in tibia medial. \
             Sclerosis: mild in femur medial, mild in tibia medial. \
             Joint Space Narrowing: mild in joint medial."
        );
    }

    #[test]
    fn overall_matches_reference_phrasing() {
        let mut r = healthy();
        r.kl = g(3);
        r.sclerosis[1] = g(3);
        r.osteophytes[3] = g(3);
        r.osteophytes[0] = g(1);
        let c = render_caption(&r, TemplateKind::Overall, true);
        assert_eq!(
            c.text,
            "Image shows moderate osteoarthritis in the left knee. It shows sign of moderate sclerosis, \
             no sign of cysts, no sign of chondrocalcinosis, and sign of moderate osteophytes."
        );
    }

    #[test]
    fn healthy_record_collapses_to_lead_sentence() {
        let r = healthy();
        assert_eq!(render_caption(&r, TemplateKind::Abnormality, false).text, "no osteoarthritis.");
        assert_eq!(render_caption(&r, TemplateKind::Location, false).text, "no osteoarthritis.");
        assert_eq!(
            render_caption(&r, TemplateKind::Overall, false).text,
            "Image shows no osteoarthritis in the left knee."
        );
    }

    #[test]
    fn location_and_alignment() {
        let mut r = healthy();
        r.kl = g(1);
        r.alignment = Alignment::Varus;
        r.jsn[0] = g(2);
        r.chondrocalcinosis[0] = true;
        let c = render_caption(&r, TemplateKind::Location, false);
        assert_eq!(
            c.text,
            "early osteoarthritis. In joint medial compartment: mild joint space narrowing, \
             sign of chondrocalcinosis. knee is varus."
        );
        let full = render_caption(&r, TemplateKind::Location, true);
        assert!(full.text.contains("In tibia lateral compartment: no osteophytes, no sclerosis, no attrition, no sign of cysts."));
    }

    #[test]
    fn demographics_behind_flag() {
        let r = healthy();
        let opts = CaptionOptions { include_zero_grades: false, include_demographics: true };
        let c = render_caption_with(&r, TemplateKind::Abnormality, &opts);
        assert_eq!(c.text, "no osteoarthritis. The patient is a 60 year old male.");
    }

    #[test]
    fn bag_has_one_caption_per_kind() {
        let mut rng = seeded(9);
        let r = sample_record(&mut rng, "x");
        let bag = build_caption_bag(&r, true);
        assert_eq!(bag.captions.len(), 3);
        let kinds: Vec<_> = bag.captions.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, TemplateKind::ALL);
        assert!(bag.captions.iter().all(|c| c.signature == r.signature()));
    }

    #[test]
    fn negative_bag_differs_in_every_graded_clause() {
        let mut rng = seeded(21);
        for i in 0..50 {
            let r = sample_record(&mut rng, format!("r{i}"));
            let n = perturb_negative(&r, &mut rng);
            let pos = build_caption_bag(&r, true);
            let neg = build_caption_bag(&n, true);
            let p = parse_caption(&pos.get(TemplateKind::Abnormality).text).unwrap();
            let q = parse_caption(&neg.get(TemplateKind::Abnormality).text).unwrap();
            for ((f, s), v) in &p.values {
                if let (FeatureValue::Grade(a), Some(FeatureValue::Grade(b))) = (v, q.values.get(&(*f, *s))) {
                    assert_ne!(a, b, "{f:?} {s:?}");
                    // and the rendered clause itself differs
                    let clause_p = format!("{} in {}", a.word(), s.phrase());
                    let clause_q = format!("{} in {}", b.word(), s.phrase());
                    assert_ne!(clause_p, clause_q);
                }
            }
            assert_ne!(p.kl, q.kl);
        }
    }

    #[test]
    fn shuffle_preserves_sentences() {
        let mut rng = seeded(4);
        let r = sample_record(&mut rng, "x");
        let c = render_caption(&r, TemplateKind::Location, true);
        let s = shuffle_sentences(&c, &mut seeded(77));
        let mut a = c.sentences();
        let mut b = s.sentences();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(s.kind, c.kind);
        assert_eq!(s.signature, c.signature);
        assert_eq!(s, shuffle_sentences(&c, &mut seeded(77)));

        let single = render_caption(&healthy(), TemplateKind::Abnormality, false);
        assert_eq!(shuffle_sentences(&single, &mut rng), single);
    }

    #[test]
    fn rendering_is_pure() {
        let r = sample_record(&mut seeded(1), "x");
        for k in TemplateKind::ALL {
            assert_eq!(render_caption(&r, k, true), render_caption(&r, k, true));
        }
    }

    #[test]
    fn no_duplicate_sentences() {
        let mut rng = seeded(8);
        for i in 0..200 {
            let r = sample_record(&mut rng, format!("{i}"));
            for c in build_caption_bag(&r, true).captions {
                let s = c.sentences();
                let mut d = s.clone();
                d.sort();
                d.dedup();
                assert_eq!(s.len(), d.len(), "{}", c.text);
            }
        }
    }
}
