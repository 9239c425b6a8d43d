use std::collections::BTreeMap;

use thiserror::Error;

use crate::score::{Alignment, Feature, FeatureValue, Grade, OaScoreRecord, Sex, Side, Site};

/// Parse failure with the byte offset of the offending fragment.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at byte {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

/// Everything a caption states about its record. Absent entries were not
/// mentioned by the text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedCaption {
    pub kl: Option<Grade>,
    pub side: Option<Side>,
    pub alignment: Option<Alignment>,
    pub age: Option<u8>,
    pub sex: Option<Sex>,
    /// Per-compartment findings.
    pub values: BTreeMap<(Feature, Site), FeatureValue>,
    /// Whole-knee summaries: largest grade, or presence anywhere for flags.
    pub summaries: BTreeMap<Feature, FeatureValue>,
}

impl ParsedCaption {
    /// Number of stated grades and flags, KL included.
    pub fn stated_findings(&self) -> usize {
        self.kl.is_some() as usize + self.values.len() + self.summaries.len()
    }

    /// Human-readable disagreements between the stated fields and `record`.
    pub fn mismatches(&self, record: &OaScoreRecord) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(kl) = self.kl {
            if kl != record.kl {
                out.push(format!("kl {kl} vs {}", record.kl));
            }
        }
        if self.side.is_some_and(|s| s != record.side) {
            out.push("side".into());
        }
        if self.alignment.is_some_and(|a| a != record.alignment) {
            out.push("alignment".into());
        }
        if self.age.is_some_and(|a| a != record.age) {
            out.push("age".into());
        }
        if self.sex.is_some_and(|s| s != record.sex) {
            out.push("sex".into());
        }
        for ((f, s), v) in &self.values {
            if record.value(*f, *s) != Some(*v) {
                out.push(format!("{}.{}", f.field(), s.key()));
            }
        }
        for (f, v) in &self.summaries {
            let truth = if f.is_flag() {
                FeatureValue::Flag(record.any_flag(*f))
            } else {
                FeatureValue::Grade(record.max_grade(*f))
            };
            if truth != *v {
                out.push(format!("{} summary", f.field()));
            }
        }
        out
    }
}

fn offset(text: &str, part: &str) -> usize {
    part.as_ptr() as usize - text.as_ptr() as usize
}

struct Parser<'a> {
    text: &'a str,
    out: ParsedCaption,
}

impl<'a> Parser<'a> {
    fn err(&self, at: &str, message: impl Into<String>) -> ParseError {
        ParseError { position: offset(self.text, at), message: message.into() }
    }

    fn grade(&self, word: &'a str) -> Result<Grade, ParseError> {
        Grade::from_word(word).ok_or_else(|| self.err(word, format!("unknown severity word {word:?}")))
    }

    fn site(&self, phrase: &'a str) -> Result<Site, ParseError> {
        let mut words = phrase.split(' ');
        match (words.next(), words.next(), words.next()) {
            (Some(a), Some(b), None) => {
                Site::from_words(a, b).ok_or_else(|| self.err(phrase, format!("unknown compartment {phrase:?}")))
            }
            _ => Err(self.err(phrase, format!("unknown compartment {phrase:?}"))),
        }
    }

    fn set(&mut self, at: &'a str, feature: Feature, site: Site, value: FeatureValue) -> Result<(), ParseError> {
        if !feature.has_site(site) {
            return Err(self.err(at, format!("{} is not scored in {}", feature.noun(), site.phrase())));
        }
        let ok = matches!(
            (feature.is_flag(), value),
            (true, FeatureValue::Flag(_)) | (false, FeatureValue::Grade(_))
        );
        if !ok {
            return Err(self.err(at, format!("wrong value form for {}", feature.noun())));
        }
        self.out.values.insert((feature, site), value);
        Ok(())
    }

    fn sentence(&mut self, s: &'a str) -> Result<(), ParseError> {
        if let Some(rest) = s.strip_prefix("Image shows ") {
            let (word, rest) = rest
                .split_once(" osteoarthritis in the ")
                .ok_or_else(|| self.err(rest, "expected \"<severity> osteoarthritis in the <side> knee\""))?;
            self.out.kl = Some(self.grade(word)?);
            let side = rest.strip_suffix(" knee").ok_or_else(|| self.err(rest, "expected \"<side> knee\""))?;
            self.out.side = Some(match side {
                "left" => Side::Left,
                "right" => Side::Right,
                _ => return Err(self.err(side, "unknown side")),
            });
            return Ok(());
        }
        if let Some(rest) = s.strip_prefix("It shows ") {
            return self.summary_list(rest);
        }
        if let Some(rest) = s.strip_prefix("knee is ") {
            self.out.alignment = Some(match rest {
                "varus" => Alignment::Varus,
                "valgus" => Alignment::Valgus,
                "neutral" => Alignment::Neutral,
                _ => return Err(self.err(rest, "unknown alignment")),
            });
            return Ok(());
        }
        if let Some(rest) = s.strip_prefix("The patient is a ") {
            let (age, sex) = rest
                .split_once(" year old ")
                .ok_or_else(|| self.err(rest, "expected \"<age> year old <sex>\""))?;
            self.out.age = Some(age.parse().map_err(|_| self.err(age, "bad age"))?);
            self.out.sex = Some(match sex {
                "male" => Sex::Male,
                "female" => Sex::Female,
                _ => return Err(self.err(sex, "unknown sex")),
            });
            return Ok(());
        }
        if let Some(rest) = s.strip_prefix("In ") {
            let (phrase, items) = rest
                .split_once(" compartment: ")
                .ok_or_else(|| self.err(rest, "expected \"<compartment> compartment: ...\""))?;
            let site = self.site(phrase)?;
            for item in items.split(", ") {
                self.location_item(site, item)?;
            }
            return Ok(());
        }
        if let Some((title, entries)) = s.split_once(": ") {
            let feature = Feature::ALL
                .into_iter()
                .find(|f| f.title() == title)
                .ok_or_else(|| self.err(title, format!("unknown finding {title:?}")))?;
            for entry in entries.split(", ") {
                self.abnormality_entry(feature, entry)?;
            }
            return Ok(());
        }
        if let Some(word) = s.strip_suffix(" osteoarthritis") {
            if !word.contains(' ') {
                self.out.kl = Some(self.grade(word)?);
                return Ok(());
            }
        }
        Err(self.err(s, "sentence outside the caption grammar"))
    }

    fn abnormality_entry(&mut self, feature: Feature, entry: &'a str) -> Result<(), ParseError> {
        let (value, place) = if let Some(p) = entry.strip_prefix("no sign in ") {
            (FeatureValue::Flag(false), p)
        } else if let Some(p) = entry.strip_prefix("sign in ") {
            (FeatureValue::Flag(true), p)
        } else {
            let (word, p) = entry
                .split_once(" in ")
                .ok_or_else(|| self.err(entry, "expected \"<severity> in <compartment>\""))?;
            (FeatureValue::Grade(self.grade(word)?), p)
        };
        let site = self.site(place)?;
        self.set(entry, feature, site, value)
    }

    fn noun(&self, noun: &'a str) -> Result<Feature, ParseError> {
        Feature::ALL
            .into_iter()
            .find(|f| f.noun() == noun)
            .ok_or_else(|| self.err(noun, format!("unknown finding {noun:?}")))
    }

    fn location_item(&mut self, site: Site, item: &'a str) -> Result<(), ParseError> {
        let (value, feature) = if let Some(n) = item.strip_prefix("no sign of ") {
            (FeatureValue::Flag(false), self.noun(n)?)
        } else if let Some(n) = item.strip_prefix("sign of ") {
            (FeatureValue::Flag(true), self.noun(n)?)
        } else {
            let (word, n) = item
                .split_once(' ')
                .ok_or_else(|| self.err(item, "expected \"<severity> <finding>\""))?;
            (FeatureValue::Grade(self.grade(word)?), self.noun(n)?)
        };
        self.set(item, feature, site, value)
    }

    fn summary_list(&mut self, list: &'a str) -> Result<(), ParseError> {
        // "a", "a and b" or "a, b, and c"
        let mut items: Vec<&'a str> = Vec::new();
        for part in list.split(", ") {
            let part = part.strip_prefix("and ").unwrap_or(part);
            match part.split_once(" and ") {
                Some((a, b)) => {
                    items.push(a);
                    items.push(b);
                }
                None => items.push(part),
            }
        }
        for item in items {
            let (feature, value) = if let Some(n) = item.strip_prefix("no sign of ") {
                let f = self.noun(n)?;
                let v = if f.is_flag() { FeatureValue::Flag(false) } else { FeatureValue::Grade(Grade::ZERO) };
                (f, v)
            } else if let Some(rest) = item.strip_prefix("sign of ") {
                match rest.split_once(' ') {
                    Some((word, n)) if Grade::from_word(word).is_some() => {
                        let f = self.noun(n)?;
                        if f.is_flag() {
                            return Err(self.err(item, "presence findings take no severity"));
                        }
                        (f, FeatureValue::Grade(self.grade(word)?))
                    }
                    _ => {
                        let f = self.noun(rest)?;
                        if !f.is_flag() {
                            return Err(self.err(item, "graded findings need a severity"));
                        }
                        (f, FeatureValue::Flag(true))
                    }
                }
            } else {
                return Err(self.err(item, "expected \"sign of ...\" or \"no sign of ...\""));
            };
            self.out.summaries.insert(feature, value);
        }
        Ok(())
    }
}

/// Recovers the findings stated by a rendered (possibly shuffled) caption.
pub fn parse_caption(text: &str) -> Result<ParsedCaption, ParseError> {
    let mut parser = Parser { text, out: ParsedCaption::default() };
    let trimmed = text.trim_end();
    let body = trimmed
        .strip_suffix('.')
        .ok_or_else(|| ParseError { position: trimmed.len(), message: "caption must end with a period".into() })?;
    let body = body.trim_start();
    if body.is_empty() {
        return Err(ParseError { position: 0, message: "empty caption".into() });
    }
    for sentence in body.split(". ") {
        parser.sentence(sentence)?;
    }
    Ok(parser.out)
}
