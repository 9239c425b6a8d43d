//! Osteoarthritis score records: schema, validation, severity words,
//! random sampling and the at-least-two-levels negative perturbation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ordinal severity grade, 0 (none) through 4 (severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Grade(u8);

pub const GRADE_WORDS: [&str; 5] = ["no", "early", "mild", "moderate", "severe"];

impl Grade {
    pub const MAX: u8 = 4;
    pub const ZERO: Grade = Grade(0);

    pub fn new(value: u8) -> Option<Self> {
        (value <= Self::MAX).then_some(Grade(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Grade> {
        (0..=Self::MAX).map(Grade)
    }

    /// Severity word for this grade.
    pub fn word(self) -> &'static str {
        GRADE_WORDS[self.0 as usize]
    }

    pub fn from_word(word: &str) -> Option<Self> {
        GRADE_WORDS.iter().position(|w| *w == word).map(|i| Grade(i as u8))
    }

    fn clamped(v: i32) -> Self {
        Grade(v.clamp(0, Self::MAX as i32) as u8)
    }
}

impl TryFrom<i64> for Grade {
    type Error = i64;

    fn try_from(v: i64) -> Result<Self, i64> {
        if (0..=Self::MAX as i64).contains(&v) {
            Ok(Grade(v as u8))
        } else {
            Err(v)
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Severity word for a grade.
pub fn grade_word(g: Grade) -> &'static str {
    g.word()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn word(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Varus,
    Valgus,
    Neutral,
}

impl Alignment {
    pub fn word(self) -> &'static str {
        match self {
            Alignment::Varus => "varus",
            Alignment::Valgus => "valgus",
            Alignment::Neutral => "neutral",
        }
    }
}

/// Medial or lateral half of the knee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Half {
    Medial,
    Lateral,
}

impl Half {
    pub fn word(self) -> &'static str {
        match self {
            Half::Medial => "medial",
            Half::Lateral => "lateral",
        }
    }
}

/// Anatomical compartment at which a feature is graded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    FemurMedial,
    FemurLateral,
    TibiaMedial,
    TibiaLateral,
    JointMedial,
    JointLateral,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::FemurMedial,
        Site::FemurLateral,
        Site::TibiaMedial,
        Site::TibiaLateral,
        Site::JointMedial,
        Site::JointLateral,
    ];

    /// Order in which location-style captions walk the compartments.
    pub const LOCATION_ORDER: [Site; 6] = [
        Site::JointMedial,
        Site::JointLateral,
        Site::FemurMedial,
        Site::FemurLateral,
        Site::TibiaMedial,
        Site::TibiaLateral,
    ];

    pub const BONES: [Site; 4] = [
        Site::FemurMedial,
        Site::FemurLateral,
        Site::TibiaMedial,
        Site::TibiaLateral,
    ];
    pub const JOINTS: [Site; 2] = [Site::JointMedial, Site::JointLateral];
    pub const TIBIAS: [Site; 2] = [Site::TibiaMedial, Site::TibiaLateral];

    /// Two-letter JSON key.
    pub fn key(self) -> &'static str {
        match self {
            Site::FemurMedial => "fm",
            Site::FemurLateral => "fl",
            Site::TibiaMedial => "tm",
            Site::TibiaLateral => "tl",
            Site::JointMedial => "jm",
            Site::JointLateral => "jl",
        }
    }

    pub fn structure(self) -> &'static str {
        match self {
            Site::FemurMedial | Site::FemurLateral => "femur",
            Site::TibiaMedial | Site::TibiaLateral => "tibia",
            Site::JointMedial | Site::JointLateral => "joint",
        }
    }

    pub fn half(self) -> Half {
        match self {
            Site::FemurMedial | Site::TibiaMedial | Site::JointMedial => Half::Medial,
            _ => Half::Lateral,
        }
    }

    /// Caption phrase, e.g. "femur medial".
    pub fn phrase(self) -> String {
        format!("{} {}", self.structure(), self.half().word())
    }

    pub fn from_words(structure: &str, half: &str) -> Option<Self> {
        Site::ALL
            .into_iter()
            .find(|s| s.structure() == structure && s.half().word() == half)
    }
}

/// Every scored feature, in caption order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    Osteophytes,
    Sclerosis,
    JointSpaceNarrowing,
    Attrition,
    Chondrocalcinosis,
    Cysts,
}

impl Feature {
    pub const ALL: [Feature; 6] = [
        Feature::Osteophytes,
        Feature::Sclerosis,
        Feature::JointSpaceNarrowing,
        Feature::Attrition,
        Feature::Chondrocalcinosis,
        Feature::Cysts,
    ];

    pub fn sites(self) -> &'static [Site] {
        match self {
            Feature::Osteophytes | Feature::Sclerosis | Feature::Cysts => &Site::BONES,
            Feature::JointSpaceNarrowing | Feature::Chondrocalcinosis => &Site::JOINTS,
            Feature::Attrition => &Site::TIBIAS,
        }
    }

    pub fn is_flag(self) -> bool {
        matches!(self, Feature::Chondrocalcinosis | Feature::Cysts)
    }

    /// JSON field name.
    pub fn field(self) -> &'static str {
        match self {
            Feature::Osteophytes => "osteophytes",
            Feature::Sclerosis => "sclerosis",
            Feature::JointSpaceNarrowing => "jsn",
            Feature::Attrition => "attrition",
            Feature::Chondrocalcinosis => "chondrocalcinosis",
            Feature::Cysts => "cysts",
        }
    }

    /// Heading used by abnormality-style captions.
    pub fn title(self) -> &'static str {
        match self {
            Feature::Osteophytes => "Osteophytes",
            Feature::Sclerosis => "Sclerosis",
            Feature::JointSpaceNarrowing => "Joint Space Narrowing",
            Feature::Attrition => "Attrition",
            Feature::Chondrocalcinosis => "Chondrocalcinosis",
            Feature::Cysts => "Cysts",
        }
    }

    /// Lowercase noun used inside sentences.
    pub fn noun(self) -> &'static str {
        match self {
            Feature::Osteophytes => "osteophytes",
            Feature::Sclerosis => "sclerosis",
            Feature::JointSpaceNarrowing => "joint space narrowing",
            Feature::Attrition => "attrition",
            Feature::Chondrocalcinosis => "chondrocalcinosis",
            Feature::Cysts => "cysts",
        }
    }

    pub fn has_site(self, site: Site) -> bool {
        self.sites().contains(&site)
    }
}

/// Value of one feature at one site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureValue {
    Grade(Grade),
    Flag(bool),
}

impl FeatureValue {
    /// True for a nonzero grade or a present flag.
    pub fn is_present(self) -> bool {
        match self {
            FeatureValue::Grade(g) => g.value() > 0,
            FeatureValue::Flag(b) => b,
        }
    }
}

/// One knee's demographics and graded findings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct OaScoreRecord {
    pub id: String,
    pub side: Side,
    pub age: u8,
    pub sex: Sex,
    pub alignment: Alignment,
    pub kl: Grade,
    /// Indexed fm, fl, tm, tl.
    pub osteophytes: [Grade; 4],
    /// Indexed fm, fl, tm, tl.
    pub sclerosis: [Grade; 4],
    /// Indexed jm, jl.
    pub jsn: [Grade; 2],
    /// Indexed tm, tl.
    pub attrition: [Grade; 2],
    /// Indexed fm, fl, tm, tl.
    pub cysts: [bool; 4],
    /// Indexed jm, jl.
    pub chondrocalcinosis: [bool; 2],
}

fn slot(feature: Feature, site: Site) -> Option<usize> {
    feature.sites().iter().position(|s| *s == site)
}

impl OaScoreRecord {
    /// Record with every grade zero and every flag absent.
    pub fn healthy(id: impl Into<String>, side: Side, age: u8, sex: Sex, alignment: Alignment) -> Self {
        OaScoreRecord {
            id: id.into(),
            side,
            age,
            sex,
            alignment,
            kl: Grade::ZERO,
            osteophytes: [Grade::ZERO; 4],
            sclerosis: [Grade::ZERO; 4],
            jsn: [Grade::ZERO; 2],
            attrition: [Grade::ZERO; 2],
            cysts: [false; 4],
            chondrocalcinosis: [false; 2],
        }
    }

    /// Value at (feature, site), or `None` when the feature is not scored there.
    pub fn value(&self, feature: Feature, site: Site) -> Option<FeatureValue> {
        let i = slot(feature, site)?;
        Some(match feature {
            Feature::Osteophytes => FeatureValue::Grade(self.osteophytes[i]),
            Feature::Sclerosis => FeatureValue::Grade(self.sclerosis[i]),
            Feature::JointSpaceNarrowing => FeatureValue::Grade(self.jsn[i]),
            Feature::Attrition => FeatureValue::Grade(self.attrition[i]),
            Feature::Cysts => FeatureValue::Flag(self.cysts[i]),
            Feature::Chondrocalcinosis => FeatureValue::Flag(self.chondrocalcinosis[i]),
        })
    }

    pub fn grade(&self, feature: Feature, site: Site) -> Option<Grade> {
        match self.value(feature, site)? {
            FeatureValue::Grade(g) => Some(g),
            FeatureValue::Flag(_) => None,
        }
    }

    pub fn flag(&self, feature: Feature, site: Site) -> Option<bool> {
        match self.value(feature, site)? {
            FeatureValue::Flag(b) => Some(b),
            FeatureValue::Grade(_) => None,
        }
    }

    /// Mutable grade slot; `None` for flag features or unscored sites.
    pub fn grade_mut(&mut self, feature: Feature, site: Site) -> Option<&mut Grade> {
        let i = slot(feature, site)?;
        match feature {
            Feature::Osteophytes => Some(&mut self.osteophytes[i]),
            Feature::Sclerosis => Some(&mut self.sclerosis[i]),
            Feature::JointSpaceNarrowing => Some(&mut self.jsn[i]),
            Feature::Attrition => Some(&mut self.attrition[i]),
            Feature::Cysts | Feature::Chondrocalcinosis => None,
        }
    }

    pub fn flag_mut(&mut self, feature: Feature, site: Site) -> Option<&mut bool> {
        let i = slot(feature, site)?;
        match feature {
            Feature::Cysts => Some(&mut self.cysts[i]),
            Feature::Chondrocalcinosis => Some(&mut self.chondrocalcinosis[i]),
            _ => None,
        }
    }

    /// Largest grade of a graded feature across its sites.
    pub fn max_grade(&self, feature: Feature) -> Grade {
        feature
            .sites()
            .iter()
            .filter_map(|s| self.grade(feature, *s))
            .max()
            .unwrap_or(Grade::ZERO)
    }

    pub fn any_flag(&self, feature: Feature) -> bool {
        feature.sites().iter().any(|s| self.flag(feature, *s) == Some(true))
    }

    /// Every (feature, site) pair in caption order.
    pub fn feature_sites() -> impl Iterator<Item = (Feature, Site)> {
        Feature::ALL
            .into_iter()
            .flat_map(|f| f.sites().iter().map(move |s| (f, *s)))
    }

    pub fn signature(&self) -> SeveritySignature {
        severity_signature(self)
    }
}

/// Grades and flags of a record in a fixed order; ignores id and demographics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeveritySignature([u8; 19]);

impl SeveritySignature {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for SeveritySignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

pub fn severity_signature(record: &OaScoreRecord) -> SeveritySignature {
    let mut out = [0u8; 19];
    out[0] = record.kl.value();
    for (slot, (f, s)) in out[1..].iter_mut().zip(OaScoreRecord::feature_sites()) {
        *slot = match record.value(f, s).expect("feature site from table") {
            FeatureValue::Grade(g) => g.value(),
            FeatureValue::Flag(b) => b as u8,
        };
    }
    SeveritySignature(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("{field}: grade out of range ({value})")]
    GradeOutOfRange { field: String, value: i64 },
    #[error("{field}: missing key")]
    MissingKey { field: String },
    #[error("{field}: unknown key")]
    UnknownKey { field: String },
    #[error("age: out of range ({0})")]
    AgeOutOfRange(i64),
    #[error("id: must not be empty")]
    EmptyId,
}

/// Loosely typed JSON form of a record; validation turns it into an
/// [`OaScoreRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub side: Side,
    pub age: i64,
    pub sex: Sex,
    pub alignment: Alignment,
    pub kl: i64,
    pub osteophytes: BTreeMap<String, i64>,
    pub sclerosis: BTreeMap<String, i64>,
    pub jsn: BTreeMap<String, i64>,
    pub attrition: BTreeMap<String, i64>,
    pub cysts: BTreeMap<String, bool>,
    pub chondrocalcinosis: BTreeMap<String, bool>,
}

fn check_keys<V>(field: &str, map: &BTreeMap<String, V>, sites: &[Site]) -> Result<(), ValidationError> {
    for site in sites {
        if !map.contains_key(site.key()) {
            return Err(ValidationError::MissingKey { field: format!("{field}.{}", site.key()) });
        }
    }
    if let Some(k) = map.keys().find(|k| !sites.iter().any(|s| s.key() == k.as_str())) {
        return Err(ValidationError::UnknownKey { field: format!("{field}.{k}") });
    }
    Ok(())
}

fn grades<const N: usize>(
    feature: Feature,
    map: &BTreeMap<String, i64>,
) -> Result<[Grade; N], ValidationError> {
    let sites = feature.sites();
    debug_assert_eq!(sites.len(), N);
    check_keys(feature.field(), map, sites)?;
    let mut out = [Grade::ZERO; N];
    for (o, site) in out.iter_mut().zip(sites) {
        let v = map[site.key()];
        *o = Grade::try_from(v).map_err(|value| ValidationError::GradeOutOfRange {
            field: format!("{}.{}", feature.field(), site.key()),
            value,
        })?;
    }
    Ok(out)
}

fn flags<const N: usize>(
    feature: Feature,
    map: &BTreeMap<String, bool>,
) -> Result<[bool; N], ValidationError> {
    let sites = feature.sites();
    check_keys(feature.field(), map, sites)?;
    let mut out = [false; N];
    for (o, site) in out.iter_mut().zip(sites) {
        *o = map[site.key()];
    }
    Ok(out)
}

/// Checks every invariant of a raw record and returns the typed record.
pub fn validate_record(raw: RawRecord) -> Result<OaScoreRecord, ValidationError> {
    if raw.id.is_empty() {
        return Err(ValidationError::EmptyId);
    }
    if !(0..=120).contains(&raw.age) {
        return Err(ValidationError::AgeOutOfRange(raw.age));
    }
    let kl = Grade::try_from(raw.kl)
        .map_err(|value| ValidationError::GradeOutOfRange { field: "kl".into(), value })?;
    Ok(OaScoreRecord {
        kl,
        osteophytes: grades(Feature::Osteophytes, &raw.osteophytes)?,
        sclerosis: grades(Feature::Sclerosis, &raw.sclerosis)?,
        jsn: grades(Feature::JointSpaceNarrowing, &raw.jsn)?,
        attrition: grades(Feature::Attrition, &raw.attrition)?,
        cysts: flags(Feature::Cysts, &raw.cysts)?,
        chondrocalcinosis: flags(Feature::Chondrocalcinosis, &raw.chondrocalcinosis)?,
        id: raw.id,
        side: raw.side,
        age: raw.age as u8,
        sex: raw.sex,
        alignment: raw.alignment,
    })
}

impl TryFrom<RawRecord> for OaScoreRecord {
    type Error = ValidationError;

    fn try_from(raw: RawRecord) -> Result<Self, Self::Error> {
        validate_record(raw)
    }
}

impl From<OaScoreRecord> for RawRecord {
    fn from(r: OaScoreRecord) -> Self {
        let grade_map = |f: Feature| -> BTreeMap<String, i64> {
            f.sites()
                .iter()
                .map(|s| (s.key().to_string(), r.grade(f, *s).unwrap().value() as i64))
                .collect()
        };
        let flag_map = |f: Feature| -> BTreeMap<String, bool> {
            f.sites()
                .iter()
                .map(|s| (s.key().to_string(), r.flag(f, *s).unwrap()))
                .collect()
        };
        RawRecord {
            side: r.side,
            age: r.age as i64,
            sex: r.sex,
            alignment: r.alignment,
            kl: r.kl.value() as i64,
            osteophytes: grade_map(Feature::Osteophytes),
            sclerosis: grade_map(Feature::Sclerosis),
            jsn: grade_map(Feature::JointSpaceNarrowing),
            attrition: grade_map(Feature::Attrition),
            cysts: flag_map(Feature::Cysts),
            chondrocalcinosis: flag_map(Feature::Chondrocalcinosis),
            id: r.id,
        }
    }
}

/// Draws a synthetic record whose findings cluster around a uniformly drawn
/// KL grade: each graded feature is `clamp(kl + d)` with `d` in {-1, 0, 1},
/// and each flag is present with probability `0.1 + 0.1 * kl`.
pub fn sample_record<R: Rng + ?Sized>(rng: &mut R, id: impl Into<String>) -> OaScoreRecord {
    let kl = rng.random_range(0..=Grade::MAX);
    let side = *[Side::Left, Side::Right].choose(rng).unwrap();
    let sex = *[Sex::Male, Sex::Female].choose(rng).unwrap();
    let alignment = *[Alignment::Varus, Alignment::Valgus, Alignment::Neutral]
        .choose(rng)
        .unwrap();
    let age = rng.random_range(45..=79u8);
    let mut record = OaScoreRecord::healthy(id, side, age, sex, alignment);
    record.kl = Grade(kl);
    let p_flag = 0.1 + 0.1 * kl as f64;
    for (f, s) in OaScoreRecord::feature_sites() {
        if f.is_flag() {
            *record.flag_mut(f, s).unwrap() = rng.random_bool(p_flag);
        } else {
            let delta = rng.random_range(-1..=1i32);
            *record.grade_mut(f, s).unwrap() = Grade::clamped(kl as i32 + delta);
        }
    }
    record
}

/// Grades at least two levels away from `g`.
pub fn distant_grades(g: Grade) -> impl Iterator<Item = Grade> {
    Grade::all().filter(move |v| v.value().abs_diff(g.value()) >= 2)
}

fn perturb_grade<R: Rng + ?Sized>(g: Grade, rng: &mut R) -> Grade {
    let choices: Vec<Grade> = distant_grades(g).collect();
    *choices.choose(rng).expect("every grade has a distant grade")
}

/// Negative twin of `record`: KL and every graded finding move at least two
/// levels, each flag flips with probability one half, demographics stay.
pub fn perturb_negative<R: Rng + ?Sized>(record: &OaScoreRecord, rng: &mut R) -> OaScoreRecord {
    let mut neg = record.clone();
    neg.id = format!("{}-neg", record.id);
    neg.kl = perturb_grade(record.kl, rng);
    for (f, s) in OaScoreRecord::feature_sites() {
        if f.is_flag() {
            let flag = neg.flag_mut(f, s).unwrap();
            if rng.random_bool(0.5) {
                *flag = !*flag;
            }
        } else {
            let g = neg.grade_mut(f, s).unwrap();
            *g = perturb_grade(*g, rng);
        }
    }
    neg
}
