//! Report assembly and export.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::retrieval::RetrievalReport;
use super::saliency::{grad_cam, localization_score, SaliencyMap};
use super::zero_shot::{ZeroShotReport, NUM_CLASSES};
use super::EvalError;
use crate::caption::Vocabulary;
use crate::model::DualEncoder;
use crate::score::{Feature, Grade, Site};
use crate::synth::{ground_truth_region, write_pgm, Dataset, FeatureSite, SynthConfig, SynthImage};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationItem {
    pub id: String,
    pub site: String,
    pub grade: u8,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub mean_score: f64,
    pub items: Vec<LocalizationItem>,
}

/// Prompt naming one compartment's osteophyte grade.
pub fn osteophyte_prompt(grade: Grade, site: Site) -> String {
    format!("In {} compartment: {} osteophytes.", site.phrase(), grade.word())
}

/// Grad-CAM localization for every bone compartment with osteophyte grade
/// at least `min_grade` among `indices`. `synth` must be the configuration
/// the images were rendered with.
pub fn localization_eval(
    model: &DualEncoder<f32>,
    data: &Dataset,
    indices: &[usize],
    synth: &SynthConfig,
    min_grade: u8,
) -> Result<(LocalizationReport, Vec<SaliencyMap>), EvalError> {
    let vocab = Vocabulary::grammar();
    let mut items = Vec::new();
    let mut maps = Vec::new();
    for &i in indices {
        let rec = data.record(i);
        for site in Site::BONES {
            let g = rec.osteophytes[site as usize];
            if g.value() < min_grade {
                continue;
            }
            let prompt = osteophyte_prompt(g, site);
            let map = grad_cam(model, &data.images[i], &rec.id, &prompt, &vocab)?;
            let region = ground_truth_region(rec, FeatureSite { feature: Feature::Osteophytes, site }, synth)?;
            let score = localization_score(&map, &region.mask)?;
            items.push(LocalizationItem { id: rec.id.clone(), site: site.key().to_string(), grade: g.value(), score });
            maps.push(map);
        }
    }
    let mean_score = if items.is_empty() { 0.0 } else { items.iter().map(|i| i.score).sum::<f64>() / items.len() as f64 };
    Ok((LocalizationReport { mean_score, items }, maps))
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub zero_shot: ZeroShotReport,
    pub retrieval: Option<RetrievalReport>,
    pub localization: Option<LocalizationReport>,
    /// Saliency maps with the images they were computed on.
    pub saliency: Vec<(SaliencyMap, SynthImage)>,
}

impl EvalReport {
    /// Metrics as a JSON value; object keys serialize sorted.
    pub fn to_json(&self) -> serde_json::Value {
        let zs = &self.zero_shot;
        json!({
            "zero_shot": {
                "accuracy": zs.accuracy,
                "total": zs.total,
                "confusion": zs.confusion,
                "per_class_totals": zs.class_totals(),
                "predictions": zs.predictions,
            },
            "retrieval": self.retrieval,
            "localization": self.localization,
            "saliency": self.saliency.iter().map(|(m, _)| json!({"image_id": m.image_id, "prompt": m.prompt})).collect::<Vec<_>>(),
        })
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth");
        for k in 0..NUM_CLASSES {
            write!(out, ",pred_{k}").unwrap();
        }
        out.push('\n');
        for (k, row) in self.zero_shot.confusion.iter().enumerate() {
            write!(out, "{k}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Image with the saliency map blended over it at alpha 0.5.
pub fn overlay(map: &SaliencyMap, image: &SynthImage) -> SynthImage {
    SynthImage {
        height: image.height,
        width: image.width,
        pixels: image.pixels.iter().zip(&map.values).map(|(p, s)| 0.5 * p + 0.5 * s).collect(),
    }
}

/// Writes `report.json`, `confusion.csv` and `saliency/*.pgm` into `out_dir`.
pub fn export_report(report: &EvalReport, out_dir: &Path) -> Result<(), EvalError> {
    let io = |p: &Path, e: std::io::Error| EvalError::Io { path: p.display().to_string(), source: e };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| io(&json_path, e))?;
    let csv_path = out_dir.join("confusion.csv");
    fs::write(&csv_path, report.confusion_csv()).map_err(|e| io(&csv_path, e))?;
    if !report.saliency.is_empty() {
        let dir = out_dir.join("saliency");
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        for (n, (map, image)) in report.saliency.iter().enumerate() {
            let path = dir.join(format!("{:03}-{}.pgm", n, map.image_id));
            let file = fs::File::create(&path).map_err(|e| io(&path, e))?;
            write_pgm(&overlay(map, image), BufWriter::new(file)).map_err(|e| io(&path, e))?;
        }
    }
    Ok(())
}
