use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    avg_transverse_thickness, connected_components, dice_score, hausdorff95, Connectivity, HausdorffMode,
};
use super::stats::{bland_altman, BlandAltmanStats, Summary};
use crate::error::{Error, IoContext, Result};
use crate::volume::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub hausdorff: HausdorffMode,
    pub connectivity: Connectivity,
}

/// Per-case metrics. Distances and thicknesses are `None` where undefined
/// (an empty prediction or ground truth).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub hd95_mm: Option<f64>,
    pub thickness_pred_mm: Option<f64>,
    pub thickness_gt_mm: Option<f64>,
    /// `thickness_pred_mm - thickness_gt_mm`.
    pub thickness_diff_mm: Option<f64>,
    pub components_pred: usize,
    pub components_gt: usize,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "case_id",
    "dice",
    "hd95_mm",
    "thickness_pred_mm",
    "thickness_gt_mm",
    "thickness_diff_mm",
    "components_pred",
    "components_gt",
];

pub fn evaluate_case(
    case_id: &str,
    prediction: &BinaryMask,
    ground_truth: &BinaryMask,
    options: &EvalOptions,
) -> Result<CaseMetrics> {
    let dice = dice_score(ground_truth, prediction)?;
    let si = ground_truth.geometry().si_axis()?;
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let hd95_mm = defined(hausdorff95(ground_truth, prediction, options.hausdorff))?;
    let thickness_pred_mm = defined(avg_transverse_thickness(prediction, si))?;
    let thickness_gt_mm = defined(avg_transverse_thickness(ground_truth, si))?;
    let thickness_diff_mm = thickness_pred_mm.zip(thickness_gt_mm).map(|(p, g)| p - g);
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice,
        hd95_mm,
        thickness_pred_mm,
        thickness_gt_mm,
        thickness_diff_mm,
        components_pred: connected_components(prediction, options.connectivity).0,
        components_gt: connected_components(ground_truth, options.connectivity).0,
    })
}

/// Aggregates over the defined values of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub dice: Option<Summary>,
    pub hd95_mm: Option<Summary>,
    pub thickness_pred_mm: Option<Summary>,
    pub thickness_gt_mm: Option<Summary>,
    pub thickness_diff_mm: Option<Summary>,
    pub components_pred: Option<Summary>,
    pub components_gt: Option<Summary>,
    /// Over the cases where both thicknesses are defined; needs two.
    pub bland_altman: Option<BlandAltmanStats>,
    pub undefined_hd95: usize,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Result<Self> {
        let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> Option<Summary> {
            Summary::of(&cases.iter().filter_map(f).collect::<Vec<_>>())
        };
        let pairs: Vec<(f64, f64)> =
            cases.iter().filter_map(|c| c.thickness_pred_mm.zip(c.thickness_gt_mm)).collect();
        let bland_altman = if pairs.len() >= 2 { Some(bland_altman(&pairs)?) } else { None };
        Ok(Self {
            dice: col(&|c| Some(c.dice)),
            hd95_mm: col(&|c| c.hd95_mm),
            thickness_pred_mm: col(&|c| c.thickness_pred_mm),
            thickness_gt_mm: col(&|c| c.thickness_gt_mm),
            thickness_diff_mm: col(&|c| c.thickness_diff_mm),
            components_pred: col(&|c| Some(c.components_pred as f64)),
            components_gt: col(&|c| Some(c.components_gt as f64)),
            bland_altman,
            undefined_hd95: cases.iter().filter(|c| c.hd95_mm.is_none()).count(),
            cases,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(CSV_COLUMNS)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.cases {
            w.write_record([
                c.case_id.clone(),
                c.dice.to_string(),
                opt(c.hd95_mm),
                opt(c.thickness_pred_mm),
                opt(c.thickness_gt_mm),
                opt(c.thickness_diff_mm),
                c.components_pred.to_string(),
                c.components_gt.to_string(),
            ])?;
        }
        w.flush().at(path.as_ref())?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path.as_ref(), text + "\n").at(path.as_ref())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).at(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads per-case rows back from [`MetricsReport::write_csv`] output.
pub fn read_cases_csv(path: impl AsRef<Path>) -> Result<Vec<CaseMetrics>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_COLUMNS {
        return Err(Error::InvalidArgument(format!("unexpected CSV columns {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::InvalidArgument(format!("bad number {s:?}")))
        }
    };
    let count = |s: &str| s.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad count {s:?}")));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(CaseMetrics {
            case_id: rec[0].to_string(),
            dice: num(&rec[1])?.ok_or_else(|| Error::InvalidArgument("missing dice".into()))?,
            hd95_mm: num(&rec[2])?,
            thickness_pred_mm: num(&rec[3])?,
            thickness_gt_mm: num(&rec[4])?,
            thickness_diff_mm: num(&rec[5])?,
            components_pred: count(&rec[6])?,
            components_gt: count(&rec[7])?,
        });
    }
    Ok(out)
}

/// Scores aligned prediction and ground-truth lists.
pub fn evaluate_test_set(
    case_ids: &[String],
    predictions: &[BinaryMask],
    ground_truths: &[BinaryMask],
    options: &EvalOptions,
) -> Result<MetricsReport> {
    if case_ids.len() != predictions.len() || predictions.len() != ground_truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids, {} predictions, {} ground truths",
            case_ids.len(),
            predictions.len(),
            ground_truths.len()
        )));
    }
    if case_ids.is_empty() {
        return Err(Error::Empty("no cases to evaluate".into()));
    }
    let cases = case_ids
        .iter()
        .zip(predictions.iter().zip(ground_truths))
        .map(|(id, (p, g))| evaluate_case(id, p, g, options))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_cases(cases)
}
