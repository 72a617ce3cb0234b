//! Whole-volume patchwise inference, Dice scores and the missing-modality
//! evaluation sweep with its CSV and markdown reports.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{class_to_label, derive_regions, extract_input, select_modalities, LabelVolume, MultiModalVolume, Region, RegionMask, Subject};
use crate::missingness::{enumerate_subsets, ModalityMask};
use crate::nets::{ops, output_size, Model};
use crate::{Error, Result};

/// Predicts a label for every voxel under each mask. The volume is covered
/// by non-overlapping target tiles of side `t = output_size(input_side)`,
/// each predicted from the centered `input_side³` window (padded with the
/// background value outside the volume).
pub fn sliding_window_predict_masks(
    model: &mut Model,
    volume: &MultiModalVolume,
    masks: &[ModalityMask],
    input_side: usize,
) -> Result<Vec<LabelVolume>> {
    let m = model.config().num_modalities;
    if volume.num_modalities() != m {
        return Err(Error::ShapeMismatch {
            subject: volume.subject_id.clone(),
            detail: format!("{} modalities, model expects {m}", volume.num_modalities()),
        });
    }
    for mask in masks {
        if mask.original_count() != m {
            return Err(Error::MaskArity {
                expected: m,
                got: mask.original_count(),
            });
        }
    }
    let t = output_size(input_side, model.config().depth)?;
    let margin = ((input_side - t) / 2) as isize;
    let dims = volume.dims;
    let mut out = vec![vec![0u8; volume.spatial_len()]; masks.len()];
    for z0 in (0..dims[0]).step_by(t) {
        for y0 in (0..dims[1]).step_by(t) {
            for x0 in (0..dims[2]).step_by(t) {
                let origin = [z0 as isize - margin, y0 as isize - margin, x0 as isize - margin];
                let input = extract_input(volume, origin, input_side);
                let preds = model.predict_masks(&input, masks)?;
                for (k, (logits, _)) in preds.iter().enumerate() {
                    let classes = ops::argmax_channels(logits);
                    for dz in 0..t.min(dims[0] - z0) {
                        for dy in 0..t.min(dims[1] - y0) {
                            for dx in 0..t.min(dims[2] - x0) {
                                let c = classes[(dz * t + dy) * t + dx];
                                out[k][((z0 + dz) * dims[1] + y0 + dy) * dims[2] + x0 + dx] = class_to_label(c);
                            }
                        }
                    }
                }
            }
        }
    }
    out.into_iter().map(|labels| LabelVolume::new(dims, labels)).collect()
}

pub fn sliding_window_predict(model: &mut Model, volume: &MultiModalVolume, mask: &ModalityMask, input_side: usize) -> Result<LabelVolume> {
    Ok(sliding_window_predict_masks(model, volume, std::slice::from_ref(mask), input_side)?.remove(0))
}

/// 2|P∩T| / (|P|+|T|), and 1 when both masks are empty.
pub fn dice(pred: &RegionMask, truth: &RegionMask) -> Result<f64> {
    if pred.dims != truth.dims || pred.mask.len() != truth.mask.len() {
        return Err(Error::ShapeMismatch {
            subject: String::new(),
            detail: format!("prediction {:?} vs truth {:?}", pred.dims, truth.dims),
        });
    }
    let mut both = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.mask.iter().zip(&truth.mask) {
        p += a as usize;
        t += b as usize;
        both += (a && b) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FoldId {
    Fold(usize),
    /// Subject-weighted mean over several folds.
    Pooled,
}

impl fmt::Display for FoldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldId::Fold(k) => write!(f, "{k}"),
            FoldId::Pooled => f.write_str("pooled"),
        }
    }
}

impl FoldId {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "pooled" {
            return Ok(FoldId::Pooled);
        }
        s.parse().map(FoldId::Fold).map_err(|_| Error::invalid(format!("bad fold '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub model: String,
    pub region: Region,
    /// `+`-joined names of the available modalities.
    pub subset: String,
    /// Fraction in [0, 1].
    pub mean_dice: f64,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub rows: Vec<DiceRow>,
    pub fold: FoldId,
    pub seed: u64,
    pub modality_names: Vec<String>,
}

impl DiceReport {
    pub fn get(&self, model: &str, region: Region, subset: &str) -> Option<&DiceRow> {
        self.rows.iter().find(|r| r.model == model && r.region == region && r.subset == subset)
    }
}

/// What is evaluated and against which training set.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub model_name: String,
    /// Dataset modalities feeding the model inputs, in channel order.
    pub input_modalities: Vec<String>,
    pub training_ids: BTreeSet<String>,
    pub input_side: usize,
    pub fold: FoldId,
    pub seed: u64,
    /// Score only the subset equal to the inputs, even when the model reads
    /// every modality.
    pub own_subset_only: bool,
}

/// Evaluates `model` on every test subject under each subset. A model that
/// reads only some of the dataset modalities (a dedicated model) is
/// evaluated only on the subset equal to its inputs.
pub fn evaluate_subsets(model: &mut Model, test: &[Subject], subsets: &[ModalityMask], ctx: &EvalContext) -> Result<DiceReport> {
    let first = test.first().ok_or_else(|| Error::invalid("test set is empty"))?;
    for s in test {
        if ctx.training_ids.contains(s.id()) {
            return Err(Error::Leakage(s.id().to_string()));
        }
    }
    let names = first.volume.modality_names.clone();
    let m = names.len();
    let channels: Vec<usize> = ctx
        .input_modalities
        .iter()
        .map(|n| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::invalid(format!("model input {n} is not a dataset modality")))
        })
        .collect::<Result<_>>()?;
    let identity = channels.len() == m && channels.iter().enumerate().all(|(i, &c)| i == c);
    let (dataset_masks, model_masks): (Vec<ModalityMask>, Vec<ModalityMask>) = if identity && !ctx.own_subset_only {
        (subsets.to_vec(), subsets.to_vec())
    } else {
        let own = ModalityMask::from_indices(m, &channels)?;
        if subsets.contains(&own) {
            (vec![own], vec![ModalityMask::all(channels.len())])
        } else {
            (Vec::new(), Vec::new())
        }
    };
    let mut sums: HashMap<(usize, Region), f64> = HashMap::new();
    for subject in test {
        if subject.volume.modality_names != names {
            return Err(Error::ShapeMismatch {
                subject: subject.id().to_string(),
                detail: "modality names differ within the test set".into(),
            });
        }
        if model_masks.is_empty() {
            break;
        }
        let selected;
        let volume = if identity {
            &subject.volume
        } else {
            selected = select_modalities(subject, &channels)?;
            &selected.volume
        };
        let preds = sliding_window_predict_masks(model, volume, &model_masks, ctx.input_side)?;
        let truth = derive_regions(&subject.labels);
        for (k, pred) in preds.iter().enumerate() {
            for (p, t) in derive_regions(pred).iter().zip(&truth) {
                *sums.entry((k, t.region)).or_default() += dice(p, t)?;
            }
        }
    }
    let mut rows = Vec::new();
    for (k, mask) in dataset_masks.iter().enumerate() {
        for region in Region::ALL {
            rows.push(DiceRow {
                model: ctx.model_name.clone(),
                region,
                subset: mask.name(&names),
                mean_dice: sums[&(k, region)] / test.len() as f64,
                n_subjects: test.len(),
            });
        }
    }
    Ok(DiceReport {
        rows,
        fold: ctx.fold,
        seed: ctx.seed,
        modality_names: names,
    })
}

/// Concatenates reports of several models on the same fold.
pub fn merge_reports(reports: &[DiceReport]) -> Result<DiceReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to merge"))?;
    Ok(DiceReport {
        rows: reports.iter().flat_map(|r| r.rows.iter().cloned()).collect(),
        fold: first.fold,
        seed: first.seed,
        modality_names: first.modality_names.clone(),
    })
}

/// Subject-weighted mean over per-fold reports, i.e. the mean over all
/// pooled test subjects.
pub fn pool_reports(reports: &[DiceReport]) -> Result<DiceReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to pool"))?;
    let mut order: Vec<(String, Region, String)> = Vec::new();
    let mut acc: HashMap<(String, Region, String), (f64, usize)> = HashMap::new();
    for r in reports.iter().flat_map(|r| &r.rows) {
        let key = (r.model.clone(), r.region, r.subset.clone());
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0)
        });
        e.0 += r.mean_dice * r.n_subjects as f64;
        e.1 += r.n_subjects;
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let (sum, n) = acc[&key];
            DiceRow {
                model: key.0,
                region: key.1,
                subset: key.2,
                mean_dice: if n == 0 { 0.0 } else { sum / n as f64 },
                n_subjects: n,
            }
        })
        .collect();
    Ok(DiceReport {
        rows,
        fold: FoldId::Pooled,
        seed: first.seed,
        modality_names: first.modality_names.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    model: String,
    region: String,
    subset: String,
    mean_dice: f64,
    n_subjects: usize,
    fold: String,
    seed: u64,
}

pub fn report_to_csv(reports: &[DiceReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to emit"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for report in reports {
        for r in &report.rows {
            w.serialize(CsvRow {
                model: r.model.clone(),
                region: r.region.name().to_string(),
                subset: r.subset.clone(),
                mean_dice: r.mean_dice,
                n_subjects: r.n_subjects,
                fold: report.fold.to_string(),
                seed: report.seed,
            })
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses report CSV text back into one report per (fold, seed), in order
/// of first appearance.
pub fn parse_report_csv(text: &str, modality_names: &[String]) -> Result<Vec<DiceReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut reports: Vec<DiceReport> = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::invalid(format!("csv: {e}")))?;
        let fold = FoldId::parse(&row.fold)?;
        let dice_row = DiceRow {
            model: row.model,
            region: Region::parse(&row.region)?,
            subset: row.subset,
            mean_dice: row.mean_dice,
            n_subjects: row.n_subjects,
        };
        match reports.iter_mut().find(|x| x.fold == fold && x.seed == row.seed) {
            Some(rep) => rep.rows.push(dice_row),
            None => reports.push(DiceReport {
                rows: vec![dice_row],
                fold,
                seed: row.seed,
                modality_names: modality_names.to_vec(),
            }),
        }
    }
    Ok(reports)
}

/// One markdown table per region: models as rows, subsets as columns in
/// results-table order, Dice as a percentage.
pub fn report_to_markdown(reports: &[DiceReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to emit"))?;
    let names = &first.modality_names;
    let subsets = enumerate_subsets(names.len());
    let mut out = String::new();
    for report in reports {
        out.push_str(&format!("## Fold {} (seed {})\n\n", report.fold, report.seed));
        let mut models: Vec<&str> = Vec::new();
        for r in &report.rows {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        for region in Region::ALL {
            out.push_str(&format!("### {}\n\n| Model |", region.name()));
            for s in &subsets {
                out.push_str(&format!(" {} |", s.table_label(names)));
            }
            out.push_str("\n|---|");
            out.push_str(&"---:|".repeat(subsets.len()));
            out.push('\n');
            for model in &models {
                out.push_str(&format!("| {model} |"));
                for s in &subsets {
                    match report.get(model, region, &s.name(names)) {
                        Some(r) => out.push_str(&format!(" {:.1} |", 100.0 * r.mean_dice)),
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn emit_report(reports: &[DiceReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_to_csv(reports)?,
        ReportFormat::Markdown => report_to_markdown(reports)?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
