//! Dice and IoU overlap scores, sampled test-set evaluation of any
//! [`Segmenter`], and cross-model comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest};
use crate::NUM_CLASSES;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "gray_matter", "white_matter"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("class id {0} is not one of 0, 1, 2")]
    InvalidClass(u8),
    #[error("test manifest is empty")]
    EmptyManifest,
    #[error("invalid prompt box ({0}, {1}, {2}, {3})")]
    InvalidPrompt(f32, f32, f32, f32),
    #[error("segmentation failed: {0}")]
    Segmenter(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Box prompt in normalized image coordinates, `x` along columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl PromptSpec {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Result<Self> {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !(unit(x0) && unit(y0) && unit(x1) && unit(y1) && x0 < x1 && y0 < y1) {
            return Err(MetricsError::InvalidPrompt(x0, y0, x1, y1));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full_image() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    /// Tight box around GM/WM pixels; the full image when there are none.
    pub fn tissue_box(label: ArrayView2<u8>) -> Self {
        let (rows, cols) = label.dim();
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for ((r, c), &l) in label.indexed_iter() {
            if l == 0 {
                continue;
            }
            let b = bounds.get_or_insert((r, c, r, c));
            *b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
        }
        match bounds {
            None => Self::full_image(),
            Some((r0, c0, r1, c1)) => Self {
                x0: c0 as f32 / cols as f32,
                y0: r0 as f32 / rows as f32,
                x1: (c1 + 1) as f32 / cols as f32,
                y1: (r1 + 1) as f32 / rows as f32,
            },
        }
    }
}

/// Which prompt to hand the model for a slice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    FullImage,
    /// Bounding box of the ground-truth tissue.
    TissueBox,
}

impl PromptMode {
    pub fn prompt_for(self, label: ArrayView2<u8>) -> PromptSpec {
        match self {
            PromptMode::FullImage => PromptSpec::full_image(),
            PromptMode::TissueBox => PromptSpec::tissue_box(label),
        }
    }
}

/// Label mask plus per-class probabilities shaped `(3, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Array2<u8>,
    pub probabilities: Array3<f32>,
}

/// Anything that maps a normalized grayscale slice to a three-class prediction.
pub trait Segmenter {
    fn segment(
        &self,
        image: ArrayView2<f32>,
        prompt: &PromptSpec,
    ) -> Result<Prediction, Box<dyn std::error::Error + Send + Sync>>;
}

/// Pixel counts behind one class's overlap scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub pred: u64,
    pub gt: u64,
    pub intersection: u64,
}

impl OverlapCounts {
    pub fn measure(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class_id: u8) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.dim(),
                gt: gt.dim(),
            });
        }
        if class_id as usize >= NUM_CLASSES {
            return Err(MetricsError::InvalidClass(class_id));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (a, b) = (p == class_id, g == class_id);
            c.pred += a as u64;
            c.gt += b as u64;
            c.intersection += (a && b) as u64;
        }
        Ok(c)
    }

    /// Neither mask contains the class.
    pub fn is_empty(&self) -> bool {
        self.pred == 0 && self.gt == 0
    }

    pub fn add(&mut self, other: &OverlapCounts) {
        self.pred += other.pred;
        self.gt += other.gt;
        self.intersection += other.intersection;
    }

    /// `2|A∩B| / (|A|+|B|)`, 1 when both sets are empty.
    pub fn dice(&self) -> f64 {
        if self.is_empty() {
            return 1.0;
        }
        2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
    }

    /// `|A∩B| / |A∪B|`, 1 when both sets are empty.
    pub fn iou(&self) -> f64 {
        if self.is_empty() {
            return 1.0;
        }
        self.intersection as f64 / (self.pred + self.gt - self.intersection) as f64
    }
}

pub fn dice(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class_id: u8) -> Result<f64> {
    Ok(OverlapCounts::measure(pred, gt, class_id)?.dice())
}

pub fn iou(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class_id: u8) -> Result<f64> {
    Ok(OverlapCounts::measure(pred, gt, class_id)?.iou())
}

/// How per-slice, per-class scores are folded into an overall score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over slices, then mean over GM and WM.
    #[default]
    MacroForeground,
    /// Mean over slices, then mean over all three classes.
    MacroAll,
    /// Pooled pixel counts per class, then mean over GM and WM.
    Micro,
}

/// Treatment of slices where a class is absent from both masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// Count the slice with score 1.
    #[default]
    ScoreOne,
    /// Leave the slice out of that class's mean.
    Exclude,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub sample_n: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub empty_policy: EmptyPolicy,
    pub prompt: PromptMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            sample_n: 1000,
            seed: 0,
            aggregation: Aggregation::MacroForeground,
            empty_policy: EmptyPolicy::ScoreOne,
            prompt: PromptMode::FullImage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub per_class: BTreeMap<String, ClassScores>,
    pub overall_dice: f64,
    pub overall_iou: f64,
    pub n_slices_evaluated: usize,
    pub sampling_seed: u64,
    pub aggregation: Aggregation,
    pub empty_policy: EmptyPolicy,
    /// Per class, how many evaluated slices had the class in neither mask.
    pub empty_slices: BTreeMap<String, usize>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "model,overall_dice,overall_iou";

    pub fn csv_row(&self) -> String {
        format!("{},{:.4},{:.4}", self.model_id, self.overall_dice, self.overall_iou)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fold per-slice counts (`slices[i][class]`) into a report.
pub fn aggregate(
    model_id: &str,
    slices: &[[OverlapCounts; NUM_CLASSES]],
    sampling_seed: u64,
    aggregation: Aggregation,
    empty_policy: EmptyPolicy,
) -> MetricsReport {
    let mut per_class = [ClassScores { dice: 1.0, iou: 1.0 }; NUM_CLASSES];
    let mut empty = [0usize; NUM_CLASSES];
    for class in 0..NUM_CLASSES {
        empty[class] = slices.iter().filter(|s| s[class].is_empty()).count();
        per_class[class] = match aggregation {
            Aggregation::Micro => {
                let mut pooled = OverlapCounts::default();
                slices.iter().for_each(|s| pooled.add(&s[class]));
                ClassScores {
                    dice: pooled.dice(),
                    iou: pooled.iou(),
                }
            }
            Aggregation::MacroForeground | Aggregation::MacroAll => {
                let kept: Vec<&OverlapCounts> = slices
                    .iter()
                    .map(|s| &s[class])
                    .filter(|c| empty_policy == EmptyPolicy::ScoreOne || !c.is_empty())
                    .collect();
                if kept.is_empty() {
                    ClassScores { dice: 1.0, iou: 1.0 }
                } else {
                    let n = kept.len() as f64;
                    ClassScores {
                        dice: kept.iter().map(|c| c.dice()).sum::<f64>() / n,
                        iou: kept.iter().map(|c| c.iou()).sum::<f64>() / n,
                    }
                }
            }
        };
    }
    let overall_classes: &[usize] = match aggregation {
        Aggregation::MacroAll => &[0, 1, 2],
        _ => &[1, 2],
    };
    let k = overall_classes.len() as f64;
    let overall_dice = overall_classes.iter().map(|&c| per_class[c].dice).sum::<f64>() / k;
    let overall_iou = overall_classes.iter().map(|&c| per_class[c].iou).sum::<f64>() / k;
    MetricsReport {
        model_id: model_id.to_string(),
        per_class: CLASS_NAMES
            .iter()
            .zip(per_class)
            .map(|(n, s)| (n.to_string(), s))
            .collect(),
        overall_dice,
        overall_iou,
        n_slices_evaluated: slices.len(),
        sampling_seed,
        aggregation,
        empty_policy,
        empty_slices: CLASS_NAMES
            .iter()
            .zip(empty)
            .map(|(n, e)| (n.to_string(), e))
            .collect(),
    }
}

/// Seeded sample of manifest positions, returned in ascending order.
pub fn sample_indices(len: usize, sample_n: usize, seed: u64) -> Vec<usize> {
    if sample_n >= len {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(sample_n);
    idx.sort_unstable();
    idx
}

/// Score a segmenter on a seeded sample of a test manifest.
pub fn evaluate_model<S: Segmenter + ?Sized>(
    model: &S,
    model_id: &str,
    manifest: &DatasetManifest,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(MetricsError::EmptyManifest);
    }
    if settings.sample_n > manifest.len() {
        log::warn!(
            "requested {} slices but the test manifest has {}; evaluating all of them",
            settings.sample_n,
            manifest.len()
        );
    }
    let picked = sample_indices(manifest.len(), settings.sample_n, settings.seed);
    let mut slices = Vec::with_capacity(picked.len());
    for i in picked {
        let pair = manifest.load_pair(&manifest.entries[i])?;
        let prompt = settings.prompt.prompt_for(pair.label.view());
        let pred = model
            .segment(pair.image.view(), &prompt)
            .map_err(MetricsError::Segmenter)?;
        slices.push(slice_counts(pred.label.view(), pair.label.view())?);
    }
    Ok(aggregate(
        model_id,
        &slices,
        settings.seed,
        settings.aggregation,
        settings.empty_policy,
    ))
}

/// Counts for all three classes of one slice.
pub fn slice_counts(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<[OverlapCounts; NUM_CLASSES]> {
    Ok([
        OverlapCounts::measure(pred, gt, 0)?,
        OverlapCounts::measure(pred, gt, 1)?,
        OverlapCounts::measure(pred, gt, 2)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub overall_dice: f64,
    pub overall_iou: f64,
    pub n_slices_evaluated: usize,
}

/// Reports ranked by overall Dice, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MetricsReport::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4},{:.4}", r.model, r.overall_dice, r.overall_iou);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>6}\n", "model", "dice", "iou", "slices");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>7.4}  {:>6}",
                r.model, r.overall_dice, r.overall_iou, r.n_slices_evaluated
            );
        }
        out
    }
}

pub fn compare_models(reports: &[MetricsReport]) -> ComparisonTable {
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.model_id.clone(),
            overall_dice: r.overall_dice,
            overall_iou: r.overall_iou,
            n_slices_evaluated: r.n_slices_evaluated,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.overall_dice
            .total_cmp(&a.overall_dice)
            .then_with(|| a.model.cmp(&b.model))
    });
    ComparisonTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dice_examples() {
        let a = array![[1u8, 1, 0, 0]];
        assert_eq!(dice(a.view(), a.view(), 1).unwrap(), 1.0);
        let b = array![[0u8, 0, 1, 1]];
        assert_eq!(dice(a.view(), b.view(), 1).unwrap(), 0.0);
        let c = array![[0u8, 1, 1, 0]];
        assert_eq!(dice(a.view(), c.view(), 1).unwrap(), 0.5);
        assert_eq!(iou(a.view(), c.view(), 1).unwrap(), 1.0 / 3.0);
        // class absent everywhere
        assert_eq!(dice(a.view(), c.view(), 2).unwrap(), 1.0);
        assert!(matches!(
            dice(a.view(), array![[1u8]].view(), 1),
            Err(MetricsError::ShapeMismatch { .. })
        ));
        assert!(matches!(dice(a.view(), a.view(), 3), Err(MetricsError::InvalidClass(3))));
    }

    #[test]
    fn prompt_validation_and_tissue_box() {
        assert!(PromptSpec::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(PromptSpec::new(0.0, 0.0, 1.0, 1.5).is_err());
        let mut l = Array2::<u8>::zeros((10, 20));
        assert_eq!(PromptSpec::tissue_box(l.view()), PromptSpec::full_image());
        l[[2, 4]] = 1;
        l[[5, 9]] = 2;
        let b = PromptSpec::tissue_box(l.view());
        assert_eq!(b, PromptSpec { x0: 0.2, y0: 0.2, x1: 0.5, y1: 0.6 });
    }

    fn report(id: &str, d: f64) -> MetricsReport {
        aggregate(id, &[], 0, Aggregation::MacroForeground, EmptyPolicy::ScoreOne)
            .with_overall(d)
    }

    impl MetricsReport {
        fn with_overall(mut self, d: f64) -> Self {
            self.overall_dice = d;
            self
        }
    }

    #[test]
    fn comparison_ranks_by_dice() {
        let t = compare_models(&[
            report("axial", 0.8440),
            report("sagittal", 0.8604),
            report("coronal", 0.8751),
        ]);
        let names: Vec<&str> = t.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["coronal", "sagittal", "axial"]);
        assert!(t.to_csv().starts_with("model,overall_dice,overall_iou\ncoronal,0.8751,"));
        assert_eq!(compare_models(&[report("only", 0.5)]).rows.len(), 1);
    }

    #[test]
    fn exclude_policy_skips_empty_slices() {
        let full = OverlapCounts { pred: 4, gt: 4, intersection: 2 };
        let empty = OverlapCounts::default();
        let slices = [[full, full, empty], [full, full, full]];
        let one = aggregate("m", &slices, 0, Aggregation::MacroForeground, EmptyPolicy::ScoreOne);
        let ex = aggregate("m", &slices, 0, Aggregation::MacroForeground, EmptyPolicy::Exclude);
        assert_eq!(one.per_class["white_matter"].dice, 0.75);
        assert_eq!(ex.per_class["white_matter"].dice, 0.5);
        assert_eq!(one.empty_slices["white_matter"], 1);
    }

    #[test]
    fn sampling_is_seeded_and_sorted() {
        let a = sample_indices(100, 10, 5);
        assert_eq!(a, sample_indices(100, 10, 5));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(3, 10, 5), vec![0, 1, 2]);
    }
}
