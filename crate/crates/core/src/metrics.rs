//! Segmentation metrics inside the field of view, with vessel as the
//! positive class.

use std::fmt;

use crate::data::PnmImage;
use crate::error::{Error, Result};
use crate::map::BinaryMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn check_dims(maps: &[&BinaryMap], op: &'static str) -> Result<()> {
    for m in &maps[1..] {
        maps[0].expect_dims(m, op)?;
    }
    Ok(())
}

pub fn confusion(pred: &BinaryMap, gt: &BinaryMap, fov: &BinaryMap) -> Result<ConfusionCounts> {
    check_dims(&[pred, gt, fov], "confusion")?;
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &f) in pred.data().iter().zip(gt.data()).zip(fov.data()) {
        if f == 0 {
            continue;
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    if c.total() == 0 {
        return Err(Error::Metrics("empty field of view".into()));
    }
    Ok(c)
}

/// Sensitivity, specificity, accuracy and F1. `None` marks a zero
/// denominator and is reported as "n/a".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarMetrics {
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    ScalarMetrics {
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        acc: ratio(c.tp + c.tn, c.total()),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// Area under the ROC curve by the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
/// Uses average ranks, so it runs in `O(n log n)`.
pub fn auc_from_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metrics(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metrics("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u128;
    let n_neg = positive.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metrics(
            "AUC needs both classes in the field of view".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum of the positives, kept integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average (i + j + 2) / 2
        let doubled_rank = (i + j + 2) as u128;
        let pos = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank_sum2 += pos * doubled_rank;
        i = j + 1;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// AUC of vessel probabilities against `gt` over the FOV.
pub fn auc_roc(scores: &[f32], gt: &BinaryMap, fov: &BinaryMap) -> Result<f64> {
    check_dims(&[gt, fov], "auc_roc")?;
    if scores.len() != gt.data().len() {
        return Err(Error::Metrics(format!(
            "score map has {} pixels, ground truth {}",
            scores.len(),
            gt.data().len()
        )));
    }
    let (s, p) = fov_pixels(scores, gt, fov);
    auc_from_scores(&s, &p)
}

fn fov_pixels(scores: &[f32], gt: &BinaryMap, fov: &BinaryMap) -> (Vec<f64>, Vec<bool>) {
    scores
        .iter()
        .zip(gt.data())
        .zip(fov.data())
        .filter(|(_, &f)| f == 1)
        .map(|((&s, &g), _)| (s as f64, g == 1))
        .unzip()
}

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const OUTSIDE_COLOR: [u8; 3] = [32, 32, 32];

/// TP green, TN black, FP red, FN blue, outside the FOV dark gray.
pub fn render_overlay(pred: &BinaryMap, gt: &BinaryMap, fov: &BinaryMap) -> Result<PnmImage> {
    check_dims(&[pred, gt, fov], "render_overlay")?;
    let mut rgb = Vec::with_capacity(3 * pred.data().len());
    for ((&p, &g), &f) in pred.data().iter().zip(gt.data()).zip(fov.data()) {
        let color = match (f, p, g) {
            (0, _, _) => OUTSIDE_COLOR,
            (_, 1, 1) => TP_COLOR,
            (_, 0, 0) => TN_COLOR,
            (_, 1, 0) => FP_COLOR,
            _ => FN_COLOR,
        };
        rgb.extend_from_slice(&color);
    }
    Ok(PnmImage::rgb(pred.width(), pred.height(), rgb))
}

/// Counts overlay pixels by color, mapped back to confusion counts.
pub fn overlay_counts(overlay: &PnmImage) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for px in overlay.data.chunks_exact(3) {
        let px = [px[0] as u8, px[1] as u8, px[2] as u8];
        match px {
            TP_COLOR => c.tp += 1,
            TN_COLOR => c.tn += 1,
            FP_COLOR => c.fp += 1,
            FN_COLOR => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub scalars: ScalarMetrics,
    /// `None` when the FOV holds a single class.
    pub auc: Option<f64>,
}

impl ImageMetrics {
    fn values(&self) -> [Option<f64>; 5] {
        let s = &self.scalars;
        [s.se, s.sp, s.acc, s.f1, self.auc]
    }
}

/// Thresholds `probs` (vessel probability per pixel) and scores it.
pub fn evaluate_image(
    id: &str,
    probs: &[f32],
    gt: &BinaryMap,
    fov: &BinaryMap,
    threshold: f32,
) -> Result<(ImageMetrics, BinaryMap)> {
    let pred = BinaryMap::from_threshold(gt.height(), gt.width(), probs, threshold)?;
    let counts = confusion(&pred, gt, fov)?;
    let auc = auc_roc(probs, gt, fov).ok();
    Ok((
        ImageMetrics {
            id: id.to_string(),
            counts,
            scalars: scalar_metrics(&counts),
            auc,
        },
        pred,
    ))
}

/// Per-image rows plus two aggregates: pooled (counts and scores of every
/// image combined) and the mean of per-image values with n/a entries left
/// out.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub pooled: ImageMetrics,
    pub mean: [Option<f64>; 5],
}

pub const REPORT_HEADER: &str = "image_id,se,sp,acc,f1,auc";

/// One evaluated image: id, vessel probabilities, ground truth and FOV.
pub struct EvalInput<'a> {
    pub id: &'a str,
    pub probs: &'a [f32],
    pub gt: &'a BinaryMap,
    pub fov: &'a BinaryMap,
}

impl MetricsReport {
    /// Images are reported in id order whatever order they arrive in.
    pub fn build(inputs: &[EvalInput<'_>], threshold: f32) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Metrics("nothing to evaluate".into()));
        }
        let mut sorted: Vec<&EvalInput> = inputs.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(b.id));
        let mut images = Vec::with_capacity(sorted.len());
        let mut pooled = ConfusionCounts::default();
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for input in sorted {
            let (m, _) = evaluate_image(input.id, input.probs, input.gt, input.fov, threshold)?;
            pooled += m.counts;
            let (s, p) = fov_pixels(input.probs, input.gt, input.fov);
            scores.extend(s);
            labels.extend(p);
            images.push(m);
        }
        let pooled = ImageMetrics {
            id: "POOLED".into(),
            counts: pooled,
            scalars: scalar_metrics(&pooled),
            auc: auc_from_scores(&scores, &labels).ok(),
        };
        let mut mean = [None; 5];
        for (k, slot) in mean.iter_mut().enumerate() {
            let vals: Vec<f64> = images.iter().filter_map(|m| m.values()[k]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Ok(MetricsReport {
            images,
            pooled,
            mean,
        })
    }

    /// Header, one row per image, then the POOLED row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for m in self.images.iter().chain([&self.pooled]) {
            out.push_str(&csv_row(&m.id, &m.values()));
            out.push('\n');
        }
        out
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

fn csv_row(id: &str, values: &[Option<f64>; 5]) -> String {
    let cols: Vec<String> = values.iter().map(|&v| fmt_value(v)).collect();
    format!("{id},{}", cols.join(","))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "image", "Se", "Sp", "Acc", "F1", "AUC"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, id: &str, v: &[Option<f64>; 5]| {
            let cols: Vec<String> = v.iter().map(|&x| format!("{:>9}", fmt_value(x))).collect();
            writeln!(f, "{id:<16} {}", cols.join(" "))
        };
        for m in &self.images {
            row(f, &m.id, &m.values())?;
        }
        row(f, "POOLED", &self.pooled.values())?;
        row(f, "MEAN", &self.mean)
    }
}
