//! Detection evaluation: TP/FP/FN matching, precision, recall, AP and mAP.
//!
//! AP is the area under the precision envelope (all-point interpolation).
//! Recall only rises at true-positive ranks, and always by `1 / n_gt`, so the
//! integral is accumulated as the envelope precision at each true-positive
//! rank divided by `n_gt`.

use std::collections::BTreeMap;

use crate::error::{Error, ParseError, Result};
use crate::geometry::{iou, BBox};
use crate::scalar::Scalar;

/// IoU thresholds of the mAP@0.5:0.95 protocol, in percent.
pub const COCO_THRESHOLDS_PCT: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub image_id: String,
    pub category_id: u32,
    pub confidence: T,
    pub bbox: BBox<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T> {
    pub image_id: String,
    pub category_id: u32,
    pub bbox: BBox<T>,
}

/// One detection in confidence order with its verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedDetection {
    /// Position in the caller's detection slice.
    pub index: usize,
    pub category_id: u32,
    pub is_tp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn num_gt(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// All detections, highest confidence first (ties keep input order).
    pub ranked: Vec<RankedDetection>,
    /// Counts for every category seen in detections or ground truth.
    pub per_category: BTreeMap<u32, Counts>,
}

impl MatchResult {
    pub fn totals(&self) -> Counts {
        self.per_category.values().fold(Counts::default(), |acc, c| Counts {
            tp: acc.tp + c.tp,
            fp: acc.fp + c.fp,
            fn_: acc.fn_ + c.fn_,
        })
    }
}

/// Indices of `dets` sorted by descending confidence, stable.
fn confidence_order<T: Scalar>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Greedy matching in confidence order. Each detection takes the unmatched
/// ground truth of the same image and category with the highest IoU (first
/// such ground truth on ties) when that IoU reaches `iou_threshold`;
/// otherwise it is a false positive. Unmatched ground truths are misses.
pub fn match_detections<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    iou_threshold: T,
) -> MatchResult {
    let mut by_key: BTreeMap<(&str, u32), Vec<usize>> = BTreeMap::new();
    let mut per_category: BTreeMap<u32, Counts> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id.as_str(), g.category_id)).or_default().push(i);
        per_category.entry(g.category_id).or_default();
    }
    let mut taken = vec![false; gts.len()];
    let mut ranked = Vec::with_capacity(dets.len());
    for index in confidence_order(dets) {
        let d = &dets[index];
        let mut best: Option<(usize, T)> = None;
        if let Some(cands) = by_key.get(&(d.image_id.as_str(), d.category_id)) {
            for &g in cands.iter().filter(|&&g| !taken[g]) {
                let v = iou(d.bbox, gts[g].bbox);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
        }
        let counts = per_category.entry(d.category_id).or_default();
        let is_tp = match best {
            Some((g, v)) if v >= iou_threshold => {
                taken[g] = true;
                counts.tp += 1;
                true
            }
            _ => {
                counts.fp += 1;
                false
            }
        };
        ranked.push(RankedDetection {
            index,
            category_id: d.category_id,
            is_tp,
        });
    }
    for (g, gt) in gts.iter().enumerate() {
        if !taken[g] {
            per_category.entry(gt.category_id).or_default().fn_ += 1;
        }
    }
    MatchResult { ranked, per_category }
}

/// `TP / (TP + FP)` and `TP / (TP + FN)`; an empty denominator gives 1.
pub fn precision_recall<T: Scalar>(c: &Counts) -> (T, T) {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            T::one()
        } else {
            T::from_count(num) / T::from_count(den)
        }
    };
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint<T> {
    pub recall: T,
    pub precision: T,
    /// Cumulative true positives at this rank.
    pub tp: usize,
    /// Cumulative false positives at this rank.
    pub fp: usize,
}

/// Precision/recall after each detection rank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve<T> {
    pub num_gt: usize,
    pub points: Vec<PrPoint<T>>,
}

impl<T: Scalar> PrCurve<T> {
    /// Builds the curve from TP/FP verdicts in rank order.
    pub fn from_flags(flags: impl IntoIterator<Item = bool>, num_gt: usize) -> Self {
        let (mut tp, mut fp) = (0usize, 0usize);
        let points = flags
            .into_iter()
            .map(|is_tp| {
                if is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
                let (precision, recall) = precision_recall::<T>(&Counts {
                    tp,
                    fp,
                    fn_: num_gt.saturating_sub(tp),
                });
                PrPoint {
                    recall,
                    precision,
                    tp,
                    fp,
                }
            })
            .collect();
        PrCurve { num_gt, points }
    }
}

/// PR curve over all given detections and ground truths at one IoU threshold.
pub fn pr_curve<T: Scalar>(dets: &[Detection<T>], gts: &[GroundTruth<T>], iou_threshold: T) -> PrCurve<T> {
    let m = match_detections(dets, gts, iou_threshold);
    PrCurve::from_flags(m.ranked.iter().map(|r| r.is_tp), gts.len())
}

/// Area under the precision envelope over recall in `[0, 1]`. Recall levels
/// never reached contribute nothing; a curve without ground truth scores 0.
pub fn average_precision<T: Scalar>(curve: &PrCurve<T>) -> T {
    if curve.num_gt == 0 || curve.points.is_empty() {
        return T::zero();
    }
    let n = curve.points.len();
    let mut envelope = vec![T::zero(); n];
    let mut running = T::zero();
    for i in (0..n).rev() {
        running = running.max(curve.points[i].precision);
        envelope[i] = running;
    }
    let mut area = T::zero();
    let mut prev_tp = 0;
    for (p, &env) in curve.points.iter().zip(&envelope) {
        if p.tp > prev_tp {
            area += env;
            prev_tp = p.tp;
        }
    }
    area / T::from_count(curve.num_gt)
}

/// Arithmetic mean of per-category APs.
pub fn mean_ap<T: Scalar>(aps: &[T]) -> Result<T> {
    if aps.is_empty() {
        return Err(Error::Undefined("mAP needs at least one category with ground truth".into()));
    }
    Ok(aps.iter().copied().sum::<T>() / T::from_count(aps.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport<T> {
    pub category_id: u32,
    pub counts: Counts,
    pub precision: T,
    pub recall: T,
    pub ap: T,
    pub curve: PrCurve<T>,
}

/// Per-category results at one IoU threshold. Only categories with ground
/// truth are reported and averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult<T> {
    pub iou_threshold: T,
    pub per_category: Vec<CategoryReport<T>>,
    pub map: T,
}

pub fn evaluate<T: Scalar>(dets: &[Detection<T>], gts: &[GroundTruth<T>], iou_threshold: T) -> Result<ApResult<T>> {
    let m = match_detections(dets, gts, iou_threshold);
    let per_category: Vec<CategoryReport<T>> = m
        .per_category
        .iter()
        .filter(|(_, c)| c.num_gt() > 0)
        .map(|(&category_id, &counts)| {
            let curve = PrCurve::from_flags(
                m.ranked
                    .iter()
                    .filter(|r| r.category_id == category_id)
                    .map(|r| r.is_tp),
                counts.num_gt(),
            );
            let (precision, recall) = precision_recall(&counts);
            CategoryReport {
                category_id,
                counts,
                precision,
                recall,
                ap: average_precision(&curve),
                curve,
            }
        })
        .collect();
    let aps: Vec<T> = per_category.iter().map(|c| c.ap).collect();
    Ok(ApResult {
        iou_threshold,
        map: mean_ap(&aps)?,
        per_category,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSummary<T> {
    pub map50: T,
    pub map5095: T,
    /// mAP at each threshold of [`COCO_THRESHOLDS_PCT`].
    pub per_threshold: Vec<(T, T)>,
}

pub fn coco_thresholds<T: Scalar>() -> Vec<T> {
    COCO_THRESHOLDS_PCT
        .iter()
        .map(|&p| T::from_count(p as usize) / T::of(100.0))
        .collect()
}

/// mAP@0.5 and the mean of mAP over thresholds 0.50, 0.55, ..., 0.95.
pub fn map_over_thresholds<T: Scalar>(dets: &[Detection<T>], gts: &[GroundTruth<T>]) -> Result<MapSummary<T>> {
    let per_threshold = coco_thresholds::<T>()
        .into_iter()
        .map(|t| Ok((t, evaluate(dets, gts, t)?.map)))
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<T> = per_threshold.iter().map(|&(_, m)| m).collect();
    Ok(MapSummary {
        map50: maps[0],
        map5095: mean_ap(&maps)?,
        per_threshold,
    })
}

/// Parses one detections-file line: `image_id category_id confidence cx cy w h`.
pub fn parse_detection_line(line: &str, line_no: usize) -> std::result::Result<Detection<f64>, ParseError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 7 {
        return Err(ParseError::new(
            line_no,
            format!("expected 7 fields, found {}", fields.len()),
        ));
    }
    let category_id = fields[1]
        .parse::<u32>()
        .map_err(|_| ParseError::new(line_no, format!("category '{}' is not a non-negative integer", fields[1])))?;
    let mut nums = [0.0f64; 5];
    for (slot, tok) in nums.iter_mut().zip(&fields[2..]) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ParseError::new(line_no, format!("'{tok}' is not a finite number")))?;
    }
    if nums.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(ParseError::new(line_no, "confidence and coordinates must lie in [0, 1]"));
    }
    let [confidence, cx, cy, w, h] = nums;
    Ok(Detection {
        image_id: fields[0].to_string(),
        category_id,
        confidence,
        bbox: BBox::new(cx, cy, w, h),
    })
}

/// Parses a whole detections file; blank lines are skipped.
pub fn parse_detections(text: &str) -> std::result::Result<Vec<Detection<f64>>, ParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_detection_line(l, i + 1))
        .collect()
}

pub fn format_detection(d: &Detection<f64>) -> String {
    format!(
        "{} {} {} {} {} {} {}",
        d.image_id, d.category_id, d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: &str, cat: u32, b: [f64; 4]) -> GroundTruth<f64> {
        GroundTruth {
            image_id: img.into(),
            category_id: cat,
            bbox: BBox::from_array(b),
        }
    }

    fn det(img: &str, cat: u32, conf: f64, b: [f64; 4]) -> Detection<f64> {
        Detection {
            image_id: img.into(),
            category_id: cat,
            confidence: conf,
            bbox: BBox::from_array(b),
        }
    }

    #[test]
    fn exact_match_is_tp() {
        let g = [gt("a", 0, [0.5, 0.5, 0.2, 0.2])];
        let d = [det("a", 0, 0.9, [0.5, 0.5, 0.2, 0.2])];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.totals(), Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn below_threshold_is_fp_and_miss() {
        // widths 1.0 vs 0.45 with shared left edge: IoU 0.45
        let g = [gt("a", 0, [0.5, 0.5, 1.0, 1.0])];
        let d = [det("a", 0, 0.9, [0.225, 0.5, 0.45, 1.0])];
        assert!((iou(d[0].bbox, g[0].bbox) - 0.45).abs() < 1e-12);
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.totals(), Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = [gt("a", 0, [0.5, 0.5, 0.2, 0.2])];
        let d = [
            det("a", 0, 0.8, [0.51, 0.5, 0.2, 0.2]),
            det("a", 0, 0.9, [0.5, 0.5, 0.2, 0.2]),
        ];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.ranked[0], RankedDetection { index: 1, category_id: 0, is_tp: true });
        assert_eq!(m.ranked[1], RankedDetection { index: 0, category_id: 0, is_tp: false });
        // Exhaustive assignment: at most one TP is possible, and the rule
        // gives it to the more confident detection.
        assert_eq!(m.totals(), Counts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn other_image_or_category_never_matches() {
        let g = [gt("a", 0, [0.5, 0.5, 0.2, 0.2])];
        let d = [
            det("b", 0, 0.9, [0.5, 0.5, 0.2, 0.2]),
            det("a", 1, 0.9, [0.5, 0.5, 0.2, 0.2]),
        ];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.totals(), Counts { tp: 0, fp: 2, fn_: 1 });
    }

    #[test]
    fn precision_recall_examples() {
        let (p, _) = precision_recall::<f64>(&Counts { tp: 8, fp: 2, fn_: 0 });
        assert_eq!(p, 0.8);
        let (_, r) = precision_recall::<f64>(&Counts { tp: 6, fp: 0, fn_: 2 });
        assert_eq!(r, 0.75);
        assert_eq!(precision_recall::<f64>(&Counts::default()), (1.0, 1.0));
    }

    #[test]
    fn pr_curve_examples() {
        let g = [gt("a", 0, [0.5, 0.5, 0.2, 0.2])];
        let tp = det("a", 0, 0.9, [0.5, 0.5, 0.2, 0.2]);
        let fp = det("a", 0, 0.5, [0.1, 0.1, 0.05, 0.05]);
        let c = pr_curve(&[tp.clone()], &g, 0.5);
        assert_eq!(c.points.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>(), vec![(1.0, 1.0)]);
        let c = pr_curve(&[tp, fp], &g, 0.5);
        assert_eq!(
            c.points.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>(),
            vec![(1.0, 1.0), (1.0, 0.5)]
        );
        assert!(pr_curve(&[], &g, 0.5).points.is_empty());
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&PrCurve::<f64>::from_flags([true], 1)), 1.0);
        let fp_first = PrCurve::<f64>::from_flags([false, true], 1);
        assert_eq!(
            fp_first.points.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>(),
            vec![(0.0, 0.0), (1.0, 0.5)]
        );
        assert_eq!(average_precision(&fp_first), 0.5);
        assert_eq!(average_precision(&PrCurve::<f64>::from_flags([], 1)), 0.0);
        // envelope lifts the dip: TP, FP, TP over 2 GT -> 0.5*1 + 0.5*(2/3)
        let c = PrCurve::<f64>::from_flags([true, false, true], 2);
        assert!((average_precision(&c) - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(mean_ap(&[0.42]).unwrap(), 0.42);
        assert!(matches!(mean_ap::<f64>(&[]), Err(Error::Undefined(_))));
    }

    #[test]
    fn undetected_category_scores_zero() {
        let g = [gt("a", 0, [0.5, 0.5, 0.2, 0.2]), gt("a", 1, [0.2, 0.2, 0.1, 0.1])];
        let d = [det("a", 0, 0.9, [0.5, 0.5, 0.2, 0.2])];
        let r = evaluate(&d, &g, 0.5).unwrap();
        assert_eq!(r.per_category.len(), 2);
        assert_eq!(r.per_category[1].ap, 0.0);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn category_without_ground_truth_is_excluded() {
        let g = [gt("a", 0, [0.5, 0.5, 0.2, 0.2])];
        let d = [det("a", 0, 0.9, [0.5, 0.5, 0.2, 0.2]), det("a", 4, 0.9, [0.5, 0.5, 0.2, 0.2])];
        let r = evaluate(&d, &g, 0.5).unwrap();
        assert_eq!(r.per_category.len(), 1);
        assert_eq!(r.map, 1.0);
        assert!(evaluate::<f64>(&d, &[], 0.5).is_err());
    }

    #[test]
    fn thresholds_protocol() {
        let g = [gt("a", 0, [0.5, 0.5, 0.2, 0.2]), gt("b", 1, [0.3, 0.3, 0.1, 0.4])];
        let perfect: Vec<_> = g.iter().map(|x| det(&x.image_id, x.category_id, 1.0, x.bbox.to_array())).collect();
        let s = map_over_thresholds(&perfect, &g).unwrap();
        assert_eq!((s.map50, s.map5095), (1.0, 1.0));

        // IoU 0.62 passes 0.50, 0.55 and 0.60 only
        let g = [gt("a", 0, [0.5, 0.5, 1.0, 1.0])];
        let d = [det("a", 0, 0.9, [0.31, 0.5, 0.62, 1.0])];
        let s = map_over_thresholds(&d, &g).unwrap();
        assert_eq!(s.map50, 1.0);
        assert!((s.map5095 - 0.3).abs() < 1e-15);
        assert!(s.map5095 < s.map50);
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = coco_thresholds::<f64>();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[1], 0.55);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn detection_lines() {
        let d = parse_detection_line("img_01 2 0.75 0.5 0.4 0.1 0.2", 1).unwrap();
        assert_eq!(d.category_id, 2);
        assert_eq!(d.bbox, BBox::new(0.5, 0.4, 0.1, 0.2));
        assert_eq!(parse_detection_line(&format_detection(&d), 1).unwrap(), d);
        assert!(parse_detection_line("img 0 0.5 0.5 0.5 0.1", 3).is_err());
        assert!(parse_detection_line("img 0 1.5 0.5 0.5 0.1 0.1", 3).is_err());
        assert!(parse_detection_line("img -1 0.5 0.5 0.5 0.1 0.1", 3).is_err());
        let e = parse_detections("a 0 0.5 0.5 0.5 0.1 0.1\n\nb 0 x 0.5 0.5 0.1 0.1\n").unwrap_err();
        assert_eq!(e.line, 3);
    }
}
