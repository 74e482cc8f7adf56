//! Detection evaluation: per-class average precision at IoU 0.5 with
//! all-point interpolation, and the class-mean over populated classes.

use crate::error::{Error, Result};
use crate::geometry::{iou, DetectionSet};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fneg: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP per class with at least one ground-truth instance.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Unweighted mean of `per_class_ap`; 0 when no class has ground truth.
    pub map50: f64,
    pub counts: BTreeMap<usize, ClassCounts>,
    /// (recall, precision) points per class, in detection-score order.
    pub pr_points: BTreeMap<usize, Vec<(f64, f64)>>,
}

impl EvalResult {
    /// PR curve of one class; errors on classes absent from the ground truth.
    pub fn pr_curve(&self, class_id: usize) -> Result<&[(f64, f64)]> {
        self.pr_points
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid("pr_curve", format!("unknown class {class_id}")))
    }
}

/// Area under the precision envelope (all-point interpolation). Points must
/// be in detection-score order, recall non-decreasing.
fn average_precision(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len();
    let mut envelope = vec![0.0; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[i];
            prev_recall = recall;
        }
    }
    ap
}

/// Match detections to ground truth and compute AP@`iou_thresh` per class.
///
/// Detections are processed in descending score (ties: ascending image id,
/// then input order) and greedily matched to the *unmatched* ground-truth
/// box of highest IoU >= `iou_thresh` in their image. Classes without ground
/// truth are excluded from the mean.
pub fn evaluate(
    preds: &[DetectionSet],
    gt: &[DetectionSet],
    iou_thresh: f64,
) -> Result<EvalResult> {
    let mut gt_index: HashMap<&str, usize> = HashMap::new();
    for (i, g) in gt.iter().enumerate() {
        if gt_index.insert(&g.image_id, i).is_some() {
            return Err(Error::invalid(
                "evaluate",
                format!("duplicate ground-truth image id {}", g.image_id),
            ));
        }
    }
    let mut seen_pred: HashSet<&str> = HashSet::new();
    for p in preds {
        if !seen_pred.insert(&p.image_id) {
            return Err(Error::invalid(
                "evaluate",
                format!("duplicate prediction image id {}", p.image_id),
            ));
        }
        if !gt_index.contains_key(p.image_id.as_str()) {
            return Err(Error::invalid(
                "evaluate",
                format!("prediction image id {} has no ground truth", p.image_id),
            ));
        }
    }

    let mut classes: HashSet<usize> = HashSet::new();
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gt {
        for b in &g.boxes {
            classes.insert(b.class_id);
            *gt_count.entry(b.class_id).or_default() += 1;
        }
    }
    for p in preds {
        for b in &p.boxes {
            classes.insert(b.class_id);
        }
    }

    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut pr_points = BTreeMap::new();

    let mut sorted_classes: Vec<usize> = classes.into_iter().collect();
    sorted_classes.sort_unstable();
    for class in sorted_classes {
        let n_gt = gt_count.get(&class).copied().unwrap_or(0);

        // All detections of this class: (score, image id, input order).
        let mut dets: Vec<(&DetectionSet, usize)> = Vec::new();
        for p in preds {
            for (idx, b) in p.boxes.iter().enumerate() {
                if b.class_id == class {
                    dets.push((p, idx));
                }
            }
        }
        dets.sort_by(|a, b| {
            let (sa, sb) = (a.0.boxes[a.1].score, b.0.boxes[b.1].score);
            sb.total_cmp(&sa)
                .then_with(|| a.0.image_id.cmp(&b.0.image_id))
                .then(a.1.cmp(&b.1))
        });

        // Per-image matched flags over ground-truth boxes of this class.
        let mut matched: HashMap<&str, Vec<bool>> = HashMap::new();
        for g in gt {
            matched.insert(&g.image_id, vec![false; g.boxes.len()]);
        }

        let (mut tp, mut fp) = (0usize, 0usize);
        let mut points = Vec::with_capacity(dets.len());
        for (set, idx) in dets {
            let det = &set.boxes[idx];
            let g = &gt[gt_index[set.image_id.as_str()]];
            let flags = matched.get_mut(set.image_id.as_str()).unwrap();
            // Highest-IoU unmatched ground-truth box of the same class.
            let mut best: Option<(usize, f64)> = None;
            for (gi, gb) in g.boxes.iter().enumerate() {
                if gb.class_id != class || flags[gi] {
                    continue;
                }
                let v = iou(det, gb);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= iou_thresh => {
                    flags[gi] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            if n_gt > 0 {
                points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
            }
        }

        if n_gt > 0 {
            per_class_ap.insert(class, average_precision(&points));
            pr_points.insert(class, points);
        }
        counts.insert(
            class,
            ClassCounts {
                tp,
                fp,
                fneg: n_gt - tp.min(n_gt),
            },
        );
    }

    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalResult {
        per_class_ap,
        map50,
        counts,
        pr_points,
    })
}

/// Write the full result as `eval.json` plus one `pr_<class>.csv` per class.
pub fn write_eval_outputs(result: &EvalResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jpath = dir.join("eval.json");
    std::fs::write(
        &jpath,
        serde_json::to_string_pretty(result).expect("result serializes"),
    )
    .map_err(|e| Error::io(&jpath, e))?;
    for (class, points) in &result.pr_points {
        let mut csv = String::from("recall,precision\n");
        for (r, p) in points {
            csv.push_str(&format!("{r},{p}\n"));
        }
        let cpath = dir.join(format!("pr_{class}.csv"));
        std::fs::write(&cpath, csv).map_err(|e| Error::io(&cpath, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn b(cx: f64, cy: f64, w: f64, h: f64, class: usize, score: f64) -> BBox {
        BBox::new(cx, cy, w, h, class, score)
    }

    fn gt_fixture() -> Vec<DetectionSet> {
        vec![
            DetectionSet::new(
                "im1",
                vec![
                    b(0.3, 0.3, 0.2, 0.2, 0, 1.0), // A
                    b(0.7, 0.7, 0.2, 0.2, 1, 1.0), // B
                ],
            ),
            DetectionSet::new("im2", vec![b(0.5, 0.5, 0.3, 0.3, 0, 1.0)]), // C
            DetectionSet::new("im3", vec![b(0.2, 0.6, 0.2, 0.2, 0, 1.0)]), // D
        ]
    }

    /// Five predictions whose PR curve was enumerated by hand:
    ///
    /// class 0 (3 GT boxes A, C, D), detections by descending score:
    ///   p1 0.90 IoU 1.0 with A   -> TP  P=1/1 R=1/3
    ///   p3 0.85 no GT nearby     -> FP  P=1/2 R=1/3
    ///   p2 0.80 IoU ~0.875 w/ C  -> TP  P=2/3 R=2/3
    ///   p5 0.50 atop A (matched) -> FP  P=2/4 R=2/3
    /// envelope: 1.0 up to R=1/3, then 2/3 up to R=2/3
    /// AP_0 = (1/3)(1) + (1/3)(2/3) = 5/9
    ///
    /// class 1 (1 GT box B): p4 0.60 IoU 1.0 -> TP, single point (1,1),
    /// AP_1 = 1. mAP = (5/9 + 1)/2 = 7/9.
    fn pred_fixture() -> Vec<DetectionSet> {
        vec![
            DetectionSet::new(
                "im1",
                vec![
                    b(0.3, 0.3, 0.2, 0.2, 0, 0.90),  // p1
                    b(0.7, 0.7, 0.2, 0.2, 1, 0.60),  // p4
                    b(0.31, 0.3, 0.2, 0.2, 0, 0.50), // p5
                ],
            ),
            DetectionSet::new("im2", vec![b(0.52, 0.5, 0.3, 0.3, 0, 0.80)]), // p2
            DetectionSet::new("im3", vec![b(0.6, 0.2, 0.2, 0.2, 0, 0.85)]),  // p3
        ]
    }

    #[test]
    fn fixture_matches_hand_enumeration() {
        let r = evaluate(&pred_fixture(), &gt_fixture(), 0.5).unwrap();
        assert!((r.per_class_ap[&0] - 5.0 / 9.0).abs() < 1e-12);
        assert!((r.per_class_ap[&1] - 1.0).abs() < 1e-12);
        assert!((r.map50 - 7.0 / 9.0).abs() < 1e-12);
        assert_eq!(r.counts[&0], ClassCounts { tp: 2, fp: 2, fneg: 1 });
        assert_eq!(r.counts[&1], ClassCounts { tp: 1, fp: 0, fneg: 0 });
        assert_eq!(r.pr_curve(1).unwrap(), &[(1.0, 1.0)]);
        assert!(r.pr_curve(7).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = gt_fixture();
        let preds: Vec<DetectionSet> = gt
            .iter()
            .map(|g| {
                let mut p = g.clone();
                for bx in &mut p.boxes {
                    bx.score = 0.99;
                }
                p
            })
            .collect();
        let r = evaluate(&preds, &gt, 0.5).unwrap();
        assert_eq!(r.map50, 1.0);
    }

    #[test]
    fn no_predictions_scores_zero() {
        let gt = gt_fixture();
        let preds: Vec<DetectionSet> = gt
            .iter()
            .map(|g| DetectionSet::new(g.image_id.clone(), vec![]))
            .collect();
        let r = evaluate(&preds, &gt, 0.5).unwrap();
        assert_eq!(r.map50, 0.0);
        assert_eq!(r.counts[&0].fneg, 3);
    }

    #[test]
    fn duplicate_image_ids_are_rejected() {
        let mut gt = gt_fixture();
        gt.push(DetectionSet::new("im1", vec![]));
        assert!(evaluate(&[], &gt, 0.5).is_err());

        let gt = gt_fixture();
        let preds = vec![
            DetectionSet::new("im1", vec![]),
            DetectionSet::new("im1", vec![]),
        ];
        assert!(evaluate(&preds, &gt, 0.5).is_err());

        let preds = vec![DetectionSet::new("im9", vec![])];
        assert!(evaluate(&preds, &gt, 0.5).is_err());
    }

    #[test]
    fn trailing_false_positive_never_raises_ap() {
        let gt = gt_fixture();
        let base = pred_fixture();
        let r0 = evaluate(&base, &gt, 0.5).unwrap();
        let mut spiked = base.clone();
        spiked[2]
            .boxes
            .push(b(0.9, 0.9, 0.1, 0.1, 0, 0.01)); // lowest-score FP
        let r1 = evaluate(&spiked, &gt, 0.5).unwrap();
        assert!(r1.per_class_ap[&0] <= r0.per_class_ap[&0] + 1e-12);

        // Duplicating a matched prediction at lower score adds only an FP.
        let mut doubled = base.clone();
        let copy = doubled[0].boxes[0];
        doubled[0].boxes.push(BBox { score: 0.05, ..copy });
        let r2 = evaluate(&doubled, &gt, 0.5).unwrap();
        assert!(r2.per_class_ap[&0] <= r0.per_class_ap[&0] + 1e-12);
        assert_eq!(r2.counts[&0].fp, r0.counts[&0].fp + 1);
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let gt = gt_fixture();
        let preds = pred_fixture();
        let r0 = evaluate(&preds, &gt, 0.5).unwrap();

        let mut gt_rev: Vec<DetectionSet> = gt.into_iter().rev().collect();
        for g in &mut gt_rev {
            g.boxes.reverse();
        }
        let preds_rev: Vec<DetectionSet> = preds.into_iter().rev().collect();
        let r1 = evaluate(&preds_rev, &gt_rev, 0.5).unwrap();
        assert_eq!(r0.map50, r1.map50);
        assert_eq!(r0.per_class_ap, r1.per_class_ap);
    }

    #[test]
    fn outputs_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let r = evaluate(&pred_fixture(), &gt_fixture(), 0.5).unwrap();
        write_eval_outputs(&r, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("eval.json")).unwrap();
        let back: EvalResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back.map50, r.map50);
        assert!(dir.path().join("pr_0.csv").exists());
        assert!(dir.path().join("pr_1.csv").exists());
    }
}
