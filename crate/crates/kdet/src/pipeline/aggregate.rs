//! Multi-teacher prediction aggregation for one image.
//!
//! A detection "agrees" with another teacher when that teacher produced a
//! same-class detection with IoU >= the threshold. Counting the proposing
//! teacher itself, a detection is kept when more than half (consensus) or
//! all (unanimous) teachers agree. Affirmative keeps everything, duplicates
//! included; NMS is off by default since the noisy duplicates are useful
//! distillation targets.

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BBox, DetectionSet};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    Affirmative,
    Consensus,
    Unanimous,
}

impl std::str::FromStr for AggregateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affirmative" => Ok(AggregateMode::Affirmative),
            "consensus" => Ok(AggregateMode::Consensus),
            "unanimous" => Ok(AggregateMode::Unanimous),
            other => Err(Error::invalid(
                "aggregate_mode",
                format!("unknown mode {other}"),
            )),
        }
    }
}

/// Sort detections the way a post-NMS list is ordered: descending score,
/// ties by class then insertion order.
fn score_sorted(mut boxes: Vec<(usize, BBox)>) -> Vec<BBox> {
    boxes.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(ia.cmp(ib))
    });
    boxes.into_iter().map(|(_, b)| b).collect()
}

/// Merge one image's detections from several teachers. Class ids must
/// already live in the union label space.
pub fn aggregate(
    teacher_dets: &[DetectionSet],
    mode: AggregateMode,
    iou_thresh: f64,
    apply_nms: bool,
) -> Result<DetectionSet> {
    let Some(first) = teacher_dets.first() else {
        return Err(Error::invalid("aggregate", "empty teacher list"));
    };
    if teacher_dets.iter().any(|d| d.image_id != first.image_id) {
        return Err(Error::invalid(
            "aggregate",
            "detection sets name different images",
        ));
    }
    let t_total = teacher_dets.len();

    // Flatten with provenance: (teacher index, insertion order, box).
    let flat: Vec<(usize, usize, BBox)> = teacher_dets
        .iter()
        .enumerate()
        .flat_map(|(t, d)| {
            d.boxes
                .iter()
                .enumerate()
                .map(move |(i, b)| (t, t * 10_000 + i, *b))
        })
        .collect();

    let kept: Vec<(usize, BBox)> = match mode {
        AggregateMode::Affirmative => flat.iter().map(|&(_, ord, b)| (ord, b)).collect(),
        AggregateMode::Consensus | AggregateMode::Unanimous => {
            let need = match mode {
                AggregateMode::Consensus => t_total / 2 + 1, // strictly more than half
                _ => t_total,
            };
            // Which detections survive the agreement count.
            let survivors: Vec<usize> = (0..flat.len())
                .filter(|&i| {
                    let (ti, _, bi) = flat[i];
                    let mut agreeing: Vec<usize> = vec![ti];
                    for (j, &(tj, _, bj)) in flat.iter().enumerate() {
                        if j == i || tj == ti || bj.class_id != bi.class_id {
                            continue;
                        }
                        if iou(&bi, &bj) >= iou_thresh && !agreeing.contains(&tj) {
                            agreeing.push(tj);
                        }
                    }
                    agreeing.len() >= need
                })
                .collect();

            // Agreement clusters: connected components over same-class
            // IoU >= threshold pairs; the highest-score member represents
            // each cluster (ties: earliest teacher, then insertion order).
            let mut component = vec![usize::MAX; survivors.len()];
            let mut next = 0usize;
            for s in 0..survivors.len() {
                if component[s] != usize::MAX {
                    continue;
                }
                let mut stack = vec![s];
                component[s] = next;
                while let Some(cur) = stack.pop() {
                    let (_, _, bc) = flat[survivors[cur]];
                    for other in 0..survivors.len() {
                        if component[other] != usize::MAX {
                            continue;
                        }
                        let (_, _, bo) = flat[survivors[other]];
                        if bo.class_id == bc.class_id && iou(&bc, &bo) >= iou_thresh {
                            component[other] = next;
                            stack.push(other);
                        }
                    }
                }
                next += 1;
            }
            let mut reps: Vec<Option<(usize, BBox)>> = vec![None; next];
            for (s, &comp) in component.iter().enumerate() {
                let (_, ord, b) = flat[survivors[s]];
                let better = match reps[comp] {
                    None => true,
                    Some((prev_ord, prev)) => {
                        b.score > prev.score || (b.score == prev.score && ord < prev_ord)
                    }
                };
                if better {
                    reps[comp] = Some((ord, b));
                }
            }
            reps.into_iter().flatten().collect()
        }
    };

    let mut out = DetectionSet::new(first.image_id.clone(), score_sorted(kept));
    if apply_nms {
        out = nms(&out, iou_thresh, true);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, s: f64, class: usize, score: f64) -> BBox {
        BBox::new(cx, cy, s, s, class, score)
    }

    #[test]
    fn single_teacher_is_identity_in_every_mode() {
        let d = DetectionSet::new(
            "i",
            vec![b(0.3, 0.3, 0.2, 0, 0.9), b(0.7, 0.7, 0.2, 1, 0.5)],
        );
        for mode in [
            AggregateMode::Affirmative,
            AggregateMode::Consensus,
            AggregateMode::Unanimous,
        ] {
            let out = aggregate(std::slice::from_ref(&d), mode, 0.5, false).unwrap();
            assert_eq!(out.boxes, d.boxes, "{mode:?}");
        }
        assert!(aggregate(&[], AggregateMode::Affirmative, 0.5, false).is_err());
    }

    #[test]
    fn disjoint_class_sets() {
        let t0 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 0, 0.9)]);
        let t1 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 1, 0.8)]);
        let t2 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 2, 0.7)]);
        let sets = [t0, t1, t2];
        let affirmative = aggregate(&sets, AggregateMode::Affirmative, 0.5, false).unwrap();
        assert_eq!(affirmative.boxes.len(), 3);
        let unanimous = aggregate(&sets, AggregateMode::Unanimous, 0.5, false).unwrap();
        assert!(unanimous.boxes.is_empty());
        let consensus = aggregate(&sets, AggregateMode::Consensus, 0.5, false).unwrap();
        assert!(consensus.boxes.is_empty());
    }

    #[test]
    fn affirmative_keeps_duplicates_sorted_by_score() {
        let t0 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 0, 0.6)]);
        let t1 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 0, 0.9)]);
        let out = aggregate(&[t0, t1], AggregateMode::Affirmative, 0.5, false).unwrap();
        assert_eq!(out.boxes.len(), 2);
        assert_eq!(out.boxes[0].score, 0.9);
        assert_eq!(out.boxes[1].score, 0.6);
    }

    #[test]
    fn consensus_dedupes_to_highest_score() {
        // Teachers 0 and 1 agree on an object; teacher 2 proposes elsewhere.
        let t0 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 0, 0.7)]);
        let t1 = DetectionSet::new("i", vec![b(0.31, 0.3, 0.2, 0, 0.95)]);
        let t2 = DetectionSet::new("i", vec![b(0.8, 0.8, 0.15, 0, 0.9)]);
        let out = aggregate(&[t0, t1, t2], AggregateMode::Consensus, 0.5, false).unwrap();
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].score, 0.95);
    }

    #[test]
    fn optional_nms_runs_after_merge() {
        let t0 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 0, 0.6)]);
        let t1 = DetectionSet::new("i", vec![b(0.3, 0.3, 0.2, 0, 0.9)]);
        let out = aggregate(
            &[t0, t1],
            AggregateMode::Affirmative,
            0.5,
            true,
        )
        .unwrap();
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].score, 0.9);
    }

    #[test]
    fn mismatched_image_ids_are_rejected() {
        let t0 = DetectionSet::new("a", vec![]);
        let t1 = DetectionSet::new("b", vec![]);
        assert!(aggregate(&[t0, t1], AggregateMode::Affirmative, 0.5, false).is_err());
    }
}
