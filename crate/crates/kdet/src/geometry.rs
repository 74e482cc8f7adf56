//! Bounding-box algebra: IoU, non-max suppression, and the mapping between
//! box lists and detector grid coordinates.
//!
//! Grid convention used throughout the crate: head outputs live in a
//! `[K, K, B, 5+Nc]` tensor indexed `[gy, gx, slot, channel]` with channels
//! `[tx, ty, tw, th, conf, class_0 .. class_{Nc-1}]`. A slot in cell
//! `(gx, gy)` decodes to `cx = (gx + sigmoid(tx)) / K`,
//! `cy = (gy + sigmoid(ty)) / K`, `w = sigmoid(tw)`, `h = sigmoid(th)`.

use crate::error::{Error, Result};
use crate::losses::GridTarget;
use crate::numcore::{sigmoid, Tensor};

/// Anchor shapes (w, h) used for slot assignment, B = 2.
pub const DEFAULT_ANCHORS: [(f64, f64); 2] = [(0.15, 0.15), (0.45, 0.45)];

/// Center-format box in image fractions, with class and confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub score: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64) -> Self {
        BBox {
            cx,
            cy,
            w,
            h,
            class_id,
            score,
        }
    }

    /// Corners (x0, y0, x1, y1), unclamped.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Does the box contain the point (boundary inclusive)?
    pub fn contains(&self, px: f64, py: f64) -> bool {
        (px - self.cx).abs() <= self.w / 2.0 && (py - self.cy).abs() <= self.h / 2.0
    }

    /// Mirror horizontally about the image center.
    pub fn flip_horizontal(&self) -> BBox {
        BBox {
            cx: 1.0 - self.cx,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && (0.0..=1.0).contains(&self.score);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("bbox", format!("{:?} out of range", self)))
        }
    }
}

/// Detections for one image, sorted by descending score after NMS.
#[derive(Clone, Debug, Default)]
pub struct DetectionSet {
    pub image_id: String,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, boxes: Vec<BBox>) -> Self {
        DetectionSet {
            image_id: image_id.into(),
            boxes,
        }
    }
}

/// Intersection over union of two boxes; 0 when disjoint or degenerate.
/// Both areas come from the same corner arithmetic as the intersection, so
/// identical boxes give exactly 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Sort key for NMS and score-normalized detection lists: descending score,
/// then ascending class id, then original input order.
fn score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .total_cmp(&boxes[i].score)
            .then(boxes[i].class_id.cmp(&boxes[j].class_id))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-max suppression. Keeps the highest-scoring box and drops every
/// remaining box with IoU strictly above `iou_thresh` (restricted to the same
/// class when `class_aware`).
pub fn nms(dets: &DetectionSet, iou_thresh: f64, class_aware: bool) -> DetectionSet {
    let order = score_order(&dets.boxes);
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[rank] {
            continue;
        }
        let top = dets.boxes[i];
        kept.push(top);
        for (later_rank, &j) in order.iter().enumerate().skip(rank + 1) {
            if suppressed[later_rank] {
                continue;
            }
            let cand = &dets.boxes[j];
            if class_aware && cand.class_id != top.class_id {
                continue;
            }
            if iou(&top, cand) > iou_thresh {
                suppressed[later_rank] = true;
            }
        }
    }
    DetectionSet::new(dets.image_id.clone(), kept)
}

/// Grid cell indices (gx, gy) of a point; a coordinate of exactly 1.0 clamps
/// into the last cell.
pub fn cell_of(cx: f64, cy: f64, k: usize) -> (usize, usize) {
    let gx = ((cx * k as f64).floor() as usize).min(k - 1);
    let gy = ((cy * k as f64).floor() as usize).min(k - 1);
    (gx, gy)
}

/// Anchor slot for a box: argmax over anchors of IoU between the box and an
/// anchor-shaped box sharing its center. First slot wins ties.
pub fn best_anchor(bbox: &BBox, anchors: &[(f64, f64)]) -> usize {
    let mut best = 0usize;
    let mut best_iou = -1.0;
    for (slot, &(aw, ah)) in anchors.iter().enumerate() {
        let anchor = BBox::new(bbox.cx, bbox.cy, aw, ah, bbox.class_id, 1.0);
        let v = iou(&anchor, bbox);
        if v > best_iou {
            best_iou = v;
            best = slot;
        }
    }
    best
}

/// Encode a box list into per-cell, per-slot training targets. Boxes landing
/// on an occupied (cell, slot) pair overwrite it (last write wins). The
/// feature mask is left untouched; `losses::build_grid_target` fills it.
pub fn encode_targets(
    boxes: &[BBox],
    k: usize,
    b: usize,
    nc: usize,
    anchors: &[(f64, f64)],
) -> Result<GridTarget> {
    if anchors.len() != b {
        return Err(Error::invalid(
            "encode_targets",
            format!("{} anchors for {} slots", anchors.len(), b),
        ));
    }
    if k == 0 || nc == 0 {
        return Err(Error::invalid("encode_targets", "K and Nc must be >= 1"));
    }
    let mut t = GridTarget::zeros(k, b, nc);
    for bx in boxes {
        if bx.class_id >= nc {
            return Err(Error::invalid(
                "encode_targets",
                format!("class id {} out of range for Nc = {}", bx.class_id, nc),
            ));
        }
        let (gx, gy) = cell_of(bx.cx, bx.cy, k);
        let slot = best_anchor(bx, anchors);
        let s = t.slot_index(gy, gx, slot);
        t.assign[s] = 1.0;
        t.ignore[s] = 1.0;
        t.xy[2 * s] = bx.cx * k as f64 - gx as f64;
        t.xy[2 * s + 1] = bx.cy * k as f64 - gy as f64;
        t.wh[2 * s] = bx.w;
        t.wh[2 * s + 1] = bx.h;
        t.class_onehot[s * nc..(s + 1) * nc].fill(0.0);
        t.class_onehot[s * nc + bx.class_id] = 1.0;
    }
    Ok(t)
}

/// Box parameterized by one raw slot, before clamping or score filtering.
pub fn slot_box(raw: &[f64], k: usize, gx: usize, gy: usize) -> (f64, f64, f64, f64) {
    let cx = (gx as f64 + sigmoid(raw[0])) / k as f64;
    let cy = (gy as f64 + sigmoid(raw[1])) / k as f64;
    let w = sigmoid(raw[2]);
    let h = sigmoid(raw[3]);
    (cx, cy, w, h)
}

fn clamp_box(cx: f64, cy: f64, w: f64, h: f64) -> (f64, f64, f64, f64) {
    let x0 = (cx - w / 2.0).clamp(0.0, 1.0);
    let y0 = (cy - h / 2.0).clamp(0.0, 1.0);
    let x1 = (cx + w / 2.0).clamp(0.0, 1.0);
    let y1 = (cy + h / 2.0).clamp(0.0, 1.0);
    ((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
}

/// Decode one image of head logits `[K, K, B, 5+Nc]` into detections with
/// score >= `score_thresh`. Scores are `sigmoid(conf) * max_c sigmoid(class_c)`
/// and boxes are clamped into the unit square.
pub fn decode_predictions(raw: &Tensor, score_thresh: f64) -> Result<Vec<BBox>> {
    let shape = raw.shape();
    let (k, b, ch) = match shape {
        &[k1, k2, b, ch] if k1 == k2 && ch > 5 => (k1, b, ch),
        other => {
            return Err(Error::shape(
                "decode_predictions",
                format!("expected [K, K, B, 5+Nc], got {:?}", other),
            ))
        }
    };
    let nc = ch - 5;
    let data = raw.data();
    let mut out = Vec::new();
    for gy in 0..k {
        for gx in 0..k {
            for slot in 0..b {
                let base = ((gy * k + gx) * b + slot) * ch;
                let cell = &data[base..base + ch];
                let conf = sigmoid(cell[4]);
                let mut best_c = 0usize;
                let mut best_p = sigmoid(cell[5]);
                for c in 1..nc {
                    let p = sigmoid(cell[5 + c]);
                    if p > best_p {
                        best_p = p;
                        best_c = c;
                    }
                }
                let score = conf * best_p;
                if score < score_thresh {
                    continue;
                }
                let (cx, cy, w, h) = slot_box(cell, k, gx, gy);
                let (cx, cy, w, h) = clamp_box(cx, cy, w, h);
                if w <= 0.0 || h <= 0.0 {
                    continue;
                }
                out.push(BBox::new(cx, cy, w, h, best_c, score));
            }
        }
    }
    out.sort_by(|a, b| a.score.total_cmp(&b.score).reverse());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_box(rng: &mut crate::rng::Rng64, nc: usize) -> BBox {
        let w = rng.gen_range(0.05..0.5);
        let h = rng.gen_range(0.05..0.5);
        BBox::new(
            rng.gen_range(w / 2.0..1.0 - w / 2.0),
            rng.gen_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
            rng.gen_range(0..nc),
            rng.gen_range(0.0..1.0),
        )
    }

    /// Monte-Carlo-free raster oracle: count fine grid cells inside each box.
    fn iou_raster(a: &BBox, b: &BBox) -> f64 {
        let n = 600;
        let (lo, hi) = (-1.0, 2.0);
        let step = (hi - lo) / n as f64;
        let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
        for yi in 0..n {
            let py = lo + (yi as f64 + 0.5) * step;
            for xi in 0..n {
                let px = lo + (xi as f64 + 0.5) * step;
                let in_a = a.contains(px, py);
                let in_b = b.contains(px, py);
                ia += in_a as u64;
                ib += in_b as u64;
                both += (in_a && in_b) as u64;
            }
        }
        let union = ia + ib - both;
        if union == 0 {
            0.0
        } else {
            both as f64 / union as f64
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2, 0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(0.1, 0.1, 0.1, 0.1, 0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_corner_boxes_are_one_third() {
        // (0,0,2,2) and (1,0,2,2) on a 4-unit canvas, normalized to fractions.
        let a = BBox::new(0.0, 0.0, 0.5, 0.5, 0, 1.0);
        let b = BBox::new(0.25, 0.0, 0.5, 0.5, 0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou_raster(&a, &b) - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn iou_matches_raster_oracle() {
        let mut rng = stream(21, "iou", 0);
        for _ in 0..20 {
            let a = random_box(&mut rng, 2);
            let b = random_box(&mut rng, 2);
            assert!((iou(&a, &b) - iou_raster(&a, &b)).abs() < 0.01);
        }
    }

    /// Independent greedy NMS: repeatedly scan for the best remaining box.
    fn nms_bruteforce(dets: &DetectionSet, thresh: f64, class_aware: bool) -> Vec<BBox> {
        let mut remaining: Vec<(usize, BBox)> = dets.boxes.iter().copied().enumerate().collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (bi, bb) = (remaining[best].0, remaining[best].1);
                let (ci, cb) = (remaining[i].0, remaining[i].1);
                let better = cb.score > bb.score
                    || (cb.score == bb.score
                        && (cb.class_id < bb.class_id
                            || (cb.class_id == bb.class_id && ci < bi)));
                if better {
                    best = i;
                }
            }
            let top = remaining.remove(best).1;
            kept.push(top);
            remaining.retain(|(_, b)| {
                (class_aware && b.class_id != top.class_id) || iou(&top, b) <= thresh
            });
        }
        kept
    }

    #[test]
    fn nms_simple_cases() {
        let single = DetectionSet::new("i", vec![BBox::new(0.5, 0.5, 0.2, 0.2, 0, 0.7)]);
        assert_eq!(nms(&single, 0.5, true).boxes, single.boxes);

        let dup = DetectionSet::new(
            "i",
            vec![
                BBox::new(0.5, 0.5, 0.2, 0.2, 0, 0.8),
                BBox::new(0.5, 0.5, 0.2, 0.2, 0, 0.9),
            ],
        );
        let out = nms(&dup, 0.5, true);
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].score, 0.9);

        let disjoint = DetectionSet::new(
            "i",
            vec![
                BBox::new(0.2, 0.2, 0.1, 0.1, 0, 0.3),
                BBox::new(0.8, 0.8, 0.1, 0.1, 1, 0.9),
                BBox::new(0.5, 0.5, 0.1, 0.1, 0, 0.6),
            ],
        );
        let out = nms(&disjoint, 0.5, true);
        assert_eq!(out.boxes.len(), 3);
        let scores: Vec<f64> = out.boxes.iter().map(|b| b.score).collect();
        assert_eq!(scores, vec![0.9, 0.6, 0.3]);

        assert!(nms(&DetectionSet::default(), 0.5, true).boxes.is_empty());
    }

    #[test]
    fn nms_matches_bruteforce_oracle() {
        let mut rng = stream(31, "nms", 0);
        for case in 0..60 {
            let n = rng.gen_range(0..=12);
            let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 3)).collect();
            let dets = DetectionSet::new(format!("img{case}"), boxes);
            for &class_aware in &[true, false] {
                let got = nms(&dets, 0.5, class_aware).boxes;
                let want = nms_bruteforce(&dets, 0.5, class_aware);
                assert_eq!(got, want, "case {case} class_aware {class_aware}");
            }
        }
    }

    #[test]
    fn encode_empty_is_all_zero() {
        let t = encode_targets(&[], 4, 2, 2, &DEFAULT_ANCHORS).unwrap();
        assert!(t.assign.iter().all(|&m| m == 0.0));
        assert!(t.xy.iter().chain(&t.wh).chain(&t.class_onehot).all(|&v| v == 0.0));
    }

    #[test]
    fn encode_centered_box() {
        let bx = BBox::new(0.5, 0.5, 0.2, 0.2, 1, 1.0);
        let t = encode_targets(&[bx], 4, 2, 2, &DEFAULT_ANCHORS).unwrap();
        // cell (2, 2), slot 0 (anchor 0.15 is closer to 0.2 than 0.45)
        let s = t.slot_index(2, 2, 0);
        assert_eq!(t.assign[s], 1.0);
        assert_eq!(t.xy[2 * s], 0.0);
        assert_eq!(t.xy[2 * s + 1], 0.0);
        assert_eq!(t.wh[2 * s], 0.2);
        assert_eq!(t.class_onehot[s * 2 + 1], 1.0);
        assert_eq!(t.assign.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn encode_matches_hand_assignment_oracle() {
        let (k, b, nc) = (8usize, 2usize, 3usize);
        let mut rng = stream(41, "encode", 0);
        for _ in 0..10 {
            let boxes: Vec<BBox> = (0..5).map(|_| random_box(&mut rng, nc)).collect();
            let t = encode_targets(&boxes, k, b, nc, &DEFAULT_ANCHORS).unwrap();

            // Independent per-box assignment: replay the definition directly.
            let mut want_assign = vec![0.0; k * k * b];
            let mut want_xy = vec![0.0; k * k * b * 2];
            let mut want_class = vec![0.0; k * k * b * nc];
            for bx in &boxes {
                let gx = ((bx.cx * k as f64) as usize).min(k - 1);
                let gy = ((bx.cy * k as f64) as usize).min(k - 1);
                let a0 = BBox::new(bx.cx, bx.cy, 0.15, 0.15, 0, 1.0);
                let a1 = BBox::new(bx.cx, bx.cy, 0.45, 0.45, 0, 1.0);
                let slot = if iou(&a1, bx) > iou(&a0, bx) { 1 } else { 0 };
                let s = (gy * k + gx) * b + slot;
                want_assign[s] = 1.0;
                want_xy[2 * s] = bx.cx * k as f64 - gx as f64;
                want_xy[2 * s + 1] = bx.cy * k as f64 - gy as f64;
                want_class[s * nc..(s + 1) * nc].fill(0.0);
                want_class[s * nc + bx.class_id] = 1.0;
            }
            assert_eq!(t.assign, want_assign);
            assert_eq!(t.xy, want_xy);
            assert_eq!(t.class_onehot, want_class);
        }
    }

    #[test]
    fn encode_center_at_one_clamps_into_last_cell() {
        let bx = BBox::new(1.0, 1.0, 0.2, 0.2, 0, 1.0);
        let t = encode_targets(&[bx], 4, 2, 2, &DEFAULT_ANCHORS).unwrap();
        let s = t.slot_index(3, 3, 0);
        assert_eq!(t.assign[s], 1.0);
    }

    #[test]
    fn decode_empty_and_known_center() {
        let raw = Tensor::full(&[4, 4, 2, 7], -100.0);
        assert!(decode_predictions(&raw, 0.1).unwrap().is_empty());

        let mut raw = Tensor::full(&[4, 4, 2, 7], -100.0);
        // cell (0, 0) slot 0: zero offsets, strong conf and class 0
        let base = 0;
        raw.data_mut()[base] = 0.0; // tx
        raw.data_mut()[base + 1] = 0.0; // ty
        raw.data_mut()[base + 2] = crate::numcore::logit(0.25); // w
        raw.data_mut()[base + 3] = crate::numcore::logit(0.25); // h
        raw.data_mut()[base + 4] = 20.0; // conf
        raw.data_mut()[base + 5] = 20.0; // class 0
        let out = decode_predictions(&raw, 0.1).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].cx - 0.125).abs() < 1e-12);
        assert!((out[0].cy - 0.125).abs() < 1e-12);
        assert_eq!(out[0].class_id, 0);
    }

    #[test]
    fn encode_then_decode_roundtrips() {
        let (k, b, nc) = (8usize, 2usize, 2usize);
        let mut rng = stream(51, "roundtrip", 0);
        for _ in 0..10 {
            // Boxes on distinct (cell, slot) pairs: re-sample on collision.
            let mut boxes: Vec<BBox> = Vec::new();
            let mut used = std::collections::HashSet::new();
            while boxes.len() < 4 {
                let bx = random_box(&mut rng, nc);
                let (gx, gy) = cell_of(bx.cx, bx.cy, k);
                let slot = best_anchor(&bx, &DEFAULT_ANCHORS);
                if used.insert((gx, gy, slot)) {
                    boxes.push(bx);
                }
            }
            let t = encode_targets(&boxes, k, b, nc, &DEFAULT_ANCHORS).unwrap();

            // Build logits that invert the encoding exactly.
            let mut raw = Tensor::full(&[k, k, b, 5 + nc], -40.0);
            for gy in 0..k {
                for gx in 0..k {
                    for slot in 0..b {
                        let s = t.slot_index(gy, gx, slot);
                        if t.assign[s] != 1.0 {
                            continue;
                        }
                        let base = s * (5 + nc);
                        let d = raw.data_mut();
                        d[base] = crate::numcore::logit(t.xy[2 * s]);
                        d[base + 1] = crate::numcore::logit(t.xy[2 * s + 1]);
                        d[base + 2] = crate::numcore::logit(t.wh[2 * s]);
                        d[base + 3] = crate::numcore::logit(t.wh[2 * s + 1]);
                        d[base + 4] = 40.0;
                        for c in 0..nc {
                            d[base + 5 + c] = if t.class_onehot[s * nc + c] == 1.0 {
                                40.0
                            } else {
                                -40.0
                            };
                        }
                    }
                }
            }
            let decoded = decode_predictions(&raw, 0.5).unwrap();
            assert_eq!(decoded.len(), boxes.len());
            for bx in &boxes {
                let found = decoded.iter().any(|d| {
                    d.class_id == bx.class_id
                        && (d.cx - bx.cx).abs() < 1e-9
                        && (d.cy - bx.cy).abs() < 1e-9
                        && (d.w - bx.w).abs() < 1e-9
                        && (d.h - bx.h).abs() < 1e-9
                });
                assert!(found, "box {:?} not recovered", bx);
            }
        }
    }
}
