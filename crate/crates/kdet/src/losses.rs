//! Distillation and ground-truth loss terms.
//!
//! The total distillation loss is a feature-matching term gated by an
//! imitation mask plus prediction-matching terms over box offsets, objectness
//! confidence, and class logits. The fine-tuning loss reuses the prediction
//! terms against ground-truth targets; both paths go through the same code so
//! they agree bitwise when fed the same targets.

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::numcore::{sigmoid, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Per-cell, per-slot training targets for one image.
///
/// Layout is row-major `[gy, gx, slot]` (matching the `[K, K, B, 5+Nc]`
/// head tensor); `feat` is a `[K, K]` cell mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTarget {
    pub k: usize,
    pub b: usize,
    pub nc: usize,
    /// Assignment mask M, 1 where a box occupies the slot.
    pub assign: Vec<f64>,
    /// Within-cell center offsets in [0, 1), zero where unassigned.
    pub xy: Vec<f64>,
    /// Raw normalized width/height targets, zero where unassigned.
    pub wh: Vec<f64>,
    /// One-hot class targets per slot.
    pub class_onehot: Vec<f64>,
    /// No-object penalty gate: 1 applies the penalty, 0 suppresses it.
    /// Always 1 on assigned slots.
    pub ignore: Vec<f64>,
    /// Imitation mask over cells whose center lies inside a source box.
    pub feat: Vec<f64>,
}

impl GridTarget {
    pub fn zeros(k: usize, b: usize, nc: usize) -> Self {
        let slots = k * k * b;
        GridTarget {
            k,
            b,
            nc,
            assign: vec![0.0; slots],
            xy: vec![0.0; slots * 2],
            wh: vec![0.0; slots * 2],
            class_onehot: vec![0.0; slots * nc],
            ignore: vec![0.0; slots],
            feat: vec![0.0; k * k],
        }
    }

    pub fn slot_index(&self, gy: usize, gx: usize, slot: usize) -> usize {
        (gy * self.k + gx) * self.b + slot
    }

    pub fn cell_index(&self, gy: usize, gx: usize) -> usize {
        gy * self.k + gx
    }
}

/// Relative weights for the loss terms. The reference formulation is a plain
/// sum, so everything defaults to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub feature: f64,
    pub bbox: f64,
    pub conf: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            feature: 1.0,
            bbox: 1.0,
            conf: 1.0,
            class: 1.0,
        }
    }
}

/// Build the full grid target for one image from source boxes (teacher
/// detections or ground truth): slot assignment via anchor matching, the
/// imitation mask over cells whose center falls inside any box, and the
/// ignore mask initialized to the assignment (completed per step by
/// [`ignore_update`]).
pub fn build_grid_target(
    boxes: &[BBox],
    k: usize,
    b: usize,
    nc: usize,
    anchors: &[(f64, f64)],
) -> Result<GridTarget> {
    let mut t = geometry::encode_targets(boxes, k, b, nc, anchors)?;
    for gy in 0..k {
        for gx in 0..k {
            let px = (gx as f64 + 0.5) / k as f64;
            let py = (gy as f64 + 0.5) / k as f64;
            if boxes.iter().any(|bx| bx.contains(px, py)) {
                let c = t.cell_index(gy, gx);
                t.feat[c] = 1.0;
            }
        }
    }
    Ok(t)
}

/// Refresh the no-object gate from the student's current raw output
/// `[K, K, B, 5+Nc]`: an unassigned slot keeps the penalty (1) only while its
/// decoded box overlaps every source box with IoU below `thresh`. Assigned
/// slots stay at 1.
pub fn ignore_update(
    t: &GridTarget,
    student_raw: &Tensor,
    boxes: &[BBox],
    thresh: f64,
) -> Result<GridTarget> {
    let ch = 5 + t.nc;
    if student_raw.shape() != [t.k, t.k, t.b, ch] {
        return Err(Error::shape(
            "ignore_update",
            format!(
                "raw shape {:?} does not match targets [{}, {}, {}, {}]",
                student_raw.shape(),
                t.k,
                t.k,
                t.b,
                ch
            ),
        ));
    }
    let mut out = t.clone();
    let data = student_raw.data();
    for gy in 0..t.k {
        for gx in 0..t.k {
            for slot in 0..t.b {
                let s = t.slot_index(gy, gx, slot);
                if t.assign[s] == 1.0 {
                    out.ignore[s] = 1.0;
                    continue;
                }
                let cell = &data[s * ch..s * ch + 4];
                let (cx, cy, w, h) = geometry::slot_box(cell, t.k, gx, gy);
                let pred = BBox::new(cx, cy, w, h, 0, 1.0);
                let max_iou = boxes
                    .iter()
                    .map(|bx| geometry::iou(&pred, bx))
                    .fold(0.0, f64::max);
                out.ignore[s] = if max_iou < thresh { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(out)
}

fn check_batch(op: &'static str, raw_shape: &[usize], ts: &[GridTarget]) -> Result<(usize, usize, usize, usize)> {
    if ts.is_empty() {
        return Err(Error::invalid(op, "empty target batch"));
    }
    let (k, b, nc) = (ts[0].k, ts[0].b, ts[0].nc);
    if ts.iter().any(|t| (t.k, t.b, t.nc) != (k, b, nc)) {
        return Err(Error::invalid(op, "mixed grid sizes in target batch"));
    }
    let want = [ts.len(), k, k, b, 5 + nc];
    if raw_shape != want {
        return Err(Error::shape(
            op,
            format!("raw shape {:?}, targets imply {:?}", raw_shape, want),
        ));
    }
    Ok((ts.len(), k, b, nc))
}

/// Stack a per-slot field into an [N, K, K, B, width] constant, replicating
/// each slot value `width` times when `field` has one value per slot.
fn stack_replicated(ts: &[GridTarget], field: impl Fn(&GridTarget) -> &[f64], width: usize) -> Tensor {
    let (k, b) = (ts[0].k, ts[0].b);
    let slots = k * k * b;
    let mut data = Vec::with_capacity(ts.len() * slots * width);
    for t in ts {
        for &v in field(t) {
            for _ in 0..width {
                data.push(v);
            }
        }
    }
    Tensor::new(vec![ts.len(), k, k, b, width], data).unwrap()
}

fn stack_field(ts: &[GridTarget], field: impl Fn(&GridTarget) -> &[f64], width: usize) -> Tensor {
    let (k, b) = (ts[0].k, ts[0].b);
    let mut data = Vec::with_capacity(ts.len() * k * k * b * width);
    for t in ts {
        data.extend_from_slice(field(t));
    }
    Tensor::new(vec![ts.len(), k, k, b, width], data).unwrap()
}

/// Stack per-image feature masks into an [N, K, K] constant.
pub fn stack_feat_mask(ts: &[GridTarget]) -> Tensor {
    let k = ts[0].k;
    let mut data = Vec::with_capacity(ts.len() * k * k);
    for t in ts {
        data.extend_from_slice(&t.feat);
    }
    Tensor::new(vec![ts.len(), k, k], data).unwrap()
}

/// Masked squared-L2 feature matching between teacher features and the
/// adapted student features, both [N, Ct, K, K]; the [N, K, K] mask is
/// broadcast over channels. Batch-mean.
pub fn feature_matching_loss(
    tape: &mut Tape,
    f_teacher: &Tensor,
    f_student_adapted: Var,
    feat_mask: &Tensor,
) -> Result<Var> {
    let fs_shape = tape.value(f_student_adapted).shape().to_vec();
    if f_teacher.shape() != fs_shape.as_slice() {
        return Err(Error::shape(
            "feature_matching_loss",
            format!("teacher {:?} vs student {:?}", f_teacher.shape(), fs_shape),
        ));
    }
    let (n, ct, kh, kw) = f_teacher.dims4()?;
    if feat_mask.shape() != [n, kh, kw] {
        return Err(Error::shape(
            "feature_matching_loss",
            format!("mask {:?} vs features {:?}", feat_mask.shape(), f_teacher.shape()),
        ));
    }
    // Broadcast the cell mask over channels.
    let plane = kh * kw;
    let mut mask = Vec::with_capacity(n * ct * plane);
    for img in 0..n {
        let cells = &feat_mask.data()[img * plane..][..plane];
        for _ in 0..ct {
            mask.extend_from_slice(cells);
        }
    }
    let mask = Tensor::new(vec![n, ct, kh, kw], mask).unwrap();

    let ft = tape.constant(f_teacher.clone());
    let m = tape.constant(mask);
    let diff = tape.sub(f_student_adapted, ft)?;
    let sq = tape.square(diff);
    let masked = tape.mul(sq, m)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Center + size regression on assigned slots, batch-mean.
pub fn box_loss(tape: &mut Tape, student_raw: Var, ts: &[GridTarget]) -> Result<Var> {
    let (n, _, _, _) = check_batch("box_loss", tape.value(student_raw).shape(), ts)?;
    let mask2 = tape.constant(stack_replicated(ts, |t| &t.assign, 2));
    let xy_t = tape.constant(stack_field(ts, |t| &t.xy, 2));
    let wh_t = tape.constant(stack_field(ts, |t| &t.wh, 2));

    let xy_logits = tape.slice_last(student_raw, 0, 2)?;
    let xy = tape.sigmoid(xy_logits);
    let xy_err = tape.sub(xy, xy_t)?;
    let xy_sq = tape.square(xy_err);
    let xy_masked = tape.mul(xy_sq, mask2)?;
    let xy_sum = tape.sum(xy_masked);

    let wh_logits = tape.slice_last(student_raw, 2, 2)?;
    let wh = tape.sigmoid(wh_logits);
    let wh_err = tape.sub(wh, wh_t)?;
    let wh_sq = tape.square(wh_err);
    let wh_masked = tape.mul(wh_sq, mask2)?;
    let wh_sum = tape.sum(wh_masked);

    let total = tape.add(xy_sum, wh_sum)?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Objectness loss: sigmoid cross entropy against the assignment mask,
/// weighted M + (1-M) * ignore. Batch-mean.
pub fn conf_loss(tape: &mut Tape, student_raw: Var, ts: &[GridTarget]) -> Result<Var> {
    let (n, k, b, _) = check_batch("conf_loss", tape.value(student_raw).shape(), ts)?;
    let target = stack_replicated(ts, |t| &t.assign, 1);
    let mut weight = Vec::with_capacity(n * k * k * b);
    for t in ts {
        for (m, ign) in t.assign.iter().zip(&t.ignore) {
            weight.push(m + (1.0 - m) * ign);
        }
    }
    let weight = Tensor::new(vec![n, k, k, b, 1], weight).unwrap();

    let conf_logits = tape.slice_last(student_raw, 4, 1)?;
    let ce = tape.sigmoid_ce(target, conf_logits)?;
    let w = tape.constant(weight);
    let weighted = tape.mul(ce, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Per-class sigmoid cross entropy against the one-hot class target on
/// assigned slots. Batch-mean.
pub fn class_loss(tape: &mut Tape, student_raw: Var, ts: &[GridTarget]) -> Result<Var> {
    let (n, _, _, nc) = check_batch("class_loss", tape.value(student_raw).shape(), ts)?;
    let target = stack_field(ts, |t| &t.class_onehot, nc);
    let mask = stack_replicated(ts, |t| &t.assign, nc);

    let class_logits = tape.slice_last(student_raw, 5, nc)?;
    let ce = tape.sigmoid_ce(target, class_logits)?;
    let m = tape.constant(mask);
    let masked = tape.mul(ce, m)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Scalar loss terms of one training step, values read off the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub feature: Option<Var>,
    pub bbox: Var,
    pub conf: Var,
    pub class: Var,
    pub total: Var,
}

impl LossParts {
    pub fn values(&self, tape: &Tape) -> (Option<f64>, f64, f64, f64, f64) {
        (
            self.feature.map(|v| tape.value(v).item().unwrap()),
            tape.value(self.bbox).item().unwrap(),
            tape.value(self.conf).item().unwrap(),
            tape.value(self.class).item().unwrap(),
            tape.value(self.total).item().unwrap(),
        )
    }
}

/// Inputs for the feature-matching term.
pub struct FeatureInputs<'a> {
    pub teacher_features: &'a Tensor,
    pub student_adapted: Var,
}

/// Total distillation loss: optional feature matching plus prediction
/// matching, combined with the configured weights.
pub fn kd_loss(
    tape: &mut Tape,
    feature: Option<FeatureInputs<'_>>,
    student_raw: Var,
    ts: &[GridTarget],
    use_feature_term: bool,
    weights: &LossWeights,
) -> Result<LossParts> {
    if use_feature_term && feature.is_none() {
        return Err(Error::invalid(
            "kd_loss",
            "use_feature_term is set but no feature inputs were provided",
        ));
    }
    let bbox = box_loss(tape, student_raw, ts)?;
    let conf = conf_loss(tape, student_raw, ts)?;
    let class = class_loss(tape, student_raw, ts)?;
    let wb = tape.scale(bbox, weights.bbox);
    let wc = tape.scale(conf, weights.conf);
    let wcl = tape.scale(class, weights.class);
    let pred = {
        let s = tape.add(wb, wc)?;
        tape.add(s, wcl)?
    };
    let (feature_var, total) = if use_feature_term {
        let f = feature.unwrap();
        let mask = stack_feat_mask(ts);
        let feat = feature_matching_loss(tape, f.teacher_features, f.student_adapted, &mask)?;
        let wf = tape.scale(feat, weights.feature);
        (Some(feat), tape.add(wf, pred)?)
    } else {
        (None, pred)
    };
    Ok(LossParts {
        feature: feature_var,
        bbox,
        conf,
        class,
        total,
    })
}

/// Ground-truth fine-tuning loss: the prediction terms only, built from
/// targets encoded from ground-truth boxes.
pub fn gt_loss(
    tape: &mut Tape,
    student_raw: Var,
    ts: &[GridTarget],
    weights: &LossWeights,
) -> Result<LossParts> {
    kd_loss(tape, None, student_raw, ts, false, weights)
}

/// Loop-oracle reference values, shared by unit tests and the acceptance
/// suite.
#[doc(hidden)]
pub mod oracle {
    use super::*;

    /// Slot-by-slot re-derivation of the prediction losses.
    pub fn prediction_losses(raw: &[Tensor], ts: &[GridTarget]) -> (f64, f64, f64) {
        let n = ts.len() as f64;
        let (mut lbox, mut lconf, mut lclass) = (0.0, 0.0, 0.0);
        for (img, t) in ts.iter().enumerate() {
            let ch = 5 + t.nc;
            let data = raw[img].data();
            for s in 0..t.k * t.k * t.b {
                let cell = &data[s * ch..(s + 1) * ch];
                let m = t.assign[s];
                if m == 1.0 {
                    let dx = sigmoid(cell[0]) - t.xy[2 * s];
                    let dy = sigmoid(cell[1]) - t.xy[2 * s + 1];
                    let dw = sigmoid(cell[2]) - t.wh[2 * s];
                    let dh = sigmoid(cell[3]) - t.wh[2 * s + 1];
                    lbox += dx * dx + dy * dy + dw * dw + dh * dh;
                    for c in 0..t.nc {
                        lclass += ce(t.class_onehot[s * t.nc + c], cell[5 + c]);
                    }
                }
                let w = m + (1.0 - m) * t.ignore[s];
                lconf += w * ce(m, cell[4]);
            }
        }
        (lbox / n, lconf / n, lclass / n)
    }

    /// Triple-loop feature matching reference.
    pub fn feature_loss(f_t: &Tensor, f_s: &Tensor, masks: &[GridTarget]) -> f64 {
        let (n, ct, k, _) = f_t.dims4().unwrap();
        let mut total = 0.0;
        for img in 0..n {
            for c in 0..ct {
                for cell in 0..k * k {
                    let i = (img * ct + c) * k * k + cell;
                    let d = f_t.data()[i] - f_s.data()[i];
                    total += masks[img].feat[cell] * d * d;
                }
            }
        }
        total / n as f64
    }

    fn ce(t: f64, z: f64) -> f64 {
        z.max(0.0) - t * z + (-z.abs()).exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_ANCHORS;
    use crate::numcore::logit;
    use crate::rng::stream;
    use rand::Rng;

    fn random_scene(rng: &mut crate::rng::Rng64, n: usize, nc: usize) -> Vec<BBox> {
        (0..n)
            .map(|_| {
                let w = rng.gen_range(0.1..0.4);
                let h = rng.gen_range(0.1..0.4);
                BBox::new(
                    rng.gen_range(w / 2.0..1.0 - w / 2.0),
                    rng.gen_range(h / 2.0..1.0 - h / 2.0),
                    w,
                    h,
                    rng.gen_range(0..nc),
                    1.0,
                )
            })
            .collect()
    }

    #[test]
    fn grid_target_empty_scene() {
        let t = build_grid_target(&[], 8, 2, 2, &DEFAULT_ANCHORS).unwrap();
        assert!(t.assign.iter().all(|&v| v == 0.0));
        assert!(t.feat.iter().all(|&v| v == 0.0));
        assert!(t.ignore.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_image_box_covers_feat_mask() {
        let b = BBox::new(0.5, 0.5, 1.0, 1.0, 0, 1.0);
        let t = build_grid_target(&[b], 8, 2, 2, &DEFAULT_ANCHORS).unwrap();
        assert!(t.feat.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn feat_mask_matches_point_in_box_oracle() {
        let mut rng = stream(61, "feat", 0);
        for _ in 0..10 {
            let boxes = random_scene(&mut rng, 4, 2);
            let t = build_grid_target(&boxes, 8, 2, 2, &DEFAULT_ANCHORS).unwrap();
            for gy in 0..8 {
                for gx in 0..8 {
                    let px = (gx as f64 + 0.5) / 8.0;
                    let py = (gy as f64 + 0.5) / 8.0;
                    let want = boxes.iter().any(|b| {
                        px >= b.cx - b.w / 2.0
                            && px <= b.cx + b.w / 2.0
                            && py >= b.cy - b.h / 2.0
                            && py <= b.cy + b.h / 2.0
                    });
                    assert_eq!(t.feat[gy * 8 + gx] == 1.0, want);
                }
            }
            // Invariant: ignore is 1 wherever assign is 1.
            for s in 0..t.assign.len() {
                if t.assign[s] == 1.0 {
                    assert_eq!(t.ignore[s], 1.0);
                }
            }
        }
    }

    #[test]
    fn ignore_update_cases() {
        let (k, b, nc) = (4usize, 2usize, 2usize);
        let t = build_grid_target(&[], k, b, nc, &DEFAULT_ANCHORS).unwrap();
        let raw = Tensor::zeros(&[k, k, b, 5 + nc]);

        // No source boxes: penalty applies everywhere.
        let upd = ignore_update(&t, &raw, &[], 0.5).unwrap();
        assert!(upd.ignore.iter().all(|&v| v == 1.0));

        // A student slot decoding exactly onto a teacher box is suppressed.
        let teacher = BBox::new(0.375, 0.375, 0.25, 0.25, 0, 1.0);
        let mut raw2 = Tensor::full(&[k, k, b, 5 + nc], 0.0);
        // cell (1,1) slot 0 decodes to cx=cy=(1+0.5)/4=0.375 with w=h=0.25
        let s = (k + 1) * b; // gy=1, gx=1, slot 0
        let base = s * (5 + nc);
        raw2.data_mut()[base + 2] = logit(0.25);
        raw2.data_mut()[base + 3] = logit(0.25);
        let upd = ignore_update(&t, &raw2, &[teacher], 0.5).unwrap();
        assert_eq!(upd.ignore[s], 0.0, "IoU 1.0 suppresses the penalty");

        // Random case against a per-slot loop oracle.
        let mut rng = stream(71, "ignore", 0);
        for _ in 0..5 {
            let boxes = random_scene(&mut rng, 3, nc);
            let t = build_grid_target(&boxes, k, b, nc, &DEFAULT_ANCHORS).unwrap();
            let raw = Tensor::rand_uniform(&[k, k, b, 5 + nc], -2.0, 2.0, &mut rng);
            let upd = ignore_update(&t, &raw, &boxes, 0.5).unwrap();
            for gy in 0..k {
                for gx in 0..k {
                    for slot in 0..b {
                        let s = t.slot_index(gy, gx, slot);
                        if t.assign[s] == 1.0 {
                            assert_eq!(upd.ignore[s], 1.0);
                            continue;
                        }
                        let cell = &raw.data()[s * (5 + nc)..];
                        let (cx, cy, w, h) = crate::geometry::slot_box(cell, k, gx, gy);
                        let pred = BBox::new(cx, cy, w, h, 0, 1.0);
                        let max_iou = boxes
                            .iter()
                            .map(|bx| crate::geometry::iou(&pred, bx))
                            .fold(0.0, f64::max);
                        assert_eq!(upd.ignore[s], if max_iou < 0.5 { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }

    #[test]
    fn feature_loss_zero_cases() {
        let mut rng = stream(81, "featloss", 0);
        let f = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mask = Tensor::full(&[2, 4, 4], 1.0);

        let mut tape = Tape::new();
        let fs = tape.leaf(f.clone());
        let loss = feature_matching_loss(&mut tape, &f, fs, &mask).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);

        // All-zero mask kills the loss no matter the features.
        let mut tape = Tape::new();
        let other = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let fs = tape.leaf(other);
        let zmask = Tensor::zeros(&[2, 4, 4]);
        let loss = feature_matching_loss(&mut tape, &f, fs, &zmask).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);

        // Shape mismatch is rejected.
        let mut tape = Tape::new();
        let fs = tape.leaf(Tensor::zeros(&[2, 3, 4, 4]));
        assert!(feature_matching_loss(&mut tape, &Tensor::zeros(&[2, 2, 4, 4]), fs, &mask).is_err());
    }

    #[test]
    fn feature_loss_matches_triple_loop_oracle() {
        let mut rng = stream(91, "featoracle", 0);
        let boxes0 = random_scene(&mut rng, 2, 2);
        let boxes1 = random_scene(&mut rng, 3, 2);
        let t0 = build_grid_target(&boxes0, 4, 2, 2, &DEFAULT_ANCHORS).unwrap();
        let t1 = build_grid_target(&boxes1, 4, 2, 2, &DEFAULT_ANCHORS).unwrap();
        let ts = [t0, t1];
        let f_t = Tensor::rand_uniform(&[2, 5, 4, 4], -1.0, 1.0, &mut rng);
        let f_s = Tensor::rand_uniform(&[2, 5, 4, 4], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let fs = tape.leaf(f_s.clone());
        let mask = stack_feat_mask(&ts);
        let loss = feature_matching_loss(&mut tape, &f_t, fs, &mask).unwrap();
        let got = tape.value(loss).item().unwrap();
        let want = oracle::feature_loss(&f_t, &f_s, &ts);
        assert!((got - want).abs() < 1e-10);
    }

    fn raw_batch(ts: &[GridTarget], rng: &mut crate::rng::Rng64) -> (Tensor, Vec<Tensor>) {
        let (k, b, nc) = (ts[0].k, ts[0].b, ts[0].nc);
        let per: Vec<Tensor> = ts
            .iter()
            .map(|_| Tensor::rand_uniform(&[k, k, b, 5 + nc], -3.0, 3.0, rng))
            .collect();
        let mut data = Vec::new();
        for t in &per {
            data.extend_from_slice(t.data());
        }
        (
            Tensor::new(vec![ts.len(), k, k, b, 5 + nc], data).unwrap(),
            per,
        )
    }

    #[test]
    fn prediction_losses_match_loop_oracle() {
        let mut rng = stream(101, "predoracle", 0);
        for _ in 0..5 {
            let ts: Vec<GridTarget> = (0..2)
                .map(|_| {
                    let boxes = random_scene(&mut rng, 3, 2);
                    let t = build_grid_target(&boxes, 4, 2, 2, &DEFAULT_ANCHORS).unwrap();
                    // Randomize the ignore gate like a mid-training step.
                    let raw = Tensor::rand_uniform(&[4, 4, 2, 7], -2.0, 2.0, &mut rng);
                    ignore_update(&t, &raw, &boxes, 0.5).unwrap()
                })
                .collect();
            let (raw, per) = raw_batch(&ts, &mut rng);

            let mut tape = Tape::new();
            let rv = tape.leaf(raw);
            let lb = box_loss(&mut tape, rv, &ts).unwrap();
            let lc = conf_loss(&mut tape, rv, &ts).unwrap();
            let lcl = class_loss(&mut tape, rv, &ts).unwrap();
            let (wb, wc, wcl) = oracle::prediction_losses(&per, &ts);
            assert!((tape.value(lb).item().unwrap() - wb).abs() < 1e-10);
            assert!((tape.value(lc).item().unwrap() - wc).abs() < 1e-10);
            assert!((tape.value(lcl).item().unwrap() - wcl).abs() < 1e-10);
        }
    }

    #[test]
    fn losses_vanish_at_their_minimizers() {
        let (k, b, nc) = (4usize, 2usize, 2usize);
        let boxes = vec![BBox::new(0.4, 0.6, 0.3, 0.2, 1, 1.0)];
        let t = build_grid_target(&boxes, k, b, nc, &DEFAULT_ANCHORS).unwrap();

        // Logits exactly inverting the targets, saturated conf/class.
        let mut raw = Tensor::full(&[k, k, b, 5 + nc], -40.0);
        for s in 0..k * k * b {
            let base = s * (5 + nc);
            if t.assign[s] == 1.0 {
                let d = raw.data_mut();
                d[base] = logit(t.xy[2 * s]);
                d[base + 1] = logit(t.xy[2 * s + 1]);
                d[base + 2] = logit(t.wh[2 * s]);
                d[base + 3] = logit(t.wh[2 * s + 1]);
                d[base + 4] = 40.0;
                for c in 0..nc {
                    d[base + 5 + c] = if t.class_onehot[s * nc + c] == 1.0 { 40.0 } else { -40.0 };
                }
            }
        }
        let batch = raw.reshape(&[1, k, k, b, 5 + nc]).unwrap();
        let ts = vec![t];
        let mut tape = Tape::new();
        let rv = tape.leaf(batch);
        let parts = gt_loss(&mut tape, rv, &ts, &LossWeights::default()).unwrap();
        let (_, lb, lc, lcl, total) = parts.values(&tape);
        assert!(lb < 1e-20, "box loss {}", lb);
        assert!(lc < 1e-6, "conf loss {}", lc);
        assert!(lcl < 1e-6, "class loss {}", lcl);
        assert!(total < 1e-6);

        // M all zero (with ignore all zero too) gives exactly zero box/class,
        // and conf weighted by zero everywhere.
        let empty = GridTarget::zeros(k, b, nc);
        let mut tape = Tape::new();
        let mut rng = stream(7, "zero", 0);
        let rv = tape.leaf(Tensor::rand_uniform(&[1, k, k, b, 5 + nc], -2.0, 2.0, &mut rng));
        let parts = gt_loss(&mut tape, rv, &[empty], &LossWeights::default()).unwrap();
        let (_, lb, lc, lcl, _) = parts.values(&tape);
        assert_eq!(lb, 0.0);
        assert_eq!(lc, 0.0);
        assert_eq!(lcl, 0.0);
    }

    #[test]
    fn conf_loss_saturated_slot_value() {
        // One assigned slot with conf logit +20 contributes ~2e-9; the other
        // slots are suppressed by a zero ignore gate.
        let (k, b, nc) = (2usize, 1usize, 1usize);
        let mut t = GridTarget::zeros(k, b, nc);
        t.assign[0] = 1.0;
        t.ignore[0] = 1.0;
        let mut raw = Tensor::zeros(&[1, k, k, b, 5 + nc]);
        raw.data_mut()[4] = 20.0;
        let mut tape = Tape::new();
        let rv = tape.leaf(raw);
        let lc = conf_loss(&mut tape, rv, &[t]).unwrap();
        let v = tape.value(lc).item().unwrap();
        let expect = (-20.0f64).exp().ln_1p();
        assert!((v - expect).abs() < 1e-15);
        assert!(v < 1e-8 && v > 0.0);
    }

    #[test]
    fn kd_without_feature_term_equals_gt_bitwise() {
        let mut rng = stream(111, "bitwise", 0);
        let boxes = random_scene(&mut rng, 3, 2);
        let t = build_grid_target(&boxes, 4, 2, 2, &DEFAULT_ANCHORS).unwrap();
        let ts = vec![t];
        let raw = Tensor::rand_uniform(&[1, 4, 4, 2, 7], -2.0, 2.0, &mut rng);

        let mut tape_a = Tape::new();
        let rv = tape_a.leaf(raw.clone());
        let kd = kd_loss(&mut tape_a, None, rv, &ts, false, &LossWeights::default()).unwrap();

        let mut tape_b = Tape::new();
        let rv = tape_b.leaf(raw);
        let gt = gt_loss(&mut tape_b, rv, &ts, &LossWeights::default()).unwrap();

        let a = tape_a.value(kd.total).item().unwrap();
        let b = tape_b.value(gt.total).item().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(kd.feature.is_none());
    }

    #[test]
    fn kd_total_is_sum_of_parts() {
        let mut rng = stream(121, "kdsum", 0);
        let boxes = random_scene(&mut rng, 2, 2);
        let ts = vec![build_grid_target(&boxes, 4, 2, 2, &DEFAULT_ANCHORS).unwrap()];
        let raw = Tensor::rand_uniform(&[1, 4, 4, 2, 7], -2.0, 2.0, &mut rng);
        let f_t = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let f_s = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let rv = tape.leaf(raw);
        let fsv = tape.leaf(f_s);
        let parts = kd_loss(
            &mut tape,
            Some(FeatureInputs {
                teacher_features: &f_t,
                student_adapted: fsv,
            }),
            rv,
            &ts,
            true,
            &LossWeights::default(),
        )
        .unwrap();
        let (lf, lb, lc, lcl, total) = parts.values(&tape);
        let recomputed = lf.unwrap() + lb + lc + lcl;
        assert!((total - recomputed).abs() < 1e-12);

        // Flag off must error when feature inputs demanded but absent.
        let mut tape = Tape::new();
        let rv = tape.leaf(Tensor::zeros(&[1, 4, 4, 2, 7]));
        assert!(kd_loss(&mut tape, None, rv, &ts, true, &LossWeights::default()).is_err());
    }
}
