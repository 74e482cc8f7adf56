//! The per-stage training engine and frozen-model inference helpers.

use crate::audit::AuditLog;
use crate::detector::{AdaptationLayer, DetectorModel};
use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::{self, DetectionSet, DEFAULT_ANCHORS};
use crate::losses::{self, FeatureInputs, GridTarget};
use crate::numcore::{Adam, AdamConfig, Tensor};
use crate::par;
use crate::pipeline::{EpochRow, RunRecord, TrainConfig};
use crate::rng;
use crate::synthdata::{io as dsio, Dataset, Sample};
use rand::seq::SliceRandom;
use rand::Rng;

/// Decode threshold used when measuring validation mAP; low enough to trace
/// the full precision/recall curve.
pub const EVAL_SCORE_THRESH: f64 = 0.05;

const INFER_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Supervised,
    Distill,
    Finetune,
}

impl StageKind {
    fn label(self) -> &'static str {
        match self {
            StageKind::Supervised => "supervised",
            StageKind::Distill => "distill",
            StageKind::Finetune => "finetune",
        }
    }
}

/// Everything one training stage needs. `adaptation` and `teacher` are only
/// consulted for distillation with the feature term enabled.
pub struct StageSetup<'a> {
    pub kind: StageKind,
    pub model: &'a mut DetectorModel,
    pub adaptation: Option<&'a mut AdaptationLayer>,
    pub teacher: Option<&'a DetectorModel>,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub cfg: &'a TrainConfig,
    pub audit: &'a AuditLog,
    /// Audit stage name, e.g. "ud_seed0".
    pub stage_label: String,
}

fn batch_tensor(samples: &[&Sample], image_size: usize) -> Tensor {
    let per = 3 * image_size * image_size;
    let mut data = Vec::with_capacity(samples.len() * per);
    for s in samples {
        data.extend(s.image.data.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![samples.len(), 3, image_size, image_size], data).unwrap()
}

/// Ground-truth detection sets of a dataset (hidden annotations win when
/// present).
pub fn gt_sets(ds: &Dataset) -> Vec<DetectionSet> {
    ds.samples
        .iter()
        .map(|s| DetectionSet::new(s.id.clone(), s.gt_boxes().to_vec()))
        .collect()
}

/// Run a frozen model over a dataset: decode at `score_thresh`, then
/// class-aware NMS. Parallel over chunks; output order matches the dataset.
pub fn detect_dataset(
    model: &DetectorModel,
    ds: &Dataset,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<DetectionSet>> {
    let chunks: Vec<&[Sample]> = ds.samples.chunks(INFER_CHUNK).collect();
    let results = par::map(&chunks, |chunk| -> Result<Vec<DetectionSet>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = batch_tensor(&refs, ds.image_size);
        let (_, raw) = model.infer(&batch)?;
        let per = raw.numel() / chunk.len();
        let mut out = Vec::with_capacity(chunk.len());
        for (i, s) in chunk.iter().enumerate() {
            let img_raw = Tensor::new(
                vec![model.k, model.k, model.b, 5 + model.nc],
                raw.data()[i * per..(i + 1) * per].to_vec(),
            )
            .unwrap();
            let boxes = geometry::decode_predictions(&img_raw, score_thresh)?;
            let dets = geometry::nms(&DetectionSet::new(s.id.clone(), boxes), nms_iou, true);
            out.push(dets);
        }
        Ok(out)
    });
    let mut flat = Vec::with_capacity(ds.len());
    for r in results {
        flat.extend(r?);
    }
    Ok(flat)
}

/// Validation mAP@50 of the model's raw (adaptation-free) forward path.
pub fn val_map50(
    model: &DetectorModel,
    val: &Dataset,
    gt: &[DetectionSet],
    nms_iou: f64,
) -> Result<f64> {
    let preds = detect_dataset(model, val, EVAL_SCORE_THRESH, nms_iou)?;
    Ok(eval::evaluate(&preds, gt, 0.5)?.map50)
}

/// Label a dataset with a frozen teacher: forward, decode at
/// `cfg.score_thresh`, NMS at `cfg.nms_iou`. Images where nothing survives
/// are dropped. Hidden ground truth does not propagate into the output.
pub fn pseudo_label(
    teacher: &DetectorModel,
    images: &Dataset,
    cfg: &TrainConfig,
) -> Result<Dataset> {
    let dets = detect_dataset(teacher, images, cfg.score_thresh, cfg.nms_iou)?;
    let samples: Vec<Sample> = images
        .samples
        .iter()
        .zip(dets)
        .filter(|(_, d)| !d.boxes.is_empty())
        .map(|(s, d)| Sample {
            id: s.id.clone(),
            image: s.image.clone(),
            boxes: d.boxes,
            hidden_boxes: None,
            domain: s.domain,
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyPseudoLabels);
    }
    Ok(Dataset {
        image_size: images.image_size,
        seed: images.seed,
        domain: images.domain,
        labeled: true,
        samples,
    })
}

/// Deterministically subsample `fraction` of a labeled dataset.
pub fn subsample_fraction(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) || fraction * (ds.len() as f64) < 1.0 {
        return Err(Error::invalid(
            "subsample_fraction",
            format!("fraction {} of {} samples leaves nothing", fraction, ds.len()),
        ));
    }
    let count = ((fraction * ds.len() as f64).round() as usize).min(ds.len());
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "subsample", 0));
    let mut chosen: Vec<usize> = idx.into_iter().take(count).collect();
    chosen.sort_unstable();
    Ok(Dataset {
        image_size: ds.image_size,
        seed: ds.seed,
        domain: ds.domain,
        labeled: ds.labeled,
        samples: chosen.into_iter().map(|i| ds.samples[i].clone()).collect(),
    })
}

/// Teacher backbone features for every sample, in dataset order.
fn teacher_feature_cache(teacher: &DetectorModel, ds: &Dataset) -> Result<Vec<Tensor>> {
    let chunks: Vec<&[Sample]> = ds.samples.chunks(INFER_CHUNK).collect();
    let results = par::map(&chunks, |chunk| -> Result<Vec<Tensor>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = batch_tensor(&refs, ds.image_size);
        let (features, _) = teacher.infer(&batch)?;
        let per = features.numel() / chunk.len();
        let shape = vec![
            features.shape()[1],
            features.shape()[2],
            features.shape()[3],
        ];
        Ok((0..chunk.len())
            .map(|i| {
                Tensor::new(shape.clone(), features.data()[i * per..(i + 1) * per].to_vec())
                    .unwrap()
            })
            .collect())
    });
    let mut flat = Vec::with_capacity(ds.len());
    for r in results {
        flat.extend(r?);
    }
    Ok(flat)
}

/// Train one stage. Returns the run record; the model is left holding the
/// parameters of its best validation epoch.
pub fn run_stage(setup: StageSetup<'_>) -> Result<RunRecord> {
    let StageSetup {
        kind,
        model,
        mut adaptation,
        teacher,
        train,
        val,
        cfg,
        audit,
        stage_label,
    } = setup;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("run_stage", "empty training set"));
    }
    let feature_term = kind == StageKind::Distill && cfg.use_feature_term;
    if feature_term && (adaptation.is_none() || teacher.is_none()) {
        return Err(Error::invalid(
            "run_stage",
            "feature matching needs both a teacher and an adaptation layer",
        ));
    }

    let started = std::time::Instant::now();
    let _stage = audit.stage(&stage_label);
    let (k, b, nc) = (model.k, model.b, model.nc);

    // Static per-sample targets; the ignore gate is refreshed every step.
    let static_targets: Vec<GridTarget> = {
        let built = par::map(&train.samples, |s| {
            losses::build_grid_target(&s.boxes, k, b, nc, &DEFAULT_ANCHORS)
        });
        built.into_iter().collect::<Result<_>>()?
    };

    // Teacher features are cached only when inputs never flip; flipped
    // inputs get fresh teacher forwards per batch.
    let feat_cache: Option<Vec<Tensor>> = if feature_term && !cfg.augment_flip {
        Some(teacher_feature_cache(teacher.unwrap(), train)?)
    } else {
        None
    };

    let val_gt = gt_sets(val);

    let mut adam = {
        let mut params: Vec<&Tensor> = model.params();
        if feature_term {
            params.extend(adaptation.as_ref().unwrap().params());
        }
        Adam::new(AdamConfig::with_lr(cfg.lr), &params)
    };

    let stream_base = rng::derive(cfg.seed, kind.label(), 0);
    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(stream_base, "epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut r);
        let flips: Vec<bool> = (0..train.len())
            .map(|_| cfg.augment_flip && r.gen_bool(0.5))
            .collect();

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // feat, box, conf, class
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            // Assemble inputs, applying per-image flips.
            let prepared: Vec<std::borrow::Cow<'_, Sample>> = chunk
                .iter()
                .map(|&i| {
                    if flips[i] {
                        std::borrow::Cow::Owned(train.samples[i].flip_horizontal())
                    } else {
                        std::borrow::Cow::Borrowed(&train.samples[i])
                    }
                })
                .collect();
            let samples: Vec<&Sample> = prepared.iter().map(|c| c.as_ref()).collect();
            let mut targets: Vec<GridTarget> = Vec::with_capacity(n);
            for (pos, &i) in chunk.iter().enumerate() {
                if flips[i] {
                    targets.push(losses::build_grid_target(
                        &samples[pos].boxes,
                        k,
                        b,
                        nc,
                        &DEFAULT_ANCHORS,
                    )?);
                } else {
                    targets.push(static_targets[i].clone());
                }
            }
            let batch = batch_tensor(&samples, train.image_size);

            // Teacher features for this batch, if matching them.
            let feats: Option<Tensor> = if feature_term {
                let cache = &feat_cache;
                let t = if let Some(cache) = cache {
                    let per = cache[0].numel();
                    let mut data = Vec::with_capacity(n * per);
                    for &i in chunk {
                        data.extend_from_slice(cache[i].data());
                    }
                    let fs = cache[0].shape();
                    Tensor::new(vec![n, fs[0], fs[1], fs[2]], data).unwrap()
                } else {
                    teacher.unwrap().infer(&batch)?.0
                };
                Some(t)
            } else {
                None
            };

            let mut tape = crate::numcore::Tape::new();
            let batch_var = tape.constant(batch);
            let bound = model.bind(&mut tape);
            let (feat_var, raw_var) = bound.forward(&mut tape, batch_var)?;

            let bound_adapt = if feature_term {
                Some(adaptation.as_ref().unwrap().bind(&mut tape))
            } else {
                None
            };
            let adapted = match &bound_adapt {
                Some(a) => Some(a.forward(&mut tape, feat_var)?),
                None => None,
            };

            // Refresh the no-object gates from the current predictions.
            let raw_val = tape.value(raw_var).clone();
            let per = raw_val.numel() / n;
            for (pos, t) in targets.iter_mut().enumerate() {
                let img_raw = Tensor::new(
                    vec![k, k, b, 5 + nc],
                    raw_val.data()[pos * per..(pos + 1) * per].to_vec(),
                )
                .unwrap();
                *t = losses::ignore_update(t, &img_raw, &samples[pos].boxes, cfg.ignore_thresh)?;
            }

            let parts = match kind {
                StageKind::Distill => {
                    let feature_inputs = feats.as_ref().map(|f| FeatureInputs {
                        teacher_features: f,
                        student_adapted: adapted.unwrap(),
                    });
                    losses::kd_loss(
                        &mut tape,
                        feature_inputs,
                        raw_var,
                        &targets,
                        feature_term,
                        &cfg.weights,
                    )?
                }
                StageKind::Supervised | StageKind::Finetune => {
                    losses::gt_loss(&mut tape, raw_var, &targets, &cfg.weights)?
                }
            };
            let (lf, lb, lc, lcl, total) = parts.values(&tape);
            if !total.is_finite() {
                return Err(Error::Msg(format!(
                    "loss diverged at epoch {epoch} ({stage_label})"
                )));
            }
            tape.backward(parts.total)?;

            let mut grads = bound.grads(&tape);
            if let Some(a) = &bound_adapt {
                grads.extend(a.grads(&tape));
            }
            {
                let mut params: Vec<&mut Tensor> = model.params_mut();
                if feature_term {
                    params.extend(adaptation.as_mut().unwrap().params_mut());
                }
                adam.step(&mut params, &grads)?;
            }

            let w = n as f64;
            sums.0 += lf.unwrap_or(0.0) * w;
            sums.1 += lb * w;
            sums.2 += lc * w;
            sums.3 += lcl * w;
            seen += n;
        }

        let val_score = val_map50(model, val, &val_gt, cfg.nms_iou)?;
        let denom = seen as f64;
        rows.push(EpochRow {
            epoch,
            l_feat: feature_term.then_some(sums.0 / denom),
            l_box: sums.1 / denom,
            l_conf: sums.2 / denom,
            l_class: sums.3 / denom,
            val_map50: val_score,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_score > *b) {
            best = Some((val_score, epoch, model.snapshot()));
        }
    }

    let (best_map50, best_epoch, snapshot) = best.expect("at least one epoch ran");
    let final_map50 = rows.last().unwrap().val_map50;
    model.load_params(&snapshot)?;

    Ok(RunRecord {
        stage: kind.label().to_string(),
        config: cfg.clone(),
        epochs: rows,
        final_map50,
        best_map50,
        best_epoch,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        train_hash: dsio::data_hash(train),
        val_hash: dsio::data_hash(val),
    })
}
