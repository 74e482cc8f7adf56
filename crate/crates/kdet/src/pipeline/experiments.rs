//! Experiment harnesses: stage wrappers that leave run directories behind,
//! plus the drivers for the two-class comparison, multi-teacher merging,
//! label-fraction sweeps, and day/night domain adaptation.
//!
//! Every run directory holds `config.json`, `metrics.csv`, `best.ckpt`, and
//! `audit.log`. Seeds of an experiment run in parallel, each on its own
//! audit log; logs are concatenated in seed order afterwards so experiment
//! outputs stay deterministic.

use crate::audit::{self, AuditEvent, AuditLog};
use crate::detector::{
    build_model, save_checkpoint_atomic, AdaptationLayer, ArchPreset, DetectorModel,
};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult};
use crate::geometry::DetectionSet;
use crate::par;
use crate::pipeline::{
    aggregate, detect_dataset, gt_sets, pseudo_label, run_stage, subsample_fraction, val_map50,
    write_sweep_csv, AggregateMode, RunRecord, StageKind, StageSetup, SweepRow, TrainConfig,
};
use crate::rng;
use crate::synthdata::{self, gen_dataset, io as dsio, Dataset, SceneConfig, ShapeKind, Shift};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// A trained stage plus its record.
pub struct StageResult {
    pub model: DetectorModel,
    pub record: RunRecord,
}

/// Where a stage reports to.
pub struct StageIo<'a> {
    pub audit: &'a AuditLog,
    pub run_dir: Option<PathBuf>,
    pub label: String,
}

fn finish_stage(
    model: DetectorModel,
    record: RunRecord,
    io: &StageIo<'_>,
    mark: usize,
) -> Result<StageResult> {
    if let Some(dir) = &io.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        record.write_dir(dir)?;
        save_checkpoint_atomic(&model, &dir.join("best.ckpt"))?;
        audit::write_events(&io.audit.events_since(mark), &dir.join("audit.log"))?;
    }
    Ok(StageResult { model, record })
}

/// Train a fresh detector on ground-truth labels.
pub fn supervised_stage(
    arch: ArchPreset,
    nc: usize,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    io: StageIo<'_>,
) -> Result<StageResult> {
    let mark = io.audit.mark();
    let mut model = build_model(arch, nc, cfg.seed)?;
    let train = maybe_subsample(train, cfg)?;
    let record = run_stage(StageSetup {
        kind: StageKind::Supervised,
        model: &mut model,
        adaptation: None,
        teacher: None,
        train: &train,
        val,
        cfg,
        audit: io.audit,
        stage_label: io.label.clone(),
    })?;
    finish_stage(model, record, &io, mark)
}

/// Distill a student against a frozen teacher on pseudo-labeled data.
/// When the feature term is enabled an adaptation layer is created (unless
/// one is passed in) and trained jointly; it is returned for inspection and
/// plays no part in validation.
pub fn distill_stage(
    mut student: DetectorModel,
    adaptation: Option<AdaptationLayer>,
    teacher: &DetectorModel,
    pseudo: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    io: StageIo<'_>,
) -> Result<(StageResult, Option<AdaptationLayer>)> {
    let mark = io.audit.mark();
    let mut adaptation = if cfg.use_feature_term {
        Some(adaptation.unwrap_or_else(|| {
            AdaptationLayer::new(
                student.feature_channels(),
                teacher.feature_channels(),
                cfg.seed,
            )
        }))
    } else {
        adaptation
    };
    let record = run_stage(StageSetup {
        kind: StageKind::Distill,
        model: &mut student,
        adaptation: adaptation.as_mut(),
        teacher: Some(teacher),
        train: pseudo,
        val,
        cfg,
        audit: io.audit,
        stage_label: io.label.clone(),
    })?;
    Ok((finish_stage(student, record, &io, mark)?, adaptation))
}

/// Fine-tune a student on labeled data, honoring `cfg.label_fraction`.
pub fn finetune_stage(
    mut student: DetectorModel,
    labeled: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    io: StageIo<'_>,
) -> Result<StageResult> {
    let mark = io.audit.mark();
    let train = maybe_subsample(labeled, cfg)?;
    let record = run_stage(StageSetup {
        kind: StageKind::Finetune,
        model: &mut student,
        adaptation: None,
        teacher: None,
        train: &train,
        val,
        cfg,
        audit: io.audit,
        stage_label: io.label.clone(),
    })?;
    finish_stage(student, record, &io, mark)
}

fn maybe_subsample(ds: &Dataset, cfg: &TrainConfig) -> Result<Dataset> {
    if cfg.label_fraction < 1.0 {
        subsample_fraction(ds, cfg.label_fraction, cfg.seed)
    } else {
        Ok(ds.clone())
    }
}

/// Concatenate audit logs in a fixed order, renumbering sequence ids.
fn merge_audit_logs(parts: Vec<Vec<AuditEvent>>) -> Vec<AuditEvent> {
    let mut out = Vec::new();
    for part in parts {
        for mut e in part {
            e.seq = out.len() as u64;
            out.push(e);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Two-class comparison

/// Sizes, epochs and seeds of the two-class experiment.
#[derive(Clone, Debug)]
pub struct TwoClassSpec {
    pub out: PathBuf,
    pub seed: u64,
    pub student_seeds: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub teacher_epochs: usize,
    pub supervised_epochs: usize,
    pub ud_epochs: usize,
    pub ft_epochs: usize,
    pub cfg: TrainConfig,
}

impl TwoClassSpec {
    pub fn new(out: PathBuf, seed: u64) -> Self {
        TwoClassSpec {
            out,
            seed,
            student_seeds: 3,
            n_labeled: 2000,
            n_unlabeled: 8000,
            n_val: 500,
            teacher_epochs: 18,
            supervised_epochs: 30,
            ud_epochs: 12,
            ft_epochs: 20,
            cfg: TrainConfig::default(),
        }
    }
}

pub struct TwoClassSeed {
    pub seed: u64,
    pub supervised: f64,
    pub ud_fm: f64,
    pub ud_fm_ft: f64,
    pub ud_plain: f64,
    pub ud_plain_ft: f64,
    /// Distilled-with-feature-matching student before fine-tuning, reusable
    /// for label-fraction follow-ups.
    pub ud_fm_model: DetectorModel,
    pub records: Vec<(String, RunRecord)>,
}

pub struct TwoClassOutcome {
    pub teacher: DetectorModel,
    pub teacher_map: f64,
    pub teacher_record: RunRecord,
    pub per_seed: Vec<TwoClassSeed>,
    pub rows: Vec<SweepRow>,
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub val: Dataset,
    pub pseudo: Dataset,
}

/// Generate the three splits of an experiment, write them under
/// `out/data/`, and read them back through the audited reader.
fn prepare_splits(
    out: &Path,
    scene: &SceneConfig,
    seed: u64,
    sizes: (usize, usize, usize),
    audit: &AuditLog,
) -> Result<(Dataset, Dataset, Dataset)> {
    let mk = |stream: u64, n: usize, labeled: bool| -> Result<Dataset> {
        let cfg = SceneConfig {
            seed: rng::derive(seed, "data", stream),
            ..scene.clone()
        };
        gen_dataset(&cfg, n, labeled)
    };
    let labeled = mk(0, sizes.0, true)?;
    let unlabeled = mk(1, sizes.1, false)?;
    let val = mk(2, sizes.2, true)?;

    let data_dir = out.join("data");
    let (ld, ud, vd) = (
        data_dir.join("labeled"),
        data_dir.join("unlabeled"),
        data_dir.join("val"),
    );
    dsio::write_dataset(&labeled, &ld)?;
    dsio::write_dataset(&unlabeled, &ud)?;
    dsio::write_dataset(&val, &vd)?;

    let labeled = dsio::read_dataset(&ld, audit)?;
    let unlabeled = dsio::read_dataset(&ud, audit)?;
    let val = dsio::read_dataset(&vd, audit)?;
    Ok((labeled, unlabeled, val))
}

pub fn two_class_experiment(spec: &TwoClassSpec) -> Result<TwoClassOutcome> {
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let base_audit = AuditLog::new();
    let scene = SceneConfig::default(); // circle vs triangle
    let (labeled, unlabeled, val) = prepare_splits(
        &spec.out,
        &scene,
        spec.seed,
        (spec.n_labeled, spec.n_unlabeled, spec.n_val),
        &base_audit,
    )?;

    // One teacher serves every student seed.
    let teacher_cfg = TrainConfig {
        epochs: spec.teacher_epochs,
        seed: rng::derive(spec.seed, "teacher", 0),
        ..spec.cfg.clone()
    };
    let teacher = supervised_stage(
        ArchPreset::Teacher,
        2,
        &labeled,
        &val,
        &teacher_cfg,
        StageIo {
            audit: &base_audit,
            run_dir: Some(spec.out.join("teacher")),
            label: "teacher".into(),
        },
    )?;

    let pseudo = {
        let _s = base_audit.stage("pseudo_label");
        pseudo_label(&teacher.model, &unlabeled, &spec.cfg)?
    };

    let seeds: Vec<u64> = (0..spec.student_seeds)
        .map(|i| rng::derive(spec.seed, "student", i as u64))
        .collect();
    let seed_runs: Vec<Result<(TwoClassSeed, Vec<AuditEvent>)>> =
        par::map(&seeds, |&seed| {
            run_two_class_seed(spec, seed, &teacher.model, &labeled, &pseudo, &val)
        });

    let mut per_seed = Vec::new();
    let mut audit_parts = vec![base_audit.events()];
    for r in seed_runs {
        let (seed_outcome, events) = r?;
        audit_parts.push(events);
        per_seed.push(seed_outcome);
    }
    audit::write_events(&merge_audit_logs(audit_parts), &spec.out.join("audit.log"))?;

    let mut rows = vec![SweepRow {
        fraction: 1.0,
        method: "teacher".into(),
        seed: teacher_cfg.seed,
        map50: teacher.record.best_map50,
    }];
    for s in &per_seed {
        for (method, map) in [
            ("supervised", s.supervised),
            ("ud", s.ud_plain),
            ("ud_ft", s.ud_plain_ft),
            ("ud_fm_im", s.ud_fm),
            ("ud_fm_im_ft", s.ud_fm_ft),
        ] {
            rows.push(SweepRow {
                fraction: 1.0,
                method: method.into(),
                seed: s.seed,
                map50: map,
            });
        }
    }
    write_sweep_csv(&rows, &spec.out.join("sweep.csv"))?;

    Ok(TwoClassOutcome {
        teacher: teacher.model,
        teacher_map: teacher.record.best_map50,
        teacher_record: teacher.record,
        per_seed,
        rows,
        labeled,
        unlabeled,
        val,
        pseudo,
    })
}

fn run_two_class_seed(
    spec: &TwoClassSpec,
    seed: u64,
    teacher: &DetectorModel,
    labeled: &Dataset,
    pseudo: &Dataset,
    val: &Dataset,
) -> Result<(TwoClassSeed, Vec<AuditEvent>)> {
    let audit = AuditLog::new();
    let seed_dir = spec.out.join(format!("seed{seed:x}"));
    let mut records = Vec::new();

    let sup_cfg = TrainConfig {
        epochs: spec.supervised_epochs,
        seed,
        ..spec.cfg.clone()
    };
    let supervised = supervised_stage(
        ArchPreset::Student,
        2,
        labeled,
        val,
        &sup_cfg,
        StageIo {
            audit: &audit,
            run_dir: Some(seed_dir.join("supervised")),
            label: format!("supervised_{seed:x}"),
        },
    )?;
    records.push(("supervised".to_string(), supervised.record.clone()));

    // Distillation never flips: pseudo boxes and cached teacher features
    // describe the unflipped image.
    let ud_base = TrainConfig {
        epochs: spec.ud_epochs,
        seed,
        augment_flip: false,
        ..spec.cfg.clone()
    };
    let ft_cfg = TrainConfig {
        epochs: spec.ft_epochs,
        seed,
        ..spec.cfg.clone()
    };

    let branch = |use_feature: bool,
                      tag: &str,
                      records: &mut Vec<(String, RunRecord)>|
     -> Result<(DetectorModel, f64, f64)> {
        let ud_cfg = TrainConfig {
            use_feature_term: use_feature,
            ..ud_base.clone()
        };
        let student = build_model(ArchPreset::Student, 2, seed)?;
        let (ud, _) = distill_stage(
            student,
            None,
            teacher,
            pseudo,
            val,
            &ud_cfg,
            StageIo {
                audit: &audit,
                run_dir: Some(seed_dir.join(format!("ud{tag}"))),
                label: format!("ud{tag}_{seed:x}"),
            },
        )?;
        records.push((format!("ud{tag}"), ud.record.clone()));
        let ft = finetune_stage(
            ud.model.clone(),
            labeled,
            val,
            &ft_cfg,
            StageIo {
                audit: &audit,
                run_dir: Some(seed_dir.join(format!("ud{tag}_ft"))),
                label: format!("ud{tag}_ft_{seed:x}"),
            },
        )?;
        records.push((format!("ud{tag}_ft"), ft.record.clone()));
        Ok((ud.model, ud.record.best_map50, ft.record.best_map50))
    };

    let (ud_fm_model, ud_fm, ud_fm_ft) = branch(true, "_fm_im", &mut records)?;
    let (_, ud_plain, ud_plain_ft) = branch(false, "", &mut records)?;

    Ok((
        TwoClassSeed {
            seed,
            supervised: supervised.record.best_map50,
            ud_fm,
            ud_fm_ft,
            ud_plain,
            ud_plain_ft,
            ud_fm_model,
            records,
        },
        audit.events(),
    ))
}

// ---------------------------------------------------------------------------
// Multi-teacher merging

/// A teacher plus the map from its local class ids into the union space.
pub struct TeacherSpec {
    pub model: DetectorModel,
    pub class_map: BTreeMap<usize, usize>,
}

pub struct MergeOutcome {
    pub student: DetectorModel,
    pub distill_record: RunRecord,
    pub finetune_record: Option<RunRecord>,
    pub eval: EvalResult,
    pub pseudo_size: usize,
}

/// Distill several teachers (possibly with different class vocabularies)
/// into one student over unlabeled data, then optionally fine-tune on
/// union-labeled data. The feature-matching term is always disabled here:
/// feature maps of unrelated teachers highlight different regions, so only
/// prediction matching is meaningful.
pub fn merge_teachers_experiment(
    teachers: &[TeacherSpec],
    union_nc: usize,
    unlabeled: &Dataset,
    labeled: Option<&Dataset>,
    val: &Dataset,
    cfg: &TrainConfig,
    io: StageIo<'_>,
) -> Result<MergeOutcome> {
    if teachers.is_empty() {
        return Err(Error::invalid("merge_teachers", "empty teacher list"));
    }
    for (t, spec) in teachers.iter().enumerate() {
        let mut seen = vec![false; union_nc];
        for local in 0..spec.model.nc {
            let union = *spec.class_map.get(&local).ok_or_else(|| {
                Error::invalid(
                    "merge_teachers",
                    format!("teacher {t} has no mapping for local class {local}"),
                )
            })?;
            if union >= union_nc {
                return Err(Error::invalid(
                    "merge_teachers",
                    format!("teacher {t} maps class {local} to {union} >= {union_nc}"),
                ));
            }
            if std::mem::replace(&mut seen[union], true) {
                return Err(Error::invalid(
                    "merge_teachers",
                    format!("teacher {t} maps two classes onto union id {union}"),
                ));
            }
        }
    }

    // Collect, remap and merge per-image teacher predictions.
    let per_teacher: Vec<Vec<DetectionSet>> = {
        let results = par::map(teachers, |spec| {
            detect_dataset(&spec.model, unlabeled, cfg.score_thresh, cfg.nms_iou).map(|dets| {
                dets.into_iter()
                    .map(|mut d| {
                        for b in &mut d.boxes {
                            b.class_id = spec.class_map[&b.class_id];
                        }
                        d
                    })
                    .collect::<Vec<_>>()
            })
        });
        results.into_iter().collect::<Result<_>>()?
    };
    let mut pseudo_samples = Vec::new();
    for (i, sample) in unlabeled.samples.iter().enumerate() {
        let sets: Vec<DetectionSet> = per_teacher.iter().map(|t| t[i].clone()).collect();
        let merged = aggregate(&sets, AggregateMode::Affirmative, cfg.nms_iou, false)?;
        if merged.boxes.is_empty() {
            continue;
        }
        pseudo_samples.push(crate::synthdata::Sample {
            id: sample.id.clone(),
            image: sample.image.clone(),
            boxes: merged.boxes,
            hidden_boxes: None,
            domain: sample.domain,
        });
    }
    if pseudo_samples.is_empty() {
        return Err(Error::EmptyPseudoLabels);
    }
    let pseudo = Dataset {
        image_size: unlabeled.image_size,
        seed: unlabeled.seed,
        domain: unlabeled.domain,
        labeled: true,
        samples: pseudo_samples,
    };

    let ud_cfg = TrainConfig {
        use_feature_term: false,
        augment_flip: false,
        ..cfg.clone()
    };
    let student = build_model(ArchPreset::Student, union_nc, cfg.seed)?;
    let (ud, _) = distill_stage(
        student,
        None,
        &teachers[0].model, // unused beyond an API anchor: no feature term
        &pseudo,
        val,
        &ud_cfg,
        StageIo {
            audit: io.audit,
            run_dir: io.run_dir.as_ref().map(|d| d.join("ud")),
            label: format!("ud_{}", io.label),
        },
    )?;

    let (student, finetune_record) = match labeled {
        Some(labeled) => {
            let ft = finetune_stage(
                ud.model.clone(),
                labeled,
                val,
                cfg,
                StageIo {
                    audit: io.audit,
                    run_dir: io.run_dir.as_ref().map(|d| d.join("ft")),
                    label: format!("ft_{}", io.label),
                },
            )?;
            (ft.model, Some(ft.record))
        }
        None => (ud.model, None),
    };

    let preds = detect_dataset(&student, val, crate::pipeline::EVAL_SCORE_THRESH, cfg.nms_iou)?;
    let eval = eval::evaluate(&preds, &gt_sets(val), 0.5)?;
    Ok(MergeOutcome {
        student,
        distill_record: ud.record,
        finetune_record,
        eval,
        pseudo_size: pseudo.len(),
    })
}

// ---------------------------------------------------------------------------
// Domain adaptation

pub struct DomainOutcome {
    pub student: DetectorModel,
    pub ud_record: RunRecord,
    pub ft_record: RunRecord,
    /// Best night-validation mAP of the distillation stage alone.
    pub ud_map: f64,
    pub final_map: f64,
}

/// Transfer a day-domain teacher to the night domain: pseudo-label the
/// unlabeled night images, distill, then fine-tune on night labels when
/// available (falling back to day labels), evaluating on night validation
/// data throughout.
pub fn domain_adaptation_experiment(
    teacher_day: &DetectorModel,
    unlabeled_night: &Dataset,
    labeled_day: &Dataset,
    labeled_night: Option<&Dataset>,
    val_night: &Dataset,
    cfg: &TrainConfig,
    io: StageIo<'_>,
) -> Result<DomainOutcome> {
    let pseudo = {
        let _s = io.audit.stage(&format!("pseudo_label_{}", io.label));
        pseudo_label(teacher_day, unlabeled_night, cfg)?
    };
    let ud_cfg = TrainConfig {
        augment_flip: false,
        ..cfg.clone()
    };
    let student = build_model(ArchPreset::Student, teacher_day.nc, cfg.seed)?;
    let (ud, _) = distill_stage(
        student,
        None,
        teacher_day,
        &pseudo,
        val_night,
        &ud_cfg,
        StageIo {
            audit: io.audit,
            run_dir: io.run_dir.as_ref().map(|d| d.join("ud")),
            label: format!("ud_{}", io.label),
        },
    )?;
    let ft_data = labeled_night.unwrap_or(labeled_day);
    let ft = finetune_stage(
        ud.model.clone(),
        ft_data,
        val_night,
        cfg,
        StageIo {
            audit: io.audit,
            run_dir: io.run_dir.as_ref().map(|d| d.join("ft")),
            label: format!("ft_{}", io.label),
        },
    )?;
    Ok(DomainOutcome {
        student: ft.model,
        ud_map: ud.record.best_map50,
        final_map: ft.record.best_map50,
        ud_record: ud.record,
        ft_record: ft.record,
    })
}

// ---------------------------------------------------------------------------
// Label-fraction sweep

/// For every fraction: a supervised-only arm and a distill-then-finetune
/// arm, over the given seeds. The distilled student is trained once per seed
/// and reused across fractions (it never sees labels).
#[allow(clippy::too_many_arguments)]
pub fn label_fraction_sweep(
    fractions: &[f64],
    teacher: &DetectorModel,
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: &Dataset,
    base_cfg: &TrainConfig,
    sup_epochs: usize,
    ud_epochs: usize,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if fractions.iter().any(|f| *f <= 0.0 || *f > 1.0) {
        return Err(Error::invalid(
            "label_fraction_sweep",
            format!("fractions must lie in (0, 1]: {fractions:?}"),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base_audit = AuditLog::new();
    let pseudo = {
        let _s = base_audit.stage("pseudo_label");
        pseudo_label(teacher, unlabeled, base_cfg)?
    };

    struct SeedCell {
        seed: u64,
        per_fraction: Vec<(f64, f64, f64)>, // fraction, supervised, ud_ft
        events: Vec<AuditEvent>,
    }
    let cells: Vec<Result<SeedCell>> = par::map(seeds, |&seed| {
        let audit = AuditLog::new();
        let seed_dir = out.join(format!("seed{seed:x}"));
        let ud_cfg = TrainConfig {
            epochs: ud_epochs,
            seed,
            augment_flip: false,
            ..base_cfg.clone()
        };
        let student = build_model(ArchPreset::Student, teacher.nc, seed)?;
        let (ud, _) = distill_stage(
            student,
            None,
            teacher,
            &pseudo,
            val,
            &ud_cfg,
            StageIo {
                audit: &audit,
                run_dir: Some(seed_dir.join("ud")),
                label: format!("ud_{seed:x}"),
            },
        )?;
        let mut per_fraction = Vec::new();
        for &fraction in fractions {
            let tag = format!("f{:03}", (fraction * 100.0).round() as usize);
            let sup_cfg = TrainConfig {
                epochs: sup_epochs,
                seed,
                label_fraction: fraction,
                ..base_cfg.clone()
            };
            let sup = supervised_stage(
                ArchPreset::Student,
                teacher.nc,
                labeled,
                val,
                &sup_cfg,
                StageIo {
                    audit: &audit,
                    run_dir: Some(seed_dir.join(format!("supervised_{tag}"))),
                    label: format!("supervised_{tag}_{seed:x}"),
                },
            )?;
            let ft_cfg = TrainConfig {
                seed,
                label_fraction: fraction,
                ..base_cfg.clone()
            };
            let ft = finetune_stage(
                ud.model.clone(),
                labeled,
                val,
                &ft_cfg,
                StageIo {
                    audit: &audit,
                    run_dir: Some(seed_dir.join(format!("ud_ft_{tag}"))),
                    label: format!("ud_ft_{tag}_{seed:x}"),
                },
            )?;
            per_fraction.push((fraction, sup.record.best_map50, ft.record.best_map50));
        }
        Ok(SeedCell {
            seed,
            per_fraction,
            events: audit.events(),
        })
    });

    let mut rows = Vec::new();
    let mut audit_parts = vec![base_audit.events()];
    let mut unpacked = Vec::new();
    for c in cells {
        let c = c?;
        audit_parts.push(c.events.clone());
        unpacked.push(c);
    }
    for (fi, &fraction) in fractions.iter().enumerate() {
        for cell in &unpacked {
            let (f, sup, _) = cell.per_fraction[fi];
            debug_assert_eq!(f, fraction);
            rows.push(SweepRow {
                fraction,
                method: "supervised".into(),
                seed: cell.seed,
                map50: sup,
            });
        }
        for cell in &unpacked {
            let (_, _, ft) = cell.per_fraction[fi];
            rows.push(SweepRow {
                fraction,
                method: "ud_ft".into(),
                seed: cell.seed,
                map50: ft,
            });
        }
    }
    audit::write_events(&merge_audit_logs(audit_parts), &out.join("audit.log"))?;
    write_sweep_csv(&rows, &out.join("sweep.csv"))?;
    Ok(rows)
}

/// Sizes and schedule of the label-sweep preset.
#[derive(Clone, Debug)]
pub struct LabelSweepSpec {
    pub out: PathBuf,
    pub seed: u64,
    pub student_seeds: usize,
    pub fractions: Vec<f64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub teacher_epochs: usize,
    pub supervised_epochs: usize,
    pub ud_epochs: usize,
    pub ft_epochs: usize,
    pub cfg: TrainConfig,
}

impl LabelSweepSpec {
    pub fn new(out: PathBuf, seed: u64) -> Self {
        LabelSweepSpec {
            out,
            seed,
            student_seeds: 3,
            fractions: vec![0.2, 0.5, 1.0],
            n_labeled: 2000,
            n_unlabeled: 8000,
            n_val: 500,
            teacher_epochs: 18,
            supervised_epochs: 30,
            ud_epochs: 12,
            ft_epochs: 20,
            cfg: TrainConfig::default(),
        }
    }
}

/// Generate the two-class splits, train one teacher, and sweep fine-tuning
/// label fractions against supervised-only baselines.
pub fn label_sweep_experiment(spec: &LabelSweepSpec) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let base_audit = AuditLog::new();
    let scene = SceneConfig::default();
    let (labeled, unlabeled, val) = prepare_splits(
        &spec.out,
        &scene,
        spec.seed,
        (spec.n_labeled, spec.n_unlabeled, spec.n_val),
        &base_audit,
    )?;
    let teacher_cfg = TrainConfig {
        epochs: spec.teacher_epochs,
        seed: rng::derive(spec.seed, "teacher", 0),
        ..spec.cfg.clone()
    };
    let teacher = supervised_stage(
        ArchPreset::Teacher,
        2,
        &labeled,
        &val,
        &teacher_cfg,
        StageIo {
            audit: &base_audit,
            run_dir: Some(spec.out.join("teacher")),
            label: "teacher".into(),
        },
    )?;
    let ft_cfg = TrainConfig {
        epochs: spec.ft_epochs,
        ..spec.cfg.clone()
    };
    let seeds: Vec<u64> = (0..spec.student_seeds)
        .map(|i| rng::derive(spec.seed, "student", i as u64))
        .collect();
    label_fraction_sweep(
        &spec.fractions,
        &teacher.model,
        &labeled,
        &unlabeled,
        &val,
        &ft_cfg,
        spec.supervised_epochs,
        spec.ud_epochs,
        &seeds,
        &spec.out,
    )
}

// ---------------------------------------------------------------------------
// Merge preset: one single-class teacher per shape

#[derive(Clone, Debug)]
pub struct MergePresetSpec {
    pub out: PathBuf,
    pub seed: u64,
    pub student_seeds: usize,
    pub shapes: Vec<ShapeKind>,
    pub n_labeled_per_teacher: usize,
    pub n_unlabeled: usize,
    pub n_labeled_union: usize,
    pub n_val: usize,
    pub teacher_epochs: usize,
    pub ud_epochs: usize,
    pub ft_epochs: usize,
    pub cfg: TrainConfig,
}

impl MergePresetSpec {
    pub fn new(out: PathBuf, seed: u64, shapes: Vec<ShapeKind>) -> Self {
        MergePresetSpec {
            out,
            seed,
            student_seeds: 3,
            shapes,
            n_labeled_per_teacher: 1200,
            n_unlabeled: 3000,
            n_labeled_union: 1500,
            n_val: 400,
            teacher_epochs: 18,
            ud_epochs: 14,
            ft_epochs: 20,
            cfg: TrainConfig::default(),
        }
    }
}

pub struct MergeSeedOutcome {
    pub seed: u64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map50: f64,
    pub distill_record: RunRecord,
    pub finetune_record: Option<RunRecord>,
}

pub struct MergePresetOutcome {
    pub teacher_maps: Vec<f64>,
    pub per_seed: Vec<MergeSeedOutcome>,
    pub union_nc: usize,
}

/// Train one single-class teacher per shape, merge their predictions
/// affirmatively over a shared unlabeled pool, and distill + fine-tune a
/// union-class student.
pub fn merge_preset_experiment(spec: &MergePresetSpec) -> Result<MergePresetOutcome> {
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let audit = AuditLog::new();
    let union_nc = spec.shapes.len();

    // Per-teacher single-class worlds.
    let mut teachers = Vec::new();
    let mut teacher_maps = Vec::new();
    for (t, &shape) in spec.shapes.iter().enumerate() {
        let scene = SceneConfig {
            shapes: vec![shape],
            seed: rng::derive(spec.seed, "teacher-data", t as u64),
            ..SceneConfig::default()
        };
        let train = gen_dataset(&scene, spec.n_labeled_per_teacher, true)?;
        let val = gen_dataset(
            &SceneConfig {
                seed: rng::derive(spec.seed, "teacher-val", t as u64),
                ..scene.clone()
            },
            spec.n_val.min(200),
            true,
        )?;
        let cfg = TrainConfig {
            epochs: spec.teacher_epochs,
            seed: rng::derive(spec.seed, "teacher", t as u64),
            ..spec.cfg.clone()
        };
        let result = supervised_stage(
            ArchPreset::Teacher,
            1,
            &train,
            &val,
            &cfg,
            StageIo {
                audit: &audit,
                run_dir: Some(spec.out.join(format!("teacher{t}"))),
                label: format!("teacher{t}"),
            },
        )?;
        teacher_maps.push(result.record.best_map50);
        teachers.push(TeacherSpec {
            model: result.model,
            class_map: BTreeMap::from([(0usize, t)]),
        });
    }

    // Union-world data.
    let union_scene = SceneConfig {
        shapes: spec.shapes.clone(),
        seed: rng::derive(spec.seed, "union-data", 0),
        ..SceneConfig::default()
    };
    let unlabeled = gen_dataset(
        &SceneConfig {
            seed: rng::derive(spec.seed, "union-data", 1),
            ..union_scene.clone()
        },
        spec.n_unlabeled,
        false,
    )?;
    let labeled = gen_dataset(&union_scene, spec.n_labeled_union, true)?;
    let val = gen_dataset(
        &SceneConfig {
            seed: rng::derive(spec.seed, "union-data", 2),
            ..union_scene.clone()
        },
        spec.n_val,
        true,
    )?;

    let seeds: Vec<u64> = (0..spec.student_seeds)
        .map(|i| rng::derive(spec.seed, "student", i as u64))
        .collect();
    let outcomes: Vec<Result<(MergeSeedOutcome, Vec<AuditEvent>)>> = par::map(&seeds, |&seed| {
        let seed_audit = AuditLog::new();
        let cfg = TrainConfig {
            epochs: spec.ud_epochs,
            seed,
            ..spec.cfg.clone()
        };
        let ft_cfg = TrainConfig {
            epochs: spec.ft_epochs,
            ..cfg.clone()
        };
        let outcome = merge_teachers_experiment(
            &teachers,
            union_nc,
            &unlabeled,
            Some(&labeled),
            &val,
            &TrainConfig {
                epochs: ft_cfg.epochs,
                ..cfg.clone()
            },
            StageIo {
                audit: &seed_audit,
                run_dir: Some(spec.out.join(format!("seed{seed:x}"))),
                label: format!("merge_{seed:x}"),
            },
        )?;
        Ok((
            MergeSeedOutcome {
                seed,
                per_class_ap: outcome.eval.per_class_ap.clone(),
                map50: outcome.eval.map50,
                distill_record: outcome.distill_record,
                finetune_record: outcome.finetune_record,
            },
            seed_audit.events(),
        ))
    });

    let mut per_seed = Vec::new();
    let mut audit_parts = vec![audit.events()];
    for o in outcomes {
        let (seed_outcome, events) = o?;
        audit_parts.push(events);
        per_seed.push(seed_outcome);
    }
    audit::write_events(&merge_audit_logs(audit_parts), &spec.out.join("audit.log"))?;

    let mut rows = Vec::new();
    for (t, map) in teacher_maps.iter().enumerate() {
        rows.push(SweepRow {
            fraction: 1.0,
            method: format!("teacher{t}"),
            seed: 0,
            map50: *map,
        });
    }
    for s in &per_seed {
        rows.push(SweepRow {
            fraction: 1.0,
            method: "merged_ud_ft".into(),
            seed: s.seed,
            map50: s.map50,
        });
    }
    write_sweep_csv(&rows, &spec.out.join("sweep.csv"))?;

    Ok(MergePresetOutcome {
        teacher_maps,
        per_seed,
        union_nc,
    })
}

// ---------------------------------------------------------------------------
// Day/night preset

#[derive(Clone, Debug)]
pub struct DayNightSpec {
    pub out: PathBuf,
    pub seed: u64,
    pub student_seeds: usize,
    pub n_labeled_day: usize,
    pub n_unlabeled_night: usize,
    pub n_labeled_night: usize,
    pub n_val: usize,
    pub teacher_epochs: usize,
    pub ud_epochs: usize,
    pub ft_epochs: usize,
    pub cfg: TrainConfig,
}

impl DayNightSpec {
    pub fn new(out: PathBuf, seed: u64) -> Self {
        DayNightSpec {
            out,
            seed,
            student_seeds: 3,
            n_labeled_day: 1600,
            n_unlabeled_night: 2400,
            n_labeled_night: 1200,
            n_val: 400,
            teacher_epochs: 18,
            ud_epochs: 14,
            ft_epochs: 20,
            cfg: TrainConfig::default(),
        }
    }
}

pub struct DayNightSeed {
    pub seed: u64,
    pub ud: f64,
    pub ud_ft_day: f64,
    pub ud_ft_night: f64,
}

pub struct DayNightOutcome {
    pub teacher_day_map_on_night: f64,
    pub per_seed: Vec<DayNightSeed>,
}

/// Day-trained teacher, night-domain student: distill on unlabeled night
/// images, then fine-tune on day or night labels and compare on night
/// validation data.
pub fn day_night_experiment(spec: &DayNightSpec) -> Result<DayNightOutcome> {
    std::fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let audit = AuditLog::new();
    let scene = SceneConfig {
        seed: rng::derive(spec.seed, "day-data", 0),
        ..SceneConfig::default()
    };
    let labeled_day = gen_dataset(&scene, spec.n_labeled_day, true)?;
    let day_val = gen_dataset(
        &SceneConfig {
            seed: rng::derive(spec.seed, "day-data", 1),
            ..scene.clone()
        },
        spec.n_val,
        true,
    )?;
    let unlabeled_night = synthdata::shift_dataset(
        &gen_dataset(
            &SceneConfig {
                seed: rng::derive(spec.seed, "night-data", 0),
                ..scene.clone()
            },
            spec.n_unlabeled_night,
            false,
        )?,
        Shift::Night,
    );
    let labeled_night = synthdata::shift_dataset(
        &gen_dataset(
            &SceneConfig {
                seed: rng::derive(spec.seed, "night-data", 1),
                ..scene.clone()
            },
            spec.n_labeled_night,
            true,
        )?,
        Shift::Night,
    );
    let val_night = synthdata::shift_dataset(
        &gen_dataset(
            &SceneConfig {
                seed: rng::derive(spec.seed, "night-data", 2),
                ..scene.clone()
            },
            spec.n_val,
            true,
        )?,
        Shift::Night,
    );

    let teacher_cfg = TrainConfig {
        epochs: spec.teacher_epochs,
        seed: rng::derive(spec.seed, "teacher", 0),
        ..spec.cfg.clone()
    };
    let teacher = supervised_stage(
        ArchPreset::Teacher,
        2,
        &labeled_day,
        &day_val,
        &teacher_cfg,
        StageIo {
            audit: &audit,
            run_dir: Some(spec.out.join("teacher")),
            label: "teacher_day".into(),
        },
    )?;
    let teacher_day_map_on_night =
        val_map50(&teacher.model, &val_night, &gt_sets(&val_night), spec.cfg.nms_iou)?;

    let pseudo = {
        let _s = audit.stage("pseudo_label_night");
        pseudo_label(&teacher.model, &unlabeled_night, &spec.cfg)?
    };

    let seeds: Vec<u64> = (0..spec.student_seeds)
        .map(|i| rng::derive(spec.seed, "student", i as u64))
        .collect();
    let outcomes: Vec<Result<(DayNightSeed, Vec<AuditEvent>)>> = par::map(&seeds, |&seed| {
        let seed_audit = AuditLog::new();
        let seed_dir = spec.out.join(format!("seed{seed:x}"));
        let ud_cfg = TrainConfig {
            epochs: spec.ud_epochs,
            seed,
            augment_flip: false,
            ..spec.cfg.clone()
        };
        let student = build_model(ArchPreset::Student, 2, seed)?;
        let (ud, _) = distill_stage(
            student,
            None,
            &teacher.model,
            &pseudo,
            &val_night,
            &ud_cfg,
            StageIo {
                audit: &seed_audit,
                run_dir: Some(seed_dir.join("ud")),
                label: format!("ud_night_{seed:x}"),
            },
        )?;
        let ft_cfg = TrainConfig {
            epochs: spec.ft_epochs,
            seed,
            ..spec.cfg.clone()
        };
        let ft_day = finetune_stage(
            ud.model.clone(),
            &labeled_day,
            &val_night,
            &ft_cfg,
            StageIo {
                audit: &seed_audit,
                run_dir: Some(seed_dir.join("ft_day")),
                label: format!("ft_day_{seed:x}"),
            },
        )?;
        let ft_night = finetune_stage(
            ud.model.clone(),
            &labeled_night,
            &val_night,
            &ft_cfg,
            StageIo {
                audit: &seed_audit,
                run_dir: Some(seed_dir.join("ft_night")),
                label: format!("ft_night_{seed:x}"),
            },
        )?;
        Ok((
            DayNightSeed {
                seed,
                ud: ud.record.best_map50,
                ud_ft_day: ft_day.record.best_map50,
                ud_ft_night: ft_night.record.best_map50,
            },
            seed_audit.events(),
        ))
    });

    let mut per_seed = Vec::new();
    let mut audit_parts = vec![audit.events()];
    let mut rows = vec![SweepRow {
        fraction: 1.0,
        method: "teacher_day_on_night".into(),
        seed: teacher_cfg.seed,
        map50: teacher_day_map_on_night,
    }];
    for o in outcomes {
        let (s, events) = o?;
        audit_parts.push(events);
        for (method, map) in [
            ("ud", s.ud),
            ("ud_ft_day", s.ud_ft_day),
            ("ud_ft_night", s.ud_ft_night),
        ] {
            rows.push(SweepRow {
                fraction: 1.0,
                method: method.into(),
                seed: s.seed,
                map50: map,
            });
        }
        per_seed.push(s);
    }
    audit::write_events(&merge_audit_logs(audit_parts), &spec.out.join("audit.log"))?;
    write_sweep_csv(&rows, &spec.out.join("sweep.csv"))?;

    Ok(DayNightOutcome {
        teacher_day_map_on_night,
        per_seed,
    })
}
