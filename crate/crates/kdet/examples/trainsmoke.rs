// Scratch harness for eyeballing learning dynamics while tuning defaults.
// Usage: trainsmoke [n_train] [epochs] [lr] [arch]

use kdet::audit::AuditLog;
use kdet::detector::ArchPreset;
use kdet::pipeline::experiments::{supervised_stage, StageIo};
use kdet::pipeline::TrainConfig;
use kdet::synthdata::{gen_dataset, SceneConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let arch = match args.get(4).map(String::as_str) {
        Some("teacher") => ArchPreset::Teacher,
        _ => ArchPreset::Student,
    };

    let scene = SceneConfig {
        seed: 1,
        ..Default::default()
    };
    let train = gen_dataset(&scene, n, true).unwrap();
    let val = gen_dataset(
        &SceneConfig {
            seed: 2,
            ..scene
        },
        200,
        true,
    )
    .unwrap();

    let cfg = TrainConfig {
        epochs,
        lr,
        seed: 7,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let audit = AuditLog::new();
    let result = supervised_stage(
        arch,
        2,
        &train,
        &val,
        &cfg,
        StageIo {
            audit: &audit,
            run_dir: None,
            label: "smoke".into(),
        },
    )
    .unwrap();
    for row in &result.record.epochs {
        println!(
            "epoch {:>2}  box {:.4}  conf {:.4}  class {:.4}  val mAP50 {:.4}",
            row.epoch, row.l_box, row.l_conf, row.l_class, row.val_map50
        );
    }
    println!(
        "best {:.4} @ epoch {}  ({:.1}s)",
        result.record.best_map50,
        result.record.best_epoch,
        t0.elapsed().as_secs_f64()
    );
}
