// End-to-end smoke run of the two-class experiment at reduced scale, for
// tuning epochs and learning rates.
// Usage: pipesmoke [n_labeled] [n_unlabeled] [seeds] [lr]

use kdet::pipeline::experiments::{two_class_experiment, TwoClassSpec};
use kdet::pipeline::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_labeled: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let n_unlabeled: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let seeds: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let dir = tempfile::tempdir().unwrap();
    let mut spec = TwoClassSpec::new(dir.path().join("out"), 7);
    spec.n_labeled = n_labeled;
    spec.n_unlabeled = n_unlabeled;
    spec.n_val = 300;
    spec.student_seeds = seeds;
    spec.teacher_epochs = 15;
    spec.supervised_epochs = 25;
    spec.ud_epochs = 10;
    spec.ft_epochs = 15;
    spec.cfg = TrainConfig {
        lr,
        ..TrainConfig::default()
    };

    let t0 = std::time::Instant::now();
    let out = two_class_experiment(&spec).unwrap();
    println!("teacher: {:.4}   pseudo kept {} / {}", out.teacher_map, out.pseudo.len(), spec.n_unlabeled);
    for s in &out.per_seed {
        println!(
            "seed {:x}: supervised {:.4} | ud {:.4} ud_ft {:.4} | ud_fm {:.4} ud_fm_ft {:.4}",
            s.seed, s.supervised, s.ud_plain, s.ud_plain_ft, s.ud_fm, s.ud_fm_ft
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
