use kdet::detector::{build_model, ArchPreset};
use kdet::numcore::{Tape, Tensor};

fn main() {
    let teacher = build_model(ArchPreset::Teacher, 2, 1).unwrap();
    let student = build_model(ArchPreset::Student, 2, 1).unwrap();
    let mut rng = kdet::rng::stream(1, "bench", 0);
    for (name, m, batch) in [("teacher", &teacher, 8), ("student", &student, 8)] {
        let x = Tensor::rand_uniform(&[batch, 3, 64, 64], 0.0, 1.0, &mut rng);
        // forward-only
        let t0 = std::time::Instant::now();
        let reps = 8;
        for _ in 0..reps {
            let _ = m.infer(&x).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64() / (reps * batch) as f64;
        // forward+backward
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let b = tape.constant(x.clone());
            let bound = m.bind(&mut tape);
            let (_, raw) = bound.forward(&mut tape, b).unwrap();
            let s = tape.sum(raw);
            tape.backward(s).unwrap();
        }
        let both = t0.elapsed().as_secs_f64() / (reps * batch) as f64;
        println!("{name}: fwd {:.2} ms/img, fwd+bwd {:.2} ms/img  => {:.0} img/s train", fwd*1e3, both*1e3, 1.0/both);
    }
}
