//! Trains the tiny model with and without HILA on the toy set and prints
//! timing and test metrics. `STEPS` and `SEED` override the defaults.
use hila::data::{generate_shapes, ShapesSpec};
use hila::encoder::{Model, ModelConfig};
use hila::metrics::Threshold;
use hila::train::{evaluate, train, TrainConfig};

fn main() {
    let env = |k: &str, d: u64| std::env::var(k).map(|s| s.parse().unwrap()).unwrap_or(d);
    let (steps, seed) = (env("STEPS", 2000), env("SEED", 0));
    let spec = ShapesSpec::default();
    let all = generate_shapes(&spec, 320).unwrap();
    let (tr, te) = all.split_at(256);
    for hila_on in [true, false] {
        let cfg = ModelConfig::tiny(4).with_hila(hila_on);
        let (m, mut st) = Model::init::<f32>(&cfg, seed).unwrap();
        let tc = TrainConfig { steps, seed, ..Default::default() };
        let t = std::time::Instant::now();
        train(&m, &mut st, tr, &tc, |l| {
            if l.step % 250 == 0 {
                eprintln!("  step {} loss {:.4}", l.step, l.loss);
            }
        })
        .unwrap();
        let secs = t.elapsed().as_secs_f64();
        let a = evaluate(&m, &st, tr, 16, Threshold::Pixels(3.0)).unwrap();
        let b = evaluate(&m, &st, te, 16, Threshold::Pixels(3.0)).unwrap();
        println!(
            "hila={hila_on} {secs:.0}s train_acc={:.4} test_miou={:.4} test_f={:.4} test_imagewise_f={:.4}",
            a.pixel_accuracy.unwrap(),
            b.miou.unwrap(),
            b.fscore_3px.unwrap(),
            b.imagewise_fscore.unwrap()
        );
    }
}
