//! Times one training step and one scoring pass at the benchmark scale.
use simsid_core::data;
use simsid_core::networks::SimSIDModel;
use simsid_core::scoring;
use simsid_core::training::{train_step, TrainConfig};
use std::time::Instant;

fn main() {
    let cfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    let t0 = Instant::now();
    let mut model = SimSIDModel::new(cfg.model_config()).unwrap();
    println!("model construction: {:.2}s ({} params)", t0.elapsed().as_secs_f64(), model.params.total_values());

    let samples = data::gen_synthetic(16, 1, false).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = data::stack_images(&refs).unwrap();

    for step in 0..3 {
        let t = Instant::now();
        let b = train_step(&mut model, &batch, &cfg, 1e-4, step).unwrap();
        println!(
            "step {step} ({}): {:.2}s  L_s={:.4} L_dis={:.4}",
            if step % 2 == 0 { "gen+dis" } else { "dis" },
            t.elapsed().as_secs_f64(),
            b.student,
            b.discriminator
        );
    }
    let t = Instant::now();
    let scores = scoring::raw_scores_for(&model, &samples).unwrap();
    println!("scoring 16 images: {:.2}s (score[0]={:.4})", t.elapsed().as_secs_f64(), scores[0]);
}
