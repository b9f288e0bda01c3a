//! Times each sub-network forward at benchmark scale.
use simsid_core::autodiff::Graph;
use simsid_core::data;
use simsid_core::layers::{BnCtx, Mode};
use simsid_core::memory::sample_gumbel;
use simsid_core::networks::{patchify, GeneratorMems, SimSIDModel};
use simsid_core::rng;
use simsid_core::tensor::Tensor;
use simsid_core::training::TrainConfig;
use std::time::Instant;

fn main() {
    let cfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    let mut model = SimSIDModel::new(cfg.model_config()).unwrap();
    let samples = data::gen_synthetic(16, 1, false).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = data::stack_images(&refs).unwrap();
    let mut nrng = rng::rng(7, rng::stream::GUMBEL, 0);

    let mut g = Graph::new();
    let t = Instant::now();
    let bound = model.params.bind_all(&mut g, true);
    println!("bind: {:.2}s", t.elapsed().as_secs_f64());
    let tiles = g.constant(patchify(&batch, (4, 4)).unwrap());

    let mut ctx = BnCtx::Train(&mut model.bufs);
    let t = Instant::now();
    let enc = model.encoder.forward(&mut g, &bound, &mut ctx, tiles).unwrap();
    println!("encoder fwd: {:.2}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (_ttiles, _tf) = model
        .teacher
        .forward(&mut g, &bound, &mut ctx, enc.bottleneck, enc.skip1, enc.skip2, None, &mut nrng)
        .unwrap();
    println!("teacher fwd (no mems): {:.2}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let painted = model
        .inpaint
        .forward(&mut g, &bound, enc.bottleneck, 16, Mode::Train, &mut nrng)
        .unwrap();
    println!("inpaint fwd: {:.2}s", t.elapsed().as_secs_f64());

    let mems = GeneratorMems { level1: &model.mem_level1, level2: &model.mem_level2 };
    let t = Instant::now();
    let (_stiles, _sf) = model
        .student
        .forward(&mut g, &bound, &mut ctx, painted, enc.skip1, enc.skip2, Some(&mems), &mut nrng)
        .unwrap();
    println!("student fwd (mems): {:.2}s", t.elapsed().as_secs_f64());

    // isolate the two memory filters at their true scales
    let x1 = g.constant(Tensor::full(&[256, 192, 8, 8], 0.1));
    let noise1 = Tensor::new(vec![256 * 64, 100], sample_gumbel(256 * 64 * 100, &mut nrng)).unwrap();
    let t = Instant::now();
    let _ = g
        .memory_map(x1, bound.var(model.mem_level1.items), (8, 8), 5, 1.0, Some(&noise1))
        .unwrap();
    println!("memory_map level1 fwd: {:.2}s", t.elapsed().as_secs_f64());
    let x2 = g.constant(Tensor::full(&[256, 96, 16, 16], 0.1));
    let noise2 = Tensor::new(vec![256 * 256, 100], sample_gumbel(256 * 256 * 100, &mut nrng)).unwrap();
    let t = Instant::now();
    let _ = g
        .memory_map(x2, bound.var(model.mem_level2.items), (16, 16), 5, 1.0, Some(&noise2))
        .unwrap();
    println!("memory_map level2 fwd: {:.2}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let full = g.constant(batch.clone());
    let _ = model.disc.forward_logits(&mut g, &bound, &mut ctx, full).unwrap();
    println!("disc fwd: {:.2}s", t.elapsed().as_secs_f64());
    println!("graph nodes: {}", g.len_nodes());
}
