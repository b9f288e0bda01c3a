//! Pinpoints where a training step spends its time.
use simsid_core::autodiff::kernels::{conv2d_forward, conv2d_backward, matmul, ConvDims};
use simsid_core::autodiff::Graph;
use simsid_core::data;
use simsid_core::networks::SimSIDModel;
use simsid_core::rng;
use simsid_core::tensor::Tensor;
use simsid_core::training::{compute_losses, TrainConfig};
use std::time::Instant;

fn main() {
    // raw matmul flops: [64, 288] x [288, 65536]
    let (m, k, n) = (64usize, 288usize, 16384usize);
    let a = vec![0.5f64; m * k];
    let b = vec![0.25f64; k * n];
    let t = Instant::now();
    let c = matmul(&a, &b, m, k, n);
    let dt = t.elapsed().as_secs_f64();
    println!("matmul {m}x{k}x{n}: {:.3}s = {:.2} GFLOP/s (sink {})", dt, (2.0 * (m * k * n) as f64) / dt / 1e9, c[0]);

    // conv stage-2-like: 256 samples of [32,16,16] -> [64,16,16]
    let d = ConvDims { n: 256, ci: 32, h: 16, w: 16, co: 64, kh: 3, kw: 3, stride: 1, pad: 1 };
    let x = vec![0.1f64; 256 * 32 * 16 * 16];
    let w = vec![0.01f64; 64 * 32 * 9];
    let bias = vec![0.0f64; 64];
    let t = Instant::now();
    let y = conv2d_forward(&x, &w, &bias, &d);
    let dt = t.elapsed().as_secs_f64();
    let flops = 2.0 * (256 * 64 * 16 * 16 * 288) as f64;
    println!("conv fwd: {:.3}s = {:.2} GFLOP/s", dt, flops / dt / 1e9);
    let t = Instant::now();
    let _ = conv2d_backward(&x, &w, &d, &y);
    let dt = t.elapsed().as_secs_f64();
    println!("conv bwd: {:.3}s = {:.2} GFLOP/s", dt, 3.0 * flops / dt / 1e9);

    // full forward vs backward split
    let cfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    let mut model = SimSIDModel::new(cfg.model_config()).unwrap();
    let samples = data::gen_synthetic(16, 1, false).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = data::stack_images(&refs).unwrap();

    let mut g = Graph::new();
    let mut nrng = rng::rng(7, rng::stream::GUMBEL, 0);
    let t = Instant::now();
    let fwd = model.train_forward(&mut g, &batch, &mut nrng, true).unwrap();
    println!("train forward: {:.2}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let losses = compute_losses(&mut g, &fwd, &cfg.weights).unwrap();
    println!("losses: {:.2}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    g.backward(losses.discriminator_objective).unwrap();
    println!("backward D: {:.2}s", t.elapsed().as_secs_f64());
    g.zero_grads();
    let t = Instant::now();
    g.backward(losses.generator_objective).unwrap();
    println!("backward G: {:.2}s", t.elapsed().as_secs_f64());

    // gumbel sampling cost at the mem2 scale
    let t = Instant::now();
    let nz = simsid_core::memory::sample_gumbel(65536 * 100, &mut nrng);
    println!("gumbel 6.5M: {:.2}s (sink {:.3})", t.elapsed().as_secs_f64(), nz[0]);
    let _ = Tensor::zeros(&[1]);
}
