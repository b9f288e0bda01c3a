use super::*;
use crate::rng as crng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_side: 32,
        grid: (2, 2),
        base_width: 4,
        disc_width: 4,
        items_per_block: 6,
        top_k: 2,
        temperature: 1.0,
        seed: 11,
    }
}

fn tiny_batch(b: usize, seed: u64) -> Tensor {
    let mut r = crng::rng(seed, crng::stream::DATA_GEN, 0);
    let mut t = Tensor::randn(&[b, 1, 32, 32], 0.5, &mut r);
    for v in t.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    t
}

#[test]
fn patchify_standard_and_identity() {
    let mut r = crng::rng(0, crng::stream::DATA_GEN, 1);
    let img = Tensor::randn(&[1, 1, 128, 128], 1.0, &mut r);
    let tiles = patchify(&img, (4, 4)).unwrap();
    assert_eq!(tiles.shape(), &[16, 1, 32, 32]);

    let single = patchify(&img, (1, 1)).unwrap();
    assert_eq!(single.data(), img.data());

    assert!(patchify(&img, (3, 4)).is_err(), "indivisible grid must be rejected");
}

#[test]
fn patchify_roundtrip_bit_exact() {
    let mut r = crng::rng(0, crng::stream::DATA_GEN, 2);
    for (b, side, grid) in [(2usize, 24usize, (4usize, 3usize)), (1, 128, (4, 4)), (3, 16, (2, 2))] {
        let img = Tensor::randn(&[b, 1, side, side], 1.0, &mut r);
        let tiles = patchify(&img, grid).unwrap();
        let back = unpatchify(&tiles, grid, b).unwrap();
        assert_eq!(img, back);
    }
}

#[test]
fn unpatchify_var_matches_tensor_path() {
    let mut r = crng::rng(0, crng::stream::DATA_GEN, 3);
    let tiles = Tensor::randn(&[2 * 6, 1, 4, 4], 1.0, &mut r);
    let expect = unpatchify(&tiles, (2, 3), 2).unwrap();
    let mut g = Graph::new();
    let tv = g.constant(tiles);
    let full = unpatchify_var(&mut g, tv, (2, 3), 2).unwrap();
    assert_eq!(g.value(full), &expect);
}

#[test]
fn standard_architecture_shapes_and_parameter_budget() {
    let model = SimSIDModel::new(ModelConfig::default()).unwrap();
    // encoder output: 16 tiles of 32x32 -> 16 features of 128x4x4 + 2 skips
    let mut g = Graph::new();
    let mut r = crng::rng(0, crng::stream::DATA_GEN, 4);
    let img = Tensor::randn(&[1, 1, 128, 128], 0.3, &mut r);
    let tiles = g.constant(patchify(&img, (4, 4)).unwrap());
    let bound = model.params.bind_all(&mut g, false);
    let mut ctx = BnCtx::Eval(&model.bufs);
    let enc = model.encoder.forward(&mut g, &bound, &mut ctx, tiles).unwrap();
    assert_eq!(g.value(enc.bottleneck).shape(), &[16, 128, 4, 4]);
    assert_eq!(g.value(enc.skip1).shape(), &[16, 32, 16, 16]);
    assert_eq!(g.value(enc.skip2).shape(), &[16, 64, 8, 8]);

    // the discriminator is the lightweight network
    let d = model.disc_param_count();
    assert!(d < model.teacher_param_count(), "disc {d} vs teacher {}", model.teacher_param_count());
    assert!(d < model.student_param_count());

    // generator memory grids follow the per-level feature map extents
    assert_eq!(model.mem_level1.grid, (8, 8));
    assert_eq!(model.mem_level2.grid, (16, 16));
    assert_eq!(model.mem_level1.item_dim, 192);
    assert_eq!(model.mem_level2.item_dim, 96);
}

#[test]
fn weight_sharing_identical_tiles_identical_features() {
    let model = SimSIDModel::new(tiny_config()).unwrap();
    let mut r = crng::rng(0, crng::stream::DATA_GEN, 5);
    let tile = Tensor::randn(&[1, 1, 16, 16], 0.5, &mut r);
    let mut two = Tensor::zeros(&[2, 1, 16, 16]);
    two.data_mut()[..256].copy_from_slice(tile.data());
    two.data_mut()[256..].copy_from_slice(tile.data());

    let mut g = Graph::new();
    let bound = model.params.bind_all(&mut g, false);
    let mut ctx = BnCtx::Eval(&model.bufs);
    let tv = g.constant(two);
    let enc = model.encoder.forward(&mut g, &bound, &mut ctx, tv).unwrap();
    let b = g.value(enc.bottleneck);
    let half = b.len() / 2;
    assert_eq!(b.data()[..half], b.data()[half..]);
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let model = SimSIDModel::new(tiny_config()).unwrap();
    let images = tiny_batch(2, 7);
    let before = (model.params.checksum(), model.bufs.checksum());
    let run = || {
        let mut g = Graph::new();
        let (logit, recon) = model.eval_forward(&mut g, &images).unwrap();
        (g.value(logit).clone(), g.value(recon).clone())
    };
    let (l1, r1) = run();
    let (l2, r2) = run();
    assert_eq!(l1, l2);
    assert_eq!(r1, r2);
    assert_eq!(g_shape(&r1), vec![2, 1, 32, 32]);
    assert_eq!((model.params.checksum(), model.bufs.checksum()), before, "eval must not mutate the model");
}

fn g_shape(t: &Tensor) -> Vec<usize> {
    t.shape().to_vec()
}

#[test]
fn train_forward_shapes_and_discriminator_range() {
    let mut model = SimSIDModel::new(tiny_config()).unwrap();
    let images = tiny_batch(3, 8);
    let mut g = Graph::new();
    let mut r = crng::rng(1, crng::stream::GUMBEL, 0);
    let fwd = model.train_forward(&mut g, &images, &mut r, true).unwrap();
    assert_eq!(g.value(fwd.teacher_tiles).shape(), &[12, 1, 16, 16]);
    assert_eq!(g.value(fwd.student_full).shape(), &[3, 1, 32, 32]);
    assert_eq!(fwd.teacher_feats.len(), LEVELS);
    assert_eq!(fwd.student_feats.len(), LEVELS);
    assert_eq!(g.value(fwd.d_real_logit).shape(), &[3, 1]);
    // tanh output range
    assert!(g.value(fwd.student_full).data().iter().all(|v| v.abs() <= 1.0));

    // discriminate() output strictly inside (0,1), one scalar per image
    let mut g2 = Graph::new();
    let p = model.discriminate(&mut g2, &images).unwrap();
    let pv = g2.value(p);
    assert_eq!(pv.shape(), &[3, 1]);
    assert!(pv.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn teacher_path_gives_encoder_zero_gradient() {
    let mut model = SimSIDModel::new(tiny_config()).unwrap();
    let images = tiny_batch(2, 9);
    let mut g = Graph::new();
    let mut r = crng::rng(2, crng::stream::GUMBEL, 0);
    let fwd = model.train_forward(&mut g, &images, &mut r, true).unwrap();
    let loss = g.mse(fwd.input_tiles, fwd.teacher_tiles).unwrap();
    g.backward(loss).unwrap();
    for (id, p) in model.params.iter() {
        let got = g.grad(fwd.bound.var(id)).is_some();
        if p.name.starts_with("enc.") {
            assert!(!got, "encoder param {} must not receive gradient from the teacher loss", p.name);
        }
        if p.name.starts_with("gt.") {
            assert!(got, "teacher param {} should receive gradient", p.name);
        }
    }
}

#[test]
fn student_loss_reaches_all_three_memories_and_encoder() {
    let mut model = SimSIDModel::new(tiny_config()).unwrap();
    let images = tiny_batch(2, 10);
    let mut g = Graph::new();
    let mut r = crng::rng(3, crng::stream::GUMBEL, 0);
    let fwd = model.train_forward(&mut g, &images, &mut r, true).unwrap();
    let loss = g.mse(fwd.input_tiles, fwd.student_tiles).unwrap();
    g.backward(loss).unwrap();
    for name in ["inp.mem.items", "gs.mem1.items", "gs.mem2.items", "enc.conv1.w"] {
        let (id, _) = model
            .params
            .iter()
            .find(|(_, p)| p.name == name)
            .unwrap_or_else(|| panic!("missing {name}"));
        let grad = g
            .grad(fwd.bound.var(id))
            .unwrap_or_else(|| panic!("{name} received no gradient"));
        assert!(grad.iter().any(|v| v.abs() > 1e-15), "{name} gradient all zero");
    }
}

#[test]
fn student_equals_teacher_when_extras_bypassed() {
    let mut model = SimSIDModel::new(tiny_config()).unwrap();
    // copy teacher weights onto the student decoder
    let pairs: Vec<(String, Tensor)> = model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with("gt."))
        .map(|(_, p)| (p.name.replacen("gt.", "gs.", 1), p.value.clone()))
        .collect();
    for (name, value) in pairs {
        if let Some(p) = model.params.by_name_mut(&name) {
            p.value = value;
        }
    }
    let images = tiny_batch(2, 11);
    let mut g = Graph::new();
    let bound = model.params.bind_all(&mut g, false);
    let mut ctx = BnCtx::Eval(&model.bufs);
    let mut dummy = crng::rng(0, crng::stream::GUMBEL, 1);
    let tiles = g.constant(patchify(&images, model.config.grid).unwrap());
    let enc = model.encoder.forward(&mut g, &bound, &mut ctx, tiles).unwrap();
    let (t_out, _) = model
        .teacher
        .forward(&mut g, &bound, &mut ctx, enc.bottleneck, enc.skip1, enc.skip2, None, &mut dummy)
        .unwrap();
    // same inputs, same weights, in-painting and memories bypassed
    let (s_out, _) = model
        .student
        .forward(&mut g, &bound, &mut ctx, enc.bottleneck, enc.skip1, enc.skip2, None, &mut dummy)
        .unwrap();
    assert_eq!(g.value(t_out), g.value(s_out));
}

#[test]
fn config_validation_rejects_bad_geometry() {
    let mut c = tiny_config();
    c.grid = (3, 3);
    assert!(SimSIDModel::new(c).is_err()); // 32 % 3 != 0
    let mut c = tiny_config();
    c.top_k = 99;
    assert!(SimSIDModel::new(c).is_err());
}
