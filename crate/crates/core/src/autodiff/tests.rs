use super::*;
use crate::rng;
use crate::tensor::Tensor;

fn randt(shape: &[usize], idx: u64) -> Tensor {
    let mut r = rng::rng(0, rng::stream::PARAM_INIT, idx);
    Tensor::randn(shape, 1.0, &mut r)
}

#[test]
fn relu_forward_and_subgradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]), true);
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum_all(y); // upstream [1,1,1]
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn stop_gradient_blocks_backward() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
    let d = g.stop_grad(x);
    assert_eq!(g.value(d).data(), g.value(x).data());
    let s = g.sum_all(d);
    g.backward(s).unwrap();
    // declared contract: zero gradient, i.e. nothing reaches the input
    assert!(g.grad(x).is_none());
}

#[test]
fn grad_check_sum_of_squares() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum_all(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
    // analytic gradient is [2, 4]
    let mut g = Graph::new();
    let v = g.leaf(x, true);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum_all(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
}

#[test]
fn grad_check_softmax_sum_random8() {
    // softmax-then-weighted-sum; plain sum has zero gradient everywhere
    let x = randt(&[8], 0);
    let w: Vec<f64> = (0..8).map(|i| (i as f64 + 1.0) * 0.3).collect();
    let err = grad_check(
        |g, v| {
            let sm = g.softmax_axis(v, 0)?;
            let wv = g.constant(Tensor::from_vec(w.clone()));
            let p = g.mul(sm, wv)?;
            Ok(g.sum_all(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn backward_accumulation_is_additive() {
    // x consumed on two paths must receive the sum of both path gradients;
    // oracle: evaluate the same function with independent copies of x.
    let xt = randt(&[5], 1);
    let mut g = Graph::new();
    let x = g.leaf(xt.clone(), true);
    let y = g.add(x, x).unwrap();
    let p = g.mul(y, x).unwrap(); // (x + x) * x, three uses total
    let s = g.sum_all(p);
    g.backward(s).unwrap();
    let got = g.grad(x).unwrap().to_vec();

    let mut g2 = Graph::new();
    let a = g2.leaf(xt.clone(), true);
    let b = g2.leaf(xt.clone(), true);
    let c = g2.leaf(xt.clone(), true);
    let y2 = g2.add(a, b).unwrap();
    let p2 = g2.mul(y2, c).unwrap();
    let s2 = g2.sum_all(p2);
    g2.backward(s2).unwrap();
    let expect: Vec<f64> = g2
        .grad(a)
        .unwrap()
        .iter()
        .zip(g2.grad(b).unwrap())
        .zip(g2.grad(c).unwrap())
        .map(|((u, v), w)| u + v + w)
        .collect();
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_eval_is_pure_and_repeatable() {
    let x = randt(&[2, 3, 4, 4], 2);
    let gamma = Tensor::full(&[3], 1.2);
    let beta = Tensor::full(&[3], -0.1);
    let mean = vec![0.1, -0.2, 0.3];
    let var = vec![1.0, 0.5, 2.0];
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let ga = g.leaf(gamma.clone(), false);
        let be = g.leaf(beta.clone(), false);
        let y = g.batch_norm_eval(xv, ga, be, &mean, &var, 1e-5).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn conv_shape_mismatch_names_primitive() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
    let w = g.leaf(Tensor::zeros(&[3, 5, 3, 3]), false); // wrong in-channels
    let b = g.leaf(Tensor::zeros(&[3]), false);
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("conv2d"), "{msg}");
    assert!(msg.contains("[1, 2, 4, 4]"), "{msg}");
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]), true);
    let y = g.relu(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn topk_softmax_matches_masked_softmax_and_st_backward() {
    // forward: softmax over the top-2 of [2,1,0]
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![2.0, 1.0, 0.0]), true);
    let y = g.topk_softmax_st(x, 2, 1.0).unwrap();
    let out = g.value(y).data().to_vec();
    let e = |v: f64| v.exp();
    let denom = e(2.0) + e(1.0);
    assert!((out[0] - e(2.0) / denom).abs() < 1e-12);
    assert!((out[1] - e(1.0) / denom).abs() < 1e-12);
    assert_eq!(out[2], 0.0);
    assert!((out[0] - 0.7311).abs() < 1e-4);

    // backward contract: full-softmax jacobian applied to the upstream
    let up = [0.3, -0.7, 0.2];
    let upv = g.constant(Tensor::from_vec(up.to_vec()));
    let p = g.mul(y, upv).unwrap();
    let s = g.sum_all(p);
    g.backward(s).unwrap();
    let got = g.grad(x).unwrap();

    let logits = [2.0, 1.0, 0.0];
    let max = 2.0f64;
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let dot: f64 = probs.iter().zip(&up).map(|(p, u)| p * u).sum();
    for j in 0..3 {
        let expect = probs[j] * (up[j] - dot);
        assert!((got[j] - expect).abs() < 1e-12, "item {j}: {} vs {expect}", got[j]);
    }
    // every entry receives gradient, not only the active two
    assert!(got.iter().all(|v| v.abs() > 0.0));
}

#[test]
fn topk_equals_full_softmax_when_k_is_n() {
    let xt = randt(&[6], 3);
    let mut g = Graph::new();
    let x = g.leaf(xt.clone(), false);
    let a = g.topk_softmax_st(x, 6, 1.0).unwrap();
    let b = g.softmax_axis(x, 0).unwrap();
    for (u, v) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn topk_rejects_bad_k() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), false);
    assert!(g.topk_softmax_st(x, 0, 1.0).is_err());
    assert!(g.topk_softmax_st(x, 3, 1.0).is_err());
}

#[test]
fn maxpool_and_upsample_grad_check() {
    let x = randt(&[1, 2, 4, 4], 4);
    let err = grad_check(
        |g, v| {
            let p = g.maxpool2d(v, 2, 2)?;
            let u = g.upsample_nearest(p, 2)?;
            let sq = g.mul(u, u)?;
            Ok(g.mean_all(sq))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn conv2d_grad_check_stride_and_pad() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = randt(&[2, 3, 5, 5], 10 + stride as u64 * 3 + pad as u64);
        let wt = randt(&[4, 3, 3, 3], 20 + stride as u64);
        let bt = randt(&[4], 30);
        // check gradient w.r.t. the input
        let (w2, b2) = (wt.clone(), bt.clone());
        let err = grad_check(
            |g, v| {
                let w = g.leaf(w2.clone(), false);
                let b = g.leaf(b2.clone(), false);
                let y = g.conv2d(v, w, b, stride, pad)?;
                let sq = g.mul(y, y)?;
                Ok(g.mean_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "dx err {err} at stride {stride} pad {pad}");
        // and w.r.t. the weights
        let x2 = x.clone();
        let b3 = bt.clone();
        let err_w = grad_check(
            |g, v| {
                let xx = g.leaf(x2.clone(), false);
                let b = g.leaf(b3.clone(), false);
                let y = g.conv2d(xx, v, b, stride, pad)?;
                let sq = g.mul(y, y)?;
                Ok(g.mean_all(sq))
            },
            &wt,
            1e-6,
        )
        .unwrap();
        assert!(err_w < 1e-4, "dw err {err_w} at stride {stride} pad {pad}");
    }
}

#[test]
fn batchnorm_train_grad_check() {
    let x = randt(&[3, 2, 3, 3], 40);
    let gt = randt(&[2], 41);
    let bt = randt(&[2], 42);
    let (g2, b2) = (gt.clone(), bt.clone());
    let err = grad_check(
        |g, v| {
            let ga = g.leaf(g2.clone(), false);
            let be = g.leaf(b2.clone(), false);
            let (y, _, _) = g.batch_norm_train(v, ga, be, 1e-5)?;
            let w = g.constant(Tensor::randn(&[3 * 2 * 3 * 3], 1.0, &mut rng::rng(0, 9, 9)));
            let wr = g.reshape(w, &[3, 2, 3, 3])?;
            let p = g.mul(y, wr)?;
            Ok(g.sum_all(p))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "bn dx err {err}");
}

#[test]
fn train_step_bit_reproducible() {
    // identical seeds produce identical graphs, losses, and gradients
    let run = || {
        let xt = randt(&[2, 1, 6, 6], 50);
        let wt = randt(&[2, 1, 3, 3], 51);
        let bt = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let x = g.leaf(xt, false);
        let w = g.leaf(wt, true);
        let b = g.leaf(bt, true);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let r = g.relu(y);
        let sq = g.mul(r, r).unwrap();
        let loss = g.mean_all(sq);
        g.backward(loss).unwrap();
        (g.scalar_value(loss), g.grad(w).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
