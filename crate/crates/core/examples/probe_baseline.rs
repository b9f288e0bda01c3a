//! Prints the trivial-baseline AUC of the synthetic corpus.
use simsid_core::data;

fn main() {
    let train = data::gen_synthetic(100, 21, false).unwrap();
    let side = data::IMAGE_SIDE;
    let mut mean = vec![0.0; side * side];
    for s in &train {
        for (m, &v) in mean.iter_mut().zip(s.pixels.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= train.len() as f64;
    }
    let score = |t: &simsid_core::Tensor| -> f64 {
        t.data().iter().zip(&mean).map(|(v, m)| (v - m).abs()).sum::<f64>() / t.len() as f64
    };
    for seed in [22u64, 50, 90] {
        let normals = data::gen_synthetic(100, seed, false).unwrap();
        let abnormals = data::gen_synthetic(100, seed + 1, true).unwrap();
        let mut num = 0.0;
        for a in &abnormals {
            let sa = score(&a.pixels);
            for n in &normals {
                let sn = score(&n.pixels);
                num += if sa > sn { 1.0 } else if sa == sn { 0.5 } else { 0.0 };
            }
        }
        println!("seed {seed}: trivial baseline AUC = {:.4}", num / 10_000.0);
    }
}
