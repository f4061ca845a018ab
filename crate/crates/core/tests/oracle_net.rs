mod common;

use common::{gradient_check, random_vec, rng};
use mate::net::{softmax, EncoderConfig, ModelParams};
use ndarray::Array2;

fn naive_encode(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = params.encoder.len() - 1;
    for (i, layer) in params.encoder.iter().enumerate() {
        let mut z = vec![0.0; layer.weight.nrows()];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for (j, aj) in a.iter().enumerate() {
                acc += layer.weight[[o, j]] * aj;
            }
            *zo = acc;
        }
        if i < last {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        a = z;
    }
    a
}

#[test]
fn encoder_matches_straight_line_matmul() {
    let mut r = rng(11);
    let cfg = EncoderConfig { hidden: vec![9, 7], feature_dim: 5 };
    let params = ModelParams::init(6, &cfg, &[3, 4], &mut r).unwrap();
    for _ in 0..20 {
        let x = random_vec(&mut r, 6);
        let got = params.encode(&x).unwrap();
        let want = naive_encode(&params, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn batch_encoding_matches_per_sample() {
    let mut r = rng(12);
    let params = ModelParams::init(6, &EncoderConfig { hidden: vec![8], feature_dim: 4 }, &[2], &mut r).unwrap();
    let rows: Vec<Vec<f64>> = (0..10).map(|_| random_vec(&mut r, 6)).collect();
    let x = Array2::from_shape_vec((10, 6), rows.concat()).unwrap();
    let batch = params.encode_batch(x.view()).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let single = params.encode(row).unwrap();
        for (a, b) in batch.row(i).iter().zip(&single) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn head_probabilities_are_softmax_of_logits() {
    let mut r = rng(13);
    let params = ModelParams::init(3, &EncoderConfig { hidden: vec![4], feature_dim: 3 }, &[5], &mut r).unwrap();
    let f = random_vec(&mut r, 3);
    let probs = params.head_probs(1, &f).unwrap();
    let head = &params.heads[0];
    let logits: Vec<f64> = (0..5).map(|c| (0..3).map(|j| head[[c, j]] * f[j]).sum()).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (p, l) in probs.iter().zip(&logits) {
        assert!((p - l.exp() / z).abs() <= 1e-12);
    }
}

#[test]
fn softmax_survives_huge_logits() {
    let p = softmax(ndarray::arr1(&[1000.0, 999.0, -1000.0]).view());
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in [1, 2, 3, 4] {
        let err = gradient_check(seed, 1e-5);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}
