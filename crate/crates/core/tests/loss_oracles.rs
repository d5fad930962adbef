mod common;

use mocnn_core::loss::*;
use mocnn_core::model::ArchitectureSpec;
use mocnn_core::train::{train_full, TrainConfig};
use mocnn_core::{MultiObjectiveNet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-9;

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    loop {
        let m: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        if m.contains(&0) && m.contains(&1) {
            return m;
        }
    }
}

fn oracle_weights(mask: &[u8]) -> (f64, f64) {
    let mut fg = 0.0;
    let mut bg = 0.0;
    for &m in mask {
        if m == 1 {
            fg += 1.0;
        } else {
            bg += 1.0;
        }
    }
    let total = fg + bg;
    (1.0 / (fg / total), 1.0 / (bg / total))
}

fn oracle_mask_loss(p: &[f64], g: &[u8]) -> f64 {
    let (wf, wb) = oracle_weights(g);
    let mut total = 0.0;
    for i in 0..p.len() {
        let gi = g[i] as f64;
        total += -wf * gi * p[i].ln() - wb * (1.0 - gi) * (1.0 - p[i]).ln();
    }
    total / p.len() as f64
}

fn oracle_point_loss(est: &[f64], gt: &[f64], b: usize, d: usize) -> f64 {
    let mut batch = 0.0;
    for s in 0..b {
        let mut sample = 0.0;
        for j in 0..d / 3 {
            let mut sq = 0.0;
            for k in 0..3 {
                let diff = est[s * d + 3 * j + k] - gt[s * d + 3 * j + k];
                sq += diff * diff;
            }
            sample += sq.sqrt();
        }
        batch += sample / (d / 3) as f64;
    }
    batch / b as f64
}

#[test]
fn fg_bg_weights_match_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..200);
        let m = random_mask(&mut rng, n);
        let w = fg_bg_weights(&m).unwrap();
        let (wf, wb) = oracle_weights(&m);
        assert!((w.fg - wf).abs() <= TOL && (w.bg - wb).abs() <= TOL);
    }
}

#[test]
fn mask_loss_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(2..300);
        let g = random_mask(&mut rng, n);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-7..1.0 - 1e-7)).collect();
        let got = mask_loss(&p, &g).unwrap();
        let want = oracle_mask_loss(&p, &g);
        assert!((got - want).abs() <= TOL * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn joint_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let b = rng.gen_range(1..6);
        let d = 3 * rng.gen_range(6..=7);
        let est: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gt: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = joint_loss(
            &Tensor::new(vec![b, d], est.clone()).unwrap(),
            &Tensor::new(vec![b, d], gt.clone()).unwrap(),
        )
        .unwrap();
        assert!((got - oracle_point_loss(&est, &gt, b, d)).abs() <= 1e-12);
    }
}

#[test]
fn base_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let b = rng.gen_range(1..9);
        let est: Vec<f64> = (0..b * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gt: Vec<f64> = (0..b * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let got = base_loss(
            &Tensor::new(vec![b, 3], est.clone()).unwrap(),
            &Tensor::new(vec![b, 3], gt.clone()).unwrap(),
        )
        .unwrap();
        assert!((got - oracle_point_loss(&est, &gt, b, 3)).abs() <= 1e-12);
    }
}

#[test]
fn type_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let b = rng.gen_range(1..8);
        let c = rng.gen_range(1..6);
        let mut probs = Vec::new();
        for _ in 0..b {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|r| r / s));
        }
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let got = type_loss(&Tensor::new(vec![b, c], probs.clone()).unwrap(), &labels).unwrap();
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            want -= probs[i * c + l].max(1e-7).ln();
        }
        want /= b as f64;
        assert!((got - want).abs() <= TOL);
    }
}

#[test]
fn combined_loss_matches_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..INSTANCES {
        let c = LossComponents {
            mask: rng.gen_range(0.0..5.0),
            jcoords: rng.gen_range(0.0..5.0),
            bcoords: rng.gen_range(0.0..5.0),
            type_: rng.gen_range(0.0..5.0),
        };
        let w = LossWeights {
            w_mask: rng.gen_range(0.0..3.0),
            w_jcoords: rng.gen_range(0.0..3.0),
            w_bcoords: rng.gen_range(0.0..3.0),
            w_type: rng.gen_range(0.0..3.0),
        };
        let got = combined_loss(c, &w);
        let want = [
            (w.w_mask, c.mask),
            (w.w_jcoords, c.jcoords),
            (w.w_bcoords, c.bcoords),
            (w.w_type, c.type_),
        ]
        .iter()
        .map(|(a, b)| a * b)
        .sum::<f64>();
        assert!((got.final_ - want).abs() <= TOL);
        assert_eq!(got.components(), c);
    }
}

#[test]
fn worked_examples() {
    let w = fg_bg_weights(&[1, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    assert!((w.fg - 10.0).abs() < 1e-12 && (w.bg - 10.0 / 9.0).abs() < 1e-12);
    let fg = FgBgWeights { fg: 10.0, bg: 10.0 / 9.0 };
    let l = mask_loss_weighted(&[1e-7], &[1], fg).unwrap();
    assert!((l - 161.180_956_509_583_5).abs() < 1e-9);
    let j = joint_loss(
        &Tensor::new(vec![1, 6], vec![0.03, 0.0, 0.04, 0.0, 0.0, 0.0]).unwrap(),
        &Tensor::zeros(&[1, 6]),
    )
    .unwrap();
    assert!((j - 0.025).abs() < 1e-12);
    let b = base_loss(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 2.0]).unwrap(), &Tensor::zeros(&[1, 3])).unwrap();
    assert!((b - 3.0).abs() < 1e-12);
    let t = type_loss(&Tensor::filled(&[1, 4], 0.25), &[2]).unwrap();
    assert!((t - 4f64.ln()).abs() < 1e-12);
    let c = combined_loss(
        LossComponents { mask: 0.2, jcoords: 0.1, bcoords: 0.1, type_: 0.5 },
        &LossWeights::default(),
    );
    assert!((c.final_ - 0.65).abs() < 1e-12);
    assert!(fg_bg_weights(&[0; 8]).is_err());
}

#[test]
fn mask_loss_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_mask(&mut rng, 64);
    let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
    let mut order: Vec<usize> = (0..64).collect();
    order.reverse();
    order.swap(3, 40);
    let pp: Vec<f64> = order.iter().map(|&i| p[i]).collect();
    let gp: Vec<u8> = order.iter().map(|&i| g[i]).collect();
    assert!((mask_loss(&p, &g).unwrap() - mask_loss(&pp, &gp).unwrap()).abs() < 1e-12);
}

#[test]
fn logged_steps_follow_the_weighted_sum() {
    let corpus = common::tiny_corpus(12, 4, 6, 3, 8);
    let net = MultiObjectiveNet::with_spec(ArchitectureSpec::tiny(), 6, 3, 8).unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::full()
    };
    let out = train_full(net, &corpus, &config).unwrap();
    assert_eq!(out.log.steps.len(), 9);
    for s in &out.log.steps {
        let l = s.loss;
        let want = 1.0 * l.mask + 1.5 * l.jcoords + 1.5 * l.bcoords + 0.3 * l.type_;
        assert!((l.final_ - want).abs() <= TOL, "step {}: {} vs {want}", s.step, l.final_);
    }
}
