#![allow(dead_code)]

use mocnn_core::datastore::{Corpus, PreparedSample};
use mocnn_core::SplitTag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY: usize = 16;

/// Random 16x16 corpus: a bright rectangle on noise, with its mask and
/// random targets.
pub fn tiny_corpus(n_train: usize, n_test: usize, n_joints: usize, n_types: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_train + n_test)
        .map(|i| {
            let (r0, c0) = (rng.gen_range(0..10), rng.gen_range(0..10));
            let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
            let mut mask = vec![0u8; TINY * TINY];
            let mut image_sums = vec![0u16; 3 * TINY * TINY];
            for r in 0..TINY {
                for c in 0..TINY {
                    let fg = (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c);
                    mask[r * TINY + c] = u8::from(fg);
                    for ch in 0..3 {
                        image_sums[ch * TINY * TINY + r * TINY + c] =
                            if fg { rng.gen_range(700..=1020) } else { rng.gen_range(0..=500) };
                    }
                }
            }
            PreparedSample {
                id: format!("s{i:03}"),
                image_sums,
                height: TINY,
                width: TINY,
                mask,
                joints: (0..3 * n_joints).map(|k| if k % 3 == 2 { rng.gen_range(1.0..2.0) } else { rng.gen_range(-0.5..0.5) }).collect(),
                base: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(1.0..2.0)],
                label: rng.gen_range(0..n_types),
                split: if i < n_train { SplitTag::Train } else { SplitTag::Test },
            }
        })
        .collect();
    Corpus {
        samples,
        n_joints,
        n_types,
    }
}
