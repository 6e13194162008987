//! Finite-difference checks of every objective on random small instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{shard_seed, AnonymousSample, FullAnnotationSample, PairedSample};
use crate::error::Result;
use crate::losses::{estimate_joint, AltConsistent, ConsistentAgreement, CorrectedDpo, Dpo, LossConfig};
use crate::optim::grad_check;
use crate::preference::Policy;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpo,
    CorrectedDpo,
    Consistent,
    AltConsistent,
    /// Weighted Bradley-Terry likelihood used for per-type reward fitting.
    RewardMle,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Dpo,
        LossKind::CorrectedDpo,
        LossKind::Consistent,
        LossKind::AltConsistent,
        LossKind::RewardMle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::CorrectedDpo => "corrected_dpo",
            LossKind::Consistent => "consistent",
            LossKind::AltConsistent => "alt_consistent",
            LossKind::RewardMle => "reward_mle",
        }
    }
}

fn pair<R: Rng>(rng: &mut R, n: usize) -> (usize, usize, usize) {
    let x = rng.gen_range(0..n);
    let y1 = rng.gen_range(0..n);
    let mut y2 = rng.gen_range(0..n - 1);
    if y2 >= y1 {
        y2 += 1;
    }
    (x, y1, y2)
}

fn anon<R: Rng>(rng: &mut R, n: usize) -> AnonymousSample {
    let (x, y1, y2) = pair(rng, n);
    AnonymousSample { x, y1, y2, o: rng.gen_range(0..2) }
}

/// Max relative error of the analytic gradient on one random `n × n`
/// instance (random logits, reference policy, β and data).
pub fn check_random_instance(kind: LossKind, n: usize, seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
    let pi_ref = Policy::from_logits(Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0)))?;
    let cfg = LossConfig {
        beta: rng.gen_range(0.5..1.5),
        alpha: rng.gen_range(0.5..4.0),
        ..LossConfig::default()
    };
    let m = 40;
    match kind {
        LossKind::Dpo => {
            let data: Vec<_> = (0..m).map(|_| anon(&mut rng, n)).collect();
            grad_check(&Dpo::new(&pi_ref, LossConfig { alpha: 0.0, ..cfg })?, &logits, &data, None, step)
        }
        LossKind::RewardMle => {
            let data: Vec<_> = (0..m).map(|_| anon(&mut rng, n)).collect();
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..3.0)).collect();
            let bt = Dpo::new(
                &Policy::uniform(n, n),
                LossConfig { beta: 1.0, alpha: 0.0, ..cfg },
            )?;
            grad_check(&bt, &logits, &data, Some(&w), step)
        }
        LossKind::CorrectedDpo => {
            let data: Vec<_> = (0..m).map(|_| anon(&mut rng, n)).collect();
            // several annotation pairs per comparison so J is populated
            let paired: Vec<_> = data
                .iter()
                .flat_map(|s| {
                    (0..4)
                        .map(|_| PairedSample {
                            first: AnonymousSample { o: rng.gen_range(0..2), ..*s },
                            second: AnonymousSample { o: rng.gen_range(0..2), ..*s },
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            let joint = estimate_joint(&paired, 1)?;
            grad_check(&CorrectedDpo::new(&pi_ref, joint, cfg)?, &logits, &data, None, step)
        }
        LossKind::Consistent | LossKind::AltConsistent => {
            let k = 3;
            let data: Vec<_> = (0..m)
                .map(|i| {
                    let (x, y1, y2) = pair(&mut rng, n);
                    // mostly unanimous records, some disagreements
                    let o_vec = if i % 4 == 0 {
                        (0..k).map(|_| rng.gen_range(0..2)).collect()
                    } else {
                        vec![rng.gen_range(0..2); k]
                    };
                    FullAnnotationSample { x, y1, y2, o_vec }
                })
                .collect();
            if kind == LossKind::Consistent {
                grad_check(&ConsistentAgreement::new(&pi_ref, cfg)?, &logits, &data, None, step)
            } else {
                grad_check(&AltConsistent::new(&pi_ref, cfg)?, &logits, &data, None, step)
            }
        }
    }
}

/// Errors for `instances` random instances seeded from `seed`.
pub fn check_many(kind: LossKind, n: usize, instances: usize, seed: u64, step: f64) -> Result<Vec<f64>> {
    (0..instances)
        .map(|i| check_random_instance(kind, n, shard_seed(seed, i as u64), step))
        .collect()
}
