//! Trainable soft labels: one logit row per synthetic image, softmaxed
//! into a class distribution and optimized alongside the images.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lowrank::{standard_normal, StoragePlan};

/// Trainable soft-label logits, rows aligned with the synthesize order.
#[derive(Clone, Debug)]
pub struct LabelBank {
    pub logits: Array2<f64>,
}

impl LabelBank {
    pub fn rows(&self) -> usize {
        self.logits.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }
}

/// Stable softmax of a logit slice.
pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

/// Class distribution of one synthetic image.
pub fn distribution(bank: &LabelBank, index: usize) -> Result<Array1<f64>> {
    if index >= bank.rows() {
        return Err(Error::InvalidArgument(format!(
            "label index {index} out of range 0..{}",
            bank.rows()
        )));
    }
    let row: Vec<f64> = bank.logits.row(index).iter().cloned().collect();
    Ok(Array1::from_vec(softmax_vec(&row)))
}

/// Soft-target cross-entropy: −Σ_c target[c]·log_softmax(pred)[c].
pub fn soft_cross_entropy(pred_logits: &[f64], target: &[f64]) -> Result<f64> {
    if pred_logits.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} logits vs {} targets",
            pred_logits.len(),
            target.len()
        )));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidArgument(format!(
            "target sums to {total}, not a distribution"
        )));
    }
    let lsm = log_softmax_vec(pred_logits);
    Ok(-target.iter().zip(lsm.iter()).map(|(t, l)| t * l).sum::<f64>())
}

/// Label initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelInit {
    /// Image j gets class j mod num_classes: logits 10·one-hot plus
    /// N(0, 0.1) noise. Class-balanced by construction.
    RoundRobinSmoothed,
    /// Logits i.i.d. standard normal.
    Random,
}

impl std::str::FromStr for LabelInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round_robin_smoothed" => Ok(LabelInit::RoundRobinSmoothed),
            "random" => Ok(LabelInit::Random),
            other => Err(Error::Config(format!("unknown label init scheme '{other}'"))),
        }
    }
}

pub fn init_labels(plan: &StoragePlan, scheme: LabelInit, rng_seed: u64) -> LabelBank {
    let rows = plan.images;
    let classes = plan.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let logits = match scheme {
        LabelInit::RoundRobinSmoothed => Array2::from_shape_fn((rows, classes), |(j, c)| {
            let hot = if c == j % classes { 10.0 } else { 0.0 };
            hot + 0.1 * standard_normal(&mut rng)
        }),
        LabelInit::Random => {
            Array2::from_shape_fn((rows, classes), |_| standard_normal(&mut rng))
        }
    };
    LabelBank { logits }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(images: usize, classes: usize) -> StoragePlan {
        StoragePlan {
            c: 1,
            h: 8,
            w: 8,
            num_classes: classes,
            ipc: 1,
            r: 2,
            k: 1,
            m: images,
            images,
            param_count: 0,
            budget: 0,
            utilization: 0.0,
        }
    }

    #[test]
    fn distribution_uniform_for_zero_logits() {
        let bank = LabelBank { logits: Array2::zeros((3, 5)) };
        let d = distribution(&bank, 1).unwrap();
        for &p in d.iter() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_approaches_one_hot() {
        let mut logits = Array2::zeros((1, 4));
        logits[[0, 0]] = 20.0;
        let bank = LabelBank { logits };
        let d = distribution(&bank, 0).unwrap();
        assert!(d[0] > 1.0 - 1e-8);
    }

    #[test]
    fn distribution_matches_direct_oracle() {
        let bank = LabelBank {
            logits: ndarray::arr2(&[[1.0, 2.0, 3.0]]),
        };
        let d = distribution(&bank, 0).unwrap();
        // direct exp/normalize
        let raw = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let z: f64 = raw.iter().sum();
        for (got, want) in d.iter().zip(raw.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn distribution_index_out_of_range() {
        let bank = LabelBank { logits: Array2::zeros((2, 3)) };
        assert!(matches!(
            distribution(&bank, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn distribution_sums_to_one_at_extreme_magnitudes() {
        let bank = LabelBank {
            logits: ndarray::arr2(&[[1e4, -1e4, 5e3], [-1e4, -1e4, -1e4]]),
        };
        for i in 0..2 {
            let d = distribution(&bank, i).unwrap();
            assert!((d.sum() - 1.0).abs() < 1e-6);
            assert!(d.iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn soft_ce_one_hot_reduction() {
        let logits = [0.5, -1.3, 2.2, 0.0];
        let target = [0.0, 0.0, 1.0, 0.0];
        let got = soft_cross_entropy(&logits, &target).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let expected = z.ln() - logits[2];
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn soft_ce_uniform_predictor() {
        let logits = [0.7; 6];
        let target = [0.5, 0.1, 0.1, 0.1, 0.1, 0.1];
        let got = soft_cross_entropy(&logits, &target).unwrap();
        assert!((got - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_direct_oracle() {
        let logits = [0.5, -0.5];
        let target = [0.7, 0.3];
        let got = soft_cross_entropy(&logits, &target).unwrap();
        // direct log-softmax
        let z = (0.5f64).exp() + (-0.5f64).exp();
        let expected = -(0.7 * (0.5 - z.ln()) + 0.3 * (-0.5 - z.ln()));
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn soft_ce_length_mismatch() {
        assert!(soft_cross_entropy(&[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn soft_ce_gibbs_inequality() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let p: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let q: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let sp = softmax_vec(&p);
            let at_p = soft_cross_entropy(&p, &sp).unwrap();
            let at_q = soft_cross_entropy(&q, &sp).unwrap();
            assert!(at_p <= at_q + 1e-10);
        }
    }

    #[test]
    fn soft_ce_target_gradient_matches_finite_differences() {
        // labels are meta-parameters: the loss must be differentiable in
        // the target entries. d loss / d target[c] = -log_softmax(pred)[c]
        let logits = [0.2, -1.0, 0.7];
        let target = [0.5, 0.2, 0.3];
        let lsm = log_softmax_vec(&logits);
        let h = 1e-6;
        for c in 0..3 {
            let mut tp = target;
            let mut tm = target;
            tp[c] += h;
            tm[c] -= h;
            // bypass the sum check via direct formula at perturbed targets
            let f = |t: &[f64]| -> f64 {
                -t.iter().zip(lsm.iter()).map(|(a, b)| a * b).sum::<f64>()
            };
            let num = (f(&tp) - f(&tm)) / (2.0 * h);
            let analytic = -lsm[c];
            assert!((num - analytic).abs() / analytic.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn round_robin_init_is_class_balanced() {
        let p = plan(330, 10);
        let bank = init_labels(&p, LabelInit::RoundRobinSmoothed, 0);
        let mut counts = vec![0usize; 10];
        let mut max_prob_sum = 0.0;
        for j in 0..330 {
            let d = distribution(&bank, j).unwrap();
            let (argmax, best) = d
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, v)| (i, *v))
                .unwrap();
            counts[argmax] += 1;
            max_prob_sum += best;
        }
        for &c in &counts {
            assert!(c >= 30, "class count {c}");
        }
        assert!(max_prob_sum / 330.0 > 0.99);
    }

    #[test]
    fn random_init_reproducible() {
        let p = plan(12, 4);
        let a = init_labels(&p, LabelInit::Random, 9);
        let b = init_labels(&p, LabelInit::Random, 9);
        assert_eq!(a.logits, b.logits);
    }
}
