//! Generalized advantage estimation and advantage normalization.

use crate::error::{Error, Result};

/// Guard added to the standard deviation when normalizing.
pub const NORM_EPS: f64 = 1e-8;

/// Fixed-length rollout record.
///
/// `values` holds one extra entry: the bootstrap value of the state reached
/// after the last recorded step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    /// Per-step observation shape, e.g. `[4, 12, 12]`.
    pub obs_shape: Vec<usize>,
    /// Flattened observations, `len() * obs_shape.product()` values.
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        let n = self.obs_len();
        &self.observations[t * n..(t + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        let ok = self.actions.len() == t
            && self.log_probs.len() == t
            && self.dones.len() == t
            && self.values.len() == t + 1
            && self.observations.len() == t * self.obs_len();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "trajectory lengths disagree: rewards {t}, actions {}, log_probs {}, dones {}, values {} (want {}), observations {}",
                self.actions.len(),
                self.log_probs.len(),
                self.dones.len(),
                self.values.len(),
                t + 1,
                self.observations.len()
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdvantageBatch {
    /// Normalized advantages (equal to `raw_advantages` before [`normalize`]).
    pub advantages: Vec<f64>,
    pub raw_advantages: Vec<f64>,
    /// Value targets `A_t + V(s_t)`.
    pub returns: Vec<f64>,
}

/// GAE over raw arrays. `values` has one more entry than `rewards`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Result<AdvantageBatch> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 || dones.len() != t_len {
        return Err(Error::Shape(format!(
            "gae needs values of length {} and dones of length {t_len}, got {} and {}",
            t_len + 1,
            values.len(),
            dones.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config("gamma", "must lie in [0, 1)"));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::config("gae_lambda", "must lie in [0, 1]"));
    }
    let mut adv = vec![0.0; t_len];
    let mut next = 0.0;
    for t in (0..t_len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        next = delta + gamma * lam * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageBatch {
        advantages: adv.clone(),
        raw_advantages: adv,
        returns,
    })
}

pub fn compute_gae(traj: &Trajectory, gamma: f64, lam: f64) -> Result<AdvantageBatch> {
    traj.validate()?;
    gae(&traj.rewards, &traj.values, &traj.dones, gamma, lam)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rescales `raw_advantages` to zero mean and unit population std.
pub fn normalize(batch: &AdvantageBatch) -> Result<AdvantageBatch> {
    if batch.raw_advantages.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "normalization needs at least 2 advantages, got {}",
            batch.raw_advantages.len()
        )));
    }
    let (mean, std) = mean_std(&batch.raw_advantages);
    let advantages = batch
        .raw_advantages
        .iter()
        .map(|a| (a - mean) / (std + NORM_EPS))
        .collect();
    Ok(AdvantageBatch {
        advantages,
        raw_advantages: batch.raw_advantages.clone(),
        returns: batch.returns.clone(),
    })
}

/// Accepts advantages whose mean is within 0.1 of zero and whose population
/// std is within 0.1 of one.
pub fn check_normalized(mean: f64, std: f64) -> Result<()> {
    if mean.abs() > 0.1 || (std - 1.0).abs() > 0.1 {
        return Err(Error::Contract(format!(
            "advantages are not normalized (mean {mean:.4}, std {std:.4})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let mut total = 0.0;
                let mut weight = 1.0;
                for k in t..n {
                    let boot = if dones[k] { 0.0 } else { values[k + 1] };
                    let delta = rewards[k] + gamma * boot - values[k];
                    total += weight * delta;
                    if dones[k] {
                        break;
                    }
                    weight *= gamma * lam;
                }
                total
            })
            .collect()
    }

    #[test]
    fn lambda_zero_is_td_residual() {
        let r = [1.0, -0.5, 0.25];
        let v = [0.1, 0.2, 0.3, 0.4];
        let d = [false, true, false];
        let b = gae(&r, &v, &d, 0.9, 0.0).unwrap();
        assert_eq!(b.raw_advantages[0], 1.0 + 0.9 * 0.2 - 0.1);
        assert_eq!(b.raw_advantages[1], -0.5 - 0.2);
        assert_eq!(b.raw_advantages[2], 0.25 + 0.9 * 0.4 - 0.3);
    }

    #[test]
    fn gamma_zero_is_reward_minus_value() {
        let r = [1.0, 2.0];
        let v = [0.5, 0.25, 9.0];
        let b = gae(&r, &v, &[false, false], 0.0, 0.95).unwrap();
        assert_eq!(b.raw_advantages, vec![0.5, 1.75]);
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        assert!(matches!(gae(&[1.0], &[0.0], &[false], 0.9, 0.9), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_known_values() {
        let b = AdvantageBatch {
            advantages: vec![1.0, 2.0, 3.0],
            raw_advantages: vec![1.0, 2.0, 3.0],
            returns: vec![0.0; 3],
        };
        let n = normalize(&b).unwrap();
        let want = [-1.224744, 0.0, 1.224744];
        for (a, w) in n.advantages.iter().zip(want) {
            assert!((a - w).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_constant_input_is_zero() {
        let b = AdvantageBatch {
            advantages: vec![4.0; 5],
            raw_advantages: vec![4.0; 5],
            returns: vec![0.0; 5],
        };
        assert!(normalize(&b).unwrap().advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_element_is_degenerate() {
        let b = AdvantageBatch {
            advantages: vec![1.0],
            raw_advantages: vec![1.0],
            returns: vec![0.0],
        };
        assert!(matches!(normalize(&b), Err(Error::DegenerateBatch(_))));
    }

    fn trajectory_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..=8).prop_flat_map(|t| {
            (
                proptest::collection::vec(-1.0f64..1.0, t),
                proptest::collection::vec(-5.0f64..5.0, t + 1),
                proptest::collection::vec(any::<bool>(), t),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((r, v, d) in trajectory_strategy(), gamma in 0.0f64..0.999, lam in 0.0f64..=1.0) {
            let b = gae(&r, &v, &d, gamma, lam).unwrap();
            let want = brute(&r, &v, &d, gamma, lam);
            for (a, w) in b.raw_advantages.iter().zip(&want) {
                prop_assert!((a - w).abs() < 1e-9);
            }
        }

        #[test]
        fn done_flags_isolate_episodes((r, v, mut d) in trajectory_strategy(), cut in 0usize..8, bump in -3.0f64..3.0) {
            let cut = cut % r.len();
            d[cut] = true;
            let before = gae(&r, &v, &d, 0.99, 0.95).unwrap();
            let mut r2 = r.clone();
            let mut v2 = v.clone();
            for k in cut + 1..r.len() {
                r2[k] += bump;
                v2[k] -= bump;
            }
            *v2.last_mut().unwrap() += bump;
            let after = gae(&r2, &v2, &d, 0.99, 0.95).unwrap();
            for t in 0..=cut {
                prop_assert_eq!(before.raw_advantages[t], after.raw_advantages[t]);
            }
        }

        #[test]
        fn normalized_has_zero_mean_unit_std(xs in proptest::collection::vec(-100.0f64..100.0, 2..50)) {
            prop_assume!(mean_std(&xs).1 > 1e-3);
            let b = AdvantageBatch { advantages: xs.clone(), raw_advantages: xs, returns: vec![] };
            let n = normalize(&b).unwrap();
            let (m, s) = mean_std(&n.advantages);
            prop_assert!(m.abs() < 1e-8);
            prop_assert!((s - 1.0).abs() < 1e-6);
            // idempotent up to the epsilon guard
            let again = normalize(&AdvantageBatch { advantages: n.advantages.clone(), raw_advantages: n.advantages.clone(), returns: vec![] }).unwrap();
            for (a, b) in again.advantages.iter().zip(&n.advantages) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lambda_one_telescopes_to_monte_carlo() {
        let r = [0.3, -1.0, 0.7, 0.2, 0.9];
        let v = [0.5, -0.2, 0.1, 0.4, -0.3, 1.7];
        let gamma = 0.97;
        let b = gae(&r, &v, &[false; 5], gamma, 1.0).unwrap();
        for t in 0..5 {
            let mut g = 0.0;
            let mut w = 1.0;
            for rk in &r[t..] {
                g += w * rk;
                w *= gamma;
            }
            g += w * v[5];
            assert!((b.returns[t] - g).abs() < 1e-9);
        }
    }
}
