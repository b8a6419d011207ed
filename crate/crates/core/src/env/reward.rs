use serde::{Deserialize, Serialize};

use super::EnvConfig;
use crate::real::Real;
use crate::retarget::NUM_TIPS;
use crate::score::{PianoState, NUM_KEYS};

/// Distance-to-reward map `g(d) = 1 - tanh(d / sigma)`.
#[inline]
pub fn tolerance<T: Real>(d: T, sigma: T) -> T {
    T::one() - (d / sigma).tanh()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RewardBreakdown<T: Real> {
    pub key_press: T,
    pub mimic: T,
    pub total: T,
}

impl<T: Real> RewardBreakdown<T> {
    pub fn new(key_press: T, mimic: T, cfg: &EnvConfig<T>) -> Self {
        Self {
            key_press,
            mimic,
            total: cfg.key_weight * key_press + cfg.mimic_weight * mimic,
        }
    }
}

/// `0.5 * g(||k_s - 1|| over goal keys) + 0.5 * (1 - any non-goal key pressed)`.
pub fn key_press_reward<T: Real>(key_positions: &[T; NUM_KEYS], goal: &PianoState, cfg: &EnvConfig<T>) -> T {
    let half = T::lit(0.5);
    let mut d2 = T::zero();
    let mut false_positive = false;
    for (k, &ks) in key_positions.iter().enumerate() {
        if goal.is_pressed(k) {
            d2 += (ks - T::one()) * (ks - T::one());
        } else if ks >= cfg.press_threshold {
            false_positive = true;
        }
    }
    let fp = if false_positive { T::zero() } else { T::one() };
    half * tolerance(d2.sqrt(), cfg.sigma_g) + half * fp
}

/// `g` of the Euclidean distance between the stacked 30-vectors of robot and
/// demonstrator fingertips.
pub fn mimic_reward<T: Real>(robot: &[[T; 3]; NUM_TIPS], demo: &[[T; 3]; NUM_TIPS], cfg: &EnvConfig<T>) -> T {
    let d2: T = robot
        .iter()
        .zip(demo)
        .flat_map(|(a, b)| (0..3).map(move |i| (a[i] - b[i]) * (a[i] - b[i])))
        .sum();
    tolerance(d2.sqrt(), cfg.sigma_g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig<f64> {
        EnvConfig::default()
    }

    #[test]
    fn perfect_press_is_one() {
        let mut ks = [0.0; NUM_KEYS];
        ks[30] = 1.0;
        ks[34] = 1.0;
        let r = key_press_reward(&ks, &PianoState::from_keys([30, 34]), &cfg());
        assert_eq!(r, 1.0);
    }

    #[test]
    fn spurious_key_halves_reward() {
        let mut ks = [0.0; NUM_KEYS];
        ks[30] = 1.0;
        ks[50] = 0.9;
        assert_eq!(key_press_reward(&ks, &PianoState::from_keys([30]), &cfg()), 0.5);
    }

    #[test]
    fn shallow_press_uses_distance_term() {
        let mut ks = [0.0; NUM_KEYS];
        let goal = [10, 20, 40];
        for k in goal {
            ks[k] = 0.3;
        }
        let d = 0.7f64 * 3f64.sqrt();
        let want = 0.5 * (1.0 - (d / 0.01).tanh()) + 0.5;
        let got = key_press_reward(&ks, &PianoState::from_keys(goal), &cfg());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn empty_goal_nothing_pressed() {
        assert_eq!(key_press_reward(&[0.0; NUM_KEYS], &PianoState::empty(), &cfg()), 1.0);
    }

    #[test]
    fn mimic_examples() {
        let c = cfg();
        let a: [[f64; 3]; NUM_TIPS] = std::array::from_fn(|i| [0.01 * i as f64, 0.2, 0.02]);
        assert_eq!(mimic_reward(&a, &a, &c), 1.0);
        let mut b = a;
        b[4][1] += c.sigma_g;
        assert!((mimic_reward(&a, &b, &c) - (1.0 - 1f64.tanh())).abs() < 1e-12);
        assert!((mimic_reward(&a, &b, &c) - 0.238_405_844_044_234).abs() < 1e-12);
        let far: [[f64; 3]; NUM_TIPS] = std::array::from_fn(|i| [a[i][0], a[i][1], a[i][2] + 5.0 * c.sigma_g]);
        assert!(mimic_reward(&a, &far, &c) < 0.01);
    }
}
