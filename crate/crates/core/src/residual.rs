//! Residual corrections around the IK nominal, trained with the
//! cross-entropy method over episode return.
//!
//! The policy is linear in a phase-of-song basis (a constant plus Gaussian
//! bumps over `t / (T - 1)`). Each joint group shares one coefficient vector
//! and the group output, scaled by the group bound and clamped to it, is added
//! to every joint of the group.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{step_logged, EpisodeLog, PianoEnv, SongEpisode};
use crate::error::{Error, Result};
use crate::kinematics::{HandModelSpec, JointConfig, JointKind, FINGERS_PER_HAND, NUM_JOINTS};
use crate::metrics::Metrics;
use crate::real::{clamp, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseBasis {
    /// Gaussian bumps, centred evenly on `[0, 1]`.
    pub n_rbf: usize,
    /// Bump width in phase units.
    pub width: f64,
}

impl Default for PhaseBasis {
    fn default() -> Self {
        Self { n_rbf: 4, width: 0.2 }
    }
}

impl PhaseBasis {
    pub fn len(&self) -> usize {
        1 + self.n_rbf
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self, t: usize, song_len: usize) -> Vec<f64> {
        let phase = if song_len > 1 { t as f64 / (song_len - 1) as f64 } else { 0.0 };
        let mut f = Vec::with_capacity(self.len());
        f.push(1.0);
        for i in 0..self.n_rbf {
            let c = if self.n_rbf > 1 { i as f64 / (self.n_rbf - 1) as f64 } else { 0.5 };
            let d = (phase - c) / self.width;
            f.push((-0.5 * d * d).exp());
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGroup {
    pub name: String,
    pub joints: Vec<usize>,
    /// Largest residual magnitude applied to the group's joints.
    pub bound: f64,
}

/// Forearm slides one group each, plus the first flexion joint of every finger.
pub fn default_groups<T: Real>(spec: &HandModelSpec<T>, revolute_bound: f64, prismatic_bound: f64) -> Vec<JointGroup> {
    let names = spec.joint_names();
    let bound = |kind: JointKind| match kind {
        JointKind::Revolute => revolute_bound,
        JointKind::Prismatic => prismatic_bound,
    };
    let mut groups = Vec::new();
    let mut offset = 0;
    for (h, hand) in spec.hands.iter().enumerate() {
        for (i, j) in hand.forearm.iter().enumerate() {
            groups.push(JointGroup {
                name: names[offset + i].clone(),
                joints: vec![offset + i],
                bound: bound(j.kind),
            });
        }
        for f in 0..FINGERS_PER_HAND {
            let chain = spec.chain_indices(h * FINGERS_PER_HAND + f);
            let finger = &hand.fingers[f];
            let local = finger.joints.len().min(2) - 1;
            let idx = chain[hand.forearm.len() + local];
            groups.push(JointGroup {
                name: names[idx].clone(),
                joints: vec![idx],
                bound: bound(finger.joints[local].kind),
            });
        }
        offset += hand.forearm.len() + hand.fingers.iter().map(|f| f.joints.len()).sum::<usize>();
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPolicy {
    pub basis: PhaseBasis,
    pub groups: Vec<JointGroup>,
    /// Group-major coefficients, `groups.len() * basis.len()` entries, in units of the group bound.
    pub theta: Vec<f64>,
}

impl ResidualPolicy {
    pub fn zero(basis: PhaseBasis, groups: Vec<JointGroup>) -> Self {
        let theta = vec![0.0; groups.len() * basis.len()];
        Self { basis, groups, theta }
    }

    /// Default groups with 0.05 rad and 0.01 m bounds.
    pub fn default_for<T: Real>(spec: &HandModelSpec<T>) -> Self {
        Self::zero(PhaseBasis::default(), default_groups(spec, 0.05, 0.01))
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.num_params() {
            return Err(Error::Arity {
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        Ok(Self {
            theta,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.groups.len() * self.basis.len() {
            return Err(Error::Arity {
                expected: self.groups.len() * self.basis.len(),
                got: self.theta.len(),
            });
        }
        for g in &self.groups {
            if !(g.bound >= 0.0) {
                return Err(Error::input(format!("group {} has negative bound", g.name)));
            }
            if let Some(&j) = g.joints.iter().find(|&&j| j >= NUM_JOINTS) {
                return Err(Error::Index { index: j, len: NUM_JOINTS });
            }
        }
        if !(self.basis.width > 0.0) {
            return Err(Error::input("basis width must be positive"));
        }
        Ok(())
    }

    /// The 46 joint residuals at frame `t` of a song of `song_len` frames.
    pub fn residual(&self, t: usize, song_len: usize) -> Vec<f64> {
        let phi = self.basis.features(t, song_len);
        let mut r = vec![0.0; NUM_JOINTS];
        for (g, coef) in self.groups.iter().zip(self.theta.chunks(self.basis.len())) {
            let s: f64 = coef.iter().zip(&phi).map(|(a, b)| a * b).sum();
            let v = clamp(g.bound * s, -g.bound, g.bound);
            for &j in &g.joints {
                r[j] += v;
            }
        }
        r
    }

    /// `clamp(nominal + r_t)` into the joint limits; the pedal follows the nominal.
    pub fn action<T: Real>(
        &self,
        spec: &HandModelSpec<T>,
        nominal: &JointConfig<T>,
        t: usize,
        song_len: usize,
    ) -> JointConfig<T> {
        let r = self.residual(t, song_len);
        let mut u = nominal.clone();
        for (v, dr) in u.joints_mut().iter_mut().zip(&r) {
            *v += T::lit(*dr);
        }
        u.clamped(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "residual policy".into(),
            source,
        })?;
        p.validate()?;
        Ok(p)
    }
}

/// Runs one episode with `u_t = clamp(nominal_t + r_t)`.
pub fn rollout<T: Real>(env: &mut PianoEnv<T>, ep: &SongEpisode<T>, policy: &ResidualPolicy) -> Result<EpisodeLog<T>> {
    env.reset_episode(ep)?;
    let n = ep.len();
    let mut log = EpisodeLog::default();
    for t in 0..n {
        let u = policy.action(env.spec(), &ep.nominal[t], t, n);
        log.frames.push(step_logged(env, &u, t)?);
    }
    Ok(log)
}

pub fn evaluate_policy<T: Real>(env: &mut PianoEnv<T>, ep: &SongEpisode<T>, policy: &ResidualPolicy) -> Result<Metrics> {
    Ok(rollout(env, ep, policy)?.metrics())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub iterations: usize,
    pub init_std: f64,
    pub std_floor: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elite_frac: 0.125,
            iterations: 50,
            init_std: 0.3,
            std_floor: 0.01,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("cem.{field}"),
                message: message.into(),
            })
        };
        if self.population < 4 {
            return bad("population", "must be at least 4");
        }
        if !(self.elite_frac > 0.0 && self.elite_frac < 1.0) {
            return bad("elite_frac", "must lie in (0, 1)");
        }
        if !(self.init_std >= 0.0 && self.std_floor >= 0.0) {
            return bad("init_std", "standard deviations must be non-negative");
        }
        Ok(())
    }

    fn elites(&self) -> usize {
        ((self.population as f64 * self.elite_frac).round() as usize).clamp(1, self.population)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CemIteration {
    pub iteration: usize,
    pub elite_mean: f64,
    pub best: f64,
    pub mean_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CemCurve {
    /// Return of the zero-residual policy, the starting best.
    pub initial: f64,
    pub iterations: Vec<CemIteration>,
}

impl CemCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,elite_mean,best,mean_std\n");
        for it in &self.iterations {
            let _ = writeln!(out, "{},{},{},{}", it.iteration, it.elite_mean, it.best, it.mean_std);
        }
        out
    }
}

fn episode_return<T: Real>(env: &PianoEnv<T>, ep: &SongEpisode<T>, policy: &ResidualPolicy) -> Result<f64> {
    let mut env = env.clone();
    Ok(rollout(&mut env, ep, policy)?.total_reward().as_f64())
}

/// Cross-entropy search over the policy coefficients, starting from `init`.
///
/// Candidates of one iteration are drawn in sequence from the seeded stream
/// and rolled out in parallel on clones of `env`. The returned policy is the
/// best seen, including `init` itself.
pub fn cem_train<T: Real>(
    env: &PianoEnv<T>,
    ep: &SongEpisode<T>,
    init: &ResidualPolicy,
    cfg: &CemConfig,
) -> Result<(ResidualPolicy, CemCurve)> {
    cfg.validate()?;
    init.validate()?;
    let n = init.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = init.theta.clone();
    let mut std = vec![cfg.init_std; n];
    let initial = episode_return(env, ep, init)?;
    if !initial.is_finite() {
        return Err(Error::NonFiniteReturn {
            iteration: 0,
            sample: 0,
            value: initial,
        });
    }
    let mut best = (initial, init.theta.clone());
    let mut curve = CemCurve {
        initial,
        iterations: Vec::with_capacity(cfg.iterations),
    };
    let n_elite = cfg.elites();

    for iteration in 0..cfg.iterations {
        let samples: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                (0..n)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean[i] + std[i] * z
                    })
                    .collect()
            })
            .collect();
        let returns: Vec<f64> = samples
            .par_iter()
            .map(|theta| episode_return(env, ep, &init.with_theta(theta.clone())?))
            .collect::<Result<_>>()?;
        if let Some(sample) = returns.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFiniteReturn {
                iteration,
                sample,
                value: returns[sample],
            });
        }

        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]).then(a.cmp(&b)));
        let elite = &order[..n_elite];
        if returns[elite[0]] > best.0 {
            best = (returns[elite[0]], samples[elite[0]].clone());
        }
        for i in 0..n {
            let m = elite.iter().map(|&e| samples[e][i]).sum::<f64>() / n_elite as f64;
            let v = elite.iter().map(|&e| (samples[e][i] - m).powi(2)).sum::<f64>() / n_elite as f64;
            mean[i] = m;
            std[i] = v.sqrt().max(cfg.std_floor);
        }
        let elite_mean = elite.iter().map(|&e| returns[e]).sum::<f64>() / n_elite as f64;
        log::debug!("cem iteration {iteration}: elite mean {elite_mean:.4}, best {:.4}", best.0);
        curve.iterations.push(CemIteration {
            iteration,
            elite_mean,
            best: best.0,
            mean_std: std.iter().sum::<f64>() / n.max(1) as f64,
        });
    }
    Ok((init.with_theta(best.1)?, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{play_actions, EnvConfig};
    use crate::ik::IkParams;
    use crate::pipeline::nominal_trajectory;
    use crate::retarget::{FingertipFrame, KeyGeometry};
    use crate::score::{PianoState, PianoStateTrajectory};
    use crate::synth::{hand_keys, SynthSpec};

    fn env() -> PianoEnv<f64> {
        PianoEnv::new(HandModelSpec::default(), KeyGeometry::default(), EnvConfig::default()).unwrap()
    }

    /// Right thumb presses its key on frames 3..6 of a 10-frame song. Targets
    /// are raised by `bias`; the demo itself is unbiased.
    fn one_key_episode(bias: f64) -> SongEpisode<f64> {
        let g = KeyGeometry::default();
        let keys = hand_keys(&g, &SynthSpec::default());
        let mut frames = vec![PianoState::empty(); 10];
        for f in &mut frames[3..6] {
            f.set(keys[5], true);
        }
        let song = PianoStateTrajectory::new(20.0, frames).unwrap();
        let demo: Vec<FingertipFrame<f64>> = (0..10)
            .map(|t| {
                FingertipFrame::new(
                    t as f64 * 0.05,
                    std::array::from_fn(|i| {
                        let z = if i == 5 && (3..6).contains(&t) { 0.0 } else { 0.02 };
                        [0.03, g.key(keys[i]).center_y, z]
                    }),
                )
            })
            .collect();
        let params = IkParams { iters_per_frame: 16, ..IkParams::default() };
        let spec = HandModelSpec::default();
        let nominal = nominal_trajectory(&spec, &demo, &song, &params, 400, bias).unwrap();
        SongEpisode::new("one", song, demo, nominal.q).unwrap()
    }

    fn policy() -> ResidualPolicy {
        ResidualPolicy::default_for(&HandModelSpec::<f64>::default())
    }

    fn group_of(p: &ResidualPolicy, joint: usize) -> usize {
        p.groups.iter().position(|g| g.joints == [joint]).expect("joint has a group")
    }

    #[test]
    fn default_groups_cover_slides_and_knuckles() {
        let p = policy();
        assert_eq!(p.groups.len(), 16);
        assert_eq!(p.num_params(), 16 * 5);
        let slides = p.groups.iter().filter(|g| g.bound == 0.01).count();
        assert_eq!(slides, 6);
        let mut joints: Vec<usize> = p.groups.iter().flat_map(|g| g.joints.clone()).collect();
        joints.sort();
        joints.dedup();
        assert_eq!(joints.len(), 16);
    }

    #[test]
    fn zero_policy_matches_open_loop_nominal() {
        let ep = one_key_episode(0.0);
        let a = rollout(&mut env(), &ep, &policy()).unwrap();
        let b = play_actions(&mut env(), &ep.song, &ep.demo, &ep.nominal, &ep.nominal).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics().f1, 1.0);
    }

    #[test]
    fn zero_bound_ignores_theta() {
        let ep = one_key_episode(0.0);
        let mut p = policy();
        for g in &mut p.groups {
            g.bound = 0.0;
        }
        let p = p.with_theta((0..80).map(|i| (i as f64).sin() * 3.0).collect()).unwrap();
        let a = rollout(&mut env(), &ep, &p).unwrap();
        let b = rollout(&mut env(), &ep, &policy()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residuals_respect_bounds_and_limits() {
        let ep = one_key_episode(0.0);
        let p = policy().with_theta((0..80).map(|i| 5.0 * (i as f64 * 1.7).cos()).collect()).unwrap();
        let spec = HandModelSpec::<f64>::default();
        for t in 0..ep.len() {
            let r = p.residual(t, ep.len());
            for g in &p.groups {
                for &j in &g.joints {
                    assert!(r[j].abs() <= g.bound + 1e-15);
                }
            }
            assert!(p.action(&spec, &ep.nominal[t], t, ep.len()).within_limits(&spec));
        }
    }

    #[test]
    fn lowering_the_pressing_hand_raises_key_press_reward() {
        let ep = one_key_episode(0.003);
        let zero = rollout(&mut env(), &ep, &policy()).unwrap();
        assert_eq!(zero.metrics().tp, 0);
        let mut p = policy();
        // Right forearm z slide.
        let z = group_of(&p, 23 + 2);
        let basis = p.basis.len();
        p.theta[z * basis] = -0.8;
        let low = rollout(&mut env(), &ep, &p).unwrap();
        assert!(low.key_press_sum() > zero.key_press_sum());
        assert_eq!(low.metrics().f1, 1.0);
    }

    #[test]
    fn cem_keeps_an_optimal_nominal() {
        let ep = one_key_episode(0.0);
        let cfg = CemConfig { population: 8, iterations: 3, ..CemConfig::default() };
        let (p, curve) = cem_train(&env(), &ep, &policy(), &cfg).unwrap();
        assert!(curve.iterations.iter().all(|it| it.best >= curve.initial));
        assert!(curve.iterations.windows(2).all(|w| w[1].best >= w[0].best));
        let trained = rollout(&mut env(), &ep, &p).unwrap();
        assert_eq!(trained.metrics().f1, 1.0);
        assert!(trained.total_reward() >= curve.initial - 1e-12);
    }

    #[test]
    fn cem_is_deterministic() {
        let ep = one_key_episode(0.003);
        let cfg = CemConfig { population: 8, iterations: 4, seed: 11, ..CemConfig::default() };
        let a = cem_train(&env(), &ep, &policy(), &cfg).unwrap();
        let b = cem_train(&env(), &ep, &policy(), &cfg).unwrap();
        assert_eq!(a.1.to_csv(), b.1.to_csv());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn cem_validates_config() {
        let ep = one_key_episode(0.0);
        for cfg in [
            CemConfig { population: 3, ..CemConfig::default() },
            CemConfig { elite_frac: 1.0, ..CemConfig::default() },
        ] {
            assert!(matches!(cem_train(&env(), &ep, &policy(), &cfg), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let p = policy().with_theta((0..80).map(|i| i as f64 * 0.01).collect()).unwrap();
        assert_eq!(ResidualPolicy::from_json(&p.to_json()).unwrap(), p);
        let mut bad = p.clone();
        bad.theta.pop();
        assert!(ResidualPolicy::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn rollout_rejects_mismatched_episode() {
        let mut ep = one_key_episode(0.0);
        ep.nominal.pop();
        assert!(matches!(rollout(&mut env(), &ep, &policy()), Err(Error::Input(_))));
    }
}
