//! Kinematic piano-playing environment.
//!
//! Joints follow the commanded targets with a first-order lag integrated over
//! `substep_hz / control_hz` substeps per control step. Each fingertip is a
//! sphere of radius `fingertip_radius`; the key under its centre is depressed
//! by the sphere's penetration below the key top, normalised by the key
//! travel. Keys carry no memory, so a key's depression is a function of the
//! current joint positions alone.
//!
//! # Observation layout
//!
//! [`Observation::to_vec`] concatenates, in order:
//!
//! | block | size |
//! |---|---|
//! | joint positions | 46 |
//! | joint velocities | 46 |
//! | pedal state | 1 |
//! | key positions `k_s` | 88 |
//! | goal frames `t..t+L` (88 keys then pedal, per frame) | 89·L |
//! | demonstrator fingertips (tip-major, xyz) | 30 |
//! | prior control (IK nominal, 46 joints then pedal) | 47 |

mod reward;

use serde::{Deserialize, Serialize};

pub use reward::{key_press_reward, mimic_reward, tolerance, RewardBreakdown};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, HandModelSpec, JointConfig, NUM_JOINTS};
use crate::metrics::{compute_metrics, Metrics};
use crate::real::{clamp, Real};
use crate::retarget::{FingertipFrame, KeyGeometry, NUM_TIPS};
use crate::score::{PianoState, PianoStateTrajectory, NUM_KEYS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default)]
pub struct EnvConfig<T: Real> {
    pub control_hz: f64,
    pub substep_hz: f64,
    /// Key travel depth in metres.
    pub key_travel: T,
    /// Fraction of travel at which a key counts as pressed.
    pub press_threshold: T,
    /// Joint tracking time constant in seconds.
    pub tau_track: T,
    pub sigma_g: T,
    pub key_weight: T,
    pub mimic_weight: T,
    pub fingertip_radius: T,
    /// Goal frames in the observation.
    pub lookahead: usize,
}

impl<T: Real> Default for EnvConfig<T> {
    fn default() -> Self {
        Self {
            control_hz: 20.0,
            substep_hz: 500.0,
            key_travel: T::lit(0.008),
            press_threshold: T::lit(0.5),
            tau_track: T::lit(0.01),
            sigma_g: T::lit(0.01),
            key_weight: T::lit(2.0 / 3.0),
            mimic_weight: T::lit(1.0 / 3.0),
            fingertip_radius: T::lit(0.0055),
            lookahead: 10,
        }
    }
}

impl<T: Real> EnvConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("env.{field}"),
                message,
            })
        };
        if !(self.control_hz > 0.0) {
            return bad("control_hz", "must be positive".into());
        }
        let ratio = self.substep_hz / self.control_hz;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return bad("substep_hz", format!("{} is not a multiple of control_hz {}", self.substep_hz, self.control_hz));
        }
        if ((self.key_weight + self.mimic_weight).as_f64() - 1.0).abs() > 1e-6
            || self.key_weight < T::zero()
            || self.mimic_weight < T::zero()
        {
            return bad("key_weight", "reward weights must be non-negative and sum to 1".into());
        }
        if !(self.key_travel > T::zero()) {
            return bad("key_travel", "must be positive".into());
        }
        if !(self.press_threshold > T::zero() && self.press_threshold <= T::one()) {
            return bad("press_threshold", "must lie in (0, 1]".into());
        }
        if !(self.sigma_g > T::zero()) {
            return bad("sigma_g", "must be positive".into());
        }
        if !(self.tau_track.as_f64() * self.substep_hz >= 1.0) {
            return bad("tau_track", "must be at least one substep".into());
        }
        if self.fingertip_radius < T::zero() {
            return bad("fingertip_radius", "must be non-negative".into());
        }
        if self.lookahead == 0 {
            return bad("lookahead", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.substep_hz / self.control_hz).round() as usize
    }

    pub fn control_dt(&self) -> T {
        T::lit(1.0 / self.control_hz)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState<T: Real> {
    pub q: JointConfig<T>,
    pub qdot: Vec<T>,
    pub key_positions: [T; NUM_KEYS],
    pub pedal: bool,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T: Real> {
    pub t: usize,
    pub q: Vec<T>,
    pub qdot: Vec<T>,
    pub pedal: bool,
    pub key_positions: Vec<T>,
    pub goal: Vec<PianoState>,
    pub demo_tips: [[T; 3]; NUM_TIPS],
    pub prior: Vec<T>,
}

impl<T: Real> Observation<T> {
    pub fn dim(lookahead: usize) -> usize {
        2 * NUM_JOINTS + 1 + NUM_KEYS + (NUM_KEYS + 1) * lookahead + 3 * NUM_TIPS + NUM_JOINTS + 1
    }

    pub fn to_vec(&self) -> Vec<T> {
        let bit = |b: bool| if b { T::one() } else { T::zero() };
        let mut v = Vec::with_capacity(Self::dim(self.goal.len()));
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.qdot);
        v.push(bit(self.pedal));
        v.extend_from_slice(&self.key_positions);
        for g in &self.goal {
            v.extend((0..NUM_KEYS).map(|k| bit(g.is_pressed(k))));
            v.push(bit(g.pedal));
        }
        v.extend(self.demo_tips.iter().flatten());
        v.extend_from_slice(&self.prior);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EpisodeFrame<T: Real> {
    pub t: usize,
    pub q: Vec<T>,
    pub action: Vec<T>,
    pub tips: [[T; 3]; NUM_TIPS],
    pub k_s: Vec<T>,
    pub goal: PianoState,
    pub pressed: PianoState,
    pub reward: RewardBreakdown<T>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EpisodeLog<T: Real> {
    pub frames: Vec<EpisodeFrame<T>>,
}

impl<T: Real> EpisodeLog<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_reward(&self) -> T {
        self.frames.iter().map(|f| f.reward.total).sum()
    }

    pub fn key_press_sum(&self) -> T {
        self.frames.iter().map(|f| f.reward.key_press).sum()
    }

    pub fn mimic_sum(&self) -> T {
        self.frames.iter().map(|f| f.reward.mimic).sum()
    }

    pub fn pressed(&self) -> Vec<PianoState> {
        self.frames.iter().map(|f| f.pressed).collect()
    }

    pub fn goals(&self) -> Vec<PianoState> {
        self.frames.iter().map(|f| f.goal).collect()
    }

    pub fn actions(&self) -> Result<Vec<JointConfig<T>>> {
        self.frames
            .iter()
            .map(|f| JointConfig::from_vec(f.action.clone()))
            .collect()
    }

    pub fn metrics(&self) -> Metrics {
        compute_metrics(&self.pressed(), &self.goals()).expect("log frames pair up")
    }

    /// One JSON object per frame.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            out.push_str(&serde_json::to_string(f).expect("episode frame serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let frames = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| Error::Json {
                    context: "episode log".into(),
                    source,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { frames })
    }
}

/// A song with its retargeted demonstration and IK nominal, frame aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SongEpisode<T: Real> {
    pub id: String,
    pub song: PianoStateTrajectory,
    pub demo: Vec<FingertipFrame<T>>,
    pub nominal: Vec<JointConfig<T>>,
}

impl<T: Real> SongEpisode<T> {
    pub fn new(
        id: impl Into<String>,
        song: PianoStateTrajectory,
        demo: Vec<FingertipFrame<T>>,
        nominal: Vec<JointConfig<T>>,
    ) -> Result<Self> {
        if demo.len() != song.len() || nominal.len() != song.len() {
            return Err(Error::input(format!(
                "song has {} frames, demo {}, nominal {}",
                song.len(),
                demo.len(),
                nominal.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            song,
            demo,
            nominal,
        })
    }

    pub fn len(&self) -> usize {
        self.song.len()
    }

    pub fn is_empty(&self) -> bool {
        self.song.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome<T: Real> {
    pub observation: Observation<T>,
    pub reward: RewardBreakdown<T>,
    pub done: bool,
    pub pressed: PianoState,
}

#[derive(Debug, Clone)]
struct Episode<T: Real> {
    song: PianoStateTrajectory,
    demo: Vec<FingertipFrame<T>>,
    nominal: Vec<JointConfig<T>>,
    state: EnvState<T>,
    initial_clamped: bool,
}

/// One environment instance; owns its state and is used from one thread at a time.
#[derive(Debug, Clone)]
pub struct PianoEnv<T: Real> {
    spec: HandModelSpec<T>,
    geom: KeyGeometry<T>,
    cfg: EnvConfig<T>,
    episode: Option<Episode<T>>,
}

impl<T: Real> PianoEnv<T> {
    pub fn new(spec: HandModelSpec<T>, geom: KeyGeometry<T>, cfg: EnvConfig<T>) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        Ok(Self {
            spec,
            geom,
            cfg,
            episode: None,
        })
    }

    pub fn config(&self) -> &EnvConfig<T> {
        &self.cfg
    }

    pub fn spec(&self) -> &HandModelSpec<T> {
        &self.spec
    }

    pub fn geometry(&self) -> &KeyGeometry<T> {
        &self.geom
    }

    pub fn state(&self) -> Option<&EnvState<T>> {
        self.episode.as_ref().map(|e| &e.state)
    }

    /// Whether the first nominal frame had to be clamped into the joint limits.
    pub fn initial_clamped(&self) -> bool {
        self.episode.as_ref().is_some_and(|e| e.initial_clamped)
    }

    pub fn song_len(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.song.len())
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_none_or(|e| e.state.t >= e.song.len())
    }

    /// The IK prior for frame `t` of the current episode.
    pub fn nominal(&self, t: usize) -> Option<&JointConfig<T>> {
        self.episode.as_ref().and_then(|e| e.nominal.get(t))
    }

    pub fn reset_episode(&mut self, ep: &SongEpisode<T>) -> Result<Observation<T>> {
        self.reset(&ep.song, &ep.demo, &ep.nominal)
    }

    pub fn reset(
        &mut self,
        song: &PianoStateTrajectory,
        demo: &[FingertipFrame<T>],
        nominal: &[JointConfig<T>],
    ) -> Result<Observation<T>> {
        if demo.len() != song.len() || nominal.len() != song.len() {
            return Err(Error::input(format!(
                "song has {} frames, demo {}, nominal {}",
                song.len(),
                demo.len(),
                nominal.len()
            )));
        }
        let q0 = nominal[0].clamped(&self.spec);
        let initial_clamped = q0.joints() != nominal[0].joints();
        self.episode = Some(Episode {
            song: song.clone(),
            demo: demo.to_vec(),
            nominal: nominal.to_vec(),
            state: EnvState {
                q: q0,
                qdot: vec![T::zero(); NUM_JOINTS],
                key_positions: [T::zero(); NUM_KEYS],
                pedal: false,
                t: 0,
            },
            initial_clamped,
        });
        Ok(self.observe())
    }

    pub fn step(&mut self, action: &JointConfig<T>) -> Result<StepOutcome<T>> {
        let cfg = self.cfg.clone();
        let limits = self.spec.limits();
        let ep = self.episode.as_mut().ok_or(Error::State("step before reset".into()))?;
        let t = ep.state.t;
        if t >= ep.song.len() {
            return Err(Error::State("step after episode end".into()));
        }

        let start = ep.state.q.clone();
        let alpha = T::lit(1.0 / cfg.substep_hz) / cfg.tau_track;
        let target = action.joints();
        for _ in 0..cfg.substeps() {
            for (i, q) in ep.state.q.joints_mut().iter_mut().enumerate() {
                *q = clamp(*q + (target[i] - *q) * alpha, limits[i].0, limits[i].1);
            }
        }
        let dt = cfg.control_dt();
        ep.state.qdot = ep
            .state
            .q
            .joints()
            .iter()
            .zip(start.joints())
            .map(|(&a, &b)| (a - b) / dt)
            .collect();
        ep.state.pedal = action.pedal();
        ep.state.q.as_mut_slice()[NUM_JOINTS] = if ep.state.pedal { T::one() } else { T::zero() };

        let tips = forward_kinematics(&self.spec, &ep.state.q)?;
        ep.state.key_positions = key_depressions(&tips, &self.geom, &cfg);

        let goal = ep.song.frames[t];
        let reward = RewardBreakdown::new(
            key_press_reward(&ep.state.key_positions, &goal, &cfg),
            mimic_reward(&tips, &ep.demo[t].tips, &cfg),
            &cfg,
        );
        let pressed = pressed_state(&ep.state.key_positions, ep.state.pedal, &cfg);
        ep.state.t += 1;
        let done = ep.state.t >= ep.song.len();
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done,
            pressed,
        })
    }

    /// Fingertip positions at the current joint configuration.
    pub fn tips(&self) -> Result<[[T; 3]; NUM_TIPS]> {
        let ep = self.episode.as_ref().ok_or(Error::State("no episode".into()))?;
        forward_kinematics(&self.spec, &ep.state.q)
    }

    fn observe(&self) -> Observation<T> {
        let ep = self.episode.as_ref().expect("observe inside an episode");
        let s = &ep.state;
        let last = ep.song.len() - 1;
        let cur = s.t.min(last);
        Observation {
            t: s.t,
            q: s.q.joints().to_vec(),
            qdot: s.qdot.clone(),
            pedal: s.pedal,
            key_positions: s.key_positions.to_vec(),
            goal: (s.t..s.t + self.cfg.lookahead)
                .map(|i| ep.song.frames.get(i).copied().unwrap_or_default())
                .collect(),
            demo_tips: ep.demo[cur].tips,
            prior: ep.nominal[cur].as_slice().to_vec(),
        }
    }
}

/// Normalised depression of every key for the given fingertip positions.
pub fn key_depressions<T: Real>(
    tips: &[[T; 3]; NUM_TIPS],
    geom: &KeyGeometry<T>,
    cfg: &EnvConfig<T>,
) -> [T; NUM_KEYS] {
    let mut ks = [T::zero(); NUM_KEYS];
    for p in tips {
        if let Some(k) = geom.key_under(p[0], p[1]) {
            if k < NUM_KEYS {
                let pen = cfg.fingertip_radius - p[2];
                let d = clamp(pen / cfg.key_travel, T::zero(), T::one());
                if d > ks[k] {
                    ks[k] = d;
                }
            }
        }
    }
    ks
}

pub fn pressed_state<T: Real>(key_positions: &[T; NUM_KEYS], pedal: bool, cfg: &EnvConfig<T>) -> PianoState {
    let mut s = PianoState::from_keys((0..NUM_KEYS).filter(|&k| key_positions[k] >= cfg.press_threshold));
    s.pedal = pedal;
    s
}

/// Resets `env` and plays `actions` open loop, logging every frame.
pub fn play_actions<T: Real>(
    env: &mut PianoEnv<T>,
    song: &PianoStateTrajectory,
    demo: &[FingertipFrame<T>],
    nominal: &[JointConfig<T>],
    actions: &[JointConfig<T>],
) -> Result<EpisodeLog<T>> {
    if actions.len() != song.len() {
        return Err(Error::input(format!(
            "{} actions for a song of {} frames",
            actions.len(),
            song.len()
        )));
    }
    env.reset(song, demo, nominal)?;
    let mut log = EpisodeLog::default();
    for (t, a) in actions.iter().enumerate() {
        log.frames.push(step_logged(env, a, t)?);
    }
    Ok(log)
}

/// Steps once and builds the log entry for frame `t`.
pub fn step_logged<T: Real>(env: &mut PianoEnv<T>, action: &JointConfig<T>, t: usize) -> Result<EpisodeFrame<T>> {
    let goal = env
        .episode
        .as_ref()
        .and_then(|e| e.song.frames.get(t).copied())
        .unwrap_or_default();
    let out = env.step(action)?;
    let state = env.state().expect("episode running");
    Ok(EpisodeFrame {
        t,
        q: state.q.as_slice().to_vec(),
        action: action.as_slice().to_vec(),
        tips: env.tips()?,
        k_s: state.key_positions.to_vec(),
        goal,
        pressed: out.pressed,
        reward: out.reward,
    })
}

#[cfg(test)]
mod tests;
