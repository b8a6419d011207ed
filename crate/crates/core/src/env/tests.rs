use proptest::prelude::*;

use super::*;
use crate::ik::{settle, IkParams};
use crate::kinematics::JOINTS_PER_HAND;

fn white_keys(g: &KeyGeometry<f64>) -> Vec<usize> {
    (0..NUM_KEYS).filter(|&k| !g.key(k).black).collect()
}

/// Five-finger positions: left little..thumb over whites 17..21, right
/// thumb..little over whites 30..34. `low` lists tips placed at `z`.
fn layout(g: &KeyGeometry<f64>, low: &[usize], z: f64) -> FingertipFrame<f64> {
    let w = white_keys(g);
    let tips = std::array::from_fn(|i| {
        let key = if i < 5 { w[21 - i] } else { w[30 + i - 5] };
        let h = if low.contains(&i) { z } else { 0.02 };
        [0.03, g.key(key).center_y, h]
    });
    FingertipFrame::new(0.0, tips)
}

fn ready() -> JointConfig<f64> {
    let mut q = JointConfig::zeros();
    for hand in 0..2 {
        for f in 0..5 {
            let b = hand * JOINTS_PER_HAND + 3 + 4 * f;
            q.as_mut_slice()[b + 1] = 0.3;
            q.as_mut_slice()[b + 2] = 0.4;
            q.as_mut_slice()[b + 3] = 0.2;
        }
    }
    q
}

fn pose(frame: &FingertipFrame<f64>) -> JointConfig<f64> {
    let spec = HandModelSpec::default();
    let params = IkParams::default();
    let q = settle(&spec, &ready(), frame, &params, 400).unwrap();
    let tips = forward_kinematics(&spec, &q).unwrap();
    for (a, b) in tips.iter().zip(&frame.tips) {
        let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        assert!(e < 2e-4, "layout not reached: {e}");
    }
    q
}

fn env() -> PianoEnv<f64> {
    PianoEnv::new(HandModelSpec::default(), KeyGeometry::default(), EnvConfig::default()).unwrap()
}

fn song(frames: Vec<PianoState>) -> PianoStateTrajectory {
    PianoStateTrajectory::new(20.0, frames).unwrap()
}

#[test]
fn reset_is_deterministic_and_keys_up() {
    let g = KeyGeometry::default();
    let f = layout(&g, &[], 0.0);
    let q = pose(&f);
    let s = song(vec![PianoState::empty(); 3]);
    let mut e = env();
    let a = e.reset(&s, &[f; 3], &vec![q.clone(); 3]).unwrap();
    let b = e.reset(&s, &[f; 3], &vec![q.clone(); 3]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.t, 0);
    assert!(a.key_positions.iter().all(|&k| k == 0.0));
    assert_eq!(a.to_vec().len(), Observation::<f64>::dim(10));
    assert!(!e.initial_clamped());
}

#[test]
fn reset_clamps_out_of_limit_nominal() {
    let g = KeyGeometry::default();
    let f = layout(&g, &[], 0.0);
    let mut q = pose(&f);
    q.as_mut_slice()[0] = 5.0;
    let mut e = env();
    e.reset(&song(vec![PianoState::empty()]), &[f], &[q]).unwrap();
    assert!(e.initial_clamped());
    assert!(e.state().unwrap().q.within_limits(e.spec()));
}

#[test]
fn reset_rejects_length_mismatch() {
    let q = ready();
    let f = FingertipFrame::new(0.0, [[0.0; 3]; NUM_TIPS]);
    let r = env().reset(&song(vec![PianoState::empty(); 2]), &[f], &[q.clone(), q]);
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn single_assigned_tip_presses_only_its_key() {
    let g = KeyGeometry::default();
    let w = white_keys(&g);
    let hover = layout(&g, &[], 0.0);
    let press = layout(&g, &[7], 0.0);
    let (qh, qp) = (pose(&hover), pose(&press));
    let key = w[32];
    let goal = PianoState::from_keys([key]);
    let s = song(vec![PianoState::empty(), goal]);
    let mut e = env();
    let log = play_actions(&mut e, &s, &[hover, press], &[qh.clone(), qp.clone()], &[qh, qp]).unwrap();
    assert!(log.frames[0].pressed.is_empty());
    assert_eq!(log.frames[1].pressed, goal);
    // Tip centre at the key top: depression r / travel.
    let ks = 0.0055 / 0.008;
    let got = log.frames[1].k_s[key];
    assert!((got - ks).abs() < 0.02, "{got}");
    let want = 0.5 * tolerance(1.0 - got, 0.01) + 0.5;
    assert!((log.frames[1].reward.key_press - want).abs() < 1e-12);
}

#[test]
fn hovering_presses_nothing() {
    let g = KeyGeometry::default();
    let w = white_keys(&g);
    let hover = layout(&g, &[], 0.0);
    let qh = pose(&hover);
    let goal = PianoState::from_keys([w[31], w[33]]);
    let s = song(vec![goal, PianoState::empty()]);
    let mut e = env();
    let log = play_actions(&mut e, &s, &[hover; 2], &[qh.clone(), qh.clone()], &[qh.clone(), qh]).unwrap();
    assert!(log.frames.iter().all(|f| f.pressed.is_empty()));
    let want = 0.5 * tolerance(2f64.sqrt(), 0.01) + 0.5;
    assert!((log.frames[0].reward.key_press - want).abs() < 1e-12);
    assert_eq!(log.frames[1].reward.key_press, 1.0);
}

#[test]
fn biased_press_does_not_register() {
    let g = KeyGeometry::default();
    let w = white_keys(&g);
    let press = layout(&g, &[7], 0.003);
    let qp = pose(&press);
    let s = song(vec![PianoState::from_keys([w[32]]); 2]);
    let mut e = env();
    let log = play_actions(&mut e, &s, &[press; 2], &[qp.clone(), qp.clone()], &[qp.clone(), qp]).unwrap();
    assert!(log.frames.iter().all(|f| f.pressed.is_empty()));
}

#[test]
fn episode_length_and_step_after_done() {
    let q = ready();
    let f = FingertipFrame::new(0.0, forward_kinematics(&HandModelSpec::default(), &q).unwrap());
    let n = 5;
    let s = song(vec![PianoState::empty(); n]);
    let mut e = env();
    e.reset(&s, &vec![f; n], &vec![q.clone(); n]).unwrap();
    let mut steps = 0;
    loop {
        steps += 1;
        if e.step(&q).unwrap().done {
            break;
        }
    }
    assert_eq!(steps, n);
    assert!(matches!(e.step(&q), Err(Error::State(_))));
}

#[test]
fn faster_tracking_is_never_less_accurate() {
    let spec = HandModelSpec::default();
    let q0 = ready();
    let mut target = q0.clone();
    target.as_mut_slice()[1] = 0.2;
    target.as_mut_slice()[12] = 1.0;
    let f = FingertipFrame::new(0.0, forward_kinematics(&spec, &q0).unwrap());
    let s = song(vec![PianoState::empty(); 3]);
    let mut prev = f64::INFINITY;
    for tau in [0.04, 0.02, 0.01, 0.005] {
        let cfg = EnvConfig { tau_track: tau, ..EnvConfig::default() };
        let mut e = PianoEnv::new(spec.clone(), KeyGeometry::default(), cfg).unwrap();
        e.reset(&s, &[f; 3], &vec![q0.clone(); 3]).unwrap();
        e.step(&target).unwrap();
        let err = e.state().unwrap().q.joints().iter().zip(target.joints()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= prev, "tau {tau}: {err} > {prev}");
        prev = err;
    }
}

#[test]
fn config_validation() {
    let mut c = EnvConfig::<f64>::default();
    c.substep_hz = 510.0;
    assert!(c.validate().is_err());
    let c = EnvConfig::<f64> { key_weight: 0.5, ..EnvConfig::default() };
    assert!(matches!(c.validate(), Err(Error::Config { .. })));
    let c = EnvConfig::<f64> { tau_track: 0.001, ..EnvConfig::default() };
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&EnvConfig::<f64>::default()).unwrap();
    let back: EnvConfig<f64> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, EnvConfig::default());
}

#[test]
fn log_round_trips_through_json_lines() {
    let g = KeyGeometry::default();
    let hover = layout(&g, &[], 0.0);
    let qh = pose(&hover);
    let s = song(vec![PianoState::from_keys([3]); 2]);
    let mut e = env();
    let log = play_actions(&mut e, &s, &[hover; 2], &[qh.clone(), qh.clone()], &[qh.clone(), qh]).unwrap();
    let back = EpisodeLog::from_json_lines(&log.to_json_lines()).unwrap();
    assert_eq!(back, log);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rewards_stay_in_unit_interval(
        ks in prop::collection::vec(0.0f64..=1.0, NUM_KEYS),
        keys in prop::collection::btree_set(0usize..NUM_KEYS, 0..6),
        off in prop::collection::vec(-0.1f64..0.1, 3 * NUM_TIPS),
    ) {
        let cfg = EnvConfig::default();
        let ks: [f64; NUM_KEYS] = ks.try_into().unwrap();
        let kp = key_press_reward(&ks, &PianoState::from_keys(keys), &cfg);
        let a = [[0.0; 3]; NUM_TIPS];
        let b: [[f64; 3]; NUM_TIPS] = std::array::from_fn(|i| [off[3 * i], off[3 * i + 1], off[3 * i + 2]]);
        let m = mimic_reward(&a, &b, &cfg);
        let r = RewardBreakdown::new(kp, m, &cfg);
        for v in [kp, m, r.total] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
