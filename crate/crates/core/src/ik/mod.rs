//! Weighted multi-task differential IK on fingertip positions.
//!
//! Each control step solves
//!
//! ```text
//! min_q̇  Σ_i w_i ‖J_i q̇ − K v_i‖²  +  μ ‖q̇‖²
//! s.t.   limit_gain · (q_lo − q) / dt  ≤  q̇  ≤  limit_gain · (q_hi − q) / dt
//! ```
//!
//! with `v_i = (target_i − FK_i(q)) / dt` and `μ = damping + lm_damping · max_i ‖e_i‖²`,
//! then integrates `q ← clamp(q + q̇ dt)`.

mod qp;

use serde::{Deserialize, Serialize};

pub use qp::{BoxQp, QpSolution};

use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, jacobian, norm3, sub3, HandModelSpec, JointConfig, NUM_JOINTS,
};
use crate::linalg::Matrix;
use crate::real::{clamp, Real};
use crate::retarget::{FingertipFrame, NUM_TIPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default)]
pub struct IkParams<T: Real> {
    pub gain: T,
    pub limit_gain: T,
    pub damping: T,
    pub lm_damping: T,
    pub dt: T,
    /// Active-set iteration cap of the QP.
    pub max_inner_iters: usize,
    /// Differential steps taken against each frame's targets.
    pub iters_per_frame: usize,
    /// Per-finger task weights; equal by default.
    pub weights: [T; NUM_TIPS],
}

impl<T: Real> Default for IkParams<T> {
    fn default() -> Self {
        Self {
            gain: T::one(),
            limit_gain: T::lit(0.05),
            damping: T::lit(1e-6),
            lm_damping: T::lit(1e-6),
            dt: T::lit(0.05),
            max_inner_iters: 500,
            iters_per_frame: 1,
            weights: [T::one(); NUM_TIPS],
        }
    }
}

impl<T: Real> IkParams<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("ik.{field}"),
                message: message.into(),
            })
        };
        if !(self.damping >= T::zero()) || !(self.lm_damping >= T::zero()) {
            return bad("damping", "must be non-negative");
        }
        if !(self.dt > T::zero()) {
            return bad("dt", "must be positive");
        }
        if self.weights.iter().any(|w| !(*w > T::zero())) {
            return bad("weights", "must be positive");
        }
        if self.max_inner_iters == 0 || self.iters_per_frame == 0 {
            return bad("max_inner_iters", "iteration counts must be at least 1");
        }
        Ok(())
    }
}

/// Desired position of one fingertip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct IkTask<T: Real> {
    pub finger_id: usize,
    pub target: [T; 3],
}

/// One task per fingertip from a frame of targets.
pub fn tasks_for_frame<T: Real>(frame: &FingertipFrame<T>) -> Vec<IkTask<T>> {
    frame
        .tips
        .iter()
        .enumerate()
        .map(|(finger_id, &target)| IkTask { finger_id, target })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IkStep<T: Real> {
    pub qdot: Vec<T>,
    pub q_next: JointConfig<T>,
    pub kkt_residual: T,
    /// Largest fingertip error before the step.
    pub task_error: T,
    pub qp_iterations: usize,
}

pub fn build_qp<T: Real>(
    spec: &HandModelSpec<T>,
    q: &JointConfig<T>,
    tasks: &[IkTask<T>],
    params: &IkParams<T>,
) -> Result<(BoxQp<T>, T)> {
    params.validate()?;
    let mut seen = [false; NUM_TIPS];
    for t in tasks {
        if t.finger_id >= NUM_TIPS {
            return Err(Error::Index {
                index: t.finger_id,
                len: NUM_TIPS,
            });
        }
        if std::mem::replace(&mut seen[t.finger_id], true) {
            return Err(Error::input(format!("finger {} has more than one task", t.finger_id)));
        }
        if t.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite target for finger {}", t.finger_id)));
        }
    }

    let tips = forward_kinematics(spec, q)?;
    let n = NUM_JOINTS;
    let mut h = Matrix::zeros(n, n);
    let mut c = vec![T::zero(); n];
    let mut max_err = T::zero();
    let mut max_err_sq = T::zero();
    for t in tasks {
        let j = jacobian(spec, q, t.finger_id)?;
        let e = sub3(t.target, tips[t.finger_id]);
        let en = norm3(e);
        max_err = max_err.max(en);
        max_err_sq = max_err_sq.max(en * en);
        let w = params.weights[t.finger_id];
        let v: [T; 3] = std::array::from_fn(|r| params.gain * e[r] / params.dt);
        let cols: Vec<usize> = (0..n).filter(|&col| (0..3).any(|r| j[(r, col)] != T::zero())).collect();
        for &a in &cols {
            for &b in &cols {
                h[(a, b)] += w * (0..3).map(|r| j[(r, a)] * j[(r, b)]).sum::<T>();
            }
            c[a] += w * (0..3).map(|r| j[(r, a)] * v[r]).sum::<T>();
        }
    }
    let mu = params.damping + params.lm_damping * max_err_sq;
    for i in 0..n {
        h[(i, i)] += mu;
    }
    let limits = spec.limits();
    let qv = q.joints();
    let lower = (0..n)
        .map(|i| (params.limit_gain * (limits[i].0 - qv[i]) / params.dt).min(T::zero()))
        .collect();
    let upper = (0..n)
        .map(|i| (params.limit_gain * (limits[i].1 - qv[i]) / params.dt).max(T::zero()))
        .collect();
    Ok((
        BoxQp {
            hessian: h,
            linear: c,
            lower,
            upper,
        },
        max_err,
    ))
}

/// One velocity-level IK step.
pub fn ik_step<T: Real>(
    spec: &HandModelSpec<T>,
    q: &JointConfig<T>,
    tasks: &[IkTask<T>],
    params: &IkParams<T>,
) -> Result<IkStep<T>> {
    let (qp, task_error) = build_qp(spec, q, tasks, params)?;
    let sol = qp.solve(params.max_inner_iters)?;
    let limits = spec.limits();
    let mut q_next = q.clone();
    for (i, v) in q_next.joints_mut().iter_mut().enumerate() {
        *v = clamp(*v + sol.x[i] * params.dt, limits[i].0, limits[i].1);
    }
    Ok(IkStep {
        qdot: sol.x,
        q_next,
        kkt_residual: sol.kkt_residual,
        task_error,
        qp_iterations: sol.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkFrameLog {
    pub frame: usize,
    pub kkt_residual: f64,
    pub max_tip_error: f64,
    pub mean_tip_error: f64,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct IkTrajectory<T: Real> {
    pub q: Vec<JointConfig<T>>,
    pub log: Vec<IkFrameLog>,
}

/// Repeats `ik_step` on fixed targets.
pub fn settle<T: Real>(
    spec: &HandModelSpec<T>,
    q0: &JointConfig<T>,
    frame: &FingertipFrame<T>,
    params: &IkParams<T>,
    iterations: usize,
) -> Result<JointConfig<T>> {
    let tasks = tasks_for_frame(frame);
    let mut q = q0.clone();
    for _ in 0..iterations {
        q = ik_step(spec, &q, &tasks, params)?.q_next;
    }
    Ok(q)
}

/// Tracks a fingertip trajectory frame by frame, warm-starting each frame from
/// the previous solution. The pedal entry of `q0` is carried through.
pub fn track_trajectory<T: Real>(
    spec: &HandModelSpec<T>,
    q0: &JointConfig<T>,
    frames: &[FingertipFrame<T>],
    params: &IkParams<T>,
) -> Result<IkTrajectory<T>> {
    if !q0.within_limits(spec) {
        return Err(Error::input("initial configuration outside joint limits"));
    }
    let mut q = q0.clone();
    let mut out = Vec::with_capacity(frames.len());
    let mut log = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let tasks = tasks_for_frame(frame);
        let mut kkt = T::zero();
        let mut qp_iterations = 0;
        for _ in 0..params.iters_per_frame {
            let step = ik_step(spec, &q, &tasks, params).map_err(|e| e.at_frame(i))?;
            kkt = kkt.max(step.kkt_residual);
            qp_iterations += step.qp_iterations;
            q = step.q_next;
        }
        let tips = forward_kinematics(spec, &q)?;
        let errs: Vec<f64> = tips
            .iter()
            .zip(&frame.tips)
            .map(|(a, b)| norm3(sub3(*a, *b)).as_f64())
            .collect();
        log.push(IkFrameLog {
            frame: i,
            kkt_residual: kkt.as_f64(),
            max_tip_error: errs.iter().copied().fold(0.0, f64::max),
            mean_tip_error: errs.iter().sum::<f64>() / errs.len() as f64,
            qp_iterations,
        });
        out.push(q.clone());
    }
    Ok(IkTrajectory { q: out, log })
}

/// `t, j0..j45, pedal` rows.
pub fn joint_trajectory_to_csv<T: Real>(q: &[JointConfig<T>], rate_hz: f64) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("t");
    for j in 0..NUM_JOINTS {
        let _ = write!(out, ",j{j}");
    }
    out.push_str(",pedal\n");
    for (i, c) in q.iter().enumerate() {
        let _ = write!(out, "{}", i as f64 / rate_hz);
        for v in c.as_slice() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn joint_trajectory_from_csv<T: Real>(text: &str) -> Result<Vec<JointConfig<T>>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let vals = line
                .split(',')
                .skip(1)
                .map(|c| {
                    c.trim().parse::<f64>().map(T::lit).map_err(|_| Error::Csv {
                        context: "joint trajectory".into(),
                        line: i + 1,
                        message: format!("bad value {c:?}"),
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            JointConfig::from_vec(vals)
        })
        .collect()
}
