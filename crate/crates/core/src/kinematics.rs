//! Kinematic two-hand model: forearm sliders plus four-joint finger chains.
//!
//! Joint vector layout (47 entries): left hand joints `0..23`, right hand
//! joints `23..46`, sustain pedal at `46`. Within a hand the forearm sliders
//! come first, followed by each finger's joints from thumb to little finger.
//!
//! In the shipped default model every hand has three forearm sliders (x, y, z)
//! and five fingers with an abduction joint (about z) and three flexion joints
//! (about y, positive flexion curls the fingertip downwards). With all joints
//! at zero each finger is straight and horizontal, so its tip sits at
//! `base + knuckle + (l1 + l2 + l3, 0, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::real::{clamp, Real};
use crate::retarget::NUM_TIPS;

pub const JOINTS_PER_HAND: usize = 23;
pub const NUM_JOINTS: usize = 2 * JOINTS_PER_HAND;
/// Joints plus the pedal entry.
pub const ACTION_DIM: usize = NUM_JOINTS + 1;
pub const PEDAL_INDEX: usize = NUM_JOINTS;
pub const FINGERS_PER_HAND: usize = 5;

const DEFAULT_MODEL: &str = include_str!("../data/hand_model.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct JointSpec<T: Real> {
    pub name: String,
    pub kind: JointKind,
    /// Unit axis in the parent frame.
    pub axis: [T; 3],
    /// Joint origin relative to the previous joint (parent frame).
    pub offset: [T; 3],
    pub lower: T,
    pub upper: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FingerSpec<T: Real> {
    pub name: String,
    pub joints: Vec<JointSpec<T>>,
    /// Fingertip relative to the last joint.
    pub tip: [T; 3],
}

impl<T: Real> FingerSpec<T> {
    /// Upper bound on the tip's distance from the first joint origin.
    pub fn reach(&self) -> T {
        self.joints
            .iter()
            .skip(1)
            .map(|j| norm3(j.offset))
            .sum::<T>()
            + norm3(self.tip)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HandSpec<T: Real> {
    pub name: String,
    /// Forearm origin on the piano frame at zero slide.
    pub base: [T; 3],
    /// Prismatic joints with axes in the piano frame.
    pub forearm: Vec<JointSpec<T>>,
    pub fingers: Vec<FingerSpec<T>>,
}

impl<T: Real> HandSpec<T> {
    fn joint_count(&self) -> usize {
        self.forearm.len() + self.fingers.iter().map(|f| f.joints.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HandModelSpec<T: Real> {
    /// Left hand, then right hand.
    pub hands: Vec<HandSpec<T>>,
}

impl<T: Real> Default for HandModelSpec<T> {
    fn default() -> Self {
        Self::from_json(DEFAULT_MODEL).expect("shipped hand model is valid")
    }
}

impl<T: Real> HandModelSpec<T> {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "hand model".into(),
            source,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: String, message: String| Err(Error::Config { field, message });
        if self.hands.len() != 2 {
            return bad("hands".into(), format!("expected 2 hands, got {}", self.hands.len()));
        }
        for hand in &self.hands {
            if hand.joint_count() != JOINTS_PER_HAND {
                return bad(
                    format!("hands.{}", hand.name),
                    format!("expected {JOINTS_PER_HAND} joints, got {}", hand.joint_count()),
                );
            }
            if hand.fingers.len() != FINGERS_PER_HAND {
                return bad(
                    format!("hands.{}.fingers", hand.name),
                    format!("expected {FINGERS_PER_HAND} fingers, got {}", hand.fingers.len()),
                );
            }
            for j in hand.forearm.iter().chain(hand.fingers.iter().flat_map(|f| &f.joints)) {
                if !(j.lower < j.upper) {
                    return bad(format!("joint {}", j.name), "lower limit must be below upper".into());
                }
                let n = norm3(j.axis);
                if (n - T::one()).abs() > T::lit(1e-6) {
                    return bad(format!("joint {}", j.name), "axis must be a unit vector".into());
                }
            }
            if hand.forearm.iter().any(|j| j.kind != JointKind::Prismatic) {
                return bad(format!("hands.{}.forearm", hand.name), "forearm joints must be prismatic".into());
            }
            for f in &hand.fingers {
                if f.joints.is_empty() || !(norm3(f.tip) > T::zero()) {
                    return bad(format!("finger {}", f.name), "segment lengths must be positive".into());
                }
                if f.joints.iter().skip(2).any(|j| !(norm3(j.offset) > T::zero())) {
                    return bad(format!("finger {}", f.name), "segment lengths must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// `(lower, upper)` for each of the 46 joints.
    pub fn limits(&self) -> Vec<(T, T)> {
        self.hands
            .iter()
            .flat_map(|h| h.forearm.iter().chain(h.fingers.iter().flat_map(|f| &f.joints)))
            .map(|j| (j.lower, j.upper))
            .collect()
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.hands
            .iter()
            .flat_map(|h| h.forearm.iter().chain(h.fingers.iter().flat_map(|f| &f.joints)))
            .map(|j| j.name.clone())
            .collect()
    }

    /// Hand index and the position of the finger's first joint inside the hand block.
    fn finger_block(&self, finger_id: usize) -> (usize, usize) {
        let hand = finger_id / FINGERS_PER_HAND;
        let local = finger_id % FINGERS_PER_HAND;
        let h = &self.hands[hand];
        let start = h.forearm.len() + h.fingers[..local].iter().map(|f| f.joints.len()).sum::<usize>();
        (hand, start)
    }

    /// Indices in the 47-vector of the joints that move fingertip `finger_id`.
    pub fn chain_indices(&self, finger_id: usize) -> Vec<usize> {
        let (hand, start) = self.finger_block(finger_id);
        let off = hand * JOINTS_PER_HAND;
        let h = &self.hands[hand];
        let n = h.fingers[finger_id % FINGERS_PER_HAND].joints.len();
        (0..h.forearm.len())
            .chain(start..start + n)
            .map(|i| off + i)
            .collect()
    }

    pub fn finger(&self, finger_id: usize) -> &FingerSpec<T> {
        &self.hands[finger_id / FINGERS_PER_HAND].fingers[finger_id % FINGERS_PER_HAND]
    }

    /// Position of the finger's first joint at configuration `q`.
    pub fn knuckle(&self, q: &JointConfig<T>, finger_id: usize) -> [T; 3] {
        self.chain(q, finger_id).origins[0]
    }

    fn chain(&self, q: &JointConfig<T>, finger_id: usize) -> ChainEval<T> {
        let (hand, start) = self.finger_block(finger_id);
        let off = hand * JOINTS_PER_HAND;
        let h = &self.hands[hand];
        let qv = q.as_slice();

        let mut p = h.base;
        for (i, j) in h.forearm.iter().enumerate() {
            p = add3(p, scale3(j.axis, qv[off + i]));
        }
        let finger = &h.fingers[finger_id % FINGERS_PER_HAND];
        let mut r = IDENTITY3::<T>();
        let mut origins = Vec::with_capacity(finger.joints.len());
        let mut axes = Vec::with_capacity(finger.joints.len());
        for (i, j) in finger.joints.iter().enumerate() {
            p = add3(p, mat_vec3(&r, j.offset));
            let qi = qv[off + start + i];
            let axis_world = mat_vec3(&r, j.axis);
            origins.push(p);
            axes.push((j.kind, axis_world));
            match j.kind {
                JointKind::Revolute => r = mat_mul3(&r, &rotation(j.axis, qi)),
                JointKind::Prismatic => p = add3(p, scale3(axis_world, qi)),
            }
        }
        let tip = add3(p, mat_vec3(&r, finger.tip));
        ChainEval { origins, axes, tip }
    }
}

struct ChainEval<T> {
    origins: Vec<[T; 3]>,
    axes: Vec<(JointKind, [T; 3])>,
    tip: [T; 3],
}

/// 47-entry joint/action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", transparent)]
pub struct JointConfig<T: Real>(Vec<T>);

impl<T: Real> JointConfig<T> {
    pub fn zeros() -> Self {
        Self(vec![T::zero(); ACTION_DIM])
    }

    pub fn from_vec(q: Vec<T>) -> Result<Self> {
        if q.len() != ACTION_DIM {
            return Err(Error::Arity {
                expected: ACTION_DIM,
                got: q.len(),
            });
        }
        Ok(Self(q))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn joints(&self) -> &[T] {
        &self.0[..NUM_JOINTS]
    }

    pub fn joints_mut(&mut self) -> &mut [T] {
        &mut self.0[..NUM_JOINTS]
    }

    pub fn pedal(&self) -> bool {
        self.0[PEDAL_INDEX] >= T::lit(0.5)
    }

    /// Clamps joints into their limits and thresholds the pedal entry to {0, 1}.
    pub fn clamped(&self, spec: &HandModelSpec<T>) -> Self {
        let mut q = self.clone();
        for (v, (lo, hi)) in q.0.iter_mut().zip(spec.limits()) {
            *v = clamp(*v, lo, hi);
        }
        q.0[PEDAL_INDEX] = if self.pedal() { T::one() } else { T::zero() };
        q
    }

    pub fn within_limits(&self, spec: &HandModelSpec<T>) -> bool {
        self.0
            .iter()
            .zip(spec.limits())
            .all(|(&v, (lo, hi))| v >= lo && v <= hi)
    }
}

fn check_dim<T: Real>(q: &JointConfig<T>) -> Result<()> {
    if q.0.len() != ACTION_DIM {
        return Err(Error::Arity {
            expected: ACTION_DIM,
            got: q.0.len(),
        });
    }
    Ok(())
}

/// Fingertip of one finger.
pub fn fingertip<T: Real>(spec: &HandModelSpec<T>, q: &JointConfig<T>, finger_id: usize) -> Result<[T; 3]> {
    check_dim(q)?;
    if finger_id >= NUM_TIPS {
        return Err(Error::Index {
            index: finger_id,
            len: NUM_TIPS,
        });
    }
    Ok(spec.chain(q, finger_id).tip)
}

/// All ten fingertips, left thumb→pinky then right thumb→pinky.
pub fn forward_kinematics<T: Real>(spec: &HandModelSpec<T>, q: &JointConfig<T>) -> Result<[[T; 3]; NUM_TIPS]> {
    check_dim(q)?;
    Ok(std::array::from_fn(|f| spec.chain(q, f).tip))
}

/// Positional Jacobian (3×47) of fingertip `finger_id`.
pub fn jacobian<T: Real>(spec: &HandModelSpec<T>, q: &JointConfig<T>, finger_id: usize) -> Result<Matrix<T>> {
    check_dim(q)?;
    if finger_id >= NUM_TIPS {
        return Err(Error::Index {
            index: finger_id,
            len: NUM_TIPS,
        });
    }
    let ch = spec.chain(q, finger_id);
    let idx = spec.chain_indices(finger_id);
    let hand = &spec.hands[finger_id / FINGERS_PER_HAND];
    let mut j = Matrix::zeros(3, ACTION_DIM);
    for (i, slide) in hand.forearm.iter().enumerate() {
        for r in 0..3 {
            j[(r, idx[i])] = slide.axis[r];
        }
    }
    for (k, ((kind, axis), origin)) in ch.axes.iter().zip(&ch.origins).enumerate() {
        let col = match kind {
            JointKind::Revolute => cross3(*axis, sub3(ch.tip, *origin)),
            JointKind::Prismatic => *axis,
        };
        for r in 0..3 {
            j[(r, idx[hand.forearm.len() + k])] = col[r];
        }
    }
    Ok(j)
}

#[allow(non_snake_case)]
fn IDENTITY3<T: Real>() -> [[T; 3]; 3] {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

/// Rodrigues rotation about a unit axis.
fn rotation<T: Real>(a: [T; 3], angle: T) -> [[T; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    let [x, y, z] = a;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn mat_mul3<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c]))
}

fn mat_vec3<T: Real>(a: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    std::array::from_fn(|r| a[r][0] * v[0] + a[r][1] * v[1] + a[r][2] * v[2])
}

#[inline]
pub(crate) fn add3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn scale3<T: Real>(a: [T; 3], s: T) -> [T; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn cross3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm3<T: Real>(a: [T; 3]) -> T {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
