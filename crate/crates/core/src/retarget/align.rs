use serde::{Deserialize, Serialize};

use super::fingertips::{FingertipFrame, NUM_TIPS};
use super::keys::KeyGeometry;
use crate::real::Real;
use crate::score::{PianoState, PianoStateTrajectory};

/// Search range, in key indices on each side, when no fingertip is on a goal key.
pub const NEIGHBOR_KEYS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnservedKey {
    pub frame: usize,
    pub key: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub frames: usize,
    pub served: usize,
    pub unserved: Vec<UnservedKey>,
}

/// Snaps fingertips onto the goal keys of one frame.
///
/// First every goal key takes an unassigned tip lying inside its y-interval.
/// Keys still unserved then repeatedly claim the nearest unassigned tip within
/// `NEIGHBOR_KEYS` keys on either side; when two keys claim one tip the nearer
/// key wins, ties going to the lower key index. Returns the unserved keys.
pub fn align_frame<T: Real>(
    frame: &mut FingertipFrame<T>,
    goal: &PianoState,
    geom: &KeyGeometry<T>,
) -> Vec<usize> {
    frame.press = [None; NUM_TIPS];
    let mut pending: Vec<usize> = goal.pressed_keys().filter(|&k| k < geom.len()).collect();

    // Direct hits.
    let mut claims: Vec<(T, usize, usize)> = Vec::new();
    for &k in &pending {
        let key = geom.key(k);
        for (tip, p) in frame.tips.iter().enumerate() {
            if key.contains_y(p[1]) {
                claims.push(((p[1] - key.center_y).abs(), k, tip));
            }
        }
    }
    resolve(frame, geom, &mut pending, claims);

    // Neighbourhood search until no unserved key can claim a free tip.
    loop {
        let mut claims = Vec::new();
        for &k in &pending {
            let key = geom.key(k);
            let (lo, hi) = geom.neighborhood_y(k, NEIGHBOR_KEYS);
            let nearest = frame
                .tips
                .iter()
                .enumerate()
                .filter(|(tip, p)| frame.press[*tip].is_none() && p[1] >= lo && p[1] <= hi)
                .map(|(tip, p)| ((p[1] - key.center_y).abs(), tip))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            if let Some((d, tip)) = nearest {
                claims.push((d, k, tip));
            }
        }
        if claims.is_empty() {
            break;
        }
        resolve(frame, geom, &mut pending, claims);
    }
    pending
}

fn resolve<T: Real>(
    frame: &mut FingertipFrame<T>,
    geom: &KeyGeometry<T>,
    pending: &mut Vec<usize>,
    mut claims: Vec<(T, usize, usize)>,
) {
    claims.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    for (_, k, tip) in claims {
        if frame.press[tip].is_some() || !pending.contains(&k) {
            continue;
        }
        frame.press[tip] = Some(k);
        frame.tips[tip][1] = geom.key(k).center_y;
        pending.retain(|&p| p != k);
    }
}

/// Aligns every frame against the goal trajectory. Frames past the end of the
/// trajectory are aligned against an empty goal.
pub fn align_fingertips<T: Real>(
    frames: &[FingertipFrame<T>],
    traj: &PianoStateTrajectory,
    geom: &KeyGeometry<T>,
) -> (Vec<FingertipFrame<T>>, AlignmentReport) {
    let mut report = AlignmentReport {
        frames: frames.len(),
        ..Default::default()
    };
    let out = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut f = *f;
            let goal = traj.frames.get(i).copied().unwrap_or_default();
            let unserved = align_frame(&mut f, &goal, geom);
            report.served += f.press.iter().filter(|p| p.is_some()).count();
            report
                .unserved
                .extend(unserved.into_iter().map(|key| UnservedKey { frame: i, key }));
            f
        })
        .collect();
    (out, report)
}

/// Pressing tips go to `z = 0`, all others hover at `2 * h_key`.
pub fn assign_z<T: Real>(frames: &[FingertipFrame<T>], geom: &KeyGeometry<T>) -> Vec<FingertipFrame<T>> {
    let hover = T::lit(2.0) * geom.nominal_height();
    frames
        .iter()
        .map(|f| {
            let mut f = *f;
            for (tip, p) in f.tips.iter_mut().enumerate() {
                p[2] = if f.press[tip].is_some() { T::zero() } else { hover };
            }
            f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retarget::KeyLayout;
    use proptest::prelude::*;

    fn far_frame() -> FingertipFrame<f64> {
        // All tips parked well outside the keyboard's y range.
        FingertipFrame::new(0.0, std::array::from_fn(|i| [0.03, 5.0 + i as f64, 0.0]))
    }

    fn white_keys(g: &KeyGeometry<f64>) -> Vec<usize> {
        (0..88).filter(|&k| !g.key(k).black).collect()
    }

    #[test]
    fn tip_inside_key_snaps_to_centre() {
        let g = KeyGeometry::default();
        let k = 39;
        let mut f = far_frame();
        f.tips[6][1] = g.key(k).center_y + 0.006;
        let unserved = align_frame(&mut f, &PianoState::from_keys([k]), &g);
        assert!(unserved.is_empty());
        assert_eq!(f.tips[6][1], g.key(k).center_y);
        assert_eq!(f.press[6], Some(k));
        assert_eq!(f.press.iter().filter(|p| p.is_some()).count(), 1);
    }

    #[test]
    fn no_tip_in_range_leaves_key_unserved() {
        let g = KeyGeometry::default();
        let mut f = far_frame();
        let before = f;
        let unserved = align_frame(&mut f, &PianoState::from_keys([40]), &g);
        assert_eq!(unserved, vec![40]);
        assert_eq!(f, before);
    }

    #[test]
    fn shared_tip_goes_to_nearer_key() {
        let g = KeyGeometry::default();
        let w = white_keys(&g);
        // Two white keys two whites apart; a tip on the white key between them,
        // slightly toward the upper one.
        let (a, mid, b) = (w[20], w[21], w[22]);
        let mut f = far_frame();
        f.tips[3][1] = g.key(mid).center_y + 0.003;
        let unserved = align_frame(&mut f, &PianoState::from_keys([a, b]), &g);
        assert_eq!(f.press[3], Some(b));
        assert_eq!(f.tips[3][1], g.key(b).center_y);
        assert_eq!(unserved, vec![a]);
    }

    #[test]
    fn equidistant_tie_goes_to_lower_key() {
        use crate::retarget::Key;
        // Unit-pitch toy keyboard so the two distances are exactly equal.
        let g = KeyGeometry {
            keys: (0..5)
                .map(|i| Key { center_y: i as f64, y_extent: 1.0, x_front: 0.0, x_back: 1.0, height: 0.01, black: false })
                .collect(),
        };
        let mut f = far_frame();
        for p in f.tips.iter_mut() {
            p[1] = 50.0;
        }
        f.tips[0][1] = 2.0;
        let unserved = align_frame(&mut f, &PianoState::from_keys([1, 3]), &g);
        assert_eq!(f.press[0], Some(1));
        assert_eq!(unserved, vec![3]);
    }

    #[test]
    fn z_assignment() {
        let g = KeyGeometry::standard(&KeyLayout { key_height: 0.01, ..Default::default() });
        let mut f = far_frame();
        f.press[2] = Some(10);
        let out = assign_z(&[f, far_frame()], &g);
        assert_eq!(out[0].tips[2][2], 0.0);
        for i in (0..NUM_TIPS).filter(|&i| i != 2) {
            assert!((out[0].tips[i][2] - 0.02).abs() < 1e-15);
        }
        assert!(out[1].tips.iter().all(|p| (p[2] - 0.02).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn alignment_is_idempotent_and_injective(
            ys in prop::collection::vec(-0.7f64..0.7, NUM_TIPS),
            keys in prop::collection::btree_set(0usize..88, 0..8),
        ) {
            let g = KeyGeometry::default();
            let f = FingertipFrame::new(0.0, std::array::from_fn(|i| [0.03, ys[i], 0.0]));
            let traj = PianoStateTrajectory::new(20.0, vec![PianoState::from_keys(keys.iter().copied())]).unwrap();
            let (once, r1) = align_fingertips(&[f], &traj, &g);
            let (twice, r2) = align_fingertips(&once, &traj, &g);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(r1, r2);
            let assigned: Vec<usize> = once[0].press.iter().flatten().copied().collect();
            let mut dedup = assigned.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), assigned.len());
            for (tip, p) in once[0].press.iter().enumerate() {
                if let Some(k) = p {
                    prop_assert_eq!(once[0].tips[tip][1], g.key(*k).center_y);
                }
            }
        }
    }
}
