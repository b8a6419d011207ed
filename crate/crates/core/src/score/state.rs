use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::midi::{NoteEvent, PedalEvent};
use crate::error::{Error, Result};

pub const NUM_KEYS: usize = 88;

/// Sampling instants closer than this to a note boundary count as on it.
const INSTANT_EPS: f64 = 1e-9;

/// Which of the 88 keys are down, plus the sustain pedal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PianoState {
    bits: u128,
    pub pedal: bool,
}

impl PianoState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_keys(keys: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::default();
        for k in keys {
            s.set(k, true);
        }
        s
    }

    pub fn from_flags(flags: &[bool]) -> Result<Self> {
        if flags.len() != NUM_KEYS {
            return Err(Error::Arity {
                expected: NUM_KEYS,
                got: flags.len(),
            });
        }
        Ok(Self::from_keys(
            flags.iter().enumerate().filter(|(_, &f)| f).map(|(k, _)| k),
        ))
    }

    #[inline]
    pub fn is_pressed(&self, key: usize) -> bool {
        key < NUM_KEYS && self.bits >> key & 1 == 1
    }

    /// Panics if `key >= 88`.
    #[inline]
    pub fn set(&mut self, key: usize, on: bool) {
        assert!(key < NUM_KEYS, "key index {key} out of range");
        if on {
            self.bits |= 1 << key;
        } else {
            self.bits &= !(1 << key);
        }
    }

    /// Bit `k` set iff key `k` is down.
    #[inline]
    pub fn key_mask(&self) -> u128 {
        self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn pressed_keys(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_KEYS).filter(move |&k| self.is_pressed(k))
    }

    /// The 88 key flags as `0.0`/`1.0`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..NUM_KEYS)
            .map(|k| if self.is_pressed(k) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn key_bits_string(&self) -> String {
        (0..NUM_KEYS)
            .map(|k| if self.is_pressed(k) { '1' } else { '0' })
            .collect()
    }

    pub fn parse_key_bits(s: &str) -> Result<Self> {
        if s.len() != NUM_KEYS {
            return Err(Error::Arity {
                expected: NUM_KEYS,
                got: s.len(),
            });
        }
        let mut st = Self::default();
        for (k, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => st.set(k, true),
                _ => return Err(Error::input(format!("invalid key flag {c:?}"))),
            }
        }
        Ok(st)
    }
}

#[derive(Serialize, Deserialize)]
struct PianoStateRepr {
    keys: String,
    pedal: bool,
}

impl Serialize for PianoState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PianoStateRepr {
            keys: self.key_bits_string(),
            pedal: self.pedal,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PianoState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PianoStateRepr::deserialize(d)?;
        let mut st = PianoState::parse_key_bits(&r.keys).map_err(serde::de::Error::custom)?;
        st.pedal = r.pedal;
        Ok(st)
    }
}

/// Piano states sampled uniformly at `rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct PianoStateTrajectory {
    pub rate_hz: f64,
    pub frames: Vec<PianoState>,
}

impl PianoStateTrajectory {
    pub fn new(rate_hz: f64, frames: Vec<PianoState>) -> Result<Self> {
        if !(rate_hz > 0.0) {
            return Err(Error::input(format!("rate_hz must be positive, got {rate_hz}")));
        }
        if frames.is_empty() {
            return Err(Error::input("trajectory must have at least one frame"));
        }
        Ok(Self { rate_hz, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 / self.rate_hz
    }

    /// One row per frame: `t, k0..k87, pedal`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for k in 0..NUM_KEYS {
            let _ = write!(out, ",k{k}");
        }
        out.push_str(",pedal\n");
        for (i, f) in self.frames.iter().enumerate() {
            let _ = write!(out, "{}", self.time(i));
            for k in 0..NUM_KEYS {
                out.push(',');
                out.push(if f.is_pressed(k) { '1' } else { '0' });
            }
            out.push(',');
            out.push(if f.pedal { '1' } else { '0' });
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut frames = Vec::new();
        let mut times = Vec::new();
        for (line_no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            let bad = |message: String| Error::Csv {
                context: "piano-state trajectory".into(),
                line: line_no + 1,
                message,
            };
            if cells.len() != NUM_KEYS + 2 {
                return Err(bad(format!("expected {} columns, got {}", NUM_KEYS + 2, cells.len())));
            }
            let t: f64 = cells[0].trim().parse().map_err(|_| bad(format!("bad time {:?}", cells[0])))?;
            let mut st = PianoState::default();
            for (k, c) in cells[1..=NUM_KEYS].iter().enumerate() {
                match c.trim() {
                    "0" => {}
                    "1" => st.set(k, true),
                    other => return Err(bad(format!("non-binary key flag {other:?}"))),
                }
            }
            st.pedal = match cells[NUM_KEYS + 1].trim() {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("non-binary pedal flag {other:?}"))),
            };
            times.push(t);
            frames.push(st);
        }
        let rate = if times.len() >= 2 {
            1.0 / (times[1] - times[0])
        } else {
            crate::DEFAULT_CONTROL_HZ
        };
        Self::new(rate, frames)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TrajectoryRepr::from(self)).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: TrajectoryRepr = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "piano-state trajectory".into(),
            source,
        })?;
        r.try_into()
    }

    /// The key-flag grid as rows of frames.
    pub fn pressed_grid(&self) -> Vec<[bool; NUM_KEYS]> {
        self.frames
            .iter()
            .map(|f| std::array::from_fn(|k| f.is_pressed(k)))
            .collect()
    }
}

/// Compact JSON layout: one 88-char bit string per frame and one pedal bit string.
#[derive(Serialize, Deserialize)]
struct TrajectoryRepr {
    rate_hz: f64,
    keys: Vec<String>,
    pedal: String,
}

impl From<&PianoStateTrajectory> for TrajectoryRepr {
    fn from(t: &PianoStateTrajectory) -> Self {
        Self {
            rate_hz: t.rate_hz,
            keys: t.frames.iter().map(PianoState::key_bits_string).collect(),
            pedal: t.frames.iter().map(|f| if f.pedal { '1' } else { '0' }).collect(),
        }
    }
}

impl TryFrom<TrajectoryRepr> for PianoStateTrajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRepr) -> Result<Self> {
        if r.pedal.len() != r.keys.len() {
            return Err(Error::Arity {
                expected: r.keys.len(),
                got: r.pedal.len(),
            });
        }
        let frames = r
            .keys
            .iter()
            .zip(r.pedal.chars())
            .map(|(k, p)| {
                let mut st = PianoState::parse_key_bits(k)?;
                st.pedal = p == '1';
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(r.rate_hz, frames)
    }
}

impl Serialize for PianoStateTrajectory {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TrajectoryRepr::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PianoStateTrajectory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        TrajectoryRepr::deserialize(d)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}

/// Samples note and pedal events at `rate_hz` with one trailing empty frame.
pub fn discretize(notes: &[NoteEvent], pedal: &[PedalEvent], rate_hz: f64) -> Result<PianoStateTrajectory> {
    discretize_with_tail(notes, pedal, rate_hz, 1)
}

/// Samples events at the frame start instants `i / rate_hz`.
///
/// A key is set in frame `i` iff some note satisfies `on <= i/rate < off`.
/// The trajectory covers every instant before the last note-off, followed by
/// `tail` extra frames (at least one frame overall).
pub fn discretize_with_tail(
    notes: &[NoteEvent],
    pedal: &[PedalEvent],
    rate_hz: f64,
    tail: usize,
) -> Result<PianoStateTrajectory> {
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(Error::input(format!("rate_hz must be positive, got {rate_hz}")));
    }
    let end = notes
        .iter()
        .map(|n| n.off_time)
        .chain(pedal.iter().map(|p| p.time))
        .fold(0.0f64, f64::max);
    let body = (end * rate_hz - INSTANT_EPS).ceil().max(0.0) as usize;
    let len = (body + tail).max(1);

    let mut frames = vec![PianoState::default(); len];
    for n in notes {
        let first = ((n.on_time * rate_hz) - INSTANT_EPS).ceil().max(0.0) as usize;
        for (i, frame) in frames.iter_mut().enumerate().skip(first) {
            let t = i as f64 / rate_hz;
            if t + INSTANT_EPS < n.on_time {
                continue;
            }
            if t + INSTANT_EPS >= n.off_time {
                break;
            }
            frame.set(n.key_index, true);
        }
    }
    let mut sorted: Vec<PedalEvent> = pedal.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut next = 0;
    let mut down = false;
    for (i, frame) in frames.iter_mut().enumerate() {
        let t = i as f64 / rate_hz;
        while next < sorted.len() && sorted[next].time <= t + INSTANT_EPS {
            down = sorted[next].on;
            next += 1;
        }
        frame.pedal = down;
    }
    PianoStateTrajectory::new(rate_hz, frames)
}

/// The next `lookahead` frames after `t`, zero-padded past the end.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalWindow {
    pub states: Vec<PianoState>,
}

impl GoalWindow {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub fn goal_window(traj: &PianoStateTrajectory, t: usize, lookahead: usize) -> Result<GoalWindow> {
    if t >= traj.len() {
        return Err(Error::Index {
            index: t,
            len: traj.len(),
        });
    }
    if lookahead == 0 {
        return Err(Error::input("lookahead must be at least 1"));
    }
    let states = (t + 1..=t + lookahead)
        .map(|i| traj.frames.get(i).copied().unwrap_or_default())
        .collect();
    Ok(GoalWindow { states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key60(on: f64, off: f64) -> NoteEvent {
        NoteEvent::new(60, on, off)
    }

    #[test]
    fn tenth_of_a_second_at_20hz() {
        let tr = discretize(&[key60(0.0, 0.1)], &[], 20.0).unwrap();
        assert!(tr.frames[0].is_pressed(60));
        assert!(tr.frames[1].is_pressed(60));
        assert!(!tr.frames[2].is_pressed(60));
    }

    #[test]
    fn no_events_all_zero() {
        let tr = discretize_with_tail(&[], &[], 20.0, 5).unwrap();
        assert_eq!(tr.len(), 5);
        assert!(tr.frames.iter().all(|f| f.is_empty() && !f.pedal));
        // Never empty, even with no tail.
        assert_eq!(discretize_with_tail(&[], &[], 20.0, 0).unwrap().len(), 1);
    }

    #[test]
    fn boundary_instants() {
        // Instants 0.00 0.05 0.10 0.15 0.20; note on [0.07, 0.15) covers only 0.10.
        let tr = discretize(&[key60(0.07, 0.15)], &[], 20.0).unwrap();
        let on: Vec<usize> = (0..tr.len()).filter(|&i| tr.frames[i].is_pressed(60)).collect();
        assert_eq!(on, vec![2]);
        // Note on [0.05, 0.1) starts exactly on instant 1.
        let tr = discretize(&[key60(0.05, 0.1)], &[], 20.0).unwrap();
        let on: Vec<usize> = (0..tr.len()).filter(|&i| tr.frames[i].is_pressed(60)).collect();
        assert_eq!(on, vec![1]);
    }

    #[test]
    fn restrikes_collapse() {
        let tr = discretize(&[key60(0.0, 0.06), key60(0.06, 0.2)], &[], 20.0).unwrap();
        assert!((0..4).all(|i| tr.frames[i].is_pressed(60)));
    }

    #[test]
    fn pedal_sampled_at_instants() {
        let ped = [PedalEvent { time: 0.05, on: true }, PedalEvent { time: 0.12, on: false }];
        let tr = discretize(&[], &ped, 20.0).unwrap();
        let flags: Vec<bool> = tr.frames.iter().map(|f| f.pedal).collect();
        assert_eq!(flags, vec![false, true, true, false]);
    }

    #[test]
    fn rejects_bad_rate() {
        assert!(discretize(&[], &[], 0.0).is_err());
    }

    #[test]
    fn goal_window_padding_and_slices() {
        let notes: Vec<NoteEvent> = (0..30).map(|i| NoteEvent::new(i, i as f64 * 0.05, i as f64 * 0.05 + 0.05)).collect();
        let tr = discretize(&notes, &[], 20.0).unwrap();
        let last = tr.len() - 1;
        let w = goal_window(&tr, last, 4).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.states.iter().all(PianoState::is_empty));
        assert_eq!(goal_window(&tr, 3, 1).unwrap().states, vec![tr.frames[4]]);
        assert_eq!(goal_window(&tr, 7, 10).unwrap().states, tr.frames[8..18].to_vec());
        assert!(matches!(goal_window(&tr, tr.len(), 2), Err(Error::Index { .. })));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let tr = discretize(&[key60(0.0, 0.12), NoteEvent::new(0, 0.05, 0.1)], &[PedalEvent { time: 0.1, on: true }], 20.0).unwrap();
        assert_eq!(PianoStateTrajectory::from_csv(&tr.to_csv()).unwrap(), tr);
        assert_eq!(PianoStateTrajectory::from_json(&tr.to_json()).unwrap(), tr);
    }

    fn arb_notes() -> impl Strategy<Value = Vec<NoteEvent>> {
        prop::collection::vec((0usize..88, 0u32..200, 1u32..60), 0..20).prop_map(|v| {
            v.into_iter()
                .map(|(k, on, dur)| NoteEvent::new(k, on as f64 * 0.01, (on + dur) as f64 * 0.01))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn set_flag_count_matches_instants(notes in arb_notes()) {
            // Non-overlapping per key so collapsing restrikes cannot merge counts.
            let mut per_key: std::collections::BTreeMap<usize, Vec<NoteEvent>> = Default::default();
            for n in notes {
                let v = per_key.entry(n.key_index).or_default();
                if v.iter().all(|m| n.off_time <= m.on_time || n.on_time >= m.off_time) {
                    v.push(n);
                }
            }
            let notes: Vec<NoteEvent> = per_key.into_values().flatten().collect();
            let rate = 20.0;
            let tr = discretize(&notes, &[], rate).unwrap();
            let total: usize = tr.frames.iter().map(PianoState::count).sum();
            let expected: usize = notes.iter().map(|n| {
                (0..10_000).filter(|&i| {
                    let t = i as f64 / rate;
                    n.on_time <= t + INSTANT_EPS && t + INSTANT_EPS < n.off_time
                }).count()
            }).sum();
            prop_assert_eq!(total, expected);
        }

        #[test]
        fn goal_window_always_full(len in 1usize..40, t in 0usize..40, l in 1usize..16) {
            let t = t % len;
            let tr = PianoStateTrajectory::new(20.0, vec![PianoState::from_keys([3]); len]).unwrap();
            prop_assert_eq!(goal_window(&tr, t, l).unwrap().len(), l);
        }
    }
}
