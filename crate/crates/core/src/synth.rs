//! Generated song corpora with demonstrator fingertip tracks.
//!
//! Each hand rests in a five-finger position over consecutive white keys and
//! every note is played by the finger sitting above it, so a song is fully
//! described by its sequence of (finger, onset, duration). The demonstrator
//! keeps every tip over its key with a small per-song offset and per-frame
//! jitter, and a fixed camera maps the piano plane to pixels.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retarget::{Correspondence, Homography, KeyGeometry, PixelFrame, NUM_TIPS};
use crate::score::{discretize_with_tail, write_midi, NoteEvent, PianoState, PianoStateTrajectory, NUM_KEYS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub notes_per_song: usize,
    pub rate_hz: f64,
    /// Silent frames before the first note.
    pub lead_in: usize,
    /// Silent frames after the last note.
    pub tail: usize,
    pub note_frames: [usize; 2],
    pub gap_frames: [usize; 2],
    /// White-key index under the left little finger.
    pub left_first_white: usize,
    /// White-key index under the right thumb.
    pub right_first_white: usize,
    /// Fingertip distance from the front edge of the keys, metres.
    pub tip_x: f64,
    /// Per-song, per-tip constant y offset (std, metres).
    pub offset_std: f64,
    /// Per-frame y jitter (std, metres).
    pub jitter_std: f64,
    pub bpm: f64,
    pub ppq: u16,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            notes_per_song: 10,
            rate_hz: 20.0,
            lead_in: 4,
            tail: 4,
            note_frames: [2, 4],
            gap_frames: [1, 3],
            left_first_white: 17,
            right_first_white: 30,
            tip_x: 0.03,
            offset_std: 0.0015,
            jitter_std: 0.0003,
            bpm: 120.0,
            ppq: 480,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.rate_hz > 0.0) {
            return bad("rate_hz", "must be positive");
        }
        if self.note_frames[0] == 0 || self.note_frames[0] > self.note_frames[1] {
            return bad("note_frames", "need 1 <= min <= max");
        }
        if self.gap_frames[0] == 0 || self.gap_frames[0] > self.gap_frames[1] {
            return bad("gap_frames", "need 1 <= min <= max");
        }
        if self.left_first_white + 5 > self.right_first_white || self.right_first_white + 5 > 52 {
            return bad("right_first_white", "hand positions overlap or leave the keyboard");
        }
        if !(self.offset_std >= 0.0 && self.jitter_std >= 0.0) {
            return bad("offset_std", "noise must be non-negative");
        }
        Ok(())
    }
}

/// Key index under each tip (left thumb→little, right thumb→little).
pub fn hand_keys(geom: &KeyGeometry<f64>, spec: &SynthSpec) -> [usize; NUM_TIPS] {
    let whites: Vec<usize> = (0..geom.len()).filter(|&k| !geom.key(k).black).collect();
    std::array::from_fn(|i| {
        if i < 5 {
            whites[spec.left_first_white + 4 - i]
        } else {
            whites[spec.right_first_white + i - 5]
        }
    })
}

/// A generated song: which tip plays each note, and the resulting events.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSong {
    pub id: String,
    pub fingers: Vec<usize>,
    pub notes: Vec<NoteEvent>,
    pub trajectory: PianoStateTrajectory,
}

impl SynthSong {
    pub fn midi_bytes(&self, spec: &SynthSpec) -> Vec<u8> {
        write_midi(&self.notes, &[], spec.bpm, spec.ppq)
    }
}

pub fn generate_song<R: Rng + ?Sized>(
    id: &str,
    geom: &KeyGeometry<f64>,
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<SynthSong> {
    spec.validate()?;
    let keys = hand_keys(geom, spec);
    let mut frame = spec.lead_in;
    let mut fingers = Vec::with_capacity(spec.notes_per_song);
    let mut notes = Vec::with_capacity(spec.notes_per_song);
    for _ in 0..spec.notes_per_song {
        let finger = rng.random_range(0..NUM_TIPS);
        let dur = rng.random_range(spec.note_frames[0]..=spec.note_frames[1]);
        let gap = rng.random_range(spec.gap_frames[0]..=spec.gap_frames[1]);
        notes.push(NoteEvent::new(
            keys[finger],
            frame as f64 / spec.rate_hz,
            (frame + dur) as f64 / spec.rate_hz,
        ));
        fingers.push(finger);
        frame += dur + gap;
    }
    let trajectory = discretize_with_tail(&notes, &[], spec.rate_hz, spec.tail)?;
    Ok(SynthSong {
        id: id.into(),
        fingers,
        notes,
        trajectory,
    })
}

/// Plane fingertip positions of the demonstrator, `(x, y)` per tip and frame.
pub fn demonstrate<R: Rng + ?Sized>(
    song: &PianoStateTrajectory,
    geom: &KeyGeometry<f64>,
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<Vec<[[f64; 2]; NUM_TIPS]>> {
    let keys = hand_keys(geom, spec);
    let offset = normal(spec.offset_std)?;
    let jitter = normal(spec.jitter_std)?;
    let base: [f64; NUM_TIPS] = std::array::from_fn(|i| geom.key(keys[i]).center_y + offset.sample(rng));
    Ok((0..song.len())
        .map(|_| std::array::from_fn(|i| [spec.tip_x, base[i] + jitter.sample(rng)]))
        .collect())
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::input(format!("noise std {std}: {e}")))
}

/// Piano plane to image pixels for the bundled camera.
pub fn camera() -> Homography<f64> {
    Homography::from_rows([[-40.0, 1000.0, 640.0], [-2400.0, 30.0, 520.0], [0.4, 0.02, 1.0]])
}

pub fn to_pixels(plane: &[[[f64; 2]; NUM_TIPS]], rate_hz: f64) -> Result<Vec<PixelFrame<f64>>> {
    let cam = camera();
    plane
        .iter()
        .enumerate()
        .map(|(i, tips)| {
            let mut px = [[0.0; 2]; NUM_TIPS];
            for (p, q) in px.iter_mut().zip(tips) {
                *p = cam.apply(*q)?;
            }
            Ok(PixelFrame {
                t: i as f64 / rate_hz,
                tips: px,
            })
        })
        .collect()
}

/// Front and back corners of a spread of white keys, seen through [`camera`].
pub fn correspondences(geom: &KeyGeometry<f64>) -> Result<Vec<Correspondence<f64>>> {
    let cam = camera();
    let whites: Vec<usize> = (0..geom.len()).filter(|&k| !geom.key(k).black).collect();
    let mut out = Vec::new();
    for &w in &[0usize, 13, 26, 39, 51] {
        let k = geom.key(whites[w]);
        for x in [k.x_front, k.x_back] {
            for y in [k.center_y - 0.5 * k.y_extent, k.center_y + 0.5 * k.y_extent] {
                let plane = [x, y];
                out.push(Correspondence {
                    pixel: cam.apply(plane)?,
                    plane,
                });
            }
        }
    }
    Ok(out)
}

/// One state per key with only that key pressed.
pub fn single_key_states() -> Vec<PianoState> {
    (0..NUM_KEYS).map(|k| PianoState::from_keys([k])).collect()
}

/// Song ids used for training and for held-out evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CorpusSong {
    pub song: SynthSong,
    pub pixels: Vec<PixelFrame<f64>>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SynthSpec,
    pub songs: Vec<CorpusSong>,
    pub correspondences: Vec<Correspondence<f64>>,
    pub split: Split,
}

/// `n_train` training songs and `n_test` held-out songs, all from one seed.
pub fn generate_corpus(
    geom: &KeyGeometry<f64>,
    spec: &SynthSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    let mut songs = Vec::new();
    for i in 0..n_train + n_test {
        let id = if i < n_train {
            format!("train_{i}")
        } else {
            format!("test_{}", i - n_train)
        };
        let song = generate_song(&id, geom, spec, &mut rng)?;
        let plane = demonstrate(&song.trajectory, geom, spec, &mut rng)?;
        let pixels = to_pixels(&plane, spec.rate_hz)?;
        if i < n_train {
            split.train.push(id);
        } else {
            split.test.push(id);
        }
        songs.push(CorpusSong { song, pixels });
    }
    Ok(Corpus {
        spec: spec.clone(),
        songs,
        correspondences: correspondences(geom)?,
        split,
    })
}

/// Notes as `key_index,on_time,off_time` rows, for reading a corpus by eye.
pub fn notes_to_csv(notes: &[NoteEvent]) -> String {
    let mut out = String::from("key_index,on_time,off_time\n");
    for n in notes {
        let _ = writeln!(out, "{},{},{}", n.key_index, n.on_time, n.off_time);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retarget::estimate_homography;
    use crate::score::parse_midi;

    fn geom() -> KeyGeometry<f64> {
        KeyGeometry::default()
    }

    #[test]
    fn hand_keys_are_white_and_ordered() {
        let g = geom();
        let keys = hand_keys(&g, &SynthSpec::default());
        assert!(keys.iter().all(|&k| !g.key(k).black));
        for i in 0..4 {
            assert!(keys[i] > keys[i + 1], "left thumb is rightmost");
            assert!(keys[5 + i] < keys[6 + i]);
        }
        assert!(keys[0] < keys[5]);
    }

    #[test]
    fn song_frames_match_notes() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_song("a", &geom(), &spec, &mut rng).unwrap();
        assert_eq!(s.notes.len(), 10);
        let set: usize = s.trajectory.frames.iter().map(|f| f.count()).sum();
        let expected: usize = s
            .notes
            .iter()
            .map(|n| ((n.off_time - n.on_time) * spec.rate_hz).round() as usize)
            .sum();
        assert_eq!(set, expected);
        assert!(s.trajectory.frames[..spec.lead_in].iter().all(|f| f.is_empty()));
        assert!(s.trajectory.frames.iter().rev().take(spec.tail).all(|f| f.is_empty()));
        assert!(s.trajectory.frames.iter().all(|f| f.count() <= 1));
    }

    #[test]
    fn midi_round_trip_preserves_trajectory() {
        let spec = SynthSpec::default();
        let s = generate_song("a", &geom(), &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let score = parse_midi(&s.midi_bytes(&spec)).unwrap();
        let back = discretize_with_tail(&score.notes, &score.pedal, spec.rate_hz, spec.tail).unwrap();
        assert_eq!(back, s.trajectory);
    }

    #[test]
    fn camera_is_recovered_from_correspondences() {
        let g = geom();
        let fit = estimate_homography(&correspondences(&g).unwrap()).unwrap();
        let expected = camera().inverse().unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((fit.homography.h[r][c] - expected.h[r][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn demonstrator_stays_over_assigned_keys() {
        let g = geom();
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_song("a", &g, &spec, &mut rng).unwrap();
        let plane = demonstrate(&s.trajectory, &g, &spec, &mut rng).unwrap();
        let keys = hand_keys(&g, &spec);
        for f in &plane {
            for (i, p) in f.iter().enumerate() {
                assert_eq!(g.key_under(p[0], p[1]), Some(keys[i]));
            }
        }
    }

    #[test]
    fn corpus_is_seeded() {
        let g = geom();
        let spec = SynthSpec::default();
        let a = generate_corpus(&g, &spec, 2, 1, 5).unwrap();
        let b = generate_corpus(&g, &spec, 2, 1, 5).unwrap();
        assert_eq!(a.split.train, vec!["train_0", "train_1"]);
        assert_eq!(a.split.test, vec!["test_0"]);
        for (x, y) in a.songs.iter().zip(&b.songs) {
            assert_eq!(x.song, y.song);
            assert_eq!(x.pixels, y.pixels);
        }
        assert_ne!(a.songs[0].song.notes, a.songs[1].song.notes);
    }
}
