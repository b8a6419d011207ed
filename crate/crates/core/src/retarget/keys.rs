use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::score::{LOWEST_MIDI_NOTE, NUM_KEYS};

/// Physical layout of one key on the piano plane.
///
/// `x` runs from the player toward the fallboard, `y` along the keyboard and
/// `z` up; the resting key tops lie in `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Key<T: Real> {
    pub center_y: T,
    pub y_extent: T,
    pub x_front: T,
    pub x_back: T,
    pub height: T,
    pub black: bool,
}

impl<T: Real> Key<T> {
    /// Strictly inside the key's y-interval (edges excluded).
    pub fn contains_y(&self, y: T) -> bool {
        (y - self.center_y).abs() < self.y_extent * T::lit(0.5) - T::lit(1e-9)
    }

    pub fn contains_xy(&self, x: T, y: T) -> bool {
        x >= self.x_front && x <= self.x_back && self.contains_y(y)
    }

    /// Center of the key's top surface.
    pub fn top_center(&self) -> [T; 3] {
        [
            (self.x_front + self.x_back) * T::lit(0.5),
            self.center_y,
            T::zero(),
        ]
    }
}

/// Dimensions used to build the standard 88-key layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default)]
pub struct KeyLayout<T: Real> {
    pub white_pitch: T,
    pub black_width: T,
    pub white_length: T,
    pub black_length: T,
    pub key_height: T,
}

impl<T: Real> Default for KeyLayout<T> {
    fn default() -> Self {
        Self {
            white_pitch: T::lit(0.0235),
            black_width: T::lit(0.0137),
            white_length: T::lit(0.15),
            black_length: T::lit(0.095),
            key_height: T::lit(0.01),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct KeyGeometry<T: Real> {
    pub keys: Vec<Key<T>>,
}

impl<T: Real> Default for KeyGeometry<T> {
    fn default() -> Self {
        Self::standard(&KeyLayout::default())
    }
}

pub fn is_black_midi(note: u8) -> bool {
    matches!(note % 12, 1 | 3 | 6 | 8 | 10)
}

impl<T: Real> KeyGeometry<T> {
    /// 88 keys from A0, centred on `y = 0`. Black keys straddle the boundary
    /// between their neighbouring white keys and sit at the back.
    pub fn standard(layout: &KeyLayout<T>) -> Self {
        let whites = (0..NUM_KEYS)
            .filter(|&k| !is_black_midi(k as u8 + LOWEST_MIDI_NOTE))
            .count();
        let mid = T::lit((whites as f64 - 1.0) / 2.0);
        let mut keys = Vec::with_capacity(NUM_KEYS);
        let mut white_idx = 0usize;
        for k in 0..NUM_KEYS {
            let black = is_black_midi(k as u8 + LOWEST_MIDI_NOTE);
            let key = if black {
                let boundary = T::lit(white_idx as f64 - 0.5) - mid;
                Key {
                    center_y: boundary * layout.white_pitch,
                    y_extent: layout.black_width,
                    x_front: layout.white_length - layout.black_length,
                    x_back: layout.white_length,
                    height: layout.key_height,
                    black: true,
                }
            } else {
                let c = (T::lit(white_idx as f64) - mid) * layout.white_pitch;
                white_idx += 1;
                Key {
                    center_y: c,
                    y_extent: layout.white_pitch,
                    x_front: T::zero(),
                    x_back: layout.white_length,
                    height: layout.key_height,
                    black: false,
                }
            };
            keys.push(key);
        }
        Self { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, index: usize) -> &Key<T> {
        &self.keys[index]
    }

    /// Height used for hovering fingertips (`2 * h_key`).
    pub fn nominal_height(&self) -> T {
        self.keys
            .iter()
            .fold(T::zero(), |m, k| if k.height > m { k.height } else { m })
    }

    /// The key whose top surface contains `(x, y)`; black keys shadow the
    /// white keys beneath them.
    pub fn key_under(&self, x: T, y: T) -> Option<usize> {
        let mut white = None;
        for (i, k) in self.keys.iter().enumerate() {
            if k.contains_xy(x, y) {
                if k.black {
                    return Some(i);
                }
                white.get_or_insert(i);
            }
        }
        white
    }

    /// y-range covering keys `index - n ..= index + n` (clipped to the keyboard).
    pub fn neighborhood_y(&self, index: usize, n: usize) -> (T, T) {
        let lo = index.saturating_sub(n);
        let hi = (index + n).min(self.keys.len() - 1);
        let half = T::lit(0.5);
        let mut a = T::infinity();
        let mut b = T::neg_infinity();
        for k in &self.keys[lo..=hi] {
            a = a.min(k.center_y - k.y_extent * half);
            b = b.max(k.center_y + k.y_extent * half);
        }
        (a, b)
    }

    /// Axis-aligned box around all key tops, `z` from the key tops to
    /// `hover_factor * h_key` above them.
    pub fn bounding_box(&self, hover_factor: T) -> ([T; 3], [T; 3]) {
        let half = T::lit(0.5);
        let mut lo = [T::infinity(), T::infinity(), T::zero()];
        let mut hi = [T::neg_infinity(), T::neg_infinity(), self.nominal_height() * hover_factor];
        for k in &self.keys {
            lo[0] = lo[0].min(k.x_front);
            hi[0] = hi[0].max(k.x_back);
            lo[1] = lo[1].min(k.center_y - k.y_extent * half);
            hi[1] = hi[1].max(k.center_y + k.y_extent * half);
        }
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layout_counts() {
        let g = KeyGeometry::<f64>::default();
        assert_eq!(g.len(), 88);
        assert_eq!(g.keys.iter().filter(|k| k.black).count(), 36);
        // A0 white, A#0 black, C8 white.
        assert!(!g.key(0).black && g.key(1).black && !g.key(87).black);
        // Symmetric about y = 0.
        assert!((g.key(0).center_y + g.key(87).center_y).abs() < 1e-12);
    }

    #[test]
    fn same_colour_intervals_do_not_overlap() {
        let g = KeyGeometry::<f64>::default();
        for black in [false, true] {
            let ks: Vec<&Key<f64>> = g.keys.iter().filter(|k| k.black == black).collect();
            for w in ks.windows(2) {
                assert!(w[0].center_y < w[1].center_y);
                assert!(w[0].center_y + w[0].y_extent / 2.0 <= w[1].center_y - w[1].y_extent / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn black_keys_shadow_white() {
        let g = KeyGeometry::<f64>::default();
        let b = g.key(1);
        assert_eq!(g.key_under(0.12, b.center_y), Some(1));
        // Front of the keyboard at the same y lands on a white key.
        let w = g.key_under(0.02, b.center_y + 0.004).unwrap();
        assert!(!g.key(w).black);
        assert_eq!(g.key_under(-0.01, 0.0), None);
    }

    #[test]
    fn white_centres_not_inside_black_intervals() {
        let g = KeyGeometry::<f64>::default();
        for (i, w) in g.keys.iter().enumerate().filter(|(_, k)| !k.black) {
            for (j, b) in g.keys.iter().enumerate() {
                if i != j {
                    assert!(!b.contains_y(w.center_y), "{i} inside {j}");
                }
            }
        }
    }
}
