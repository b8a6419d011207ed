use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Left thumb→pinky, then right thumb→pinky.
pub const NUM_TIPS: usize = 10;

/// Ten fingertip positions at one instant, with the key (if any) each tip presses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FingertipFrame<T: Real> {
    pub t: T,
    pub tips: [[T; 3]; NUM_TIPS],
    pub press: [Option<usize>; NUM_TIPS],
}

impl<T: Real> FingertipFrame<T> {
    pub fn new(t: T, tips: [[T; 3]; NUM_TIPS]) -> Self {
        Self {
            t,
            tips,
            press: [None; NUM_TIPS],
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.tips.iter().flatten().copied().collect()
    }

    pub fn from_flat(t: T, v: &[T]) -> Result<Self> {
        if v.len() != NUM_TIPS * 3 {
            return Err(Error::Arity {
                expected: NUM_TIPS * 3,
                got: v.len(),
            });
        }
        Ok(Self::new(
            t,
            std::array::from_fn(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]]),
        ))
    }
}

/// Ten fingertips in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFrame<T: Real> {
    pub t: T,
    pub tips: [[T; 2]; NUM_TIPS],
}

fn parse_rows<T: Real>(text: &str, context: &str) -> Result<BTreeMap<u64, (T, Vec<(usize, Vec<T>)>)>> {
    let mut by_time: BTreeMap<u64, (T, Vec<(usize, Vec<T>)>)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |message: String| Error::Csv {
            context: context.into(),
            line: i + 1,
            message,
        };
        let Ok(t) = cells[0].parse::<f64>() else {
            if i == 0 {
                continue; // header
            }
            return Err(bad(format!("bad time {:?}", cells[0])));
        };
        if cells.len() < 4 {
            return Err(bad(format!("expected at least 4 columns, got {}", cells.len())));
        }
        let finger: usize = cells[1]
            .parse()
            .map_err(|_| bad(format!("bad finger id {:?}", cells[1])))?;
        if finger >= NUM_TIPS {
            return Err(bad(format!("finger id {finger} out of range")));
        }
        let vals = cells[2..]
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| bad(format!("bad coordinate {c:?}")))
            })
            .collect::<Result<Vec<T>>>()?;
        // Key on microseconds so float jitter in the time column cannot split frames.
        let key = (t * 1e6).round() as u64;
        by_time
            .entry(key)
            .or_insert_with(|| (T::lit(t), Vec::new()))
            .1
            .push((finger, vals));
    }
    Ok(by_time)
}

fn complete<T: Real>(
    context: &str,
    t: T,
    rows: Vec<(usize, Vec<T>)>,
) -> Result<[Vec<T>; NUM_TIPS]> {
    let mut out: [Option<Vec<T>>; NUM_TIPS] = Default::default();
    for (f, v) in rows {
        if out[f].replace(v).is_some() {
            return Err(Error::input(format!("{context}: finger {f} repeated at t={t}")));
        }
    }
    let mut res: [Vec<T>; NUM_TIPS] = Default::default();
    for (f, slot) in out.into_iter().enumerate() {
        res[f] = slot.ok_or_else(|| Error::input(format!("{context}: finger {f} missing at t={t}")))?;
    }
    Ok(res)
}

/// Reads `t, finger_id, u, v` rows.
pub fn pixel_tracks_from_csv<T: Real>(text: &str) -> Result<Vec<PixelFrame<T>>> {
    parse_rows::<T>(text, "pixel fingertips")?
        .into_values()
        .map(|(t, rows)| {
            let v = complete("pixel fingertips", t, rows)?;
            Ok(PixelFrame {
                t,
                tips: std::array::from_fn(|i| [v[i][0], v[i][1]]),
            })
        })
        .collect()
}

/// Reads `t, finger_id, x, y[, z]` rows; a missing `z` is zero.
pub fn fingertips_from_csv<T: Real>(text: &str) -> Result<Vec<FingertipFrame<T>>> {
    parse_rows::<T>(text, "plane fingertips")?
        .into_values()
        .map(|(t, rows)| {
            let v = complete("plane fingertips", t, rows)?;
            Ok(FingertipFrame::new(
                t,
                std::array::from_fn(|i| [v[i][0], v[i][1], v[i].get(2).copied().unwrap_or_else(T::zero)]),
            ))
        })
        .collect()
}

pub fn pixel_tracks_to_csv<T: Real>(frames: &[PixelFrame<T>]) -> String {
    let mut out = String::from("t,finger_id,u,v\n");
    for f in frames {
        for (i, p) in f.tips.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", f.t, i, p[0], p[1]);
        }
    }
    out
}

pub fn fingertips_to_csv<T: Real>(frames: &[FingertipFrame<T>]) -> String {
    let mut out = String::from("t,finger_id,x,y,z\n");
    for f in frames {
        for (i, p) in f.tips.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", f.t, i, p[0], p[1], p[2]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_csv_round_trip() {
        let f = FingertipFrame::new(0.05, std::array::from_fn(|i| [0.01 * i as f64, -0.2, 0.02]));
        let text = fingertips_to_csv(&[f, FingertipFrame { t: 0.1, ..f }]);
        let back = fingertips_from_csv::<f64>(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].tips, f.tips);
        assert_eq!(back[1].t, 0.1);
    }

    #[test]
    fn pixel_csv_round_trip() {
        let f = PixelFrame { t: 0.0, tips: std::array::from_fn(|i| [100.5 + i as f64, 200.25]) };
        let back = pixel_tracks_from_csv::<f64>(&pixel_tracks_to_csv(&[f])).unwrap();
        assert_eq!(back, vec![f]);
    }

    #[test]
    fn missing_finger_is_an_error() {
        let text = "t,finger_id,u,v\n0,0,1,2\n";
        assert!(pixel_tracks_from_csv::<f64>(text).is_err());
    }

    #[test]
    fn z_defaults_to_zero() {
        let mut text = String::new();
        for i in 0..NUM_TIPS {
            text.push_str(&format!("0.0,{i},0.1,0.2\n"));
        }
        let fr = fingertips_from_csv::<f64>(&text).unwrap();
        assert!(fr[0].tips.iter().all(|p| p[2] == 0.0));
    }
}
