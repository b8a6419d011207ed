//! Standard MIDI file reader and a minimal format-0 writer.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{LOWEST_MIDI_NOTE, NUM_KEYS};
use crate::error::{Error, Result};

const DEFAULT_TEMPO_US: u32 = 500_000;
const SUSTAIN_CC: u8 = 64;

/// One sounding note on the 88-key range, in absolute seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub key_index: usize,
    pub on_time: f64,
    pub off_time: f64,
    /// Set when the note-on had no matching note-off and was closed at the end of its track.
    #[serde(default)]
    pub closed_at_track_end: bool,
}

impl NoteEvent {
    pub fn new(key_index: usize, on_time: f64, off_time: f64) -> Self {
        Self {
            key_index,
            on_time,
            off_time,
            closed_at_track_end: false,
        }
    }
}

/// Sustain pedal transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedalEvent {
    pub time: f64,
    pub on: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MidiScore {
    pub notes: Vec<NoteEvent>,
    pub pedal: Vec<PedalEvent>,
    pub warnings: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::MidiParse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn u8(&mut self) -> Result<u8> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b)
            }
            None => self.err("unexpected end of data"),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.err(format!("need {n} bytes, {} remain", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        self.err("variable-length quantity longer than 4 bytes")
    }
}

#[derive(Debug, Clone, Copy)]
enum RawKind {
    NoteOn(u8),
    NoteOff(u8),
    Sustain(bool),
    Tempo(u32),
    EndOfTrack,
}

#[derive(Debug, Clone, Copy)]
struct RawEvent {
    tick: u64,
    track: usize,
    kind: RawKind,
}

/// Parses a format-0 or format-1 standard MIDI file into note and pedal events.
///
/// Tick positions are converted to seconds through the merged tempo map of all
/// tracks. Velocity is discarded; a note-on with velocity 0 is a note-off.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiScore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"MThd" {
        r.pos -= 4;
        return r.err("missing MThd header");
    }
    let hlen = r.u32()? as usize;
    if hlen < 6 {
        return r.err(format!("header length {hlen} < 6"));
    }
    let format_pos = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division_pos = r.pos;
    let division = r.u16()?;
    r.take(hlen - 6)?;
    if format > 1 {
        return Err(Error::MidiParse {
            offset: format_pos,
            message: format!("unsupported MIDI format {format}"),
        });
    }
    if division & 0x8000 != 0 {
        return Err(Error::MidiParse {
            offset: division_pos,
            message: "SMPTE time division is not supported".into(),
        });
    }
    if division == 0 {
        return Err(Error::MidiParse {
            offset: division_pos,
            message: "zero ticks per quarter note".into(),
        });
    }
    let ppq = f64::from(division);

    let mut events = Vec::new();
    let mut track = 0;
    while track < usize::from(ntracks) && r.pos < bytes.len() {
        let id_pos = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if id != b"MTrk" {
            // Alien chunk.
            r.take(len).map_err(|_| Error::MidiParse {
                offset: id_pos,
                message: "truncated chunk".into(),
            })?;
            continue;
        }
        let start = r.pos;
        if start + len > bytes.len() {
            return Err(Error::MidiParse {
                offset: id_pos,
                message: format!("track length {len} exceeds file size"),
            });
        }
        let mut tr = Reader {
            bytes: &bytes[..start + len],
            pos: start,
        };
        read_track(&mut tr, track, &mut events)?;
        r.pos = start + len;
        track += 1;
    }
    if track < usize::from(ntracks) {
        return r.err(format!("expected {ntracks} tracks, found {track}"));
    }

    Ok(assemble(events, ppq))
}

fn read_track(r: &mut Reader<'_>, track: usize, out: &mut Vec<RawEvent>) -> Result<()> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut ended = false;
    while r.pos < r.bytes.len() {
        tick += u64::from(r.vlq()?);
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            match running {
                Some(s) => {
                    r.pos -= 1;
                    s
                }
                None => {
                    r.pos -= 1;
                    return r.err("data byte without running status");
                }
            }
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from(data[0]) << 16 | u32::from(data[1]) << 8 | u32::from(data[2]);
                        out.push(RawEvent { tick, track, kind: RawKind::Tempo(us) });
                    }
                    0x2f => {
                        out.push(RawEvent { tick, track, kind: RawKind::EndOfTrack });
                        ended = true;
                        break;
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let d1 = r.u8()?;
                let d2 = if matches!(kind, 0xc0 | 0xd0) { 0 } else { r.u8()? };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    r.pos -= 1;
                    return r.err("data byte has its high bit set");
                }
                match kind {
                    0x90 if d2 > 0 => out.push(RawEvent { tick, track, kind: RawKind::NoteOn(d1) }),
                    0x80 | 0x90 => out.push(RawEvent { tick, track, kind: RawKind::NoteOff(d1) }),
                    0xb0 if d1 == SUSTAIN_CC => {
                        out.push(RawEvent { tick, track, kind: RawKind::Sustain(d2 >= 64) })
                    }
                    _ => {}
                }
            }
            _ => return r.err(format!("unsupported status byte {status:#04x}")),
        }
    }
    if !ended {
        out.push(RawEvent { tick, track, kind: RawKind::EndOfTrack });
    }
    Ok(())
}

/// Piecewise-linear tick→seconds map.
struct TempoMap {
    // (tick, seconds at tick, microseconds per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
    ppq: f64,
}

impl TempoMap {
    fn new(mut changes: Vec<(u64, u32)>, ppq: f64) -> Self {
        changes.sort_by_key(|&(t, _)| t);
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        for (tick, us) in changes {
            let &(t0, s0, us0) = segments.last().expect("nonempty");
            let s = s0 + (tick - t0) as f64 * f64::from(us0) / (ppq * 1e6);
            if tick == t0 {
                segments.pop();
            }
            segments.push((tick, s, us));
        }
        Self { segments, ppq }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|&(t, _, _)| t <= tick) - 1;
        let (t0, s0, us) = self.segments[idx];
        s0 + (tick - t0) as f64 * f64::from(us) / (self.ppq * 1e6)
    }
}

fn assemble(mut events: Vec<RawEvent>, ppq: f64) -> MidiScore {
    let tempo = TempoMap::new(
        events
            .iter()
            .filter_map(|e| match e.kind {
                RawKind::Tempo(us) => Some((e.tick, us)),
                _ => None,
            })
            .collect(),
        ppq,
    );
    // Stable sort keeps the within-track order for equal ticks.
    events.sort_by_key(|e| (e.tick, e.track));

    let mut score = MidiScore::default();
    let mut open: BTreeMap<u8, VecDeque<f64>> = BTreeMap::new();
    let mut track_end: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pedal_on = false;

    for e in &events {
        let t = tempo.seconds(e.tick);
        match e.kind {
            RawKind::NoteOn(n) => open.entry(n).or_default().push_back(t),
            RawKind::NoteOff(n) => {
                if let Some(on) = open.get_mut(&n).and_then(VecDeque::pop_front) {
                    push_note(&mut score, n, on, t, false);
                }
            }
            RawKind::Sustain(on) => {
                if on != pedal_on {
                    pedal_on = on;
                    score.pedal.push(PedalEvent { time: t, on });
                }
            }
            RawKind::EndOfTrack => {
                track_end.insert(e.track, t);
            }
            RawKind::Tempo(_) => {}
        }
    }

    let end = track_end.values().copied().fold(0.0f64, f64::max);
    for (n, ons) in open {
        for on in ons {
            score
                .warnings
                .push(format!("note {n} at {on:.6}s has no note-off; closed at track end"));
            push_note(&mut score, n, on, end, true);
        }
    }
    score.notes.sort_by(|a, b| {
        a.on_time
            .total_cmp(&b.on_time)
            .then(a.key_index.cmp(&b.key_index))
    });
    score
}

fn push_note(score: &mut MidiScore, note: u8, on: f64, off: f64, truncated: bool) {
    let Some(key) = note.checked_sub(LOWEST_MIDI_NOTE).map(usize::from).filter(|&k| k < NUM_KEYS)
    else {
        score
            .warnings
            .push(format!("note {note} outside the 88-key range dropped"));
        return;
    };
    if off > on {
        score.notes.push(NoteEvent {
            key_index: key,
            on_time: on,
            off_time: off,
            closed_at_track_end: truncated,
        });
    }
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Writes notes and pedal events as a format-0 file at a constant tempo.
///
/// Times are quantized to the nearest tick.
pub fn write_midi(notes: &[NoteEvent], pedal: &[PedalEvent], bpm: f64, ppq: u16) -> Vec<u8> {
    let tempo_us = (60e6 / bpm).round() as u32;
    let ticks_per_sec = f64::from(ppq) * 1e6 / f64::from(tempo_us);
    let to_tick = |s: f64| (s * ticks_per_sec).round().max(0.0) as u64;

    // (tick, order, bytes); offs sort before ons at equal ticks.
    let mut evs: Vec<(u64, u8, [u8; 3])> = Vec::new();
    for n in notes {
        let midi = n.key_index as u8 + LOWEST_MIDI_NOTE;
        evs.push((to_tick(n.on_time), 2, [0x90, midi, 64]));
        evs.push((to_tick(n.off_time), 1, [0x80, midi, 0]));
    }
    for p in pedal {
        evs.push((to_tick(p.time), 0, [0xb0, SUSTAIN_CC, if p.on { 127 } else { 0 }]));
    }
    evs.sort_by_key(|e| (e.0, e.1));

    let mut trk = Vec::new();
    push_vlq(&mut trk, 0);
    trk.extend_from_slice(&[0xff, 0x51, 0x03]);
    trk.extend_from_slice(&tempo_us.to_be_bytes()[1..]);
    let mut last = 0u64;
    for (tick, _, bytes) in evs {
        push_vlq(&mut trk, (tick - last) as u32);
        trk.extend_from_slice(&bytes);
        last = tick;
    }
    push_vlq(&mut trk, 0);
    trk.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(trk.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ppq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(trk.len() as u32).to_be_bytes());
    out.extend_from_slice(&trk);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(format: u16, ntracks: u16, division: u16) -> Vec<u8> {
        let mut v = b"MThd".to_vec();
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&format.to_be_bytes());
        v.extend_from_slice(&ntracks.to_be_bytes());
        v.extend_from_slice(&division.to_be_bytes());
        v
    }

    fn track(body: &[u8]) -> Vec<u8> {
        let mut v = b"MTrk".to_vec();
        v.extend_from_slice(&(body.len() as u32).to_be_bytes());
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn running_status_and_zero_velocity_note_off() {
        let mut f = header(0, 1, 96);
        // note on 60, running status note on 64, then both "off" via vel 0.
        f.extend(track(&[
            0x00, 0x90, 60, 100, 0x00, 64, 100, 0x60, 60, 0, 0x00, 64, 0, 0x00, 0xff, 0x2f, 0x00,
        ]));
        let s = parse_midi(&f).unwrap();
        assert_eq!(s.notes.len(), 2);
        assert_eq!(s.notes[0].key_index, 60 - 21);
        assert!((s.notes[0].off_time - 0.5).abs() < 1e-12);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn unmatched_note_closed_at_track_end() {
        let mut f = header(0, 1, 96);
        f.extend(track(&[0x00, 0x90, 60, 100, 0x81, 0x40, 0xff, 0x2f, 0x00]));
        let s = parse_midi(&f).unwrap();
        assert_eq!(s.notes.len(), 1);
        assert!(s.notes[0].closed_at_track_end);
        // 192 ticks at 96 ppq, 120 bpm
        assert!((s.notes[0].off_time - 1.0).abs() < 1e-12);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn smpte_division_rejected() {
        let mut f = header(0, 1, 0xe728);
        f.extend(track(&[0x00, 0xff, 0x2f, 0x00]));
        match parse_midi(&f) {
            Err(Error::MidiParse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        match parse_midi(b"RIFF\0\0\0\x06") {
            Err(Error::MidiParse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_track_reports_offset() {
        let mut f = header(0, 1, 96);
        f.extend(b"MTrk");
        f.extend(&100u32.to_be_bytes());
        f.extend(&[0x00, 0x90]);
        match parse_midi(&f) {
            Err(Error::MidiParse { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sustain_threshold_at_64() {
        let mut f = header(0, 1, 96);
        f.extend(track(&[
            0x00, 0xb0, 64, 63, 0x10, 0xb0, 64, 64, 0x10, 0xb0, 64, 10, 0x00, 0xff, 0x2f, 0x00,
        ]));
        let s = parse_midi(&f).unwrap();
        assert_eq!(s.pedal.len(), 2);
        assert!(s.pedal[0].on);
        assert!(!s.pedal[1].on);
    }

    #[test]
    fn format1_tracks_share_tempo_map() {
        let mut f = header(1, 2, 100);
        // Track 0: tempo 1 s per quarter from tick 0.
        f.extend(track(&[0x00, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40, 0x00, 0xff, 0x2f, 0x00]));
        // Track 1: note over 50 ticks.
        f.extend(track(&[0x00, 0x90, 21, 90, 0x32, 0x80, 21, 0, 0x00, 0xff, 0x2f, 0x00]));
        let s = parse_midi(&f).unwrap();
        assert_eq!(s.notes, vec![NoteEvent::new(0, 0.0, 0.5)]);
    }

    #[test]
    fn writer_round_trip() {
        let notes = vec![NoteEvent::new(39, 0.0, 0.5), NoteEvent::new(43, 0.25, 1.0)];
        let pedal = vec![PedalEvent { time: 0.5, on: true }, PedalEvent { time: 1.0, on: false }];
        let bytes = write_midi(&notes, &pedal, 120.0, 480);
        let s = parse_midi(&bytes).unwrap();
        assert_eq!(s.notes, notes);
        assert_eq!(s.pedal, pedal);
    }
}
