//! MIDI ingestion and piano-state trajectories at the control rate.

mod midi;
mod state;

pub use midi::{parse_midi, write_midi, MidiScore, NoteEvent, PedalEvent};
pub use state::{
    discretize, discretize_with_tail, goal_window, GoalWindow, PianoState, PianoStateTrajectory,
    NUM_KEYS,
};

/// MIDI note number of piano key index 0 (A0).
pub const LOWEST_MIDI_NOTE: u8 = 21;
