//! Demonstration retargeting: pixel→plane homography, key alignment and
//! height assignment of fingertip trajectories.

mod align;
mod fingertips;
mod homography;
mod keys;

pub use align::{align_fingertips, align_frame, assign_z, AlignmentReport, UnservedKey, NEIGHBOR_KEYS};
pub use fingertips::{
    fingertips_from_csv, fingertips_to_csv, pixel_tracks_from_csv, pixel_tracks_to_csv, FingertipFrame, PixelFrame,
    NUM_TIPS,
};
pub use homography::{
    apply_homography, estimate_homography, Correspondence, Homography, HomographyFit,
};
pub use keys::{Key, KeyGeometry, KeyLayout};
