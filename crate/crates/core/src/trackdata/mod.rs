//! Point-track data model, track files and the synthetic scene generator.

mod epipolar;
mod io;
mod synth;

pub use epipolar::{
    eight_point, merge_static_override, sampson_distance, sampson_static_mask,
    DEFAULT_SAMPSON_THRESHOLD,
};
pub use io::{
    load_tracks, read_tracks, save_tracks, save_tracks_binary, write_tracks, write_tracks_binary,
};
pub use synth::{
    generate_scene, load_ground_truth, save_ground_truth, GroundTruth, SceneSpec, SyntheticScene,
};

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;

/// `N` point tracks over `T` frames. Invisible entries hold `(NaN, NaN)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    n_tracks: usize,
    n_frames: usize,
    positions: Vec<Vector2<f64>>,
    visibility: Vec<bool>,
    pub intrinsics: Intrinsics,
    pub image_size: (usize, usize),
}

impl TrackSet {
    /// Builds a track set from track-major `positions`/`visibility`
    /// (index `i * n_frames + t`). Positions of invisible entries are
    /// replaced by NaN.
    pub fn new(
        n_tracks: usize,
        n_frames: usize,
        mut positions: Vec<Vector2<f64>>,
        visibility: Vec<bool>,
        intrinsics: Intrinsics,
        image_size: (usize, usize),
    ) -> Result<Self> {
        if n_tracks < 4 {
            return Err(Error::Validation(format!(
                "need at least 4 tracks, got {n_tracks}"
            )));
        }
        if n_frames < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 frames, got {n_frames}"
            )));
        }
        let len = n_tracks * n_frames;
        if positions.len() != len || visibility.len() != len {
            return Err(Error::Validation(format!(
                "expected {len} entries, got {} positions and {} visibility flags",
                positions.len(),
                visibility.len()
            )));
        }
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        for (idx, (p, &vis)) in positions.iter_mut().zip(&visibility).enumerate() {
            if !vis {
                *p = Vector2::new(f64::NAN, f64::NAN);
                continue;
            }
            if !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
                return Err(Error::Validation(format!(
                    "visible point of track {} frame {} at ({}, {}) lies outside the {}x{} image",
                    idx / n_frames,
                    idx % n_frames,
                    p.x,
                    p.y,
                    image_size.0,
                    image_size.1
                )));
            }
        }
        Ok(TrackSet {
            n_tracks,
            n_frames,
            positions,
            visibility,
            intrinsics,
            image_size,
        })
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    #[inline]
    pub fn position(&self, track: usize, frame: usize) -> Vector2<f64> {
        self.positions[track * self.n_frames + frame]
    }

    #[inline]
    pub fn is_visible(&self, track: usize, frame: usize) -> bool {
        self.visibility[track * self.n_frames + frame]
    }

    pub fn positions(&self) -> &[Vector2<f64>] {
        &self.positions
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    /// Tracks visible in both `t` and `u`.
    pub fn joint_visible(&self, t: usize, u: usize) -> Vec<usize> {
        (0..self.n_tracks)
            .filter(|&i| self.is_visible(i, t) && self.is_visible(i, u))
            .collect()
    }

    /// `K⁻¹·p` for a visible entry.
    pub fn ray(&self, track: usize, frame: usize) -> Vector3<f64> {
        self.intrinsics.ray(&self.position(track, frame))
    }

    /// Mean visible position of a track, or `None` if never visible.
    pub fn mean_position(&self, track: usize) -> Option<Vector2<f64>> {
        let (sum, count) = (0..self.n_frames)
            .filter(|&t| self.is_visible(track, t))
            .fold((Vector2::zeros(), 0usize), |(s, c), t| {
                (s + self.position(track, t), c + 1)
            });
        (count > 0).then(|| sum / count as f64)
    }

    /// FNV-1a hash over the track contents; seeds deterministic sampling.
    pub fn content_hash(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(&(self.n_tracks as u64).to_le_bytes());
        feed(&(self.n_frames as u64).to_le_bytes());
        for (p, v) in self.positions.iter().zip(&self.visibility) {
            if *v {
                feed(&p.x.to_bits().to_le_bytes());
                feed(&p.y.to_bits().to_le_bytes());
            }
            feed(&[u8::from(*v)]);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    #[test]
    fn invisible_positions_are_poisoned() {
        let pos = vec![Vector2::new(1.0, 1.0); 8];
        let mut vis = vec![true; 8];
        vis[3] = false;
        let ts = TrackSet::new(4, 2, pos, vis, k(), (100, 100)).unwrap();
        assert!(ts.position(1, 1).x.is_nan());
        assert_eq!(ts.position(1, 0), Vector2::new(1.0, 1.0));
        assert_eq!(ts.joint_visible(0, 1), vec![0, 2, 3]);
    }

    #[test]
    fn rejects_out_of_bounds_and_small_inputs() {
        let mut pos = vec![Vector2::new(1.0, 1.0); 8];
        pos[5] = Vector2::new(100.0, 3.0);
        assert!(TrackSet::new(4, 2, pos, vec![true; 8], k(), (100, 100)).is_err());
        let pos = vec![Vector2::new(1.0, 1.0); 6];
        assert!(TrackSet::new(3, 2, pos, vec![true; 6], k(), (100, 100)).is_err());
        let pos = vec![Vector2::new(1.0, 1.0); 4];
        assert!(TrackSet::new(4, 1, pos, vec![true; 4], k(), (100, 100)).is_err());
    }

    #[test]
    fn hash_ignores_poisoned_values_but_not_visible_ones() {
        let pos = vec![Vector2::new(1.0, 1.0); 8];
        let a = TrackSet::new(4, 2, pos.clone(), vec![true; 8], k(), (100, 100)).unwrap();
        let mut pos2 = pos;
        pos2[0].x = 1.5;
        let b = TrackSet::new(4, 2, pos2, vec![true; 8], k(), (100, 100)).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
