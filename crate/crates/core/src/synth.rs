//! Seeded synthetic videos of moving sprites with ground-truth boxes.
//!
//! Each video contains one designated sprite (always rendered in the target
//! color) whose motion pattern is the class label, plus distractor sprites in
//! other colors moving with randomly chosen patterns. Recognizing the class
//! therefore requires looking at the designated object's tokens.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Dense `(t, h, w, 3)` pixel volume with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub t_frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoTensor {
    pub fn zeros(t_frames: usize, height: usize, width: usize) -> Self {
        VideoTensor {
            t_frames,
            height,
            width,
            data: vec![0.0; t_frames * height * width * CHANNELS],
        }
    }

    pub fn from_data(t_frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let v = VideoTensor {
            t_frames,
            height,
            width,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.t_frames * self.height * self.width * CHANNELS;
        if self.data.len() != want {
            return Err(Error::Shape(format!(
                "video data has {} values, expected {want}",
                self.data.len()
            )));
        }
        if let Some(v) = self
            .data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    /// New video made of the given source frames, in order.
    pub fn select_frames(&self, frames: &[usize]) -> VideoTensor {
        let frame_len = self.height * self.width * CHANNELS;
        let mut data = Vec::with_capacity(frames.len() * frame_len);
        for &f in frames {
            data.extend_from_slice(&self.data[f * frame_len..(f + 1) * frame_len]);
        }
        VideoTensor {
            t_frames: frames.len(),
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// An axis-aligned box in continuous pixel coordinates, stored by center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }
}

/// One object box in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub box_w: f64,
    pub box_h: f64,
    pub track_id: Option<usize>,
}

impl Detection {
    pub fn bbox(&self) -> BoxXywh {
        BoxXywh {
            cx: self.center_x,
            cy: self.center_y,
            w: self.box_w,
            h: self.box_h,
        }
    }

    pub fn from_box(frame: usize, b: BoxXywh, track_id: Option<usize>) -> Self {
        Detection {
            frame,
            center_x: b.cx,
            center_y: b.cy,
            box_w: b.w,
            box_h: b.h,
            track_id,
        }
    }
}

/// Detections grouped by frame; `frames[t]` holds every box of frame `t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionTrackSet {
    pub frames: Vec<Vec<Detection>>,
    pub num_tracks: usize,
}

impl DetectionTrackSet {
    pub fn empty(t_frames: usize) -> Self {
        DetectionTrackSet {
            frames: vec![Vec::new(); t_frames],
            num_tracks: 0,
        }
    }

    /// Groups detections by their `frame` field. `num_tracks` is one past the
    /// largest track id seen.
    pub fn from_detections(t_frames: usize, dets: impl IntoIterator<Item = Detection>) -> Result<Self> {
        let mut frames = vec![Vec::new(); t_frames];
        let mut num_tracks = 0;
        for d in dets {
            if d.frame >= frames.len() {
                frames.resize(d.frame + 1, Vec::new());
            }
            if let Some(id) = d.track_id {
                num_tracks = num_tracks.max(id + 1);
            }
            frames[d.frame].push(d);
        }
        let set = DetectionTrackSet { frames, num_tracks };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (t, dets) in self.frames.iter().enumerate() {
            let mut seen = Vec::new();
            for d in dets {
                if d.frame != t {
                    return Err(Error::InvalidConfig(format!(
                        "detection for frame {} stored under frame {t}",
                        d.frame
                    )));
                }
                if !(d.box_w > 0.0 && d.box_h > 0.0) {
                    return Err(Error::NonPositiveBox { w: d.box_w, h: d.box_h });
                }
                if let Some(id) = d.track_id {
                    if id >= self.num_tracks {
                        return Err(Error::InvalidConfig(format!(
                            "track id {id} >= num_tracks {}",
                            self.num_tracks
                        )));
                    }
                    if seen.contains(&id) {
                        return Err(Error::InvalidConfig(format!(
                            "duplicate track id {id} in frame {t}"
                        )));
                    }
                    seen.push(id);
                }
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Detection> {
        self.frames.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the given source frames (renumbered 0..) in order.
    pub fn select_frames(&self, frames: &[usize]) -> DetectionTrackSet {
        let frames = frames
            .iter()
            .enumerate()
            .map(|(new_t, &f)| {
                self.frames
                    .get(f)
                    .map(|dets| {
                        dets.iter()
                            .map(|d| Detection { frame: new_t, ..*d })
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        DetectionTrackSet {
            frames,
            num_tracks: self.num_tracks,
        }
    }

    /// Same boxes with every track id removed.
    pub fn without_tracks(&self) -> DetectionTrackSet {
        DetectionTrackSet {
            frames: self
                .frames
                .iter()
                .map(|f| f.iter().map(|d| Detection { track_id: None, ..*d }).collect())
                .collect(),
            num_tracks: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    #[default]
    Square,
    Disc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub t_frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub num_classes: usize,
    pub sprite_kind: SpriteKind,
    pub noise_std: f64,
    /// Sprite side length (square) or diameter (disc) in pixels.
    pub sprite_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            t_frames: 8,
            height: 32,
            width: 32,
            num_objects: 2,
            num_classes: 4,
            sprite_kind: SpriteKind::Square,
            noise_std: 0.05,
            sprite_size: 6,
        }
    }
}

/// Motion patterns, indexed by class label.
pub const MOTION_PATTERNS: [&str; 6] = [
    "left-right",
    "up-down",
    "circular",
    "static",
    "diagonal",
    "anti-diagonal",
];

const TARGET_COLOR: [f32; 3] = [0.95, 0.2, 0.15];
const DISTRACTOR_COLORS: [[f32; 3]; 4] = [
    [0.15, 0.85, 0.25],
    [0.2, 0.35, 0.95],
    [0.2, 0.85, 0.9],
    [0.8, 0.8, 0.8],
];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects < 1 {
            return Err(Error::InvalidConfig("num_objects must be >= 1".into()));
        }
        if self.num_classes < 2 || self.num_classes > MOTION_PATTERNS.len() {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in [2, {}]",
                MOTION_PATTERNS.len()
            )));
        }
        if self.t_frames == 0 {
            return Err(Error::InvalidConfig("t_frames must be >= 1".into()));
        }
        if self.sprite_size == 0 || self.sprite_size + 4 > self.height.min(self.width) {
            return Err(Error::InvalidConfig(format!(
                "sprite of size {} does not fit a {}x{} frame with room to move",
                self.sprite_size, self.height, self.width
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn amplitude(&self) -> f64 {
        ((self.height.min(self.width) - self.sprite_size) as f64 / 4.0).max(1.0)
    }
}

/// Continuous sprite center at each frame for the given motion pattern.
fn trajectory(pattern: usize, center: (f64, f64), amp: f64, phase: f64, t_frames: usize) -> Vec<(f64, f64)> {
    (0..t_frames)
        .map(|t| {
            let a = 2.0 * PI * t as f64 / t_frames as f64 + phase;
            let (s, c) = a.sin_cos();
            let (dx, dy) = match pattern {
                0 => (amp * s, 0.0),
                1 => (0.0, amp * s),
                2 => (amp * c, amp * s),
                3 => (0.0, 0.0),
                4 => (amp * s * 0.75, amp * s * 0.75),
                _ => (amp * s * 0.75, -amp * s * 0.75),
            };
            (center.0 + dx, center.1 + dy)
        })
        .collect()
}

/// Pixel mask of a sprite whose bounding square starts at `(x0, y0)`.
fn sprite_pixels(kind: SpriteKind, size: usize, x0: usize, y0: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::with_capacity(size * size);
    let c = (size as f64 - 1.0) / 2.0;
    let r2 = (size as f64 / 2.0).powi(2);
    for dy in 0..size {
        for dx in 0..size {
            let inside = match kind {
                SpriteKind::Square => true,
                SpriteKind::Disc => (dx as f64 - c).powi(2) + (dy as f64 - c).powi(2) <= r2,
            };
            if inside {
                px.push((x0 + dx, y0 + dy));
            }
        }
    }
    px
}

/// Tight box around a pixel set; a pixel at integer `(x, y)` covers
/// `[x - 0.5, x + 0.5]`.
fn tight_box(pixels: &[(usize, usize)]) -> BoxXywh {
    let min_x = pixels.iter().map(|p| p.0).min().unwrap() as f64;
    let max_x = pixels.iter().map(|p| p.0).max().unwrap() as f64;
    let min_y = pixels.iter().map(|p| p.1).min().unwrap() as f64;
    let max_y = pixels.iter().map(|p| p.1).max().unwrap() as f64;
    BoxXywh {
        cx: (min_x + max_x) / 2.0,
        cy: (min_y + max_y) / 2.0,
        w: max_x - min_x + 1.0,
        h: max_y - min_y + 1.0,
    }
}

/// Renders one video. Returns the pixels, one track per object and the
/// label (the motion pattern of the target-colored sprite).
pub fn generate_video(cfg: &SynthConfig, seed: u64) -> Result<(VideoTensor, DetectionTrackSet, usize)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = rng.gen_range(0..cfg.num_classes);
    let amp = cfg.amplitude();
    let size = cfg.sprite_size;
    let half = size as f64 / 2.0;

    let mut track_ids: Vec<usize> = (0..cfg.num_objects).collect();
    track_ids.shuffle(&mut rng);

    // object 0 is the designated one; it is drawn last so it stays visible
    struct Obj {
        track: usize,
        color: [f32; 3],
        path: Vec<(f64, f64)>,
    }
    let mut objects = Vec::with_capacity(cfg.num_objects);
    for o in 0..cfg.num_objects {
        let pattern = if o == 0 {
            label
        } else {
            rng.gen_range(0..cfg.num_classes)
        };
        let lo_x = half + amp;
        let hi_x = (cfg.width as f64 - half - amp).max(lo_x);
        let lo_y = half + amp;
        let hi_y = (cfg.height as f64 - half - amp).max(lo_y);
        let center = (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
        let phase = rng.gen_range(0.0..2.0 * PI);
        let color = if o == 0 {
            TARGET_COLOR
        } else {
            DISTRACTOR_COLORS[rng.gen_range(0..DISTRACTOR_COLORS.len())]
        };
        objects.push(Obj {
            track: track_ids[o],
            color,
            path: trajectory(pattern, center, amp, phase, cfg.t_frames),
        });
    }

    let mut video = VideoTensor::zeros(cfg.t_frames, cfg.height, cfg.width);
    let bg: [f32; 3] = [
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
    ];
    for px in video.data.chunks_exact_mut(CHANNELS) {
        px.copy_from_slice(&bg);
    }

    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); cfg.t_frames];
    for obj in objects.iter().rev() {
        for (t, &(cx, cy)) in obj.path.iter().enumerate() {
            let max_x0 = (cfg.width - size) as f64;
            let max_y0 = (cfg.height - size) as f64;
            let x0 = (cx - (size as f64 - 1.0) / 2.0).round().clamp(0.0, max_x0) as usize;
            let y0 = (cy - (size as f64 - 1.0) / 2.0).round().clamp(0.0, max_y0) as usize;
            let pixels = sprite_pixels(cfg.sprite_kind, size, x0, y0);
            for &(x, y) in &pixels {
                for c in 0..CHANNELS {
                    let i = video.index(t, y, x, c);
                    video.data[i] = obj.color[c];
                }
            }
            frames[t].push(Detection::from_box(t, tight_box(&pixels), Some(obj.track)));
        }
    }
    for dets in &mut frames {
        dets.sort_by_key(|d| d.track_id);
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("valid std");
        for v in &mut video.data {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    let set = DetectionTrackSet {
        frames,
        num_tracks: cfg.num_objects,
    };
    Ok((video, set, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> SynthConfig {
        SynthConfig {
            noise_std: 0.0,
            num_objects: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        let a = generate_video(&cfg, 17).unwrap();
        let b = generate_video(&cfg, 17).unwrap();
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let c = generate_video(&cfg, 18).unwrap();
        assert_ne!(a.0.data, c.0.data);
    }

    #[test]
    fn two_objects_give_two_tracks_of_eight_boxes() {
        let cfg = SynthConfig {
            num_objects: 2,
            t_frames: 8,
            ..SynthConfig::default()
        };
        let (_, set, label) = generate_video(&cfg, 3).unwrap();
        assert!(label < cfg.num_classes);
        assert_eq!(set.num_tracks, 2);
        assert_eq!(set.frames.len(), 8);
        for t in 0..8 {
            let mut ids: Vec<_> = set.frames[t].iter().map(|d| d.track_id.unwrap()).collect();
            ids.sort();
            assert_eq!(ids, vec![0, 1]);
        }
    }

    /// Brute-force scan for the target-colored pixels.
    fn sprite_centroid(video: &VideoTensor, t: usize) -> (f64, f64, usize) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..video.height {
            for x in 0..video.width {
                let px = [video.get(t, y, x, 0), video.get(t, y, x, 1), video.get(t, y, x, 2)];
                if px == TARGET_COLOR {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (sx / n as f64, sy / n as f64, n)
    }

    #[test]
    fn pixel_centroid_matches_box_center() {
        for kind in [SpriteKind::Square, SpriteKind::Disc] {
            let cfg = SynthConfig {
                sprite_kind: kind,
                ..noiseless()
            };
            for seed in 0..20 {
                let (video, set, _) = generate_video(&cfg, seed).unwrap();
                for t in 0..cfg.t_frames {
                    let (cx, cy, n) = sprite_centroid(&video, t);
                    assert!(n > 0);
                    let d = set.frames[t][0];
                    assert!((cx - d.center_x).abs() <= 1.0, "{kind:?} seed {seed} t {t}");
                    assert!((cy - d.center_y).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn boxes_are_tight() {
        for kind in [SpriteKind::Square, SpriteKind::Disc] {
            let cfg = SynthConfig {
                sprite_kind: kind,
                sprite_size: 7,
                ..noiseless()
            };
            for seed in 0..10 {
                let (video, set, _) = generate_video(&cfg, seed).unwrap();
                for t in 0..cfg.t_frames {
                    let b = set.frames[t][0].bbox();
                    let mut touches = [false; 4];
                    for y in 0..video.height {
                        for x in 0..video.width {
                            let px = [video.get(t, y, x, 0), video.get(t, y, x, 1), video.get(t, y, x, 2)];
                            if px != TARGET_COLOR {
                                continue;
                            }
                            let (xf, yf) = (x as f64, y as f64);
                            assert!(xf - 0.5 >= b.x0() && xf + 0.5 <= b.x1());
                            assert!(yf - 0.5 >= b.y0() && yf + 0.5 <= b.y1());
                            touches[0] |= xf - 0.5 == b.x0();
                            touches[1] |= xf + 0.5 == b.x1();
                            touches[2] |= yf - 0.5 == b.y0();
                            touches[3] |= yf + 0.5 == b.y1();
                        }
                    }
                    assert_eq!(touches, [true; 4], "{kind:?} seed {seed} t {t}");
                }
            }
        }
    }

    #[test]
    fn values_stay_in_unit_range_and_centers_in_frame() {
        let cfg = SynthConfig {
            noise_std: 0.3,
            num_objects: 3,
            ..SynthConfig::default()
        };
        for seed in 0..5 {
            let (video, set, _) = generate_video(&cfg, seed).unwrap();
            video.validate().unwrap();
            for d in set.iter() {
                assert!(d.center_x >= 0.0 && d.center_x < cfg.width as f64);
                assert!(d.center_y >= 0.0 && d.center_y < cfg.height as f64);
            }
        }
    }

    #[test]
    fn rejects_sprites_that_do_not_fit() {
        let cfg = SynthConfig {
            sprite_size: 30,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_video(&cfg, 0), Err(Error::InvalidConfig(_))));
        let cfg = SynthConfig {
            num_objects: 0,
            ..SynthConfig::default()
        };
        assert!(generate_video(&cfg, 0).is_err());
    }

    #[test]
    fn label_drives_the_target_motion() {
        let cfg = SynthConfig {
            t_frames: 16,
            ..noiseless()
        };
        for seed in 0..30 {
            let (_, set, label) = generate_video(&cfg, seed).unwrap();
            let xs: Vec<f64> = set.frames.iter().map(|f| f[0].center_x).collect();
            let ys: Vec<f64> = set.frames.iter().map(|f| f[0].center_y).collect();
            let range = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
            match label {
                0 => assert!(range(&xs) > 4.0 && range(&ys) == 0.0),
                1 => assert!(range(&ys) > 4.0 && range(&xs) == 0.0),
                2 => assert!(range(&xs) > 4.0 && range(&ys) > 4.0),
                3 => assert!(range(&xs) == 0.0 && range(&ys) == 0.0),
                _ => unreachable!(),
            }
        }
    }
}
