//! Gaussian center heatmaps and their projection onto the token grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Detection, DetectionTrackSet};
use crate::tensor_io::Tensor;
use crate::tokenizer::{TokenGrid, TubeDims};

/// Gaussian values below this are stored as exact zeros.
pub const TRUNCATION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Heatmap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Value at row `y`, column `x`.
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max_assign(&mut self, other: &Heatmap) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = a.max(b);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    ClassAgnostic,
    PerInstance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rendered {
    ClassAgnostic(Heatmap),
    PerInstance(Vec<Heatmap>),
}

/// Gaussian radius for a box: `max(w, h) / 6`, at least 1.
pub fn sigma_of_box(box_w: f64, box_h: f64) -> Result<f64> {
    if !(box_w > 0.0 && box_h > 0.0) {
        return Err(Error::NonPositiveBox { w: box_w, h: box_h });
    }
    Ok((box_w.max(box_h) / 6.0).max(1.0))
}

/// Single Gaussian peak evaluated at integer pixel coordinates.
pub fn render_gaussian(cx: f64, cy: f64, sigma: f64, height: usize, width: usize) -> Heatmap {
    let mut hm = Heatmap::zeros(height, width);
    let denom = 2.0 * sigma * sigma;
    for y in 0..height {
        let dy = y as f64 - cy;
        for x in 0..width {
            let dx = x as f64 - cx;
            let v = (-(dx * dx + dy * dy) / denom).exp();
            if v >= TRUNCATION {
                hm.values[y * width + x] = v;
            }
        }
    }
    hm
}

fn render_detection(d: &Detection, height: usize, width: usize) -> Result<Heatmap> {
    let sigma = sigma_of_box(d.box_w, d.box_h)?;
    Ok(render_gaussian(d.center_x, d.center_y, sigma, height, width))
}

pub fn render_instances(dets: &[Detection], height: usize, width: usize) -> Result<Vec<Heatmap>> {
    dets.iter().map(|d| render_detection(d, height, width)).collect()
}

/// Pixelwise max over every object's Gaussian.
pub fn render_class_agnostic(dets: &[Detection], height: usize, width: usize) -> Result<Heatmap> {
    let mut hm = Heatmap::zeros(height, width);
    for d in dets {
        hm.max_assign(&render_detection(d, height, width)?);
    }
    Ok(hm)
}

pub fn render_heatmap(dets: &[Detection], height: usize, width: usize, mode: HeatmapMode) -> Result<Rendered> {
    Ok(match mode {
        HeatmapMode::ClassAgnostic => Rendered::ClassAgnostic(render_class_agnostic(dets, height, width)?),
        HeatmapMode::PerInstance => Rendered::PerInstance(render_instances(dets, height, width)?),
    })
}

/// One non-negative objectness score per token, in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores(pub Vec<f64>);

impl TokenScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn grid_for(heatmaps: &[Heatmap], tube: TubeDims) -> Result<TokenGrid> {
    let (h, w) = heatmaps.first().map_or((0, 0), |m| (m.height, m.width));
    if heatmaps.iter().any(|m| m.height != h || m.width != w) {
        return Err(Error::Shape("heatmaps differ in size".into()));
    }
    TokenGrid::new(heatmaps.len(), h, w, tube)
}

/// Sum of a heatmap over the spatial footprint of token column `(hi, wi)`.
fn spatial_sum(hm: &Heatmap, tube: TubeDims, hi: usize, wi: usize) -> f64 {
    let mut s = 0.0;
    for y in hi * tube.dh..(hi + 1) * tube.dh {
        let row = &hm.values[y * hm.width + wi * tube.dw..y * hm.width + (wi + 1) * tube.dw];
        s += row.iter().sum::<f64>();
    }
    s
}

/// Score of each tubelet = sum of every heatmap value it covers.
pub fn project_to_tubelets(heatmaps: &[Heatmap], tube: TubeDims) -> Result<TokenScores> {
    let grid = grid_for(heatmaps, tube)?;
    let mut scores = vec![0.0; grid.n()];
    for (i, s) in scores.iter_mut().enumerate() {
        let [ti, hi, wi] = grid.coord(i);
        *s = (ti * tube.dt..(ti + 1) * tube.dt)
            .map(|t| spatial_sum(&heatmaps[t], tube, hi, wi))
            .sum();
    }
    Ok(TokenScores(scores))
}

/// Class-agnostic objectness scores for a whole video's detections.
pub fn objectness_scores(set: &DetectionTrackSet, grid: &TokenGrid) -> Result<TokenScores> {
    if set.frames.len() > grid.frames() {
        return Err(Error::Shape(format!(
            "{} detection frames for a {}-frame grid",
            set.frames.len(),
            grid.frames()
        )));
    }
    let heatmaps = (0..grid.frames())
        .map(|t| {
            let dets = set.frames.get(t).map_or(&[][..], Vec::as_slice);
            render_class_agnostic(dets, grid.height(), grid.width())
        })
        .collect::<Result<Vec<_>>>()?;
    project_to_tubelets(&heatmaps, grid.tube)
}

/// Identity of an object across frames: its track id when tracked, else its
/// position within the frame's detection list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectKey {
    Track(usize),
    Slot(usize),
}

impl ObjectKey {
    pub fn of(d: &Detection, index_in_frame: usize) -> Self {
        match d.track_id {
            Some(id) => ObjectKey::Track(id),
            None => ObjectKey::Slot(index_in_frame),
        }
    }

    pub fn track(&self) -> Option<usize> {
        match *self {
            ObjectKey::Track(id) => Some(id),
            ObjectKey::Slot(_) => None,
        }
    }
}

/// Per-instance heatmaps of every frame, keyed by object.
pub type InstanceFrames = Vec<Vec<(ObjectKey, Heatmap)>>;

pub fn instance_heatmaps(set: &DetectionTrackSet, grid: &TokenGrid) -> Result<InstanceFrames> {
    (0..grid.frames())
        .map(|t| {
            let dets = set.frames.get(t).map_or(&[][..], Vec::as_slice);
            dets.iter()
                .enumerate()
                .map(|(i, d)| Ok((ObjectKey::of(d, i), render_detection(d, grid.height(), grid.width())?)))
                .collect()
        })
        .collect()
}

/// Object-to-token affinities restricted to a set of surviving tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    /// Objects in ascending key order.
    pub objects: Vec<ObjectKey>,
    /// Surviving flat token indices, one column each.
    pub tokens: Vec<usize>,
    /// `values[o][j]` = affinity of object `o` with token `tokens[j]`.
    pub values: Vec<Vec<f64>>,
}

impl Affinity {
    /// Object `o`'s nonzero entries among the columns of token-frame `ti`.
    pub fn support(&self, grid: &TokenGrid, o: usize, ti: usize) -> Vec<(usize, f64)> {
        self.tokens
            .iter()
            .zip(&self.values[o])
            .enumerate()
            .filter(|(_, (&n, &v))| grid.coord(n)[0] == ti && v > 0.0)
            .map(|(j, (_, &v))| (j, v))
            .collect()
    }
}

/// Affinity of object `o` with token `n`: the per-instance heatmap summed
/// over the token's pixels and averaged over its frames (frames where `o` is
/// absent contribute zero).
pub fn project_instance_affinity(frames: &InstanceFrames, tube: TubeDims, surviving: &[usize]) -> Result<Affinity> {
    let Some((h, w)) = frames.iter().flatten().next().map(|(_, m)| (m.height, m.width)) else {
        // no objects anywhere: nothing to project, and no frame size to check against
        return Ok(Affinity {
            objects: Vec::new(),
            tokens: surviving.to_vec(),
            values: Vec::new(),
        });
    };
    let grid = TokenGrid::new(frames.len().max(tube.dt), h, w, tube)?;
    if frames.len() != grid.frames() {
        return Err(Error::Shape("frame count not divisible by dt".into()));
    }
    if let Some(&bad) = surviving.iter().find(|&&n| n >= grid.n()) {
        return Err(Error::Shape(format!("token index {bad} outside grid of {}", grid.n())));
    }
    let mut objects: Vec<ObjectKey> = frames.iter().flatten().map(|(k, _)| *k).collect();
    objects.sort();
    objects.dedup();
    let mut values = vec![vec![0.0; surviving.len()]; objects.len()];
    let inv_dt = 1.0 / tube.dt as f64;
    for (j, &n) in surviving.iter().enumerate() {
        let [ti, hi, wi] = grid.coord(n);
        for t in ti * tube.dt..(ti + 1) * tube.dt {
            for (key, hm) in &frames[t] {
                let o = objects.binary_search(key).expect("key collected above");
                values[o][j] += spatial_sum(hm, tube, hi, wi) * inv_dt;
            }
        }
    }
    Ok(Affinity {
        objects,
        tokens: surviving.to_vec(),
        values,
    })
}

/// Debug dump of per-frame heatmaps as a `(t, h, w, 1)` tensor.
pub fn heatmaps_to_tensor(heatmaps: &[Heatmap]) -> Tensor {
    let (h, w) = heatmaps.first().map_or((0, 0), |m| (m.height, m.width));
    let data = heatmaps.iter().flat_map(|m| m.values.iter().map(|&v| v as f32)).collect();
    Tensor::f32(vec![heatmaps.len() as u64, h as u64, w as u64, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, SynthConfig};
    use proptest::prelude::*;

    fn det(frame: usize, cx: f64, cy: f64, w: f64, h: f64, track: Option<usize>) -> Detection {
        Detection {
            frame,
            center_x: cx,
            center_y: cy,
            box_w: w,
            box_h: h,
            track_id: track,
        }
    }

    #[test]
    fn sigma_rule() {
        assert_eq!(sigma_of_box(60.0, 30.0).unwrap(), 10.0);
        assert_eq!(sigma_of_box(3.0, 3.0).unwrap(), 1.0);
        assert!(sigma_of_box(0.0, 3.0).is_err());
        assert!(sigma_of_box(3.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn sigma_monotone(w in 0.01..500.0f64, h in 0.01..500.0f64, k in 1.0..4.0f64) {
            prop_assert!(sigma_of_box(k * w, k * h).unwrap() >= sigma_of_box(w, h).unwrap());
            prop_assert!(sigma_of_box(w + k, h).unwrap() >= sigma_of_box(w, h).unwrap());
        }

        #[test]
        fn nearest_pixel_bound(cx in 0.0..31.0f64, cy in 0.0..31.0f64, s in 1.0..5.0f64) {
            let hm = render_gaussian(cx, cy, s, 32, 32);
            let v = hm.at(cy.round() as usize, cx.round() as usize);
            prop_assert!(v >= (-0.5 / (s * s)).exp() - 1e-15);
            prop_assert!(hm.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(hm.values.iter().all(|&x| x <= v));
        }
    }

    #[test]
    fn gaussian_spot_values() {
        let hm = render_gaussian(5.0, 5.0, 2.0, 12, 12);
        assert_eq!(hm.at(5, 5), 1.0);
        assert!((hm.at(5, 7) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((hm.at(5, 7) - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn class_agnostic_is_max_of_instances() {
        let dets = [det(0, 4.0, 5.0, 6.0, 6.0, None), det(0, 9.5, 7.0, 12.0, 9.0, None)];
        let agn = render_class_agnostic(&dets, 16, 16).unwrap();
        let inst = render_instances(&dets, 16, 16).unwrap();
        for i in 0..agn.values.len() {
            assert_eq!(agn.values[i], inst[0].values[i].max(inst[1].values[i]));
        }
        assert_eq!(render_class_agnostic(&[], 8, 8).unwrap(), Heatmap::zeros(8, 8));
        assert_eq!(
            render_heatmap(&[], 8, 8, HeatmapMode::PerInstance).unwrap(),
            Rendered::PerInstance(vec![])
        );
    }

    #[test]
    fn projection_sums_tube_pixels() {
        let hm = Heatmap {
            height: 2,
            width: 2,
            values: vec![1.0, 0.5, 0.2, 0.3],
        };
        let s = project_to_tubelets(&[hm], TubeDims::new(1, 2, 2)).unwrap();
        assert_eq!(s.0, vec![2.0]);

        let uniform = Heatmap {
            height: 4,
            width: 4,
            values: vec![0.25; 16],
        };
        let s = project_to_tubelets(&[uniform.clone(), uniform], TubeDims::new(2, 2, 2)).unwrap();
        assert_eq!(s.0, vec![0.25 * 8.0; 4]);

        let zero = project_to_tubelets(&[Heatmap::zeros(4, 4)], TubeDims::new(1, 2, 2)).unwrap();
        assert!(zero.0.iter().all(|&v| v == 0.0));

        assert!(project_to_tubelets(&[Heatmap::zeros(5, 4)], TubeDims::new(1, 2, 2)).is_err());
    }

    #[test]
    fn scores_within_range() {
        let cfg = SynthConfig {
            num_objects: 3,
            ..SynthConfig::default()
        };
        let grid = TokenGrid::new(8, 32, 32, TubeDims::new(2, 8, 8)).unwrap();
        for seed in 0..5 {
            let (_, set, _) = generate_video(&cfg, seed).unwrap();
            let s = objectness_scores(&set, &grid).unwrap();
            let cap = (grid.tube.volume() * cfg.num_objects) as f64;
            assert!(s.0.iter().all(|&v| (0.0..=cap).contains(&v)));
        }
    }

    #[test]
    fn disjoint_supports_add_up() {
        // sigma 1, truncation radius ~7.4 px: centers 16 px apart in separate tokens
        let a = det(0, 3.0, 3.0, 3.0, 3.0, None);
        let b = det(0, 27.0, 27.0, 3.0, 3.0, None);
        let tube = TubeDims::new(1, 16, 16);
        let joint = project_to_tubelets(&[render_class_agnostic(&[a, b], 32, 32).unwrap()], tube).unwrap();
        let sa = project_to_tubelets(&[render_class_agnostic(&[a], 32, 32).unwrap()], tube).unwrap();
        let sb = project_to_tubelets(&[render_class_agnostic(&[b], 32, 32).unwrap()], tube).unwrap();
        for i in 0..joint.len() {
            assert_eq!(joint.0[i], sa.0[i] + sb.0[i]);
        }
    }

    #[test]
    fn one_hot_heatmap_affinity_is_local() {
        let mut hm = Heatmap::zeros(4, 4);
        hm.values[1 * 4 + 2] = 1.0; // inside token (0, 0, 1) for 2x2 tubes
        let frames: InstanceFrames = vec![vec![(ObjectKey::Slot(0), hm)]];
        let aff = project_instance_affinity(&frames, TubeDims::new(1, 2, 2), &[0, 1, 2, 3]).unwrap();
        assert_eq!(aff.values, vec![vec![0.0, 1.0, 0.0, 0.0]]);
    }

    #[test]
    fn affinity_restriction_commutes() {
        let grid = TokenGrid::new(4, 4, 4, TubeDims::new(2, 2, 2)).unwrap();
        let set = DetectionTrackSet::from_detections(
            4,
            (0..4).flat_map(|t| {
                [
                    det(t, 1.0 + t as f64 * 0.5, 1.0, 3.0, 3.0, Some(0)),
                    det(t, 2.5, 2.0 + t as f64 * 0.3, 9.0, 6.0, Some(1)),
                ]
            }),
        )
        .unwrap();
        let frames = instance_heatmaps(&set, &grid).unwrap();
        let all: Vec<usize> = (0..grid.n()).collect();
        let full = project_instance_affinity(&frames, grid.tube, &all).unwrap();
        // every subset of the 8 tokens
        for mask in 0u32..256 {
            let keep: Vec<usize> = (0..8).filter(|i| mask & (1 << i) != 0).collect();
            let direct = project_instance_affinity(&frames, grid.tube, &keep).unwrap();
            for o in 0..2 {
                let restricted: Vec<f64> = keep.iter().map(|&n| full.values[o][n]).collect();
                assert_eq!(direct.values[o], restricted);
            }
        }
    }

    #[test]
    fn absent_object_has_zero_affinity_in_other_frames() {
        let grid = TokenGrid::new(4, 4, 4, TubeDims::new(2, 2, 2)).unwrap();
        let set = DetectionTrackSet::from_detections(4, [det(0, 1.0, 1.0, 3.0, 3.0, Some(0))]).unwrap();
        let frames = instance_heatmaps(&set, &grid).unwrap();
        let aff = project_instance_affinity(&frames, grid.tube, &(0..8).collect::<Vec<_>>()).unwrap();
        assert!(aff.values[0][4..].iter().all(|&v| v == 0.0));
        assert!(aff.support(&grid, 0, 1).is_empty());
        // token 0 sees the peak in one of its two frames: mean over time halves it
        let peak_sum: f64 = (0..2).flat_map(|y| (0..2).map(move |x| (y, x))).map(|(y, x)| frames[0][0].1.at(y, x)).sum();
        assert!((aff.values[0][0] - peak_sum / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_survivors_give_empty_rows() {
        let grid = TokenGrid::new(2, 4, 4, TubeDims::new(2, 2, 2)).unwrap();
        let set = DetectionTrackSet::from_detections(2, [det(0, 1.0, 1.0, 3.0, 3.0, Some(0))]).unwrap();
        let frames = instance_heatmaps(&set, &grid).unwrap();
        let aff = project_instance_affinity(&frames, grid.tube, &[]).unwrap();
        assert_eq!(aff.values, vec![Vec::<f64>::new()]);
        assert!(aff.support(&grid, 0, 0).is_empty());
    }
}
