//! Box overlap and greedy frame-to-frame identity linking.

use crate::synth::{BoxXywh, Detection, DetectionTrackSet};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BoxXywh, b: &BoxXywh) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Assigns track ids by matching each frame's boxes to the previous frame's.
///
/// Candidate pairs are taken in order of decreasing IoU (ties by previous
/// index, then current index); a pair is accepted when both sides are still
/// free and the IoU reaches `iou_threshold`. Unmatched boxes open new tracks.
/// Input track ids are ignored.
pub fn link_tracks(frames: &[Vec<Detection>], iou_threshold: f64) -> DetectionTrackSet {
    let mut out: Vec<Vec<Detection>> = Vec::with_capacity(frames.len());
    let mut next_id = 0usize;
    for (t, dets) in frames.iter().enumerate() {
        let mut assigned: Vec<Option<usize>> = vec![None; dets.len()];
        if let Some(prev) = out.last() {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (pi, p) in prev.iter().enumerate() {
                for (ci, c) in dets.iter().enumerate() {
                    let v = iou(&p.bbox(), &c.bbox());
                    if v >= iou_threshold && v > 0.0 {
                        pairs.push((v, pi, ci));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut prev_used = vec![false; prev.len()];
            for (_, pi, ci) in pairs {
                if !prev_used[pi] && assigned[ci].is_none() {
                    prev_used[pi] = true;
                    assigned[ci] = prev[pi].track_id;
                }
            }
        }
        let linked = dets
            .iter()
            .zip(assigned)
            .map(|(d, id)| {
                let id = id.unwrap_or_else(|| {
                    next_id += 1;
                    next_id - 1
                });
                Detection {
                    frame: t,
                    track_id: Some(id),
                    ..*d
                }
            })
            .collect();
        out.push(linked);
    }
    DetectionTrackSet {
        frames: out,
        num_tracks: next_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, SynthConfig};
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxXywh {
        BoxXywh { cx, cy, w, h }
    }

    fn det(frame: usize, bx: BoxXywh) -> Detection {
        Detection::from_box(frame, bx, None)
    }

    fn track_lengths(set: &DetectionTrackSet) -> Vec<usize> {
        let mut lens = vec![0; set.num_tracks];
        for d in set.iter() {
            lens[d.track_id.unwrap()] += 1;
        }
        lens
    }

    #[test]
    fn iou_examples() {
        let a = b(5.0, 5.0, 4.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(50.0, 5.0, 4.0, 2.0)), 0.0);
        let v = iou(&b(1.0, 1.0, 2.0, 2.0), &b(2.0, 2.0, 2.0, 2.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_box_is_one_track() {
        let frames: Vec<_> = (0..8).map(|t| vec![det(t, b(10.0, 10.0, 6.0, 6.0))]).collect();
        let set = link_tracks(&frames, 0.3);
        assert_eq!(set.num_tracks, 1);
        assert_eq!(track_lengths(&set), vec![8]);
    }

    #[test]
    fn disjoint_boxes_are_two_tracks() {
        let frames: Vec<_> = (0..8)
            .map(|t| {
                vec![
                    det(t, b(5.0, 5.0, 4.0, 4.0)),
                    det(t, b(25.0, 25.0, 4.0, 4.0)),
                ]
            })
            .collect();
        let set = link_tracks(&frames, 0.3);
        assert_eq!(set.num_tracks, 2);
        assert_eq!(track_lengths(&set), vec![8, 8]);
    }

    /// Exhaustive search over all id sequences that change at most once,
    /// maximizing summed IoU of consecutive same-id boxes above threshold.
    fn best_split(boxes: &[BoxXywh], thr: f64) -> Vec<usize> {
        let mut best = (f64::MIN, usize::MAX, vec![]);
        for cut in 1..=boxes.len() {
            let mut score = 0.0;
            let mut ok = true;
            for t in 1..boxes.len() {
                let v = iou(&boxes[t - 1], &boxes[t]);
                if t == cut {
                    continue;
                }
                if v < thr {
                    ok = false;
                }
                score += v;
            }
            let tracks = if cut == boxes.len() { 1 } else { 2 };
            if ok && (score > best.0 || (score == best.0 && tracks < best.1)) {
                let lens = if cut == boxes.len() { vec![cut] } else { vec![cut, boxes.len() - cut] };
                best = (score, tracks, lens);
            }
        }
        best.2
    }

    #[test]
    fn teleport_splits_into_two_tracks() {
        let boxes: Vec<_> = (0..8)
            .map(|t| if t < 4 { b(5.0, 5.0, 4.0, 4.0) } else { b(20.0, 20.0, 4.0, 4.0) })
            .collect();
        let frames: Vec<_> = boxes.iter().enumerate().map(|(t, &bx)| vec![det(t, bx)]).collect();
        let set = link_tracks(&frames, 0.3);
        let oracle = best_split(&boxes, 0.3);
        assert_eq!(oracle, vec![4, 4]);
        assert_eq!(track_lengths(&set), oracle);
    }

    #[test]
    fn relinking_generated_tracks_preserves_partition() {
        let cfg = SynthConfig {
            num_objects: 3,
            ..SynthConfig::default()
        };
        for seed in 0..10 {
            let (_, set, _) = generate_video(&cfg, seed).unwrap();
            let once = link_tracks(&set.frames, DEFAULT_IOU_THRESHOLD);
            let twice = link_tracks(&once.frames, DEFAULT_IOU_THRESHOLD);
            assert_eq!(once, twice);
        }
    }

    fn arb_box() -> impl Strategy<Value = BoxXywh> {
        (0.0..40.0f64, 0.0..40.0f64, 0.5..20.0f64, 0.5..20.0f64).prop_map(|(cx, cy, w, h)| b(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_bounded_and_symmetric(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&c, &a));
        }
    }
}
