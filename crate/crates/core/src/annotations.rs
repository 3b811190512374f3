//! JSON-lines annotation files: one detection per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Detection, DetectionTrackSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub video_id: String,
    pub frame: usize,
    pub track: Option<usize>,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl AnnotationLine {
    pub fn from_detection(video_id: &str, d: &Detection) -> Self {
        AnnotationLine {
            video_id: video_id.to_string(),
            frame: d.frame,
            track: d.track_id,
            cx: d.center_x,
            cy: d.center_y,
            w: d.box_w,
            h: d.box_h,
        }
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            frame: self.frame,
            center_x: self.cx,
            center_y: self.cy,
            box_w: self.w,
            box_h: self.h,
            track_id: self.track,
        }
    }
}

/// Writes every detection of `set` as one line.
pub fn write_lines<W: Write>(mut out: W, video_id: &str, set: &DetectionTrackSet) -> Result<()> {
    for d in set.iter() {
        serde_json::to_writer(&mut out, &AnnotationLine::from_detection(video_id, d))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses annotation lines, grouping detections per video in order of first
/// appearance. Blank lines are skipped.
pub fn read_lines<R: BufRead>(input: R) -> Result<Vec<(String, DetectionTrackSet)>> {
    let mut videos: Vec<(String, Vec<Detection>)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !(rec.w > 0.0 && rec.h > 0.0) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("non-positive box size {}x{}", rec.w, rec.h),
            });
        }
        let det = rec.to_detection();
        match videos.iter_mut().find(|(id, _)| *id == rec.video_id) {
            Some((_, dets)) => dets.push(det),
            None => videos.push((rec.video_id, vec![det])),
        }
    }
    videos
        .into_iter()
        .map(|(id, dets)| {
            let t = dets.iter().map(|d| d.frame + 1).max().unwrap_or(0);
            Ok((id, DetectionTrackSet::from_detections(t, dets)?))
        })
        .collect()
}

pub fn write_annotations(path: impl AsRef<Path>, video_id: &str, set: &DetectionTrackSet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_lines(&mut out, video_id, set)?;
    out.flush()?;
    Ok(())
}

/// Reads a single-video annotation file. An empty file yields an empty set.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<DetectionTrackSet> {
    let videos = read_lines(BufReader::new(File::open(path)?))?;
    match videos.len() {
        0 => Ok(DetectionTrackSet::default()),
        1 => Ok(videos.into_iter().next().unwrap().1),
        n => Err(Error::Format(format!(
            "expected one video in annotation file, found {n}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, SynthConfig};

    #[test]
    fn one_detection_is_one_line() {
        let d = Detection {
            frame: 2,
            center_x: 4.5,
            center_y: 10.0,
            box_w: 6.0,
            box_h: 3.0,
            track_id: Some(1),
        };
        let set = DetectionTrackSet::from_detections(3, [d]).unwrap();
        let mut buf = Vec::new();
        write_lines(&mut buf, "vid", &set).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"video_id\":\"vid\",\"frame\":2,\"track\":1,\"cx\":4.5,\"cy\":10.0,\"w\":6.0,\"h\":3.0}\n"
        );
        let untracked = DetectionTrackSet::from_detections(3, [Detection { track_id: None, ..d }]).unwrap();
        let mut buf = Vec::new();
        write_lines(&mut buf, "vid", &untracked).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("\"track\":null"));
    }

    #[test]
    fn generated_sets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..5 {
            let cfg = SynthConfig {
                num_objects: 3,
                ..SynthConfig::default()
            };
            let (_, set, _) = generate_video(&cfg, seed).unwrap();
            let p = dir.path().join(format!("{seed}.jsonl"));
            write_annotations(&p, "v", &set).unwrap();
            assert_eq!(read_annotations(&p).unwrap(), set);
        }
    }

    #[test]
    fn empty_set_round_trips_through_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        write_annotations(&p, "v", &DetectionTrackSet::default()).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert_eq!(read_annotations(&p).unwrap(), DetectionTrackSet::default());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"video_id\":\"a\",\"frame\":0,\"track\":null,\"cx\":1.0,\"cy\":1.0,\"w\":2.0,\"h\":2.0}\n\
                    {\"video_id\":\"a\",\"frame\":1,\"cx\":oops}\n";
        match read_lines(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn multiple_videos_keep_their_order() {
        let cfg = SynthConfig::default();
        let (_, a, _) = generate_video(&cfg, 1).unwrap();
        let (_, b, _) = generate_video(&cfg, 2).unwrap();
        let mut buf = Vec::new();
        write_lines(&mut buf, "b", &b).unwrap();
        write_lines(&mut buf, "a", &a).unwrap();
        let got = read_lines(buf.as_slice()).unwrap();
        assert_eq!(got, vec![("b".to_string(), b), ("a".to_string(), a)]);
    }
}
