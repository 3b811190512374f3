//! Seeded synthetic datasets and their on-disk layout.
//!
//! A dataset directory holds `videos/<id>.ovvt`, a shared
//! `annotations.jsonl` and `labels.csv` (`video_id,label,split`).

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{read_lines, write_lines};
use crate::error::{Error, Result};
use crate::model::{prepare, ModelConfig};
use crate::sampler::derive_seed;
use crate::scalar::Scalar;
use crate::synth::{generate_video, DetectionTrackSet, SynthConfig, VideoTensor};
use crate::tensor_io::{read_video, write_video};
use crate::tracker::{link_tracks, DEFAULT_IOU_THRESHOLD};
use crate::trainer::Example;

/// How boxes reach the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    /// Generator boxes with generator track ids.
    #[default]
    GroundTruth,
    /// Generator boxes with ids reassigned by the IoU tracker.
    Tracked,
    /// Generator boxes without ids.
    Untracked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_videos: usize,
    pub val_videos: usize,
    pub seed: u64,
    pub boxes: BoxSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_videos: 2000,
            val_videos: 200,
            seed: 0,
            boxes: BoxSource::GroundTruth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: VideoTensor,
    pub dets: DetectionTrackSet,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn apply_box_source(dets: DetectionTrackSet, src: BoxSource) -> DetectionTrackSet {
    match src {
        BoxSource::GroundTruth => dets,
        BoxSource::Tracked => link_tracks(&dets.without_tracks().frames, DEFAULT_IOU_THRESHOLD),
        BoxSource::Untracked => dets.without_tracks(),
    }
}

/// Videos `0..train_videos` of the seed sequence form the training split,
/// the next `val_videos` the validation split.
pub fn generate_dataset(synth: &SynthConfig, data: &DataConfig) -> Result<Dataset> {
    synth.validate()?;
    let total = data.train_videos + data.val_videos;
    let samples = (0..total)
        .into_par_iter()
        .map(|i| {
            let (video, dets, label) = generate_video(synth, derive_seed(data.seed, i as u64))?;
            let split = if i < data.train_videos { Split::Train } else { Split::Val };
            Ok(Sample {
                id: format!("v{i:05}"),
                video,
                dets: apply_box_source(dets, data.boxes),
                label,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = samples.into_iter().partition(|s| s.split == Split::Train);
    Ok(Dataset { train, val })
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("videos"))?;
    let mut ann = BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
    let mut labels = BufWriter::new(fs::File::create(dir.join("labels.csv"))?);
    writeln!(labels, "video_id,label,split")?;
    for s in ds.train.iter().chain(&ds.val) {
        write_video(dir.join("videos").join(format!("{}.ovvt", s.id)), &s.video)?;
        write_lines(&mut ann, &s.id, &s.dets)?;
        let split = match s.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        writeln!(labels, "{},{},{split}", s.id, s.label)?;
    }
    ann.flush()?;
    labels.flush()?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut dets: std::collections::HashMap<String, DetectionTrackSet> =
        read_lines(BufReader::new(fs::File::open(dir.join("annotations.jsonl"))?))?
            .into_iter()
            .collect();
    let labels = fs::read_to_string(dir.join("labels.csv"))?;
    let mut ds = Dataset::default();
    for (i, line) in labels.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: format!("labels.csv: {msg}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected video_id,label,split"));
        }
        let label = f[1].parse().map_err(|_| bad("label is not an integer"))?;
        let split = match f[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(bad(&format!("unknown split {other:?}"))),
        };
        let video = read_video(dir.join("videos").join(format!("{}.ovvt", f[0])))?;
        let mut d = dets.remove(f[0]).unwrap_or_else(|| DetectionTrackSet::empty(video.t_frames));
        d.frames.resize(video.t_frames, Vec::new());
        let s = Sample {
            id: f[0].to_string(),
            video,
            dets: d,
            label,
            split,
        };
        match split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
        }
    }
    Ok(ds)
}

/// Source frames of view `view` out of `views` when sampling `t` frames
/// from `t_src`: a uniform grid with stride `t_src / t`, shifted by
/// `view * stride / views`.
pub fn view_frames(t_src: usize, t: usize, view: usize, views: usize) -> Vec<usize> {
    let stride = t_src as f64 / t as f64;
    frames_at_offset(t_src, t, view as f64 * stride / views.max(1) as f64)
}

/// Uniform frame grid starting at `offset` (in source frames).
pub fn frames_at_offset(t_src: usize, t: usize, offset: f64) -> Vec<usize> {
    let stride = t_src as f64 / t as f64;
    (0..t)
        .map(|j| ((offset + j as f64 * stride).floor() as usize).min(t_src - 1))
        .collect()
}

impl Sample {
    /// The sample as seen by a model at a given frame offset.
    pub fn prepare_at<T: Scalar>(&self, cfg: &ModelConfig, offset: f64) -> Result<Example<T>> {
        let frames = frames_at_offset(self.video.t_frames, cfg.frames, offset);
        let (v, d) = if frames.len() == self.video.t_frames {
            (self.video.clone(), self.dets.clone())
        } else {
            (self.video.select_frames(&frames), self.dets.select_frames(&frames))
        };
        Ok(Example {
            input: prepare(cfg, &v, &d)?,
            label: self.label,
        })
    }
}

/// First-view examples for training.
pub fn prepare_examples<T: Scalar>(cfg: &ModelConfig, samples: &[Sample]) -> Result<Vec<Example<T>>> {
    samples.par_iter().map(|s| s.prepare_at(cfg, 0.0)).collect()
}
