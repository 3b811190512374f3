//! Multi-view evaluation, analytic FLOP counts, keep-ratio sweeps and
//! method comparison reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::sampler::{SamplerConfig, SamplingMode};
use crate::scalar::Scalar;
use crate::trainer::{argmax, train_new, EpochMetrics, TrainConfig};

/// Matmul FLOPs of one block, one multiply-accumulate counted as 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BlockFlops {
    /// Query, key, value and output projections of the patch tokens.
    pub projections: u64,
    /// Query-key scores.
    pub scores: u64,
    /// Attention-weighted sum of values.
    pub weighted_sum: u64,
    pub mlp: u64,
    /// Object-token MLP over the affinity-weighted rows.
    pub pooling: u64,
}

impl BlockFlops {
    pub fn attention(&self) -> u64 {
        self.projections + self.scores + self.weighted_sum
    }

    pub fn total(&self) -> u64 {
        self.attention() + self.mlp + self.pooling
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub tokens: usize,
    pub object_tokens: usize,
    pub blocks: Vec<BlockFlops>,
    pub attention: u64,
    pub mlp: u64,
    pub pooling: u64,
    pub total: u64,
}

/// FLOPs of one block with `n` patch tokens, `m` object tokens and
/// `n_weighted` pooled rows (object terms only apply when `oam`).
pub fn block_flops(n: u64, m: u64, d: u64, mlp_hidden: u64, n_weighted: u64, oam: bool) -> BlockFlops {
    let kv = if oam { n + m } else { n };
    BlockFlops {
        projections: 8 * n * d * d,
        scores: 2 * n * kv * d,
        weighted_sum: 2 * n * kv * d,
        mlp: 4 * n * d * mlp_hidden,
        pooling: if oam { 4 * n_weighted * d * d } else { 0 },
    }
}

/// Per-block and total FLOPs for `n_tokens` patch tokens and
/// `n_object_tokens` object tokens at each OAM block. Each object token
/// pools over the tokens of one token-frame, `ceil(n / nt)` rows.
pub fn count_flops(cfg: &ModelConfig, n_tokens: usize, n_object_tokens: usize) -> FlopReport {
    let nt = (cfg.frames / cfg.tube.dt).max(1);
    let (n, m, d, h) = (n_tokens as u64, n_object_tokens as u64, cfg.dim as u64, cfg.mlp_hidden as u64);
    let n_weighted = m * n.div_ceil(nt as u64);
    let blocks: Vec<BlockFlops> = (0..cfg.depth)
        .map(|l| block_flops(n, m, d, h, n_weighted, cfg.is_oam_layer(l)))
        .collect();
    let attention = blocks.iter().map(|b| b.attention()).sum();
    let mlp = blocks.iter().map(|b| b.mlp).sum();
    let pooling = blocks.iter().map(|b| b.pooling).sum();
    FlopReport {
        tokens: n_tokens,
        object_tokens: if cfg.uses_objects() { n_object_tokens } else { 0 },
        blocks,
        attention,
        mlp,
        pooling,
        total: attention + mlp + pooling,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// View-averaged logits per sample.
    pub logits: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

/// Element-wise arithmetic mean.
pub fn average_logits(per_view: &[Vec<f64>]) -> Vec<f64> {
    let k = per_view.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; k];
    for v in per_view {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= per_view.len() as f64;
    }
    out
}

/// Source-frame offsets of `views` views: `v * stride / views`.
pub fn view_offsets(t_src: usize, t: usize, views: usize) -> Vec<f64> {
    let stride = t_src as f64 / t as f64;
    (0..views).map(|v| v as f64 * stride / views as f64).collect()
}

/// Per-view logits of one sample.
pub fn view_logits<T: Scalar>(model: &Model<T>, s: &Sample, sampler: &SamplerConfig, offsets: &[f64]) -> Result<Vec<Vec<f64>>> {
    offsets
        .iter()
        .map(|&o| {
            let ex = s.prepare_at::<T>(&model.cfg, o)?;
            Ok(model
                .forward_prepared(&ex.input, sampler)?
                .into_iter()
                .map(|v| v.as_f64())
                .collect())
        })
        .collect()
}

/// Accuracy with the given view offsets, logits averaged over views.
pub fn evaluate_offsets<T: Scalar>(model: &Model<T>, samples: &[Sample], sampler: &SamplerConfig, offsets: &[f64]) -> Result<EvalResult> {
    if offsets.is_empty() {
        return Err(Error::InvalidConfig("need at least one view".into()));
    }
    let logits = samples
        .par_iter()
        .map(|s| Ok(average_logits(&view_logits(model, s, sampler, offsets)?)))
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let hits = predictions.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(EvalResult {
        accuracy: if samples.is_empty() { 0.0 } else { hits as f64 / samples.len() as f64 },
        logits,
        predictions,
    })
}

/// `views`-view testing with stride-fraction offsets.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], sampler: &SamplerConfig, views: usize) -> Result<EvalResult> {
    if views == 0 {
        return Err(Error::InvalidConfig("views must be >= 1".into()));
    }
    let t_src = samples.first().map_or(model.cfg.frames, |s| s.video.t_frames);
    evaluate_offsets(model, samples, sampler, &view_offsets(t_src, model.cfg.frames, views))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Method {
    #[serde(rename = "baseline-full")]
    BaselineFull,
    #[serde(rename = "uniform-drop")]
    UniformDrop,
    #[serde(rename = "ogs")]
    Ogs,
    #[serde(rename = "ogs+oam")]
    OgsOam,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::BaselineFull, Method::UniformDrop, Method::Ogs, Method::OgsOam];

    pub fn name(self) -> &'static str {
        match self {
            Method::BaselineFull => "baseline-full",
            Method::UniformDrop => "uniform-drop",
            Method::Ogs => "ogs",
            Method::OgsOam => "ogs+oam",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Method::OgsOam => "ogs-oam",
            m => m.name(),
        }
    }

    /// Sampler keeping `ratio` of the tokens.
    pub fn sampler(self, ratio: f64, seed: u64) -> SamplerConfig {
        let pct = ratio * 100.0;
        match self {
            Method::BaselineFull => SamplerConfig {
                seed,
                ..SamplerConfig::default()
            },
            Method::UniformDrop => SamplerConfig::uniform(pct, seed),
            Method::Ogs | Method::OgsOam => SamplerConfig::object_guided(pct, seed),
        }
    }

    /// The base config with object-aware layers on or off.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let oam_layers = match self {
            Method::OgsOam => match &base.oam_layers {
                Some(l) if !l.is_empty() => Some(l.clone()),
                _ => None,
            },
            _ => Some(Vec::new()),
        };
        ModelConfig {
            oam_layers,
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    /// Ratios at which the object-aware model is trained.
    pub oam_ratios: Vec<f64>,
    pub views: Vec<usize>,
    pub methods: Vec<Method>,
    /// One model per seed; results are seed means.
    pub seeds: Vec<u64>,
    pub checkpoint_dir: PathBuf,
    /// Train checkpoints that are not on disk yet.
    pub train_missing: bool,
    /// Evaluate one full-token model per method across all ratios instead
    /// of one model per ratio.
    pub single_model: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ratios: vec![0.2, 0.4, 0.6, 1.0],
            oam_ratios: vec![1.0],
            views: vec![1],
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            checkpoint_dir: PathBuf::from("checkpoints"),
            train_missing: true,
            single_model: false,
        }
    }
}

impl SweepConfig {
    /// (method, keep ratio) pairs. The full baseline only exists at ratio
    /// 1; the drop methods cover the ratios below 1 (at 1 they coincide with
    /// the baseline).
    pub fn points(&self) -> Vec<(Method, f64)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            let ratios: Vec<f64> = match m {
                Method::BaselineFull => vec![1.0],
                Method::UniformDrop | Method::Ogs => self.ratios.iter().copied().filter(|&r| r < 1.0).collect(),
                Method::OgsOam => self.oam_ratios.clone(),
            };
            out.extend(ratios.into_iter().map(|r| (m, r)));
        }
        out
    }

    pub fn checkpoint_path(&self, method: Method, ratio: f64, seed: u64) -> PathBuf {
        let ratio = if self.single_model { 1.0 } else { ratio };
        self.checkpoint_dir
            .join(format!("{}_r{:.2}_s{seed}.ovvt", method.file_stem(), ratio))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    /// Surviving fraction `(k_fg + k_bg) / N` as sampled.
    pub keep_ratio: f64,
    pub x: f64,
    pub y: f64,
    pub views: usize,
    pub tokens: usize,
    /// Mean over seeds.
    pub accuracy: f64,
    pub flops: u64,
}

pub const SWEEP_HEADER: &str = "method,keep_ratio,X,Y,views,tokens,accuracy,flops";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{},{},{},{},{:.4},{}",
            r.method.name(),
            r.keep_ratio,
            r.x,
            r.y,
            r.views,
            r.tokens,
            r.accuracy,
            r.flops
        );
    }
    s
}

const COLORS: [&str; 4] = ["#444444", "#1f77b4", "#d62728", "#2ca02c"];

/// Accuracy against keep ratio, one polyline per method (first view count).
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (640.0, 420.0, 50.0);
    let px = |r: f64| pad + r * (w - 2.0 * pad);
    let py = |a: f64| h - pad - a * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<polyline points=\"{},{} {},{} {},{}\" fill=\"none\" stroke=\"black\"/>",
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v:.1}</text>", px(v), py(0.0) + 18.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.1}</text>", px(0.0) - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">keep ratio</text>", w / 2.0, h - 10.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">accuracy</text>", h / 2.0, h / 2.0);
    let views = rows.first().map_or(1, |r| r.views);
    for (i, m) in Method::ALL.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == *m && r.views == views)
            .map(|r| (r.keep_ratio, r.accuracy))
            .collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[i];
        let coords: Vec<String> = pts.iter().map(|&(r, a)| format!("{:.1},{:.1}", px(r), py(a))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", coords.join(" "));
        for &(r, a) in &pts {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"{color}\"/>", px(r), py(a));
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{}</text>", w - pad - 90.0, m.name());
    }
    s.push_str("</svg>\n");
    s
}

/// Four-way accuracy table per keep ratio (first view count only). A dash
/// marks a method without a model at that ratio.
pub fn compare_methods(rows: &[SweepRow]) -> String {
    let views = rows.first().map_or(1, |r| r.views);
    let mut ratios: Vec<f64> = rows.iter().filter(|r| r.views == views).map(|r| r.keep_ratio).collect();
    ratios.sort_by(|a, b| a.total_cmp(b));
    ratios.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let mut s = String::from("keep_ratio");
    for m in Method::ALL {
        let _ = write!(s, "\t{}", m.name());
    }
    s.push('\n');
    for r in ratios {
        let _ = write!(s, "{r:.4}");
        for m in Method::ALL {
            match rows
                .iter()
                .find(|x| x.method == m && x.views == views && (x.keep_ratio - r).abs() < 1e-9)
            {
                Some(x) => {
                    let _ = write!(s, "\t{:.4}", x.accuracy);
                }
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
    }
    s
}

/// Trains one model for `(method, ratio, seed)` and writes its checkpoint.
pub fn train_point(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    method: Method,
    ratio: f64,
    seed: u64,
    ds: &Dataset,
    path: &Path,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let cfg = method.model_config(base);
    let train_set = crate::dataset::prepare_examples::<f32>(&cfg, &ds.train)?;
    let val_set = crate::dataset::prepare_examples::<f32>(&cfg, &ds.val)?;
    let sampler = method.sampler(ratio, seed);
    let tcfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let (model, log) = train_new(&cfg, &sampler, &train_set, &val_set, &tcfg, on_epoch)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(path, &model.cfg, &model.params)?;
    Ok(log)
}

/// Trains every missing checkpoint of the sweep.
pub fn train_sweep(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    sweep: &SweepConfig,
    ds: &Dataset,
    mut progress: impl FnMut(Method, f64, u64, &EpochMetrics),
) -> Result<()> {
    let mut points = sweep.points();
    if sweep.single_model {
        points.retain(|p| p.1 >= 1.0 || p.0 == Method::UniformDrop || p.0 == Method::Ogs);
        points.dedup_by_key(|p| p.0);
    }
    for (m, r) in points {
        let r = if sweep.single_model { 1.0 } else { r };
        for &seed in &sweep.seeds {
            let path = sweep.checkpoint_path(m, r, seed);
            if path.exists() {
                continue;
            }
            train_point(base, train_cfg, m, r, seed, ds, &path, |e| progress(m, r, seed, e))?;
        }
    }
    Ok(())
}

/// Evaluates every sweep point on the validation split. Accuracy is the
/// mean over seeds; token counts come from the sampler on the first
/// validation video.
pub fn sweep(sweep: &SweepConfig, ds: &Dataset) -> Result<Vec<SweepRow>> {
    let val = &ds.val;
    let first = val
        .first()
        .ok_or_else(|| Error::InvalidConfig("sweep needs validation videos".into()))?;
    let mut rows = Vec::new();
    for (m, r) in sweep.points() {
        let mut models = Vec::new();
        for &seed in &sweep.seeds {
            let path = sweep.checkpoint_path(m, r, seed);
            if !path.exists() {
                return Err(Error::MissingCheckpoint {
                    method: m.name().to_string(),
                    ratio: r,
                    path: path.clone(),
                });
            }
            let (cfg, params) = load_checkpoint::<f32>(&path)?;
            models.push((seed, Model { cfg, params }));
        }
        for &views in &sweep.views {
            let mut acc = 0.0;
            for (seed, model) in &models {
                acc += evaluate(model, val, &m.sampler(r, *seed), views)?.accuracy;
            }
            let model = &models[0].1;
            let sampler = m.sampler(r, sweep.seeds[0]);
            let ex = first.prepare_at::<f32>(&model.cfg, 0.0)?;
            let sel = model.sample(&ex.input, &sampler)?;
            let (_, cache) = model.forward_rows(&ex.input, &sel.order, sampler.drop_layer)?;
            let objects = cache.object_token_counts().into_iter().max().unwrap_or(0);
            let (x, y) = match sampler.mode {
                SamplingMode::None => (100.0, 0.0),
                _ => (sampler.fg_ratio, sampler.bg_ratio),
            };
            rows.push(SweepRow {
                method: m,
                keep_ratio: sel.len() as f64 / ex.input.grid.n() as f64,
                x,
                y,
                views,
                tokens: sel.len(),
                accuracy: acc / models.len() as f64,
                flops: count_flops(&model.cfg, sel.len(), objects).total,
            });
        }
    }
    Ok(rows)
}

/// Writes `<out>` (CSV), `<out>.svg` and `<out>.txt` (comparison table).
pub fn write_sweep_outputs(out: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, sweep_csv(rows))?;
    fs::write(out.with_extension("svg"), sweep_svg(rows))?;
    fs::write(out.with_extension("txt"), compare_methods(rows))?;
    Ok(())
}
