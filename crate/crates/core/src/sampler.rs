//! Object-guided token sampling and the uniform-drop baseline.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::TokenScores;
use crate::scalar::Scalar;
use crate::tokenizer::TokenSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    ObjectGuided,
    Uniform,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Foreground percentage X.
    pub fg_ratio: f64,
    /// Background percentage Y.
    pub bg_ratio: f64,
    pub mode: SamplingMode,
    pub seed: u64,
    /// Block index before which tokens are dropped.
    pub drop_layer: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            fg_ratio: 100.0,
            bg_ratio: 0.0,
            mode: SamplingMode::None,
            seed: 0,
            drop_layer: 0,
        }
    }
}

impl SamplerConfig {
    /// Object-guided sampling keeping `keep_percent` of the tokens, with the
    /// default background share (10%, or 5% at a 10% total).
    pub fn object_guided(keep_percent: f64, seed: u64) -> Self {
        let bg = default_bg_ratio(keep_percent);
        SamplerConfig {
            fg_ratio: keep_percent - bg,
            bg_ratio: bg,
            mode: SamplingMode::ObjectGuided,
            seed,
            drop_layer: 0,
        }
    }

    pub fn uniform(keep_percent: f64, seed: u64) -> Self {
        SamplerConfig {
            fg_ratio: 0.0,
            bg_ratio: keep_percent,
            mode: SamplingMode::Uniform,
            seed,
            drop_layer: 0,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let ok = |p: f64| (0.0..=100.0).contains(&p);
        if !ok(self.fg_ratio) || !ok(self.bg_ratio) || self.fg_ratio + self.bg_ratio > 100.0 + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= X, Y and X + Y <= 100, got X={} Y={}",
                self.fg_ratio, self.bg_ratio
            )));
        }
        if self.mode != SamplingMode::None && self.drop_layer >= depth {
            return Err(Error::InvalidConfig(format!(
                "drop_layer {} must be below depth {depth}",
                self.drop_layer
            )));
        }
        Ok(())
    }

    /// Fraction of tokens requested, `(X + Y) / 100`.
    pub fn keep_fraction(&self) -> f64 {
        match self.mode {
            SamplingMode::None => 1.0,
            SamplingMode::Uniform => self.bg_ratio / 100.0,
            SamplingMode::ObjectGuided => (self.fg_ratio + self.bg_ratio) / 100.0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplerConfig { seed, ..self.clone() }
    }
}

/// Background share used alongside a total keep percentage.
pub fn default_bg_ratio(keep_percent: f64) -> f64 {
    if (keep_percent - 10.0).abs() < 1e-9 {
        5.0
    } else {
        10.0_f64.min(keep_percent)
    }
}

/// `round(percent / 100 * n)`, halves rounded away from zero.
pub fn count_for_percent(percent: f64, n: usize) -> usize {
    let k = (percent * n as f64 / 100.0).round();
    (k.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    /// Surviving flat indices, ascending.
    pub indices: Vec<usize>,
    /// Output row order: foreground ascending, then background ascending.
    pub order: Vec<usize>,
    pub fg_count: usize,
    pub bg_count: usize,
    /// Smallest foreground score (`+inf` when nothing is foreground).
    pub threshold: f64,
}

impl SampleResult {
    pub fn all(n: usize) -> Self {
        let idx: Vec<usize> = (0..n).collect();
        SampleResult {
            indices: idx.clone(),
            order: idx,
            fg_count: n,
            bg_count: 0,
            threshold: f64::NEG_INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a counter.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix(seed, salt.wrapping_add(1))
}

const FALLBACK_SALT: u64 = 0xF6;

/// Top `round(X/100 * N)` tokens by score (ties to the lower index) and the
/// complement. Returns `(fg, bg, threshold)`, both lists ascending.
///
/// When every score is zero there is no objectness signal; the foreground is
/// then drawn uniformly at random from `seed`.
pub fn split_fg_bg(scores: &TokenScores, fg_percent: f64, seed: u64) -> (Vec<usize>, Vec<usize>, f64) {
    let n = scores.len();
    let k = count_for_percent(fg_percent, n);
    let mut fg: Vec<usize> = if k > 0 && scores.0.iter().all(|&s| s == 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, FALLBACK_SALT));
        index::sample(&mut rng, n, k).into_vec()
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    };
    fg.sort_unstable();
    let threshold = fg.iter().map(|&i| scores.0[i]).fold(f64::INFINITY, f64::min);
    let mut is_fg = vec![false; n];
    for &i in &fg {
        is_fg[i] = true;
    }
    let bg = (0..n).filter(|&i| !is_fg[i]).collect();
    (fg, bg, threshold)
}

/// `min(round(Y/100 * N), |bg|)` background indices drawn without
/// replacement, ascending.
pub fn sample_background(bg: &[usize], bg_percent: f64, n: usize, seed: u64) -> Vec<usize> {
    let k = count_for_percent(bg_percent, n).min(bg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = index::sample(&mut rng, bg.len(), k)
        .into_iter()
        .map(|i| bg[i])
        .collect();
    out.sort_unstable();
    out
}

/// Index-level sampling decision for `n` tokens.
pub fn select(scores: &TokenScores, cfg: &SamplerConfig) -> SampleResult {
    let n = scores.len();
    let (fg_percent, bg_percent) = match cfg.mode {
        SamplingMode::None => return SampleResult::all(n),
        SamplingMode::Uniform => (0.0, cfg.bg_ratio),
        SamplingMode::ObjectGuided => (cfg.fg_ratio, cfg.bg_ratio),
    };
    let (fg, bg, threshold) = split_fg_bg(scores, fg_percent, cfg.seed);
    let sampled_bg = sample_background(&bg, bg_percent, n, cfg.seed);
    let mut order = fg.clone();
    order.extend_from_slice(&sampled_bg);
    let mut indices = order.clone();
    indices.sort_unstable();
    SampleResult {
        indices,
        fg_count: fg.len(),
        bg_count: sampled_bg.len(),
        order,
        threshold,
    }
}

fn check_aligned<T: Scalar>(tokens: &TokenSet<T>, scores: &TokenScores) -> Result<()> {
    if tokens.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} tokens but {} scores",
            tokens.len(),
            scores.len()
        )));
    }
    Ok(())
}

/// Keeps the foreground rows followed by the sampled background rows.
pub fn apply_ogs<T: Scalar>(tokens: &TokenSet<T>, scores: &TokenScores, cfg: &SamplerConfig) -> Result<(TokenSet<T>, SampleResult)> {
    check_aligned(tokens, scores)?;
    let cfg = SamplerConfig {
        mode: SamplingMode::ObjectGuided,
        ..cfg.clone()
    };
    let res = select(scores, &cfg);
    let mut out = tokens.select(&res.order);
    out.scores = Some(res.order.iter().map(|&i| scores.0[i]).collect());
    Ok((out, res))
}

/// Uniform random drop, equivalent to object-guided sampling with X = 0.
pub fn apply_uniform<T: Scalar>(tokens: &TokenSet<T>, keep_ratio: f64, seed: u64) -> Result<(TokenSet<T>, SampleResult)> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(Error::InvalidConfig(format!("keep_ratio {keep_ratio} outside [0, 1]")));
    }
    let scores = TokenScores(vec![0.0; tokens.len()]);
    let res = select(&scores, &SamplerConfig::uniform(keep_ratio * 100.0, seed));
    Ok((tokens.select(&res.order), res))
}
