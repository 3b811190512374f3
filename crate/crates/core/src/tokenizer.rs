//! Space-time tubelet tokenization and linear embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::{VideoTensor, CHANNELS};
use crate::tensor::{gemm, Mat};

/// Size of one tubelet in frames and pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TubeDims {
    pub dt: usize,
    pub dh: usize,
    pub dw: usize,
}

impl TubeDims {
    pub fn new(dt: usize, dh: usize, dw: usize) -> Self {
        TubeDims { dt, dh, dw }
    }

    pub fn volume(&self) -> usize {
        self.dt * self.dh * self.dw
    }

    /// Number of raw values in one patch.
    pub fn patch_len(&self) -> usize {
        self.volume() * CHANNELS
    }
}

/// Grid position `(ti, hi, wi)` of a token.
pub type Coord = [usize; 3];

/// Token grid of a video split into tubelets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub tube: TubeDims,
    pub nt: usize,
    pub nh: usize,
    pub nw: usize,
}

impl TokenGrid {
    /// Requires exact divisibility of `(t, h, w)` by the tube.
    pub fn new(t: usize, h: usize, w: usize, tube: TubeDims) -> Result<Self> {
        let TubeDims { dt, dh, dw } = tube;
        if dt == 0 || dh == 0 || dw == 0 || t % dt != 0 || h % dh != 0 || w % dw != 0 || t == 0 || h == 0 || w == 0 {
            return Err(Error::NotDivisible { t, h, w, dt, dh, dw });
        }
        Ok(TokenGrid {
            tube,
            nt: t / dt,
            nh: h / dh,
            nw: w / dw,
        })
    }

    pub fn n(&self) -> usize {
        self.nt * self.nh * self.nw
    }

    pub fn frames(&self) -> usize {
        self.nt * self.tube.dt
    }

    pub fn height(&self) -> usize {
        self.nh * self.tube.dh
    }

    pub fn width(&self) -> usize {
        self.nw * self.tube.dw
    }

    #[inline]
    pub fn flat_index(&self, c: Coord) -> usize {
        (c[0] * self.nh + c[1]) * self.nw + c[2]
    }

    #[inline]
    pub fn coord(&self, i: usize) -> Coord {
        [i / (self.nh * self.nw), (i / self.nw) % self.nh, i % self.nw]
    }

    pub fn coords(&self) -> Vec<Coord> {
        (0..self.n()).map(|i| self.coord(i)).collect()
    }
}

/// Raw tubelet pixels, one row per token in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches<T> {
    pub grid: TokenGrid,
    pub data: Mat<T>,
    pub coords: Vec<Coord>,
}

/// Cuts a video into non-overlapping tubes. Each row holds the tube's pixels
/// in `(t, h, w, c)` order; rows enumerate the grid in row-major `(t, h, w)`.
pub fn tubelet_split<T: Scalar>(video: &VideoTensor, tube: TubeDims) -> Result<Patches<T>> {
    let grid = TokenGrid::new(video.t_frames, video.height, video.width, tube)?;
    let plen = tube.patch_len();
    let mut data = Vec::with_capacity(grid.n() * plen);
    let row_len = tube.dw * CHANNELS;
    for i in 0..grid.n() {
        let [ti, hi, wi] = grid.coord(i);
        for t in ti * tube.dt..(ti + 1) * tube.dt {
            for y in hi * tube.dh..(hi + 1) * tube.dh {
                let start = video.index(t, y, wi * tube.dw, 0);
                data.extend(video.data[start..start + row_len].iter().map(|&v| T::lit(v as f64)));
            }
        }
    }
    Ok(Patches {
        grid,
        data: Mat::from_vec(grid.n(), plen, data),
        coords: grid.coords(),
    })
}

/// Inverse of [`tubelet_split`] for a full set of patches.
pub fn merge_tubelets<T: Scalar>(patches: &Patches<T>) -> VideoTensor {
    let grid = patches.grid;
    let tube = grid.tube;
    let mut video = VideoTensor::zeros(grid.frames(), grid.height(), grid.width());
    let row_len = tube.dw * CHANNELS;
    for (r, &[ti, hi, wi]) in patches.coords.iter().enumerate() {
        let mut src = patches.data.row(r).iter();
        for t in ti * tube.dt..(ti + 1) * tube.dt {
            for y in hi * tube.dh..(hi + 1) * tube.dh {
                let start = video.index(t, y, wi * tube.dw, 0);
                for v in &mut video.data[start..start + row_len] {
                    *v = src.next().unwrap().as_f64() as f32;
                }
            }
        }
    }
    video
}

/// Linear patch projection plus a learned positional table over the full grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams<T> {
    pub projection: Mat<T>,
    pub bias: Mat<T>,
    pub positional: Mat<T>,
}

impl<T: Scalar> EmbedParams<T> {
    pub fn zeros(patch_len: usize, dim: usize, n_tokens: usize) -> Self {
        EmbedParams {
            projection: Mat::zeros(patch_len, dim),
            bias: Mat::zeros(1, dim),
            positional: Mat::zeros(n_tokens, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.cols
    }
}

/// Embedded tokens with the grid position of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub features: Mat<T>,
    pub coords: Vec<Coord>,
    /// Flat grid index of each row.
    pub indices: Vec<usize>,
    pub scores: Option<Vec<f64>>,
}

impl<T: Scalar> TokenSet<T> {
    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    /// Rows at the given positions of this set, in the given order.
    pub fn select(&self, rows: &[usize]) -> TokenSet<T> {
        TokenSet {
            features: self.features.gather_rows(rows),
            coords: rows.iter().map(|&r| self.coords[r]).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            scores: self.scores.as_ref().map(|s| rows.iter().map(|&r| s[r]).collect()),
        }
    }
}

/// `features[n] = patches[n] * projection + bias + positional[flat(coords[n])]`.
pub fn embed_rows<T: Scalar>(patches: &Mat<T>, indices: &[usize], params: &EmbedParams<T>) -> Result<Mat<T>> {
    if patches.cols != params.projection.rows || patches.rows != indices.len() {
        return Err(Error::Shape(format!(
            "patches {}x{} vs projection {}x{} with {} indices",
            patches.rows,
            patches.cols,
            params.projection.rows,
            params.projection.cols,
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= params.positional.rows) {
        return Err(Error::Shape(format!(
            "token index {bad} outside positional table of {} rows",
            params.positional.rows
        )));
    }
    let mut out = Mat::zeros(patches.rows, params.dim());
    gemm(T::one(), patches.view(), params.projection.view(), T::zero(), &mut out);
    for (r, &idx) in indices.iter().enumerate() {
        let pos = params.positional.row(idx);
        let bias = params.bias.row(0);
        for ((v, &b), &p) in out.row_mut(r).iter_mut().zip(bias).zip(pos) {
            *v += b + p;
        }
    }
    Ok(out)
}

pub fn embed_tokens<T: Scalar>(patches: &Mat<T>, coords: &[Coord], grid: &TokenGrid, params: &EmbedParams<T>) -> Result<TokenSet<T>> {
    if coords.len() != patches.rows {
        return Err(Error::Shape("one coord per patch required".into()));
    }
    let indices: Vec<usize> = coords.iter().map(|&c| grid.flat_index(c)).collect();
    Ok(TokenSet {
        features: embed_rows(patches, &indices, params)?,
        coords: coords.to_vec(),
        indices,
        scores: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, SynthConfig};

    #[test]
    fn full_scale_grid_has_1568_tokens() {
        let video = VideoTensor::zeros(16, 224, 224);
        let p: Patches<f32> = tubelet_split(&video, TubeDims::new(2, 16, 16)).unwrap();
        assert_eq!(p.data.rows, 1568);
        assert_eq!(p.data.cols, 2 * 16 * 16 * 3);
        assert_eq!(p.coords[0], [0, 0, 0]);
        assert_eq!(*p.coords.last().unwrap(), [7, 13, 13]);
    }

    #[test]
    fn non_divisible_dims_are_rejected() {
        let video = VideoTensor::zeros(5, 32, 32);
        let r: Result<Patches<f32>> = tubelet_split(&video, TubeDims::new(2, 8, 8));
        let msg = r.unwrap_err().to_string();
        assert!(msg.contains("pad or crop"), "{msg}");
    }

    #[test]
    fn patch_holds_its_tube_pixels_in_order() {
        let mut video = VideoTensor::zeros(4, 4, 4);
        for (i, v) in video.data.iter_mut().enumerate() {
            *v = i as f32 / 1000.0;
        }
        let p: Patches<f64> = tubelet_split(&video, TubeDims::new(2, 2, 2)).unwrap();
        let grid = p.grid;
        let n = grid.flat_index([1, 0, 1]);
        let row = p.data.row(n);
        let mut k = 0;
        for t in 2..4 {
            for y in 0..2 {
                for x in 2..4 {
                    for c in 0..3 {
                        assert_eq!(row[k], video.get(t, y, x, c) as f64);
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn split_then_merge_reconstructs_video() {
        let (video, _, _) = generate_video(&SynthConfig::default(), 4).unwrap();
        let p: Patches<f32> = tubelet_split(&video, TubeDims::new(2, 8, 8)).unwrap();
        assert_eq!(merge_tubelets(&p), video);
    }

    #[test]
    fn hand_computed_embedding() {
        let grid = TokenGrid::new(1, 1, 1, TubeDims::new(1, 1, 1)).unwrap();
        let params = EmbedParams {
            projection: Mat::from_vec(1, 2, vec![2.0, -1.0]),
            bias: Mat::from_vec(1, 2, vec![0.1, 0.1]),
            positional: Mat::from_vec(1, 2, vec![0.0, 0.0]),
        };
        let patches = Mat::from_vec(1, 1, vec![0.5f64]);
        let ts = embed_tokens(&patches, &[[0, 0, 0]], &grid, &params).unwrap();
        assert!((ts.features.at(0, 0) - 1.1).abs() < 1e-15);
        assert!((ts.features.at(0, 1) + 0.4).abs() < 1e-15);
    }

    fn random_params(plen: usize, dim: usize, n: usize) -> EmbedParams<f64> {
        let f = |k: usize, s: f64| (0..k).map(|i| ((i as f64 + s) * 1.37).sin() * 0.3).collect::<Vec<_>>();
        EmbedParams {
            projection: Mat::from_vec(plen, dim, f(plen * dim, 0.1)),
            bias: Mat::from_vec(1, dim, f(dim, 2.0)),
            positional: Mat::from_vec(n, dim, f(n * dim, 5.0)),
        }
    }

    #[test]
    fn zero_weights_give_positional_rows() {
        let (video, _, _) = generate_video(&SynthConfig::default(), 1).unwrap();
        let p: Patches<f64> = tubelet_split(&video, TubeDims::new(2, 8, 8)).unwrap();
        let mut params = random_params(p.data.cols, 4, p.grid.n());
        params.projection = Mat::zeros(p.data.cols, 4);
        params.bias = Mat::zeros(1, 4);
        let ts = embed_tokens(&p.data, &p.coords, &p.grid, &params).unwrap();
        assert_eq!(ts.features, params.positional);
    }

    #[test]
    fn embedding_commutes_with_row_removal_and_is_linear() {
        let (video, _, _) = generate_video(&SynthConfig::default(), 2).unwrap();
        let p: Patches<f64> = tubelet_split(&video, TubeDims::new(2, 8, 8)).unwrap();
        let params = random_params(p.data.cols, 6, p.grid.n());
        let full = embed_tokens(&p.data, &p.coords, &p.grid, &params).unwrap();
        let keep = [3usize, 17, 40, 5, 63];
        let sub_patches = p.data.gather_rows(&keep);
        let sub_coords: Vec<_> = keep.iter().map(|&i| p.coords[i]).collect();
        let sub = embed_tokens(&sub_patches, &sub_coords, &p.grid, &params).unwrap();
        let picked = full.select(&keep);
        assert_eq!(sub.indices, picked.indices);
        assert_eq!(sub.coords, picked.coords);
        for (a, b) in sub.features.data.iter().zip(&picked.features.data) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut scaled = p.data.clone();
        scaled.scale(2.5);
        let zero = embed_tokens(&Mat::zeros(p.data.rows, p.data.cols), &p.coords, &p.grid, &params).unwrap();
        let e2 = embed_tokens(&scaled, &p.coords, &p.grid, &params).unwrap();
        for i in 0..full.features.len() {
            let lhs = e2.features.data[i] - zero.features.data[i];
            let rhs = 2.5 * (full.features.data[i] - zero.features.data[i]);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
