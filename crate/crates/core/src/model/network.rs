//! Full forward and backward passes: embedding, optional token drop,
//! vanilla and object-aware blocks, mean pooling and the linear head.

use super::config::{Aggregation, ModelConfig};
use super::layers::{mha_backward, mha_forward, LnCache, MhaCache, MlpCache};
use super::objects::{add_identity, groups_from_affinity, identity_backward, pool_backward, pool_object_tokens, ObjectTokenSet, PoolCache, PoolGroup};
use super::params::{Block, Params};
use crate::error::{Error, Result};
use crate::heatmap::{instance_heatmaps, objectness_scores, project_instance_affinity, Affinity, ObjectKey, TokenScores};
use crate::sampler::{select, SampleResult, SamplerConfig};
use crate::scalar::Scalar;
use crate::synth::{DetectionTrackSet, VideoTensor};
use crate::tensor::{gemm, Mat};
use crate::tokenizer::{embed_rows, tubelet_split, TokenGrid};

/// Per-object weights over the full token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectHint {
    pub key: ObjectKey,
    pub weights: Vec<f64>,
}

/// Everything the network needs from one video, computed once: patches,
/// objectness scores and object weights.
#[derive(Debug, Clone)]
pub struct PreparedVideo<T> {
    pub grid: TokenGrid,
    pub patches: Mat<T>,
    pub scores: TokenScores,
    pub objects: Vec<ObjectHint>,
}

impl<T: Scalar> PreparedVideo<T> {
    /// Object weights restricted to the given flat token indices.
    pub fn affinity(&self, tokens: &[usize]) -> Affinity {
        Affinity {
            objects: self.objects.iter().map(|h| h.key).collect(),
            tokens: tokens.to_vec(),
            values: self
                .objects
                .iter()
                .map(|h| tokens.iter().map(|&i| h.weights[i]).collect())
                .collect(),
        }
    }
}

fn block_mask_hints(set: &DetectionTrackSet, grid: &TokenGrid) -> Vec<ObjectHint> {
    let tube = grid.tube;
    let mut keys: Vec<ObjectKey> = set
        .frames
        .iter()
        .flat_map(|f| f.iter().enumerate().map(|(i, d)| ObjectKey::of(d, i)))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|key| {
            let weights = (0..grid.n())
                .map(|n| {
                    let [ti, hi, wi] = grid.coord(n);
                    let x = (wi * tube.dw) as f64 + (tube.dw as f64 - 1.0) / 2.0;
                    let y = (hi * tube.dh) as f64 + (tube.dh as f64 - 1.0) / 2.0;
                    let inside = (ti * tube.dt..(ti + 1) * tube.dt).any(|t| {
                        set.frames.get(t).is_some_and(|dets| {
                            dets.iter()
                                .enumerate()
                                .any(|(i, d)| ObjectKey::of(d, i) == key && d.bbox().contains(x, y))
                        })
                    });
                    if inside {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            ObjectHint { key, weights }
        })
        .collect()
}

/// Tokenizes a video and derives its sampling scores and object weights.
pub fn prepare<T: Scalar>(cfg: &ModelConfig, video: &VideoTensor, dets: &DetectionTrackSet) -> Result<PreparedVideo<T>> {
    if (video.t_frames, video.height, video.width) != (cfg.frames, cfg.height, cfg.width) {
        return Err(Error::Shape(format!(
            "video is {}x{}x{}, model expects {}x{}x{}",
            video.t_frames, video.height, video.width, cfg.frames, cfg.height, cfg.width
        )));
    }
    let patches = tubelet_split::<T>(video, cfg.tube)?;
    let grid = patches.grid;
    let scores = objectness_scores(dets, &grid)?;
    let objects = if !cfg.uses_objects() {
        Vec::new()
    } else {
        match cfg.aggregation {
            Aggregation::HeatmapWeighted => {
                let frames = instance_heatmaps(dets, &grid)?;
                let all: Vec<usize> = (0..grid.n()).collect();
                let aff = project_instance_affinity(&frames, grid.tube, &all)?;
                aff.objects
                    .into_iter()
                    .zip(aff.values)
                    .map(|(key, weights)| ObjectHint { key, weights })
                    .collect()
            }
            Aggregation::BinaryBlockMask => block_mask_hints(dets, &grid),
        }
    };
    Ok(PreparedVideo {
        grid,
        patches: patches.data,
        scores,
        objects,
    })
}

#[derive(Debug, Clone)]
pub struct ObjectCache<T> {
    pub groups: Vec<PoolGroup<T>>,
    pub tokens: ObjectTokenSet<T>,
    pub pool: PoolCache<T>,
    /// Patch features stacked over object tokens (keys and values).
    pub kv: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub ln1: LnCache<T>,
    pub h: Mat<T>,
    pub objects: Option<ObjectCache<T>>,
    pub mha: MhaCache<T>,
    pub ln2: LnCache<T>,
    pub mlp: MlpCache<T>,
}

/// Pre-norm block. When `groups` is nonempty and the block owns an object
/// pool, object tokens built from this block's normalized patch features
/// join the keys and values; only patch tokens are updated.
pub fn block_forward<T: Scalar>(block: &Block<T>, heads: usize, z: &Mat<T>, groups: Vec<PoolGroup<T>>) -> Result<(Mat<T>, BlockCache<T>)> {
    let (h, ln1) = block.ln1.forward(z);
    let objects = match &block.object {
        Some(pool) if !groups.is_empty() => {
            let (mut tokens, cache) = pool_object_tokens(&pool.mlp, &h, &groups);
            if let Some(table) = &pool.identity {
                add_identity(&mut tokens, table)?;
            }
            let kv = h.vstack(&tokens.features);
            Some(ObjectCache {
                groups,
                tokens,
                pool: cache,
                kv,
            })
        }
        _ => None,
    };
    let kv = objects.as_ref().map_or(&h, |o| &o.kv);
    let (a, mha) = mha_forward(&block.attn, heads, &h, kv, kv);
    let mut y = z.clone();
    y.add_assign(&a);
    let (h2, ln2) = block.ln2.forward(&y);
    let (m, mlp) = block.mlp.forward(&h2);
    y.add_assign(&m);
    Ok((
        y,
        BlockCache {
            ln1,
            h,
            objects,
            mha,
            ln2,
            mlp,
        },
    ))
}

pub fn block_backward<T: Scalar>(block: &Block<T>, heads: usize, cache: &BlockCache<T>, dout: &Mat<T>, g: &mut Block<T>) -> Mat<T> {
    let dh2 = block.mlp.backward(&cache.mlp, dout, &mut g.mlp);
    let mut dy = block.ln2.backward(&cache.ln2, &dh2, &mut g.ln2);
    dy.add_assign(dout);
    let n = cache.h.rows;
    let kv = cache.objects.as_ref().map_or(&cache.h, |o| &o.kv);
    let (mut dh, mut dk, dv) = mha_backward(&block.attn, heads, &cache.h, kv, kv, &cache.mha, &dy, &mut g.attn);
    dk.add_assign(&dv);
    for r in 0..n {
        for (o, &v) in dh.row_mut(r).iter_mut().zip(dk.row(r)) {
            *o += v;
        }
    }
    if let (Some(oc), Some(pool), Some(gpool)) = (&cache.objects, &block.object, g.object.as_mut()) {
        let dobj = dk.slice_rows(n, dk.rows);
        if let Some(gid) = gpool.identity.as_mut() {
            identity_backward(&oc.tokens, &dobj, gid);
        }
        pool_backward(&pool.mlp, &oc.groups, &oc.pool, &dobj, &mut gpool.mlp, &mut dh);
    }
    let mut dz = block.ln1.backward(&cache.ln1, &dh, &mut g.ln1);
    dz.add_assign(&dy);
    dz
}

/// Block without object tokens.
pub fn vanilla_block<T: Scalar>(block: &Block<T>, heads: usize, z: &Mat<T>) -> Mat<T> {
    block_forward(block, heads, z, Vec::new()).expect("no identity lookup without objects").0
}

/// Block whose keys and values are augmented with the object tokens pooled
/// from `groups`.
pub fn oam_block<T: Scalar>(block: &Block<T>, heads: usize, z: &Mat<T>, groups: Vec<PoolGroup<T>>) -> Result<Mat<T>> {
    Ok(block_forward(block, heads, z, groups)?.0)
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Flat indices of the processed rows after the drop, in row order.
    pub rows: Vec<usize>,
    pub drop_layer: usize,
    embed_patches: Mat<T>,
    embed_indices: Vec<usize>,
    pub blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    pooled: Mat<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Number of object tokens attached at each block.
    pub fn object_token_counts(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| b.objects.as_ref().map_or(0, |o| o.tokens.len()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    pub fn prepare(&self, video: &VideoTensor, dets: &DetectionTrackSet) -> Result<PreparedVideo<T>> {
        prepare(&self.cfg, video, dets)
    }

    pub fn sample(&self, input: &PreparedVideo<T>, sampler: &SamplerConfig) -> Result<SampleResult> {
        sampler.validate(self.cfg.depth)?;
        Ok(select(&input.scores, sampler))
    }

    /// Logits for one video.
    pub fn forward(&self, video: &VideoTensor, dets: &DetectionTrackSet, sampler: &SamplerConfig) -> Result<Vec<T>> {
        let input = self.prepare(video, dets)?;
        self.forward_prepared(&input, sampler)
    }

    pub fn forward_prepared(&self, input: &PreparedVideo<T>, sampler: &SamplerConfig) -> Result<Vec<T>> {
        let res = self.sample(input, sampler)?;
        Ok(self.forward_rows(input, &res.order, sampler.drop_layer)?.0)
    }

    /// Runs the network on the given rows (flat token indices, in processing
    /// order). Before block `drop_layer` all tokens are processed.
    pub fn forward_rows(&self, input: &PreparedVideo<T>, rows: &[usize], drop_layer: usize) -> Result<(Vec<T>, ForwardCache<T>)> {
        let cfg = &self.cfg;
        if rows.is_empty() {
            return Err(Error::InvalidConfig("no tokens left after sampling".into()));
        }
        if drop_layer > 0 && drop_layer >= cfg.depth {
            return Err(Error::InvalidConfig(format!("drop_layer {drop_layer} outside depth {}", cfg.depth)));
        }
        let n = input.grid.n();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} outside grid of {n}")));
        }
        let mut cur: Vec<usize> = if drop_layer == 0 { rows.to_vec() } else { (0..n).collect() };
        let embed_patches = input.patches.gather_rows(&cur);
        let mut x = embed_rows(&embed_patches, &cur, &self.params.embed)?;
        let embed_indices = cur.clone();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for (l, block) in self.params.blocks.iter().enumerate() {
            if drop_layer > 0 && l == drop_layer {
                x = x.gather_rows(rows);
                cur = rows.to_vec();
            }
            let groups = if block.object.is_some() && !input.objects.is_empty() {
                groups_from_affinity(&input.affinity(&cur), &input.grid)
            } else {
                Vec::new()
            };
            let (y, cache) = block_forward(block, cfg.heads, &x, groups)?;
            x = y;
            blocks.push(cache);
        }
        let (xn, final_ln) = self.params.norm.forward(&x);
        let mut pooled = Mat::zeros(1, cfg.dim);
        xn.col_sums_into(&mut pooled.data);
        pooled.scale(T::one() / T::lit(xn.rows as f64));
        let logits = self.params.head.forward(&pooled).data;
        Ok((
            logits,
            ForwardCache {
                rows: cur,
                drop_layer,
                embed_patches,
                embed_indices,
                blocks,
                final_ln,
                pooled,
            },
        ))
    }

    /// Parameter gradients of `dlogits . logits`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Params<T> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let dl = Mat::from_vec(1, dlogits.len(), dlogits.to_vec());
        let dpooled = p.head.backward(&cache.pooled, &dl, &mut g.head);
        let rows = cache.rows.len();
        let inv = T::one() / T::lit(rows as f64);
        let mut dxn = Mat::zeros(rows, self.cfg.dim);
        for r in 0..rows {
            for (o, &v) in dxn.row_mut(r).iter_mut().zip(dpooled.row(0)) {
                *o = v * inv;
            }
        }
        let mut dx = p.norm.backward(&cache.final_ln, &dxn, &mut g.norm);
        for l in (0..self.cfg.depth).rev() {
            dx = block_backward(&p.blocks[l], self.cfg.heads, &cache.blocks[l], &dx, &mut g.blocks[l]);
            if cache.drop_layer > 0 && l == cache.drop_layer {
                let mut full = Mat::zeros(cache.embed_indices.len(), self.cfg.dim);
                for (r, &idx) in cache.rows.iter().enumerate() {
                    for (o, &v) in full.row_mut(idx).iter_mut().zip(dx.row(r)) {
                        *o += v;
                    }
                }
                dx = full;
            }
        }
        gemm(T::one(), cache.embed_patches.view().t(), dx.view(), T::one(), &mut g.embed.projection);
        dx.col_sums_into(&mut g.embed.bias.data);
        for (r, &idx) in cache.embed_indices.iter().enumerate() {
            for (o, &v) in g.embed.positional.row_mut(idx).iter_mut().zip(dx.row(r)) {
                *o += v;
            }
        }
        g
    }
}
