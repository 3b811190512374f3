//! Object tokens: affinity-weighted MLP pooling and identity embeddings.

use super::layers::MlpCache;
use super::params::Mlp;
use crate::error::{Error, Result};
use crate::heatmap::{Affinity, ObjectKey};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::tokenizer::TokenGrid;

/// Rows of the current token set that feed one object token.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGroup<T> {
    pub key: ObjectKey,
    pub token_frame: usize,
    /// Row positions in the current token matrix.
    pub rows: Vec<usize>,
    pub weights: Vec<T>,
}

/// One group per `(object, token-frame)` with a nonzero weight somewhere;
/// only the nonzero rows are kept.
pub fn groups_from_affinity<T: Scalar>(aff: &Affinity, grid: &TokenGrid) -> Vec<PoolGroup<T>> {
    let mut groups = Vec::new();
    for (o, &key) in aff.objects.iter().enumerate() {
        for ti in 0..grid.nt {
            let support = aff.support(grid, o, ti);
            if support.is_empty() {
                continue;
            }
            groups.push(PoolGroup {
                key,
                token_frame: ti,
                rows: support.iter().map(|&(j, _)| j).collect(),
                weights: support.iter().map(|&(_, w)| T::lit(w)).collect(),
            });
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTokenSet<T> {
    pub features: Mat<T>,
    pub keys: Vec<ObjectKey>,
    pub token_frames: Vec<usize>,
}

impl<T: Scalar> ObjectTokenSet<T> {
    pub fn empty(dim: usize) -> Self {
        ObjectTokenSet {
            features: Mat::zeros(0, dim),
            keys: Vec::new(),
            token_frames: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    mlp: MlpCache<T>,
    /// For each object token and channel, the stacked row that won the max.
    argmax: Vec<usize>,
}

/// `w = max_rows(MLP(weight * feature))` for every group.
pub fn pool_object_tokens<T: Scalar>(mlp: &Mlp<T>, features: &Mat<T>, groups: &[PoolGroup<T>]) -> (ObjectTokenSet<T>, PoolCache<T>) {
    let d = features.cols;
    let total: usize = groups.iter().map(|g| g.rows.len()).sum();
    let mut u = Mat::zeros(total, d);
    let mut r = 0;
    for g in groups {
        for (&row, &w) in g.rows.iter().zip(&g.weights) {
            for (o, &x) in u.row_mut(r).iter_mut().zip(features.row(row)) {
                *o = w * x;
            }
            r += 1;
        }
    }
    let (act, cache) = mlp.forward(&u);
    let mut out = Mat::zeros(groups.len(), d);
    let mut argmax = vec![0usize; groups.len() * d];
    let mut start = 0;
    for (gi, g) in groups.iter().enumerate() {
        for c in 0..d {
            let mut best = start;
            for s in start + 1..start + g.rows.len() {
                if act.at(s, c) > act.at(best, c) {
                    best = s;
                }
            }
            argmax[gi * d + c] = best;
            *out.at_mut(gi, c) = act.at(best, c);
        }
        start += g.rows.len();
    }
    let set = ObjectTokenSet {
        features: out,
        keys: groups.iter().map(|g| g.key).collect(),
        token_frames: groups.iter().map(|g| g.token_frame).collect(),
    };
    (set, PoolCache { mlp: cache, argmax })
}

/// Routes object-token gradients back to the pooling MLP and to the patch
/// features (accumulated into `dfeatures`).
pub fn pool_backward<T: Scalar>(
    mlp: &Mlp<T>,
    groups: &[PoolGroup<T>],
    cache: &PoolCache<T>,
    dobjects: &Mat<T>,
    g: &mut Mlp<T>,
    dfeatures: &mut Mat<T>,
) {
    let d = dobjects.cols;
    let mut dact = Mat::zeros(cache.mlp.x.rows, d);
    for gi in 0..groups.len() {
        for c in 0..d {
            *dact.at_mut(cache.argmax[gi * d + c], c) += dobjects.at(gi, c);
        }
    }
    let du = mlp.backward(&cache.mlp, &dact, g);
    let mut r = 0;
    for grp in groups {
        for (&row, &w) in grp.rows.iter().zip(&grp.weights) {
            for (o, &v) in dfeatures.row_mut(row).iter_mut().zip(du.row(r)) {
                *o += w * v;
            }
            r += 1;
        }
    }
}

fn check_ids<T: Scalar>(objects: &ObjectTokenSet<T>, table: &Mat<T>) -> Result<()> {
    for key in &objects.keys {
        if let Some(id) = key.track() {
            if id >= table.rows {
                return Err(Error::IdOutOfRange { id, capacity: table.rows });
            }
        }
    }
    Ok(())
}

/// Adds the identity row of each tracked object to all of its tokens.
/// Untracked objects are left unchanged.
pub fn add_identity<T: Scalar>(objects: &mut ObjectTokenSet<T>, table: &Mat<T>) -> Result<()> {
    check_ids(objects, table)?;
    for (i, key) in objects.keys.iter().enumerate() {
        if let Some(id) = key.track() {
            let e = table.row(id);
            for (o, &v) in objects.features.row_mut(i).iter_mut().zip(e) {
                *o += v;
            }
        }
    }
    Ok(())
}

pub fn identity_backward<T: Scalar>(objects: &ObjectTokenSet<T>, dobjects: &Mat<T>, gtable: &mut Mat<T>) {
    for (i, key) in objects.keys.iter().enumerate() {
        if let Some(id) = key.track() {
            for (o, &v) in gtable.row_mut(id).iter_mut().zip(dobjects.row(i)) {
                *o += v;
            }
        }
    }
}
