//! Full training graph for one (static template, dynamic template, search)
//! triple: shared feature extraction, dual-template mixing, template
//! reduction, fusion and heads.

use ndarray::{s, Array4, Axis};

use super::{
    adaptive_pool, adaptive_pool_backward, FeatureCache, FusionCache, HeadsCache, Network,
};
use crate::error::Result;
use crate::float::Float;
use crate::template_policy::{combine_backward, combine_features};

pub struct PairForward<T> {
    /// `N x 1 x S x S` logits.
    pub cls: Array4<T>,
    /// `N x 4 x S x S` raw regression activations.
    pub reg: Array4<T>,
    /// Mixed template features `(1 - w) F_T + w F_d`.
    pub combined: Array4<T>,
    /// Adjusted search features before fusion.
    pub search_feats: Array4<T>,
    pub cache: PairCache<T>,
}

pub struct PairCache<T> {
    template: FeatureCache<T>,
    dynamic: Option<FeatureCache<T>>,
    search: FeatureCache<T>,
    static_feats: Array4<T>,
    dynamic_feats: Array4<T>,
    fusion: FusionCache<T>,
    heads: HeadsCache<T>,
}

/// Upstream gradients for [`Network::backward_pair`].
pub struct PairGrads<T> {
    pub cls: Array4<T>,
    pub reg: Array4<T>,
    pub combined: Option<Array4<T>>,
    pub search_feats: Option<Array4<T>>,
}

pub(crate) fn pool_batch<T: Float>(x: &Array4<T>, n: usize) -> Array4<T> {
    let (b, c, _, _) = x.dim();
    let mut out = Array4::zeros((b, c, n, n));
    for i in 0..b {
        out.slice_mut(s![i, .., .., ..])
            .assign(&adaptive_pool(x.index_axis(Axis(0), i), n));
    }
    out
}

fn pool_batch_backward<T: Float>(d: &Array4<T>, side: usize) -> Array4<T> {
    let (b, c, _, _) = d.dim();
    let mut out = Array4::zeros((b, c, side, side));
    for i in 0..b {
        out.slice_mut(s![i, .., .., ..])
            .assign(&adaptive_pool_backward(d.index_axis(Axis(0), i), side));
    }
    out
}

impl<T: Float> Network<T> {
    /// Training-mode forward. Image batches are `N x 3 x H x W`.
    pub fn forward_pair(
        &mut self,
        template: &Array4<T>,
        dynamic: &Array4<T>,
        search: &Array4<T>,
    ) -> Result<PairForward<T>> {
        let (static_feats, template_cache) = self.forward_features(template);
        let (dynamic_feats, dynamic_cache) = if self.mix.is_some() {
            let (f, c) = self.forward_features(dynamic);
            (f, Some(c))
        } else {
            (static_feats.clone(), None)
        };
        let combined = combine_features(&static_feats, &dynamic_feats, self.mix_weight());
        let reduced = pool_batch(&combined, self.config.corr_side());
        let (search_feats, search_cache) = self.forward_features(search);
        let (fused, fusion) = self.forward_fusion(&search_feats, &reduced)?;
        let (cls, reg, heads) = self.forward_heads(&fused);
        Ok(PairForward {
            cls,
            reg,
            combined,
            search_feats,
            cache: PairCache {
                template: template_cache,
                dynamic: dynamic_cache,
                search: search_cache,
                static_feats,
                dynamic_feats,
                fusion,
                heads,
            },
        })
    }

    /// Accumulates gradients of every learnable parameter.
    pub fn backward_pair(&mut self, cache: PairCache<T>, grads: PairGrads<T>) {
        let d_fused = self.backward_heads(cache.heads, &grads.cls, &grads.reg);
        let (mut d_search, d_reduced) = self.backward_fusion(cache.fusion, &d_fused);
        if let Some(extra) = grads.search_feats {
            d_search += &extra;
        }
        self.backward_features(cache.search, &d_search);

        let side = cache.static_feats.dim().2;
        let mut d_combined = pool_batch_backward(&d_reduced, side);
        if let Some(extra) = grads.combined {
            d_combined += &extra;
        }
        match (self.mix.as_ref().map(|m| m.value[0]), cache.dynamic) {
            (Some(raw), Some(dynamic_cache)) => {
                let (d_static, d_dynamic, d_raw) = combine_backward(
                    &d_combined,
                    &cache.static_feats,
                    &cache.dynamic_feats,
                    raw,
                );
                if let Some(m) = self.mix.as_mut() {
                    m.grad[0] += d_raw;
                }
                self.backward_features(cache.template, &d_static);
                self.backward_features(dynamic_cache, &d_dynamic);
            }
            _ => self.backward_features(cache.template, &d_combined),
        }
    }
}
