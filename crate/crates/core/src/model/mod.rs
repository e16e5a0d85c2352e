//! The network graph: feature extractor with a fixed output stride, channel
//! adjustment, pixel-wise fusion block and the two anchor-free heads.

mod checkpoint;
mod correlation;
mod cost;
mod graph;
pub mod layers;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use correlation::{correlation_backward, pixel_wise_correlation};
pub use cost::{count_cost, CostReport, LayerCost};
pub use graph::{PairCache, PairForward, PairGrads};
pub(crate) use graph::pool_batch;

use crate::error::{FearError, Result};
use crate::float::{sigmoid, Float};
use layers::{Conv2d, ConvBlock, Module, ParamSlot, Stack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_stages: usize,
    /// Output channels of each backbone stage.
    pub backbone_channels: Vec<usize>,
    pub final_stride: usize,
    pub adjusted_channels: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Spatial cells of the template grid used for correlation (a square).
    pub template_corr_cells: usize,
    pub head_blocks: usize,
    /// Builds the single mixing parameter of the dual-template representation.
    pub dual_template: bool,
    /// Initial unconstrained mixing value; `sigmoid(-2.2) ≈ 0.1`.
    pub init_raw_mix: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_stages: 4,
            backbone_channels: vec![16, 32, 64, 64],
            final_stride: 16,
            adjusted_channels: 128,
            template_size: 128,
            search_size: 256,
            template_corr_cells: 16,
            head_blocks: 2,
            dual_template: true,
            init_raw_mix: -2.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow channels for CPU training runs; same geometry as the default.
    pub fn toy() -> Self {
        ModelConfig {
            backbone_channels: vec![8, 16, 24, 32],
            adjusted_channels: 32,
            ..ModelConfig::default()
        }
    }

    /// 16-channel network on 32/64 pixel crops, used for gradient checks.
    pub fn miniature() -> Self {
        ModelConfig {
            backbone_channels: vec![4, 8, 8, 16],
            adjusted_channels: 16,
            template_size: 32,
            search_size: 64,
            template_corr_cells: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_stages == 0 {
            return Err(FearError::config("backbone_stages", "must be at least 1"));
        }
        if self.backbone_channels.len() != self.backbone_stages {
            return Err(FearError::config(
                "backbone_channels",
                format!("expected {} entries", self.backbone_stages),
            ));
        }
        if self.backbone_channels.contains(&0) || self.adjusted_channels == 0 {
            return Err(FearError::config("adjusted_channels", "channel counts must be positive"));
        }
        if !self.final_stride.is_power_of_two()
            || self.final_stride < 2
            || self.final_stride.trailing_zeros() as usize > self.backbone_stages
        {
            return Err(FearError::config(
                "final_stride",
                "must be a power of two reachable with the backbone stages",
            ));
        }
        if self.search_size != 2 * self.template_size {
            return Err(FearError::config(
                "search_size",
                "must equal twice the template size",
            ));
        }
        if !self.template_size.is_multiple_of(self.final_stride) {
            return Err(FearError::config(
                "template_size",
                "must be divisible by final_stride",
            ));
        }
        let side = self.template_size / self.final_stride;
        let cells = self.template_corr_cells;
        if cells == 0 || integer_sqrt(cells).is_none() || cells > side * side {
            return Err(FearError::config(
                "template_corr_cells",
                format!("must be a perfect square no larger than {}", side * side),
            ));
        }
        if self.head_blocks == 0 {
            return Err(FearError::config("head_blocks", "must be at least 1"));
        }
        Ok(())
    }

    pub fn template_side(&self) -> usize {
        self.template_size / self.final_stride
    }

    /// Side of the score and regression maps.
    pub fn map_side(&self) -> usize {
        self.search_size / self.final_stride
    }

    pub fn corr_side(&self) -> usize {
        integer_sqrt(self.template_corr_cells).unwrap_or(1)
    }

    fn stage_strides(&self) -> Vec<usize> {
        let downsample = self.final_stride.trailing_zeros() as usize;
        (0..self.backbone_stages)
            .map(|i| if i < downsample { 2 } else { 1 })
            .collect()
    }
}

pub(crate) fn integer_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// `C x H x W` features with the stride (input pixels per cell) they were
/// extracted at.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
    pub stride: usize,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(data: Array3<T>, stride: usize) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h != w {
            return Err(FearError::DimensionMismatch(format!(
                "feature maps must be square, got {h}x{w}"
            )));
        }
        Ok(FeatureMap { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn side(&self) -> usize {
        self.data.dim().1
    }

    pub fn cells(&self) -> usize {
        self.side() * self.side()
    }

    /// `C x (H*W)` view-copy, row-major over cells.
    pub fn flattened(&self) -> Array2<T> {
        let (c, h, w) = self.data.dim();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
    }

    pub fn to_batch(&self) -> Array4<T> {
        self.data.clone().insert_axis(Axis(0))
    }

    pub fn cast<U: Float>(&self) -> FeatureMap<U> {
        FeatureMap {
            data: self.data.mapv(|v| U::c(v.f64())),
            stride: self.stride,
        }
    }
}

/// Raw head activations: classification logits `1 x S x S` and regression
/// activations `4 x S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub cls: Array3<T>,
    pub reg: Array3<T>,
}

impl<T: Float> HeadOutputs<T> {
    pub fn side(&self) -> usize {
        self.cls.dim().1
    }

    /// Sigmoid of the classification logits as an `S x S` map.
    pub fn scores(&self) -> Array2<T> {
        self.cls.index_axis(Axis(0), 0).mapv(sigmoid)
    }
}

/// Converts `H x W x 3` images in `[0, 1]` to an `N x 3 x H x W` batch.
pub fn images_to_batch<T: Float>(images: &[&Array3<f32>]) -> Result<Array4<T>> {
    let first = images
        .first()
        .ok_or_else(|| FearError::DimensionMismatch("empty image batch".into()))?;
    let (h, w, c) = first.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.dim() != (h, w, c) {
            return Err(FearError::ShapeMismatch {
                expected: vec![h, w, c],
                actual: img.shape().to_vec(),
            });
        }
        let chw = img.view().permuted_axes([2, 0, 1]);
        out.slice_mut(s![n, .., .., ..])
            .zip_mut_with(&chw, |o, &v| *o = T::c(v as f64));
    }
    Ok(out)
}

/// Adaptive average pooling of a square `C x S x S` map to `C x n x n`;
/// output cell `i` averages input rows `floor(i*S/n) .. ceil((i+1)*S/n)`.
pub fn reduce_template<T: Float>(template: &FeatureMap<T>, cells: usize) -> Result<FeatureMap<T>> {
    let n = integer_sqrt(cells).ok_or(FearError::NotPerfectSquare(cells))?;
    if cells == 0 || cells > template.cells() {
        return Err(FearError::DimensionMismatch(format!(
            "cannot reduce {} cells to {cells}",
            template.cells()
        )));
    }
    let pooled = adaptive_pool(template.data.view(), n);
    let stride = template.stride * template.side() / n;
    FeatureMap::new(pooled, stride)
}

fn pool_bins(side: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|i| ((i * side) / n, ((i + 1) * side).div_ceil(n)))
        .collect()
}

pub(crate) fn adaptive_pool<T: Float>(x: ArrayView3<'_, T>, n: usize) -> Array3<T> {
    let (c, side, _) = x.dim();
    if n == side {
        return x.to_owned();
    }
    let bins = pool_bins(side, n);
    let mut out = Array3::zeros((c, n, n));
    for ch in 0..c {
        for (i, &(y0, y1)) in bins.iter().enumerate() {
            for (j, &(x0, x1)) in bins.iter().enumerate() {
                let block = x.slice(s![ch, y0..y1, x0..x1]);
                out[[ch, i, j]] = block.sum() / T::c(block.len() as f64);
            }
        }
    }
    out
}

pub(crate) fn adaptive_pool_backward<T: Float>(d: ArrayView3<'_, T>, side: usize) -> Array3<T> {
    let (c, n, _) = d.dim();
    if n == side {
        return d.to_owned();
    }
    let bins = pool_bins(side, n);
    let mut out = Array3::zeros((c, side, side));
    for ch in 0..c {
        for (i, &(y0, y1)) in bins.iter().enumerate() {
            for (j, &(x0, x1)) in bins.iter().enumerate() {
                let count = T::c(((y1 - y0) * (x1 - x0)) as f64);
                let g = d[[ch, i, j]] / count;
                out.slice_mut(s![ch, y0..y1, x0..x1]).mapv_inplace(|v| v + g);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct MixParam<T> {
    pub value: Array1<T>,
    pub grad: Array1<T>,
}

/// Network weights. Inference methods take `&self`; training methods take
/// `&mut self` because they update batch-norm statistics and accumulate
/// gradients.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: ModelConfig,
    pub(crate) backbone: Stack<T>,
    pub(crate) adjust: ConvBlock<T>,
    pub(crate) mix: Option<MixParam<T>>,
    pub(crate) fusion_search: ConvBlock<T>,
    pub(crate) fusion_aggregate: ConvBlock<T>,
    pub(crate) cls_tower: Stack<T>,
    pub(crate) cls_out: Conv2d<T>,
    pub(crate) reg_tower: Stack<T>,
    pub(crate) reg_out: Conv2d<T>,
}

pub struct FeatureCache<T> {
    backbone: Vec<layers::BlockCache<T>>,
    adjust: layers::BlockCache<T>,
}

pub struct FusionCache<T> {
    search: layers::BlockCache<T>,
    search_out: Array4<T>,
    template: Array4<T>,
    aggregate: layers::BlockCache<T>,
}

pub struct HeadsCache<T> {
    cls_tower: Vec<layers::BlockCache<T>>,
    cls_out: layers::ConvCache<T>,
    reg_tower: Vec<layers::BlockCache<T>>,
    reg_out: layers::ConvCache<T>,
}

/// Prior probability for the classification bias initialisation.
const CLS_PRIOR: f64 = 0.01;
/// Initial regression bias; `exp(1) * 16 ≈ 43` pixels per side.
const REG_BIAS_INIT: f64 = 1.0;

impl<T: Float> Network<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        for (&out_ch, &stride) in config.backbone_channels.iter().zip(&config.stage_strides()) {
            blocks.push(ConvBlock::new(in_ch, out_ch, 3, stride, true, &mut rng));
            in_ch = out_ch;
        }
        let c = config.adjusted_channels;
        let adjust = ConvBlock::new(in_ch, c, 1, 1, false, &mut rng);
        let mix = config.dual_template.then(|| MixParam {
            value: Array1::from_elem(1, T::c(config.init_raw_mix)),
            grad: Array1::zeros(1),
        });
        let fusion_search = ConvBlock::new(c, c, 3, 1, true, &mut rng);
        let fusion_aggregate = ConvBlock::new(c + config.template_corr_cells, c, 1, 1, true, &mut rng);
        let tower = |rng: &mut ChaCha8Rng| Stack {
            blocks: (0..config.head_blocks)
                .map(|_| ConvBlock::new(c, c, 3, 1, true, rng))
                .collect(),
        };
        let cls_tower = tower(&mut rng);
        let mut cls_out = Conv2d::new(c, 1, 3, 1, 1, &mut rng);
        cls_out.weight.mapv_inplace(|v| v * T::c(0.1));
        cls_out.bias.fill(T::c(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln()));
        let reg_tower = tower(&mut rng);
        let mut reg_out = Conv2d::new(c, 4, 3, 1, 1, &mut rng);
        reg_out.weight.mapv_inplace(|v| v * T::c(0.1));
        reg_out.bias.fill(T::c(REG_BIAS_INIT));
        Ok(Network {
            config,
            backbone: Stack { blocks },
            adjust,
            mix,
            fusion_search,
            fusion_aggregate,
            cls_tower,
            cls_out,
            reg_tower,
            reg_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Unconstrained mixing parameter, if the dual-template module is built.
    pub fn raw_mix(&self) -> Option<T> {
        self.mix.as_ref().map(|m| m.value[0])
    }

    pub fn set_raw_mix(&mut self, raw: T) {
        if let Some(m) = self.mix.as_mut() {
            m.value[0] = raw;
        }
    }

    pub fn raw_mix_grad(&self) -> Option<T> {
        self.mix.as_ref().map(|m| m.grad[0])
    }

    /// Mixing weight `w = sigmoid(raw)`, zero without the module.
    pub fn mix_weight(&self) -> T {
        self.raw_mix().map(sigmoid).unwrap_or_else(T::zero)
    }

    /// Copies all weights and statistics into another precision.
    pub fn cast<U: Float>(&self) -> Network<U> {
        let mut src = self.clone();
        let mut values: Vec<Vec<f64>> = Vec::new();
        src.visit("", &mut |slot| {
            values.push(slot.value.iter().map(|v| v.f64()).collect())
        });
        let mut dst = Network::<U>::new(self.config.clone()).expect("config already validated");
        let mut it = values.into_iter();
        dst.visit("", &mut |slot| {
            let v = it.next().expect("same parameter layout");
            for (d, s) in slot.value.iter_mut().zip(v) {
                *d = U::c(s);
            }
        });
        dst
    }

    fn check_image_side(&self, side: usize) -> Result<()> {
        if side == 0 || !side.is_multiple_of(self.config.final_stride) {
            return Err(FearError::DimensionMismatch(format!(
                "image side {side} is not divisible by stride {}",
                self.config.final_stride
            )));
        }
        Ok(())
    }

    /// Backbone plus adjust layer on one `H x W x 3` image.
    pub fn extract_features(&self, image: &Array3<f32>) -> Result<FeatureMap<T>> {
        let (h, w, c) = image.dim();
        if h != w || c != 3 {
            return Err(FearError::DimensionMismatch(format!(
                "expected a square RGB image, got {h}x{w}x{c}"
            )));
        }
        self.check_image_side(h)?;
        let batch = images_to_batch::<T>(&[image])?;
        let feats = self.infer_features(&batch);
        FeatureMap::new(feats.index_axis_move(Axis(0), 0), self.config.final_stride)
    }

    pub fn infer_features(&self, images: &Array4<T>) -> Array4<T> {
        self.adjust.infer(&self.backbone.infer(images))
    }

    pub fn forward_features(&mut self, images: &Array4<T>) -> (Array4<T>, FeatureCache<T>) {
        let (h, backbone) = self.backbone.forward(images);
        let (y, adjust) = self.adjust.forward(&h);
        (y, FeatureCache { backbone, adjust })
    }

    /// Backpropagates into backbone and adjust parameters (image gradient is
    /// not computed).
    pub fn backward_features(&mut self, cache: FeatureCache<T>, dy: &Array4<T>) {
        let dh = self
            .adjust
            .backward(cache.adjust, dy, true)
            .expect("requested dx");
        self.backbone.backward(cache.backbone, dh, false);
    }

    fn check_fusion_inputs(&self, search: &Array4<T>, template: &Array4<T>) -> Result<()> {
        let c = self.config.adjusted_channels;
        let (_, sc, sh, sw) = search.dim();
        let (tn, tc, th, tw) = template.dim();
        if sc != c || tc != c {
            return Err(FearError::ChannelMismatch {
                template: tc,
                search: sc,
            });
        }
        if th * tw != self.config.template_corr_cells || tn != search.dim().0 || sh != sw {
            return Err(FearError::ShapeMismatch {
                expected: vec![search.dim().0, c, self.config.corr_side(), self.config.corr_side()],
                actual: template.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn correlate_concat(search_out: &Array4<T>, template: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = search_out.dim();
        let cells = template.dim().2 * template.dim().3;
        let mut cat = Array4::zeros((n, c + cells, h, w));
        cat.slice_mut(s![.., ..c, .., ..]).assign(search_out);
        for b in 0..n {
            let t = flatten3(template.index_axis(Axis(0), b));
            let sf = flatten3(search_out.index_axis(Axis(0), b));
            let corr = pixel_wise_correlation(t.view(), sf.view()).expect("channels checked");
            let corr = corr
                .into_shape_with_order((cells, h, w))
                .expect("correlation reshape");
            cat.slice_mut(s![b, c.., .., ..]).assign(&corr);
        }
        cat
    }

    /// Batched inference fusion of search features `N x C x S x S` with reduced
    /// template features `N x C x n x n`.
    pub fn infer_fusion(&self, search: &Array4<T>, template: &Array4<T>) -> Result<Array4<T>> {
        self.check_fusion_inputs(search, template)?;
        let s1 = self.fusion_search.infer(search);
        let cat = Self::correlate_concat(&s1, template);
        Ok(self.fusion_aggregate.infer(&cat))
    }

    pub fn fusion_block(
        &self,
        search: &FeatureMap<T>,
        template: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let fused = self.infer_fusion(&search.to_batch(), &template.to_batch())?;
        FeatureMap::new(fused.index_axis_move(Axis(0), 0), search.stride)
    }

    pub fn forward_fusion(
        &mut self,
        search: &Array4<T>,
        template: &Array4<T>,
    ) -> Result<(Array4<T>, FusionCache<T>)> {
        self.check_fusion_inputs(search, template)?;
        let (s1, search_cache) = self.fusion_search.forward(search);
        let cat = Self::correlate_concat(&s1, template);
        let (y, aggregate) = self.fusion_aggregate.forward(&cat);
        Ok((
            y,
            FusionCache {
                search: search_cache,
                search_out: s1,
                template: template.clone(),
                aggregate,
            },
        ))
    }

    /// Returns `(d_search, d_template)`.
    pub fn backward_fusion(
        &mut self,
        cache: FusionCache<T>,
        dy: &Array4<T>,
    ) -> (Array4<T>, Array4<T>) {
        let d_cat = self
            .fusion_aggregate
            .backward(cache.aggregate, dy, true)
            .expect("requested dx");
        let (n, c, h, w) = cache.search_out.dim();
        let (_, _, th, tw) = cache.template.dim();
        let cells = th * tw;
        let mut d_s1 = d_cat.slice(s![.., ..c, .., ..]).to_owned();
        let mut d_template = Array4::zeros(cache.template.raw_dim());
        for b in 0..n {
            let t = flatten3(cache.template.index_axis(Axis(0), b));
            let sf = flatten3(cache.search_out.index_axis(Axis(0), b));
            let d_corr = d_cat
                .slice(s![b, c.., .., ..])
                .to_owned()
                .into_shape_with_order((cells, h * w))
                .expect("d_corr reshape");
            let (dt, ds) = correlation_backward(t.view(), sf.view(), d_corr.view());
            d_template
                .slice_mut(s![b, .., .., ..])
                .assign(&dt.into_shape_with_order((c, th, tw)).expect("dt"));
            let mut slot = d_s1.slice_mut(s![b, .., .., ..]);
            slot += &ds.into_shape_with_order((c, h, w)).expect("ds");
        }
        let d_search = self
            .fusion_search
            .backward(cache.search, &d_s1, true)
            .expect("requested dx");
        (d_search, d_template)
    }

    /// Batched head inference: returns `(cls N x 1 x S x S, reg N x 4 x S x S)`.
    pub fn infer_heads(&self, fused: &Array4<T>) -> (Array4<T>, Array4<T>) {
        let cls = self.cls_out.infer(&self.cls_tower.infer(fused));
        let reg = self.reg_out.infer(&self.reg_tower.infer(fused));
        (cls, reg)
    }

    pub fn run_heads(&self, fused: &FeatureMap<T>) -> Result<HeadOutputs<T>> {
        if fused.channels() != self.config.adjusted_channels {
            return Err(FearError::ShapeMismatch {
                expected: vec![self.config.adjusted_channels, fused.side(), fused.side()],
                actual: fused.data.shape().to_vec(),
            });
        }
        let (cls, reg) = self.infer_heads(&fused.to_batch());
        Ok(HeadOutputs {
            cls: cls.index_axis_move(Axis(0), 0),
            reg: reg.index_axis_move(Axis(0), 0),
        })
    }

    pub fn forward_heads(&mut self, fused: &Array4<T>) -> (Array4<T>, Array4<T>, HeadsCache<T>) {
        let (ch, cls_tower) = self.cls_tower.forward(fused);
        let (cls, cls_out) = self.cls_out.forward(&ch);
        let (rh, reg_tower) = self.reg_tower.forward(fused);
        let (reg, reg_out) = self.reg_out.forward(&rh);
        (
            cls,
            reg,
            HeadsCache {
                cls_tower,
                cls_out,
                reg_tower,
                reg_out,
            },
        )
    }

    /// Returns the gradient w.r.t. the fused features.
    pub fn backward_heads(
        &mut self,
        cache: HeadsCache<T>,
        d_cls: &Array4<T>,
        d_reg: &Array4<T>,
    ) -> Array4<T> {
        let dch = self.cls_out.backward(cache.cls_out, d_cls, true).expect("dx");
        let mut d = self.cls_tower.backward(cache.cls_tower, dch, true).expect("dx");
        let drh = self.reg_out.backward(cache.reg_out, d_reg, true).expect("dx");
        d += &self.reg_tower.backward(cache.reg_tower, drh, true).expect("dx");
        d
    }

    /// Learnable parameter count.
    pub fn parameter_count(&self) -> usize {
        self.clone().num_params()
    }
}

impl<T: Float> Module<T> for Network<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        let p = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.backbone.visit(&p("backbone"), f);
        self.adjust.visit(&p("adjust"), f);
        if let Some(mix) = self.mix.as_mut() {
            f(ParamSlot {
                name: p("dual_template.raw_mix"),
                shape: vec![1],
                value: mix.value.as_slice_mut().expect("contiguous"),
                grad: Some(mix.grad.as_slice_mut().expect("contiguous")),
            });
        }
        self.fusion_search.visit(&p("fusion.search"), f);
        self.fusion_aggregate.visit(&p("fusion.aggregate"), f);
        self.cls_tower.visit(&p("heads.cls.tower"), f);
        self.cls_out.visit(&p("heads.cls.out"), f);
        self.reg_tower.visit(&p("heads.reg.tower"), f);
        self.reg_out.visit(&p("heads.reg.out"), f);
    }
}

pub(crate) fn flatten3<T: Float>(x: ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous")
}
