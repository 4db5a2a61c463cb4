//! Backbones and the end-to-end descriptor pipeline.
//!
//! Two backbone families are provided. The image backbone is a small
//! three-stage fully-convolutional network (3x3 convolutions, stride 2,
//! widths 16/32/64, ReLU) with attention blocks insertable after the last
//! two stages; insertion indices 4 and 5 name those two points, mirroring
//! the conv4_x/conv5_x levels of large residual networks. The patch
//! backbone follows the seven-layer L2-Net shape: a 32x32 grayscale patch
//! in, a 128-dimensional unit descriptor out, attention insertable after
//! layers 3 through 6.
//!
//! Image models pool through clip -> GeM -> whitening -> l2; patch models
//! l2-normalize the final 1x1x128 map directly.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{
    instance_standardize, instance_standardize_backward, relu, relu_backward, ConvLayer,
    InstNormCache,
};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::pooling::{
    gem_pool, gem_pool_backward, l2_normalize, l2_normalize_backward, whiten, whiten_backward,
    Descriptor, FeatureMap, GemParam, WhiteningLayer,
};
use crate::soa::{init_soa, soa_backward, soa_forward_cached, AttentionMap, SoaCache, SoaParams};

/// Channel reduction of the attention query/key heads.
pub const SOA_REDUCTION: usize = 2;

/// Canonical widths of the three image-backbone stages.
pub const TOY_CHANNELS: [usize; 3] = [16, 32, 64];

/// Test-time scale pyramid `[1, sqrt(2), 1/sqrt(2)]`.
pub fn default_scales() -> Vec<f64> {
    vec![1.0, 2f64.sqrt(), 1.0 / 2f64.sqrt()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyFcn,
    L2Net,
}

/// Architecture description: backbone family, attention insertion points,
/// and the per-stage channel widths and strides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub soa_insertions: BTreeSet<usize>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub min_input_dim: usize,
}

impl BackboneSpec {
    /// The three-stage image backbone. Attention is insertable after
    /// stages two and three, addressed as insertion points 4 and 5.
    pub fn toy_fcn(in_channels: usize, insertions: &[usize]) -> Result<Self> {
        Self::toy_fcn_with_widths(in_channels, TOY_CHANNELS, insertions, 32)
    }

    /// Width-reduced variant of the image backbone, used for numeric
    /// verification where finite differences over every parameter must
    /// stay cheap. Same topology and insertion points.
    pub fn toy_fcn_with_widths(
        in_channels: usize,
        widths: [usize; 3],
        insertions: &[usize],
        min_input_dim: usize,
    ) -> Result<Self> {
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::validation(format!(
                "image backbone expects 1 or 3 input channels, got {in_channels}"
            )));
        }
        let set: BTreeSet<usize> = insertions.iter().copied().collect();
        for &i in &set {
            if i != 4 && i != 5 {
                return Err(Error::validation(format!(
                    "image backbone admits attention insertions 4 and 5 only, got {i}"
                )));
            }
        }
        if min_input_dim < 8 {
            return Err(Error::validation("minimum input dimension must be at least 8"));
        }
        Ok(BackboneSpec {
            kind: BackboneKind::ToyFcn,
            in_channels,
            soa_insertions: set,
            channels: widths.to_vec(),
            strides: vec![2, 2, 2],
            min_input_dim,
        })
    }

    /// The seven-layer patch backbone. Attention is insertable after
    /// layers 3 to 6; layer 7 reduces the map to 1x1 and admits none.
    pub fn l2net(insertions: &[usize]) -> Result<Self> {
        let set: BTreeSet<usize> = insertions.iter().copied().collect();
        for &i in &set {
            if !(3..=6).contains(&i) {
                return Err(Error::validation(format!(
                    "patch backbone admits attention insertions 3..=6, got {i}"
                )));
            }
        }
        Ok(BackboneSpec {
            kind: BackboneKind::L2Net,
            in_channels: 1,
            soa_insertions: set,
            channels: vec![32, 32, 64, 64, 128, 128, 128],
            strides: vec![1, 1, 2, 1, 2, 1, 1],
            min_input_dim: 32,
        })
    }

    /// Channel width of the final feature map, i.e. the descriptor width
    /// before whitening.
    pub fn output_channels(&self) -> usize {
        *self.channels.last().expect("spec has stages")
    }

    /// Feature-map channel width at an insertion point.
    pub fn channels_at_insertion(&self, insertion: usize) -> Result<usize> {
        let stage = self.stage_of_insertion(insertion)?;
        Ok(self.channels[stage])
    }

    /// 0-based stage index after which the given insertion point sits.
    pub fn stage_of_insertion(&self, insertion: usize) -> Result<usize> {
        match self.kind {
            BackboneKind::ToyFcn => match insertion {
                4 => Ok(1),
                5 => Ok(2),
                other => Err(Error::validation(format!(
                    "insertion {other} is not a legal image-backbone point (4 or 5)"
                ))),
            },
            BackboneKind::L2Net => {
                if (3..=6).contains(&insertion) {
                    Ok(insertion - 1)
                } else {
                    Err(Error::validation(format!(
                        "insertion {insertion} is not a legal patch-backbone point (3..=6)"
                    )))
                }
            }
        }
    }

    /// Cumulative spatial stride from the input to the map at an
    /// insertion point.
    pub fn cumulative_stride(&self, insertion: usize) -> Result<usize> {
        let stage = self.stage_of_insertion(insertion)?;
        Ok(self.strides[..=stage].iter().product())
    }

    fn stage_plans(&self) -> Vec<StagePlan> {
        let mut plans = Vec::new();
        match self.kind {
            BackboneKind::ToyFcn => {
                for (i, (&c_out, &stride)) in
                    self.channels.iter().zip(self.strides.iter()).enumerate()
                {
                    let insertion = match i {
                        1 if self.soa_insertions.contains(&4) => Some(4),
                        2 if self.soa_insertions.contains(&5) => Some(5),
                        _ => None,
                    };
                    plans.push(StagePlan {
                        kernel: 3,
                        stride,
                        padding: 1,
                        c_out,
                        instnorm: false,
                        relu: true,
                        insertion,
                    });
                }
            }
            BackboneKind::L2Net => {
                for (i, (&c_out, &stride)) in
                    self.channels.iter().zip(self.strides.iter()).enumerate()
                {
                    let layer = i + 1;
                    let last = layer == 7;
                    plans.push(StagePlan {
                        kernel: if last { 8 } else { 3 },
                        stride,
                        padding: if last { 0 } else { 1 },
                        c_out,
                        instnorm: !last,
                        relu: !last,
                        insertion: if (3..=6).contains(&layer)
                            && self.soa_insertions.contains(&layer)
                        {
                            Some(layer)
                        } else {
                            None
                        },
                    });
                }
            }
        }
        plans
    }
}

#[derive(Debug, Clone)]
struct StagePlan {
    kernel: usize,
    stride: usize,
    padding: usize,
    c_out: usize,
    instnorm: bool,
    relu: bool,
    insertion: Option<usize>,
}

/// A complete descriptor model: backbone weights, attention blocks per
/// insertion point, the GeM exponent and the whitening layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorModel {
    pub spec: BackboneSpec,
    pub convs: Vec<ConvLayer>,
    pub soa: BTreeMap<usize, SoaParams>,
    pub gem: GemParam,
    pub whitening: WhiteningLayer,
}

impl DescriptorModel {
    /// Seeded initialization. Convolution weights are drawn first from a
    /// single stream, so models sharing a seed have identical backbone
    /// weights regardless of which attention blocks they carry; attention
    /// block sub-seeds are drawn afterwards.
    pub fn init(spec: BackboneSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = spec.in_channels;
        for plan in spec.stage_plans() {
            convs.push(ConvLayer::init(
                plan.kernel,
                plan.stride,
                plan.padding,
                c_in,
                plan.c_out,
                &mut rng,
            ));
            c_in = plan.c_out;
        }
        let mut soa = BTreeMap::new();
        for &insertion in &spec.soa_insertions {
            let d = spec.channels_at_insertion(insertion)?;
            soa.insert(insertion, init_soa(d, SOA_REDUCTION, rng.gen::<u64>())?);
        }
        let out = spec.output_channels();
        Ok(DescriptorModel {
            spec,
            convs,
            soa,
            gem: GemParam::default(),
            whitening: WhiteningLayer::identity(out),
        })
    }

    /// Add a freshly initialized (identity) attention block at a legal
    /// insertion point of an existing model.
    pub fn insert_fresh_soa(&mut self, insertion: usize, seed: u64) -> Result<()> {
        let d = self.spec.channels_at_insertion(insertion)?;
        self.spec.soa_insertions.insert(insertion);
        self.soa.insert(insertion, init_soa(d, SOA_REDUCTION, seed)?);
        Ok(())
    }

    /// Compute the descriptor for one image, dispatching to the head that
    /// matches the backbone family.
    pub fn descriptor(&self, image: &Image) -> Result<Descriptor> {
        Ok(self.descriptor_cached(image)?.0)
    }

    /// Forward pass that keeps every intermediate needed by
    /// [`DescriptorModel::descriptor_backward`].
    pub fn descriptor_cached(&self, image: &Image) -> Result<(Descriptor, PipelineCache)> {
        let (feature, backbone) = backbone_forward(image, self)?;
        match self.spec.kind {
            BackboneKind::ToyFcn => {
                let pooled = gem_pool(&feature, &self.gem);
                let whitened = whiten(&pooled, &self.whitening)?;
                let descriptor = l2_normalize(&whitened)?;
                Ok((
                    descriptor,
                    PipelineCache {
                        backbone,
                        head: HeadCache::Gem { feature, pooled, whitened },
                    },
                ))
            }
            BackboneKind::L2Net => {
                let flat = feature.as_locations().row(0).to_owned();
                let descriptor = l2_normalize(&flat)?;
                Ok((descriptor, PipelineCache { backbone, head: HeadCache::Patch { flat } }))
            }
        }
    }

    /// Backward pass from a descriptor gradient down to every parameter.
    /// Convolution weight gradients are skipped when `want_backbone_grads`
    /// is false (frozen backbone); input gradients still flow through so
    /// attention blocks earlier in the network receive theirs.
    pub fn descriptor_backward(
        &self,
        cache: &PipelineCache,
        d_descriptor: &Array1<f64>,
        want_backbone_grads: bool,
    ) -> ModelGrads {
        let (d_feature, gem_p, whiten_grads) = match &cache.head {
            HeadCache::Gem { feature, pooled, whitened } => {
                let d_whitened = l2_normalize_backward(whitened, d_descriptor);
                let (d_pooled, d_w, d_b) = whiten_backward(pooled, &self.whitening, &d_whitened);
                let (d_feat, d_p) = gem_pool_backward(feature, &self.gem, &d_pooled);
                (d_feat, d_p, Some((d_w, d_b)))
            }
            HeadCache::Patch { flat } => {
                let d_flat = l2_normalize_backward(flat, d_descriptor);
                let d = flat.len();
                let d_feat = d_flat
                    .into_shape_with_order((1, 1, d))
                    .expect("patch head output is 1x1xd");
                (d_feat, 0.0, None)
            }
        };
        let (convs, soa) = backbone_backward(self, &cache.backbone, d_feature, want_backbone_grads);
        ModelGrads { convs, soa, gem_p, whiten: whiten_grads }
    }

    /// Descriptor averaged over a scale pyramid and re-normalized.
    pub fn multi_scale_descriptor(&self, image: &Image, scales: &[f64]) -> Result<Descriptor> {
        if scales.is_empty() {
            return Err(Error::validation("scale list must be non-empty"));
        }
        if scales.len() == 1 && scales[0] == 1.0 {
            return self.descriptor(image);
        }
        let mut mean: Option<Array1<f64>> = None;
        for &scale in scales {
            let resized = image.resize(scale)?;
            if resized.height() < self.spec.min_input_dim
                || resized.width() < self.spec.min_input_dim
            {
                return Err(Error::validation(format!(
                    "scale {scale} produces a {}x{} image, below the {} px minimum",
                    resized.height(),
                    resized.width(),
                    self.spec.min_input_dim
                )));
            }
            let desc = self.descriptor(&resized)?;
            mean = Some(match mean {
                None => desc.values().clone(),
                Some(acc) => acc + desc.values(),
            });
        }
        let mean = mean.expect("non-empty scales") / scales.len() as f64;
        l2_normalize(&mean)
    }

    /// Attention matrix of the block at `insertion` for the given image.
    pub fn attention_at(&self, image: &Image, insertion: usize) -> Result<AttentionMap> {
        if !self.soa.contains_key(&insertion) {
            return Err(Error::validation(format!(
                "model has no attention block at insertion {insertion}"
            )));
        }
        let (_, cache) = backbone_forward(image, self)?;
        for stage in &cache.stages {
            if let Some((ins, _, soa_cache)) = &stage.soa {
                if *ins == insertion {
                    return AttentionMap::new(soa_cache.attention().clone());
                }
            }
        }
        unreachable!("insertion verified above")
    }

    /// Spatial size of the feature map at an insertion point for a given
    /// input size.
    pub fn map_dims_at(&self, insertion: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        let stage = self.spec.stage_of_insertion(insertion)?;
        let (mut mh, mut mw) = (h, w);
        for conv in self.convs.iter().take(stage + 1) {
            let dims = conv.output_dims(mh, mw)?;
            mh = dims.0;
            mw = dims.1;
        }
        Ok((mh, mw))
    }
}

/// Parameter gradients mirroring [`DescriptorModel`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    /// Per conv layer, present when backbone gradients were requested.
    pub convs: Vec<Option<(Array2<f64>, Array1<f64>)>>,
    pub soa: BTreeMap<usize, SoaWeightGrads>,
    pub gem_p: f64,
    pub whiten: Option<(Array2<f64>, Array1<f64>)>,
}

impl ModelGrads {
    /// Accumulate another gradient set (same structure) into this one.
    pub fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.convs.iter_mut().zip(other.convs.iter()) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                *aw += bw;
                *ab += bb;
            }
        }
        for (k, g) in &other.soa {
            let mine = self.soa.get_mut(k).expect("same attention layout");
            mine.d_wq += &g.d_wq;
            mine.d_wk += &g.d_wk;
            mine.d_wv += &g.d_wv;
            mine.d_w_out += &g.d_w_out;
        }
        self.gem_p += other.gem_p;
        if let (Some((aw, ab)), Some((bw, bb))) = (self.whiten.as_mut(), other.whiten.as_ref()) {
            *aw += bw;
            *ab += bb;
        }
    }
}

/// Weight gradients of one attention block.
#[derive(Debug, Clone)]
pub struct SoaWeightGrads {
    pub d_wq: Array2<f64>,
    pub d_wk: Array2<f64>,
    pub d_wv: Array2<f64>,
    pub d_w_out: Array2<f64>,
}

/// Everything retained by a cached pipeline forward pass.
#[derive(Debug, Clone)]
pub struct PipelineCache {
    backbone: BackboneCache,
    head: HeadCache,
}

impl PipelineCache {
    /// Output dims `(h, w, c)` after each backbone stage.
    pub fn stage_dims(&self) -> Vec<(usize, usize, usize)> {
        self.backbone
            .stages
            .iter()
            .map(|s| s.stage_output.dim())
            .collect()
    }

    /// Post-stage activations, for activation-diff inspection in tests.
    pub fn stage_output(&self, stage: usize) -> &Array3<f64> {
        &self.backbone.stages[stage].stage_output
    }
}

#[derive(Debug, Clone)]
enum HeadCache {
    Gem { feature: FeatureMap, pooled: Array1<f64>, whitened: Array1<f64> },
    Patch { flat: Array1<f64> },
}

#[derive(Debug, Clone)]
struct BackboneCache {
    input_norm: Option<InstNormCache>,
    stages: Vec<StageCache>,
}

#[derive(Debug, Clone)]
struct StageCache {
    plan: StagePlan,
    conv_input: Array3<f64>,
    /// post-conv, post-normalization: the ReLU mask source
    pre_activation: Array3<f64>,
    instnorm: Option<InstNormCache>,
    soa: Option<(usize, FeatureMap, SoaCache)>,
    /// final activation leaving the stage (after ReLU and attention)
    stage_output: Array3<f64>,
}

fn validate_input(image: &Image, model: &DescriptorModel) -> Result<()> {
    let spec = &model.spec;
    if image.channels() != spec.in_channels {
        return Err(Error::validation(format!(
            "backbone expects {} input channels, got {}",
            spec.in_channels,
            image.channels()
        )));
    }
    match spec.kind {
        BackboneKind::ToyFcn => {
            if image.height() < spec.min_input_dim || image.width() < spec.min_input_dim {
                return Err(Error::validation(format!(
                    "image {}x{} is below the {} px minimum",
                    image.height(),
                    image.width(),
                    spec.min_input_dim
                )));
            }
        }
        BackboneKind::L2Net => {
            if image.height() != 32 || image.width() != 32 {
                return Err(Error::validation(format!(
                    "patch backbone requires an exact 32x32 input, got {}x{}",
                    image.height(),
                    image.width()
                )));
            }
        }
    }
    Ok(())
}

fn backbone_forward(image: &Image, model: &DescriptorModel) -> Result<(FeatureMap, BackboneCache)> {
    validate_input(image, model)?;
    let mut x = image.pixels().clone();
    let input_norm = match model.spec.kind {
        BackboneKind::L2Net => {
            let (normed, cache) = instance_standardize(&x);
            x = normed;
            Some(cache)
        }
        BackboneKind::ToyFcn => None,
    };

    let mut stages = Vec::new();
    for (conv, plan) in model.convs.iter().zip(model.spec.stage_plans()) {
        let conv_input = x;
        let mut y = conv.forward(&conv_input)?;
        let instnorm = if plan.instnorm {
            let (normed, cache) = instance_standardize(&y);
            y = normed;
            Some(cache)
        } else {
            None
        };
        let pre_activation = y.clone();
        if plan.relu {
            y = relu(&y);
        }
        let soa = if let Some(insertion) = plan.insertion {
            let params = model
                .soa
                .get(&insertion)
                .ok_or_else(|| {
                    Error::validation(format!("missing attention parameters at {insertion}"))
                })?;
            let input_map = FeatureMap::new(y)?;
            let (out_map, cache) = soa_forward_cached(&input_map, params)?;
            y = out_map.data().clone();
            Some((insertion, input_map, cache))
        } else {
            None
        };
        stages.push(StageCache {
            plan,
            conv_input,
            pre_activation,
            instnorm,
            soa,
            stage_output: y.clone(),
        });
        x = y;
    }
    Ok((FeatureMap::new(x)?, BackboneCache { input_norm, stages }))
}

fn backbone_backward(
    model: &DescriptorModel,
    cache: &BackboneCache,
    mut grad: Array3<f64>,
    want_backbone_grads: bool,
) -> (Vec<Option<(Array2<f64>, Array1<f64>)>>, BTreeMap<usize, SoaWeightGrads>) {
    let mut conv_grads: Vec<Option<(Array2<f64>, Array1<f64>)>> =
        vec![None; model.convs.len()];
    let mut soa_grads = BTreeMap::new();

    for (idx, stage) in cache.stages.iter().enumerate().rev() {
        if let Some((insertion, input_map, soa_cache)) = &stage.soa {
            let params = &model.soa[insertion];
            let grads = soa_backward(input_map, params, soa_cache, &grad);
            grad = grads.d_input;
            soa_grads.insert(
                *insertion,
                SoaWeightGrads {
                    d_wq: grads.d_wq,
                    d_wk: grads.d_wk,
                    d_wv: grads.d_wv,
                    d_w_out: grads.d_w_out,
                },
            );
        }
        if stage.plan.relu {
            grad = relu_backward(&stage.pre_activation, &grad);
        }
        if let Some(norm_cache) = &stage.instnorm {
            grad = instance_standardize_backward(norm_cache, &grad);
        }
        let (d_input, wgrads) =
            model.convs[idx].backward(&stage.conv_input, &grad, want_backbone_grads);
        conv_grads[idx] = wgrads;
        grad = d_input;
    }
    if let Some(norm_cache) = &cache.input_norm {
        let _ = instance_standardize_backward(norm_cache, &grad);
    }
    (conv_grads, soa_grads)
}

/// Run the image backbone alone, returning the final feature map.
pub fn toy_fcn_forward(image: &Image, model: &DescriptorModel) -> Result<FeatureMap> {
    if model.spec.kind != BackboneKind::ToyFcn {
        return Err(Error::validation("model does not use the image backbone"));
    }
    Ok(backbone_forward(image, model)?.0)
}

/// Run the patch backbone on a 32x32 grayscale patch, returning the
/// 128-dimensional unit descriptor.
pub fn l2net_forward(patch: &Image, model: &DescriptorModel) -> Result<Descriptor> {
    if model.spec.kind != BackboneKind::L2Net {
        return Err(Error::validation("model does not use the patch backbone"));
    }
    model.descriptor(patch)
}

/// The full image path: backbone (with attention) -> clip -> GeM ->
/// whitening -> l2 normalization.
pub fn global_descriptor(image: &Image, model: &DescriptorModel) -> Result<Descriptor> {
    if model.spec.kind != BackboneKind::ToyFcn {
        return Err(Error::validation(
            "global descriptor head requires the image backbone; use l2net_forward for patches",
        ));
    }
    model.descriptor(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn test_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((h, w, c), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    fn toy_model(insertions: &[usize], seed: u64) -> DescriptorModel {
        let spec = BackboneSpec::toy_fcn(1, insertions).unwrap();
        DescriptorModel::init(spec, seed).unwrap()
    }

    #[test]
    fn toy_fcn_maps_64_to_8x8x64() {
        let model = toy_model(&[], 1);
        let image = test_image(2, 64, 64, 1);
        let feat = toy_fcn_forward(&image, &model).unwrap();
        assert_eq!(feat.data().dim(), (8, 8, 64));
    }

    #[test]
    fn toy_fcn_rounds_odd_sizes_up() {
        let model = toy_model(&[], 1);
        let image = test_image(3, 33, 47, 1);
        let feat = toy_fcn_forward(&image, &model).unwrap();
        // ceil(33/8) = 5, ceil(47/8) = 6
        assert_eq!(feat.data().dim(), (5, 6, 64));
    }

    #[test]
    fn toy_fcn_rejects_undersized_images() {
        let model = toy_model(&[], 1);
        let image = test_image(4, 31, 64, 1);
        assert!(toy_fcn_forward(&image, &model).is_err());
    }

    fn feat_of(model: &DescriptorModel, image: &Image) -> Array3<f64> {
        toy_fcn_forward(image, model).unwrap().data().clone()
    }

    #[test]
    fn fresh_soa_blocks_leave_feature_map_bitwise_unchanged() {
        let image = test_image(5, 64, 64, 1);
        let plain = feat_of(&toy_model(&[], 9), &image);
        for insertions in [vec![4], vec![5], vec![4, 5]] {
            let with = feat_of(&toy_model(&insertions, 9), &image);
            assert_eq!(plain, with, "insertions {insertions:?}");
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let model = toy_model(&[4, 5], 11);
        let image = test_image(6, 48, 40, 1);
        let a = toy_fcn_forward(&image, &model).unwrap();
        let b = toy_fcn_forward(&image, &model).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn insertion_configuration_grid_is_expressible() {
        for ins in [vec![], vec![4], vec![5], vec![4, 5]] {
            assert!(BackboneSpec::toy_fcn(3, &ins).is_ok(), "{ins:?}");
        }
        for ins in [
            vec![3],
            vec![4],
            vec![5],
            vec![6],
            vec![3, 4],
            vec![3, 5],
            vec![4, 5],
            vec![4, 6],
            vec![3, 4, 5],
            vec![4, 5, 6],
        ] {
            assert!(BackboneSpec::l2net(&ins).is_ok(), "{ins:?}");
        }
        assert!(BackboneSpec::toy_fcn(1, &[3]).is_err());
        assert!(BackboneSpec::l2net(&[7]).is_err());
    }

    #[test]
    fn l2net_shapes_follow_the_architecture_table() {
        let spec = BackboneSpec::l2net(&[3, 4, 5, 6]).unwrap();
        let model = DescriptorModel::init(spec, 21).unwrap();
        let patch = test_image(7, 32, 32, 1);
        let (desc, cache) = model.descriptor_cached(&patch).unwrap();
        assert_eq!(desc.dim(), 128);
        let dims = cache.stage_dims();
        assert_eq!(
            dims,
            vec![
                (32, 32, 32),
                (32, 32, 32),
                (16, 16, 64),
                (16, 16, 64),
                (8, 8, 128),
                (8, 8, 128),
                (1, 1, 128),
            ]
        );
    }

    #[test]
    fn l2net_rejects_wrong_patch_sizes() {
        let model = DescriptorModel::init(BackboneSpec::l2net(&[]).unwrap(), 3).unwrap();
        assert!(l2net_forward(&test_image(8, 31, 32, 1), &model).is_err());
        assert!(l2net_forward(&test_image(8, 64, 64, 1), &model).is_err());
    }

    #[test]
    fn l2net_soa6_alters_only_post_layer6_activations() {
        let patch = test_image(9, 32, 32, 1);
        let plain = DescriptorModel::init(BackboneSpec::l2net(&[]).unwrap(), 33).unwrap();
        let mut with = DescriptorModel::init(BackboneSpec::l2net(&[6]).unwrap(), 33).unwrap();
        // activate the block
        let d = 128;
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        with.soa.get_mut(&6).unwrap().w_out =
            Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.05..0.05));

        let (_, cache_plain) = plain.descriptor_cached(&patch).unwrap();
        let (_, cache_with) = with.descriptor_cached(&patch).unwrap();
        // layers 1..5 (indices 0..4) identical; layer 6 (index 5) output and
        // layer 7 differ because the active block re-weights the map.
        for i in 0..5 {
            assert_eq!(cache_plain.stage_output(i), cache_with.stage_output(i), "stage {i}");
        }
        assert_ne!(cache_plain.stage_output(5), cache_with.stage_output(5));
        assert_ne!(cache_plain.stage_output(6), cache_with.stage_output(6));
    }

    #[test]
    fn global_descriptor_is_unit_norm() {
        let model = toy_model(&[4, 5], 13);
        let image = test_image(10, 64, 64, 1);
        let d = global_descriptor(&image, &model).unwrap();
        assert!((d.values().dot(d.values()).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn global_descriptor_rejects_patch_models() {
        let model = DescriptorModel::init(BackboneSpec::l2net(&[]).unwrap(), 3).unwrap();
        let image = test_image(10, 32, 32, 1);
        assert!(global_descriptor(&image, &model).is_err());
        assert!(l2net_forward(&image, &model).is_ok());
    }

    #[test]
    fn fresh_soa_leaves_descriptor_bitwise_unchanged() {
        let image = test_image(11, 64, 64, 1);
        let plain = toy_model(&[], 17);
        let with = toy_model(&[4, 5], 17);
        let a = global_descriptor(&image, &plain).unwrap();
        let b = global_descriptor(&image, &with).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn distinct_constant_images_get_distinct_descriptors() {
        let model = toy_model(&[], 19);
        let a = Image::new(Array3::from_elem((64, 64, 1), 0.25)).unwrap();
        let b = Image::new(Array3::from_elem((64, 64, 1), 0.75)).unwrap();
        let da = global_descriptor(&a, &model).unwrap();
        let db = global_descriptor(&b, &model).unwrap();
        assert!(da.squared_distance(&db) > 1e-12);
    }

    #[test]
    fn multi_scale_single_scale_is_exact() {
        let model = toy_model(&[4], 23);
        let image = test_image(12, 64, 64, 1);
        let single = model.descriptor(&image).unwrap();
        let multi = model.multi_scale_descriptor(&image, &[1.0]).unwrap();
        assert_eq!(single.values(), multi.values());
    }

    #[test]
    fn multi_scale_repeated_unit_scale_matches_single() {
        let model = toy_model(&[4], 23);
        let image = test_image(13, 64, 64, 1);
        let single = model.descriptor(&image).unwrap();
        let multi = model.multi_scale_descriptor(&image, &[1.0, 1.0, 1.0]).unwrap();
        for (a, b) in single.values().iter().zip(multi.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_scale_default_pyramid_returns_unit_norm() {
        let model = toy_model(&[4, 5], 29);
        let image = test_image(14, 64, 64, 1);
        let d = model.multi_scale_descriptor(&image, &default_scales()).unwrap();
        assert!((d.values().dot(d.values()).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn multi_scale_names_the_offending_scale() {
        let model = toy_model(&[], 31);
        let image = test_image(15, 64, 64, 1);
        let err = model
            .multi_scale_descriptor(&image, &[1.0, 0.25])
            .unwrap_err();
        assert!(err.to_string().contains("0.25"), "{err}");
    }

    #[test]
    fn attention_at_requires_a_block() {
        let model = toy_model(&[5], 37);
        let image = test_image(16, 64, 64, 1);
        assert!(model.attention_at(&image, 4).is_err());
        let z = model.attention_at(&image, 5).unwrap();
        assert_eq!(z.locations(), 64);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Reduced-width pipeline on a small input; checks every parameter
        // family through the full head.
        let spec = BackboneSpec::toy_fcn_with_widths(1, [8, 8, 8], &[4, 5], 8).unwrap();
        let mut model = DescriptorModel::init(spec, 41).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        // move attention and whitening off their identity starting points
        for params in model.soa.values_mut() {
            params.w_out = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-0.2..0.2));
        }
        model.whitening.weight =
            Array2::from_shape_fn((8, 8), |_| rng.gen_range(-0.5..0.5) + 0.3);
        let image = test_image(17, 8, 8, 1);
        let g = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));

        let loss = |m: &DescriptorModel| m.descriptor(&image).unwrap().values().dot(&g);
        let (_, cache) = model.descriptor_cached(&image).unwrap();
        let grads = model.descriptor_backward(&cache, &g, true);

        let step = 1e-4;
        let tol = 1e-3;
        // conv weights: one entry per layer
        for (li, conv_grad) in grads.convs.iter().enumerate() {
            let (d_w, d_b) = conv_grad.as_ref().unwrap();
            let (i, j) = (1usize.min(d_w.dim().0 - 1), 2usize.min(d_w.dim().1 - 1));
            let mut plus = model.clone();
            plus.convs[li].weight[[i, j]] += step;
            let mut minus = model.clone();
            minus.convs[li].weight[[i, j]] -= step;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
            assert!(
                crate::numcheck::rel_err(d_w[[i, j]], num) < tol,
                "conv {li} weight: {} vs {num}",
                d_w[[i, j]]
            );
            let mut plus = model.clone();
            plus.convs[li].bias[0] += step;
            let mut minus = model.clone();
            minus.convs[li].bias[0] -= step;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
            assert!(crate::numcheck::rel_err(d_b[0], num) < tol, "conv {li} bias");
        }
        // attention weights
        for (&ins, g_soa) in &grads.soa {
            for (name, analytic) in [
                ("wq", g_soa.d_wq[[0, 1]]),
                ("wk", g_soa.d_wk[[1, 0]]),
                ("wv", g_soa.d_wv[[2, 2]]),
                ("w_out", g_soa.d_w_out[[3, 1]]),
            ] {
                let set = |m: &mut DescriptorModel, delta: f64| {
                    let p = m.soa.get_mut(&ins).unwrap();
                    match name {
                        "wq" => p.wq[[0, 1]] += delta,
                        "wk" => p.wk[[1, 0]] += delta,
                        "wv" => p.wv[[2, 2]] += delta,
                        _ => p.w_out[[3, 1]] += delta,
                    }
                };
                let mut plus = model.clone();
                set(&mut plus, step);
                let mut minus = model.clone();
                set(&mut minus, -step);
                let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
                assert!(
                    crate::numcheck::rel_err(analytic, num) < tol,
                    "soa {ins} {name}: {analytic} vs {num}"
                );
            }
        }
        // gem exponent
        {
            let mut plus = model.clone();
            plus.gem = GemParam::new(model.gem.value() + step).unwrap();
            let mut minus = model.clone();
            minus.gem = GemParam::new(model.gem.value() - step).unwrap();
            let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
            assert!(
                crate::numcheck::rel_err(grads.gem_p, num) < tol,
                "gem p: {} vs {num}",
                grads.gem_p
            );
        }
        // whitening
        {
            let (d_w, d_b) = grads.whiten.as_ref().unwrap();
            let mut plus = model.clone();
            plus.whitening.weight[[2, 3]] += step;
            let mut minus = model.clone();
            minus.whitening.weight[[2, 3]] -= step;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
            assert!(crate::numcheck::rel_err(d_w[[2, 3]], num) < tol, "whiten weight");
            let mut plus = model.clone();
            plus.whitening.bias[1] += step;
            let mut minus = model.clone();
            minus.whitening.bias[1] -= step;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
            assert!(crate::numcheck::rel_err(d_b[1], num) < tol, "whiten bias");
        }
    }

    #[test]
    fn patch_pipeline_gradients_flow_through_l2_head() {
        let spec = BackboneSpec::l2net(&[6]).unwrap();
        let mut model = DescriptorModel::init(spec, 43).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        model.soa.get_mut(&6).unwrap().w_out =
            Array2::from_shape_fn((128, 128), |_| rng.gen_range(-0.02..0.02));
        let patch = test_image(18, 32, 32, 1);
        let g = Array1::from_shape_fn(128, |_| rng.gen_range(-1.0..1.0));

        let loss = |m: &DescriptorModel| m.descriptor(&patch).unwrap().values().dot(&g);
        let (_, cache) = model.descriptor_cached(&patch).unwrap();
        let grads = model.descriptor_backward(&cache, &g, true);

        let step = 1e-4;
        // spot-check one conv weight and one attention weight
        let (d_w, _) = grads.convs[6].as_ref().unwrap();
        let mut plus = model.clone();
        plus.convs[6].weight[[10, 20]] += step;
        let mut minus = model.clone();
        minus.convs[6].weight[[10, 20]] -= step;
        let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
        assert!(crate::numcheck::rel_err(d_w[[10, 20]], num) < 1e-3);

        let d_wv = &grads.soa[&6].d_wv;
        let mut plus = model.clone();
        plus.soa.get_mut(&6).unwrap().wv[[5, 7]] += step;
        let mut minus = model.clone();
        minus.soa.get_mut(&6).unwrap().wv[[5, 7]] -= step;
        let num = (loss(&plus) - loss(&minus)) / (2.0 * step);
        assert!(crate::numcheck::rel_err(d_wv[[5, 7]], num) < 1e-3);
    }
}
