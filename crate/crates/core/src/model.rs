//! Encoder, horizontal partitioning, pooling and the per-part and
//! classification heads.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Ix1, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{rejected, Error, Result};
use crate::nn::{self, ConvCache, ConvGeometry, NormCache, NormParams};
use crate::state::{Grads, ModelState};

/// Shape of the convolutional encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channel count `C`; must equal the last entry of `block_widths`.
    pub channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output width of each conv block.
    pub block_widths: Vec<usize>,
    /// Stride of the last block; earlier blocks downsample by 2.
    pub final_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            input_height: 64,
            input_width: 32,
            block_widths: vec![32, 64, 128, 128],
            final_stride: 1,
        }
    }
}

impl EncoderConfig {
    pub fn strides(&self) -> Vec<usize> {
        let n = self.block_widths.len();
        (0..n).map(|i| if i + 1 == n { self.final_stride } else { 2 }).collect()
    }

    fn geometries(&self) -> Vec<ConvGeometry> {
        let mut out = Vec::with_capacity(self.block_widths.len());
        let (mut h, mut w, mut cin) = (self.input_height, self.input_width, 3);
        for (&cout, stride) in self.block_widths.iter().zip(self.strides()) {
            let g = ConvGeometry { in_channels: cin, out_channels: cout, stride, in_h: h, in_w: w };
            h = g.out_h();
            w = g.out_w();
            cin = cout;
            out.push(g);
        }
        out
    }

    /// Feature-map height `H`.
    pub fn map_height(&self) -> usize {
        self.geometries().last().map_or(self.input_height, ConvGeometry::out_h)
    }

    /// Feature-map width `W`.
    pub fn map_width(&self) -> usize {
        self.geometries().last().map_or(self.input_width, ConvGeometry::out_w)
    }

    /// Checks structural invariants, including that `H` splits into `parts` equal strips.
    pub fn validate(&self, parts: usize) -> Result<()> {
        if self.channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("channels and input size must be positive".into()));
        }
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::Config("block widths must be a non-empty list of positive integers".into()));
        }
        if *self.block_widths.last().unwrap() != self.channels {
            return Err(Error::Config(format!(
                "last block width {} must equal channels {}",
                self.block_widths.last().unwrap(),
                self.channels
            )));
        }
        if self.final_stride == 0 {
            return Err(Error::Config("final stride must be positive".into()));
        }
        let h = self.map_height();
        if parts == 0 || !h.is_multiple_of(parts) {
            return Err(Error::Config(format!("feature-map height {h} is not divisible by {parts} parts")));
        }
        Ok(())
    }
}

/// `C x H x W` activation map of a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(rejected("feature map contains non-finite entries"));
        }
        Ok(Self(data))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }
}

/// Length-`C` feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Array1<f64>);

impl EmbeddingVector {
    pub fn new(data: Array1<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(rejected("embedding contains non-finite entries"));
        }
        Ok(Self(data))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("owned 1-D array is contiguous")
    }
}

pub(crate) fn conv_name(block: usize) -> String {
    format!("encoder.block{block}.conv.weight")
}

pub(crate) fn norm_prefix(block: usize) -> String {
    format!("encoder.block{block}.bn")
}

fn insert_norm(state: &mut ModelState, prefix: &str, c: usize) {
    state.insert(format!("{prefix}.weight"), Array1::<f64>::ones(c));
    state.insert(format!("{prefix}.bias"), Array1::<f64>::zeros(c));
    state.insert(format!("{prefix}.running_mean"), Array1::<f64>::zeros(c));
    state.insert(format!("{prefix}.running_var"), Array1::<f64>::ones(c));
}

/// Fresh encoder parameters (He-normal convolutions, unit-scale normalization).
pub fn init_encoder<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> ModelState {
    let mut state = ModelState::new();
    for (i, g) in cfg.geometries().iter().enumerate() {
        let fan_in = (g.in_channels * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w = Array4::from_shape_simple_fn((g.out_channels, g.in_channels, 3, 3), || normal.sample(rng));
        state.insert(conv_name(i), w);
        insert_norm(&mut state, &norm_prefix(i), g.out_channels);
    }
    state
}

struct BlockCache {
    conv: ConvCache,
    norm: NormCache,
    out: Array4<f64>,
}

/// Saved activations of a training-mode encoder pass.
pub struct EncoderCache {
    blocks: Vec<BlockCache>,
}

fn check_input(cfg: &EncoderConfig, x: &ArrayView4<'_, f64>) -> Result<()> {
    let (_, c, h, w) = x.dim();
    if c != 3 || h != cfg.input_height || w != cfg.input_width {
        return Err(rejected(format!(
            "image batch has shape {:?}, expected (_, 3, {}, {})",
            x.shape(),
            cfg.input_height,
            cfg.input_width
        )));
    }
    Ok(())
}

fn norm_params<'a>(state: &'a ModelState, prefix: &str) -> Result<NormParams<'a>> {
    Ok(NormParams {
        weight: state.view::<Ix1>(&format!("{prefix}.weight"))?,
        bias: state.view::<Ix1>(&format!("{prefix}.bias"))?,
    })
}

/// Inference-mode encoder pass on a batch `(N, 3, H_in, W_in) -> (N, C, H, W)`.
pub fn encode_batch(cfg: &EncoderConfig, state: &ModelState, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    check_input(cfg, &x)?;
    let mut cur: Option<Array4<f64>> = None;
    for (i, g) in cfg.geometries().into_iter().enumerate() {
        let input = cur.as_ref().map_or(x.view(), |a| a.view());
        let w = state.view::<Ix4>(&conv_name(i))?;
        let (y, _) = nn::conv_forward(input, w, g, false);
        let prefix = norm_prefix(i);
        let p = norm_params(state, &prefix)?;
        let rm = state.view::<Ix1>(&format!("{prefix}.running_mean"))?;
        let rv = state.view::<Ix1>(&format!("{prefix}.running_var"))?;
        let mut y = nn::norm_forward_eval(y.view(), &p, rm, rv)
            .map_err(|ch| Error::State(format!("{prefix}: running variance of channel {ch} is not positive")))?;
        nn::relu_inplace(&mut y);
        cur = Some(y);
    }
    cur.ok_or_else(|| Error::Config("encoder has no blocks".into()))
}

/// Training-mode pass: batch statistics, running statistics updated in `state`.
pub fn encode_batch_train(
    cfg: &EncoderConfig,
    state: &mut ModelState,
    x: ArrayView4<'_, f64>,
) -> Result<(Array4<f64>, EncoderCache)> {
    check_input(cfg, &x)?;
    let mut blocks: Vec<BlockCache> = Vec::new();
    for (i, g) in cfg.geometries().into_iter().enumerate() {
        let input = blocks.last().map_or(x.view(), |b| b.out.view());
        let (y, conv) = nn::conv_forward(input, state.view::<Ix4>(&conv_name(i))?, g, true);
        let prefix = norm_prefix(i);
        let weight = state.get(&format!("{prefix}.weight"))?.clone().into_dimensionality::<Ix1>().expect("rank 1");
        let bias = state.get(&format!("{prefix}.bias"))?.clone().into_dimensionality::<Ix1>().expect("rank 1");
        let p = NormParams { weight: weight.view(), bias: bias.view() };
        let mut rm = state.get(&format!("{prefix}.running_mean"))?.clone().into_dimensionality::<Ix1>().expect("rank 1");
        let mut rv = state.get(&format!("{prefix}.running_var"))?.clone().into_dimensionality::<Ix1>().expect("rank 1");
        let (mut out, norm) = nn::norm_forward_train(y.view(), &p, rm.view_mut(), rv.view_mut());
        state.insert(format!("{prefix}.running_mean"), rm);
        state.insert(format!("{prefix}.running_var"), rv);
        nn::relu_inplace(&mut out);
        blocks.push(BlockCache { conv: conv.expect("cache requested"), norm, out });
    }
    let out = blocks
        .last()
        .map(|b| b.out.clone())
        .ok_or_else(|| Error::Config("encoder has no blocks".into()))?;
    Ok((out, EncoderCache { blocks }))
}

/// Backpropagates `dmap` through the encoder, accumulating into `grads`.
pub fn encode_backward(
    state: &ModelState,
    cache: EncoderCache,
    dmap: Array4<f64>,
    grads: &mut Grads,
) -> Result<()> {
    let mut dy = dmap;
    let n_blocks = cache.blocks.len();
    for (i, block) in cache.blocks.into_iter().enumerate().rev() {
        nn::relu_backward_inplace(&mut dy, block.out.view());
        let prefix = norm_prefix(i);
        let weight = state.view::<Ix1>(&format!("{prefix}.weight"))?;
        let (dconv, dw_norm, db_norm) = nn::norm_backward(dy.view(), weight, &block.norm);
        grads.accumulate_owned(&format!("{prefix}.weight"), dw_norm);
        grads.accumulate_owned(&format!("{prefix}.bias"), db_norm);
        let w = state.view::<Ix4>(&conv_name(i))?;
        let (dx, dw) = nn::conv_backward(dconv.view(), w, &block.conv, i > 0);
        grads.accumulate_owned(&conv_name(i), dw);
        if let Some(dx) = dx {
            dy = dx;
        }
        debug_assert!(i < n_blocks);
    }
    Ok(())
}

/// Single-image inference pass.
pub fn encode(cfg: &EncoderConfig, state: &ModelState, image: ArrayView3<'_, f64>) -> Result<FeatureMap> {
    let x = image.insert_axis(Axis(0));
    let out = encode_batch(cfg, state, x)?;
    FeatureMap::new(out.index_axis_move(Axis(0), 0))
}

/// Splits the map into `parts` equal horizontal strips, top to bottom.
pub fn partition(map: &FeatureMap, parts: usize) -> Result<Vec<FeatureMap>> {
    let h = map.height();
    if parts == 0 || !h.is_multiple_of(parts) {
        return Err(Error::Config(format!("feature-map height {h} is not divisible by {parts}")));
    }
    let strip = h / parts;
    Ok((0..parts)
        .map(|j| FeatureMap(map.0.slice(s![.., j * strip..(j + 1) * strip, ..]).to_owned()))
        .collect())
}

/// Inverse of [`partition`]: stacks strips along the height axis.
pub fn concat_height(parts: &[FeatureMap]) -> Result<FeatureMap> {
    let views: Vec<_> = parts.iter().map(FeatureMap::view).collect();
    concatenate(Axis(1), &views)
        .map(FeatureMap)
        .map_err(|e| rejected(format!("cannot concatenate parts: {e}")))
}

/// Global average pooling of one map.
pub fn gap(map: &FeatureMap) -> EmbeddingVector {
    let area = (map.height() * map.width()) as f64;
    EmbeddingVector(map.0.sum_axis(Axis(2)).sum_axis(Axis(1)) / area)
}

/// Linear layer followed by per-channel normalization, one per part.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm_weight: Array1<f64>,
    pub norm_bias: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

pub struct ExpertCache {
    input: Array2<f64>,
    norm: NormCache,
}

impl ExpertHead {
    /// Fan-in scaled uniform weights, zero bias, unit normalization.
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        Self {
            weight: Array2::from_shape_simple_fn((channels, channels), || dist.sample(rng)),
            bias: Array1::zeros(channels),
            norm_weight: Array1::ones(channels),
            norm_bias: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            weight: Array2::eye(channels),
            bias: Array1::zeros(channels),
            norm_weight: Array1::ones(channels),
            norm_bias: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn prefix(part: usize) -> String {
        format!("expert{part}")
    }

    pub fn from_state(state: &ModelState, prefix: &str) -> Result<Self> {
        let get1 = |n: &str| state.view::<Ix1>(&format!("{prefix}.{n}")).map(|v| v.to_owned());
        Ok(Self {
            weight: state.view::<ndarray::Ix2>(&format!("{prefix}.fc.weight"))?.to_owned(),
            bias: get1("fc.bias")?,
            norm_weight: get1("bn.weight")?,
            norm_bias: get1("bn.bias")?,
            running_mean: get1("bn.running_mean")?,
            running_var: get1("bn.running_var")?,
        })
    }

    pub fn write_to(&self, state: &mut ModelState, prefix: &str) {
        state.insert(format!("{prefix}.fc.weight"), self.weight.clone());
        state.insert(format!("{prefix}.fc.bias"), self.bias.clone());
        state.insert(format!("{prefix}.bn.weight"), self.norm_weight.clone());
        state.insert(format!("{prefix}.bn.bias"), self.norm_bias.clone());
        state.insert(format!("{prefix}.bn.running_mean"), self.running_mean.clone());
        state.insert(format!("{prefix}.bn.running_var"), self.running_var.clone());
    }

    fn check(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.channels() {
            return Err(rejected(format!("expert expects {} channels, got {}", self.channels(), x.ncols())));
        }
        Ok(())
    }

    fn affine(&self, x: ArrayView2<'_, f64>) -> Array4<f64> {
        let y = x.dot(&self.weight.t()) + &self.bias;
        let (n, c) = y.dim();
        y.into_shape_with_order((n, c, 1, 1)).expect("contiguous")
    }

    /// Inference mode: normalization with running statistics.
    pub fn forward_eval(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        let y = self.affine(x);
        let p = NormParams { weight: self.norm_weight.view(), bias: self.norm_bias.view() };
        let z = nn::norm_forward_eval(y.view(), &p, self.running_mean.view(), self.running_var.view())
            .map_err(|ch| Error::State(format!("expert running variance of channel {ch} is not positive")))?;
        let n = x.nrows();
        Ok(z.into_shape_with_order((n, self.channels())).expect("contiguous"))
    }

    /// Training mode: batch statistics; updates running statistics.
    pub fn forward_train(&mut self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ExpertCache)> {
        self.check(&x)?;
        if x.nrows() < 2 {
            return Err(rejected("training-mode normalization needs at least two samples"));
        }
        let y = self.affine(x);
        let p = NormParams { weight: self.norm_weight.view(), bias: self.norm_bias.view() };
        let (z, norm) = nn::norm_forward_train(y.view(), &p, self.running_mean.view_mut(), self.running_var.view_mut());
        let n = x.nrows();
        let z = z.into_shape_with_order((n, self.channels())).expect("contiguous");
        Ok((z, ExpertCache { input: x.to_owned(), norm }))
    }

    /// Returns `dx`; parameter gradients are written under `prefix`.
    pub fn backward(&self, cache: &ExpertCache, dz: ArrayView2<'_, f64>, prefix: &str, grads: &mut Grads) -> Array2<f64> {
        let (n, c) = dz.dim();
        let dz4 = dz.to_owned().into_shape_with_order((n, c, 1, 1)).expect("contiguous");
        let (dy, dnw, dnb) = nn::norm_backward(dz4.view(), self.norm_weight.view(), &cache.norm);
        let dy = dy.into_shape_with_order((n, c)).expect("contiguous");
        grads.accumulate_owned(&format!("{prefix}.bn.weight"), dnw);
        grads.accumulate_owned(&format!("{prefix}.bn.bias"), dnb);
        grads.accumulate_owned(&format!("{prefix}.fc.weight"), dy.t().dot(&cache.input));
        grads.accumulate_owned(&format!("{prefix}.fc.bias"), dy.sum_axis(Axis(0)));
        dy.dot(&self.weight)
    }
}

/// Single-vector expert pass. Training mode needs a batch, so it is only
/// available through [`ExpertHead::forward_train`].
pub fn expert_forward(v: &EmbeddingVector, head: &ExpertHead) -> Result<EmbeddingVector> {
    let x = v.0.view().insert_axis(Axis(0));
    let out = head.forward_eval(x)?;
    Ok(EmbeddingVector(out.index_axis_move(Axis(0), 0)))
}

/// Fully-connected identity classifier `logits = W v + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub const PREFIX: &'static str = "classifier";

    pub fn new<R: Rng + ?Sized>(classes: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        let normal = Normal::new(0.0, 1e-3).expect("valid std");
        Ok(Self {
            weight: Array2::from_shape_simple_fn((classes, channels), || normal.sample(rng)),
            bias: Array1::zeros(classes),
        })
    }

    /// Row `k` is the centred direction of cluster `k`'s mean feature, scaled so
    /// that a feature of average norm produces logits of magnitude about `scale`.
    /// Starting from the cluster geometry avoids a burst of large gradients into
    /// the encoder each time the label set changes.
    pub fn from_centroids(features: ArrayView2<'_, f64>, labels: &[usize], classes: usize, scale: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        if labels.len() != features.nrows() || labels.iter().any(|&l| l >= classes) {
            return Err(rejected(format!("{} labels in 0..{classes} for {} features", labels.len(), features.nrows())));
        }
        let mut weight = Array2::<f64>::zeros((classes, features.ncols()));
        let mut norm_sum = 0.0;
        for (row, &l) in features.rows().into_iter().zip(labels) {
            norm_sum += row.dot(&row).sqrt();
            let mut dst = weight.row_mut(l);
            dst += &row;
        }
        for mut row in weight.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        let mean = weight.mean_axis(Axis(0)).expect("at least two classes");
        weight -= &mean;
        let mean_norm = norm_sum / features.nrows().max(1) as f64;
        if mean_norm > 0.0 {
            weight *= scale / mean_norm;
        }
        Ok(Self { weight, bias: Array1::zeros(classes) })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn from_state(state: &ModelState) -> Result<Self> {
        Ok(Self {
            weight: state.view::<ndarray::Ix2>("classifier.weight")?.to_owned(),
            bias: state.view::<Ix1>("classifier.bias")?.to_owned(),
        })
    }

    pub fn write_to(&self, state: &mut ModelState) {
        state.insert("classifier.weight", self.weight.clone());
        state.insert("classifier.bias", self.bias.clone());
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weight.ncols() {
            return Err(rejected(format!("classifier expects {} channels, got {}", self.weight.ncols(), x.ncols())));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Returns `dx` and writes parameter gradients.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dlogits: ArrayView2<'_, f64>, grads: &mut Grads) -> Array2<f64> {
        grads.accumulate_owned("classifier.weight", dlogits.t().dot(&x));
        grads.accumulate_owned("classifier.bias", dlogits.sum_axis(Axis(0)));
        dlogits.dot(&self.weight)
    }
}

pub fn classify(v: &EmbeddingVector, head: &ClassifierHead) -> Result<Array1<f64>> {
    let out = head.forward(v.0.view().insert_axis(Axis(0)))?;
    Ok(out.index_axis_move(Axis(0), 0))
}

/// Student network parameters: encoder, one expert per part, optional classifier.
pub fn init_student<R: Rng + ?Sized>(cfg: &EncoderConfig, parts: usize, classes: usize, rng: &mut R) -> Result<ModelState> {
    let mut state = init_encoder(cfg, rng);
    for j in 1..=parts {
        ExpertHead::new(cfg.channels, rng).write_to(&mut state, &ExpertHead::prefix(j));
    }
    ClassifierHead::new(classes, cfg.channels, rng)?.write_to(&mut state);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centroid_classifier_scores_own_cluster_highest() {
        let x = ndarray::array![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.0]];
        let labels = [0, 0, 1, 2];
        let head = ClassifierHead::from_centroids(x.view(), &labels, 3, 10.0).unwrap();
        let logits = head.forward(x.view()).unwrap();
        for (row, &l) in logits.rows().into_iter().zip(&labels) {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            assert_eq!(best, l);
        }
        // Mean feature norm is 2.5; a unit-length centred direction scaled by 10 / 2.5.
        let expected = 10.0 / 2.5 * (2.0f64 / 3.0).sqrt();
        assert!((head.weight.row(0).dot(&head.weight.row(0)).sqrt() - expected).abs() < 1e-12);
        assert!(head.bias.iter().all(|&b| b == 0.0));
        assert!(ClassifierHead::from_centroids(x.view(), &[0, 0, 1, 3], 3, 10.0).is_err());
        assert!(ClassifierHead::from_centroids(x.view(), &[0, 1], 3, 10.0).is_err());
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { channels: 8, input_height: 16, input_width: 8, block_widths: vec![4, 8], final_stride: 1 }
    }

    #[test]
    fn default_config_gives_8x4_map() {
        let cfg = EncoderConfig::default();
        assert_eq!((cfg.map_height(), cfg.map_width()), (8, 4));
        cfg.validate(2).unwrap();
    }

    #[test]
    fn default_encoder_output_shape() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = init_encoder(&cfg, &mut rng);
        let img = Array3::from_elem((3, 64, 32), 0.5);
        let map = encode(&cfg, &state, img.view()).unwrap();
        assert_eq!(map.0.dim(), (128, 8, 4));
    }

    #[test]
    fn zero_image_gives_zero_map() {
        let cfg = small_cfg();
        let state = init_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let map = encode(&cfg, &state, Array3::zeros((3, 16, 8)).view()).unwrap();
        assert!(map.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_cfg();
        let state = init_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let img = Array3::from_shape_fn((3, 16, 8), |(c, h, w)| ((c * 31 + h * 7 + w) % 11) as f64 / 11.0);
        let a = encode(&cfg, &state, img.view()).unwrap();
        let b = encode(&cfg, &state, img.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let cfg = small_cfg();
        let state = init_encoder(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let err = encode(&cfg, &state, Array3::zeros((3, 15, 8)).view()).unwrap_err();
        assert!(matches!(err, Error::RejectedInput(_)));
    }

    #[test]
    fn odd_height_is_a_config_error() {
        let cfg = EncoderConfig { input_height: 10, ..small_cfg() };
        assert_eq!(cfg.map_height(), 5);
        assert!(matches!(cfg.validate(2), Err(Error::Config(_))));
    }

    #[test]
    fn partition_shapes_and_order() {
        let map = FeatureMap(Array3::from_shape_fn((128, 8, 4), |(c, h, w)| (c * 100 + h * 10 + w) as f64));
        let parts = partition(&map, 2).unwrap();
        assert_eq!(parts[0].0.dim(), (128, 4, 4));
        assert_eq!(parts[0].0[[5, 3, 2]], map.0[[5, 3, 2]]);
        assert_eq!(parts[1].0[[5, 0, 2]], map.0[[5, 4, 2]]);
        let big = FeatureMap(Array3::zeros((2048, 16, 8)));
        let halves = partition(&big, 2).unwrap();
        assert!(halves.iter().all(|p| p.0.dim() == (2048, 8, 8)));
        assert_eq!(partition(&map, 1).unwrap()[0], map);
        assert!(matches!(partition(&map, 3), Err(Error::Config(_))));
    }

    #[test]
    fn gap_cases() {
        let m = FeatureMap(Array3::from_elem((3, 4, 2), 1.25));
        assert!(gap(&m).0.iter().all(|&v| v == 1.25));
        let m = FeatureMap(Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 5.0]).unwrap());
        assert_eq!(gap(&m).0[0], 2.75);
        let m = FeatureMap(Array3::from_shape_vec((3, 1, 1), vec![1.0, -2.0, 4.0]).unwrap());
        assert_eq!(gap(&m).0.to_vec(), vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn expert_identity_inference_is_identity() {
        let head = ExpertHead::identity(4);
        let v = EmbeddingVector(Array1::from_vec(vec![0.5, -1.0, 2.0, 3.5]));
        let out = expert_forward(&v, &head).unwrap();
        for (a, b) in out.0.iter().zip(v.0.iter()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
        let zero = EmbeddingVector(Array1::zeros(4));
        assert!(expert_forward(&zero, &head).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expert_rejects_bad_variance() {
        let mut head = ExpertHead::identity(2);
        head.running_var[0] = 0.0;
        let v = EmbeddingVector(Array1::ones(2));
        assert!(matches!(expert_forward(&v, &head), Err(Error::State(_))));
    }

    #[test]
    fn expert_training_mean_matches_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = ExpertHead::new(6, &mut rng);
        head.norm_bias = Array1::from_vec(vec![0.3, -0.2, 0.0, 1.0, 2.0, -1.5]);
        let x = Array2::from_shape_simple_fn((10, 6), || rng.random_range(-2.0..2.0));
        let (z, _) = head.forward_train(x.view()).unwrap();
        for c in 0..6 {
            let col = z.column(c);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!((mean - head.norm_bias[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn classify_examples() {
        let head = ClassifierHead { weight: Array2::eye(2), bias: Array1::zeros(2) };
        let logits = classify(&EmbeddingVector(Array1::from_vec(vec![3.0, -1.0])), &head).unwrap();
        assert_eq!(logits.to_vec(), vec![3.0, -1.0]);
        let zero = classify(&EmbeddingVector(Array1::zeros(2)), &head).unwrap();
        assert_eq!(zero.to_vec(), vec![0.0, 0.0]);
        assert!(ClassifierHead::new(1, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
