//! Global-to-local fusion: a channel gate learned from a student part
//! feature and applied to the teacher's global feature map.
//!
//! For a part feature `F` the gate is
//! `Z = (W2 relu(W1 F + b1) + b2) * F` (element-wise residual product) and the
//! fused map is `sigmoid(Z[c]) * Phi[c, h, w]`. Pooling the fused map gives
//! the vector used for clustering.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Ix1, Ix2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{rejected, Error, Result};
use crate::model::{gap, EmbeddingVector, FeatureMap};
use crate::nn::sigmoid;
use crate::state::{Grads, ModelState};

/// MLP weights of one part's fusion gate.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `(C/r) x C`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `C x (C/r)`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Pre-sigmoid gate `Z`, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVector(pub Array1<f64>);

impl FusionParams {
    /// Fan-in scaled uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let d1 = Uniform::new_inclusive(-b1, b1).expect("valid bounds");
        let d2 = Uniform::new_inclusive(-b2, b2).expect("valid bounds");
        Ok(Self {
            w1: Array2::from_shape_simple_fn((hidden, channels), || d1.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_simple_fn((channels, hidden), || d2.sample(rng)),
            b2: Array1::zeros(channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn reduction(&self) -> usize {
        self.channels() / self.hidden()
    }

    pub fn prefix(part: usize) -> String {
        format!("fusion{part}")
    }

    pub fn from_state(state: &ModelState, part: usize) -> Result<Self> {
        let p = Self::prefix(part);
        Ok(Self {
            w1: state.view::<Ix2>(&format!("{p}.w1"))?.to_owned(),
            b1: state.view::<Ix1>(&format!("{p}.b1"))?.to_owned(),
            w2: state.view::<Ix2>(&format!("{p}.w2"))?.to_owned(),
            b2: state.view::<Ix1>(&format!("{p}.b2"))?.to_owned(),
        })
    }

    pub fn write_to(&self, state: &mut ModelState, part: usize) {
        let p = Self::prefix(part);
        state.insert(format!("{p}.w1"), self.w1.clone());
        state.insert(format!("{p}.b1"), self.b1.clone());
        state.insert(format!("{p}.w2"), self.w2.clone());
        state.insert(format!("{p}.b2"), self.b2.clone());
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.channels() {
            return Err(rejected(format!("fusion gate expects {} channels, got {len}", self.channels())));
        }
        Ok(())
    }

    /// Gate `Z` for a single part feature.
    pub fn attention(&self, local: ArrayView1<'_, f64>) -> Result<AttentionVector> {
        self.check_len(local.len())?;
        let hidden = (self.w1.dot(&local) + &self.b1).mapv(|v| v.max(0.0));
        let mlp = self.w2.dot(&hidden) + &self.b2;
        Ok(AttentionVector(mlp * local))
    }
}

/// `C / r`, requiring `r | C`.
pub fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
        return Err(Error::Config(format!("reduction ratio {reduction} must divide channel count {channels}")));
    }
    Ok(channels / reduction)
}

/// One fusion parameter set per part, parts numbered from 1.
pub fn init_fusion_state<R: Rng + ?Sized>(channels: usize, reduction: usize, parts: usize, rng: &mut R) -> Result<ModelState> {
    let mut state = ModelState::new();
    for j in 1..=parts {
        FusionParams::new(channels, reduction, rng)?.write_to(&mut state, j);
    }
    Ok(state)
}

/// Fused map `sigmoid(Z) * Phi` with the gate broadcast over space.
pub fn fuse(local: &EmbeddingVector, global: &FeatureMap, params: &FusionParams) -> Result<FeatureMap> {
    if global.channels() != local.len() {
        return Err(rejected(format!(
            "local feature has {} channels but global map has {}",
            local.len(),
            global.channels()
        )));
    }
    let z = params.attention(local.0.view())?;
    let gate = z.0.mapv(sigmoid);
    let mut out: Array3<f64> = global.0.clone();
    for (mut plane, &g) in out.axis_iter_mut(Axis(0)).zip(gate.iter()) {
        plane.mapv_inplace(|v| g * v);
    }
    Ok(FeatureMap(out))
}

/// Pooled fused map, the vector clustered for part views.
pub fn fusion_feature(local: &EmbeddingVector, global: &FeatureMap, params: &FusionParams) -> Result<EmbeddingVector> {
    Ok(gap(&fuse(local, global, params)?))
}

/// Saved activations of [`fusion_feature_batch`].
pub struct FusionCache {
    local: Array2<f64>,
    pooled_global: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    mlp: Array2<f64>,
    gate: Array2<f64>,
}

/// Batched pooled fusion: `sigmoid(Z(local)) * pooled_global`, rows are samples.
///
/// Because the gate is spatially constant, pooling the fused map equals gating
/// the pooled global map, so only pooled inputs are needed.
pub fn fusion_feature_batch(
    params: &FusionParams,
    local: ArrayView2<'_, f64>,
    pooled_global: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, FusionCache)> {
    params.check_len(local.ncols())?;
    if local.dim() != pooled_global.dim() {
        return Err(rejected(format!(
            "local batch {:?} and global batch {:?} differ",
            local.dim(),
            pooled_global.dim()
        )));
    }
    let hidden_pre = local.dot(&params.w1.t()) + &params.b1;
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let mlp = hidden.dot(&params.w2.t()) + &params.b2;
    let gate = (&mlp * &local).mapv(sigmoid);
    let out = &gate * &pooled_global;
    Ok((
        out,
        FusionCache {
            local: local.to_owned(),
            pooled_global: pooled_global.to_owned(),
            hidden_pre,
            hidden,
            mlp,
            gate,
        },
    ))
}

/// Returns `(d_local, d_pooled_global)` and writes parameter gradients for `part`.
pub fn fusion_feature_backward(
    params: &FusionParams,
    cache: &FusionCache,
    dout: ArrayView2<'_, f64>,
    part: usize,
    grads: &mut Grads,
) -> (Array2<f64>, Array2<f64>) {
    let d_global = &dout * &cache.gate;
    let mut dz = &dout * &cache.pooled_global;
    Zip::from(&mut dz).and(&cache.gate).for_each(|d, &a| *d *= a * (1.0 - a));
    let dmlp = &dz * &cache.local;
    let mut d_local = &dz * &cache.mlp;
    let mut dh = dmlp.dot(&params.w2);
    Zip::from(&mut dh).and(&cache.hidden_pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    d_local += &dh.dot(&params.w1);
    let p = FusionParams::prefix(part);
    grads.accumulate_owned(&format!("{p}.w2"), dmlp.t().dot(&cache.hidden));
    grads.accumulate_owned(&format!("{p}.b2"), dmlp.sum_axis(Axis(0)));
    grads.accumulate_owned(&format!("{p}.w1"), dh.t().dot(&cache.local));
    grads.accumulate_owned(&format!("{p}.b1"), dh.sum_axis(Axis(0)));
    (d_local, d_global)
}

/// Gradients of `sum(probe * fuse(local, global))` for a single sample.
///
/// Returns `(d_local, d_global_map)`; parameter gradients go into `grads` under `part`.
pub fn fuse_backward(
    local: &EmbeddingVector,
    global: &FeatureMap,
    params: &FusionParams,
    probe: &Array3<f64>,
    part: usize,
    grads: &mut Grads,
) -> Result<(Array1<f64>, Array3<f64>)> {
    let z = params.attention(local.0.view())?;
    let gate = z.0.mapv(sigmoid);
    let mut d_global = probe.clone();
    for (mut plane, &g) in d_global.axis_iter_mut(Axis(0)).zip(gate.iter()) {
        plane.mapv_inplace(|v| g * v);
    }
    // With a pooled global of ones, the batched backward maps d(gate) onto the MLP.
    let dgate: Array1<f64> = (probe * &global.0).sum_axis(Axis(2)).sum_axis(Axis(1));
    let row = local.0.view().insert_axis(Axis(0));
    let ones = Array2::<f64>::ones((1, local.len()));
    let (_, cache) = fusion_feature_batch(params, row, ones.view())?;
    let (d_local, _) = fusion_feature_backward(params, &cache, dgate.view().insert_axis(Axis(0)), part, grads);
    Ok((d_local.index_axis_move(Axis(0), 0), d_global))
}
