//! Source pretraining and iterated cluster / fine-tune / EMA target adaptation.

use std::collections::BTreeMap;

use log::{debug, info};
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{build_pseudo_datasets, cluster_purity, PseudoLabelSets};
use crate::config::{TrainConfig, Variant};
use crate::data::{augment, stack_images, Phase, PkSampler, Sample};
use crate::error::{rejected, Error, Result};
use crate::fusion::{fusion_feature_backward, fusion_feature_batch, init_fusion_state, FusionParams};
use crate::losses::{
    batch_hard_mine, cross_entropy_with_grad, hinge_triplet, hinge_triplet_grad, mine_available, softmax_triplet,
    softmax_triplet_grad, source_loss, total_target_loss,
};
use crate::model::{encode_backward, encode_batch, encode_batch_train, init_student, ClassifierHead, ExpertHead};
use crate::nn::{gap_batch, gap_rows_batch};
use crate::optim::{Adam, AdamConfig};
use crate::state::{Grads, ModelState};
use crate::teacher::{ema_update, init_teacher};

const FEATURE_CHUNK: usize = 128;

/// Per-epoch record of the source stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub loss: f64,
    pub cls: f64,
    pub tri: f64,
}

/// Loss components of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: f64,
    pub tri: f64,
    /// Softmax-triplet loss of each part (empty for the baseline).
    pub part_tri: Vec<f64>,
    pub total: f64,
}

/// Per-epoch record of the target stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub tri: f64,
    pub part_tri: Vec<f64>,
    /// ARI between the global labels and each part view, measured at clustering time.
    pub ari: Vec<f64>,
    pub mean_ari: f64,
    /// Purity of every view against ground truth, when annotations exist.
    pub purity: Option<Vec<f64>>,
    /// Cluster sizes of every view.
    pub cluster_sizes: Vec<Vec<usize>>,
}

/// Hooks for inspecting a target run as it progresses.
pub trait TrainObserver {
    /// Called after clustering and classifier re-creation, before the first step of `epoch`.
    fn epoch_start(&mut self, _epoch: usize, _student: &ModelState, _teacher: &ModelState) {}
    /// Called after the optimizer step and the teacher update.
    fn iteration(&mut self, _epoch: usize, _iteration: usize, _student: &ModelState, _teacher: &ModelState, _losses: &StepLosses) {
    }
    fn epoch_end(&mut self, _report: &EpochReport, _labels: &PseudoLabelSets) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Student, teacher and fusion parameters of a target run.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub student: ModelState,
    pub teacher: ModelState,
    pub fusion: ModelState,
}

pub struct FinetuneOutput {
    pub networks: Networks,
    pub reports: Vec<EpochReport>,
    pub labels: Vec<PseudoLabelSets>,
}

fn diverged(stage: &'static str, epoch: usize, iteration: usize, detail: impl Into<String>) -> Error {
    Error::Diverged { stage, epoch, iteration, detail: detail.into() }
}

/// Maps arbitrary identity values onto `0..M`, preserving order.
fn contiguous_labels(samples: &[Sample]) -> Result<(Vec<usize>, usize)> {
    let mut ids = BTreeMap::new();
    for s in samples {
        let id = s.identity.ok_or_else(|| rejected("source sample without identity"))?;
        let next = ids.len();
        ids.entry(id).or_insert(next);
    }
    let mut order: Vec<usize> = ids.keys().copied().collect();
    order.sort_unstable();
    let index: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let labels = samples.iter().map(|s| index[&s.identity.expect("checked")]).collect();
    Ok((labels, order.len()))
}

fn augmented_batch(samples: &[Sample], batch: &[usize], phase: Phase, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let images: Vec<_> = batch.iter().map(|&i| augment(&samples[i].image, phase, &cfg.augment, rng)).collect();
    stack_images(images.iter())
}

/// Gradient of the feature map given gradients of the pooled global vector and the pooled parts.
fn spread_pooled_grads(shape: (usize, usize, usize, usize), dglobal: ArrayView2<'_, f64>, dparts: &[Array2<f64>]) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let mut dmap = Array4::<f64>::zeros((n, c, h, w));
    let g_scale = 1.0 / (h * w) as f64;
    for ((i, k), &v) in dglobal.indexed_iter() {
        dmap.slice_mut(s![i, k, .., ..]).fill(v * g_scale);
    }
    if !dparts.is_empty() {
        let strip = h / dparts.len();
        let p_scale = 1.0 / (strip * w) as f64;
        for (j, dp) in dparts.iter().enumerate() {
            let mut region = dmap.slice_mut(s![.., .., j * strip..(j + 1) * strip, ..]);
            for ((i, k), &v) in dp.indexed_iter() {
                region.slice_mut(s![i, k, .., ..]).mapv_inplace(|x| x + v * p_scale);
            }
        }
    }
    dmap
}

/// Learning rate of source epoch `epoch` (0-based).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.pretrain.lr_at_epoch(epoch)
}

/// Supervised source training with `cls + lambda * tri`.
///
/// Returns the trained student (encoder, experts and source classifier) and
/// one record per epoch. With zero epochs the initialization is returned.
pub fn pretrain_source(samples: &[Sample], cfg: &TrainConfig) -> Result<(ModelState, Vec<PretrainEpoch>)> {
    cfg.validate()?;
    let (labels, classes) = contiguous_labels(samples)?;
    let enc = &cfg.model.encoder;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("init", 0));
    let mut student = init_student(enc, cfg.model.parts, classes, &mut init_rng)?;
    let mut sampler_cfg = cfg.sampler;
    sampler_cfg.seed = cfg.derive_seed("pretrain-sampler", 0);
    let mut sampler = PkSampler::new(&labels, sampler_cfg)?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("pretrain-augment", 0));
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.pretrain.weight_decay, ..Default::default() });
    let mut history = Vec::with_capacity(cfg.pretrain.epochs);
    for epoch in 0..cfg.pretrain.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let batches = match cfg.pretrain.iters_per_epoch {
            Some(n) => (0..n).map(|_| sampler.next_batch()).collect(),
            None => sampler.epoch(),
        };
        let (mut sum_loss, mut sum_cls, mut sum_tri) = (0.0, 0.0, 0.0);
        for (it, batch) in batches.iter().enumerate() {
            let x = augmented_batch(samples, batch, Phase::SourcePretrain, cfg, &mut aug_rng);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (map, cache) = encode_batch_train(enc, &mut student, x.view())?;
            let global = gap_batch(map.view());
            let head = ClassifierHead::from_state(&student)?;
            let logits = head.forward(global.view())?;
            let (cls, dlogits) = cross_entropy_with_grad(logits.view(), &y)?;
            let mining = batch_hard_mine(global.view(), &y)?;
            let tri = hinge_triplet(&mining, cfg.loss.margin);
            let loss = source_loss(cls, tri, cfg.loss.lambda);
            if !loss.is_finite() {
                return Err(diverged("pretrain", epoch, it, format!("loss {loss} (cls {cls}, tri {tri})")));
            }
            let mut grads = Grads::new();
            let mut dglobal = head.backward(global.view(), dlogits.view(), &mut grads);
            if cfg.loss.lambda != 0.0 {
                dglobal.scaled_add(cfg.loss.lambda, &hinge_triplet_grad(global.view(), &mining, cfg.loss.margin));
            }
            let dmap = spread_pooled_grads(map.dim(), dglobal.view(), &[]);
            encode_backward(&student, cache, dmap, &mut grads)?;
            if !grads.all_finite() {
                return Err(diverged("pretrain", epoch, it, "non-finite gradient"));
            }
            opt.step(&mut student, &grads, lr)?;
            sum_loss += loss;
            sum_cls += cls;
            sum_tri += tri;
        }
        let n = batches.len().max(1) as f64;
        let rec = PretrainEpoch { epoch, lr, iterations: batches.len(), loss: sum_loss / n, cls: sum_cls / n, tri: sum_tri / n };
        info!("pretrain epoch {epoch}: loss {:.4} (cls {:.4}, tri {:.4}), lr {lr:.2e}", rec.loss, rec.cls, rec.tri);
        history.push(rec);
    }
    Ok((student, history))
}

/// Inference-mode features used for clustering: the teacher's pooled global
/// map and one view per part.
///
/// `Full` gates the teacher global map by each student part; `NoFm` pools
/// the teacher's own parts; `Baseline` returns no part views.
pub fn clustering_features(
    cfg: &TrainConfig,
    variant: Variant,
    nets: &Networks,
    samples: &[Sample],
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let enc = &cfg.model.encoder;
    let parts = if variant == Variant::Baseline { 0 } else { cfg.model.parts };
    let fusion: Vec<FusionParams> =
        (1..=parts).map(|j| FusionParams::from_state(&nets.fusion, j)).collect::<Result<_>>()?;
    let mut global_blocks = Vec::new();
    let mut part_blocks: Vec<Vec<Array2<f64>>> = vec![Vec::new(); parts];
    for chunk in samples.chunks(FEATURE_CHUNK) {
        let x = stack_images(chunk.iter().map(|s| &s.image));
        let tmap = encode_batch(enc, &nets.teacher, x.view())?;
        let tglobal = gap_batch(tmap.view());
        if parts > 0 {
            let strip = tmap.shape()[2] / parts;
            let smap = if variant == Variant::Full { Some(encode_batch(enc, &nets.student, x.view())?) } else { None };
            for j in 0..parts {
                let view = match &smap {
                    Some(smap) => {
                        let local = gap_rows_batch(smap.view(), j * strip, (j + 1) * strip);
                        fusion_feature_batch(&fusion[j], local.view(), tglobal.view())?.0
                    }
                    None => gap_rows_batch(tmap.view(), j * strip, (j + 1) * strip),
                };
                part_blocks[j].push(view);
            }
        }
        global_blocks.push(tglobal);
    }
    let cat = |blocks: &[Array2<f64>]| -> Result<Array2<f64>> {
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| rejected(format!("no samples: {e}")))
    };
    let global = cat(&global_blocks)?;
    let views = part_blocks.iter().map(|b| cat(b)).collect::<Result<Vec<_>>>()?;
    Ok((global, views))
}

/// Target loss and gradients for one batch. Normalization running statistics
/// of `student` are updated as a side effect of the training-mode pass.
///
/// `labels[v][i]` is the view-`v` label of batch item `i`; view 0 is global.
/// Terms with zero weight contribute no gradient.
pub fn target_gradients(
    cfg: &TrainConfig,
    variant: Variant,
    student: &mut ModelState,
    fusion: &ModelState,
    images: ArrayView4<'_, f64>,
    labels: &[Vec<usize>],
) -> Result<(StepLosses, Grads)> {
    let enc = &cfg.model.encoder;
    let w = &cfg.loss;
    let parts = if variant == Variant::Baseline { 0 } else { cfg.model.parts };
    if labels.len() < parts + 1 {
        return Err(rejected(format!("{} label views for {} parts", labels.len(), parts)));
    }
    let (map, cache) = encode_batch_train(enc, student, images)?;
    let (_, _, h, _) = map.dim();
    let global = gap_batch(map.view());
    let head = ClassifierHead::from_state(student)?;
    let logits = head.forward(global.view())?;
    let (cls, dlogits) = cross_entropy_with_grad(logits.view(), &labels[0])?;
    let mining = batch_hard_mine(global.view(), &labels[0])?;
    let tri = hinge_triplet(&mining, w.margin);

    let mut grads = Grads::new();
    let mut dglobal = Array2::<f64>::zeros(global.raw_dim());
    if w.alpha != 0.0 {
        let mut dl = dlogits;
        dl *= w.alpha;
        dglobal += &head.backward(global.view(), dl.view(), &mut grads);
        if w.lambda != 0.0 {
            dglobal.scaled_add(w.alpha * w.lambda, &hinge_triplet_grad(global.view(), &mining, w.margin));
        }
    }

    let strip = h.checked_div(parts).unwrap_or(h);
    let mut part_tri = Vec::with_capacity(parts);
    let mut dparts = Vec::with_capacity(parts);
    for j in 1..=parts {
        let local = gap_rows_batch(map.view(), (j - 1) * strip, j * strip);
        let prefix = ExpertHead::prefix(j);
        let mut expert = ExpertHead::from_state(student, &prefix)?;
        let fused = if variant == Variant::Full {
            let params = FusionParams::from_state(fusion, j)?;
            let (out, fcache) = fusion_feature_batch(&params, local.view(), global.view())?;
            Some((params, out, fcache))
        } else {
            None
        };
        let expert_in = fused.as_ref().map_or(local.view(), |f| f.1.view());
        let (emb, ecache) = expert.forward_train(expert_in)?;
        let mined = mine_available(emb.view(), &labels[j])?;
        let loss = softmax_triplet(&mined);
        part_tri.push(loss);
        let mut dlocal = Array2::<f64>::zeros(local.raw_dim());
        if w.gamma != 0.0 && !mined.is_empty() {
            let mut demb = softmax_triplet_grad(emb.view(), &mined);
            demb *= w.gamma;
            let dx = expert.backward(&ecache, demb.view(), &prefix, &mut grads);
            match &fused {
                Some((params, _, fcache)) => {
                    let (dl, dg) = fusion_feature_backward(params, fcache, dx.view(), j, &mut grads);
                    dlocal = dl;
                    dglobal += &dg;
                }
                None => dlocal = dx,
            }
        }
        // Running statistics of the expert moved during the training-mode pass.
        expert.write_to(student, &prefix);
        dparts.push(dlocal);
    }

    let total = total_target_loss(cls, tri, &part_tri, w);
    let dmap = spread_pooled_grads(map.dim(), dglobal.view(), &dparts);
    encode_backward(student, cache, dmap, &mut grads)?;
    Ok((StepLosses { cls, tri, part_tri, total }, grads))
}

/// One optimizer step on every student-side parameter followed by the teacher update.
#[allow(clippy::too_many_arguments)]
pub fn step_iteration(
    cfg: &TrainConfig,
    variant: Variant,
    nets: &mut Networks,
    opt: &mut Adam,
    images: ArrayView4<'_, f64>,
    labels: &[Vec<usize>],
    lr: f64,
    at: (usize, usize),
) -> Result<StepLosses> {
    let (losses, mut grads) = target_gradients(cfg, variant, &mut nets.student, &nets.fusion, images, labels)?;
    if !losses.total.is_finite() {
        return Err(diverged("finetune", at.0, at.1, format!("loss {:?}", losses)));
    }
    if !grads.all_finite() {
        return Err(diverged("finetune", at.0, at.1, "non-finite gradient"));
    }
    let fusion_grads = grads.split_prefix("fusion");
    opt.step(&mut nets.student, &grads, lr)?;
    opt.step(&mut nets.fusion, &fusion_grads, lr)?;
    ema_update(&mut nets.teacher, &nets.student, cfg.finetune.ema_momentum)?;
    Ok(losses)
}

/// Initial target-stage networks: teacher copied from the pretrained student,
/// fresh fusion gates.
pub fn init_networks(pretrained: &ModelState, cfg: &TrainConfig) -> Result<Networks> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("fusion-init", 0));
    let fusion = init_fusion_state(cfg.model.encoder.channels, cfg.model.reduction, cfg.model.parts, &mut rng)?;
    Ok(Networks { student: pretrained.clone(), teacher: init_teacher(pretrained), fusion })
}

fn epoch_report(epoch: usize, labels: &PseudoLabelSets, truth: Option<&[usize]>) -> Result<EpochReport> {
    let ari = labels.consistency()?;
    let mean_ari = if ari.is_empty() { 1.0 } else { ari.iter().sum::<f64>() / ari.len() as f64 };
    let purity = match truth {
        Some(t) => Some(labels.views.iter().map(|v| cluster_purity(v, t)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let cluster_sizes = (0..labels.num_views()).map(|v| labels.cluster_sizes(v)).collect();
    Ok(EpochReport { epoch, loss: 0.0, cls: 0.0, tri: 0.0, part_tri: Vec::new(), ari, mean_ari, purity, cluster_sizes })
}

/// Target adaptation: per epoch cluster every view with the teacher, re-create
/// the classifier, then run the configured iterations with a teacher update
/// after each step.
pub fn finetune_target(
    pretrained: &ModelState,
    target: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let nets = init_networks(pretrained, cfg)?;
    finetune_from(nets, target, cfg, observer)
}

/// [`finetune_target`] starting from explicit networks.
pub fn finetune_from(
    mut nets: Networks,
    target: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneOutput> {
    let variant = cfg.finetune.variant;
    let ft = &cfg.finetune;
    if target.len() < cfg.cluster.clusters {
        return Err(Error::Config(format!(
            "{} target samples cannot form {} clusters",
            target.len(),
            cfg.cluster.clusters
        )));
    }
    let truth: Option<Vec<usize>> = target.iter().map(|s| s.identity).collect();
    let mut opt = Adam::new(AdamConfig { weight_decay: ft.weight_decay, ..Default::default() });
    let mut reports = Vec::with_capacity(ft.epochs);
    let mut all_labels = Vec::with_capacity(ft.epochs);
    for epoch in 0..ft.epochs {
        let (global, views) = clustering_features(cfg, variant, &nets, target)?;
        let mut ccfg = cfg.cluster.clone();
        ccfg.seed = cfg.derive_seed("cluster", epoch as u64);
        let labels = build_pseudo_datasets(global.view(), &views, &ccfg)
            .map_err(|e| diverged("finetune", epoch, 0, format!("clustering failed: {e}")))?;
        let mut report = epoch_report(epoch, &labels, truth.as_deref())?;
        debug!("epoch {epoch}: cluster sizes {:?}", report.cluster_sizes);

        let head = ClassifierHead::from_centroids(global.view(), &labels.views[0], labels.clusters[0], cfg.finetune.classifier_scale)?;
        head.write_to(&mut nets.student);
        head.write_to(&mut nets.teacher);
        opt.reset_prefix(ClassifierHead::PREFIX);
        observer.epoch_start(epoch, &nets.student, &nets.teacher);

        let mut scfg = cfg.sampler;
        scfg.seed = cfg.derive_seed("sampler", epoch as u64);
        let mut sampler = PkSampler::new(&labels.views[0], scfg)?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("augment", epoch as u64));
        let n_parts = labels.num_views() - 1;
        let mut sums = StepLosses { cls: 0.0, tri: 0.0, part_tri: vec![0.0; n_parts], total: 0.0 };
        for it in 0..ft.iters_per_epoch {
            let batch = sampler.next_batch();
            let x = augmented_batch(target, &batch, Phase::TargetFinetune, cfg, &mut aug_rng);
            let batch_labels: Vec<Vec<usize>> =
                labels.views.iter().map(|v| batch.iter().map(|&i| v[i]).collect()).collect();
            let losses = step_iteration(cfg, variant, &mut nets, &mut opt, x.view(), &batch_labels, ft.lr, (epoch, it))?;
            sums.cls += losses.cls;
            sums.tri += losses.tri;
            sums.total += losses.total;
            Zip::from(&mut ndarray::ArrayViewMut1::from(&mut sums.part_tri[..]))
                .and(&ndarray::ArrayView1::from(&losses.part_tri[..]))
                .for_each(|a, &b| *a += b);
            observer.iteration(epoch, it, &nets.student, &nets.teacher, &losses);
        }
        let n = ft.iters_per_epoch as f64;
        report.loss = sums.total / n;
        report.cls = sums.cls / n;
        report.tri = sums.tri / n;
        report.part_tri = sums.part_tri.iter().map(|v| v / n).collect();
        info!(
            "finetune[{}] epoch {epoch}: loss {:.4}, mean ARI {:.4}, purity {:?}",
            variant.name(),
            report.loss,
            report.mean_ari,
            report.purity
        );
        observer.epoch_end(&report, &labels);
        reports.push(report);
        all_labels.push(labels);
    }
    Ok(FinetuneOutput { networks: nets, reports, labels: all_labels })
}
