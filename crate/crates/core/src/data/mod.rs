//! Dataset ingestion, synthetic domains, batch sampling and augmentation.

pub mod augment;
pub mod dataset;
pub mod sampler;
pub mod synth;

pub use augment::{augment, AugmentConfig, Phase};
pub use dataset::{load_dataset, load_query_gallery, parse_filename, save_split, Sample, SampleOrigin, Split};
pub use sampler::{pk_batches, PkSampler, SamplerConfig};
pub use synth::{query_gallery_split, synth_generate, DomainStyle, SynthConfig};

use ndarray::{Array4, Axis};

/// Stacks the selected sample images into an `(N, 3, H, W)` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a ndarray::Array3<f64>>) -> Array4<f64> {
    let views: Vec<_> = images.into_iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("images share one shape")
}

/// The four splits a two-stage run needs.
#[derive(Debug, Clone)]
pub struct Domains {
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

/// Loads labelled source training images from disk, or generates them.
pub fn source_domain(cfg: &crate::config::TrainConfig) -> crate::Result<Vec<Sample>> {
    let enc = &cfg.model.encoder;
    match &cfg.data.source_root {
        Some(root) => load_dataset(root, Split::Train, enc.input_height, enc.input_width),
        None => {
            let s = &cfg.synthetic;
            let style = crate::config::SyntheticConfig::style(&s.source_style)?;
            synth_generate(s.train_ids, s.images_per_id, &style, cfg.derive_seed("synth-source", 0), &synth_config(cfg))
        }
    }
}

/// Target training images (annotations kept only for diagnostics) plus query and gallery.
pub fn target_domain(cfg: &crate::config::TrainConfig) -> crate::Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let enc = &cfg.model.encoder;
    match &cfg.data.target_root {
        Some(root) => {
            let train = load_dataset(root, Split::Train, enc.input_height, enc.input_width)?;
            let (query, gallery) = load_query_gallery(root, enc.input_height, enc.input_width)?;
            Ok((train, query, gallery))
        }
        None => {
            let s = &cfg.synthetic;
            let style = crate::config::SyntheticConfig::style(&s.target_style)?;
            let sc = synth_config(cfg);
            let train = synth_generate(s.train_ids, s.images_per_id, &style, cfg.derive_seed("synth-target", 0), &sc)?;
            let test = synth_generate(s.test_ids, s.images_per_id, &style, cfg.derive_seed("synth-target", 1), &sc)?;
            let (query, gallery) = query_gallery_split(test, s.query_per_id);
            Ok((train, query, gallery))
        }
    }
}

pub fn domains(cfg: &crate::config::TrainConfig) -> crate::Result<Domains> {
    let source_train = source_domain(cfg)?;
    let (target_train, query, gallery) = target_domain(cfg)?;
    Ok(Domains { source_train, target_train, query, gallery })
}

fn synth_config(cfg: &crate::config::TrainConfig) -> SynthConfig {
    SynthConfig {
        height: cfg.model.encoder.input_height,
        width: cfg.model.encoder.input_width,
        cameras: cfg.synthetic.cameras,
        noise_std: cfg.synthetic.noise_std,
    }
}
