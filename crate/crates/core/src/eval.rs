//! Teacher inference features and retrieval metrics (CMC, mAP).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{rejected, Result};
use crate::model::{encode_batch, EmbeddingVector, EncoderConfig};
use crate::nn::{gap_batch, gap_rows_batch};
use crate::state::ModelState;

/// How the teacher map is turned into a retrieval descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceMode {
    /// Use only the pooled global map (`C` dims) instead of global plus parts.
    pub global_only: bool,
    /// L2-normalize each segment before concatenation.
    pub normalize_segments: bool,
}

impl Default for InferenceMode {
    fn default() -> Self {
        Self { global_only: false, normalize_segments: true }
    }
}

fn normalize_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    x
}

/// Descriptors `[global, part_1, .., part_K]` for a batch of images.
pub fn inference_features_batch(
    cfg: &EncoderConfig,
    teacher: &ModelState,
    images: ndarray::ArrayView4<'_, f64>,
    parts: usize,
    mode: InferenceMode,
) -> Result<Array2<f64>> {
    let maps = encode_batch(cfg, teacher, images)?;
    let h = maps.shape()[2];
    if parts == 0 || h % parts != 0 {
        return Err(crate::error::Error::Config(format!("feature-map height {h} is not divisible by {parts}")));
    }
    let mut segments = vec![gap_batch(maps.view())];
    if !mode.global_only {
        let strip = h / parts;
        for j in 0..parts {
            segments.push(gap_rows_batch(maps.view(), j * strip, (j + 1) * strip));
        }
    }
    if mode.normalize_segments {
        segments = segments.into_iter().map(normalize_rows).collect();
    }
    let views: Vec<_> = segments.iter().map(|a| a.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("segments share batch size"))
}

/// Single-image descriptor of length `(K + 1) * C` (or `C` in global-only mode).
pub fn inference_feature(
    cfg: &EncoderConfig,
    teacher: &ModelState,
    image: ArrayView3<'_, f64>,
    parts: usize,
    mode: InferenceMode,
) -> Result<EmbeddingVector> {
    let f = inference_features_batch(cfg, teacher, image.insert_axis(Axis(0)), parts, mode)?;
    Ok(EmbeddingVector(f.index_axis_move(Axis(0), 0)))
}

/// Descriptors for many samples, processed in chunks.
pub fn extract_features(
    cfg: &EncoderConfig,
    teacher: &ModelState,
    samples: &[Sample],
    parts: usize,
    mode: InferenceMode,
) -> Result<Array2<f64>> {
    const CHUNK: usize = 128;
    let mut blocks = Vec::new();
    for chunk in samples.chunks(CHUNK) {
        let batch = crate::data::stack_images(chunk.iter().map(|s| &s.image));
        blocks.push(inference_features_batch(cfg, teacher, batch.view(), parts, mode)?);
    }
    let views: Vec<_> = blocks.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| rejected(format!("no samples to extract: {e}")))
}

/// Identity and optional camera of each query or gallery item.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub ids: Vec<usize>,
    pub cameras: Option<Vec<usize>>,
}

impl Annotations {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let ids = samples
            .iter()
            .map(|s| s.identity.ok_or_else(|| rejected("evaluation sample without identity")))
            .collect::<Result<Vec<_>>>()?;
        let cameras = samples.iter().map(|s| s.camera).collect::<Option<Vec<_>>>();
        Ok(Self { ids, cameras })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    /// Queries that had at least one relevant gallery item.
    pub evaluated: usize,
    /// Queries skipped because nothing relevant was in the gallery.
    pub skipped: usize,
}

/// Ranked gallery for one query and the relevance of each ranked item.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranking: Vec<usize>,
    pub relevant: Vec<bool>,
}

/// Ranks the gallery by L2 distance (stable by index on ties). Same-identity
/// same-camera items are dropped when cameras are known on both sides.
pub fn rank_query(
    query: ndarray::ArrayView1<'_, f64>,
    q_id: usize,
    q_cam: Option<usize>,
    gallery: ArrayView2<'_, f64>,
    g: &Annotations,
) -> RetrievalResult {
    let dist: Vec<f64> = gallery
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(query.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut ranking = Vec::with_capacity(order.len());
    let mut relevant = Vec::with_capacity(order.len());
    for idx in order {
        let same_id = g.ids[idx] == q_id;
        if let (Some(qc), Some(cams)) = (q_cam, g.cameras.as_ref()) {
            if same_id && cams[idx] == qc {
                continue;
            }
        }
        ranking.push(idx);
        relevant.push(same_id);
    }
    RetrievalResult { ranking, relevant }
}

/// Average precision of a relevance list; `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// mAP and CMC@{1,5,10} of queries against a gallery.
pub fn evaluate(
    query: ArrayView2<'_, f64>,
    q: &Annotations,
    gallery: ArrayView2<'_, f64>,
    g: &Annotations,
) -> Result<RetrievalMetrics> {
    if gallery.nrows() == 0 {
        return Err(rejected("empty gallery"));
    }
    if query.ncols() != gallery.ncols() {
        return Err(rejected(format!("query dim {} != gallery dim {}", query.ncols(), gallery.ncols())));
    }
    if q.ids.len() != query.nrows() || g.ids.len() != gallery.nrows() {
        return Err(rejected("annotation count does not match feature rows"));
    }
    let use_cams = q.cameras.is_some() && g.cameras.is_some();
    let mut ap_sum = 0.0;
    let mut cmc = [0usize; 3];
    let mut evaluated = 0;
    let mut skipped = 0;
    for (i, row) in query.rows().into_iter().enumerate() {
        let q_cam = if use_cams { q.cameras.as_ref().map(|c| c[i]) } else { None };
        let res = rank_query(row, q.ids[i], q_cam, gallery, g);
        let Some(ap) = average_precision(&res.relevant) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += ap;
        let first = res.relevant.iter().position(|&r| r).expect("has a relevant item");
        for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
            if first < k {
                cmc[slot] += 1;
            }
        }
    }
    let denom = evaluated.max(1) as f64;
    Ok(RetrievalMetrics {
        map: ap_sum / denom,
        cmc1: cmc[0] as f64 / denom,
        cmc5: cmc[1] as f64 / denom,
        cmc10: cmc[2] as f64 / denom,
        evaluated,
        skipped,
    })
}

/// Writes descriptors as CSV rows `split,identity,camera,f0,f1,...` with a header line.
pub fn export_embeddings_csv(path: &Path, rows: &[(&str, &Annotations, ArrayView2<'_, f64>)]) -> Result<usize> {
    let mut out = BufWriter::new(File::create(path)?);
    let dim = rows.first().map_or(0, |r| r.2.ncols());
    write!(out, "split,identity,camera")?;
    for d in 0..dim {
        write!(out, ",f{d}")?;
    }
    writeln!(out)?;
    let mut count = 0;
    for (split, ann, feats) in rows {
        for (i, f) in feats.rows().into_iter().enumerate() {
            let cam = ann.cameras.as_ref().map_or(String::new(), |c| c[i].to_string());
            write!(out, "{split},{},{cam}", ann.ids[i])?;
            for v in f {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
            count += 1;
        }
    }
    out.flush()?;
    Ok(count)
}

/// Magic bytes of the binary embedding file.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"FREMB001";

/// Binary layout (little endian): magic, `u64 rows`, `u64 dim`, then per row
/// `u8 split` (0 query, 1 gallery), `i64 identity`, `i64 camera` (-1 unknown),
/// `dim x f32`.
pub fn export_embeddings_bin(path: &Path, rows: &[(u8, &Annotations, ArrayView2<'_, f64>)]) -> Result<usize> {
    let mut out = BufWriter::new(File::create(path)?);
    let total: usize = rows.iter().map(|r| r.2.nrows()).sum();
    let dim = rows.first().map_or(0, |r| r.2.ncols());
    out.write_all(EMBEDDING_MAGIC)?;
    out.write_all(&(total as u64).to_le_bytes())?;
    out.write_all(&(dim as u64).to_le_bytes())?;
    for (split, ann, feats) in rows {
        for (i, f) in feats.rows().into_iter().enumerate() {
            out.write_all(&[*split])?;
            out.write_all(&(ann.ids[i] as i64).to_le_bytes())?;
            let cam = ann.cameras.as_ref().map_or(-1i64, |c| c[i] as i64);
            out.write_all(&cam.to_le_bytes())?;
            for &v in f {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(total)
}

/// Reads the row count from a binary embedding file header.
pub fn embedding_file_rows(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(rejected(format!("{} is not an embedding file", path.display())));
    }
    Ok(u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")))
}
