use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use log::warn;
use ndarray::Array3;

use crate::error::{Error, Result};

/// One image with optional identity and camera annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// Contiguous identity index within the loaded split.
    pub identity: Option<usize>,
    pub camera: Option<usize>,
    pub origin: SampleOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleOrigin {
    File(PathBuf),
    Synthetic { identity: usize, index: usize },
}

/// Market-style directory split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Parses `<personID>_c<cameraID>_<rest>.<ext>` into `(person, camera)`.
///
/// Negative person ids (distractors) are rejected.
pub fn parse_filename(name: &str) -> Option<(u64, u64)> {
    let (stem, ext) = name.rsplit_once('.')?;
    if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
        return None;
    }
    let mut fields = stem.splitn(3, '_');
    let pid = fields.next()?;
    let cam = fields.next()?.strip_prefix('c')?;
    fields.next()?;
    if pid.is_empty() || !pid.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let cam_digits: String = cam.chars().take_while(char::is_ascii_digit).collect();
    if cam_digits.is_empty() {
        return None;
    }
    Some((pid.parse().ok()?, cam_digits.parse().ok()?))
}

/// Reads an image file, resizes it to `height x width` and scales to `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize != width || rgb.height() as usize != height {
        image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle)
    } else {
        rgb
    };
    Ok(Array3::from_shape_fn((3, height, width), |(c, y, x)| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

struct RawEntry {
    path: PathBuf,
    pid: u64,
    camera: u64,
}

fn scan_split(root: &Path, split: Split) -> Result<Vec<RawEntry>> {
    let dir = root.join(split.dir_name());
    let mut entries = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    paths.sort();
    for path in paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match parse_filename(name) {
            Some((pid, camera)) => entries.push(RawEntry { path, pid, camera }),
            None => warn!("skipping malformed file name {}", path.display()),
        }
    }
    Ok(entries)
}

fn materialize(entries: Vec<RawEntry>, remap: &BTreeMap<u64, usize>, height: usize, width: usize) -> Result<Vec<Sample>> {
    entries
        .into_iter()
        .map(|e| {
            Ok(Sample {
                image: load_image(&e.path, height, width)?,
                identity: Some(remap[&e.pid]),
                camera: Some(e.camera as usize),
                origin: SampleOrigin::File(e.path),
            })
        })
        .collect()
}

fn identity_map<'a>(entries: impl Iterator<Item = &'a RawEntry>) -> BTreeMap<u64, usize> {
    let mut ids: Vec<u64> = entries.map(|e| e.pid).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, p)| (p, i)).collect()
}

/// Loads one split in lexicographic path order with identities remapped to `[0, M)`.
pub fn load_dataset(root: &Path, split: Split, height: usize, width: usize) -> Result<Vec<Sample>> {
    let entries = scan_split(root, split)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.join(split.dir_name())));
    }
    let remap = identity_map(entries.iter());
    materialize(entries, &remap, height, width)
}

/// Loads query and gallery with one identity mapping shared by both.
pub fn load_query_gallery(root: &Path, height: usize, width: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let q = scan_split(root, Split::Query)?;
    let g = scan_split(root, Split::Gallery)?;
    if q.is_empty() {
        return Err(Error::EmptyDataset(root.join(Split::Query.dir_name())));
    }
    if g.is_empty() {
        return Err(Error::EmptyDataset(root.join(Split::Gallery.dir_name())));
    }
    let remap = identity_map(q.iter().chain(g.iter()));
    Ok((materialize(q, &remap, height, width)?, materialize(g, &remap, height, width)?))
}

pub fn to_rgb_image(image: &Array3<f64>) -> RgbImage {
    let (_, h, w) = image.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes samples as `<root>/<split>/<pid:04>_c<cam>_<index:06>.png`.
///
/// Samples without identity are written with id 0; camera defaults to 1.
pub fn save_split(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let dir = root.join(split.dir_name());
    fs::create_dir_all(&dir)?;
    for (i, s) in samples.iter().enumerate() {
        let pid = s.identity.unwrap_or(0);
        let cam = s.camera.map_or(1, |c| c + 1);
        let path = dir.join(format!("{pid:04}_c{cam}_{i:06}.png"));
        to_rgb_image(&s.image)
            .save(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
    }
    Ok(())
}
