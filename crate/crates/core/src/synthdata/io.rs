use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{make_sample, Domain, ImageSample, SceneSpec};
use crate::error::{io_err, LdzError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            n_train: 8,
            n_val: 4,
            n_test: 4,
            domain: Domain::A,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: String,
    pub caption: String,
    pub domain: Domain,
    pub scene_spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub root_seed: u64,
    pub split: String,
    pub domain: Domain,
    pub samples: Vec<IndexEntry>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Seed of sample `i` in `split`. Independent of the domain so both renderings
/// of a split share their scenes.
pub fn sample_seed(root_seed: u64, split: &str, i: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(root_seed, split), &format!("sample-{i}"))
}

pub fn sample_id(split: &str, i: usize) -> String {
    format!("{split}-{i:05}")
}

/// Builds one split in memory.
pub fn build_split(cfg: &DatasetConfig, split: &str, count: usize) -> (SplitIndex, Vec<ImageSample>) {
    let mut entries = Vec::with_capacity(count);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let id = sample_id(split, i);
        let (spec, s) = make_sample(sample_seed(cfg.seed, split, i), id.clone(), cfg.height, cfg.width, cfg.domain);
        entries.push(IndexEntry {
            sample_id: id,
            caption: s.caption.clone(),
            domain: cfg.domain,
            scene_spec: spec,
        });
        samples.push(s);
    }
    let index = SplitIndex {
        root_seed: cfg.seed,
        split: split.to_string(),
        domain: cfg.domain,
        samples: entries,
    };
    (index, samples)
}

fn write_sample(dir: &Path, s: &ImageSample) -> Result<()> {
    let (w, h) = (s.width as u32, s.height as u32);
    let rgb: Vec<u8> = s.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w, h, rgb).expect("buffer matches dimensions");
    let img_path = dir.join(format!("{}.img.png", s.sample_id));
    img.save(&img_path).map_err(|e| LdzError::Image {
        path: img_path.display().to_string(),
        message: e.to_string(),
    })?;
    let m: Vec<u8> = s.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mask = GrayImage::from_raw(w, h, m).expect("buffer matches dimensions");
    let mask_path = dir.join(format!("{}.mask.png", s.sample_id));
    mask.save(&mask_path).map_err(|e| LdzError::Image {
        path: mask_path.display().to_string(),
        message: e.to_string(),
    })
}

/// Saves a `3 x H x W` image with values in `[0, 1]` as an 8-bit PNG.
pub fn save_rgb_png(path: &Path, chw: &[f32], height: usize, width: usize) -> Result<()> {
    let hw = height * width;
    let rgb: Vec<u8> = (0..hw * 3)
        .map(|i| (chw[(i % 3) * hw + i / 3].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(width as u32, height as u32, rgb).expect("buffer matches dimensions");
    img.save(path).map_err(|e| LdzError::Image { path: path.display().to_string(), message: e.to_string() })
}

/// Saves an `H x W` map with values in `[0, 1]` as a grayscale PNG.
pub fn save_gray_png(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    let px: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, px).expect("buffer matches dimensions");
    img.save(path).map_err(|e| LdzError::Image { path: path.display().to_string(), message: e.to_string() })
}

/// Writes `train`, `val` and `test` splits under `root`.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<()> {
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(LdzError::Invalid("split counts must be positive".into()));
    }
    for (split, n) in SPLITS.into_iter().zip([cfg.n_train, cfg.n_val, cfg.n_test]) {
        write_split(&root.join(split), cfg, split, n)?;
    }
    Ok(())
}

/// Writes one split (images, masks, `index.json`) into `dir`.
pub fn write_split(dir: &Path, cfg: &DatasetConfig, split: &str, count: usize) -> Result<SplitIndex> {
    if count == 0 {
        return Err(LdzError::Invalid(format!("split `{split}` needs at least one sample")));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (index, samples) = build_split(cfg, split, count);
    for s in &samples {
        write_sample(dir, s)?;
    }
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(index)
}

pub fn read_index(split_dir: &Path) -> Result<SplitIndex> {
    let path = split_dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

fn open_png(path: &Path, id: &str, what: &str) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(LdzError::Dataset(format!("sample `{id}`: missing {what} file {}", path.display())));
    }
    image::open(path).map_err(|e| LdzError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads one sample given its split directory and index entry.
pub fn load_sample(split_dir: &Path, entry: &IndexEntry) -> Result<ImageSample> {
    let id = &entry.sample_id;
    let img_path: PathBuf = split_dir.join(format!("{id}.img.png"));
    let mask_path: PathBuf = split_dir.join(format!("{id}.mask.png"));
    let img = open_png(&img_path, id, "image")?.to_rgb8();
    let mask = open_png(&mask_path, id, "mask")?.to_luma8();
    let (w, h) = img.dimensions();
    if mask.dimensions() != (w, h) {
        return Err(LdzError::Dataset(format!("sample `{id}`: mask and image sizes differ")));
    }
    let spec = &entry.scene_spec;
    if (spec.width, spec.height) != (w as usize, h as usize) {
        return Err(LdzError::Dataset(format!("sample `{id}`: raster size disagrees with index")));
    }
    let mut bits = Vec::with_capacity(mask.len());
    for &v in mask.as_raw() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(LdzError::Dataset(format!("sample `{id}`: mask value {other} is not binary")));
            }
        }
    }
    let phrase = super::Phrase::parse(&entry.caption)?;
    if super::phrase_mask(spec, &phrase) != bits {
        return Err(LdzError::Dataset(format!("sample `{id}`: caption does not match stored mask")));
    }
    Ok(ImageSample {
        image: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        height: h as usize,
        width: w as usize,
        caption: entry.caption.clone(),
        mask: bits,
        domain: entry.domain,
        sample_id: id.clone(),
    })
}

pub fn load_split(split_dir: &Path) -> Result<(SplitIndex, Vec<ImageSample>)> {
    let index = read_index(split_dir)?;
    let samples = index
        .samples
        .iter()
        .map(|e| load_sample(split_dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}
