//! On-disk datasets, train/test splitting, input preparation and batching.
//!
//! A dataset directory holds `manifest.jsonl` (one [`SampleRecord`] per
//! line), `dataset.json` (generation metadata) and the PNG files under
//! `images/` and `masks/`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, IoContext, Result};
use crate::robots::RobotModel;
use crate::synth::{derive_seed, Sample, SceneConfig, RENDER_HEIGHT, RENDER_WIDTH};

pub const TRAIN_FRACTION: f64 = 0.8;
pub const INPUT_WIDTH: usize = RENDER_WIDTH / 2;
pub const INPUT_HEIGHT: usize = RENDER_HEIGHT / 2;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the dataset directory.
    pub color_path: String,
    pub mask_path: String,
    /// Base followed by every joint-frame origin, camera frame, meters.
    pub joints_3d: Vec<[f64; 3]>,
    pub base_3d: [f64; 3],
    pub angles: Vec<f64>,
    pub split_tag: SplitTag,
}

impl SampleRecord {
    /// Regression target of the joint head: joint-frame origins 1..=n, flattened.
    pub fn joint_targets(&self) -> Vec<f64> {
        self.joints_3d.iter().skip(1).flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub robot_type: usize,
    pub split_seed: u64,
}

impl DatasetManifest {
    pub fn count(&self, tag: SplitTag) -> usize {
        self.records.iter().filter(|r| r.split_tag == tag).count()
    }

    pub fn ids(&self, tag: SplitTag) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.split_tag == tag)
            .map(|r| r.id.as_str())
            .collect()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate sample id `{}`", r.id)));
            }
        }
        Ok(())
    }
}

/// Generation metadata stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub robot: RobotModel,
    pub robot_type: usize,
    pub n_joints: usize,
    pub count: usize,
    pub scene: SceneConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    #[serde(flatten)]
    meta: DatasetMeta,
    split_seed: u64,
}

/// Tags `floor(train_fraction * n)` records as train after a seeded shuffle;
/// the rest are test. Record order is preserved.
pub fn split(mut manifest: DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let n = manifest.records.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        manifest.records[i].split_tag = if rank < n_train { SplitTag::Train } else { SplitTag::Test };
    }
    manifest.split_seed = seed;
    Ok(manifest)
}

pub fn prepare_dataset_dir(dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).at(&p)?;
    }
    Ok(())
}

/// Writes the color PNG and the 0/255 mask PNG; returns their relative paths.
pub fn write_sample_images(dir: &Path, id: &str, sample: &Sample) -> Result<(String, String)> {
    let color_rel = format!("images/{id}.png");
    let mask_rel = format!("masks/{id}.png");
    let (w, h) = (sample.width as u32, sample.height as u32);
    let color = image::RgbImage::from_raw(w, h, sample.color.clone())
        .ok_or_else(|| Error::ShapeMismatch("color buffer does not match its dimensions".into()))?;
    let mask_px: Vec<u8> = sample.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let mask = image::GrayImage::from_raw(w, h, mask_px)
        .ok_or_else(|| Error::ShapeMismatch("mask buffer does not match its dimensions".into()))?;
    color.save(dir.join(&color_rel))?;
    mask.save(dir.join(&mask_rel))?;
    Ok((color_rel, mask_rel))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest, meta: &DatasetMeta) -> Result<()> {
    manifest.check_unique()?;
    let mut lines = String::new();
    for r in &manifest.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_atomic(&dir.join(MANIFEST_FILE), lines.as_bytes())?;
    let meta = MetaFile {
        meta: meta.clone(),
        split_seed: manifest.split_seed,
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    write_atomic(&dir.join(META_FILE), json.as_bytes())
}

/// A dataset directory read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: MetaFile = serde_json::from_slice(&fs::read(&meta_path).at(&meta_path)?)?;
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path).at(&path)?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.at(&path)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line)?;
            if record.joints_3d.len() != meta.meta.n_joints + 1 {
                return Err(Error::Format(format!(
                    "record `{}` has {} joint positions, expected {}",
                    record.id,
                    record.joints_3d.len(),
                    meta.meta.n_joints + 1
                )));
            }
            for rel in [&record.color_path, &record.mask_path] {
                let p = dir.join(rel);
                if !p.is_file() {
                    return Err(Error::Io {
                        path: p,
                        source: std::io::ErrorKind::NotFound.into(),
                    });
                }
            }
            records.push(record);
        }
        let manifest = DatasetManifest {
            records,
            robot_type: meta.meta.robot_type,
            split_seed: meta.split_seed,
        };
        manifest.check_unique()?;
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            meta: meta.meta,
        })
    }
}

/// Reads a record's color image and returns it normalized and downscaled
/// as a `[3, 212, 256]` tensor.
pub fn load_input(root: &Path, record: &SampleRecord) -> Result<Tensor> {
    let sums = load_input_sums(root, record)?;
    Tensor::new(vec![3, INPUT_HEIGHT, INPUT_WIDTH], sums_to_unit(&sums))
}

/// Reads a record's mask and downscales it with the majority rule.
pub fn load_mask(root: &Path, record: &SampleRecord) -> Result<Vec<u8>> {
    let img = image::open(root.join(&record.mask_path))?.into_luma8();
    check_dims(img.width(), img.height())?;
    Ok(downscale_mask(img.as_raw(), RENDER_WIDTH, RENDER_HEIGHT))
}

fn check_dims(w: u32, h: u32) -> Result<()> {
    if w as usize != RENDER_WIDTH || h as usize != RENDER_HEIGHT {
        return Err(Error::BadDimensions {
            expected_w: RENDER_WIDTH,
            expected_h: RENDER_HEIGHT,
            got_w: w as usize,
            got_h: h as usize,
        });
    }
    Ok(())
}

fn load_input_sums(root: &Path, record: &SampleRecord) -> Result<Vec<u16>> {
    let img = image::open(root.join(&record.color_path))?.into_rgb8();
    check_dims(img.width(), img.height())?;
    Ok(downscale_sums(img.as_raw(), RENDER_WIDTH, RENDER_HEIGHT))
}

/// 2x2 block sums of an interleaved RGB image, planar `[3, h/2, w/2]`.
pub fn downscale_sums(rgb: &[u8], width: usize, height: usize) -> Vec<u16> {
    let (ow, oh) = (width / 2, height / 2);
    let mut out = vec![0u16; 3 * ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let px = |dy: usize, dx: usize| rgb[((2 * y + dy) * width + 2 * x + dx) * 3 + c] as u16;
                out[(c * oh + y) * ow + x] = px(0, 0) + px(0, 1) + px(1, 0) + px(1, 1);
            }
        }
    }
    out
}

pub fn sums_to_unit(sums: &[u16]) -> Vec<f64> {
    sums.iter().map(|&s| s as f64 / 4.0 / 255.0).collect()
}

/// Box-filter downscale of an interleaved RGB image to planar values in [0, 1].
pub fn downscale_image(rgb: &[u8], width: usize, height: usize) -> Result<Vec<f64>> {
    if rgb.len() != width * height * 3 || width % 2 != 0 || height % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} bytes for an RGB image of {width}x{height}",
            rgb.len()
        )));
    }
    Ok(sums_to_unit(&downscale_sums(rgb, width, height)))
}

/// 2x2 majority downscale: a block with 2 or more foreground pixels is foreground.
pub fn downscale_mask(mask: &[u8], width: usize, height: usize) -> Vec<u8> {
    let (ow, oh) = (width / 2, height / 2);
    let mut out = vec![0u8; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let fg = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .filter(|(dy, dx)| mask[(2 * y + dy) * width + 2 * x + dx] != 0)
                .count();
            out[y * ow + x] = (fg >= 2) as u8;
        }
    }
    out
}

/// One sample prepared for the network, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    /// Planar 2x2 block sums; see [`sums_to_unit`].
    pub image_sums: Vec<u16>,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    pub joints: Vec<f64>,
    pub base: [f64; 3],
    pub label: usize,
    pub split: SplitTag,
}

impl PreparedSample {
    pub fn image(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], sums_to_unit(&self.image_sums))
            .expect("image sums match the stored size")
    }
}

/// Datasets of one robot family pooled and loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<PreparedSample>,
    pub n_joints: usize,
    pub n_types: usize,
}

/// Mini-batch of prepared inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, 3, 212, 256]`, values in [0, 1].
    pub images: Tensor,
    /// `B` masks of `212 * 256` values in {0, 1}.
    pub masks: Vec<Vec<u8>>,
    /// `[B, 3 N_j]`, meters.
    pub joints: Tensor,
    /// `[B, 3]`, meters.
    pub bases: Tensor,
    pub types: Vec<usize>,
}

impl Corpus {
    /// Loads every dataset under `dirs`. A single dataset keeps its stored
    /// split; several datasets are pooled and split again with a seed
    /// derived from their stored split seeds, so every command that loads
    /// the same directories sees the same split.
    pub fn load(dirs: &[PathBuf]) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::Config("no dataset directories given".into()));
        }
        let datasets = dirs.iter().map(|d| Dataset::load(d)).collect::<Result<Vec<_>>>()?;
        let n_joints = datasets[0].meta.n_joints;
        if let Some(d) = datasets.iter().find(|d| d.meta.n_joints != n_joints) {
            return Err(Error::Config(format!(
                "{} has {} joints, expected {n_joints}",
                d.root.display(),
                d.meta.n_joints
            )));
        }
        let n_types = datasets.iter().map(|d| d.meta.robot_type).max().unwrap_or(0) + 1;
        let split_seed = datasets
            .iter()
            .fold(0, |acc, d| derive_seed(acc, d.manifest.split_seed));

        let mut pooled = DatasetManifest {
            records: Vec::new(),
            robot_type: datasets[0].meta.robot_type,
            split_seed,
        };
        let mut origin = Vec::new();
        for (k, d) in datasets.iter().enumerate() {
            pooled.records.extend(d.manifest.records.iter().cloned());
            origin.extend(std::iter::repeat(k).take(d.manifest.records.len()));
        }
        pooled.check_unique()?;
        if datasets.len() > 1 {
            pooled = split(pooled, TRAIN_FRACTION, split_seed)?;
        }

        let mut samples = Vec::with_capacity(pooled.records.len());
        for (r, &k) in pooled.records.iter().zip(&origin) {
            let d = &datasets[k];
            samples.push(PreparedSample {
                id: r.id.clone(),
                image_sums: load_input_sums(&d.root, r)?,
                height: INPUT_HEIGHT,
                width: INPUT_WIDTH,
                mask: load_mask(&d.root, r)?,
                joints: r.joint_targets(),
                base: r.base_3d,
                label: d.meta.robot_type,
                split: r.split_tag,
            });
        }
        Ok(Self {
            samples,
            n_joints,
            n_types,
        })
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == tag).collect()
    }

    pub fn count(&self, tag: SplitTag) -> usize {
        self.samples.iter().filter(|s| s.split == tag).count()
    }

    /// Keeps all test samples and the first `n` train samples of a seeded
    /// permutation, so subsets for growing `n` are nested.
    pub fn train_subset(&self, n: usize, seed: u64) -> Result<Self> {
        let mut train = self.indices(SplitTag::Train);
        if n > train.len() {
            return Err(Error::InsufficientSamples {
                needed: n,
                available: train.len(),
            });
        }
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut keep: Vec<usize> = train[..n].to_vec();
        keep.extend(self.indices(SplitTag::Test));
        keep.sort_unstable();
        Ok(Self {
            samples: keep.iter().map(|&i| self.samples[i].clone()).collect(),
            n_joints: self.n_joints,
            n_types: self.n_types,
        })
    }

    /// Sample indices of `tag`, shuffled with `epoch_seed` and cut into
    /// batches; the last batch may be smaller.
    pub fn batch_plan(&self, tag: SplitTag, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut idx = self.indices(tag);
        if idx.is_empty() {
            return Err(Error::EmptySplit(format!("{tag:?}").to_lowercase()));
        }
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }

    pub fn batches(
        &self,
        tag: SplitTag,
        batch_size: usize,
        epoch_seed: u64,
    ) -> Result<impl Iterator<Item = Batch> + '_> {
        let plan = self.batch_plan(tag, batch_size, epoch_seed)?;
        Ok(plan.into_iter().map(move |idx| self.gather(&idx)))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let b = idx.len();
        let pick = |i: usize| &self.samples[i];
        let (h, w) = idx.first().map_or((INPUT_HEIGHT, INPUT_WIDTH), |&i| (pick(i).height, pick(i).width));
        let images = idx.iter().flat_map(|&i| sums_to_unit(&pick(i).image_sums)).collect();
        let joints = idx.iter().flat_map(|&i| pick(i).joints.iter().copied()).collect();
        let bases = idx.iter().flat_map(|&i| pick(i).base).collect();
        Batch {
            ids: idx.iter().map(|&i| pick(i).id.clone()).collect(),
            images: Tensor::new(vec![b, 3, h, w], images).expect("fixed sizes"),
            masks: idx.iter().map(|&i| pick(i).mask.clone()).collect(),
            joints: Tensor::new(vec![b, 3 * self.n_joints], joints).expect("fixed sizes"),
            bases: Tensor::new(vec![b, 3], bases).expect("fixed sizes"),
            types: idx.iter().map(|&i| pick(i).label).collect(),
        }
    }
}
