//! Synthetic turntable dataset: generation, instance-disjoint splitting,
//! and a fixed binary file format.
//!
//! A dataset is the full cross product category x instance x background x
//! rotation x azimuth. Instance identity is physical: one instance keeps
//! its jittered glyph across every view and background, which is what makes
//! the instance-disjoint train/test split meaningful. Generation is a pure
//! function of [`GenConfig`]; records may be produced in parallel because
//! every record derives its content from the config seed and its own
//! indices alone.

use crate::graph::Batch;
use crate::rng::{derive_named, Rng};
use crate::shapes::{background_texture, build_shape, rasterize, ShapeGeom, ShapeSet, View};
use crate::tensor::{Real, Tensor};
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic; not a dataset file")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("file truncated in record {0}")]
    Truncated(usize),
    #[error("header declares {declared} records but the file holds more")]
    TrailingData { declared: u64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Generation parameters. `poses()` is always `n_rot * n_az`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub categories: usize,
    pub n_rot: usize,
    pub n_az: usize,
    /// Instances per category.
    pub instances: usize,
    /// Background textures in the shared pool; every instance is rendered
    /// over each of them.
    pub backgrounds: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub shape_set: ShapeSet,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            categories: 10,
            n_rot: 8,
            n_az: 6,
            instances: 8,
            backgrounds: 3,
            height: 32,
            width: 32,
            channels: 1,
            shape_set: ShapeSet::A,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn poses(&self) -> usize {
        self.n_rot * self.n_az
    }

    pub fn record_count(&self) -> usize {
        self.categories * self.instances * self.backgrounds * self.poses()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("categories", self.categories),
            ("n_rot", self.n_rot),
            ("n_az", self.n_az),
            ("instances", self.instances),
            ("backgrounds", self.backgrounds),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DataError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.categories > ShapeSet::COUNT {
            return Err(DataError::InvalidConfig(format!(
                "at most {} categories per shape set, got {}",
                ShapeSet::COUNT,
                self.categories
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(DataError::InvalidConfig(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        for (name, v) in [
            ("poses", self.poses()),
            ("instances", self.instances),
            ("backgrounds", self.backgrounds),
            ("categories", self.categories),
        ] {
            if v > u16::MAX as usize {
                return Err(DataError::InvalidConfig(format!(
                    "{name} must fit in 16 bits, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Pose label from its grid cell: `rot * n_az + az`.
pub fn pose_index(rot: usize, az: usize, n_az: usize) -> usize {
    rot * n_az + az
}

/// One image with its labels. Pixels are channel-major `[C][H][W]` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Vec<f32>,
    pub category: u16,
    pub pose: u16,
    pub instance: u16,
    pub background: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub categories: u32,
    pub poses: u32,
    pub n_rot: u32,
    pub n_az: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

impl DatasetMeta {
    pub fn pixels(&self) -> usize {
        (self.channels * self.height * self.width) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Assembles the given records into an NCHW batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Batch<T>, DataError> {
        if indices.is_empty() {
            return Err(DataError::Invalid("empty batch".into()));
        }
        let px = self.meta.pixels();
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut categories = Vec::with_capacity(indices.len());
        let mut poses = Vec::with_capacity(indices.len());
        for &i in indices {
            let rec = self
                .records
                .get(i)
                .ok_or_else(|| DataError::Invalid(format!("record index {i} out of range")))?;
            data.extend(rec.image.iter().map(|&v| T::from_f64(v as f64)));
            categories.push(rec.category as u32);
            poses.push(rec.pose as u32);
        }
        let images = Tensor::from_vec(
            &[
                indices.len(),
                self.meta.channels as usize,
                self.meta.height as usize,
                self.meta.width as usize,
            ],
            data,
        )?;
        Ok(Batch {
            images,
            categories,
            poses,
        })
    }
}

/// Renders the full cross product for `config`.
///
/// Record order is fixed: category, then instance, then background, then
/// rotation, then azimuth, innermost last. Glyph jitter depends only on
/// (seed, category, instance) and textures only on (seed, background), so
/// parallel generation is byte-identical to serial.
pub fn generate(config: &GenConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let (h, w, c) = (config.height, config.width, config.channels);
    let geoms: Vec<ShapeGeom> = (0..config.categories * config.instances)
        .map(|i| {
            let mut rng = Rng::new(derive_named(config.seed, "shape", i as u64));
            build_shape(
                config.shape_set,
                i / config.instances,
                &mut rng,
            )
        })
        .collect();
    let textures: Vec<Vec<f32>> = (0..config.backgrounds)
        .map(|b| {
            let mut rng = Rng::new(derive_named(config.seed, "background", b as u64));
            let mut px = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                px.extend(background_texture(h, w, &mut rng));
            }
            px
        })
        .collect();

    let poses = config.poses();
    let per_bg = poses;
    let per_inst = config.backgrounds * per_bg;
    let per_cat = config.instances * per_inst;
    let total = config.record_count();

    let records: Vec<SampleRecord> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let cat = idx / per_cat;
            let inst = idx % per_cat / per_inst;
            let bg = idx % per_inst / per_bg;
            let pose = idx % per_bg;
            let (rot, az) = (pose / config.n_az, pose % config.n_az);
            let geom = &geoms[cat * config.instances + inst];
            let texture = &textures[bg];
            let view = View::from_pose(rot, az, config.n_rot, config.n_az);
            let mut image = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                image.extend(rasterize(
                    geom,
                    h,
                    w,
                    view,
                    &texture[ch * h * w..(ch + 1) * h * w],
                ));
            }
            SampleRecord {
                image,
                category: cat as u16,
                pose: pose as u16,
                instance: inst as u16,
                background: bg as u16,
            }
        })
        .collect();

    Ok(Dataset {
        meta: DatasetMeta {
            categories: config.categories as u32,
            poses: poses as u32,
            n_rot: config.n_rot as u32,
            n_az: config.n_az as u32,
            height: h as u32,
            width: w as u32,
            channels: c as u32,
        },
        records,
    })
}

/// Splits by object instance within each category: a seeded shuffle of each
/// category's instance ids, the first `ceil(fraction * n)` going to train.
/// No instance appears on both sides, so test objects are never seen in
/// training.
pub fn split_by_instance(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let k = dataset.meta.categories as usize;
    let mut instances: Vec<Vec<u16>> = vec![Vec::new(); k];
    for rec in &dataset.records {
        let cat = rec.category as usize;
        if cat >= k {
            return Err(DataError::Invalid(format!(
                "record category {cat} outside header range {k}"
            )));
        }
        if !instances[cat].contains(&rec.instance) {
            instances[cat].push(rec.instance);
        }
    }
    // Membership table: train_instance[cat] holds this category's train ids.
    let mut train_ids: Vec<Vec<u16>> = Vec::with_capacity(k);
    for (cat, ids) in instances.iter_mut().enumerate() {
        ids.sort_unstable();
        let n = ids.len();
        let n_train = (train_fraction * n as f64).ceil() as usize;
        if n == 0 || n_train >= n {
            return Err(DataError::Invalid(format!(
                "category {cat}: {n} instances leave no test split at fraction {train_fraction}"
            )));
        }
        let mut rng = Rng::new(derive_named(seed, "split", cat as u64));
        rng.shuffle(ids);
        train_ids.push(ids[..n_train].to_vec());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in &dataset.records {
        if train_ids[rec.category as usize].contains(&rec.instance) {
            train.push(rec.clone());
        } else {
            test.push(rec.clone());
        }
    }
    Ok((
        Dataset {
            meta: dataset.meta,
            records: train,
        },
        Dataset {
            meta: dataset.meta,
            records: test,
        },
    ))
}

const MAGIC: [u8; 4] = *b"WWDS";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Writes the dataset: a fixed header (magic, version, label-space sizes,
/// geometry, record count), then packed records, everything little-endian.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let m = &dataset.meta;
    for v in [m.categories, m.poses, m.n_rot, m.n_az, m.height, m.width, m.channels] {
        write_u32(&mut w, v)?;
    }
    w.write_all(&(dataset.records.len() as u64).to_le_bytes())?;
    let px = m.pixels();
    for (i, rec) in dataset.records.iter().enumerate() {
        if rec.image.len() != px {
            return Err(DataError::Invalid(format!(
                "record {i} has {} pixels, header implies {px}",
                rec.image.len()
            )));
        }
        for v in [rec.category, rec.pose, rec.instance, rec.background] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &rec.image {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DataError::BadVersion(version));
    }
    let meta = DatasetMeta {
        categories: read_u32(&mut r)?,
        poses: read_u32(&mut r)?,
        n_rot: read_u32(&mut r)?,
        n_az: read_u32(&mut r)?,
        height: read_u32(&mut r)?,
        width: read_u32(&mut r)?,
        channels: read_u32(&mut r)?,
    };
    if meta.poses != meta.n_rot * meta.n_az {
        return Err(DataError::Invalid(format!(
            "header poses {} != n_rot {} * n_az {}",
            meta.poses, meta.n_rot, meta.n_az
        )));
    }
    let mut cb = [0u8; 8];
    r.read_exact(&mut cb)?;
    let count = u64::from_le_bytes(cb);
    let px = meta.pixels();
    let mut records = Vec::with_capacity(count as usize);
    let mut pixel_bytes = vec![0u8; px * 4];
    for i in 0..count as usize {
        let truncated = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                DataError::Truncated(i)
            } else {
                DataError::Io(e)
            }
        };
        let category = read_u16(&mut r).map_err(truncated)?;
        let pose = read_u16(&mut r).map_err(truncated)?;
        let instance = read_u16(&mut r).map_err(truncated)?;
        let background = read_u16(&mut r).map_err(truncated)?;
        if category as u32 >= meta.categories || pose as u32 >= meta.poses {
            return Err(DataError::Invalid(format!(
                "record {i}: labels ({category}, {pose}) outside header ranges"
            )));
        }
        r.read_exact(&mut pixel_bytes).map_err(truncated)?;
        let image = pixel_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(SampleRecord {
            image,
            category,
            pose,
            instance,
            background,
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DataError::TrailingData { declared: count });
    }
    Ok(Dataset { meta, records })
}

/// Exports one record as PGM (1 channel) or PPM (3 channels) for eyeballing.
pub fn write_image_pnm(path: &Path, meta: &DatasetMeta, image: &[f32]) -> Result<(), DataError> {
    let (h, w, c) = (
        meta.height as usize,
        meta.width as usize,
        meta.channels as usize,
    );
    if image.len() != c * h * w {
        return Err(DataError::Invalid(format!(
            "image has {} values, expected {}",
            image.len(),
            c * h * w
        )));
    }
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = BufWriter::new(File::create(path)?);
    match c {
        1 => {
            write!(out, "P5\n{w} {h}\n255\n")?;
            let bytes: Vec<u8> = image.iter().map(|&v| quantize(v)).collect();
            out.write_all(&bytes)?;
        }
        3 => {
            write!(out, "P6\n{w} {h}\n255\n")?;
            let plane = h * w;
            let mut bytes = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for ch in 0..3 {
                    bytes.push(quantize(image[ch * plane + i]));
                }
            }
            out.write_all(&bytes)?;
        }
        other => {
            return Err(DataError::Invalid(format!(
                "cannot export {other}-channel image as PNM"
            )))
        }
    }
    out.flush()?;
    Ok(())
}
