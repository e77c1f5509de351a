//! Dataset generation, splits and the binary dataset file.
//!
//! File layout (little endian):
//!
//! ```text
//! "GPATDATA" | version u32 | manifest_len u32 | manifest JSON | manifest crc32 u32
//! | sample_count u32 | { block_len u64 | block | block crc32 u32 } * sample_count
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_assembly, nonexact_substitute, AssemblySample, DataError, PrimitiveKind, SampleConfig, Template, Variant,
};
use crate::geometry::{PointCloud, Pose, Rotation};

pub const DATASET_MAGIC: &[u8; 8] = b"GPATDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Templates for the train/val/test splits, used round-robin.
    pub templates: Vec<Template>,
    /// Templates withheld from training; their samples form the unseen split.
    pub unseen_templates: Vec<Template>,
    pub count: usize,
    pub unseen_count: usize,
    pub points: SampleConfig,
    pub nonexact_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            templates: Template::ALL.to_vec(),
            unseen_templates: Vec::new(),
            count: 100,
            unseen_count: 0,
            points: SampleConfig::DESK,
            nonexact_fraction: 0.0,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unseen,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unseen" => Ok(Split::Unseen),
            _ => Err(format!("unknown split '{s}' (train, val, test, unseen)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub unseen: Vec<String>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Unseen => &self.unseen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub n_target: usize,
    pub n_part: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub splits: Splits,
    /// Samples per template name.
    pub census: BTreeMap<String, usize>,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<AssemblySample>,
}

impl Dataset {
    /// Samples of a split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&AssemblySample> {
        let wanted: std::collections::HashSet<&str> =
            self.manifest.splits.ids(split).iter().map(|s| s.as_str()).collect();
        self.samples.iter().filter(|s| wanted.contains(s.sample_id.as_str())).collect()
    }

    pub fn empty(config: DatasetConfig) -> Self {
        let manifest = DatasetManifest {
            schema_version: DATASET_VERSION,
            n_target: config.points.n_target,
            n_part: config.points.n_part,
            sample_count: 0,
            seed: config.seed,
            splits: Splits::default(),
            census: BTreeMap::new(),
            config,
        };
        Dataset { manifest, samples: Vec::new() }
    }
}

/// Per-sample generator: the dataset seed on stream `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates every sample (in parallel, order-independent) and assigns splits.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset, DataError> {
    if config.count > 0 && config.templates.is_empty() {
        return Err(DataError::InvalidSpec("no templates given".into()));
    }
    if config.unseen_count > 0 && config.unseen_templates.is_empty() {
        return Err(DataError::InvalidSpec("unseen samples requested without unseen templates".into()));
    }
    if !(0.0..=1.0).contains(&config.nonexact_fraction) {
        return Err(DataError::InvalidSpec("nonexact fraction must lie in [0, 1]".into()));
    }
    if config.val_fraction < 0.0 || config.test_fraction < 0.0 || config.val_fraction + config.test_fraction > 1.0 {
        return Err(DataError::InvalidSpec("val and test fractions must be non-negative and sum to at most 1".into()));
    }
    let total = config.count + config.unseen_count;
    let jobs: Vec<(usize, Template)> = (0..total)
        .map(|i| {
            let t = if i < config.count {
                config.templates[i % config.templates.len()]
            } else {
                let j = i - config.count;
                config.unseen_templates[j % config.unseen_templates.len()]
            };
            (i, t)
        })
        .collect();
    let samples: Vec<AssemblySample> = jobs
        .par_iter()
        .map(|&(i, t)| {
            let mut rng = sample_rng(config.seed, i as u64);
            let id = format!("{t}-{i:05}");
            let s = generate_assembly(t, &mut rng, &config.points, &id)?;
            if rng.gen::<f64>() < config.nonexact_fraction {
                nonexact_substitute(&s, &mut rng)
            } else {
                Ok(s)
            }
        })
        .collect::<Result<_, _>>()?;

    let mut seen: Vec<usize> = (0..config.count).collect();
    seen.shuffle(&mut sample_rng(config.seed, u64::MAX));
    let n_val = (config.count as f64 * config.val_fraction).round() as usize;
    let n_test = ((config.count as f64 * config.test_fraction).round() as usize).min(config.count - n_val);
    let mut which = vec![Split::Train; total];
    for &i in &seen[..n_val] {
        which[i] = Split::Val;
    }
    for &i in &seen[n_val..n_val + n_test] {
        which[i] = Split::Test;
    }
    for w in which.iter_mut().skip(config.count) {
        *w = Split::Unseen;
    }
    let mut splits = Splits::default();
    let mut census = BTreeMap::new();
    for (s, w) in samples.iter().zip(&which) {
        let list = match w {
            Split::Train => &mut splits.train,
            Split::Val => &mut splits.val,
            Split::Test => &mut splits.test,
            Split::Unseen => &mut splits.unseen,
        };
        list.push(s.sample_id.clone());
        *census.entry(s.template.to_string()).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_VERSION,
        n_target: config.points.n_target,
        n_part: config.points.n_part,
        sample_count: total,
        seed: config.seed,
        splits,
        census,
        config: config.clone(),
    };
    Ok(Dataset { manifest, samples })
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(u32::try_from(v).expect("field fits u32")).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn cloud(&mut self, c: &PointCloud) {
        self.u32(c.len());
        for p in c.points() {
            p.iter().for_each(|v| self.f64(*v));
        }
    }
    fn rotation(&mut self, r: &Rotation) {
        r.matrix().iter().flatten().for_each(|v| self.f64(*v));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(DataError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, DataError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DataError::Corrupt("invalid utf-8".into()))
    }
    fn vec3(&mut self) -> Result<[f64; 3], DataError> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
    fn cloud(&mut self) -> Result<PointCloud, DataError> {
        let n = self.u32()?;
        if n.saturating_mul(24) > self.buf.len() - self.pos {
            return Err(DataError::Truncated);
        }
        let pts = (0..n).map(|_| self.vec3()).collect::<Result<Vec<_>, _>>()?;
        Ok(PointCloud::new(pts)?)
    }
    fn rotation(&mut self) -> Result<Rotation, DataError> {
        let m = [self.vec3()?, self.vec3()?, self.vec3()?];
        Rotation::new(m).map_err(|e| DataError::Corrupt(e.to_string()))
    }
}

fn encode_sample(s: &AssemblySample) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.str(&s.sample_id);
    e.str(s.template.name());
    e.u8(match s.variant {
        Variant::Exact => 0,
        Variant::Nonexact => 1,
    });
    e.rotation(&s.target_orientation);
    e.cloud(&s.target);
    e.u32(s.parts.len());
    for i in 0..s.parts.len() {
        e.cloud(&s.parts[i]);
        e.str(&s.part_types[i]);
        e.u8(match s.part_kinds[i] {
            PrimitiveKind::Box => 0,
            PrimitiveKind::Sphere => 1,
        });
        e.rotation(&s.gt_poses[i].rotation);
        s.gt_poses[i].translation.iter().for_each(|v| e.f64(*v));
    }
    s.gt_labels.iter().for_each(|&l| e.u32(l));
    e.u32(s.equivalence_classes.len());
    for c in &s.equivalence_classes {
        e.u32(c.len());
        c.iter().for_each(|&i| e.u32(i));
    }
    e.0
}

fn decode_sample(buf: &[u8]) -> Result<AssemblySample, DataError> {
    let mut d = Dec { buf, pos: 0 };
    let sample_id = d.str()?;
    let template: Template = d.str()?.parse()?;
    let variant = match d.u8()? {
        0 => Variant::Exact,
        1 => Variant::Nonexact,
        v => return Err(DataError::Corrupt(format!("variant tag {v}"))),
    };
    let target_orientation = d.rotation()?;
    let target = d.cloud()?;
    let n = d.u32()?;
    let (mut parts, mut part_types, mut part_kinds, mut gt_poses) = (vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        parts.push(d.cloud()?);
        part_types.push(d.str()?);
        part_kinds.push(match d.u8()? {
            0 => PrimitiveKind::Box,
            1 => PrimitiveKind::Sphere,
            v => return Err(DataError::Corrupt(format!("kind tag {v}"))),
        });
        let r = d.rotation()?;
        gt_poses.push(Pose::new(r, d.vec3()?));
    }
    let gt_labels = (0..target.len()).map(|_| d.u32()).collect::<Result<Vec<_>, _>>()?;
    let n_classes = d.u32()?;
    let mut equivalence_classes = Vec::new();
    for _ in 0..n_classes {
        let len = d.u32()?;
        equivalence_classes.push((0..len).map(|_| d.u32()).collect::<Result<Vec<_>, _>>()?);
    }
    if d.pos != buf.len() {
        return Err(DataError::Corrupt("trailing bytes in sample block".into()));
    }
    let s = AssemblySample {
        sample_id,
        template,
        variant,
        target,
        parts,
        part_types,
        part_kinds,
        gt_labels,
        gt_poses,
        equivalence_classes,
        target_orientation,
    };
    s.validate()?;
    Ok(s)
}

pub fn write_dataset<W: Write>(out: &mut W, dataset: &Dataset) -> Result<(), DataError> {
    if dataset.manifest.sample_count != dataset.samples.len() {
        return Err(DataError::Corrupt("manifest sample count differs from samples".into()));
    }
    let manifest = serde_json::to_vec(&dataset.manifest)?;
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&(manifest.len() as u32).to_le_bytes())?;
    out.write_all(&manifest)?;
    out.write_all(&crc32fast::hash(&manifest).to_le_bytes())?;
    out.write_all(&(dataset.samples.len() as u32).to_le_bytes())?;
    for s in &dataset.samples {
        let block = encode_sample(s);
        out.write_all(&(block.len() as u64).to_le_bytes())?;
        out.write_all(&block)?;
        out.write_all(&crc32fast::hash(&block).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a whole dataset; any integrity failure rejects the file entirely.
pub fn read_dataset<R: Read>(input: &mut R) -> Result<Dataset, DataError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut d = Dec { buf: &buf, pos: 0 };
    if buf.len() < 8 {
        return Err(if DATASET_MAGIC.starts_with(&buf) { DataError::Truncated } else { DataError::BadMagic });
    }
    if d.take(8)? != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = d.u32()? as u32;
    if version != DATASET_VERSION {
        return Err(DataError::VersionMismatch { found: version, expected: DATASET_VERSION });
    }
    let mlen = d.u32()?;
    let mbytes = d.take(mlen)?;
    if crc32fast::hash(mbytes) != d.u32()? as u32 {
        return Err(DataError::Checksum("manifest".into()));
    }
    let manifest: DatasetManifest = serde_json::from_slice(mbytes)?;
    let count = d.u32()?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = usize::try_from(d.u64()?).map_err(|_| DataError::Truncated)?;
        let block = d.take(len)?;
        if crc32fast::hash(block) != d.u32()? as u32 {
            return Err(DataError::Checksum(format!("sample block {i}")));
        }
        samples.push(decode_sample(block)?);
    }
    if d.pos != buf.len() {
        return Err(DataError::Corrupt("trailing bytes after last sample".into()));
    }
    if manifest.sample_count != samples.len() {
        return Err(DataError::Corrupt("manifest sample count differs from file".into()));
    }
    Ok(Dataset { manifest, samples })
}
