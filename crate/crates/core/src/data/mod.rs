//! Dataset ingestion, attribute annotation, batching and seeded splits.

pub mod attributes;
pub mod celeba;
pub mod idx;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use attributes::{validate_specs, AttributeKind, AttributeSpec};

use crate::manipulator::warp::{self, Padding};
use crate::manipulator::geometric::similarity_from_attributes;
use crate::nn::{Checkpoint, CheckpointMeta};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "SPA_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    #[serde(rename = "celeba")]
    CelebA,
    SyntheticObjects,
}

impl DatasetName {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::CelebA => "celeba",
            DatasetName::SyntheticObjects => "synthetic-objects",
        }
    }

    /// Background-appropriate padding for warps.
    pub fn padding(self) -> Padding {
        match self {
            DatasetName::CelebA => Padding::Border,
            _ => Padding::Zeros,
        }
    }

    fn supports_object_level(self) -> bool {
        matches!(self, DatasetName::CelebA | DatasetName::SyntheticObjects)
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashionmnist" => Ok(DatasetName::FashionMnist),
            "celeba" | "celeba-subset" => Ok(DatasetName::CelebA),
            "synthetic-objects" => Ok(DatasetName::SyntheticObjects),
            _ => Err(Error::UnknownDataset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Validation examples carved from the training archive (MNIST-like).
    pub val_size: usize,
    /// Number of CelebA images kept in the seeded subset.
    pub celeba_subset: usize,
    /// CelebA images are resized to `image_size × image_size`.
    pub image_size: usize,
    /// CelebA binary attribute used as the class label.
    pub label_attribute: String,
    /// Number of procedurally generated synthetic images.
    pub synthetic_count: usize,
    pub use_cache: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            val_size: 5000,
            celeba_subset: 20_000,
            image_size: 32,
            label_attribute: "Male".into(),
            synthetic_count: 6000,
            use_cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Channel-major pixels in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: usize,
    pub attributes: Vec<f64>,
}

/// A batch ready for the models: images `(B, C, H, W)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `(B, A)` attribute annotations in natural units.
    pub attributes: Tensor,
    /// Row indices into the split the batch came from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split `{s}`"))),
        }
    }
}

/// An immutable collection of examples stored as bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    attributes: Vec<f64>,
    source: Vec<usize>,
    shape: (usize, usize, usize),
    num_attributes: usize,
}

impl Split {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<usize>,
        attributes: Vec<f64>,
        source: Vec<usize>,
        shape: (usize, usize, usize),
        num_attributes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        let per = shape.0 * shape.1 * shape.2;
        if pixels.len() != n * per || attributes.len() != n * num_attributes || source.len() != n {
            return Err(Error::CorruptData("split buffers disagree on example count".into()));
        }
        Ok(Self { pixels, labels, attributes, source, shape, num_attributes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Indices into the raw archive each example came from.
    pub fn source_indices(&self) -> &[usize] {
        &self.source
    }

    fn per_image(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn example(&self, i: usize) -> Example {
        let per = self.per_image();
        Example {
            image: self.pixels[i * per..(i + 1) * per].iter().map(|&p| p as f32 / 255.0).collect(),
            label: self.labels[i],
            attributes: self.attributes[i * self.num_attributes..(i + 1) * self.num_attributes].to_vec(),
        }
    }

    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Batch> {
        let per = self.per_image();
        let (c, h, w) = self.shape;
        let mut px = Vec::with_capacity(indices.len() * per);
        let mut attrs = Vec::with_capacity(indices.len() * self.num_attributes);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Precondition(format!("example index {i} out of range {}", self.len())));
            }
            px.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| p as f32 / 255.0));
            attrs.extend_from_slice(&self.attributes[i * self.num_attributes..(i + 1) * self.num_attributes]);
            labels.push(self.labels[i]);
        }
        let dev = Device::Cpu;
        let images = Tensor::from_vec(px, (indices.len(), c, h, w), &dev)?.to_dtype(dtype)?;
        let attributes =
            Tensor::from_vec(attrs, (indices.len(), self.num_attributes), &dev)?.to_dtype(dtype)?;
        Ok(Batch { images, labels, attributes, indices: indices.to_vec() })
    }

    /// The first `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Split {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Split {
        let per = self.per_image();
        let a = self.num_attributes;
        let mut s = Split {
            pixels: Vec::with_capacity(indices.len() * per),
            labels: Vec::with_capacity(indices.len()),
            attributes: Vec::with_capacity(indices.len() * a),
            source: Vec::with_capacity(indices.len()),
            shape: self.shape,
            num_attributes: a,
        };
        for &i in indices {
            s.pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
            s.labels.push(self.labels[i]);
            s.attributes.extend_from_slice(&self.attributes[i * a..(i + 1) * a]);
            s.source.push(self.source[i]);
        }
        s
    }

    /// Same images with labels replaced (used by permutation checks).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Split> {
        if labels.len() != self.len() {
            return Err(Error::Precondition("label count differs from split size".into()));
        }
        Ok(Split { labels, ..self.clone() })
    }

    /// Deterministic batch order: a seeded permutation chunked into batches,
    /// or sequential order when `seed` is `None`.
    pub fn batch_order(&self, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
        batch_order(self.len(), batch_size, seed)
    }

    fn to_checkpoint(&self, fingerprint: &str) -> Checkpoint {
        let dev = Device::Cpu;
        let n = self.len();
        let (c, h, w) = self.shape;
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "images".to_string(),
            Tensor::from_vec(self.pixels.clone(), (n, c, h, w), &dev).expect("consistent split"),
        );
        tensors.insert(
            "labels".to_string(),
            Tensor::from_vec(self.labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), n, &dev)
                .expect("consistent split"),
        );
        tensors.insert(
            "source".to_string(),
            Tensor::from_vec(self.source.iter().map(|&l| l as u32).collect::<Vec<_>>(), n, &dev)
                .expect("consistent split"),
        );
        if self.num_attributes > 0 {
            tensors.insert(
                "attributes".to_string(),
                Tensor::from_vec(self.attributes.clone(), (n, self.num_attributes), &dev)
                    .expect("consistent split"),
            );
        }
        Checkpoint::new(
            CheckpointMeta {
                kind: "dataset-split".into(),
                profile: String::new(),
                config_hash: fingerprint.to_string(),
                extra: serde_json::json!({ "num_attributes": self.num_attributes }),
            },
            tensors,
        )
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Split> {
        ck.expect_kind("dataset-split")?;
        let get = |k: &str| {
            ck.tensors.get(k).ok_or_else(|| Error::CorruptData(format!("cached split lacks `{k}`")))
        };
        let images = get("images")?;
        let (n, c, h, w) = images.dims4()?;
        let num_attributes = ck.meta.extra["num_attributes"].as_u64().unwrap_or(0) as usize;
        let attributes = if num_attributes > 0 {
            get("attributes")?.flatten_all()?.to_vec1::<f64>()?
        } else {
            Vec::new()
        };
        let labels = get("labels")?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect();
        let source = get("source")?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect();
        let _ = n;
        Split::new(images.flatten_all()?.to_vec1::<u8>()?, labels, attributes, source, (c, h, w), num_attributes)
    }
}

pub fn batch_order(n: usize, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
    let order: Vec<usize> = match seed {
        Some(s) => rng::permutation(&mut rng::seeded(s), n),
        None => (0..n).collect(),
    };
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: DatasetName,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub num_classes: usize,
    pub attribute_specs: Vec<AttributeSpec>,
    pub seed: u64,
}

impl DatasetHandle {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.train.shape()
    }

    pub fn total_len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn padding(&self) -> Padding {
        self.name.padding()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetName,
    pub seed: u64,
    pub fingerprint: String,
    pub specs: Vec<AttributeSpec>,
    pub options: LoadOptions,
    pub num_classes: usize,
    pub shape: (usize, usize, usize),
    /// Raw-archive indices of each split's members, in split order.
    pub membership: BTreeMap<String, Vec<usize>>,
}

fn fingerprint(name: DatasetName, seed: u64, specs: &[AttributeSpec], opts: &LoadOptions) -> String {
    let mut o = opts.clone();
    o.use_cache = true;
    let payload = serde_json::json!({ "dataset": name, "seed": seed, "specs": specs, "options": o });
    let mut h = Sha256::new();
    h.update(payload.to_string().as_bytes());
    hex::encode(&h.finalize()[..12])
}

/// Root directory for datasets: `$SPA_DATA_ROOT`, else the nearest ancestor
/// `data/` directory of the working directory, else `./data`.
pub fn default_root() -> PathBuf {
    if let Ok(p) = std::env::var(DATA_ROOT_ENV) {
        return PathBuf::from(p);
    }
    if let Ok(cwd) = std::env::current_dir() {
        for dir in cwd.ancestors() {
            let cand = dir.join("data");
            if cand.join("mnist").is_dir() || cand.join("fashion-mnist").is_dir() {
                return cand;
            }
        }
    }
    PathBuf::from("data")
}

pub fn load_dataset(name: &str, root: &Path, specs: &[AttributeSpec], seed: u64) -> Result<DatasetHandle> {
    load_dataset_with(name.parse()?, root, specs, seed, &LoadOptions::default())
}

pub fn load_dataset_with(
    name: DatasetName,
    root: &Path,
    specs: &[AttributeSpec],
    seed: u64,
    opts: &LoadOptions,
) -> Result<DatasetHandle> {
    validate_specs(specs)?;
    for s in specs {
        if s.kind == AttributeKind::ObjectLevel && !name.supports_object_level() {
            return Err(Error::IncompatibleSpec(format!(
                "object-level attribute `{}` has no annotations in {name}",
                s.name
            )));
        }
    }
    let fp = fingerprint(name, seed, specs, opts);
    let dir = root.join(name.dir_name());
    if opts.use_cache {
        if let Some(h) = read_cache(&dir, &fp)? {
            return Ok(h);
        }
    }
    let handle = build(name, root, specs, seed, opts)?;
    if opts.use_cache {
        write_cache(&dir, &handle, &fp, opts)?;
    }
    Ok(handle)
}

fn geometric_annotations(specs: &[AttributeSpec], n: usize) -> Vec<f64> {
    let row: Vec<f64> = specs.iter().map(AttributeSpec::canonical).collect();
    row.iter().copied().cycle().take(n * specs.len()).collect()
}

fn build(name: DatasetName, root: &Path, specs: &[AttributeSpec], seed: u64, opts: &LoadOptions) -> Result<DatasetHandle> {
    let a = specs.len();
    let mut split_rng = rng::stream(seed, "split");
    match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let raw = root.join(name.dir_name()).join("raw");
            let (ntr, r, c, tr_px) = idx::read_images(&raw.join("train-images-idx3-ubyte"))?;
            let tr_lab = idx::read_labels(&raw.join("train-labels-idx1-ubyte"))?;
            let (nte, r2, c2, te_px) = idx::read_images(&raw.join("t10k-images-idx3-ubyte"))?;
            let te_lab = idx::read_labels(&raw.join("t10k-labels-idx1-ubyte"))?;
            if tr_lab.len() != ntr || te_lab.len() != nte || (r, c) != (r2, c2) {
                return Err(Error::CorruptData(format!("{name}: image/label archives disagree")));
            }
            if tr_lab.iter().chain(&te_lab).any(|&l| l >= 10) {
                return Err(Error::CorruptData(format!("{name}: label outside 0..10")));
            }
            let shape = (1, r, c);
            let full_train = Split::new(tr_px, tr_lab, geometric_annotations(specs, ntr), (0..ntr).collect(), shape, a)?;
            let test = Split::new(te_px, te_lab, geometric_annotations(specs, nte), (0..nte).collect(), shape, a)?;
            let perm = rng::permutation(&mut split_rng, ntr);
            let nval = opts.val_size.min(ntr);
            let val = full_train.subset(&perm[..nval]);
            let train = full_train.subset(&perm[nval..]);
            Ok(DatasetHandle { name, train, val, test, num_classes: 10, attribute_specs: specs.to_vec(), seed })
        }
        DatasetName::CelebA => {
            let raw = root.join("celeba").join("raw");
            let attr_path = raw.join(celeba::ATTR_FILE);
            let text = std::fs::read_to_string(&attr_path).map_err(|e| Error::io(&attr_path, e))?;
            let table = celeba::parse_attr_table(&text)?;
            let label_col = table.column(&opts.label_attribute).ok_or_else(|| {
                Error::CorruptData(format!("attribute `{}` not in {}", opts.label_attribute, celeba::ATTR_FILE))
            })?;
            let cols = specs
                .iter()
                .map(|s| match s.kind {
                    AttributeKind::ObjectLevel => table.column(&s.name).map(Some).ok_or_else(|| {
                        Error::IncompatibleSpec(format!("CelebA has no attribute `{}`", s.name))
                    }),
                    _ => Ok(None),
                })
                .collect::<Result<Vec<_>>>()?;
            let perm = rng::permutation(&mut split_rng, table.rows.len());
            let keep = &perm[..opts.celeba_subset.min(perm.len())];
            let size = opts.image_size;
            let shape = (3, size, size);
            let mut px = Vec::with_capacity(keep.len() * 3 * size * size);
            let mut labels = Vec::with_capacity(keep.len());
            let mut attrs = Vec::with_capacity(keep.len() * a);
            for &i in keep {
                let (file, vals) = &table.rows[i];
                px.extend(celeba::load_image(&raw.join(celeba::IMAGE_DIR).join(file), size)?);
                labels.push(usize::from(vals[label_col] > 0));
                for (s, col) in specs.iter().zip(&cols) {
                    attrs.push(match col {
                        Some(k) => if vals[*k] > 0 { s.hi } else { s.lo },
                        None => s.canonical(),
                    });
                }
            }
            let all = Split::new(px, labels, attrs, keep.to_vec(), shape, a)?;
            let (train, val, test) = three_way(&all);
            Ok(DatasetHandle { name, train, val, test, num_classes: 2, attribute_specs: specs.to_vec(), seed })
        }
        DatasetName::SyntheticObjects => {
            let mut gen = rng::stream(seed, "synthetic-objects");
            let samples = synthetic::generate(&mut gen, opts.synthetic_count);
            let n = samples.len();
            let mut px = Vec::with_capacity(n * synthetic::SIZE * synthetic::SIZE);
            let mut labels = Vec::with_capacity(n);
            let mut attrs = Vec::with_capacity(n * a);
            for s in &samples {
                px.extend_from_slice(&s.pixels);
                labels.push(s.label);
                for spec in specs {
                    attrs.push(match spec.kind {
                        AttributeKind::ObjectLevel => if s.bar { spec.hi } else { spec.lo },
                        _ => spec.canonical(),
                    });
                }
            }
            let all = Split::new(px, labels, attrs, (0..n).collect(), (1, synthetic::SIZE, synthetic::SIZE), a)?;
            let (train, val, test) = three_way(&all);
            Ok(DatasetHandle { name, train, val, test, num_classes: 2, attribute_specs: specs.to_vec(), seed })
        }
    }
}

/// 85 / 5 / 10 split of an already-shuffled collection.
fn three_way(all: &Split) -> (Split, Split, Split) {
    let n = all.len();
    let ntest = n / 10;
    let nval = n / 20;
    let idx: Vec<usize> = (0..n).collect();
    let test = all.subset(&idx[..ntest]);
    let val = all.subset(&idx[ntest..ntest + nval]);
    let train = all.subset(&idx[ntest + nval..]);
    (train, val, test)
}

fn unique_tmp(path: &Path) -> PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let k = COUNTER.fetch_add(1, Ordering::Relaxed);
    PathBuf::from(format!("{}.{}.{k}.tmp", path.display(), std::process::id()))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = unique_tmp(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_cache(dir: &Path, h: &DatasetHandle, fp: &str, opts: &LoadOptions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut membership = BTreeMap::new();
    for kind in SplitKind::ALL {
        let split = h.split(kind);
        atomic_write(&dir.join(format!("{}.safetensors", kind.as_str())), &split.to_checkpoint(fp).to_bytes()?)?;
        membership.insert(kind.as_str().to_string(), split.source_indices().to_vec());
    }
    let manifest = Manifest {
        dataset: h.name,
        seed: h.seed,
        fingerprint: fp.to_string(),
        specs: h.attribute_specs.clone(),
        options: opts.clone(),
        num_classes: h.num_classes,
        shape: h.shape(),
        membership,
    };
    atomic_write(&dir.join("manifest.json"), serde_json::to_string(&manifest)?.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text).ok())
}

fn read_cache(dir: &Path, fp: &str) -> Result<Option<DatasetHandle>> {
    let Some(m) = read_manifest(dir)? else { return Ok(None) };
    if m.fingerprint != fp {
        return Ok(None);
    }
    let mut splits = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let path = dir.join(format!("{}.safetensors", kind.as_str()));
        let Ok(ck) = Checkpoint::load(&path) else { return Ok(None) };
        // another writer may have replaced the file for a different config
        if ck.meta.config_hash != fp {
            return Ok(None);
        }
        let split = Split::from_checkpoint(&ck)?;
        if m.membership.get(kind.as_str()).map(Vec::as_slice) != Some(split.source_indices()) {
            return Ok(None);
        }
        splits.push(split);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Some(DatasetHandle {
        name: m.dataset,
        train,
        val,
        test,
        num_classes: m.num_classes,
        attribute_specs: m.specs,
        seed: m.seed,
    }))
}

/// Warps every image by an attribute value drawn uniformly from the spec's
/// range and returns the warped batch with the drawn values, which serve as
/// regression targets for the attribute predictor.
pub fn synthesize_attribute_batch(
    batch: &Batch,
    spec: &AttributeSpec,
    rng: &mut SeededRng,
) -> Result<(Tensor, Vec<f64>)> {
    synthesize_attribute_batch_with(batch, spec, rng, Padding::Zeros)
}

pub fn synthesize_attribute_batch_with(
    batch: &Batch,
    spec: &AttributeSpec,
    rng: &mut SeededRng,
    padding: Padding,
) -> Result<(Tensor, Vec<f64>)> {
    synthesize_joint(&batch.images, std::slice::from_ref(spec), rng, padding)
}

/// Multi-attribute form of [`synthesize_attribute_batch`]: draws one value
/// per spec per image and applies all of them in a single warp. Values are
/// returned row-major as `(B, A)`.
pub fn synthesize_joint(
    images: &Tensor,
    specs: &[AttributeSpec],
    rng: &mut SeededRng,
    padding: Padding,
) -> Result<(Tensor, Vec<f64>)> {
    for spec in specs {
        if !spec.kind.is_geometric() {
            return Err(Error::IncompatibleSpec(format!(
                "`{}` is object-level; no ground-truth generator exists for it",
                spec.name
            )));
        }
        spec.validate()?;
    }
    let b = images.dim(0)?;
    let mut values = Vec::with_capacity(b * specs.len());
    for _ in 0..b {
        for spec in specs {
            values.push(rng.random_range(spec.lo..=spec.hi));
        }
    }
    let alpha = Tensor::from_vec(values.clone(), (b, specs.len()), &Device::Cpu)?.to_dtype(images.dtype())?;
    let t = similarity_from_attributes(specs, &alpha)?;
    let out = crate::nn::ops::clamp_unit_straight_through(&warp::warp(images, &t, padding)?)?;
    Ok((out, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_mnist(root: &Path, n_train: usize, n_test: usize) {
        let raw = root.join("mnist").join("raw");
        std::fs::create_dir_all(&raw).unwrap();
        let px = |n: usize| (0..n * 28 * 28).map(|i| (i % 251) as u8).collect::<Vec<_>>();
        idx::write_images(&raw.join("train-images-idx3-ubyte"), 28, 28, &px(n_train));
        idx::write_labels(&raw.join("train-labels-idx1-ubyte"), &(0..n_train).map(|i| (i % 10) as u8).collect::<Vec<_>>());
        idx::write_images(&raw.join("t10k-images-idx3-ubyte"), 28, 28, &px(n_test));
        idx::write_labels(&raw.join("t10k-labels-idx1-ubyte"), &(0..n_test).map(|i| (i % 10) as u8).collect::<Vec<_>>());
    }

    fn small_opts() -> LoadOptions {
        LoadOptions { val_size: 20, ..LoadOptions::default() }
    }

    #[test]
    fn unknown_dataset_name_is_an_error() {
        assert!(matches!("cifar".parse::<DatasetName>(), Err(Error::UnknownDataset(_))));
        assert_eq!("FashionMNIST".parse::<DatasetName>().unwrap(), DatasetName::FashionMnist);
    }

    #[test]
    fn geometric_annotations_are_canonical() {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(dir.path(), 100, 30);
        let h = load_dataset_with(DatasetName::Mnist, dir.path(), &[AttributeSpec::rotation()], 1, &small_opts()).unwrap();
        assert_eq!(h.num_classes, 10);
        assert_eq!(h.total_len(), 130);
        assert_eq!((h.train.len(), h.val.len(), h.test.len()), (80, 20, 30));
        for i in 0..h.train.len() {
            assert_eq!(h.train.example(i).attributes, vec![0.0]);
        }
    }

    #[test]
    fn object_level_spec_on_mnist_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(dir.path(), 10, 10);
        let spec = AttributeSpec::object("smiling", -1.0, 1.0).unwrap();
        let r = load_dataset_with(DatasetName::Mnist, dir.path(), &[spec], 1, &small_opts());
        assert!(matches!(r, Err(Error::IncompatibleSpec(_))));
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let r = load_dataset_with(DatasetName::FashionMnist, dir.path(), &[], 1, &small_opts());
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn same_seed_gives_identical_membership_and_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(dir.path(), 100, 10);
        let specs = [AttributeSpec::rotation()];
        let no_cache = LoadOptions { use_cache: false, ..small_opts() };
        let a = load_dataset_with(DatasetName::Mnist, dir.path(), &specs, 7, &no_cache).unwrap();
        let b = load_dataset_with(DatasetName::Mnist, dir.path(), &specs, 7, &small_opts()).unwrap();
        assert_eq!(a.train.source_indices(), b.train.source_indices());
        assert!(dir.path().join("mnist/train.safetensors").exists());
        assert!(dir.path().join("mnist/manifest.json").exists());
        // second call is served from the cache
        let c = load_dataset_with(DatasetName::Mnist, dir.path(), &specs, 7, &small_opts()).unwrap();
        assert_eq!(b.train, c.train);
        assert_eq!(b.val, c.val);
        assert_eq!(b.test, c.test);
        let d = load_dataset_with(DatasetName::Mnist, dir.path(), &specs, 8, &small_opts()).unwrap();
        assert_ne!(a.train.source_indices(), d.train.source_indices());
    }

    #[test]
    fn splits_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(dir.path(), 100, 10);
        let h = load_dataset_with(DatasetName::Mnist, dir.path(), &[], 3, &small_opts()).unwrap();
        let mut seen: Vec<usize> = h.train.source_indices().iter().chain(h.val.source_indices()).copied().collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn batch_order_is_seeded() {
        assert_eq!(batch_order(50, 8, Some(3)), batch_order(50, 8, Some(3)));
        assert_ne!(batch_order(50, 8, Some(3)), batch_order(50, 8, Some(4)));
        let flat: Vec<usize> = batch_order(50, 8, Some(3)).concat();
        let mut s = flat.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(batch_order(5, 2, None), vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn synthetic_objects_carry_object_annotations() {
        let spec = AttributeSpec::object("bar", -1.0, 1.0).unwrap();
        let opts = LoadOptions { synthetic_count: 200, use_cache: false, ..LoadOptions::default() };
        let h = load_dataset_with(DatasetName::SyntheticObjects, Path::new("/nonexistent"), &[spec], 5, &opts).unwrap();
        assert_eq!(h.total_len(), 200);
        let vals: Vec<f64> = (0..h.train.len()).map(|i| h.train.example(i).attributes[0]).collect();
        assert!(vals.iter().all(|&v| v == -1.0 || v == 1.0));
        assert!(vals.contains(&1.0) && vals.contains(&-1.0));
    }

    #[test]
    fn object_level_synthesis_is_rejected() {
        let split = Split::new(vec![0; 4], vec![0], vec![], vec![0], (1, 2, 2), 0).unwrap();
        let b = split.batch(&[0], DType::F32).unwrap();
        let spec = AttributeSpec::object("smiling", -1.0, 1.0).unwrap();
        assert!(synthesize_attribute_batch(&b, &spec, &mut rng::seeded(0)).is_err());
    }
}
