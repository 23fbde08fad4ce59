//! Paired EEG/image data: a synthetic generator with known latent structure,
//! zero-shot splitting, and the manifest + binary-split container format.
//!
//! Each synthetic class owns a latent code in `[0, 1]^LATENT_DIM`. Images are
//! procedural renderings of the code (a striped, colored blob on a tinted
//! background); EEG trials are a fixed random linear projection of the code
//! onto channel topographies and ERP-like temporal bumps. Both modalities
//! then receive independent noise scaled by `noise`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 8;
pub const MANIFEST_FILE: &str = "manifest.json";

/// `B` stimulus pairs. Row `i` of `eeg` and `images` belong to `ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    /// `[B, C, T]`
    pub eeg: Tensor,
    /// `[B, 3, H, W]`, values in `[0, 1]`
    pub images: Tensor,
    pub ids: Vec<u64>,
    pub class_ids: Vec<usize>,
}

impl PairedBatch {
    pub fn new(eeg: Tensor, images: Tensor, ids: Vec<u64>, class_ids: Vec<usize>) -> Result<Self> {
        let b = ids.len();
        if eeg.rank() != 3 || images.rank() != 4 || images.shape()[1] != 3 {
            return Err(Error::Dimension(format!(
                "expected eeg [B, C, T] and images [B, 3, H, W], got {:?} and {:?}",
                eeg.shape(),
                images.shape()
            )));
        }
        if eeg.shape()[0] != b || images.shape()[0] != b || class_ids.len() != b {
            return Err(Error::Dimension(format!(
                "batch sizes disagree: eeg {}, images {}, ids {b}, classes {}",
                eeg.shape()[0],
                images.shape()[0],
                class_ids.len()
            )));
        }
        Ok(Self { eeg, images, ids, class_ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.eeg.shape()[1]
    }

    pub fn times(&self) -> usize {
        self.eeg.shape()[2]
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn select(&self, idx: &[usize]) -> PairedBatch {
        PairedBatch {
            eeg: self.eeg.select_rows(idx),
            images: self.images.select_rows(idx),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            class_ids: idx.iter().map(|&i| self.class_ids[i]).collect(),
        }
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.class_ids.iter().copied().collect()
    }

    /// Keeps the listed channels and the `[start, end)` time window.
    pub fn mask(&self, channels: &[usize], window: Option<(usize, usize)>) -> Result<PairedBatch> {
        let (c, t) = (self.channels(), self.times());
        let chans: Vec<usize> = if channels.is_empty() { (0..c).collect() } else { channels.to_vec() };
        let (t0, t1) = window.unwrap_or((0, t));
        if chans.iter().any(|&ch| ch >= c) || t1 > t || t0 >= t1 {
            return Err(Error::Config(format!(
                "mask channels {chans:?} / window [{t0}, {t1}) invalid for C={c}, T={t}"
            )));
        }
        let mut data = Vec::with_capacity(self.len() * chans.len() * (t1 - t0));
        for b in 0..self.len() {
            for &ch in &chans {
                let base = (b * c + ch) * t;
                data.extend_from_slice(&self.eeg.data()[base + t0..base + t1]);
            }
        }
        let eeg = Tensor::new([self.len(), chans.len(), t1 - t0], data)?;
        PairedBatch::new(eeg, self.images.clone(), self.ids.clone(), self.class_ids.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub times: usize,
    pub height: usize,
    pub width: usize,
    /// Repeated trials per stimulus stored on disk; averaged on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Split name to file name, relative to the manifest.
    pub splits: BTreeMap<String, String>,
    pub dims: Dims,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<String, PairedBatch>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&PairedBatch> {
        self.splits.get(name).ok_or_else(|| Error::Config(format!("dataset has no split {name:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub times: usize,
    pub image_size: usize,
    pub noise: f64,
    /// Backbone patch size the images must tile.
    pub patch: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { seed: 0, classes: 50, per_class: 20, channels: 17, times: 250, image_size: 32, noise: 0.1, patch: 8 }
    }
}

/// Generates `classes * per_class` pairs as a single split named `all`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.per_class < 1 {
        return Err(Error::Config("need at least 2 classes and 1 sample per class".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be nonnegative, got {}", cfg.noise)));
    }
    if cfg.patch == 0 || cfg.image_size % cfg.patch != 0 || cfg.image_size == 0 {
        return Err(Error::Config(format!(
            "image size {} is not divisible by patch size {}",
            cfg.image_size, cfg.patch
        )));
    }
    if cfg.channels == 0 || cfg.times == 0 {
        return Err(Error::Config("EEG needs at least one channel and one time point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents: Vec<[f64; LATENT_DIM]> = (0..cfg.classes)
        .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
        .collect();
    let mixing = EegMixing::random(cfg.channels, cfg.times, &mut rng);

    let n = cfg.classes * cfg.per_class;
    let (c, t, h) = (cfg.channels, cfg.times, cfg.image_size);
    let mut eeg = Vec::with_capacity(n * c * t);
    let mut images = Vec::with_capacity(n * 3 * h * h);
    let mut ids = Vec::with_capacity(n);
    let mut class_ids = Vec::with_capacity(n);
    for (class, z) in latents.iter().enumerate() {
        let clean_img = render_image(z, h);
        let clean_eeg = mixing.project(z);
        for r in 0..cfg.per_class {
            images.extend(clean_img.iter().map(|&p| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (p + cfg.noise * e).clamp(0.0, 1.0)
            }));
            eeg.extend(add_temporal_noise(&clean_eeg, c, t, cfg.noise, &mut rng));
            ids.push((class * cfg.per_class + r) as u64);
            class_ids.push(class);
        }
    }
    let batch = PairedBatch::new(Tensor::new([n, c, t], eeg)?, Tensor::new([n, 3, h, h], images)?, ids, class_ids)?;
    let manifest = DatasetManifest {
        splits: BTreeMap::from([("all".to_string(), "all.bin".to_string())]),
        dims: Dims { channels: c, times: t, height: h, width: h, repetitions: None },
        classes: cfg.classes,
        seed: Some(cfg.seed),
    };
    Ok(Dataset { manifest, splits: BTreeMap::from([("all".to_string(), batch)]) })
}

/// Fixed linear map from latent codes to `[C, T]` EEG.
struct EegMixing {
    channels: usize,
    times: usize,
    /// `[LATENT_DIM][C]`
    topography: Vec<Vec<f64>>,
    /// `[LATENT_DIM][T]`
    waveform: Vec<Vec<f64>>,
}

impl EegMixing {
    fn random<R: Rng + ?Sized>(channels: usize, times: usize, rng: &mut R) -> Self {
        let topography = (0..LATENT_DIM)
            .map(|_| (0..channels).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let waveform = (0..LATENT_DIM)
            .map(|_| {
                let latency = rng.random_range(0.15..0.85) * times as f64;
                let width = (0.04 + 0.04 * rng.random::<f64>()) * times as f64;
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (0..times)
                    .map(|ti| {
                        let d = (ti as f64 - latency) / width.max(1.0);
                        sign * (-0.5 * d * d).exp()
                    })
                    .collect()
            })
            .collect();
        Self { channels, times, topography, waveform }
    }

    fn project(&self, z: &[f64; LATENT_DIM]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels * self.times];
        for (j, &zj) in z.iter().enumerate() {
            let a = zj - 0.5;
            for c in 0..self.channels {
                let w = a * self.topography[j][c];
                let row = &mut out[c * self.times..(c + 1) * self.times];
                row.iter_mut().zip(&self.waveform[j]).for_each(|(o, s)| *o += w * s);
            }
        }
        out
    }
}

/// Unit-variance AR(1) noise along time, scaled by `noise`.
fn add_temporal_noise<R: Rng + ?Sized>(clean: &[f64], c: usize, t: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    const RHO: f64 = 0.8;
    let innov = (1.0 - RHO * RHO).sqrt();
    let mut out = clean.to_vec();
    for ch in 0..c {
        let mut state: f64 = StandardNormal.sample(rng);
        for ti in 0..t {
            if ti > 0 {
                let e: f64 = StandardNormal.sample(rng);
                state = RHO * state + innov * e;
            }
            out[ch * t + ti] += noise * state;
        }
    }
    out
}

/// Noise-free `[3, size, size]` rendering of a latent code.
pub fn render_image(z: &[f64; LATENT_DIM], size: usize) -> Vec<f64> {
    let s = size as f64;
    let (cx, cy) = ((0.2 + 0.6 * z[0]) * s, (0.2 + 0.6 * z[1]) * s);
    let radius = (0.12 + 0.2 * z[2]) * s;
    let color = [z[3], z[4], z[5]];
    let theta = std::f64::consts::PI * z[6];
    let bg = [0.1 + 0.3 * z[7], 0.15, 0.4 - 0.3 * z[7]];
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
            let mask = (-d2 / (2.0 * radius * radius)).exp();
            let stripe = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * (fx * ct + fy * st) / s).sin();
            for ch in 0..3 {
                let fg = color[ch] * (0.6 + 0.4 * stripe);
                out[(ch * size + y) * size + x] = (bg[ch] + mask * (fg - bg[ch])).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Sample indices of each zero-shot split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Holds out `n_test_classes` whole classes; the test split keeps one sample
/// per held-out class. Validation samples are drawn uniformly from the
/// remaining pool, so they share classes with training.
pub fn split_indices(class_ids: &[usize], n_test_classes: usize, n_val: usize, seed: u64) -> Result<SplitIndices> {
    let classes: Vec<usize> = class_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if n_test_classes >= classes.len() {
        return Err(Error::Config(format!(
            "cannot hold out {n_test_classes} of {} classes",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = classes.clone();
    shuffled.shuffle(&mut rng);
    let mut test_classes = shuffled[..n_test_classes].to_vec();
    test_classes.sort_unstable();
    let held: BTreeSet<usize> = test_classes.iter().copied().collect();

    let mut test = Vec::with_capacity(n_test_classes);
    for &c in &test_classes {
        let members: Vec<usize> = (0..class_ids.len()).filter(|&i| class_ids[i] == c).collect();
        test.push(members[rng.random_range(0..members.len())]);
    }
    let pool: Vec<usize> = (0..class_ids.len()).filter(|i| !held.contains(&class_ids[*i])).collect();
    if n_val + 2 > pool.len() {
        return Err(Error::Config(format!(
            "{} training-class samples cannot supply {n_val} validation samples and a training batch",
            pool.len()
        )));
    }
    let mut val_pos = sample(&mut rng, pool.len(), n_val).into_vec();
    val_pos.sort_unstable();
    let val: Vec<usize> = val_pos.iter().map(|&p| pool[p]).collect();
    let val_set: BTreeSet<usize> = val.iter().copied().collect();
    let train = pool.into_iter().filter(|i| !val_set.contains(i)).collect();
    Ok(SplitIndices { train, val, test, test_classes })
}

pub fn zero_shot_split(
    all: &PairedBatch,
    n_test_classes: usize,
    n_val: usize,
    seed: u64,
) -> Result<(PairedBatch, PairedBatch, PairedBatch)> {
    let idx = split_indices(&all.class_ids, n_test_classes, n_val, seed)?;
    Ok((all.select(&idx.train), all.select(&idx.val), all.select(&idx.test)))
}

/// Errors unless `test` shares no class with `train` or `val`.
pub fn check_zero_shot(train: &PairedBatch, val: &PairedBatch, test: &PairedBatch) -> Result<()> {
    let seen: BTreeSet<usize> = train.classes().union(&val.classes()).copied().collect();
    let overlap: Vec<usize> = test.classes().intersection(&seen).copied().collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("test classes {overlap:?} also appear in training data")))
    }
}

/// Synthetic generation followed by a zero-shot split into `train`/`val`/`test`.
pub fn synthetic_zero_shot(cfg: &SyntheticConfig, n_test_classes: usize, n_val: usize) -> Result<Dataset> {
    let base = generate_synthetic(cfg)?;
    let (train, val, test) = zero_shot_split(base.split("all")?, n_test_classes, n_val, cfg.seed)?;
    let mut manifest = base.manifest;
    manifest.splits = ["train", "val", "test"].iter().map(|s| (s.to_string(), format!("{s}.bin"))).collect();
    let splits = BTreeMap::from([("train".into(), train), ("val".into(), val), ("test".into(), test)]);
    Ok(Dataset { manifest, splits })
}

fn split_bytes(batch: &PairedBatch) -> Vec<u8> {
    let n = batch.len();
    let ids = Tensor::new([n], batch.ids.iter().map(|&i| i as f64).collect()).unwrap();
    let classes = Tensor::new([n], batch.class_ids.iter().map(|&c| c as f64).collect()).unwrap();
    let mut out = Vec::new();
    for t in [&batch.eeg, &batch.images, &ids, &classes] {
        t.write_to(&mut out).expect("Vec write");
    }
    out
}

/// Writes `manifest.json` plus one binary file per split into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, file) in &ds.manifest.splits {
        let batch = ds.split(name)?;
        fs::write(dir.join(file), split_bytes(batch))?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(())
}

/// Files `save_dataset` would write for this manifest.
pub fn dataset_files(manifest: &DatasetManifest, dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = manifest.splits.values().map(|f| dir.join(f)).collect();
    v.push(dir.join(MANIFEST_FILE));
    v
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut splits = BTreeMap::new();
    for (name, file) in &manifest.splits {
        let bytes = fs::read(dir.join(file))?;
        splits.insert(name.clone(), decode_split(&bytes, &manifest.dims)?);
    }
    Ok(Dataset { manifest, splits })
}

fn decode_split(bytes: &[u8], dims: &Dims) -> Result<PairedBatch> {
    let mut pos = 0usize;
    let mut next = |what: &str| -> Result<(u64, Tensor)> {
        let start = pos as u64;
        if pos >= bytes.len() {
            return Err(Error::Format { offset: start, msg: format!("missing {what} tensor") });
        }
        Ok((start, Tensor::decode(bytes, &mut pos)?))
    };
    let (eeg_at, eeg) = next("eeg")?;
    let (img_at, images) = next("image")?;
    let (id_at, ids) = next("id")?;
    let (cls_at, classes) = next("class")?;
    if pos != bytes.len() {
        return Err(Error::Format { offset: pos as u64, msg: "trailing bytes after split".into() });
    }
    let n = ids.numel();
    let mismatch = |offset: u64, what: &str, got: &[usize], want: &[usize]| Error::Format {
        offset,
        msg: format!("{what} shape {got:?} does not match manifest {want:?}"),
    };
    let eeg = match dims.repetitions {
        Some(r) => {
            let want = [n, r, dims.channels, dims.times];
            if eeg.shape() != want {
                return Err(mismatch(eeg_at, "eeg", eeg.shape(), &want));
            }
            average_repetitions(&eeg)?
        }
        None => {
            let want = [n, dims.channels, dims.times];
            if eeg.shape() != want {
                return Err(mismatch(eeg_at, "eeg", eeg.shape(), &want));
            }
            eeg
        }
    };
    let want = [n, 3, dims.height, dims.width];
    if images.shape() != want {
        return Err(mismatch(img_at, "image", images.shape(), &want));
    }
    if ids.rank() != 1 {
        return Err(mismatch(id_at, "id", ids.shape(), &[n]));
    }
    if classes.shape() != [n] {
        return Err(mismatch(cls_at, "class", classes.shape(), &[n]));
    }
    let as_int = |t: &Tensor, at: u64| -> Result<Vec<u64>> {
        t.data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                    Ok(v as u64)
                } else {
                    Err(Error::Format { offset: at, msg: format!("non-integer identifier {v}") })
                }
            })
            .collect()
    };
    let ids = as_int(&ids, id_at)?;
    let class_ids = as_int(&classes, cls_at)?.into_iter().map(|c| c as usize).collect();
    PairedBatch::new(eeg, images, ids, class_ids)
}

/// Mean over the repetition axis of `[N, R, C, T]`.
pub fn average_repetitions(eeg: &Tensor) -> Result<Tensor> {
    let s = eeg.shape();
    if s.len() != 4 || s[1] == 0 {
        return Err(Error::Dimension(format!("expected [N, R, C, T], got {s:?}")));
    }
    let (n, r, ct) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; n * ct];
    for i in 0..n {
        let dst = &mut out[i * ct..(i + 1) * ct];
        for rep in 0..r {
            let src = &eeg.data()[(i * r + rep) * ct..(i * r + rep + 1) * ct];
            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
        }
        dst.iter_mut().for_each(|d| *d /= r as f64);
    }
    Tensor::new([n, s[2], s[3]], out)
}
