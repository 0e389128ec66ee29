//! Synthetic datasets, single-stage orthonormal Haar DWT, stratified splits
//! and the versioned on-disk dataset container.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::denoiser::GaussianClassModel;
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"DFDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Present for Gaussian datasets so the oracle denoiser can be rebuilt.
    pub gaussian_model: Option<GaussianClassModel>,
}

/// Labeled image set. Images are (count, channels, H, W) floats in [-1, 1]
/// (Gaussian datasets may exceed the range unless clipping is requested).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.class_names.len()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.images.dim();
        (d.1, d.2, d.3)
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Select a subset by index, preserving metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (c, h, w) = self.image_shape();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images.slice_mut(s![row, .., .., ..]).assign(&self.images.slice(s![i, .., .., ..]));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, meta: self.meta.clone() }
    }

    /// FNV-1a over the image payload and labels; used to tie checkpoints to
    /// the dataset they were trained on.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut mix = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for v in self.images.iter() {
            for b in (*v as f32).to_le_bytes() {
                mix(b);
            }
        }
        for &l in &self.labels {
            for b in (l as u32).to_le_bytes() {
                mix(b);
            }
        }
        hash
    }
}

/// Draw per-class diagonal-Gaussian samples. Clipping to [-1,1] is optional
/// and off by default so oracle tests keep exact Gaussianity.
pub fn generate_gaussian_dataset(
    model: &GaussianClassModel,
    n_per_class: usize,
    seed: u64,
    clip: bool,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Data("n_per_class must be >= 1".into()));
    }
    let (c, h, w) = model.shape;
    let dim = c * h * w;
    let num_classes = model.num_classes();
    let n = n_per_class * num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Array4::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for i in 0..n_per_class {
            let row = class * n_per_class + i;
            let mut flat = images.slice_mut(s![row, .., .., ..]);
            let flat = flat.as_slice_mut().unwrap();
            for j in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                let mut v = model.means[[class, j]] + model.variances[[class, j]].sqrt() * e;
                if clip {
                    v = v.clamp(-1.0, 1.0);
                }
                flat[j] = v;
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        images,
        labels,
        meta: DatasetMeta {
            generator: "gaussian".into(),
            seed,
            class_names: (0..num_classes).map(|i| format!("class{i}")).collect(),
            gaussian_model: Some(model.clone()),
        },
    })
}

/// Two-class shape task: class 0 is a filled blob, class 1 is a ring, both
/// with randomized center, size and intensity over a noisy background.
pub fn generate_shapes_dataset(resolution: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if ![8usize, 16, 32].contains(&resolution) {
        return Err(Error::Data(format!("resolution must be 8, 16 or 32, got {resolution}")));
    }
    if n_per_class == 0 {
        return Err(Error::Data("n_per_class must be >= 1".into()));
    }
    let n = 2 * n_per_class;
    let r = resolution as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Array4::zeros((n, 1, resolution, resolution));
    let mut labels = Vec::with_capacity(n);
    for class in 0..2usize {
        for i in 0..n_per_class {
            let row = class * n_per_class + i;
            let cx = r / 2.0 + rng.gen_range(-r / 8.0..r / 8.0);
            let cy = r / 2.0 + rng.gen_range(-r / 8.0..r / 8.0);
            let outer = rng.gen_range(r * 0.28..r * 0.42);
            let inner = outer * rng.gen_range(0.45..0.6);
            let intensity = rng.gen_range(0.6..1.0);
            let edge = 0.75; // soft edge width in pixels
            for y in 0..resolution {
                for x in 0..resolution {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    let fill = match class {
                        0 => smooth_step((outer - d) / edge),
                        _ => smooth_step((outer - d) / edge) * smooth_step((d - inner) / edge),
                    };
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
                    let v = -1.0 + 2.0 * intensity * fill + noise;
                    images[[row, 0, y, x]] = v.clamp(-1.0, 1.0);
                }
            }
            labels.push(class);
        }
    }
    Ok(Dataset {
        images,
        labels,
        meta: DatasetMeta {
            generator: "shapes".into(),
            seed,
            class_names: vec!["blob".into(), "ring".into()],
            gaussian_model: None,
        },
    })
}

fn smooth_step(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Single-stage orthonormal Haar analysis: (n, c, H, W) -> (n, 4c, H/2, W/2)
/// with subbands ordered (LL, LH, HL, HH) per input channel.
pub fn haar_dwt(images: &Array4<f64>) -> Result<Array4<f64>> {
    let (n, c, h, w) = images.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Data(format!("haar_dwt requires even H and W, got {h}x{w}")));
    }
    let mut out = Array4::zeros((n, 4 * c, h / 2, w / 2));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let a = images[[i, ch, 2 * y, 2 * x]];
                    let b = images[[i, ch, 2 * y, 2 * x + 1]];
                    let cc = images[[i, ch, 2 * y + 1, 2 * x]];
                    let d = images[[i, ch, 2 * y + 1, 2 * x + 1]];
                    out[[i, 4 * ch, y, x]] = (a + b + cc + d) / 2.0;
                    out[[i, 4 * ch + 1, y, x]] = (a - b + cc - d) / 2.0;
                    out[[i, 4 * ch + 2, y, x]] = (a + b - cc - d) / 2.0;
                    out[[i, 4 * ch + 3, y, x]] = (a - b - cc + d) / 2.0;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`haar_dwt`]; perfect reconstruction up to rounding.
pub fn haar_idwt(coeffs: &Array4<f64>) -> Result<Array4<f64>> {
    let (n, c4, h2, w2) = coeffs.dim();
    if c4 % 4 != 0 {
        return Err(Error::Data(format!("coefficient channels must be a multiple of 4, got {c4}")));
    }
    let c = c4 / 4;
    let mut out = Array4::zeros((n, c, 2 * h2, 2 * w2));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    let ll = coeffs[[i, 4 * ch, y, x]];
                    let lh = coeffs[[i, 4 * ch + 1, y, x]];
                    let hl = coeffs[[i, 4 * ch + 2, y, x]];
                    let hh = coeffs[[i, 4 * ch + 3, y, x]];
                    out[[i, ch, 2 * y, 2 * x]] = (ll + lh + hl + hh) / 2.0;
                    out[[i, ch, 2 * y, 2 * x + 1]] = (ll - lh + hl - hh) / 2.0;
                    out[[i, ch, 2 * y + 1, 2 * x]] = (ll + lh - hl - hh) / 2.0;
                    out[[i, ch, 2 * y + 1, 2 * x + 1]] = (ll - lh - hl + hh) / 2.0;
                }
            }
        }
    }
    Ok(out)
}

/// Disjoint, exhaustive, class-stratified index split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (ftr, fva, fte) = fractions;
    if (ftr + fva + fte - 1.0).abs() > 1e-9 || ftr <= 0.0 || fva < 0.0 || fte < 0.0 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len();
        let n_tr = (ftr * n as f64).round() as usize;
        let n_va = (fva * n as f64).round() as usize;
        let n_tr = n_tr.min(n);
        let n_va = n_va.min(n - n_tr);
        train.extend_from_slice(&idx[..n_tr]);
        val.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        test.extend_from_slice(&idx[n_tr + n_va..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

/// Write the versioned binary container: header, f32 payload, i32 labels,
/// JSON metadata block.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (n, c, h, w) = dataset.images.dim();
    f.write_all(DATASET_MAGIC)?;
    f.write_u32::<LittleEndian>(DATASET_VERSION)?;
    f.write_u32::<LittleEndian>(n as u32)?;
    f.write_u32::<LittleEndian>(dataset.num_classes() as u32)?;
    f.write_u32::<LittleEndian>(c as u32)?;
    f.write_u32::<LittleEndian>(h as u32)?;
    f.write_u32::<LittleEndian>(w as u32)?;
    for v in dataset.images.iter() {
        f.write_f32::<LittleEndian>(*v as f32)?;
    }
    for &l in &dataset.labels {
        f.write_i32::<LittleEndian>(l as i32)?;
    }
    let meta = serde_json::to_vec(&dataset.meta).map_err(|e| Error::Data(e.to_string()))?;
    f.write_u32::<LittleEndian>(meta.len() as u32)?;
    f.write_all(&meta)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Data(format!("{}: not a dataset file", path.display())));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {version}")));
    }
    let n = f.read_u32::<LittleEndian>()? as usize;
    let classes = f.read_u32::<LittleEndian>()? as usize;
    let c = f.read_u32::<LittleEndian>()? as usize;
    let h = f.read_u32::<LittleEndian>()? as usize;
    let w = f.read_u32::<LittleEndian>()? as usize;
    let mut images = Array4::zeros((n, c, h, w));
    for v in images.iter_mut() {
        *v = f.read_f32::<LittleEndian>()? as f64;
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = f.read_i32::<LittleEndian>()?;
        if l < 0 || l as usize >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        labels.push(l as usize);
    }
    let meta_len = f.read_u32::<LittleEndian>()? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    f.read_exact(&mut meta_buf)?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_buf).map_err(|e| Error::Data(e.to_string()))?;
    if meta.class_names.len() != classes {
        return Err(Error::Data("metadata class count disagrees with header".into()));
    }
    Ok(Dataset { images, labels, meta })
}

pub fn save_splits(splits: &Splits, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(splits).map_err(|e| Error::Data(e.to_string()))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&json)?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<Splits> {
    let buf = std::fs::read(path)?;
    serde_json::from_slice(&buf).map_err(|e| Error::Data(e.to_string()))
}

/// Load a directory of per-class subdirectories of PNG images as a dataset.
/// Pixel values are mapped to [-1, 1]. Intended for small real-data smoke
/// runs; no dataset-specific preprocessing is applied.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{}: no class subdirectories", root.display())));
    }
    let mut images: Vec<Array2<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |e| e == "png"))
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?
                .to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match shape {
                None => shape = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::Data(format!("{}: inconsistent image size", file.display())))
                }
                _ => {}
            }
            let mut arr = Array2::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    arr[[y, x]] = img.get_pixel(x as u32, y as u32).0[0] as f64 / 127.5 - 1.0;
                }
            }
            images.push(arr);
            labels.push(class);
        }
    }
    let (h, w) = shape.ok_or_else(|| Error::Data("no PNG images found".into()))?;
    let mut out = Array4::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, 0, .., ..]).assign(img);
    }
    let class_names = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    Ok(Dataset {
        images: out,
        labels,
        meta: DatasetMeta {
            generator: "image-folder".into(),
            seed: 0,
            class_names,
            gaussian_model: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::GaussianClassModel;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_dataset_statistics() {
        let model = GaussianClassModel::symmetric_pair((1, 2, 2), 0.5, 0.25);
        let ds = generate_gaussian_dataset(&model, 10_000, 3, false).unwrap();
        assert_eq!(ds.len(), 20_000);
        // Sample mean within 3 standard errors of the class mean.
        let se = (0.25f64 / 10_000.0).sqrt();
        for class in 0..2 {
            let target = if class == 0 { -0.5 } else { 0.5 };
            let mut acc = 0.0;
            for i in 0..ds.len() {
                if ds.labels[i] == class {
                    acc += ds.images[[i, 0, 0, 0]];
                }
            }
            let mean = acc / 10_000.0;
            assert!((mean - target).abs() < 3.0 * se, "class {class}: {mean}");
        }
    }

    #[test]
    fn gaussian_dataset_degenerate_variance() {
        let model = GaussianClassModel::new(
            GaussianClassModel::symmetric_pair((1, 2, 2), 0.5, 1.0).means,
            ndarray::Array2::from_elem((2, 4), 1e-18),
            ndarray::Array1::from_elem(2, 0.5),
            (1, 2, 2),
        )
        .unwrap();
        let ds = generate_gaussian_dataset(&model, 5, 0, false).unwrap();
        for i in 0..ds.len() {
            let target = if ds.labels[i] == 0 { -0.5 } else { 0.5 };
            for v in ds.images.index_axis(ndarray::Axis(0), i).iter() {
                assert!((v - target).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dataset_generation_deterministic() {
        let a = generate_shapes_dataset(16, 20, 99).unwrap();
        let b = generate_shapes_dataset(16, 20, 99).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = generate_shapes_dataset(16, 20, 100).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn shapes_blob_brighter_at_center() {
        let ds = generate_shapes_dataset(16, 50, 7).unwrap();
        for i in 0..ds.len() {
            if ds.labels[i] != 0 {
                continue;
            }
            // Center 4x4 mean vs the outer border mean.
            let img = ds.images.index_axis(ndarray::Axis(0), i);
            let mut center = 0.0;
            for y in 6..10 {
                for x in 6..10 {
                    center += img[[0, y, x]];
                }
            }
            center /= 16.0;
            let mut border = 0.0;
            let mut nb = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    if y == 0 || y == 15 || x == 0 || x == 15 {
                        border += img[[0, y, x]];
                        nb += 1.0;
                    }
                }
            }
            border /= nb;
            assert!(center > border, "blob {i} center {center} vs border {border}");
        }
    }

    #[test]
    fn shapes_learnable_by_pixel_count_baseline() {
        // A linear threshold on the count of bright pixels separates the
        // classes well above chance.
        let ds = generate_shapes_dataset(16, 200, 11).unwrap();
        let scores: Vec<f64> = (0..ds.len())
            .map(|i| {
                ds.images
                    .index_axis(ndarray::Axis(0), i)
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .count() as f64
            })
            .collect();
        // Best threshold by brute force.
        let mut best = 0.0;
        for t in 0..256 {
            let correct = scores
                .iter()
                .zip(&ds.labels)
                .filter(|(&s, &l)| (s > t as f64) == (l == 0))
                .count();
            let acc = (correct.max(ds.len() - correct)) as f64 / ds.len() as f64;
            if acc > best {
                best = acc;
            }
        }
        assert!(best > 0.7, "pixel-count baseline accuracy {best}");
    }

    #[test]
    fn haar_constant_block() {
        let mut img = Array4::zeros((1, 1, 2, 2));
        img.fill(0.75);
        let coeffs = haar_dwt(&img).unwrap();
        assert!((coeffs[[0, 0, 0, 0]] - 1.5).abs() < 1e-12);
        for band in 1..4 {
            assert!(coeffs[[0, band, 0, 0]].abs() < 1e-12);
        }
    }

    #[test]
    fn haar_round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let img = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
            let coeffs = haar_dwt(&img).unwrap();
            assert_eq!(coeffs.dim(), (2, 12, 4, 4));
            let back = haar_idwt(&coeffs).unwrap();
            let max_err = (&back - &img).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-6);
            let e_img: f64 = img.iter().map(|v| v * v).sum();
            let e_coeff: f64 = coeffs.iter().map(|v| v * v).sum();
            assert!((e_img - e_coeff).abs() < 1e-6 * e_img.max(1.0));
        }
    }

    #[test]
    fn haar_rejects_odd_dimensions() {
        let img = Array4::zeros((1, 1, 3, 4));
        assert!(haar_dwt(&img).is_err());
    }

    #[test]
    fn splits_disjoint_exhaustive_stratified() {
        let ds = generate_shapes_dataset(16, 100, 1).unwrap();
        let splits = split_dataset(&ds, (0.8, 0.1, 0.1), 5).unwrap();
        let mut all: Vec<usize> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .cloned()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(splits.train.len(), 160);
        assert_eq!(splits.val.len(), 20);
        assert_eq!(splits.test.len(), 20);
        // Stratified: 80 train per class.
        let per_class = splits.train.iter().filter(|&&i| ds.labels[i] == 0).count();
        assert_eq!(per_class, 80);
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate_shapes_dataset(8, 10, 4).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.meta, ds.meta);
        // f32 payload: round trip within f32 precision.
        let max_err = (&back.images - &ds.images).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_err < 1e-6);
        assert!(load_dataset(&dir.path().join("missing.bin")).is_err());
    }

    #[test]
    fn fingerprint_changes_with_data() {
        let a = generate_shapes_dataset(8, 5, 1).unwrap();
        let b = generate_shapes_dataset(8, 5, 2).unwrap();
        assert_eq!(a.fingerprint(), a.fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
