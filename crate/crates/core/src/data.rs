//! Dataset ingestion: IDX (big-endian magic + dims + raw bytes) and
//! CIFAR-10 binary, pixel scaling to `[0,1]`, Gaussian corruption for
//! denoising, class-stratified subsetting, and a deterministic synthetic
//! digit generator for environments without the real corpora.

use std::path::Path;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
const CIFAR_RECORD_LEN: usize = 3073;

/// Classification labels or denoising target images.
#[derive(Debug, Clone)]
pub enum Targets<S> {
    Labels(Vec<usize>),
    Images(Tensor<S>),
}

/// An immutable split of a dataset: images `[N,C,H,W]` scaled to `[0,1]`
/// plus targets.
#[derive(Debug, Clone)]
pub struct DatasetHandle<S> {
    pub images: Tensor<S>,
    pub targets: Targets<S>,
    pub split: String,
}

impl<S: Scalar> DatasetHandle<S> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C,H,W]` shape of a single image.
    pub fn image_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn image(&self, i: usize) -> Tensor<S> {
        let shape = self.image_shape();
        let stride: usize = shape.iter().product();
        Tensor::new(&shape, self.images.data()[i * stride..(i + 1) * stride].to_vec())
            .expect("image slice matches shape")
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        match &self.targets {
            Targets::Labels(l) => Some(l[i]),
            Targets::Images(_) => None,
        }
    }

    pub fn target_image(&self, i: usize) -> Option<Tensor<S>> {
        match &self.targets {
            Targets::Images(imgs) => {
                let shape = self.image_shape();
                let stride: usize = shape.iter().product();
                Some(
                    Tensor::new(&shape, imgs.data()[i * stride..(i + 1) * stride].to_vec())
                        .expect("target slice matches shape"),
                )
            }
            Targets::Labels(_) => None,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!(
            "{}: truncated at byte {offset} (need {end} bytes, have {})",
            path.display(),
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load an IDX image/label pair as `[N,1,R,C]` images scaled by `1/255`
/// and labels `0..=9`.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle<S>> {
    let ibytes = read_file(images_path)?;
    let magic = be_u32(&ibytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {magic}, expected {IDX_IMAGES_MAGIC}",
            images_path.display()
        )));
    }
    let n = be_u32(&ibytes, 4, images_path)? as usize;
    let rows = be_u32(&ibytes, 8, images_path)? as usize;
    let cols = be_u32(&ibytes, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if ibytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: truncated payload at byte {} (expected {expected} bytes for {n} {rows}x{cols} images)",
            images_path.display(),
            ibytes.len()
        )));
    }

    let lbytes = read_file(labels_path)?;
    let lmagic = be_u32(&lbytes, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {lmagic}, expected {IDX_LABELS_MAGIC}",
            labels_path.display()
        )));
    }
    let ln = be_u32(&lbytes, 4, labels_path)? as usize;
    if lbytes.len() != 8 + ln {
        return Err(Error::Data(format!(
            "{}: truncated payload at byte {} (expected {} bytes for {ln} labels)",
            labels_path.display(),
            lbytes.len(),
            8 + ln
        )));
    }
    if ln != n {
        return Err(Error::Data(format!(
            "count mismatch: {} images in {} vs {} labels in {}",
            n,
            images_path.display(),
            ln,
            labels_path.display()
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &b) in lbytes[8..].iter().enumerate() {
        if b > 9 {
            return Err(Error::Data(format!(
                "{}: label {b} at index {i} exceeds 9",
                labels_path.display()
            )));
        }
        labels.push(b as usize);
    }
    let data: Vec<S> = ibytes[16..].iter().map(|&b| S::from_f64(b as f64 / 255.0)).collect();
    let images = Tensor::new(&[n, 1, rows, cols], data)?;
    Ok(DatasetHandle { images, targets: Targets::Labels(labels), split: String::new() })
}

/// Write an IDX image file (`[N,rows,cols]` u8 payload).
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "pixel buffer {} does not match {n}x{rows}x{cols}",
            pixels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Load CIFAR-10 binary batches: per record 1 label byte + 3072 pixel
/// bytes in channel-planar R,G,B order, 32x32 each.
pub fn load_cifar10_bin<S: Scalar>(paths: &[impl AsRef<Path>]) -> Result<DatasetHandle<S>> {
    let mut all_pixels: Vec<S> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() {
            return Err(Error::Data(format!("{}: empty file", path.display())));
        }
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Data(format!(
                "{}: length {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record (short record at byte {})",
                path.display(),
                bytes.len(),
                bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN
            )));
        }
        for (ri, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Data(format!(
                    "{}: label {} in record {ri} exceeds 9",
                    path.display(),
                    rec[0]
                )));
            }
            labels.push(rec[0] as usize);
            all_pixels.extend(rec[1..].iter().map(|&b| S::from_f64(b as f64 / 255.0)));
        }
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 3, 32, 32], all_pixels)?;
    Ok(DatasetHandle { images, targets: Targets::Labels(labels), split: String::new() })
}

/// The raw noise stream `corrupt_gaussian` draws from, exposed for
/// calibration checks on the unclamped field.
pub fn gaussian_field(count: usize, variance: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).expect("non-negative variance");
    (0..count).map(|_| normal.sample(&mut rng)).collect()
}

/// Additive per-pixel Gaussian noise; the noisy images become the input
/// and the clean images the target. Clamps to `[0,1]` unless disabled.
pub fn corrupt_gaussian<S: Scalar>(
    clean: &DatasetHandle<S>,
    variance: f64,
    seed: u64,
    clamp: bool,
) -> Result<DatasetHandle<S>> {
    if variance < 0.0 {
        return Err(Error::Config(format!("noise variance must be >= 0, got {variance}")));
    }
    let noise = gaussian_field(clean.images.numel(), variance, seed);
    let mut noisy = clean.images.clone();
    for (v, nz) in noisy.data_mut().iter_mut().zip(noise) {
        let mut x = v.as_f64() + nz;
        if clamp {
            x = x.clamp(0.0, 1.0);
        }
        *v = S::from_f64(x);
    }
    Ok(DatasetHandle {
        images: noisy,
        targets: Targets::Images(clean.images.clone()),
        split: clean.split.clone(),
    })
}

/// Fraction of pixels the `[0,1]` clamp in [`corrupt_gaussian`] would
/// move, for monitoring noise regimes.
pub fn clamped_fraction<S: Scalar>(clean: &DatasetHandle<S>, variance: f64, seed: u64) -> f64 {
    let noise = gaussian_field(clean.images.numel(), variance, seed);
    let clamped = clean
        .images
        .data()
        .iter()
        .zip(&noise)
        .filter(|(v, nz)| {
            let x = v.as_f64() + **nz;
            !(0.0..=1.0).contains(&x)
        })
        .count();
    clamped as f64 / clean.images.numel() as f64
}

/// Deterministic subset: class-stratified for labeled data (round-robin
/// over per-class pools shuffled by seed), first-n for image targets.
pub fn subset<S: Scalar>(handle: &DatasetHandle<S>, n: usize, seed: u64) -> Result<DatasetHandle<S>> {
    if n > handle.len() {
        return Err(Error::Data(format!(
            "subset of {n} exceeds population {}",
            handle.len()
        )));
    }
    if n == handle.len() {
        return Ok(handle.clone());
    }
    let indices: Vec<usize> = match &handle.targets {
        Targets::Images(_) => (0..n).collect(),
        Targets::Labels(labels) => {
            let classes = labels.iter().copied().max().unwrap_or(0) + 1;
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &l) in labels.iter().enumerate() {
                pools[l].push(i);
            }
            for (c, pool) in pools.iter_mut().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((c as u64 + 1) << 32));
                shuffle(pool, &mut rng);
            }
            let mut picked = Vec::with_capacity(n);
            let mut depth = 0;
            'outer: loop {
                let mut any = false;
                for pool in &pools {
                    if depth < pool.len() {
                        any = true;
                        picked.push(pool[depth]);
                        if picked.len() == n {
                            break 'outer;
                        }
                    }
                }
                if !any {
                    break;
                }
                depth += 1;
            }
            picked
        }
    };
    Ok(select(handle, &indices))
}

/// Gather the given sample indices into a new handle.
pub fn select<S: Scalar>(handle: &DatasetHandle<S>, indices: &[usize]) -> DatasetHandle<S> {
    let shape = handle.image_shape();
    let stride: usize = shape.iter().product();
    let mut data = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        data.extend_from_slice(&handle.images.data()[i * stride..(i + 1) * stride]);
    }
    let mut out_shape = vec![indices.len()];
    out_shape.extend_from_slice(&shape);
    let images = Tensor::new(&out_shape, data).expect("selection preserves shape");
    let targets = match &handle.targets {
        Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        Targets::Images(t) => {
            let mut tdata = Vec::with_capacity(indices.len() * stride);
            for &i in indices {
                tdata.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
            }
            Targets::Images(Tensor::new(&out_shape, tdata).expect("selection preserves shape"))
        }
    };
    DatasetHandle { images, targets, split: handle.split.clone() }
}

/// Fisher-Yates with a seeded generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Synthetic digit corpus: seven-segment glyphs with random rotation,
/// scale, translation, stroke thickness and pixel noise, rendered at
/// 28x28. Drop-in IDX-format stand-in when the real corpus is absent.
pub mod synth {
    use super::*;

    const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
        ((9.0, 5.0), (19.0, 5.0)),   // A top
        ((19.0, 5.0), (19.0, 13.0)), // B top-right
        ((19.0, 13.0), (19.0, 21.0)), // C bottom-right
        ((9.0, 21.0), (19.0, 21.0)), // D bottom
        ((9.0, 13.0), (9.0, 21.0)),  // E bottom-left
        ((9.0, 5.0), (9.0, 13.0)),   // F top-left
        ((9.0, 13.0), (19.0, 13.0)), // G middle
    ];

    // bit k set = segment k (A..G) lit
    const DIGIT_SEGS: [u8; 10] = [
        0b0111111, // 0
        0b0000110, // 1
        0b1011011, // 2
        0b1001111, // 3
        0b1100110, // 4
        0b1101101, // 5
        0b1111101, // 6
        0b0000111, // 7
        0b1111111, // 8
        0b1101111, // 9
    ];

    fn seg_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
        let (vx, vy) = (b.0 - a.0, b.1 - a.1);
        let (wx, wy) = (px - a.0, py - a.1);
        let len2 = vx * vx + vy * vy;
        let t = ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0);
        let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
        ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
    }

    /// Render `n` balanced, shuffled digit images; returns 28x28 u8
    /// pixels and labels. Fully determined by the seed.
    pub fn generate(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        shuffle(&mut labels, &mut rng);
        let mut pixels = Vec::with_capacity(n * 28 * 28);
        for &label in &labels {
            let theta = rng.random_range(-0.25..0.25f64);
            let scale = rng.random_range(0.8..1.15f64);
            let tx = rng.random_range(-2.5..2.5f64);
            let ty = rng.random_range(-2.5..2.5f64);
            let thickness = rng.random_range(1.1..1.9f64);
            let ink = rng.random_range(0.75..1.0f64);
            let (cx, cy) = (14.0, 13.0);
            let (sin_t, cos_t) = theta.sin_cos();
            let segs = DIGIT_SEGS[label as usize];
            for py in 0..28 {
                for px in 0..28 {
                    // inverse transform into glyph space
                    let dx = (px as f64 - cx - tx) / scale;
                    let dy = (py as f64 - cy - ty) / scale;
                    let gx = cos_t * dx + sin_t * dy + cx;
                    let gy = -sin_t * dx + cos_t * dy + cy;
                    let mut dist = f64::INFINITY;
                    for (si, seg) in SEGMENTS.iter().enumerate() {
                        if segs & (1 << si) != 0 {
                            dist = dist.min(seg_distance(gx, gy, seg.0, seg.1));
                        }
                    }
                    let mut v = ink * (thickness - dist + 0.5).clamp(0.0, 1.0);
                    v += rng.random_range(-0.08..0.08);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        (pixels, labels)
    }

    /// Write a full synthetic corpus in MNIST IDX layout
    /// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`).
    pub fn write_corpus(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
        let (train_px, train_lb) = generate(n_train, seed);
        let (test_px, test_lb) = generate(n_test, seed.wrapping_add(1));
        write_idx_images(&dir.join("train-images-idx3-ubyte"), &train_px, n_train, 28, 28)?;
        write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &train_lb)?;
        write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &test_px, n_test, 28, 28)?;
        write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &test_lb)?;
        Ok(())
    }
}

/// Load train/test splits from a directory holding MNIST-layout IDX files.
pub fn load_mnist_dir<S: Scalar>(dir: &Path) -> Result<(DatasetHandle<S>, DatasetHandle<S>)> {
    let mut train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    train.split = "train".into();
    let mut test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    test.split = "test".into();
    Ok((train, test))
}

/// Load train/test splits from a directory holding the CIFAR-10 binary
/// batches.
pub fn load_cifar10_dir<S: Scalar>(dir: &Path) -> Result<(DatasetHandle<S>, DatasetHandle<S>)> {
    let batches: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let mut train = load_cifar10_bin(&batches)?;
    train.split = "train".into();
    let mut test = load_cifar10_bin(&[dir.join("test_batch.bin")])?;
    test.split = "test".into();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let dir = tmpdir();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        write_idx_images(&img, &[0, 64, 128, 255, 10, 20, 30, 40], 2, 2, 2).unwrap();
        write_idx_labels(&lbl, &[7, 3]).unwrap();
        let ds = load_idx::<f64>(&img, &lbl).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.label(0), Some(7));
        assert_eq!(ds.label(1), Some(3));
        assert_eq!(ds.images.data()[3], 1.0); // byte 255 -> pixel 1.0
        assert_eq!(ds.images.data()[0], 0.0);
    }

    #[test]
    fn idx_random_roundtrip() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let px: Vec<u8> = (0..n * 9).map(|_| rng.random_range(0..=255)).collect();
        let lb: Vec<u8> = (0..n).map(|_| rng.random_range(0..=9)).collect();
        let dir = tmpdir();
        let (img, lbl) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_images(&img, &px, n, 3, 3).unwrap();
        write_idx_labels(&lbl, &lb).unwrap();
        let ds = load_idx::<f32>(&img, &lbl).unwrap();
        for (i, &b) in px.iter().enumerate() {
            assert_eq!(ds.images.data()[i], (b as f64 / 255.0) as f32);
        }
        let ds2 = load_idx::<f32>(&img, &lbl).unwrap();
        assert_eq!(ds.images, ds2.images);
    }

    #[test]
    fn idx_malformed_files_are_rejected() {
        let dir = tmpdir();
        let good_img = dir.path().join("good_img");
        let good_lbl = dir.path().join("good_lbl");
        write_idx_images(&good_img, &[1, 2, 3, 4], 1, 2, 2).unwrap();
        write_idx_labels(&good_lbl, &[5]).unwrap();

        // bad magic
        let bad_magic = dir.path().join("bad_magic");
        let mut bytes = std::fs::read(&good_img).unwrap();
        bytes[3] = 0xff;
        std::fs::write(&bad_magic, &bytes).unwrap();
        let err = load_idx::<f64>(&bad_magic, &good_lbl).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        // truncated payload names the offending byte offset
        let trunc = dir.path().join("trunc");
        let bytes = std::fs::read(&good_img).unwrap();
        std::fs::write(&trunc, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_idx::<f64>(&trunc, &good_lbl).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("18"), "{err}");

        // count mismatch
        let two_labels = dir.path().join("two_labels");
        write_idx_labels(&two_labels, &[1, 2]).unwrap();
        let err = load_idx::<f64>(&good_img, &two_labels).unwrap_err().to_string();
        assert!(err.contains("count mismatch"), "{err}");

        // oversized label
        let big_label = dir.path().join("big_label");
        write_idx_labels(&big_label, &[10]).unwrap();
        let err = load_idx::<f64>(&good_img, &big_label).unwrap_err().to_string();
        assert!(err.contains("exceeds 9"), "{err}");

        // empty file
        let empty = dir.path().join("empty");
        std::fs::write(&empty, []).unwrap();
        let err = load_idx::<f64>(&empty, &good_lbl).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    fn cifar_record(label: u8, r: u8, g: u8, b: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(r).take(1024));
        rec.extend(std::iter::repeat(g).take(1024));
        rec.extend(std::iter::repeat(b).take(1024));
        rec
    }

    #[test]
    fn cifar_single_record() {
        let dir = tmpdir();
        let f = dir.path().join("batch.bin");
        std::fs::write(&f, cifar_record(7, 128, 128, 128)).unwrap();
        let ds = load_cifar10_bin::<f64>(&[&f]).unwrap();
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.label(0), Some(7));
        assert!((ds.images.data()[0] - 128.0 / 255.0).abs() < 1e-12);
        assert!((ds.images.data()[0] - 0.50196).abs() < 1e-4);
    }

    #[test]
    fn cifar_two_files_concatenate() {
        let dir = tmpdir();
        let f1 = dir.path().join("b1.bin");
        let f2 = dir.path().join("b2.bin");
        let mut two = cifar_record(1, 0, 0, 0);
        two.extend(cifar_record(2, 0, 0, 0));
        std::fs::write(&f1, &two).unwrap();
        std::fs::write(&f2, cifar_record(3, 0, 0, 0)).unwrap();
        let ds = load_cifar10_bin::<f64>(&[&f1, &f2]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(
            (ds.label(0), ds.label(1), ds.label(2)),
            (Some(1), Some(2), Some(3))
        );
    }

    #[test]
    fn cifar_channel_order() {
        let dir = tmpdir();
        let f = dir.path().join("b.bin");
        std::fs::write(&f, cifar_record(0, 255, 0, 0)).unwrap();
        let ds = load_cifar10_bin::<f64>(&[&f]).unwrap();
        let img = ds.image(0);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(img.at(&[0, y, x]), 1.0);
                assert_eq!(img.at(&[1, y, x]), 0.0);
                assert_eq!(img.at(&[2, y, x]), 0.0);
            }
        }
    }

    #[test]
    fn cifar_malformed() {
        let dir = tmpdir();
        // short record
        let f = dir.path().join("short.bin");
        std::fs::write(&f, &cifar_record(0, 1, 2, 3)[..3000]).unwrap();
        let err = load_cifar10_bin::<f64>(&[&f]).unwrap_err().to_string();
        assert!(err.contains("short record"), "{err}");
        // bad label
        let f2 = dir.path().join("badlabel.bin");
        std::fs::write(&f2, cifar_record(11, 0, 0, 0)).unwrap();
        let err = load_cifar10_bin::<f64>(&[&f2]).unwrap_err().to_string();
        assert!(err.contains("exceeds 9"), "{err}");
        // empty
        let f3 = dir.path().join("empty.bin");
        std::fs::write(&f3, []).unwrap();
        assert!(load_cifar10_bin::<f64>(&[&f3]).is_err());
    }

    fn tiny_labeled() -> DatasetHandle<f64> {
        let n = 40;
        let images = Tensor::new(&[n, 1, 2, 2], (0..n * 4).map(|i| i as f64 / 160.0).collect()).unwrap();
        let labels = (0..n).map(|i| i % 10).collect();
        DatasetHandle { images, targets: Targets::Labels(labels), split: "train".into() }
    }

    #[test]
    fn corrupt_gaussian_basics() {
        let clean = tiny_labeled();
        let zero = corrupt_gaussian(&clean, 0.0, 1, true).unwrap();
        assert_eq!(zero.images, clean.images);
        let a = corrupt_gaussian(&clean, 0.05, 42, true).unwrap();
        let b = corrupt_gaussian(&clean, 0.05, 42, true).unwrap();
        assert_eq!(a.images, b.images);
        let c = corrupt_gaussian(&clean, 0.05, 43, true).unwrap();
        assert_ne!(a.images, c.images);
        // targets carry the clean pixels
        match &a.targets {
            Targets::Images(t) => assert_eq!(t, &clean.images),
            _ => panic!("expected image targets"),
        }
        // clamp keeps pixels in range
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn subset_behaviour() {
        let ds = tiny_labeled();
        let full = subset(&ds, 40, 7).unwrap();
        assert_eq!(full.images, ds.images);
        let s = subset(&ds, 20, 7).unwrap();
        assert_eq!(s.len(), 20);
        // stratified: exactly 2 per class
        let mut per_class = [0usize; 10];
        for i in 0..20 {
            per_class[s.label(i).unwrap()] += 1;
        }
        assert_eq!(per_class, [2; 10]);
        // same seed -> same selection
        let s2 = subset(&ds, 20, 7).unwrap();
        assert_eq!(s.images, s2.images);
        assert!(subset(&ds, 41, 7).is_err());
    }

    #[test]
    fn synth_corpus_roundtrips_through_idx() {
        let dir = tmpdir();
        synth::write_corpus(dir.path(), 50, 20, 9).unwrap();
        let (train, test) = load_mnist_dir::<f32>(dir.path()).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 20);
        assert_eq!(train.image_shape(), vec![1, 28, 28]);
        // balanced labels
        let mut per_class = [0usize; 10];
        for i in 0..50 {
            per_class[train.label(i).unwrap()] += 1;
        }
        assert_eq!(per_class, [5; 10]);
        // deterministic
        let dir2 = tmpdir();
        synth::write_corpus(dir2.path(), 50, 20, 9).unwrap();
        let (train2, _) = load_mnist_dir::<f32>(dir2.path()).unwrap();
        assert_eq!(train.images, train2.images);
        // glyphs have ink
        assert!(train.images.data().iter().any(|&v| v > 0.5));
    }
}
