//! Corpus ingestion and preprocessing: IDX parsing, class subsets, dither,
//! logit gaussianification, FFT circular shifts and a binary cache.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use dpbn_core::Matrix;
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::rng::stream;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Lower/upper clip applied after dithering.
pub const DITHER_CLIP: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated file (need {needed} bytes, have {have})")]
    TruncatedFile { path: PathBuf, needed: usize, have: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("class {class}: only {available} samples, {requested} requested")]
    InsufficientSamples { class: u8, available: usize, requested: usize },
    #[error("value {value} outside (0, 1) at index {index}")]
    DomainError { index: usize, value: f64 },
    #[error("{stage:?} batch cannot be {op}")]
    WrongStage { stage: Stage, op: &'static str },
    #[error("{path}: {reason}")]
    BadCache { path: PathBuf, reason: &'static str },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Dithered,
    Gaussianified,
}

/// Images as rows of a `samples × (rows·cols)` matrix with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub samples: Matrix,
    pub labels: Vec<u8>,
    /// Image height and width.
    pub shape: (usize, usize),
    pub stage: Stage,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count_of(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn rows(&self, idx: &[usize]) -> ImageBatch {
        let cols = self.samples.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        ImageBatch {
            samples: Matrix::from_vec(idx.len(), cols, data).expect("row-aligned"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            stage: self.stage,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut f = File::open(path).map_err(io_err)?;
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(f).read_to_end(&mut buf).map_err(io_err)?;
    } else {
        f.read_to_end(&mut buf).map_err(io_err)?;
    }
    Ok(buf)
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    let bytes = buf.get(at..at + 4).ok_or_else(|| DataError::TruncatedFile {
        path: path.to_path_buf(),
        needed: at + 4,
        have: buf.len(),
    })?;
    Ok(u32::from_be_bytes(bytes.try_into().expect("4 bytes")))
}

/// Parse an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(buf: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(DataError::BadMagic { path: path.to_path_buf(), found: magic, expected: IDX_IMAGES });
    }
    let n = be_u32(buf, 4, path)? as usize;
    let r = be_u32(buf, 8, path)? as usize;
    let c = be_u32(buf, 12, path)? as usize;
    let needed = 16 + n * r * c;
    if buf.len() < needed {
        return Err(DataError::TruncatedFile { path: path.to_path_buf(), needed, have: buf.len() });
    }
    Ok((n, r, c, buf[16..needed].to_vec()))
}

pub fn parse_idx_labels(buf: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IDX_LABELS {
        return Err(DataError::BadMagic { path: path.to_path_buf(), found: magic, expected: IDX_LABELS });
    }
    let n = be_u32(buf, 4, path)? as usize;
    let needed = 8 + n;
    if buf.len() < needed {
        return Err(DataError::TruncatedFile { path: path.to_path_buf(), needed, have: buf.len() });
    }
    Ok(buf[8..needed].to_vec())
}

/// Load an IDX image/label pair (optionally gzip-compressed, by `.gz`
/// extension) with pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageBatch> {
    let (n, r, c, px) = parse_idx_images(&read_file(images)?, images)?;
    let labels = parse_idx_labels(&read_file(labels)?, labels)?;
    if labels.len() != n {
        return Err(DataError::DimMismatch(format!("{n} images but {} labels", labels.len())));
    }
    let data = px.iter().map(|&p| p as f64 / 255.0).collect();
    Ok(ImageBatch {
        samples: Matrix::from_vec(n, r * c, data).expect("sized from header"),
        labels,
        shape: (r, c),
        stage: Stage::Raw,
    })
}

/// Up to `per_class` samples of each class, in class order. Within a class
/// the choice is a seeded shuffle; `None` keeps every sample in file order.
pub fn select_subset(batch: &ImageBatch, classes: &[u8], per_class: Option<usize>, seed: u64) -> Result<ImageBatch> {
    let mut idx = Vec::new();
    for (ci, &class) in classes.iter().enumerate() {
        let mut members: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i] == class).collect();
        if let Some(k) = per_class {
            if members.len() < k {
                return Err(DataError::InsufficientSamples { class, available: members.len(), requested: k });
            }
            members.shuffle(&mut stream(seed, 0x5e1ec7 + ci as u64));
            members.truncate(k);
            members.sort_unstable();
        }
        idx.extend(members);
    }
    Ok(batch.rows(&idx))
}

/// Push pixels away from the ends of `[0, 1]` by an exponential amount with
/// mean `scale`: down for pixels above 0.5, up otherwise.
pub fn dither(batch: &ImageBatch, scale: f64, seed: u64) -> Result<ImageBatch> {
    if batch.stage != Stage::Raw {
        return Err(DataError::WrongStage { stage: batch.stage, op: "dithered" });
    }
    let exp = Exp::new(1.0 / scale).map_err(|_| DataError::DimMismatch(format!("dither scale {scale}")))?;
    let mut rng = stream(seed, 0xd1);
    let mut out = batch.clone();
    for v in out.samples.as_mut_slice() {
        let e: f64 = exp.sample(&mut rng);
        let d = if *v > 0.5 { *v - e } else { *v + e };
        *v = d.clamp(DITHER_CLIP, 1.0 - DITHER_CLIP);
    }
    out.stage = Stage::Dithered;
    Ok(out)
}

#[inline]
pub fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element-wise logit of a dithered batch.
pub fn gaussianify(batch: &ImageBatch) -> Result<ImageBatch> {
    if batch.stage != Stage::Dithered {
        return Err(DataError::WrongStage { stage: batch.stage, op: "gaussianified" });
    }
    let mut out = batch.clone();
    for (index, v) in out.samples.as_mut_slice().iter_mut().enumerate() {
        if !(*v > 0.0 && *v < 1.0) {
            return Err(DataError::DomainError { index, value: *v });
        }
        *v = logit(*v);
    }
    out.stage = Stage::Gaussianified;
    Ok(out)
}

/// Circular sub-pixel shifts of `rows × cols` images via the 2-D FFT.
///
/// A shift by `δ` multiplies frequency `k` by `e^{−2πikδ/n}`. For even `n`
/// the Nyquist bin gets the real value `cos(πδ)` rounded to `±1`, which
/// keeps the multiplier Hermitian and unimodular: the shifted image is real,
/// energy is preserved exactly, and integer shifts are exact rolls.
pub struct ShiftPlan {
    rows: usize,
    cols: usize,
    fwd_r: Arc<dyn Fft<f64>>,
    inv_r: Arc<dyn Fft<f64>>,
    fwd_c: Arc<dyn Fft<f64>>,
    inv_c: Arc<dyn Fft<f64>>,
}

impl ShiftPlan {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            rows,
            cols,
            fwd_r: p.plan_fft_forward(rows),
            inv_r: p.plan_fft_inverse(rows),
            fwd_c: p.plan_fft_forward(cols),
            inv_c: p.plan_fft_inverse(cols),
        }
    }

    fn phase(n: usize, k: usize, delta: f64) -> Complex64 {
        if n % 2 == 0 && k == n / 2 {
            return Complex64::new(if (delta.round() as i64) % 2 == 0 { 1.0 } else { -1.0 }, 0.0);
        }
        let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * delta / n as f64)
    }

    /// Shift down by `dv` rows and right by `dh` columns (circularly).
    pub fn shift(&self, image: &[f64], dv: f64, dh: f64) -> Vec<f64> {
        let (r, c) = (self.rows, self.cols);
        assert_eq!(image.len(), r * c, "image size");
        let mut buf: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        // rows: transform along columns within each row
        for row in buf.chunks_mut(c) {
            self.fwd_c.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); r];
        for j in 0..c {
            for i in 0..r {
                col[i] = buf[i * c + j];
            }
            self.fwd_r.process(&mut col);
            let ph = Self::phase(c, j, dh);
            for (i, v) in col.iter_mut().enumerate() {
                *v *= Self::phase(r, i, dv) * ph;
            }
            self.inv_r.process(&mut col);
            for i in 0..r {
                buf[i * c + j] = col[i];
            }
        }
        for row in buf.chunks_mut(c) {
            self.inv_c.process(row);
        }
        let norm = 1.0 / (r * c) as f64;
        buf.iter().map(|z| z.re * norm).collect()
    }
}

/// Shift every image by its own `(δv, δh)` drawn uniformly in
/// `[−max_shift, max_shift]²`.
pub fn fft_shift_augment(batch: &ImageBatch, max_shift: f64, seed: u64) -> ImageBatch {
    let plan = ShiftPlan::new(batch.shape.0, batch.shape.1);
    let mut rng = stream(seed, 0xff7);
    let mut out = batch.clone();
    if max_shift <= 0.0 {
        return out;
    }
    for i in 0..batch.len() {
        let dv = rng.random_range(-max_shift..=max_shift);
        let dh = rng.random_range(-max_shift..=max_shift);
        let shifted = plan.shift(batch.samples.row(i), dv, dh);
        out.samples.row_mut(i).copy_from_slice(&shifted);
    }
    out
}

const CACHE_MAGIC: &[u8; 4] = b"DPBD";
const CACHE_VERSION: u16 = 1;

/// Write a preprocessed batch: magic, version, a 32-byte key identifying
/// the pipeline settings, rows, cols, image shape, stage, labels, then the
/// samples as little-endian f64.
pub fn write_cache(path: &Path, batch: &ImageBatch, key: &[u8; 32]) -> Result<()> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut head = Vec::new();
    head.extend_from_slice(CACHE_MAGIC);
    head.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    head.extend_from_slice(key);
    for v in [batch.samples.rows(), batch.samples.cols(), batch.shape.0, batch.shape.1] {
        head.extend_from_slice(&(v as u64).to_le_bytes());
    }
    head.push(match batch.stage {
        Stage::Raw => 0,
        Stage::Dithered => 1,
        Stage::Gaussianified => 2,
    });
    head.extend_from_slice(&batch.labels);
    w.write_all(&head).map_err(io_err)?;
    for v in batch.samples.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a cache written by [`write_cache`]; `Ok(None)` if its key differs.
pub fn read_cache(path: &Path, key: &[u8; 32]) -> Result<Option<ImageBatch>> {
    let buf = read_file(path)?;
    let bad = |reason| DataError::BadCache { path: path.to_path_buf(), reason };
    if buf.len() < 71 || &buf[..4] != CACHE_MAGIC {
        return Err(bad("not a DPBD cache"));
    }
    if u16::from_le_bytes([buf[4], buf[5]]) != CACHE_VERSION {
        return Err(bad("unsupported cache version"));
    }
    if &buf[6..38] != key {
        return Ok(None);
    }
    let u = |at: usize| u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes")) as usize;
    let (n, d, h, w) = (u(38), u(46), u(54), u(62));
    let stage = match buf[70] {
        0 => Stage::Raw,
        1 => Stage::Dithered,
        2 => Stage::Gaussianified,
        _ => return Err(bad("unknown stage")),
    };
    let labels_end = 71 + n;
    if buf.len() != labels_end + 8 * n * d || h * w != d {
        return Err(bad("size does not match header"));
    }
    let labels = buf[71..labels_end].to_vec();
    let data = buf[labels_end..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(Some(ImageBatch {
        samples: Matrix::from_vec(n, d, data).map_err(|_| bad("size does not match header"))?,
        labels,
        shape: (h, w),
        stage,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn idx_images(n: u32, r: u32, c: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES, n, r, c] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    fn idx_labels(l: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS.to_be_bytes());
        b.extend_from_slice(&(l.len() as u32).to_be_bytes());
        b.extend_from_slice(l);
        b
    }

    fn raw(data: Vec<f64>, labels: Vec<u8>, shape: (usize, usize)) -> ImageBatch {
        let n = labels.len();
        ImageBatch { samples: Matrix::from_vec(n, shape.0 * shape.1, data).unwrap(), labels, shape, stage: Stage::Raw }
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, idx_images(2, 2, 2, &[0, 255, 51, 0, 0, 0, 0, 0])).unwrap();
        std::fs::write(&lp, idx_labels(&[3, 8])).unwrap();
        let b = load_idx(&ip, &lp).unwrap();
        assert_eq!(b.samples.rows(), 2);
        assert_eq!(b.samples.row(0), &[0.0, 1.0, 0.2, 0.0]);
        assert!(b.samples.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(b.shape, (2, 2));

        std::fs::write(&lp, idx_labels(&[3])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::DimMismatch(_))));
        std::fs::write(&lp, idx_images(1, 1, 1, &[0])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::BadMagic { .. })));
        std::fs::write(&ip, idx_images(2, 2, 2, &[0; 7])).unwrap();
        std::fs::write(&lp, idx_labels(&[3, 8])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::TruncatedFile { .. })));
        assert!(matches!(load_idx(&dir.path().join("missing"), &lp), Err(DataError::Io { .. })));
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.gz");
        let lp = dir.path().join("lab");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_images(1, 1, 3, &[0, 128, 255])).unwrap();
        std::fs::write(&ip, enc.finish().unwrap()).unwrap();
        std::fs::write(&lp, idx_labels(&[9])).unwrap();
        let b = load_idx(&ip, &lp).unwrap();
        assert_eq!(b.samples.row(0), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn subset_counts_and_determinism() {
        let labels: Vec<u8> = (0..60).map(|i| (i % 10) as u8).collect();
        let data = (0..60 * 4).map(|i| i as f64).collect();
        let b = raw(data, labels, (2, 2));
        let s = select_subset(&b, &[3, 8, 9], Some(4), 7).unwrap();
        assert_eq!(s.len(), 12);
        for c in [3, 8, 9] {
            assert_eq!(s.count_of(c), 4);
        }
        assert_eq!(s, select_subset(&b, &[3, 8, 9], Some(4), 7).unwrap());
        assert_eq!(select_subset(&b, &[3], Some(0), 1).unwrap().len(), 0);
        assert_eq!(select_subset(&b, &[3, 8], None, 1).unwrap().len(), 12);
        assert!(matches!(
            select_subset(&b, &[3], Some(7), 1),
            Err(DataError::InsufficientSamples { class: 3, available: 6, requested: 7 })
        ));
    }

    #[test]
    fn dither_direction_and_range() {
        let b = raw(vec![1.0, 0.0, 0.5, 0.7], vec![0], (2, 2));
        let d = dither(&b, 0.01, 3).unwrap();
        let v = d.samples.row(0);
        assert!(v[0] < 1.0 && v[0] > 0.5);
        assert!(v[1] > 0.0 && v[1] < 0.5);
        assert!(v[2] > 0.5);
        assert!(v[3] < 0.7);
        assert!(dither(&d, 0.01, 3).is_err());
        // no mass left at the ends
        let n = 5000;
        let b = raw((0..n * 4).map(|i| (i % 2) as f64).collect(), vec![0; n], (2, 2));
        let d = dither(&b, 0.01, 4).unwrap();
        assert!(d.samples.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(d, dither(&b, 0.01, 4).unwrap());
    }

    #[test]
    fn gaussianify_values() {
        let b = raw(vec![0.5, 0.9, 0.1, 0.3], vec![0], (2, 2));
        assert!(gaussianify(&b).is_err());
        let mut d = b.clone();
        d.stage = Stage::Dithered;
        let g = gaussianify(&d).unwrap();
        assert_eq!(g.samples.row(0)[0], 0.0);
        assert!((g.samples.row(0)[1] - 2.197_224_577_336_219_6).abs() < 1e-12);
        d.samples.as_mut_slice()[2] = 1.0;
        assert!(matches!(gaussianify(&d), Err(DataError::DomainError { index: 2, .. })));
    }

    proptest! {
        #[test]
        fn sigmoid_inverts_logit(x in 1e-6f64..(1.0 - 1e-6)) {
            prop_assert!((sigmoid(logit(x)) - x).abs() <= 1e-12);
        }
    }

    fn image(seed: u64, r: usize, c: usize) -> Vec<f64> {
        let mut rng = stream(seed, 1);
        (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn integer_shift_is_roll() {
        for &(r, c) in &[(28, 28), (5, 6), (7, 7)] {
            let plan = ShiftPlan::new(r, c);
            let x = image(2, r, c);
            let z = plan.shift(&x, 0.0, 0.0);
            assert!(z.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
            for &(dv, dh) in &[(1i64, 0i64), (0, 1), (-1, 1), (3, -2)] {
                let y = plan.shift(&x, dv as f64, dh as f64);
                for i in 0..r {
                    for j in 0..c {
                        let si = (i as i64 - dv).rem_euclid(r as i64) as usize;
                        let sj = (j as i64 - dh).rem_euclid(c as i64) as usize;
                        assert!((y[i * c + j] - x[si * c + sj]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn fractional_shift_preserves_energy() {
        let plan = ShiftPlan::new(28, 28);
        let x = image(3, 28, 28);
        let e0: f64 = x.iter().map(|v| v * v).sum();
        for &(dv, dh) in &[(0.5, 0.0), (0.3, -0.8), (-1.0, 0.25)] {
            let y = plan.shift(&x, dv, dh);
            let e1: f64 = y.iter().map(|v| v * v).sum();
            assert!((e1 - e0).abs() <= 1e-9 * e0);
        }
        // shifting by δ then −δ is the identity
        let y = plan.shift(&plan.shift(&x, 0.37, -0.61), -0.37, 0.61);
        assert!(y.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn augment_is_seeded() {
        let b = ImageBatch {
            samples: Matrix::from_vec(3, 16, (0..48).map(|i| (i as f64).sin()).collect()).unwrap(),
            labels: vec![3, 8, 9],
            shape: (4, 4),
            stage: Stage::Gaussianified,
        };
        assert_eq!(fft_shift_augment(&b, 1.0, 5), fft_shift_augment(&b, 1.0, 5));
        assert_ne!(fft_shift_augment(&b, 1.0, 5), fft_shift_augment(&b, 1.0, 6));
        assert_eq!(fft_shift_augment(&b, 0.0, 5), b);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.dpbd");
        let b = ImageBatch {
            samples: Matrix::from_vec(2, 4, vec![0.1, -2.0, 3.5, 1e-300, 0.0, -0.0, 7.0, 8.0]).unwrap(),
            labels: vec![3, 9],
            shape: (2, 2),
            stage: Stage::Gaussianified,
        };
        write_cache(&p, &b, &[1; 32]).unwrap();
        assert_eq!(read_cache(&p, &[1; 32]).unwrap().unwrap(), b);
        assert!(read_cache(&p, &[2; 32]).unwrap().is_none());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_cache(&p, &[1; 32]), Err(DataError::BadCache { .. })));
    }
}
