//! Dataset loading (MNIST IDX, CIFAR-10 binary) and label-based sharding.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{ensure, Error, Result};

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images stored contiguously with their class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub shape: Vec<usize>,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gather samples by index into a batch of (images as f64, labels).
    pub fn batch(&self, idx: &[usize]) -> (Vec<f64>, Vec<u8>) {
        let mut x = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            x.extend(self.image(i).iter().map(|&v| v as f64));
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let n = self.sample_len();
        let mut images = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape.clone(),
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Read a whole file, inflating it if it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> Result<usize> {
    ensure!(b.len() >= at + 4, Error::Data("truncated IDX header".into()));
    Ok(u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == 0x0803, Error::Data(format!("image file magic {magic:#010x}")));
    let (n, rows, cols) = (be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?);
    let body = &bytes[16..];
    ensure!(
        body.len() == n * rows * cols,
        Error::Data(format!("image file holds {} bytes, header promises {}", body.len(), n * rows * cols))
    );
    Ok((n, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == 0x0801, Error::Data(format!("label file magic {magic:#010x}")));
    let n = be_u32(bytes, 4)?;
    let body = &bytes[8..];
    ensure!(
        body.len() == n,
        Error::Data(format!("label file holds {} labels, header promises {n}", body.len()))
    );
    Ok(body)
}

/// Load an IDX image/label pair, scaling pixels to [0, 1] and standardizing.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split, mean: f32, std: f32) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images)?;
    let lbl_bytes = read_maybe_gz(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbls = parse_idx_labels(&lbl_bytes)?;
    ensure!(
        lbls.len() == n,
        Error::Data(format!("{n} images but {} labels", lbls.len()))
    );
    ensure!(
        lbls.iter().all(|&l| l < 10),
        Error::Data("label outside 0..10".into())
    );
    Ok(Dataset {
        shape: vec![1, rows, cols],
        images: pixels.iter().map(|&p| (p as f32 / 255.0 - mean) / std).collect(),
        labels: lbls.to_vec(),
        classes: 10,
        split,
    })
}

/// Load the standard MNIST file names from `dir` (gzipped or not).
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |kind: &str| {
        let plain = dir.join(format!("{prefix}-{kind}"));
        let gz = dir.join(format!("{prefix}-{kind}.gz"));
        if gz.exists() {
            gz
        } else {
            plain
        }
    };
    load_mnist_idx(
        &find("images-idx3-ubyte"),
        &find("labels-idx1-ubyte"),
        split,
        MNIST_MEAN,
        MNIST_STD,
    )
}

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// CIFAR-10 binary batches: records of one label byte and 3x32x32 pixels.
pub fn load_cifar10_bin(files: &[&Path], split: Split) -> Result<Dataset> {
    const RECORD: usize = 1 + 3072;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = read_maybe_gz(f)?;
        ensure!(
            !bytes.is_empty() && bytes.len() % RECORD == 0,
            Error::Data(format!("{}: not a CIFAR-10 binary batch", f.display()))
        );
        for rec in bytes.chunks_exact(RECORD) {
            ensure!(rec[0] < 10, Error::Data("label outside 0..10".into()));
            labels.push(rec[0]);
            for (i, &p) in rec[1..].iter().enumerate() {
                let c = i / 1024;
                images.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
            }
        }
    }
    Ok(Dataset {
        shape: vec![3, 32, 32],
        images,
        labels,
        classes: 10,
        split,
    })
}

/// Split into `k` shards where shard `i` holds only the labels
/// `{i*per, ..., i*per + per - 1}` (mod the class count). Labels shared by
/// several shards are dealt out round-robin after a seeded shuffle.
pub fn shard_by_label(ds: &Dataset, k: usize, labels_per_shard: usize, seed: u64) -> Result<Vec<Dataset>> {
    ensure!(k >= 1 && labels_per_shard >= 1, Error::Config("need at least one shard and label".into()));
    if k == 1 && labels_per_shard >= ds.classes {
        return Ok(vec![ds.clone()]);
    }
    let assigned: Vec<Vec<usize>> = (0..k)
        .map(|i| (0..labels_per_shard).map(|j| (i * labels_per_shard + j) % ds.classes).collect())
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (s, labels) in assigned.iter().enumerate() {
        for &l in labels {
            owners[l].push(s);
        }
    }
    let mut next = vec![0usize; ds.classes];
    let mut idx: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in order {
        let l = ds.labels[i] as usize;
        if owners[l].is_empty() {
            continue;
        }
        let s = owners[l][next[l] % owners[l].len()];
        next[l] += 1;
        idx[s].push(i);
    }
    for (s, v) in idx.iter_mut().enumerate() {
        ensure!(!v.is_empty(), Error::Data(format!("shard {s} is empty")));
        v.sort_unstable();
    }
    Ok(idx.iter().map(|v| ds.subset(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_files(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = vec![0, 0, 8, 3];
        for v in [n as u32, 2, 2] {
            img.extend(v.to_be_bytes());
        }
        img.extend((0..n * 4).map(|i| (i % 256) as u8));
        let mut lbl = vec![0, 0, 8, 1];
        lbl.extend((n as u32).to_be_bytes());
        lbl.extend((0..n).map(|i| (i % 10) as u8));
        let ip = dir.join("img");
        let lp = dir.join("lbl.gz");
        std::fs::write(&ip, img).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&lbl).unwrap();
        std::fs::write(&lp, gz.finish().unwrap()).unwrap();
        (ip, lp)
    }

    #[test]
    fn loads_plain_and_gzip_idx() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_files(dir.path(), 20);
        let ds = load_mnist_idx(&ip, &lp, Split::Train, 0.0, 1.0).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.shape, vec![1, 2, 2]);
        assert_eq!(ds.image(1), &[4.0 / 255.0, 5.0 / 255.0, 6.0 / 255.0, 7.0 / 255.0]);
        assert_eq!(ds.labels[13], 3);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_files(dir.path(), 4);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 1;
        std::fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp, Split::Train, 0.0, 1.0), Err(Error::Data(_))));
        bytes[3] = 3;
        bytes.pop();
        std::fs::write(&ip, &bytes).unwrap();
        assert!(load_mnist_idx(&ip, &lp, Split::Train, 0.0, 1.0).is_err());
    }

    fn toy(n: usize) -> Dataset {
        Dataset {
            shape: vec![1],
            images: (0..n).map(|i| i as f32).collect(),
            labels: (0..n).map(|i| (i * 7 % 10) as u8).collect(),
            classes: 10,
            split: Split::Train,
        }
    }

    #[test]
    fn strict_two_label_shards() {
        let ds = toy(1000);
        let shards = shard_by_label(&ds, 5, 2, 1).unwrap();
        assert_eq!(shards.len(), 5);
        let mut total = 0;
        for (s, sh) in shards.iter().enumerate() {
            let h = sh.label_histogram();
            for (l, &c) in h.iter().enumerate() {
                assert_eq!(c > 0, l / 2 == s, "shard {s} label {l}");
            }
            total += sh.len();
        }
        assert_eq!(total, ds.len());
        let mut seen: Vec<f32> = shards.iter().flat_map(|s| s.images.clone()).collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, ds.images);
    }

    #[test]
    fn single_shard_is_everything() {
        let ds = toy(50);
        let s = shard_by_label(&ds, 1, 10, 0).unwrap();
        assert_eq!(s[0].labels, ds.labels);
    }

    #[test]
    fn real_mnist_if_present() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        if !dir.exists() {
            return;
        }
        let train = load_mnist(&dir, Split::Train).unwrap();
        let test = load_mnist(&dir, Split::Test).unwrap();
        assert_eq!((train.len(), test.len()), (60000, 10000));
        assert_eq!(train.shape, vec![1, 28, 28]);
        let mean = train.images.iter().map(|&v| v as f64).sum::<f64>() / train.images.len() as f64;
        assert!(mean.abs() < 0.01, "standardized mean {mean}");
    }
}
