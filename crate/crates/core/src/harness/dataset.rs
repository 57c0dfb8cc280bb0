//! On-disk dataset layout.
//!
//! A directory holds `img_NNNNN.bin` (three little-endian u32 extents `3, s, s`
//! followed by little-endian f64 pixels in channel-major order),
//! `lab_NNNNN.bin` (`s * s` raw label bytes) and `manifest.txt`:
//!
//! ```text
//! seed = 7
//! size = 64
//! num_classes = 4
//! count = 2
//! img_00000.bin lab_00000.bin
//! img_00001.bin lab_00001.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::synth::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub size: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_image(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let mut out = Vec::with_capacity(12 + 8 * image.len());
    for d in [s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(bad(path, "image header truncated"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 3 || h == 0 || h != w {
        return Err(bad(
            path,
            format!("image extents {c}x{h}x{w}, expected 3xSxS"),
        ));
    }
    let body = &bytes[12..];
    if body.len() != 8 * c * h * w {
        return Err(bad(
            path,
            format!("{} payload bytes for {c}x{h}x{w} reals", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(Shape { n: 1, c, h, w }, data)
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!(
            "seed = {}\nsize = {}\nnum_classes = {}\ncount = {}\n",
            self.seed,
            self.size,
            self.num_classes,
            self.samples.len()
        );
        for (i, s) in self.samples.iter().enumerate() {
            let (img, lab) = (format!("img_{i:05}.bin"), format!("lab_{i:05}.bin"));
            write_file(&dir.join(&img), &encode_image(&s.image))?;
            write_file(&dir.join(&lab), &s.labels)?;
            manifest.push_str(&format!("{img} {lab}\n"));
        }
        write_file(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut header = |key: &str| -> Result<u64> {
            let line = lines
                .next()
                .ok_or_else(|| bad(&mpath, format!("missing `{key}`")))?;
            match line.split_once('=') {
                Some((k, v)) if k.trim() == key => v
                    .trim()
                    .parse()
                    .map_err(|_| bad(&mpath, format!("bad value for `{key}`"))),
                _ => Err(bad(
                    &mpath,
                    format!("expected `{key} = ...`, found `{line}`"),
                )),
            }
        };
        let seed = header("seed")?;
        let size = header("size")? as usize;
        let num_classes = header("num_classes")? as usize;
        let count = header("count")? as usize;
        let pairs: Vec<&str> = lines.collect();
        if pairs.len() != count {
            return Err(bad(
                &mpath,
                format!("count {count} but {} entries", pairs.len()),
            ));
        }
        let mut samples = Vec::with_capacity(count);
        for entry in pairs {
            let mut parts = entry.split_whitespace();
            let (Some(img), Some(lab), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(&mpath, format!("malformed entry `{entry}`")));
            };
            let ipath = dir.join(img);
            let image = decode_image(&read_file(&ipath)?, &ipath)?;
            if image.shape().h != size {
                return Err(bad(
                    &ipath,
                    format!("size {} != manifest size {size}", image.shape().h),
                ));
            }
            let lpath = dir.join(lab);
            let labels = read_file(&lpath)?;
            if labels.len() != size * size {
                return Err(bad(
                    &lpath,
                    format!("{} labels for {size}x{size}", labels.len()),
                ));
            }
            samples.push(Sample { image, labels });
        }
        Ok(Dataset {
            seed,
            size,
            num_classes,
            samples,
        })
    }
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &PathBuf) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::generate_sample;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            seed: 5,
            size: 16,
            num_classes: 4,
            samples: (0..3).map(|i| generate_sample(5, i, 16)).collect(),
        };
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.seed, 5);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert!(a.image.bit_eq(&b.image));
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn truncated_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            seed: 1,
            size: 16,
            num_classes: 4,
            samples: vec![generate_sample(1, 0, 16)],
        };
        ds.write(dir.path()).unwrap();
        let p = dir.path().join("img_00000.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            Dataset::read(dir.path()),
            Err(Error::Dataset { .. })
        ));
    }
}
