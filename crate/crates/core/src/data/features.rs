//! TMAF frame-feature files.
//!
//! Layout, all little-endian: magic `TMAF`, version `u16 = 1`, frame count
//! `J: u32`, feature width `D: u32`, then `J * D` `f32` values, frame-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TMAF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

/// `J x D` per-frame feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames * dim != data.len() {
            return Err(invalid(format!(
                "{frames} frames of width {dim} need {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, j: usize) -> &[f32] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// Widened to `f64` as a `[J, D]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.frames,
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &j in indices {
            data.extend_from_slice(self.frame(j));
        }
        Self {
            frames: indices.len(),
            dim: self.dim,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Frame count and width read from a TMAF header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub frames: usize,
    pub dim: usize,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, "bad magic, expected TMAF"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let frames = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    Ok(FeatureHeader { frames, dim })
}

pub fn parse_features(path: &Path, bytes: &[u8]) -> Result<FeatureSequence> {
    let header = parse_header(path, bytes)?;
    let expected = HEADER_LEN + 4 * header.frames * header.dim;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            format!("truncated payload: {} of {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(
            path,
            format!("non-finite value at frame {}", pos / header.dim.max(1)),
        ));
    }
    FeatureSequence::new(header.frames, header.dim, data)
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path)?;
    parse_features(path, &bytes)
}

/// Read only the header and check the file length agrees with it.
pub fn read_feature_header(path: &Path) -> Result<FeatureHeader> {
    use std::io::Read;
    let mut file = fs::File::open(path)?;
    let mut buf = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = file.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    let header = parse_header(path, &buf[..filled])?;
    let len = file.metadata()?.len() as usize;
    let expected = HEADER_LEN + 4 * header.frames * header.dim;
    if len != expected {
        return Err(format_err(
            path,
            format!("file is {len} bytes, header implies {expected}"),
        ));
    }
    Ok(header)
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&seq.to_bytes())?;
    Ok(())
}

/// Keep at most `max_frames` frames at indices `round(i (J-1) / (max-1))`.
pub fn subsample_frames(seq: &FeatureSequence, max_frames: usize) -> FeatureSequence {
    let j = seq.frames();
    if j <= max_frames {
        return seq.clone();
    }
    if max_frames <= 1 {
        return seq.select(&[0][..max_frames]);
    }
    let indices: Vec<usize> = (0..max_frames)
        .map(|i| ((i * (j - 1)) as f64 / (max_frames - 1) as f64).round() as usize)
        .collect();
    seq.select(&indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(frames: usize, dim: usize) -> FeatureSequence {
        let data = (0..frames * dim).map(|v| v as f32 * 0.5).collect();
        FeatureSequence::new(frames, dim, data).unwrap()
    }

    #[test]
    fn parses_known_payload() {
        let mut bytes = b"TMAF".to_vec();
        bytes.extend(1u16.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, -4.0, 0.5, 0.25] {
            bytes.extend(v.to_le_bytes());
        }
        let s = parse_features(Path::new("x"), &bytes).unwrap();
        assert_eq!(s.frames(), 2);
        assert_eq!(s.dim(), 3);
        assert_eq!(s.frame(0), &[1.0, 2.0, 3.0]);
        assert_eq!(s.frame(1), &[-4.0, 0.5, 0.25]);
    }

    #[test]
    fn rejects_truncation_magic_and_nan() {
        let good = seq(2, 3).to_bytes();
        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            parse_features(Path::new("t"), truncated),
            Err(Error::Format { .. })
        ));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(parse_features(Path::new("m"), &bad_magic).is_err());
        let mut nan = good.clone();
        nan[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(parse_features(Path::new("n"), &nan).is_err());
        assert!(parse_features(Path::new("h"), &good[..5]).is_err());
    }

    #[test]
    fn file_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tmaf");
        let s = seq(4, 5);
        write_features(&path, &s).unwrap();
        assert_eq!(read_features(&path).unwrap(), s);
        assert_eq!(
            read_feature_header(&path).unwrap(),
            FeatureHeader { frames: 4, dim: 5 }
        );
    }

    #[test]
    fn subsample_identity_when_short() {
        assert_eq!(subsample_frames(&seq(26, 2), 26), seq(26, 2));
        assert_eq!(subsample_frames(&seq(5, 2), 26).frames(), 5);
    }

    #[test]
    fn subsample_51_takes_even_indices() {
        let s = seq(51, 1);
        let sub = subsample_frames(&s, 26);
        let picked: Vec<f32> = sub.data().to_vec();
        let expected: Vec<f32> = (0..26).map(|i| (2 * i) as f32 * 0.5).collect();
        assert_eq!(picked, expected);
    }

    proptest! {
        #[test]
        fn subsample_length_and_order(frames in 1usize..200, max in 2usize..40) {
            let s = seq(frames, 1);
            let sub = subsample_frames(&s, max);
            prop_assert_eq!(sub.frames(), frames.min(max));
            prop_assert!(sub.data().windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(sub.frame(0), s.frame(0));
            prop_assert_eq!(sub.frame(sub.frames() - 1), s.frame(frames - 1));
        }

        #[test]
        fn bytes_round_trip(frames in 0usize..6, dim in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..frames * dim).map(|i| (i as f32 + seed as f32).sin()).collect();
            let s = FeatureSequence::new(frames, dim, data).unwrap();
            prop_assert_eq!(parse_features(Path::new("p"), &s.to_bytes()).unwrap(), s);
        }
    }
}
