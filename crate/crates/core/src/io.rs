//! On-disk formats: clip files, dataset manifests and model checkpoints.
//!
//! Clip file: `b"VCLP"`, u32 version (1), u32 C, T, H, W, then C·T·H·W
//! little-endian f32 values in (c, t, h, w) row-major order.
//!
//! Checkpoint: `b"STCR"`, u32 version (1), then until end of file a sequence of
//! records `(u32 name_len, name bytes, u32 rank, u32 dims[rank], f64 data)`,
//! all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::model::{BackboneConfig, ModelParams};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"VCLP";
pub const CLIP_VERSION: u32 = 1;
pub const CLIP_HEADER_LEN: usize = 24;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Payload size in bytes declared by a clip header.
pub fn clip_payload_len(dims: [usize; 4]) -> usize {
    4 * dims.iter().product::<usize>()
}

pub fn encode_clip(clip: &VideoClip) -> Vec<u8> {
    let dims = clip.dims();
    let mut out = Vec::with_capacity(CLIP_HEADER_LEN + clip_payload_len(dims));
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in clip.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn fail<T>(&self, offset: usize, detail: impl Into<String>) -> Result<T> {
        Err(StcrError::Format {
            offset: offset as u64,
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(
                self.bytes.len(),
                format!("truncated {what}: needed {n} bytes at offset {}", self.pos),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CLIP_MAGIC {
        return r.fail(0, "bad magic, expected VCLP");
    }
    let version = r.u32("version")?;
    if version != CLIP_VERSION {
        return r.fail(4, format!("unsupported clip version {version}"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32("dimensions")? as usize;
        if *d == 0 {
            return r.fail(8 + 4 * i, "zero dimension");
        }
    }
    let payload = r.take(clip_payload_len(dims), "payload")?;
    if !r.at_end() {
        return r.fail(r.pos, "trailing bytes after payload");
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    VideoClip::from_vec(dims, data)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    if !clip.tensor().is_finite() {
        return Err(StcrError::Numeric("refusing to write non-finite clip".into()));
    }
    fs::write(path, encode_clip(clip)).map_err(|e| StcrError::io(path, e))
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| StcrError::io(path, e))?;
    decode_clip(&bytes)
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return r.fail(0, "bad magic, expected STCR");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(4, format!("unsupported checkpoint version {version}"));
    }
    let mut records = Vec::new();
    while !r.at_end() {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| StcrError::Format {
                offset: (start + 4) as u64,
                detail: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(8 * numel, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| StcrError::Format {
            offset: start as u64,
            detail: format!("record {name}: {e}"),
        })?;
        records.push((name, t));
    }
    Ok(records)
}

/// Rebuilds parameters for `config` from checkpoint records, checking every
/// name and shape.
pub fn params_from_records(config: &BackboneConfig, records: Vec<(String, Tensor)>) -> Result<ModelParams> {
    let mut params = crate::model::init_params(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if records.len() != expected.len() {
        return Err(StcrError::Config(format!(
            "checkpoint has {} tensors, config expects {}",
            records.len(),
            expected.len()
        )));
    }
    for ((name, t), (want, shape)) in records.iter().zip(&expected) {
        if name != want || t.shape() != shape.as_slice() {
            return Err(StcrError::Config(format!(
                "checkpoint tensor {name} {:?} does not match expected {want} {shape:?}",
                t.shape()
            )));
        }
    }
    for (dst, (_, src)) in params.tensors_mut().into_iter().zip(records) {
        *dst = src;
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| StcrError::io(path, e))
}

pub fn load_checkpoint(path: &Path, config: &BackboneConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| StcrError::io(path, e))?;
    params_from_records(config, decode_checkpoint(&bytes)?)
}

/// Dataset listing: one `relative-path<TAB>label` line per clip.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, usize)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(p, l)| format!("{p}\t{l}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.is_empty() {
                let bad = || StcrError::Format {
                    offset,
                    detail: format!("malformed manifest line {body:?}"),
                };
                let (path, label) = body.split_once('\t').ok_or_else(bad)?;
                let label = label.trim().parse::<usize>().map_err(|_| bad())?;
                entries.push((path.to_string(), label));
            }
            offset += line.len() as u64;
        }
        Ok(Manifest { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| StcrError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| StcrError::io(path, e))?;
        Manifest::parse(&text)
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Loads every clip listed in `dir/manifest.tsv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<(VideoClip, usize)>> {
    let manifest = Manifest::read(&dir.join(MANIFEST_NAME))?;
    manifest
        .entries
        .iter()
        .map(|(rel, label)| {
            let path: PathBuf = dir.join(rel);
            Ok((read_clip(&path)?, *label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn clip_roundtrip_is_bit_exact_for_f32_values() {
        let clip = VideoClip::from_fn([2, 3, 4, 5], |i| (i as f32 * 0.1f32 - 3.0) as f64);
        let bytes = encode_clip(&clip);
        assert_eq!(bytes.len(), CLIP_HEADER_LEN + clip_payload_len([2, 3, 4, 5]));
        assert_eq!(decode_clip(&bytes).unwrap(), clip);
    }

    #[test]
    fn declared_payload_size() {
        assert_eq!(clip_payload_len([3, 16, 112, 112]), 2_408_448);
    }

    #[test]
    fn clip_format_errors_carry_offsets() {
        let clip = VideoClip::zeros([1, 2, 2, 2]);
        let bytes = encode_clip(&clip);
        let truncated = &bytes[..bytes.len() - 3];
        match decode_clip(truncated) {
            Err(StcrError::Format { offset, .. }) => assert_eq!(offset, truncated.len() as u64),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_clip(&bad), Err(StcrError::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_clip(&bad), Err(StcrError::Format { offset: 4, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_clip(&long),
            Err(StcrError::Format { offset, .. }) if offset == bytes.len() as u64
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = BackboneConfig::default();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..4], b"STCR");
        let q = params_from_records(&cfg, decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(p, q);

        let mut other = cfg.clone();
        other.channels = vec![4, 16];
        assert!(params_from_records(&other, decode_checkpoint(&bytes).unwrap()).is_err());
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(StcrError::Format { .. })
        ));
    }

    #[test]
    fn manifest_parse() {
        let m = Manifest::parse("a.vclp\t0\nb.vclp\t3\n").unwrap();
        assert_eq!(m.entries, vec![("a.vclp".into(), 0), ("b.vclp".into(), 3)]);
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(matches!(
            Manifest::parse("a.vclp\t0\nbroken\n"),
            Err(StcrError::Format { offset: 9, .. })
        ));
        assert!(Manifest::parse("").unwrap().entries.is_empty());
    }
}
