//! SHPW dataset files and their JSON manifests.
//!
//! Layout, little-endian: magic `SHPW`, version u16, header length u32, header
//! JSON, then per sample the image as raw f32 CHW, box count u16, boxes as
//! 4×f32, labels as u16, domain u8. The manifest digest is 64-bit FNV-1a over
//! everything after the header.

use std::fs;
use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::geometry::Rect;
use crate::synthdata::{DataError, Dataset, DatasetSpec, DomainLabel, Sample};

pub const DATASET_MAGIC: &[u8; 4] = b"SHPW";
pub const DATASET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: DatasetSpec,
    sample_count: usize,
    /// `[C,H,W]` shared by every image; absent for empty datasets.
    image_shape: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub spec: DatasetSpec,
    pub sample_count: usize,
    /// FNV-1a 64 of the sample payload, as 16 hex digits.
    pub digest: String,
    pub tool_version: String,
}

fn encode_sample(s: &Sample, out: &mut Vec<u8>) -> Result<(), DataError> {
    let (image, ann, domain) = s.parts();
    let ann = ann.ok_or_else(|| DataError::InvalidSample("cannot persist a stripped sample".into()))?;
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let n = u16::try_from(ann.boxes.len()).map_err(|_| DataError::InvalidSample("more than 65535 boxes".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for b in &ann.boxes {
        for v in b.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in &ann.labels {
        let l = u16::try_from(l).map_err(|_| DataError::InvalidSample(format!("label {l} does not fit u16")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.push(domain.as_u8());
    Ok(())
}

fn payload(samples: &[Sample]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    for s in samples {
        encode_sample(s, &mut out)?;
    }
    Ok(out)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Digest of the serialized samples, as stored in the manifest.
pub fn dataset_digest(samples: &[Sample]) -> u64 {
    payload(samples).map(|p| fnv1a(&p)).unwrap_or(0)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes `<path>` and `<path>.manifest.json`, returning the manifest.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<Manifest, DataError> {
    let shape = match ds.samples.first() {
        Some(s) => {
            let sh = s.image().shape();
            Some([sh[0], sh[1], sh[2]])
        }
        None => None,
    };
    if ds.samples.iter().any(|s| Some(s.image().shape()) != shape.as_ref().map(|a| a.as_slice())) {
        return Err(DataError::InvalidSample("all images in a dataset must share one shape".into()));
    }
    let header = serde_json::to_vec(&Header { spec: ds.spec.clone(), sample_count: ds.samples.len(), image_shape: shape })?;
    let body = payload(&ds.samples)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(DATASET_MAGIC)?;
    f.write_all(&DATASET_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&body)?;
    f.flush()?;
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        spec: ds.spec.clone(),
        sample_count: ds.samples.len(),
        digest: format!("{:016x}", fnv1a(&body)),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    Ok(serde_json::from_slice(&fs::read(manifest_path(path))?)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DataError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a dataset file. When a manifest sits next to it, its digest must match.
pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != DATASET_MAGIC {
        return Err(DataError::Format("bad magic, not a SHPW file".into()));
    }
    let version = cur.u16()?;
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)?;
    let body_start = cur.pos;
    let mut samples = Vec::with_capacity(header.sample_count);
    for _ in 0..header.sample_count {
        let [c, h, w] = header.image_shape.ok_or_else(|| DataError::Format("missing image shape".into()))?;
        let data = (0..c * h * w).map(|_| cur.f32()).collect::<Result<Vec<_>, _>>()?;
        let image = Tensor::new(vec![c, h, w], data).map_err(|e| DataError::Format(e.to_string()))?;
        let n = cur.u16()? as usize;
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            boxes.push(Rect::new(cur.f32()?, cur.f32()?, cur.f32()?, cur.f32()?));
        }
        let labels = (0..n).map(|_| cur.u16().map(usize::from)).collect::<Result<Vec<_>, _>>()?;
        let d = cur.take(1)?[0];
        let domain = DomainLabel::from_u8(d).ok_or_else(|| DataError::Format(format!("bad domain byte {d}")))?;
        samples.push(Sample::new(image, boxes, labels, domain)?);
    }
    if cur.pos != bytes.len() {
        return Err(DataError::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let mpath = manifest_path(path);
    if mpath.exists() {
        let m = read_manifest(path)?;
        let actual = format!("{:016x}", fnv1a(&bytes[body_start..]));
        if m.digest != actual {
            return Err(DataError::Format(format!("digest mismatch: manifest {} vs file {actual}", m.digest)));
        }
    }
    Ok(Dataset { spec: header.spec, samples })
}
