//! Multi-modal feature sets and the OCMF v1 container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "OCMF" | version=1 | N | M | d0 | label_flag
//! M blocks of N x d0 f32, row-major, block r = modality r
//! N x u32 labels            (only when label_flag == 1)
//! name_bytes_len | UTF-8 modality names separated by '\n'
//! ```
//!
//! Objects are aligned positionally: row `i` of every block is object `i`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const OCMF_MAGIC: &[u8; 4] = b"OCMF";
pub const OCMF_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("OCMF parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("invalid feature set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn parse_err(offset: u64, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        offset,
        message: message.into(),
    }
}

/// Per-modality features without labels. Everything that trains takes this
/// type, so a training path cannot observe labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalFeatures {
    n_objects: usize,
    n_modalities: usize,
    feature_dim: usize,
    /// `M x N x d0`, modality-major.
    data: Vec<f32>,
    modality_names: Vec<String>,
}

impl ModalFeatures {
    pub fn new(
        n_objects: usize,
        n_modalities: usize,
        feature_dim: usize,
        data: Vec<f32>,
        modality_names: Vec<String>,
    ) -> Result<Self, DatasetError> {
        if data.len() != n_objects * n_modalities * feature_dim {
            return Err(DatasetError::Invalid(format!(
                "expected {} values for N={n_objects} M={n_modalities} d0={feature_dim}, got {}",
                n_objects * n_modalities * feature_dim,
                data.len()
            )));
        }
        if modality_names.len() != n_modalities {
            return Err(DatasetError::Invalid(format!(
                "{} modality names for {n_modalities} modalities",
                modality_names.len()
            )));
        }
        if let Some(bad) = modality_names.iter().find(|n| n.contains('\n')) {
            return Err(DatasetError::Invalid(format!(
                "modality name {bad:?} contains a newline"
            )));
        }
        Ok(Self {
            n_objects,
            n_modalities,
            feature_dim,
            data,
            modality_names,
        })
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// The `N x d0` block of modality `r`.
    pub fn block(&self, r: usize) -> &[f32] {
        let len = self.n_objects * self.feature_dim;
        &self.data[r * len..(r + 1) * len]
    }

    /// Feature vector of object `i` in modality `r`.
    pub fn vector(&self, r: usize, i: usize) -> &[f32] {
        let start = (r * self.n_objects + i) * self.feature_dim;
        &self.data[start..start + self.feature_dim]
    }

    /// Modality `r` as an `N x d0` f64 tensor.
    pub fn tensor(&self, r: usize) -> Tensor {
        let data = self.block(r).iter().map(|&x| f64::from(x)).collect();
        Tensor::new(self.n_objects, self.feature_dim, data).expect("block shape")
    }

    /// Keeps the given objects, in the given order, across all modalities.
    pub fn subset(&self, indices: &[usize]) -> ModalFeatures {
        let mut data = Vec::with_capacity(indices.len() * self.n_modalities * self.feature_dim);
        for r in 0..self.n_modalities {
            for &i in indices {
                data.extend_from_slice(self.vector(r, i));
            }
        }
        ModalFeatures {
            n_objects: indices.len(),
            n_modalities: self.n_modalities,
            feature_dim: self.feature_dim,
            data,
            modality_names: self.modality_names.clone(),
        }
    }

    /// Builds a feature set from one `N x d` tensor per modality, narrowing
    /// to f32.
    pub fn from_tensors(blocks: &[Tensor], modality_names: Vec<String>) -> Result<Self, DatasetError> {
        let (n, d) = blocks.first().map_or((0, 0), Tensor::shape);
        let mut data = Vec::with_capacity(blocks.len() * n * d);
        for b in blocks {
            if b.shape() != (n, d) {
                return Err(DatasetError::Invalid("modality blocks differ in shape".into()));
            }
            data.extend(b.data().iter().map(|&x| x as f32));
        }
        Self::new(n, blocks.len(), d, data, modality_names)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: ModalFeatures,
    /// Category per object. Used only for splitting and evaluation.
    pub labels: Option<Vec<u32>>,
}

impl FeatureSet {
    pub fn new(features: ModalFeatures, labels: Option<Vec<u32>>) -> Result<Self, DatasetError> {
        if let Some(l) = &labels {
            if l.len() != features.n_objects() {
                return Err(DatasetError::Invalid(format!(
                    "{} labels for {} objects",
                    l.len(),
                    features.n_objects()
                )));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn n_objects(&self) -> usize {
        self.features.n_objects()
    }

    pub fn n_modalities(&self) -> usize {
        self.features.n_modalities()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.feature_dim()
    }

    /// Number of categories `Y` (one past the largest label).
    pub fn n_categories(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |&m| m as usize + 1))
    }

    pub fn strip_labels(self) -> ModalFeatures {
        self.features
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            features: self.features.subset(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Header {
    n: usize,
    m: usize,
    d: usize,
    labelled: bool,
}

/// Reads a little-endian u32 while tracking the byte offset.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), DatasetError> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(parse_err(
                        self.offset + filled as u64,
                        format!("truncated {what}: needed {} bytes, got {filled}", buf.len()),
                    ))
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32, DatasetError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn header(&mut self) -> Result<Header, DatasetError> {
        let mut magic = [0u8; 4];
        self.exact(&mut magic, "magic")?;
        if &magic != OCMF_MAGIC {
            return Err(parse_err(0, format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let version = self.u32("version")?;
        if version != OCMF_VERSION {
            return Err(parse_err(4, format!("unsupported version {version}")));
        }
        let n = self.u32("object count")? as usize;
        let m = self.u32("modality count")? as usize;
        let d = self.u32("feature dim")? as usize;
        let flag = self.u32("label flag")?;
        let labelled = match flag {
            0 => false,
            1 => true,
            other => return Err(parse_err(20, format!("label flag must be 0 or 1, got {other}"))),
        };
        Ok(Header { n, m, d, labelled })
    }

    fn features(&mut self, h: &Header) -> Result<Vec<f32>, DatasetError> {
        let count =
            h.n.checked_mul(h.m)
                .and_then(|x| x.checked_mul(h.d))
                .ok_or_else(|| parse_err(8, "feature payload size overflows"))?;
        let mut bytes = vec![0u8; count * 4];
        self.exact(&mut bytes, "feature payload")?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn labels(&mut self, h: &Header) -> Result<Vec<u32>, DatasetError> {
        let mut bytes = vec![0u8; h.n * 4];
        self.exact(&mut bytes, "label section")?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn names(&mut self, h: &Header) -> Result<Vec<String>, DatasetError> {
        let start = self.offset;
        let len = self.u32("name length")? as usize;
        let mut bytes = vec![0u8; len];
        self.exact(&mut bytes, "modality names")?;
        let text = String::from_utf8(bytes).map_err(|_| parse_err(start + 4, "modality names are not UTF-8"))?;
        let names: Vec<String> = if h.m == 0 {
            Vec::new()
        } else {
            text.split('\n').map(str::to_owned).collect()
        };
        if names.len() != h.m {
            return Err(parse_err(
                start + 4,
                format!("{} modality names for {} modalities", names.len(), h.m),
            ));
        }
        Ok(names)
    }

    fn expect_eof(&mut self) -> Result<(), DatasetError> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(parse_err(self.offset, "trailing bytes after modality names")),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Parses a complete OCMF stream, labels included.
pub fn read_ocmf_from<R: Read>(reader: R) -> Result<FeatureSet, DatasetError> {
    let mut cur = Cursor {
        inner: reader,
        offset: 0,
    };
    let h = cur.header()?;
    let data = cur.features(&h)?;
    let labels = if h.labelled { Some(cur.labels(&h)?) } else { None };
    let names = cur.names(&h)?;
    cur.expect_eof()?;
    let features = ModalFeatures::new(h.n, h.m, h.d, data, names).map_err(|e| parse_err(0, e.to_string()))?;
    FeatureSet::new(features, labels)
}

/// Parses the features of an OCMF stream and seeks over the label section
/// without reading it.
pub fn read_ocmf_features_from<R: Read + Seek>(reader: R) -> Result<ModalFeatures, DatasetError> {
    let mut cur = Cursor {
        inner: reader,
        offset: 0,
    };
    let h = cur.header()?;
    let data = cur.features(&h)?;
    if h.labelled {
        let skip = (h.n * 4) as u64;
        let end = cur.inner.seek(SeekFrom::End(0))?;
        let target = cur.offset + skip;
        if target > end {
            return Err(parse_err(end, "truncated label section"));
        }
        cur.inner.seek(SeekFrom::Start(target))?;
        cur.offset = target;
    }
    let names = cur.names(&h)?;
    cur.expect_eof()?;
    ModalFeatures::new(h.n, h.m, h.d, data, names).map_err(|e| parse_err(0, e.to_string()))
}

pub fn write_ocmf_to<W: Write>(fs: &FeatureSet, mut w: W) -> Result<(), DatasetError> {
    let f = &fs.features;
    let to_u32 =
        |x: usize, what: &str| u32::try_from(x).map_err(|_| DatasetError::Invalid(format!("{what} {x} exceeds u32")));
    w.write_all(OCMF_MAGIC)?;
    for v in [
        OCMF_VERSION,
        to_u32(f.n_objects, "object count")?,
        to_u32(f.n_modalities, "modality count")?,
        to_u32(f.feature_dim, "feature dim")?,
        u32::from(fs.labels.is_some()),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for x in &f.data {
        w.write_all(&x.to_le_bytes())?;
    }
    if let Some(labels) = &fs.labels {
        for l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    let names = f.modality_names.join("\n");
    w.write_all(&to_u32(names.len(), "name length")?.to_le_bytes())?;
    w.write_all(names.as_bytes())?;
    Ok(())
}

pub fn read_ocmf(path: impl AsRef<Path>) -> Result<FeatureSet, DatasetError> {
    read_ocmf_from(BufReader::new(File::open(path)?))
}

/// Unbuffered on purpose: a read-ahead buffer would pull label bytes in.
pub fn read_ocmf_features(path: impl AsRef<Path>) -> Result<ModalFeatures, DatasetError> {
    read_ocmf_features_from(File::open(path)?)
}

pub fn write_ocmf(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ocmf_to(fs, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn ocmf_bytes(fs: &FeatureSet) -> Vec<u8> {
    let mut out = Vec::new();
    write_ocmf_to(fs, &mut out).expect("writing to memory");
    out
}

/// Byte range `[start, end)` of the label section for a header, if any.
pub fn label_section_range(n: usize, m: usize, d: usize, labelled: bool) -> Option<(u64, u64)> {
    labelled.then(|| {
        let start = HEADER_LEN + (n * m * d * 4) as u64;
        (start, start + (n * 4) as u64)
    })
}

/// Writes `key=value` lines next to a data file (`<path>.manifest`).
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(&str, String)]) -> io::Result<()> {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".manifest");
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push('=');
        text.push_str(&v.replace('\n', " "));
        text.push('\n');
    }
    std::fs::write(p, text)
}

/// Reads the sidecar written by [`write_manifest`], if there is one.
pub fn read_manifest(path: impl AsRef<Path>) -> io::Result<Option<Vec<(String, String)>>> {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".manifest");
    let text = match std::fs::read_to_string(p) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    ))
}
