//! On-disk formats.
//!
//! Field archive: compact JSON header, a `\n` and a `0` byte, then the field
//! as little-endian `f32` in `[T, C, spatial…]` order.
//!
//! Checkpoint: 8-byte magic `FFCKPT01`, `u64` header length, JSON header,
//! then for every blob listed in the header a `u64` element count followed by
//! little-endian `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Family, PdeSpec, Trajectory};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::aligner::AlignerConfig;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &str = "PDEARCH1";
pub const ARCHIVE_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FFCKPT01";

/// Field archive header; serialised with fields in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveHeader {
    pub magic: String,
    pub version: u32,
    pub family: Family,
    pub coefficients: BTreeMap<String, f64>,
    pub caption: String,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub extents: Vec<usize>,
    pub dt: f64,
    #[serde(rename = "L")]
    pub lengths: Vec<f64>,
    pub seed: u64,
    pub byte_order: String,
    pub dtype: String,
}

impl ArchiveHeader {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        ArchiveHeader {
            magic: ARCHIVE_MAGIC.into(),
            version: ARCHIVE_VERSION,
            family: t.spec.family,
            coefficients: t.spec.coefficients.clone(),
            caption: t.caption.clone(),
            steps: t.field.steps(),
            channels: t.field.channels(),
            extents: t.field.extents().to_vec(),
            dt: t.spec.dt,
            lengths: t.spec.lengths.clone(),
            seed: t.spec.seed,
            byte_order: "little".into(),
            dtype: "f32".into(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec(self)?;
        b.extend_from_slice(b"\n\0");
        Ok(b)
    }

    pub fn payload_len(&self) -> usize {
        4 * self.steps * self.channels * self.extents.iter().product::<usize>()
    }
}

fn archive_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Archive {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Archive bytes of a trajectory.
pub fn encode_archive(t: &Trajectory) -> Result<Vec<u8>> {
    if !t.field.is_finite() {
        return Err(Error::NonFinite {
            op: "write_archive",
            location: None,
        });
    }
    let header = ArchiveHeader::from_trajectory(t);
    let mut out = header.to_bytes()?;
    out.reserve(header.payload_len());
    for &v in t.field.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_archive(t: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    atomic_write(path, &encode_archive(t)?)
}

/// Splits archive bytes into the parsed header and the payload.
pub fn parse_archive_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(ArchiveHeader, &'a [u8])> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\0")
        .ok_or_else(|| archive_err(path, "header terminator not found"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| archive_err(path, "header is not UTF-8"))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| archive_err(path, format!("header: {e}")))?;
    if value.get("magic").and_then(|m| m.as_str()) != Some(ARCHIVE_MAGIC) {
        return Err(archive_err(path, "bad magic"));
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == ARCHIVE_VERSION as u64 => {}
        other => {
            return Err(archive_err(
                path,
                format!("unsupported version {other:?}, reader is version {ARCHIVE_VERSION}"),
            ))
        }
    }
    let header: ArchiveHeader =
        serde_json::from_value(value).map_err(|e| archive_err(path, format!("header: {e}")))?;
    if header.byte_order != "little" || header.dtype != "f32" {
        return Err(archive_err(
            path,
            format!("unsupported layout {} {}", header.byte_order, header.dtype),
        ));
    }
    Ok((header, &bytes[end + 2..]))
}

pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<Trajectory> {
    let (h, payload) = parse_archive_header(bytes, path)?;
    if payload.len() != h.payload_len() {
        return Err(archive_err(
            path,
            format!("payload is {} bytes, header implies {}", payload.len(), h.payload_len()),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let field = Field::new(data, h.steps, h.channels, h.extents.clone())
        .map_err(|e| archive_err(path, e.to_string()))?;
    let mut spec = PdeSpec::new(h.family, &[], &h.extents, h.steps, h.dt, h.seed);
    spec.coefficients = h.coefficients;
    spec.lengths = h.lengths;
    let params_flat = spec.params_flat().map_err(|e| archive_err(path, e.to_string()))?;
    Ok(Trajectory {
        spec,
        field,
        caption: h.caption,
        params_flat,
    })
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes, path)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Position of a seeded ChaCha8 stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// `word_pos` of the generator, as a decimal string (128-bit).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    step: u64,
    rng: RngState,
    counters: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aligner: Option<AlignerConfig>,
    blobs: Vec<BlobEntry>,
}

/// Model configuration plus every named tensor (parameters and optimizer
/// moments) needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub rng: RngState,
    /// Per-tensor integer state such as Adam step counts.
    pub counters: BTreeMap<String, u64>,
    /// Present when the file carries a trained aligner.
    pub aligner: Option<AlignerConfig>,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: 1,
            model: self.model.clone(),
            step: self.step,
            rng: self.rng,
            counters: self.counters.clone(),
            aligner: self.aligner.clone(),
            blobs: self
                .tensors
                .iter()
                .map(|(n, t)| BlobEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + h.len() + 8 * (self.tensors.numel() + self.tensors.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, t) in self.tensors.iter() {
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: &str| archive_err(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| archive_err(path, format!("header: {e}")))?;
        if header.version != 1 {
            return Err(err("unsupported checkpoint version"));
        }
        let mut pos = 16 + hlen;
        let mut tensors = ParamStore::new();
        for b in header.blobs {
            let n_bytes = bytes.get(pos..pos + 8).ok_or_else(|| err("truncated blob"))?;
            let n = u64::from_le_bytes(n_bytes.try_into().unwrap()) as usize;
            if n != b.shape.iter().product::<usize>() {
                return Err(archive_err(path, format!("blob {} length mismatch", b.name)));
            }
            pos += 8;
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| err("truncated blob"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            tensors.insert(b.name, Tensor::new(data, b.shape)?);
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes after last blob"));
        }
        Ok(Checkpoint {
            model: header.model,
            step: header.step,
            rng: header.rng,
            counters: header.counters,
            aligner: header.aligner,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// RFC-4180 CSV with an explicit header row, written even when `rows` is
/// empty.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, header: &[&str], rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    atomic_write(path, &csv_bytes(header, rows)?)
}

pub fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Eval(format!("csv buffer: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_trajectory;

    fn traj() -> Trajectory {
        gen_trajectory(&PdeSpec::new(Family::Advection1d, &[("beta", 0.5)], &[16], 3, 0.1, 9)).unwrap()
    }

    #[test]
    fn payload_layout_is_forced() {
        let mut t = traj();
        t.field = Field::new(vec![0.0, 1.0, 2.0, 3.0], 1, 1, vec![4]).unwrap();
        let bytes = encode_archive(&t).unwrap();
        let payload: Vec<u8> = [0.0f32, 1.0, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(&bytes[bytes.len() - 16..], &payload[..]);
        assert!(bytes.starts_with(b"{\"magic\":\"PDEARCH1\",\"version\":1,"));
    }

    #[test]
    fn header_round_trips_bytewise() {
        let t = traj();
        let bytes = encode_archive(&t).unwrap();
        let p = Path::new("mem");
        let (h, _) = parse_archive_header(&bytes, p).unwrap();
        let hb = h.to_bytes().unwrap();
        assert_eq!(&bytes[..hb.len()], &hb[..]);
        let back = decode_archive(&bytes, p).unwrap();
        assert_eq!(back.caption, t.caption);
        assert_eq!(back.spec.coefficients, t.spec.coefficients);
        for (a, b) in back.field.data().iter().zip(t.field.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-30));
        }
    }

    #[test]
    fn truncated_and_wrong_version_are_rejected() {
        let bytes = encode_archive(&traj()).unwrap();
        let p = Path::new("mem");
        let err = decode_archive(&bytes[..bytes.len() - 3], p).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":2", 1);
        let mut v2 = text.into_bytes();
        v2.truncate(bytes.len());
        let err = decode_archive(&v2, p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let mut bad = bytes.clone();
        bad[11] = b'X';
        assert!(decode_archive(&bad, p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut tensors = ParamStore::new();
        tensors.insert("a", Tensor::new(vec![1.0 / 3.0, -0.0, f64::MIN_POSITIVE], vec![3]).unwrap());
        tensors.insert("b", Tensor::zeros(&[2, 2]));
        let ck = Checkpoint {
            model: ModelConfig::default(),
            step: 17,
            rng: RngState {
                seed: 5,
                word_pos: u128::MAX - 3,
            },
            counters: [("a".to_string(), 4)].into_iter().collect(),
            aligner: None,
            tensors,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.rng.word_pos, u128::MAX - 3);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn csv_header_only_when_empty() {
        let rows: Vec<(u32, f64)> = Vec::new();
        let b = csv_bytes(&["step", "loss"], &rows).unwrap();
        assert_eq!(b, b"step,loss\n");
        let b = csv_bytes(&["step", "loss"], &[(1u32, 0.5f64)]).unwrap();
        assert_eq!(b, b"step,loss\n1,0.5\n");
    }
}
