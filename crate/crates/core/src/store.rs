//! Binary adapter container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! header   "OFTK" | version u32 | entry count u32 | reserved u32
//! entry    kind u8 | shared u8 | reserved u16 | reserved u32
//!          d u64 | n u64 | r u64 | eps_prime f64
//!          payload count u64 | theta count u64
//!          payload f64 x payload count
//! trailer  SHA-256 of every preceding byte
//! ```
//!
//! For adapter entries the payload is the skew free parameters (block by
//! block, strict upper triangle row by row) followed by `θ`. A merged entry
//! holds the `d x n` weight row-major with `r = 0` and no `θ`.
//!
//! Loading verifies the checksum before parsing anything, so a truncated or
//! altered file never yields a partial adapter.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adapter::{skew_free_count, Adapter, Mode, OrthoTransform, SkewParams};
use crate::energy;
use crate::error::{OftError, Result};
use crate::Mat;

pub const MAGIC: [u8; 4] = *b"OFTK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const ENTRY_HEADER_LEN: usize = 56;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Oft = 0,
    Coft = 1,
    Rescaled = 2,
    Merged = 3,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Kind::Oft,
            1 => Kind::Coft,
            2 => Kind::Rescaled,
            3 => Kind::Merged,
            other => return Err(OftError::Corrupt(format!("unknown entry kind {other}"))),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Oft => "oft",
            Kind::Coft => "coft",
            Kind::Rescaled => "rescaled_oft",
            Kind::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Adapter(Adapter<f64>),
    Merged(Mat),
}

impl Entry {
    fn kind(&self) -> Kind {
        match self {
            Entry::Adapter(a) => match a.mode() {
                Mode::Oft => Kind::Oft,
                Mode::Coft { .. } => Kind::Coft,
                Mode::Rescaled => Kind::Rescaled,
            },
            Entry::Merged(_) => Kind::Merged,
        }
    }
}

/// An ordered list of layer entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterFile {
    pub entries: Vec<Entry>,
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn check_coft(a: &Adapter<f64>) -> Result<()> {
    if let Mode::Coft { eps_prime } = a.mode() {
        let norm = a.skew_norm();
        if norm > eps_prime {
            return Err(OftError::InvalidConfig(format!(
                "coft adapter violates its constraint: ‖Q‖_F = {norm:e} > {eps_prime:e}"
            )));
        }
    }
    Ok(())
}

impl AdapterFile {
    pub fn new(entries: Vec<Entry>) -> Self {
        AdapterFile { entries }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for entry in &self.entries {
            let kind = entry.kind();
            let (d, n, r, shared, eps, payload, theta) = match entry {
                Entry::Adapter(a) => {
                    check_coft(a)?;
                    let t = a.transform();
                    let eps = match a.mode() {
                        Mode::Coft { eps_prime } => eps_prime,
                        _ => 0.0,
                    };
                    let theta = a.log_scales().map_or(0, <[f64]>::len);
                    (a.input_dim(), a.num_neurons(), t.num_blocks(), t.is_shared(), eps, a.params(), theta)
                }
                Entry::Merged(w) => (w.rows(), w.cols(), 0, false, 0.0, w.as_slice().to_vec(), 0),
            };
            out.push(kind as u8);
            out.push(shared as u8);
            out.extend_from_slice(&[0u8; 6]);
            put_u64(&mut out, d);
            put_u64(&mut out, n);
            put_u64(&mut out, r);
            out.extend_from_slice(&eps.to_le_bytes());
            put_u64(&mut out, payload.len());
            put_u64(&mut out, theta);
            for v in payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= MAGIC.len() && bytes[..MAGIC.len()] != MAGIC {
            return Err(OftError::Corrupt("not an adapter file (bad magic)".into()));
        }
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(OftError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(OftError::Checksum);
        }
        let mut rd = Reader { buf: body, pos: MAGIC.len() };
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(OftError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let count = rd.u32()? as usize;
        if rd.u32()? != 0 {
            return Err(OftError::Corrupt("reserved header field is not zero".into()));
        }
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            entries.push(rd.entry()?);
        }
        if rd.pos != body.len() {
            return Err(OftError::Corrupt(format!("{} trailing bytes", body.len() - rd.pos)));
        }
        Ok(AdapterFile { entries })
    }

    /// Writes the container and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| OftError::io(path, e))?;
        let meta = Sidecar::new(self, &bytes);
        let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
        let side = sidecar_path(path);
        std::fs::write(&side, json).map_err(|e| OftError::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| OftError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos.checked_add(N).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| OftError::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = self.buf[self.pos..end].try_into().expect("length checked");
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take()?);
        usize::try_from(v).map_err(|_| OftError::Corrupt(format!("size {v} out of range")))
    }

    fn entry(&mut self) -> Result<Entry> {
        let start = self.pos;
        let [kind, shared, z0, z1, z2, z3, z4, z5] = self.take::<8>()?;
        let kind = Kind::from_u8(kind)?;
        if [z0, z1, z2, z3, z4, z5] != [0; 6] {
            return Err(OftError::Corrupt("reserved entry field is not zero".into()));
        }
        let shared = match shared {
            0 => false,
            1 => true,
            other => return Err(OftError::Corrupt(format!("shared flag {other}"))),
        };
        let (d, n, r) = (self.usize()?, self.usize()?, self.usize()?);
        let eps = self.f64()?;
        let count = self.usize()?;
        let theta = self.usize()?;
        debug_assert_eq!(self.pos - start, ENTRY_HEADER_LEN);
        if count > (self.buf.len() - self.pos) / 8 {
            return Err(OftError::Corrupt(format!("payload of {count} values exceeds file")));
        }
        let payload: Vec<f64> = (0..count).map(|_| self.f64()).collect::<Result<_>>()?;
        let corrupt = |what: String| OftError::Corrupt(what);

        if kind == Kind::Merged {
            if r != 0 || shared || eps != 0.0 || theta != 0 || d.checked_mul(n) != Some(count) {
                return Err(corrupt(format!("inconsistent merged entry {d}x{n} with {count} values")));
            }
            return Mat::from_vec(d, n, payload)
                .map(Entry::Merged)
                .map_err(|e| corrupt(e.to_string()));
        }

        if r == 0 || d == 0 || d % r != 0 {
            return Err(corrupt(format!("block count {r} does not divide d = {d}")));
        }
        let b = d / r;
        let stored = if shared { 1 } else { r };
        let skew = stored * skew_free_count(b);
        let want_theta = if kind == Kind::Rescaled { n } else { 0 };
        if theta != want_theta || count != skew + theta {
            return Err(corrupt(format!(
                "skew layout mismatch: {count} values, expected {skew} skew + {want_theta} theta"
            )));
        }
        let mode = match kind {
            Kind::Oft => Mode::Oft,
            Kind::Coft => Mode::Coft { eps_prime: eps },
            _ => Mode::Rescaled,
        };
        if kind != Kind::Coft && eps != 0.0 {
            return Err(corrupt("eps_prime set on a non-coft entry".into()));
        }
        let per = skew_free_count(b);
        let blocks = (0..stored)
            .map(|k| SkewParams::from_free(b, payload[k * per..(k + 1) * per].to_vec()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| corrupt(e.to_string()))?;
        let transform = OrthoTransform::from_blocks(d, r, shared, blocks).map_err(|e| corrupt(e.to_string()))?;
        let scales = (kind == Kind::Rescaled).then(|| payload[skew..].to_vec());
        let a = Adapter::from_parts(n, transform, mode, scales).map_err(|e| corrupt(e.to_string()))?;
        check_coft(&a).map_err(|e| corrupt(e.to_string()))?;
        Ok(Entry::Adapter(a))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize)]
struct SidecarEntry {
    kind: &'static str,
    d: usize,
    n: usize,
    r: usize,
    shared: bool,
    eps_prime: Option<f64>,
    num_params: usize,
    skew_norm: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Sidecar {
    format: &'static str,
    version: u32,
    sha256: String,
    entries: Vec<SidecarEntry>,
}

impl Sidecar {
    fn new(file: &AdapterFile, bytes: &[u8]) -> Self {
        let digest = &bytes[bytes.len() - DIGEST_LEN..];
        let entries = file
            .entries
            .iter()
            .map(|e| match e {
                Entry::Adapter(a) => SidecarEntry {
                    kind: e.kind().name(),
                    d: a.input_dim(),
                    n: a.num_neurons(),
                    r: a.transform().num_blocks(),
                    shared: a.transform().is_shared(),
                    eps_prime: match a.mode() {
                        Mode::Coft { eps_prime } => Some(eps_prime),
                        _ => None,
                    },
                    num_params: a.num_params(),
                    skew_norm: Some(a.skew_norm()),
                },
                Entry::Merged(w) => SidecarEntry {
                    kind: "merged",
                    d: w.rows(),
                    n: w.cols(),
                    r: 0,
                    shared: false,
                    eps_prime: None,
                    num_params: 0,
                    skew_norm: None,
                },
            })
            .collect();
        Sidecar {
            format: "oftk",
            version: FORMAT_VERSION,
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            entries,
        }
    }
}

pub fn save_adapter(a: &Adapter<f64>, path: &Path) -> Result<()> {
    AdapterFile::new(vec![Entry::Adapter(a.clone())]).save(path)
}

/// Loads a file holding exactly one adapter entry.
pub fn load_adapter(path: &Path) -> Result<Adapter<f64>> {
    let file = AdapterFile::load(path)?;
    match <[Entry; 1]>::try_from(file.entries) {
        Ok([Entry::Adapter(a)]) => Ok(a),
        Ok([Entry::Merged(_)]) => Err(OftError::Corrupt("file holds a merged weight, not an adapter".into())),
        Err(v) => Err(OftError::Corrupt(format!("expected one entry, found {}", v.len()))),
    }
}

/// Writes `R·W⁰` (times `D` when rescaled) as a plain merged weight.
pub fn export_merged(a: &Adapter<f64>, w0: &Mat, path: &Path) -> Result<()> {
    let merged = a.merge(w0)?;
    AdapterFile::new(vec![Entry::Merged(merged)]).save(path)
}

pub fn load_merged(path: &Path) -> Result<Mat> {
    let file = AdapterFile::load(path)?;
    match <[Entry; 1]>::try_from(file.entries) {
        Ok([Entry::Merged(w)]) => Ok(w),
        Ok([Entry::Adapter(_)]) => Err(OftError::Corrupt("file holds an adapter, not a merged weight".into())),
        Err(v) => Err(OftError::Corrupt(format!("expected one entry, found {}", v.len()))),
    }
}

/// Energy report of a merged export against the original weight.
pub fn merged_energy_report(w0: &Mat, merged: &Mat) -> Result<energy::EnergyReport> {
    energy::compare(w0, merged)
}
