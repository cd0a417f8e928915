//! Embedding bundles and the DTME binary container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! header   magic "DTME" | u32 version (=1) | u32 d_raw | u32 record_count
//! record   u16 id_len | id_len bytes UTF-8 variant_id | u8 track_count
//!          track_count x ( u8 role_tag | u32 width | width x f32 )
//! ```
//!
//! Every track width must equal the header `d_raw`. Records are written in
//! ascending `variant_id` order; trailing bytes after the last record are an
//! error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTME_MAGIC: &[u8; 4] = b"DTME";
pub const DTME_VERSION: u32 = 1;

/// Role of one embedding stream within a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackRole {
    SeqCls,
    SeqPos,
    StructCls,
    StructPos,
    Avg,
}

impl TrackRole {
    pub const ALL: [TrackRole; 5] = [
        TrackRole::SeqCls,
        TrackRole::SeqPos,
        TrackRole::StructCls,
        TrackRole::StructPos,
        TrackRole::Avg,
    ];

    pub fn tag(self) -> u8 {
        match self {
            TrackRole::SeqCls => 0,
            TrackRole::SeqPos => 1,
            TrackRole::StructCls => 2,
            TrackRole::StructPos => 3,
            TrackRole::Avg => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        TrackRole::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TrackRole::SeqCls => "seq_cls",
            TrackRole::SeqPos => "seq_pos",
            TrackRole::StructCls => "struct_cls",
            TrackRole::StructPos => "struct_pos",
            TrackRole::Avg => "avg",
        }
    }
}

impl fmt::Display for TrackRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named embedding tracks for one protein variant. Values are stored as
/// `f32` and widened to `f64` for computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    pub variant_id: String,
    pub tracks: BTreeMap<TrackRole, Vec<f32>>,
}

impl EmbeddingBundle {
    pub fn new(variant_id: impl Into<String>) -> Self {
        EmbeddingBundle {
            variant_id: variant_id.into(),
            tracks: BTreeMap::new(),
        }
    }

    pub fn with_track(mut self, role: TrackRole, values: Vec<f32>) -> Self {
        self.tracks.insert(role, values);
        self
    }

    /// Shared track width, or a data error if the tracks disagree.
    pub fn d_raw(&self) -> Result<usize> {
        let mut widths = self.tracks.iter().map(|(r, v)| (r, v.len()));
        let Some((_, d)) = widths.next() else {
            return Err(Error::data(format!("bundle '{}' has no tracks", self.variant_id)));
        };
        for (role, w) in widths {
            if w != d {
                return Err(Error::data(format!(
                    "bundle '{}': track {role} has width {w}, expected {d}",
                    self.variant_id
                )));
            }
        }
        Ok(d)
    }

    pub fn track(&self, role: TrackRole) -> Result<&[f32]> {
        self.tracks.get(&role).map(Vec::as_slice).ok_or_else(|| {
            Error::data(format!("bundle '{}' is missing track {role}", self.variant_id))
        })
    }

    pub fn track_f64(&self, role: TrackRole) -> Result<Vec<f64>> {
        Ok(self.track(role)?.iter().map(|&v| f64::from(v)).collect())
    }
}

/// Bundles keyed by variant id.
pub type BundleSet = BTreeMap<String, EmbeddingBundle>;

pub fn encode_bundles(bundles: &BundleSet) -> Result<Vec<u8>> {
    let mut d_raw: Option<usize> = None;
    for b in bundles.values() {
        let d = b.d_raw()?;
        match d_raw {
            None => d_raw = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::data(format!(
                    "bundle '{}' has width {d}, file width is {prev}",
                    b.variant_id
                )))
            }
            _ => {}
        }
        if b.tracks.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("bundle '{}' holds non-finite values", b.variant_id)));
        }
    }
    let d_raw = d_raw.unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(DTME_MAGIC);
    out.extend_from_slice(&DTME_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(d_raw).map_err(|_| Error::data("d_raw too large"))?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(bundles.len()).map_err(|_| Error::data("too many bundles"))?.to_le_bytes());
    for (id, b) in bundles {
        if *id != b.variant_id {
            return Err(Error::data(format!("bundle keyed '{id}' carries id '{}'", b.variant_id)));
        }
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::data(format!("variant id '{id}' exceeds 65535 bytes")))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.push(b.tracks.len() as u8);
        for (role, values) in &b.tracks {
            out.push(role.tag());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: needed {n} bytes for {what}, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_bundles(buf: &[u8]) -> Result<BundleSet> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != DTME_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"DTME\""));
    }
    let version = c.u32("version")?;
    if version != DTME_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let d_raw = c.u32("d_raw")? as usize;
    let count = c.u32("record count")?;
    if count > 0 && d_raw == 0 {
        return Err(Error::format(8, "d_raw is 0 but records are present"));
    }
    let mut out = BundleSet::new();
    for _ in 0..count {
        let start = c.pos as u64;
        let id_len = c.u16("id length")? as usize;
        let id = std::str::from_utf8(c.take(id_len, "variant id")?)
            .map_err(|_| Error::format(start + 2, "variant id is not UTF-8"))?
            .to_string();
        let n_tracks = c.u8("track count")?;
        if n_tracks == 0 {
            return Err(Error::format(c.pos as u64 - 1, format!("bundle '{id}' has no tracks")));
        }
        let mut bundle = EmbeddingBundle::new(id.clone());
        for _ in 0..n_tracks {
            let at = c.pos as u64;
            let tag = c.u8("track role")?;
            let role = TrackRole::from_tag(tag)
                .ok_or_else(|| Error::format(at, format!("unknown track role tag {tag}")))?;
            let width = c.u32("track width")? as usize;
            if width != d_raw {
                return Err(Error::format(
                    at + 1,
                    format!("bundle '{id}' track {role} has width {width}, file width is {d_raw}"),
                ));
            }
            let raw = c.take(width * 4, "track values")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(at, format!("bundle '{id}' track {role} holds non-finite values")));
            }
            if bundle.tracks.insert(role, values).is_some() {
                return Err(Error::format(at, format!("bundle '{id}' repeats track {role}")));
            }
        }
        if out.insert(id.clone(), bundle).is_some() {
            return Err(Error::format(start, format!("duplicate variant id '{id}'")));
        }
    }
    if c.pos != buf.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last record"));
    }
    Ok(out)
}

pub fn write_bundles(path: impl AsRef<Path>, bundles: &BundleSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundles(bundles)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bundles(path: impl AsRef<Path>) -> Result<BundleSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundles(&bytes)
}
