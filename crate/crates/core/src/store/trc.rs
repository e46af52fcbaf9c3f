//! The `.trc` sparse tile format.
//!
//! ```text
//! magic "TRNC" | version u16 = 1 | zoom u8 = 16 | reserved u8 = 0
//! tile_x u32 | tile_y u32 | channel_count u16
//! per channel: nnz u32, then nnz x (pixel_index u16, value f32)
//! ```
//! Little-endian throughout; pixel indices strictly increasing per channel.

use crate::error::{Error, Result};
use crate::geo::{TileKey, TILE_PIXELS, TILE_ZOOM};

use super::ChannelPlane;

pub const MAGIC: &[u8; 4] = b"TRNC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTileRecord {
    pub tile: TileKey,
    /// Per channel, `(pixel_index, value)` pairs.
    pub channels: Vec<Vec<(u16, f32)>>,
}

impl SparseTileRecord {
    pub fn empty(tile: TileKey, channel_count: usize) -> Self {
        SparseTileRecord { tile, channels: vec![Vec::new(); channel_count] }
    }

    /// Keeps every pixel that is not `0.0`.
    pub fn from_dense(tile: TileKey, planes: &[ChannelPlane]) -> Self {
        let channels = planes
            .iter()
            .map(|p| {
                p.values()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, v)| (i as u16, *v))
                    .collect()
            })
            .collect();
        SparseTileRecord { tile, channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() > u16::MAX as usize {
            return Err(Error::validation("too many channels"));
        }
        for (c, entries) in self.channels.iter().enumerate() {
            for w in entries.windows(2) {
                if w[0].0 >= w[1].0 {
                    return Err(Error::validation(format!(
                        "channel {c}: pixel indices not strictly increasing ({} then {})",
                        w[0].0, w[1].0
                    )));
                }
            }
            if let Some((i, v)) = entries.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::validation(format!("channel {c}: non-finite value {v} at {i}")));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Vec<ChannelPlane> {
        self.channels
            .iter()
            .map(|entries| {
                let mut plane = ChannelPlane::zeros();
                for &(i, v) in entries {
                    plane.values_mut()[i as usize] = v;
                }
                plane
            })
            .collect()
    }

    pub fn nnz(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(18 + self.channels.len() * 4 + self.nnz() * 6);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(TILE_ZOOM);
        out.push(0);
        out.extend_from_slice(&self.tile.x.to_le_bytes());
        out.extend_from_slice(&self.tile.y.to_le_bytes());
        out.extend_from_slice(&(self.channels.len() as u16).to_le_bytes());
        for entries in &self.channels {
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for &(i, v) in entries {
                out.extend_from_slice(&i.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::validation("not a .trc file (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::validation(format!("unsupported .trc version {version}")));
        }
        let zoom = r.u8()?;
        let _reserved = r.u8()?;
        if zoom != TILE_ZOOM {
            return Err(Error::validation(format!(".trc tile zoom {zoom}, expected 16")));
        }
        let tile = TileKey::new(r.u32()?, r.u32()?)
            .map_err(|e| Error::validation(e.to_string()))?;
        let count = r.u16()? as usize;
        let mut channels = Vec::with_capacity(count);
        for _ in 0..count {
            let nnz = r.u32()? as usize;
            if nnz > TILE_PIXELS {
                return Err(Error::validation(format!("channel nnz {nnz} exceeds tile size")));
            }
            let mut entries = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                entries.push((r.u16()?, r.f32()?));
            }
            channels.push(entries);
        }
        if r.pos != bytes.len() {
            return Err(Error::validation(format!("{} trailing bytes in .trc", bytes.len() - r.pos)));
        }
        let rec = SparseTileRecord { tile, channels };
        rec.validate()?;
        Ok(rec)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::validation("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
