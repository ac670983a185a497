//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "RFCL" | version u16 | layer count u16
//! per layer: kind u8 (bit 7 set for the low-res pathway) | dims u32..
//! parameter count u64 | parameters f32..
//! optional SI block: "SIX1" | w_acc, omega, anchor, prev_final as f32.. | c f64 | xi f64 | center u32
//! CRC32 of every preceding byte, u32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec, ModelState, Pathway};
use crate::si::SiState;

pub const MAGIC: &[u8; 4] = b"RFCL";
pub const SI_TAG: &[u8; 4] = b"SIX1";
pub const FORMAT_VERSION: u16 = 1;
const LOW_RES_BIT: u8 = 0x80;

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(model: &ModelState<f32>, si: Option<&SiState<f32>>) -> Result<Vec<u8>> {
    let layers = model.layers();
    let count = u16::try_from(layers.len())
        .map_err(|_| Error::Checkpoint("too many layers".into()))?;
    let n = model.param_count();
    let mut out = Vec::with_capacity(32 + 4 * n * if si.is_some() { 5 } else { 1 });
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for l in layers {
        let mut code = l.kind.code();
        if l.pathway == Pathway::LowRes {
            code |= LOW_RES_BIT;
        }
        out.push(code);
        for d in l.kind.dims() {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    out.extend_from_slice(&(n as u64).to_le_bytes());
    put_f32s(&mut out, model.theta());
    if let Some(si) = si {
        if si.len() != n {
            return Err(Error::Length {
                expected: n,
                got: si.len(),
            });
        }
        out.extend_from_slice(SI_TAG);
        for v in [si.w_acc(), si.omega(), si.anchor(), si.prev_final()] {
            put_f32s(&mut out, v);
        }
        out.extend_from_slice(&si.c().to_le_bytes());
        out.extend_from_slice(&si.xi().to_le_bytes());
        out.extend_from_slice(&si.center_index().to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelState<f32>, Option<SiState<f32>>)> {
    if bytes.len() < 4 + 2 + 2 + 8 + 4 {
        return Err(Error::Checkpoint("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = u16::from_le_bytes(r.array()?);
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let raw = r.array::<1>()?[0];
        let code = raw & !LOW_RES_BIT;
        let nd = LayerKind::dim_count(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown layer code {code}")))?;
        let dims: Vec<u32> = (0..nd)
            .map(|_| r.array().map(u32::from_le_bytes))
            .collect::<Result<_>>()?;
        let kind = LayerKind::from_code(code, &dims)?;
        layers.push(if raw & LOW_RES_BIT != 0 {
            LayerSpec::low(kind)
        } else {
            LayerSpec::normal(kind)
        });
    }
    let n = usize::try_from(u64::from_le_bytes(r.array()?))
        .map_err(|_| Error::Checkpoint("parameter count overflow".into()))?;
    let theta = r.f32s(n)?;
    let model = ModelState::new(layers, theta)?;
    let si = if r.pos == body.len() {
        None
    } else {
        if &r.array::<4>()? != SI_TAG {
            return Err(Error::Checkpoint("unknown extension block".into()));
        }
        let w = r.f32s(n)?;
        let omega = r.f32s(n)?;
        let anchor = r.f32s(n)?;
        let prev = r.f32s(n)?;
        let c = f64::from_le_bytes(r.array()?);
        let xi = f64::from_le_bytes(r.array()?);
        let center = u32::from_le_bytes(r.array()?);
        Some(SiState::from_parts(w, omega, anchor, prev, c, xi, center)?)
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, si))
}

/// Writes atomically (temp file + rename). Returns the byte count.
pub fn save(path: &Path, model: &ModelState<f32>, si: Option<&SiState<f32>>) -> Result<u64> {
    let bytes = encode(model, si)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load(path: &Path) -> Result<(ModelState<f32>, Option<SiState<f32>>)> {
    decode(&fs::read(path)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;
    use crate::si::SiConfig;
    use rand::SeedableRng;

    fn model() -> ModelState<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        ModelState::init(ArchConfig::default().layers().unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn roundtrip_with_and_without_si() {
        let m = model();
        let bytes = encode(&m, None).unwrap();
        assert_eq!(&bytes[..4], b"RFCL");
        let (back, si) = decode(&bytes).unwrap();
        assert!(si.is_none());
        assert_eq!(back, m);
        assert_eq!(encode(&back, None).unwrap(), bytes);

        let si = SiState::new(m.theta(), SiConfig::default()).unwrap();
        let bytes = encode(&m, Some(&si)).unwrap();
        let (back, si2) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(si2.unwrap(), si);
    }

    #[test]
    fn layout_of_a_tiny_model() {
        let layers = vec![
            LayerSpec::normal(LayerKind::Dense { inputs: 1, outputs: 1 }),
            LayerSpec::normal(LayerKind::Sigmoid),
        ];
        let m = ModelState::new(layers, vec![2.0f32, 0.0]).unwrap();
        let b = encode(&m, None).unwrap();
        // magic 4 + version 2 + count 2 + dense (1 + 8) + sigmoid 1 + count 8 + params 8 + crc 4
        assert_eq!(b.len(), 38);
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[6..8], &2u16.to_le_bytes());
        assert_eq!(b[8], 0);
        assert_eq!(b[17], 4);
        assert_eq!(&b[18..26], &2u64.to_le_bytes());
        assert_eq!(&b[26..30], &2.0f32.to_le_bytes());
        let crc = crc32fast::hash(&b[..34]);
        assert_eq!(&b[34..], &crc.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let m = model();
        let mut bytes = encode(&m, None).unwrap();
        bytes[40] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..10]).is_err());
    }
}
