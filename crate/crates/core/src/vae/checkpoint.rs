//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "PHVAECKP"
//! version   u32
//! kind      u8       0 = gaussian, 1 = ph
//! data_dim  u32
//! latent    u32
//! phases    u32
//! encoder   u32 layer-width count, then u32 widths
//! decoder   u32 layer-width count, then u32 widths
//! params    f64 values: encoder w0, b0, w1, b1, ... then decoder, row-major
//! ```

use super::{DecoderKind, VaeModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::neural::Mlp;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PHVAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_mlp_widths(out: &mut Vec<u8>, mlp: &Mlp) -> Result<()> {
    put_u32(out, mlp.widths().len())?;
    for &w in mlp.widths() {
        put_u32(out, w)?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &VaeModel, mut w: W) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match model.kind() {
        DecoderKind::Gaussian => 0,
        DecoderKind::Ph => 1,
    });
    put_u32(&mut out, model.data_dim())?;
    put_u32(&mut out, model.latent_dim())?;
    put_u32(&mut out, model.phases())?;
    put_mlp_widths(&mut out, &model.encoder)?;
    put_mlp_widths(&mut out, &model.decoder)?;
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| self.u32()).collect()
    }

    fn mlp(&mut self, widths: Vec<usize>) -> Result<Mlp> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let wd = (0..w[0] * w[1]).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            weights.push(Tensor::new(w[0], w[1], wd)?);
            let bd = (0..w[1]).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            biases.push(Tensor::new(1, w[1], bd)?);
        }
        Mlp::from_parts(widths, weights, biases)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<VaeModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = match c.take(1)?[0] {
        0 => DecoderKind::Gaussian,
        1 => DecoderKind::Ph,
        k => return Err(Error::Checkpoint(format!("unknown decoder kind {k}"))),
    };
    let data_dim = c.u32()?;
    let latent = c.u32()?;
    let phases = c.u32()?;
    let enc_w = c.widths()?;
    let dec_w = c.widths()?;
    let encoder = c.mlp(enc_w)?;
    let decoder = c.mlp(dec_w)?;
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    VaeModel::from_networks(kind, data_dim, latent, phases, encoder, decoder)
}

pub fn save_checkpoint(model: &VaeModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VaeModel> {
    read_checkpoint(std::fs::File::open(path)?)
}
