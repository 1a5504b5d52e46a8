//! Little-endian binary checkpoint container.
//!
//! ```text
//! "E4GX" u32 version u64 N u64 V u32 k u32 B
//! f32 means[N·3] rot_raw[N·4] log_scales[N·3] opacity_logits[N]
//!     color_logits[N·3] mean_coeffs[N·3·2B] scale_coeffs[N·3·2B]
//!     opacity_coeffs[N·2B] embeddings[V·k]
//! 3 × net: u32 layers, per layer u32 in u32 out u8 activation,
//!          f32 weights[out·in] biases[out]   (bright, dark, spatial)
//! u64 len, UTF-8 config echo
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::illumination::{ConcealingNetworks, SpatialNetwork};
use crate::model::Model;
use crate::nn::{Activation, Layer, Mlp};
use crate::scene::{DeformationField, GaussianSet, IlluminationEmbeddings};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"E4GX";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.0.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fn net(&mut self, net: &Mlp) {
        self.u32(net.layers.len() as u32);
        for l in &net.layers {
            self.u32(l.in_dim as u32);
            self.u32(l.out_dim as u32);
            self.u8(l.activation.code());
            self.floats(&l.weights);
            self.floats(&l.biases);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, n: u64, width: usize) -> Result<usize> {
        let n = usize::try_from(n).map_err(|_| Error::Truncated)?;
        let total = n.checked_mul(width).ok_or(Error::Truncated)?;
        if total.checked_mul(4).map_or(true, |b| b > self.buf.len() - self.pos) {
            return Err(Error::Truncated);
        }
        Ok(total)
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn rows<const W: usize>(&mut self, n: usize) -> Result<Vec<[f64; W]>> {
        let flat = self.floats(n * W)?;
        Ok(flat.chunks_exact(W).map(|c| c.try_into().unwrap()).collect())
    }
    fn net(&mut self) -> Result<Mlp> {
        let count = self.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..count {
            let in_dim = self.u32()? as usize;
            let out_dim = self.u32()? as usize;
            let code = self.u8()?;
            let activation = Activation::from_code(code)
                .ok_or_else(|| Error::ShapeMismatch(format!("unknown activation code {code}")))?;
            let wlen = self.len(in_dim as u64, out_dim)?;
            let weights = self.floats(wlen)?;
            let biases = self.floats(out_dim)?;
            layers.push(Layer {
                in_dim,
                out_dim,
                weights,
                biases,
                activation,
            });
        }
        let net = Mlp { layers };
        net.check()?;
        Ok(net)
    }
}

pub fn encode_checkpoint(model: &Model, config_echo: &str) -> Vec<u8> {
    let g = &model.gaussians;
    let f = &model.field;
    let e = &model.embeddings;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(g.len() as u64);
    w.u64(e.views() as u64);
    w.u32(e.dim as u32);
    w.u32(f.order as u32);
    w.floats(g.means.iter().flatten());
    w.floats(g.rot_raw.iter().flatten());
    w.floats(g.log_scales.iter().flatten());
    w.floats(&g.opacity_logits);
    w.floats(g.color_logits.iter().flatten());
    w.floats(&f.mean_coeffs);
    w.floats(&f.scale_coeffs);
    w.floats(&f.opacity_coeffs);
    w.floats(&e.table);
    w.net(&model.region.bright);
    w.net(&model.region.dark);
    w.net(&model.spatial.net);
    w.u64(config_echo.len() as u64);
    w.0.extend_from_slice(config_echo.as_bytes());
    w.0
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(Model, String)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let n = r.u64()?;
    let v = r.u64()?;
    let k = r.u32()? as usize;
    let order = r.u32()? as usize;
    let n3 = r.len(n, 3)? / 3;
    let gaussians = GaussianSet {
        means: r.rows::<3>(n3)?,
        rot_raw: r.rows::<4>(n3)?,
        log_scales: r.rows::<3>(n3)?,
        opacity_logits: r.floats(n3)?,
        color_logits: r.rows::<3>(n3)?,
    };
    let coeff = r.len(n, 6 * order)?;
    let field = DeformationField {
        order,
        mean_coeffs: r.floats(coeff)?,
        scale_coeffs: r.floats(coeff)?,
        opacity_coeffs: r.floats(coeff / 3)?,
    };
    let elen = r.len(v, k)?;
    let embeddings = IlluminationEmbeddings {
        dim: k,
        table: r.floats(elen)?,
    };
    let bright = r.net()?;
    let dark = r.net()?;
    let spatial = r.net()?;
    let echo_len = usize::try_from(r.u64()?).map_err(|_| Error::Truncated)?;
    let echo = String::from_utf8(r.take(echo_len)?.to_vec())
        .map_err(|_| Error::BadConfig("config echo is not UTF-8".into()))?;
    if r.pos != buf.len() {
        return Err(Error::ShapeMismatch("trailing bytes after checkpoint".into()));
    }
    Ok((
        Model {
            gaussians,
            field,
            embeddings,
            region: ConcealingNetworks { bright, dark },
            spatial: SpatialNetwork { net: spatial },
        },
        echo,
    ))
}

pub fn save_checkpoint(model: &Model, config_echo: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(model, config_echo)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, String)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(order: usize) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = GaussianSet {
            means: vec![[0.1, 0.2, 2.0]],
            rot_raw: vec![[1.0, 0.0, 0.0, 0.0]],
            log_scales: vec![[-3.0; 3]],
            opacity_logits: vec![0.3],
            color_logits: vec![[0.1, -0.2, 0.4]],
        };
        Model::new(g, DeformationField::zeros(1, order), 1, 32, 0.1, &mut rng)
    }

    #[test]
    fn size_follows_layout() {
        let echo = "iterations=10\n";
        let bytes = encode_checkpoint(&tiny_model(0), echo);
        let header = 4 + 4 + 8 + 8 + 4 + 4;
        let arrays = 4 * (3 + 4 + 3 + 1 + 3 + 32);
        let layer = |i: usize, o: usize| 9 + 4 * (i * o + o);
        let region = 4 + layer(35, 64) + layer(64, 64) + layer(64, 2);
        let spatial = 4 + layer(32, 64) + layer(64, 64) + layer(64, 1);
        assert_eq!(region, 26407);
        assert_eq!(spatial, 25379);
        assert_eq!(bytes.len(), header + arrays + 2 * region + spatial + 8 + echo.len());
        assert!(decode_checkpoint(&bytes).is_ok());
    }

    #[test]
    fn reencode_is_identical() {
        let bytes = encode_checkpoint(&tiny_model(2), "a=1\n");
        let (m, echo) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&m, &echo), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = encode_checkpoint(&tiny_model(1), "");
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated)));
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::VersionUnsupported(9))));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic)));
        assert!(matches!(decode_checkpoint(b"E4"), Err(Error::BadMagic)));
    }
}
