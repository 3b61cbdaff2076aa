//! Versioned little-endian binary container for [`NetworkSpec`].
//!
//! Layout (see `docs/network-format.md`):
//!
//! ```text
//! magic   [u8; 4]  "SDNT"
//! version u16      1
//! flags   u16      bit 0: readout input discretized
//! layers  u32
//! per layer:
//!   d_in u32, d_out u32, activation u8, scale_kind u8, reserved u16 = 0
//!   scales  f64 × (1 if scale_kind == 0 else d_in)
//!   weights f64 × d_in·d_out   (row-major, row = input unit)
//!   bias    f64 × d_out
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::quantize::ScaleVector;
use crate::tensor::DenseMatrix;

use super::{Activation, LayerSpec, NetworkSpec};

pub const MAGIC: [u8; 4] = *b"SDNT";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_DISCRETIZE_READOUT: u16 = 1;
// Guards allocation on corrupt headers.
const MAX_UNITS: u32 = 1 << 20;

pub fn write_network<W: Write>(net: &NetworkSpec, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let flags = if net.discretize_readout() {
        FLAG_DISCRETIZE_READOUT
    } else {
        0
    };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(net.depth() as u32).to_le_bytes())?;
    for layer in net.layers() {
        w.write_all(&(layer.d_in() as u32).to_le_bytes())?;
        w.write_all(&(layer.d_out() as u32).to_le_bytes())?;
        w.write_all(&[layer.activation.tag(), layer.scale.is_unit() as u8])?;
        w.write_all(&0u16.to_le_bytes())?;
        match &layer.scale {
            ScaleVector::Layer(k) => w.write_all(&k.to_le_bytes())?,
            ScaleVector::Unit(ks) => write_f64s(&mut w, ks)?,
        }
        write_f64s(&mut w, layer.weights.as_slice())?;
        write_f64s(&mut w, &layer.bias)?;
    }
    Ok(())
}

pub fn read_network<R: Read>(mut r: R) -> Result<NetworkSpec> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(malformed(format!("bad magic {magic:?}")));
    }
    let version = read_u16(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let flags = read_u16(&mut r)?;
    if flags & !FLAG_DISCRETIZE_READOUT != 0 {
        return Err(malformed(format!("unknown flags {flags:#06x}")));
    }
    let n_layers = read_u32(&mut r)?;
    if n_layers == 0 || n_layers > 1024 {
        return Err(malformed(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers as usize);
    for l in 0..n_layers {
        let d_in = read_u32(&mut r)?;
        let d_out = read_u32(&mut r)?;
        if d_in == 0 || d_out == 0 || d_in > MAX_UNITS || d_out > MAX_UNITS {
            return Err(malformed(format!("layer {l} has dims {d_in}x{d_out}")));
        }
        let (d_in, d_out) = (d_in as usize, d_out as usize);
        let mut tags = [0u8; 2];
        read_exact(&mut r, &mut tags)?;
        let activation = Activation::from_tag(tags[0])
            .ok_or_else(|| malformed(format!("layer {l} has activation tag {}", tags[0])))?;
        if read_u16(&mut r)? != 0 {
            return Err(malformed(format!("layer {l} has non-zero reserved bits")));
        }
        let scale = match tags[1] {
            0 => ScaleVector::layer(read_f64s(&mut r, 1)?[0])?,
            1 => ScaleVector::unit(read_f64s(&mut r, d_in)?)?,
            t => return Err(malformed(format!("layer {l} has scale kind {t}"))),
        };
        let weights = DenseMatrix::new(d_in, d_out, read_f64s(&mut r, d_in * d_out)?)?;
        let bias = read_f64s(&mut r, d_out)?;
        layers.push(LayerSpec::new(weights, bias.into(), activation, scale)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(malformed("trailing bytes after last layer".into()));
    }
    Ok(NetworkSpec::new(layers)?.with_discretized_readout(flags & FLAG_DISCRETIZE_READOUT != 0))
}

fn malformed(detail: String) -> Error {
    Error::Format {
        what: "network file",
        detail,
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => malformed("truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NetworkSpec {
        NetworkSpec::new(vec![
            LayerSpec::new(
                DenseMatrix::new(2, 3, vec![1.0, -2.0, 3.5, 0.25, 0.0, -1e-3]).unwrap(),
                vec![0.1, 0.2, 0.3].into(),
                Activation::Relu,
                ScaleVector::unit(vec![2.0, 0.5]).unwrap(),
            )
            .unwrap(),
            LayerSpec::new(
                DenseMatrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap(),
                vec![-1.0].into(),
                Activation::Softmax,
                ScaleVector::layer(7.25).unwrap(),
            )
            .unwrap(),
        ])
        .unwrap()
        .with_discretized_readout(false)
    }

    #[test]
    fn byte_layout() {
        let mut buf = Vec::new();
        write_network(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SDNT");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[0, 0]);
        assert_eq!(&buf[8..12], &[2, 0, 0, 0]);
        // first layer header: d_in=2, d_out=3, relu, unit scales
        assert_eq!(&buf[12..24], &[2, 0, 0, 0, 3, 0, 0, 0, 1, 1, 0, 0]);
        assert_eq!(&buf[24..32], &2.0f64.to_le_bytes());
        let layer0 = 12 + 12 + 2 * 8 + 6 * 8 + 3 * 8;
        let layer1 = 12 + 8 + 3 * 8 + 8;
        assert_eq!(buf.len(), layer0 + layer1);
    }

    #[test]
    fn round_trip() {
        let net = sample();
        let mut buf = Vec::new();
        write_network(&net, &mut buf).unwrap();
        assert_eq!(read_network(buf.as_slice()).unwrap(), net);
    }

    #[test]
    fn corrupt_inputs() {
        let mut buf = Vec::new();
        write_network(&sample(), &mut buf).unwrap();
        assert!(matches!(read_network(&buf[..buf.len() - 3]), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_network(bad.as_slice()), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_network(bad.as_slice()).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_network(long.as_slice()).is_err());
        assert!(read_network(&[][..]).is_err());
    }
}
