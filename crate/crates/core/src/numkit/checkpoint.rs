//! `PTG1` parameter checkpoints.
//!
//! Layout of one record:
//!
//! ```text
//! b"PTG1" | header_len: u64 LE | header: JSON (header_len bytes) | f64 LE blobs
//! ```
//!
//! The header lists every network's layer specs plus a free-form `meta`
//! object. Blobs follow in network order, then layer order, weight (row-major)
//! before bias. Records are self-delimiting and may be concatenated.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::mlp::{LayerSpec, MlpParams};
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 4] = b"PTG1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    nets: Vec<NetHeader>,
    #[serde(default)]
    meta: Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetHeader {
    layers: Vec<LayerSpec>,
}

pub(crate) fn write_framed<W: Write>(w: &mut W, magic: &[u8; 4], header: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    Ok(())
}

pub(crate) fn read_framed<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Vec<u8>> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 32) {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    Ok(header)
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (o, chunk) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *o = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
    }
    Ok(())
}

/// Writes one `PTG1` record holding `nets` and `meta`.
pub fn write_params<W: Write>(w: &mut W, nets: &[&MlpParams], meta: Value) -> Result<()> {
    let header = Header {
        nets: nets.iter().map(|n| NetHeader { layers: n.specs() }).collect(),
        meta,
    };
    write_framed(w, PARAM_MAGIC, &serde_json::to_vec(&header)?)?;
    for net in nets {
        for t in net.tensors() {
            write_f64s(w, t)?;
        }
    }
    Ok(())
}

/// Reads one `PTG1` record.
pub fn read_params<R: Read>(r: &mut R) -> Result<(Vec<MlpParams>, Value)> {
    let header: Header = serde_json::from_slice(&read_framed(r, PARAM_MAGIC)?)?;
    let mut nets = Vec::with_capacity(header.nets.len());
    for nh in &header.nets {
        let mut net = MlpParams::zeros(&nh.layers)?;
        for t in net.tensors_mut() {
            read_f64s(r, t)?;
        }
        nets.push(net);
    }
    Ok((nets, header.meta))
}

pub fn save_mlp(path: &std::path::Path, net: &MlpParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(&mut f, &[net], Value::Null)?;
    f.flush()?;
    Ok(())
}

pub fn load_mlp(path: &std::path::Path) -> Result<MlpParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (mut nets, _) = read_params(&mut f)?;
    if nets.len() != 1 {
        return Err(Error::Format(format!("expected one network, found {}", nets.len())));
    }
    Ok(nets.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::mlp::Activation;

    #[test]
    fn layout_is_magic_header_then_le_floats() {
        let mut rng = crate::rng::seeded(2);
        let net = MlpParams::new(&[2, 3, 1], Activation::Elu, Activation::Identity, true, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &[&net], serde_json::json!({"k": 1})).unwrap();
        assert_eq!(&buf[..4], b"PTG1");
        let hlen = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&buf[12..12 + hlen]).unwrap();
        assert_eq!(header["nets"][0]["layers"][0]["activation"], "elu");
        assert_eq!(header["nets"][0]["layers"][0]["layer_norm"], true);
        let first = f64::from_le_bytes(buf[12 + hlen..20 + hlen].try_into().unwrap());
        assert_eq!(first, net.layers[0].weight.get(0, 0));
        assert_eq!(buf.len(), 12 + hlen + 8 * net.num_params());
    }

    #[test]
    fn concatenated_records_round_trip() {
        let mut rng = crate::rng::seeded(9);
        let a = MlpParams::new(&[4, 8, 2], Activation::Elu, Activation::Tanh, false, &mut rng).unwrap();
        let b = MlpParams::new(&[3, 2], Activation::Elu, Activation::Identity, false, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &[&a, &b], Value::Null).unwrap();
        write_params(&mut buf, &[&b], serde_json::json!([1, 2])).unwrap();
        let mut cur = std::io::Cursor::new(buf);
        let (n1, _) = read_params(&mut cur).unwrap();
        let (n2, meta) = read_params(&mut cur).unwrap();
        assert_eq!(n1, vec![a, b.clone()]);
        assert_eq!(n2, vec![b]);
        assert_eq!(meta, serde_json::json!([1, 2]));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut cur = std::io::Cursor::new(b"PTGD\0\0\0\0\0\0\0\0".to_vec());
        assert!(matches!(read_params(&mut cur), Err(Error::Format(_))));
    }
}
