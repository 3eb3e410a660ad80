//! Checkpoint serialization: magic "IFES", format version, network
//! configuration, then per-layer weight and bias arrays as little-endian
//! 64-bit floats in declaration order, with a trailing CRC32 of the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{build_network, NetConfig, Network, Variant};

const MAGIC: &[u8; 4] = b"IFES";
const VERSION: u32 = 1;

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320), as used by zip/png.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_config(cfg: &NetConfig, out: &mut Vec<u8>) {
    push_u32(out, cfg.stages as u32);
    push_u32(out, cfg.scale as u32);
    out.push(match cfg.variant {
        Variant::Full => 0,
        Variant::NoIfem => 1,
        Variant::HierConnect => 2,
    });
    push_u64(out, cfg.seed);
    push_u32(out, cfg.ivif_channels.len() as u32);
    for &c in &cfg.ivif_channels {
        push_u32(out, c as u32);
    }
    push_u32(out, cfg.shfe_channels.len() as u32);
    for &c in &cfg.shfe_channels {
        push_u32(out, c as u32);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "truncated checkpoint: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_config(r: &mut Reader) -> Result<NetConfig> {
    let stages = r.u32()? as usize;
    let scale = r.u32()? as usize;
    let variant = match r.u8()? {
        0 => Variant::Full,
        1 => Variant::NoIfem,
        2 => Variant::HierConnect,
        v => return Err(Error::Integrity(format!("unknown variant tag {v}"))),
    };
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    let mut ivif_channels = Vec::with_capacity(n);
    for _ in 0..n {
        ivif_channels.push(r.u32()? as usize);
    }
    let n = r.u32()? as usize;
    let mut shfe_channels = Vec::with_capacity(n);
    for _ in 0..n {
        shfe_channels.push(r.u32()? as usize);
    }
    let cfg = NetConfig {
        stages,
        scale,
        variant,
        seed,
        ivif_channels,
        shfe_channels,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes configuration and parameters; byte-identical for identical
/// networks.
pub fn encode(net: &Network) -> Vec<u8> {
    let mut payload = Vec::new();
    encode_config(&net.config, &mut payload);
    for layer in &net.layers {
        push_u64(&mut payload, layer.weights.data.len() as u64);
        for &w in &layer.weights.data {
            payload.extend_from_slice(&w.to_le_bytes());
        }
        push_u64(&mut payload, layer.bias.len() as u64);
        for &b in &layer.bias {
            payload.extend_from_slice(&b.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    out.extend_from_slice(&payload);
    push_u32(&mut out, crc32(&payload));
    out
}

/// Rebuilds a network from checkpoint bytes, verifying magic, version, and
/// the payload CRC before accepting any parameter.
pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 12 {
        return Err(Error::Integrity("checkpoint shorter than header".to_string()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Integrity("bad magic, not a checkpoint file".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(payload);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let cfg = decode_config(&mut r)?;
    let mut net = build_network(cfg)?;
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let nw = r.u64()? as usize;
        if nw != layer.weights.data.len() {
            return Err(Error::Integrity(format!(
                "layer {i}: expected {} weights, found {nw}",
                layer.weights.data.len()
            )));
        }
        for w in layer.weights.data.iter_mut() {
            *w = r.f64()?;
        }
        let nb = r.u64()? as usize;
        if nb != layer.bias.len() {
            return Err(Error::Integrity(format!(
                "layer {i}: expected {} biases, found {nb}",
                layer.bias.len()
            )));
        }
        for b in layer.bias.iter_mut() {
            *b = r.f64()?;
        }
    }
    if r.pos != payload.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after parameters",
            payload.len() - r.pos
        )));
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, NetConfig, Variant};
    use tempfile::tempdir;

    fn tiny_net(variant: Variant, seed: u64) -> Network {
        build_network(NetConfig::new(2, 32, variant, seed).unwrap()).unwrap()
    }

    #[test]
    fn crc32_known_vectors() {
        // Standard check values for the IEEE polynomial.
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b"The quick brown fox jumps over the lazy dog"), 0x414F_A339);
    }

    #[test]
    fn round_trip_preserves_parameters() {
        for variant in [Variant::Full, Variant::NoIfem, Variant::HierConnect] {
            let net = tiny_net(variant, 5);
            let decoded = decode(&encode(&net)).unwrap();
            assert_eq!(decoded.param_vec(), net.param_vec());
            assert_eq!(decoded.config, net.config);
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = encode(&tiny_net(Variant::Full, 9));
        let b = encode(&tiny_net(Variant::Full, 9));
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = tiny_net(Variant::HierConnect, 3);
        save(&net, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.param_vec(), net.param_vec());
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let mut bytes = encode(&tiny_net(Variant::Full, 1));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let msg = decode(&bytes).unwrap_err().to_string();
        assert!(msg.contains("CRC"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&tiny_net(Variant::Full, 1));
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode(&tiny_net(Variant::Full, 1));
        assert!(decode(&bytes[..bytes.len() - 20]).is_err());
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode(&tiny_net(Variant::Full, 1));
        bytes[4] = 99;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }
}
