//! Single-file model container: descriptor, weights and normalisation state.
//!
//! Layout (little-endian): `VFNM`, u32 version, u64 descriptor length,
//! descriptor UTF-8, framed tensor blocks, u64 FNV-1a checksum of every
//! preceding byte. Blocks are parameters (`layer.weight`, `layer.bias`),
//! normalisation statistics (`layer.running_mean`, `layer.running_var`) and
//! an optional input mean image (`<input layer>.mean`).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::network::Network;
use super::parser::parse_descriptor;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"VFNM";
pub const FORMAT_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Appends `[u32 name_len][name][u32 rank][u32 dims..][f32 data]`.
pub fn write_block(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte slice that reports truncation as a format error.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads one block written by [`write_block`].
pub fn read_block(r: &mut Reader) -> Result<(String, Tensor)> {
    let len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("block name is not UTF-8".into()))?
        .to_string();
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("block `{name}` has implausible rank {rank}")));
    }
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let shape = Shape::new(dims).map_err(|e| Error::Format(format!("block `{name}`: {e}")))?;
    let raw = r.take(shape.count().checked_mul(4).ok_or_else(|| Error::Format("block too large".into()))?)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, Tensor::from_vec(shape, data)?))
}

pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = net.descriptor().to_text();
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    for (name, t) in net.params() {
        write_block(&mut buf, &name, t);
    }
    for (layer, st) in net.fnl_states() {
        let n = st.nodes();
        write_block(&mut buf, &format!("{layer}.running_mean"), &Tensor::from_dims(&[n], st.running_mean.clone()));
        write_block(&mut buf, &format!("{layer}.running_var"), &Tensor::from_dims(&[n], st.running_var.clone()));
    }
    if let Some(m) = net.input_mean() {
        write_block(&mut buf, &format!("{}.mean", net.input_name()), m);
    }
    let sum = fnv1a64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, supported: FORMAT_VERSION });
    }
    if bytes.len() < 16 {
        return Err(Error::Checksum { stored: 0, computed: fnv1a64(bytes) });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader::new(&payload[8..]);
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
    let mut net = Network::zeroed(parse_descriptor(text)?)?;
    let mut seen = std::collections::HashSet::new();
    let mean_block = format!("{}.mean", net.input_name());
    while !r.is_empty() {
        let (name, t) = read_block(&mut r)?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate block `{name}`")));
        }
        if name == mean_block {
            net.set_input_mean(Some(t));
            continue;
        }
        let slot = if let Some(p) = net.param_mut(&name) {
            p
        } else if let Some((layer, field)) = name.rsplit_once('.') {
            let st = net
                .fnl_state_mut(layer)
                .ok_or_else(|| Error::Format(format!("block `{name}` matches no layer")))?;
            let v = match field {
                "running_mean" => &mut st.running_mean,
                "running_var" => &mut st.running_var,
                _ => return Err(Error::Format(format!("unknown block `{name}`"))),
            };
            if t.dims() != [v.len()] {
                return Err(Error::shape(format!("block `{name}` has shape {}, expected ({})", t.shape(), v.len())));
            }
            v.copy_from_slice(t.data());
            continue;
        } else {
            return Err(Error::Format(format!("unknown block `{name}`")));
        };
        if slot.shape() != t.shape() {
            return Err(Error::shape(format!("block `{name}` has shape {}, expected {}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    let expected = net.params().len() + 2 * net.fnl_states().len() + net.input_mean().is_some() as usize;
    if seen.len() != expected {
        return Err(Error::Format(format!("model has {} blocks, expected {expected}", seen.len())));
    }
    Ok(net)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let shown = path.display().to_string();
    let res = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(shown, e));
    }
    Ok(())
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(net))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_descriptor, with_fnl};
    use crate::ops::Mode;

    const SMALL: &str = "layer in input shape=1,6,6 out=x\n\
                         layer c conv num_output=2 kernel=3 relu=true in=x out=c\n\
                         layer f flatten in=c out=f\n\
                         layer o fc num_output=3 in=f out=o\n\
                         feature o\n";

    fn trained_small() -> Network {
        let d = with_fnl(&parse_descriptor(SMALL).unwrap()).unwrap();
        let mut n = Network::new(d, 11).unwrap();
        n.set_input_mean(Some(Tensor::from_dims(&[1, 6, 6], (0..36).map(|v| v as f32 / 7.0).collect())));
        let x = crate::gradcheck::random_tensor(&[4, 1, 6, 6], &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
        n.forward(&x, Mode::Train, None).unwrap();
        n
    }

    #[test]
    fn round_trip_bit_exact() {
        let n = trained_small();
        let back = decode_model(&encode_model(&n)).unwrap();
        assert_eq!(back.descriptor(), n.descriptor());
        for ((a, ta), (b, tb)) in n.params().into_iter().zip(back.params()) {
            assert_eq!(a, b);
            assert_eq!(ta.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), tb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        for ((_, a), (_, b)) in n.fnl_states().into_iter().zip(back.fnl_states()) {
            assert_eq!(a.running_mean, b.running_mean);
            assert_eq!(a.running_var, b.running_var);
        }
        assert_eq!(back.input_mean(), n.input_mean());
        assert_eq!(encode_model(&back), encode_model(&n));
    }

    #[test]
    fn truncated_is_checksum_error() {
        let bytes = encode_model(&trained_small());
        for cut in [bytes.len() - 1, bytes.len() - 9, bytes.len() / 2, 20] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(Error::Checksum { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_model(&trained_small());
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(decode_model(&m), Err(Error::Format(_))));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let e = decode_model(&bytes).unwrap_err();
        assert!(matches!(e, Error::Version { found: 2, supported: 1 }));
        let msg = e.to_string();
        assert!(msg.contains('2') && msg.contains('1'));
    }

    #[test]
    fn flipped_payload_byte_detected() {
        let mut bytes = encode_model(&trained_small());
        let i = bytes.len() - 20;
        bytes[i] ^= 1;
        assert!(matches!(decode_model(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn block_shape_mismatch() {
        let n = trained_small();
        let text = n.descriptor().to_text();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        write_block(&mut buf, "c.weight", &Tensor::from_dims(&[2], vec![0.0; 2]));
        let s = fnv1a64(&buf);
        buf.extend_from_slice(&s.to_le_bytes());
        assert!(matches!(decode_model(&buf), Err(Error::Shape(_))));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vfnm");
        let n = trained_small();
        save_model(&n, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(encode_model(&back), encode_model(&n));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
