//! Node-tensor binary: magic `NTEN`, u32 version, u32 T/C/N, C
//! length-prefixed channel names, T*C*N f32 payload, trailing checksum.

use super::framing::{Reader, Writer};
use super::IoError;
use crate::regrid::NodeTensor;

const MAGIC: &[u8; 4] = b"NTEN";
const VERSION: u32 = 1;

pub fn write_node_tensor(x: &NodeTensor) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(x.t as u32);
    w.u32(x.c() as u32);
    w.u32(x.n as u32);
    for name in &x.channel_names {
        w.str(name);
    }
    w.f32_slice(&x.data);
    w.finish_with_crc()
}

pub fn read_node_tensor(bytes: &[u8]) -> Result<NodeTensor, IoError> {
    let mut r = Reader::open_checked("node tensor", MAGIC, VERSION, bytes)?;
    let t = r.u32()? as usize;
    let c = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut names = Vec::with_capacity(c);
    for i in 0..c {
        names.push(r.str(&format!("channel name {i}"))?);
    }
    let data = r.f32_vec(t * c * n, "payload")?;
    r.expect_end()?;
    Ok(NodeTensor {
        t,
        n,
        channel_names: names,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_tensor(seed: u64) -> NodeTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.gen_range(1..5);
        let c = rng.gen_range(1..6);
        let n = rng.gen_range(1..40);
        let names: Vec<String> = (0..c).map(|i| format!("f{i}")).collect();
        let mut x = NodeTensor::zeros(t, names, n);
        for v in x.data.iter_mut() {
            *v = rng.gen::<f32>() * 8.0 - 4.0;
        }
        x
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for seed in 0..50 {
            let x = random_tensor(seed);
            let back = read_node_tensor(&write_node_tensor(&x)).unwrap();
            assert_eq!(x, back, "seed {seed}");
        }
    }

    #[test]
    fn wrong_magic_and_truncation_fail() {
        let x = random_tensor(3);
        let mut bytes = write_node_tensor(&x);
        bytes[0] = b'Z';
        assert!(read_node_tensor(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let bytes = write_node_tensor(&x);
        assert!(read_node_tensor(&bytes[..bytes.len() - 1]).is_err());
    }
}
