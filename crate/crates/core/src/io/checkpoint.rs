//! Parameter checkpoint: magic `MGNF`, u32 version, a length-prefixed
//! JSON config block describing what the blobs reconstruct, then named f32
//! parameter blobs in canonical group order, each with its own checksum so
//! corruption reports name the damaged blob.

use serde::{Deserialize, Serialize};

use super::framing::{Reader, Writer};
use super::IoError;
use crate::heads::{HeadKind, HeadParams};
use crate::model::{ModelConfig, ModelParams, TokenLayout};
use crate::tape::Tensor;

const MAGIC: &[u8; 4] = b"MGNF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ConfigBlock {
    Core {
        config: ModelConfig,
        layout: TokenLayout,
        n_static: usize,
    },
    Head {
        head: HeadKind,
        n_tokens: usize,
        embed_width: usize,
        hidden_width: usize,
    },
}

/// A saved parameter set: the forecaster core or one task head.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Core(ModelParams<f32>),
    Head(HeadParams<f32>),
}

impl Checkpoint {
    pub fn describe(&self) -> String {
        match self {
            Checkpoint::Core(p) => format!(
                "core: E={} L={} h={} ffn={} t_in={} t_out={} tokens={} static={}",
                p.config.embed_width,
                p.config.blocks,
                p.config.attention_heads,
                p.config.ffn_width,
                p.config.t_in,
                p.config.t_out,
                p.layout.n_tokens(),
                p.n_static
            ),
            Checkpoint::Head(h) => format!(
                "{} head: tokens={} E={} hidden={}",
                h.kind.name(),
                h.n_tokens,
                h.embed_width,
                h.hidden_width
            ),
        }
    }

    fn groups(&self) -> Vec<(String, &Tensor<f32>)> {
        match self {
            Checkpoint::Core(p) => p.groups(),
            Checkpoint::Head(h) => h.groups(),
        }
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let block = match ckpt {
        Checkpoint::Core(p) => ConfigBlock::Core {
            config: p.config.clone(),
            layout: p.layout.clone(),
            n_static: p.n_static,
        },
        Checkpoint::Head(h) => ConfigBlock::Head {
            head: h.kind,
            n_tokens: h.n_tokens,
            embed_width: h.embed_width,
            hidden_width: h.hidden_width,
        },
    };
    let mut w = Writer::new(MAGIC, VERSION);
    w.str(&serde_json::to_string(&block).expect("config block serializes"));
    let groups = ckpt.groups();
    w.u32(groups.len() as u32);
    for (name, tensor) in groups {
        w.str(&name);
        w.u32(tensor.numel() as u32);
        let start = w.buf.len();
        w.f32_slice(tensor.data());
        let crc = crc32fast::hash(&w.buf[start..]);
        w.u32(crc);
    }
    w.buf
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, IoError> {
    let mut r = Reader::open_unchecked("checkpoint", MAGIC, VERSION, bytes)?;
    let block: ConfigBlock = serde_json::from_str(&r.str("config block")?)?;
    let mut ckpt = match block {
        ConfigBlock::Core {
            config,
            layout,
            n_static,
        } => Checkpoint::Core(ModelParams::init(&config, &layout, n_static, 0)?),
        ConfigBlock::Head {
            head,
            n_tokens,
            embed_width,
            hidden_width,
        } => Checkpoint::Head(HeadParams::init(
            head,
            n_tokens,
            embed_width,
            hidden_width,
            0,
        )?),
    };
    let n_blobs = r.u32()? as usize;
    let mut groups = match &mut ckpt {
        Checkpoint::Core(p) => p.groups_mut(),
        Checkpoint::Head(h) => h.groups_mut(),
    };
    if n_blobs != groups.len() {
        return Err(IoError::Format(format!(
            "checkpoint: {} blobs for {} parameter groups",
            n_blobs,
            groups.len()
        )));
    }
    for (name, tensor) in groups.iter_mut() {
        let blob_name = r.str("blob name")?;
        if &blob_name != name {
            return Err(IoError::Format(format!(
                "checkpoint: blob {blob_name:?} where group {name:?} was expected"
            )));
        }
        let numel = r.u32()? as usize;
        if numel != tensor.numel() {
            return Err(IoError::Format(format!(
                "checkpoint: blob {name:?} holds {numel} values, group needs {}",
                tensor.numel()
            )));
        }
        let raw = r
            .byte_vec(4 * numel, "blob payload")
            .map_err(|e| IoError::Format(format!("{e} (blob {name:?})")))?;
        let stored = r
            .u32()
            .map_err(|e| IoError::Format(format!("{e} (blob {name:?} checksum)")))?;
        let computed = crc32fast::hash(raw);
        if stored != computed {
            return Err(IoError::Format(format!(
                "checkpoint: checksum mismatch on blob {name:?}"
            )));
        }
        for (dst, src) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
    }
    drop(groups);
    r.expect_end()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_core(seed: u64) -> ModelParams<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = [1usize, 2][rng.gen_range(0..2)];
        let config = ModelConfig {
            embed_width: h * rng.gen_range(2..5),
            blocks: rng.gen_range(1..3),
            attention_heads: h,
            ffn_width: rng.gen_range(4..9),
            t_in: rng.gen_range(1..4),
            t_out: 1,
            dropout: 0.0,
        };
        let layout = TokenLayout {
            tokens: vec![("a".into(), vec![0, 1]), ("b".into(), vec![2])],
        };
        ModelParams::init(&config, &layout, rng.gen_range(1..5), seed).unwrap()
    }

    #[test]
    fn core_roundtrip_is_bit_exact() {
        for seed in 0..20 {
            let params = random_core(seed);
            let ckpt = Checkpoint::Core(params.clone());
            let back = read_checkpoint(&write_checkpoint(&ckpt)).unwrap();
            assert_eq!(ckpt, back, "seed {seed}");
        }
    }

    #[test]
    fn head_roundtrip_is_bit_exact() {
        for seed in 0..20 {
            let kind = if seed % 2 == 0 {
                HeadKind::Wind
            } else {
                HeadKind::Precip
            };
            let head: HeadParams<f32> = HeadParams::init(kind, 4, 16, 8, seed).unwrap();
            let ckpt = Checkpoint::Head(head);
            let back = read_checkpoint(&write_checkpoint(&ckpt)).unwrap();
            assert_eq!(ckpt, back, "seed {seed}");
        }
    }

    #[test]
    fn truncation_names_the_damaged_blob() {
        let ckpt = Checkpoint::Core(random_core(5));
        let bytes = write_checkpoint(&ckpt);
        let err = read_checkpoint(&bytes[..bytes.len() - 6]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blob"), "{msg}");
        // Flipping payload bits trips that blob's checksum. The file tail
        // is the final blob's payload followed by its 4-byte checksum.
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 0x55;
        let msg = read_checkpoint(&bad).unwrap_err().to_string();
        assert!(msg.contains("checksum mismatch on blob"), "{msg}");
    }

    #[test]
    fn describe_names_the_shape() {
        let ckpt = Checkpoint::Core(random_core(1));
        assert!(ckpt.describe().starts_with("core:"));
        let head: HeadParams<f32> = HeadParams::init(HeadKind::Wind, 4, 16, 8, 2).unwrap();
        assert!(Checkpoint::Head(head).describe().contains("wind"));
    }
}
