//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size  | field                                        |
//! |-------:|------:|----------------------------------------------|
//! | 0      | 8     | magic `DGPOCKPT`                             |
//! | 8      | 4     | format version (`u32`, currently 1)          |
//! | 12     | 4     | kind (`u32`: 0 tabular, 1 mlp)               |
//! | 16     | 4     | vocab size (`u32`)                           |
//! | 20     | 4     | end-of-sequence id (`u32`)                   |
//! | 24     | 4     | padding id (`u32`)                           |
//! | 28     | 4     | context window (`u32`)                       |
//! | 32     | 4     | hidden width (`u32`, 0 for tabular)          |
//! | 36     | 4     | embedding width (`u32`, 0 for tabular)       |
//! | 40     | 4     | bucket count (`u32`, 0 for mlp)              |
//! | 44     | 4     | reserved, must be 0                          |
//! | 48     | 8     | parameter count `n` (`u64`)                  |
//! | 56     | 8 * n | parameters (`f64`)                           |
//!
//! The parameter count must equal the count implied by the header and the
//! file must end exactly after the last parameter.

use std::path::Path;

use crate::policy::{Architecture, PolicyModel, Vocab};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DGPOCKPT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 56;

const KIND_TABULAR: u32 = 0;
const KIND_MLP: u32 = 1;

pub fn encode(model: &PolicyModel) -> Vec<u8> {
    let vocab = model.vocab();
    let (kind, hidden, embed, buckets) = match model.architecture() {
        Architecture::Tabular { buckets } => (KIND_TABULAR, 0, 0, buckets),
        Architecture::Mlp { embed_dim, hidden } => (KIND_MLP, hidden, embed_dim, 0),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    for word in [
        VERSION,
        kind,
        vocab.size() as u32,
        vocab.eos(),
        vocab.pad(),
        model.context_window() as u32,
        hidden as u32,
        embed as u32,
        buckets as u32,
        0,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<PolicyModel> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "checkpoint is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = u32_at(bytes, 12);
    let vocab_size = u32_at(bytes, 16);
    let eos = u32_at(bytes, 20);
    let pad = u32_at(bytes, 24);
    let window = u32_at(bytes, 28) as usize;
    let hidden = u32_at(bytes, 32) as usize;
    let embed = u32_at(bytes, 36) as usize;
    let buckets = u32_at(bytes, 40) as usize;
    if u32_at(bytes, 44) != 0 {
        return Err(Error::Format("reserved header word is not zero".into()));
    }
    let count = u64::from_le_bytes(bytes[48..56].try_into().unwrap());

    let arch = match kind {
        KIND_TABULAR if hidden == 0 && embed == 0 => Architecture::Tabular { buckets },
        KIND_MLP if buckets == 0 => Architecture::Mlp {
            embed_dim: embed,
            hidden,
        },
        KIND_TABULAR | KIND_MLP => return Err(Error::Format("header widths inconsistent with model kind".into())),
        other => return Err(Error::Format(format!("unknown model kind {other}"))),
    };
    let vocab = Vocab::new(vocab_size, eos, pad).map_err(|e| Error::Format(e.to_string()))?;

    let body = bytes.len() - HEADER_LEN;
    if !body.is_multiple_of(8) || (body / 8) as u64 != count {
        return Err(Error::Format(format!(
            "header declares {count} parameters but body holds {body} bytes"
        )));
    }
    // Checked against the body length above, so this cannot overflow or
    // trigger an oversized allocation.
    let expected = checked_param_count(arch, vocab_size as usize, window)?;
    if expected != count {
        return Err(Error::Format(format!(
            "header shape implies {expected} parameters, found {count}"
        )));
    }
    let params = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyModel::from_parts(arch, vocab, window, params).map_err(|e| Error::Format(e.to_string()))
}

fn checked_param_count(arch: Architecture, vocab: usize, window: usize) -> Result<u64> {
    let overflow = || Error::Format("header shape overflows parameter count".into());
    let (v, k) = (vocab as u64, window as u64);
    match arch {
        Architecture::Tabular { buckets } => (buckets as u64).checked_mul(v).ok_or_else(overflow),
        Architecture::Mlp { embed_dim, hidden } => {
            let (e, h) = (embed_dim as u64, hidden as u64);
            let terms = [
                v.checked_mul(e),
                h.checked_mul(k).and_then(|x| x.checked_mul(e)),
                Some(h),
                v.checked_mul(h),
                Some(v),
            ];
            terms
                .into_iter()
                .try_fold(0u64, |acc, t| t.and_then(|t| acc.checked_add(t)))
                .ok_or_else(overflow)
        }
    }
}

pub fn save(model: &PolicyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<PolicyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mlp() -> PolicyModel {
        let v = Vocab::new(5, 4, 0).unwrap();
        PolicyModel::init(
            Architecture::Mlp {
                embed_dim: 2,
                hidden: 3,
            },
            v,
            2,
            1,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&mlp());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32_at(&bytes, 12), KIND_MLP);
        assert_eq!(u32_at(&bytes, 16), 5);
        assert_eq!(u32_at(&bytes, 28), 2);
        assert_eq!(u32_at(&bytes, 32), 3);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * mlp().param_count());
    }

    #[test]
    fn rejects_truncated_and_corrupt() {
        let bytes = encode(&mlp());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12] = 7;
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.extend_from_slice(&[0; 8]);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&mlp(), &path).unwrap();
        assert!(load(&path).unwrap().same_params(&mlp()));
        assert!(matches!(load(dir.path().join("missing")), Err(Error::File { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(buckets in 1usize..6, window in 1usize..4, seed in 0u64..1000, tabular in any::<bool>()) {
            let v = Vocab::new(4, 3, 0).unwrap();
            let arch = if tabular {
                Architecture::Tabular { buckets }
            } else {
                Architecture::Mlp { embed_dim: buckets, hidden: 2 }
            };
            let m = PolicyModel::init(arch, v, window, seed, 1.0).unwrap();
            let back = decode(&encode(&m)).unwrap();
            prop_assert_eq!(back.architecture(), m.architecture());
            prop_assert!(back.same_params(&m));
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode(&bytes);
        }
    }
}
