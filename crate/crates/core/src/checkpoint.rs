//! Self-describing binary checkpoints.
//!
//! Layout (little-endian): magic `NVCK`, `u16` version, `u32` section count,
//! then per section a `u16` name length, the name, a `u8` dtype (0 = f32,
//! 1 = UTF-8 text), a `u8` rank, `u32` dims and the payload. The `config`
//! section holds the model configuration, training metadata and component
//! presence flags as `key = value` text.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dynamics::{init_codebook, init_fdm, init_gcm, init_idm};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::nn::{ParamSet, Tensor};
use crate::synthdata::{push_f32s, write_atomic, Reader};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_TEXT: u8 = 1;

enum Payload {
    F32(Tensor),
    Text(String),
}

fn push_section(out: &mut Vec<u8>, name: &str, payload: &Payload) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("section name `{name}` too long")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let dim = |d: usize| u32::try_from(d).map_err(|_| Error::Format(format!("section `{name}` too large")));
    match payload {
        Payload::F32(t) => {
            out.push(DTYPE_F32);
            out.push(u8::try_from(t.shape.len()).map_err(|_| Error::Format("rank above 255".into()))?);
            for &d in &t.shape {
                out.extend_from_slice(&dim(d)?.to_le_bytes());
            }
            push_f32s(out, &t.data);
        }
        Payload::Text(s) => {
            out.push(DTYPE_TEXT);
            out.push(1);
            out.extend_from_slice(&dim(s.len())?.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
    Ok(())
}

fn sections(state: &ModelState) -> Vec<(String, Payload)> {
    let mut out = vec![
        ("config".to_string(), Payload::Text(state.config_text())),
        ("base".to_string(), Payload::F32(Tensor::new(vec![state.base.len()], state.base.0.clone()))),
    ];
    let mut add = |prefix: &str, params: &ParamSet| {
        for (name, t) in params.iter() {
            out.push((format!("{prefix}.{name}"), Payload::F32(t.clone())));
        }
    };
    add("encoder", &state.encoder.params);
    if let Some(m) = &state.idm {
        add("idm", &m.params);
    }
    if let Some(m) = &state.fdm {
        add("fdm", &m.params);
    }
    if let Some(m) = &state.gcm {
        add("gcm", &m.params);
    }
    if let Some(cb) = &state.codebook {
        let n = cb.size();
        out.push(("codebook.vectors".into(), Payload::F32(cb.vectors.clone())));
        out.push(("codebook.ema_counts".into(), Payload::F32(Tensor::new(vec![n], cb.ema_counts.clone()))));
        out.push(("codebook.ema_sums".into(), Payload::F32(Tensor::new(cb.vectors.shape.clone(), cb.ema_sums.clone()))));
        out.push((
            "codebook.hyper".into(),
            Payload::F32(Tensor::new(vec![2], vec![cb.decay, cb.commitment])),
        ));
    }
    out
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let secs = sections(state);
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(secs.len() as u32).to_le_bytes());
    for (name, payload) in &secs {
        push_section(&mut out, name, payload)?;
    }
    Ok(out)
}

fn read_sections(bytes: &[u8]) -> Result<BTreeMap<String, Payload>> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32("section count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16("section name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "section name")?)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("section `{name}` size overflows")))?;
        let payload = match dtype {
            DTYPE_F32 => Payload::F32(Tensor::new(shape, r.f32s(numel, &name)?)),
            DTYPE_TEXT if rank == 1 => Payload::Text(
                String::from_utf8(r.take(numel, &name)?.to_vec())
                    .map_err(|_| Error::Format(format!("section `{name}` is not UTF-8")))?,
            ),
            _ => return Err(Error::Format(format!("section `{name}` has unsupported dtype {dtype} rank {rank}"))),
        };
        if out.insert(name.clone(), payload).is_some() {
            return Err(Error::Format(format!("duplicate section `{name}`")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(out)
}

fn take_tensor(secs: &mut BTreeMap<String, Payload>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    match secs.remove(name) {
        Some(Payload::F32(t)) if t.shape == shape => Ok(t.data),
        Some(Payload::F32(t)) => Err(Error::Format(format!(
            "section `{name}` has shape {:?}, expected {shape:?}",
            t.shape
        ))),
        Some(Payload::Text(_)) => Err(Error::Format(format!("section `{name}` should hold f32 data"))),
        None => Err(Error::MissingSection(name.to_string())),
    }
}

fn fill(secs: &mut BTreeMap<String, Payload>, prefix: &str, params: &mut ParamSet) -> Result<()> {
    for (name, t) in params.iter_mut() {
        t.data = take_tensor(secs, &format!("{prefix}.{name}"), &t.shape)?;
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut secs = read_sections(bytes)?;
    let text = match secs.remove("config") {
        Some(Payload::Text(t)) => t,
        Some(Payload::F32(_)) => return Err(Error::Format("section `config` should hold text".into())),
        None => return Err(Error::MissingSection("config".into())),
    };
    let (config, meta, [has_idm, has_fdm, has_gcm, has_codebook]) = ModelState::parse_config_text(&text)?;
    // Skeleton with the right shapes; every value is overwritten below.
    let mut state = ModelState::new(config, 0)?;
    if has_idm {
        state.idm = Some(init_idm(&state.config.idm_config(), 0)?);
    }
    if has_fdm {
        state.fdm = Some(init_fdm(&state.config.fdm_config(), 0)?);
    }
    if has_gcm {
        state.gcm = Some(init_gcm(&state.config.gcm_config(), 0)?);
    }
    if has_codebook {
        state.codebook = Some(init_codebook(state.config.codebook_size, state.config.action_dim, 0)?);
    }
    state.meta = meta;
    state.base.0 = take_tensor(&mut secs, "base", &[state.base.len()])?;
    fill(&mut secs, "encoder", &mut state.encoder.params)?;
    if let Some(m) = state.idm.as_mut() {
        fill(&mut secs, "idm", &mut m.params)?;
    }
    if let Some(m) = state.fdm.as_mut() {
        fill(&mut secs, "fdm", &mut m.params)?;
    }
    if let Some(m) = state.gcm.as_mut() {
        fill(&mut secs, "gcm", &mut m.params)?;
    }
    if let Some(cb) = state.codebook.as_mut() {
        let shape = cb.vectors.shape.clone();
        cb.vectors.data = take_tensor(&mut secs, "codebook.vectors", &shape)?;
        cb.ema_counts = take_tensor(&mut secs, "codebook.ema_counts", &shape[..1])?;
        cb.ema_sums = take_tensor(&mut secs, "codebook.ema_sums", &shape)?;
        let hyper = take_tensor(&mut secs, "codebook.hyper", &[2])?;
        cb.decay = hyper[0];
        cb.commitment = hyper[1];
    }
    if let Some(name) = secs.keys().next() {
        return Err(Error::Format(format!("unexpected section `{name}`")));
    }
    Ok(state)
}

/// Writes atomically through a temporary file in the target directory.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::GcmKind;
    use crate::inr::InrArchitecture;
    use crate::model::ModelConfig;

    fn full_state() -> ModelState {
        let cfg = ModelConfig {
            inr: InrArchitecture::new(3, 8, 3, 4),
            frame_shape: (16, 16, 3),
            encoder_channels: vec![4, 8],
            idm_hidden: 16,
            fdm_hidden: 16,
            gcm_hidden: 16,
            gcm_heads: 2,
            gcm_blocks: 1,
            gcm_kind: GcmKind::Transformer,
            codebook_size: 5,
            ..ModelConfig::default()
        };
        let mut st = ModelState::new(cfg, 11).unwrap();
        st.ensure_dynamics(12).unwrap();
        st.ensure_gcm(13).unwrap();
        st.meta.phase = "3".into();
        st.meta.step = 77;
        st
    }

    #[test]
    fn round_trip_is_exact() {
        let st = full_state();
        let bytes = encode_checkpoint(&st).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), st);
        let bare = ModelState::new(st.config.clone(), 1).unwrap();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&bare).unwrap()).unwrap(), bare);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nvck");
        let st = full_state();
        save_checkpoint(&st, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), st);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_checkpoint(&full_state()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { found: 9, .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn missing_section_reported_by_name() {
        let st = full_state();
        let mut secs = sections(&st);
        secs.retain(|(n, _)| n != "fdm.content.l0.bias");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(secs.len() as u32).to_le_bytes());
        for (n, p) in &secs {
            push_section(&mut bytes, n, p).unwrap();
        }
        match decode_checkpoint(&bytes) {
            Err(Error::MissingSection(n)) => assert_eq!(n, "fdm.content.l0.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_section_is_greppable() {
        let bytes = encode_checkpoint(&full_state()).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("gcm_kind = transformer"));
        assert!(text.contains("has_gcm = true"));
    }
}
