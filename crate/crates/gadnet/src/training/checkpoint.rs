//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic line        b"gadnet-ckpt-1\n"
//! u64               header length in bytes
//! header JSON       { "payload_len", "arrays": [ {name, dtype, shape, offset, nbytes} ] }
//! payload           raw little-endian array data, concatenated
//! u64               trailer length in bytes
//! trailer JSON      stage, iteration, config snapshot, rng state, net roles,
//!                   optimizer kinds and step counters
//! ```
//!
//! Save -> load -> save is byte-stable: array order, JSON field order and
//! float formatting are all deterministic.

use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{GadError, Result};
use crate::networks::{NetworkParams, Role, StyleTable};
use crate::rng::StreamState;
use crate::tensor::{Dtype, Scalar};
use crate::training::config::{OptimKind, TrainingConfig};
use crate::training::optim::OptState;

pub const MAGIC: &[u8] = b"gadnet-ckpt-1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Stage1,
    C2Pretrain,
    Stage2,
}

impl StageKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            StageKind::Stage1 => "stage1",
            StageKind::C2Pretrain => "c2",
            StageKind::Stage2 => "stage2",
        }
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub stage: StageKind,
    pub iteration: u64,
    pub config: TrainingConfig,
    pub rng: StreamState,
    /// Networks keyed by function: "encoder", "generator", "c1", "c2",
    /// "discriminator".
    pub nets: IndexMap<String, NetworkParams<f32>>,
    pub style: Option<StyleTable<f32>>,
    /// Optimizer state keyed by group name.
    pub opt: IndexMap<String, OptState>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    payload_len: u64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct NetMeta {
    key: String,
    role: Role,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    group: String,
    kind: OptimKind,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    stage: StageKind,
    iteration: u64,
    nets: Vec<NetMeta>,
    has_style: bool,
    opt: Vec<OptMeta>,
    rng: StreamState,
    config: TrainingConfig,
}

fn push_array<T: Scalar>(
    entries: &mut Vec<ArrayEntry>,
    payload: &mut Vec<u8>,
    name: String,
    arr: &ArrayD<T>,
) {
    let offset = payload.len() as u64;
    let std = arr.as_standard_layout();
    for v in std.iter() {
        v.write_le(payload);
    }
    entries.push(ArrayEntry {
        name,
        dtype: T::DTYPE.as_str().to_string(),
        shape: arr.shape().to_vec(),
        offset,
        nbytes: payload.len() as u64 - offset,
    });
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();

    for (key, net) in &bundle.nets {
        for (name, arr) in &net.arrays {
            push_array(&mut entries, &mut payload, format!("net/{key}/{name}"), arr);
        }
    }
    if let Some(style) = &bundle.style {
        push_array(&mut entries, &mut payload, "style/means".into(), &style.means.clone().into_dyn());
        push_array(&mut entries, &mut payload, "style/log_stds".into(), &style.log_stds.clone().into_dyn());
    }
    for (group, opt) in &bundle.opt {
        for (name, arr) in opt.arrays() {
            push_array(&mut entries, &mut payload, format!("opt/{group}/{name}"), arr);
        }
    }

    let header = Header {
        payload_len: payload.len() as u64,
        arrays: entries,
    };
    let trailer = Trailer {
        stage: bundle.stage,
        iteration: bundle.iteration,
        nets: bundle
            .nets
            .iter()
            .map(|(key, net)| NetMeta { key: key.clone(), role: net.role })
            .collect(),
        has_style: bundle.style.is_some(),
        opt: bundle
            .opt
            .iter()
            .map(|(group, o)| OptMeta { group: group.clone(), kind: o.kind(), steps: o.step_count() })
            .collect(),
        rng: bundle.rng.clone(),
        config: bundle.config.clone(),
    };

    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let trailer_json = serde_json::to_vec(&trailer).expect("trailer serializes");

    let mut out = Vec::with_capacity(MAGIC.len() + 16 + header_json.len() + payload.len() + trailer_json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&(trailer_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&trailer_json);

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| GadError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| GadError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let mut file = std::fs::File::open(path).map_err(|e| GadError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| GadError::io(path, e))?;
    let corrupt = |msg: &str| GadError::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad or missing version tag (expected gadnet-ckpt-1)"));
    }
    let mut pos = MAGIC.len();
    let read_u64 = |bytes: &[u8], pos: usize| -> Result<u64> {
        bytes
            .get(pos..pos + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt("truncated length field"))
    };
    let header_len = read_u64(&bytes, pos)? as usize;
    pos += 8;
    let header: Header = serde_json::from_slice(
        bytes.get(pos..pos + header_len).ok_or_else(|| corrupt("truncated header"))?,
    )
    .map_err(|e| corrupt(&format!("header parse: {e}")))?;
    pos += header_len;
    let payload = bytes
        .get(pos..pos + header.payload_len as usize)
        .ok_or_else(|| corrupt("truncated payload"))?;
    pos += header.payload_len as usize;
    let trailer_len = read_u64(&bytes, pos)? as usize;
    pos += 8;
    let trailer: Trailer = serde_json::from_slice(
        bytes.get(pos..pos + trailer_len).ok_or_else(|| corrupt("truncated trailer"))?,
    )
    .map_err(|e| corrupt(&format!("trailer parse: {e}")))?;

    let mut arrays: IndexMap<String, ArrayD<f32>> = IndexMap::new();
    for e in &header.arrays {
        if Dtype::parse(&e.dtype) != Some(Dtype::F32) {
            return Err(corrupt(&format!("array {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.nbytes as usize != n * 4 {
            return Err(corrupt(&format!("array {} byte count mismatch", e.name)));
        }
        let raw = payload
            .get(e.offset as usize..(e.offset + e.nbytes) as usize)
            .ok_or_else(|| corrupt(&format!("array {} out of payload bounds", e.name)))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(f32::read_le).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|_| corrupt(&format!("array {} shape mismatch", e.name)))?;
        arrays.insert(e.name.clone(), arr);
    }

    let mut nets = IndexMap::new();
    for meta in &trailer.nets {
        let prefix = format!("net/{}/", meta.key);
        let mut net_arrays = IndexMap::new();
        for (name, arr) in arrays.iter() {
            if let Some(pname) = name.strip_prefix(&prefix) {
                net_arrays.insert(pname.to_string(), arr.clone());
            }
        }
        if net_arrays.is_empty() {
            return Err(corrupt(&format!("net {} has no arrays", meta.key)));
        }
        nets.insert(meta.key.clone(), NetworkParams { role: meta.role, arrays: net_arrays });
    }

    let style = if trailer.has_style {
        let means = arrays
            .get("style/means")
            .ok_or_else(|| corrupt("missing style/means"))?
            .clone()
            .into_dimensionality()
            .map_err(|_| corrupt("style/means is not a matrix"))?;
        let log_stds = arrays
            .get("style/log_stds")
            .ok_or_else(|| corrupt("missing style/log_stds"))?
            .clone()
            .into_dimensionality()
            .map_err(|_| corrupt("style/log_stds is not a matrix"))?;
        Some(StyleTable { means, log_stds })
    } else {
        None
    };

    let mut opt = IndexMap::new();
    for meta in &trailer.opt {
        let prefix = format!("opt/{}/", meta.group);
        let mut group_arrays = IndexMap::new();
        for (name, arr) in arrays.iter() {
            if let Some(pname) = name.strip_prefix(&prefix) {
                group_arrays.insert(pname.to_string(), arr.clone());
            }
        }
        opt.insert(
            meta.group.clone(),
            OptState::restore(meta.kind, meta.steps, group_arrays)?,
        );
    }

    Ok(CheckpointBundle {
        stage: trailer.stage,
        iteration: trailer.iteration,
        config: trailer.config,
        rng: trailer.rng,
        nets,
        style,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{build_network, ArchitectureSpec};
    use crate::rng::Stream;
    use crate::training::config::TrainingConfig;

    fn tiny_bundle() -> CheckpointBundle {
        let spec = ArchitectureSpec {
            base_size: 8,
            stage_channels: vec![4],
            head_width: 8,
            content_dim: 3,
            style_dim: 2,
            n_artists: 3,
            blocks_per_stage: 1,
            kernel_size: 3,
        };
        let mut cfg = TrainingConfig::desk();
        cfg.arch = spec.clone();
        let mut rng = Stream::new(3, "ckpt-test");
        let mut nets = IndexMap::new();
        nets.insert(
            "encoder".to_string(),
            build_network::<f32>(&spec, Role::Encoder, &mut rng).unwrap(),
        );
        nets.insert(
            "c1".to_string(),
            build_network::<f32>(&spec, Role::Classifier, &mut rng).unwrap(),
        );
        let mut opt = IndexMap::new();
        let mut o = OptState::new(OptimKind::Adam);
        let mut p = ArrayD::from_elem(IxDyn(&[4]), 1.0f32);
        o.advance();
        o.step("encoder/fc.weight", &mut p, &ArrayD::from_elem(IxDyn(&[4]), 0.5f32), 0.01);
        opt.insert("egs".to_string(), o);
        CheckpointBundle {
            stage: StageKind::Stage1,
            iteration: 41,
            config: cfg,
            rng: Stream::new(9, "x").state(),
            nets,
            style: Some(StyleTable::new(3, 2)),
            opt,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.gad");
        let p2 = dir.path().join("b.gad");
        let bundle = tiny_bundle();
        save_checkpoint(&bundle, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gad");
        let bundle = tiny_bundle();
        save_checkpoint(&bundle, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.iteration, 41);
        assert_eq!(loaded.stage, StageKind::Stage1);
        assert_eq!(loaded.config, bundle.config);
        assert_eq!(loaded.rng, bundle.rng);
        assert_eq!(loaded.nets["encoder"].arrays, bundle.nets["encoder"].arrays);
        assert_eq!(
            loaded.style.as_ref().unwrap().means,
            bundle.style.as_ref().unwrap().means
        );
        assert_eq!(loaded.opt["egs"].step_count(), 1);
    }

    #[test]
    fn corrupt_and_mismatched_containers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.gad");
        save_checkpoint(&tiny_bundle(), &p).unwrap();

        // version tag tampering
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[7] ^= 0xff;
        let bad = dir.path().join("bad.gad");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(GadError::Checkpoint(_))));

        // truncation
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.gad");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&cut).is_err());

        // loading into a different architecture must name the first bad array
        let loaded = load_checkpoint(&p).unwrap();
        let other = ArchitectureSpec::desk(10);
        let err = loaded.nets["encoder"].check_against(&other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage0") || msg.contains("arrays"), "{msg}");
    }
}
