//! MCCK checkpoint container: a JSON manifest followed by a little-endian
//! `f32` payload of named tensors.
//!
//! ```text
//! "MCCK" | u32 version | u64 manifest_len | manifest JSON | f32 payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::backbone::{build_model, Model, ModelConfig};
use crate::conditioning::ConditionKind;
use crate::control_branch::{attach_control_branch, ControlModel};
use crate::evaluation::{RetrievalConfig, RetrievalEmbedder};
use crate::params::ParamTree;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCCK";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Backbone,
    ControlBranch,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded container: manifest plus tensors by name.
#[derive(Debug, Clone)]
pub struct Container {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Mat>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

pub fn encode<P: ParamTree<Mat>>(
    kind: CheckpointKind,
    config: serde_json::Value,
    meta: BTreeMap<String, serde_json::Value>,
    tree: &P,
    extra: &[(&str, &Mat)],
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, m: &Mat| {
        tensors.push(TensorEntry { name, rows: m.nrows(), cols: m.ncols(), offset });
        offset += m.len();
        for v in m.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    tree.visit("", &mut |n, m| add(n, m));
    for (n, m) in extra {
        add(n.to_string(), m);
    }
    let manifest = Manifest { kind, config, meta, tensors };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < PREFIX_LEN {
        return Err(format_err(bytes.len(), "truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected MCCK"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREFIX_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(8, "manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[PREFIX_LEN..end])
        .map_err(|e| format_err(PREFIX_LEN, format!("bad manifest: {e}")))?;
    let payload = &bytes[end..];
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let n = t.rows * t.cols;
        let (a, b) = (t.offset * 4, (t.offset + n) * 4);
        if b > payload.len() {
            return Err(format_err(end + a, format!("tensor {} runs past the payload", t.name)));
        }
        let vals: Vec<f64> = payload[a..b]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), vals).expect("sized above");
        tensors.insert(t.name.clone(), m);
    }
    Ok(Container { manifest, tensors })
}

impl Container {
    /// Overwrites every leaf of `tree` with the same-named stored tensor.
    pub fn fill<P: ParamTree<Mat>>(&self, tree: &mut P) -> Result<()> {
        let mut err = None;
        tree.visit_mut("", &mut |name, m| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                Some(t) if t.dim() == m.dim() => m.assign(t),
                Some(t) => err = Some(Error::Compat(format!("tensor {name} has shape {:?}, expected {:?}", t.dim(), m.dim()))),
                None => err = Some(Error::Compat(format!("checkpoint lacks tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.manifest
            .meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| format_err(PREFIX_LEN, format!("manifest lacks string field {key}")))
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Compat(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.manifest.kind
            )));
        }
        Ok(())
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// SHA-256 over the model config and the `f32` image of every tensor, so the
/// value survives a save/load round trip.
pub fn backbone_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).expect("config serializes"));
    model.params.visit("", &mut |name, m| {
        h.update(name.as_bytes());
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update((*v as f32).to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

pub fn save_backbone(model: &Model, path: impl AsRef<Path>) -> Result<String> {
    let hash = backbone_hash(model);
    let mut meta = BTreeMap::new();
    meta.insert("backbone_hash".into(), hash.clone().into());
    let bytes = encode(
        CheckpointKind::Backbone,
        serde_json::to_value(&model.config)?,
        meta,
        &model.params,
        &[],
    )?;
    write_bytes(path.as_ref(), &bytes)?;
    Ok(hash)
}

/// Loads a backbone and verifies its stored hash.
pub fn load_backbone(path: impl AsRef<Path>) -> Result<(Model, String)> {
    let c = read_container(path)?;
    c.expect_kind(CheckpointKind::Backbone)?;
    let config: ModelConfig = serde_json::from_value(c.manifest.config.clone())?;
    let mut model = build_model(&config, 0)?;
    c.fill(&mut model.params)?;
    let hash = backbone_hash(&model);
    if hash != c.meta_str("backbone_hash")? {
        return Err(format_err(PREFIX_LEN, "backbone hash does not match its tensors"));
    }
    Ok((model, hash))
}

pub fn save_branch(branch: &ControlModel, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("backbone_hash".into(), branch.backbone_hash.clone().into());
    meta.insert("depth".into(), branch.depth().into());
    let config = serde_json::json!({ "kind": branch.kind.name(), "cond_dim": branch.cond_dim });
    let bytes = encode(CheckpointKind::ControlBranch, config, meta, &branch.params, &[])?;
    write_bytes(path.as_ref(), &bytes)
}

/// Loads a branch for `model`, refusing it when it was trained against a
/// different backbone.
pub fn load_branch(path: impl AsRef<Path>, model: &Model) -> Result<ControlModel> {
    let c = read_container(path)?;
    c.expect_kind(CheckpointKind::ControlBranch)?;
    let expected = c.meta_str("backbone_hash")?.to_string();
    let actual = backbone_hash(model);
    if expected != actual {
        return Err(Error::Compat(format!(
            "branch was trained on backbone {expected}, got {actual}"
        )));
    }
    let kind: ConditionKind = c.manifest.config["kind"]
        .as_str()
        .ok_or_else(|| format_err(PREFIX_LEN, "branch config lacks kind"))?
        .parse()?;
    let depth = c.manifest.meta.get("depth").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let mut branch = attach_control_branch(model, depth, kind, 0, &actual)?;
    c.fill(&mut branch.params)?;
    Ok(branch)
}

pub fn save_retrieval(emb: &RetrievalEmbedder, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(
        CheckpointKind::Retrieval,
        serde_json::to_value(&emb.config)?,
        BTreeMap::new(),
        &emb.params,
        &[("norm.mean", &emb.mean), ("norm.std", &emb.std)],
    )?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn load_retrieval(path: impl AsRef<Path>) -> Result<RetrievalEmbedder> {
    let c = read_container(path)?;
    c.expect_kind(CheckpointKind::Retrieval)?;
    let config: RetrievalConfig = serde_json::from_value(c.manifest.config.clone())?;
    let mut emb = RetrievalEmbedder::new(config, 0)?;
    c.fill(&mut emb.params)?;
    for (name, dst) in [("norm.mean", &mut emb.mean), ("norm.std", &mut emb.std)] {
        let t = c
            .tensors
            .get(name)
            .ok_or_else(|| Error::Compat(format!("checkpoint lacks tensor {name}")))?;
        if t.dim() != dst.dim() {
            return Err(Error::Compat(format!("tensor {name} has shape {:?}", t.dim())));
        }
        dst.assign(t);
    }
    Ok(emb)
}
