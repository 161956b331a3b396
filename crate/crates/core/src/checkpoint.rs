//! Single-file checkpoint container.
//!
//! Layout: magic, format version, a JSON manifest (architecture, latent
//! scale, section list with tensor names and shapes), then length-prefixed
//! binary sections in manifest order, then an optional opaque trainer-state
//! blob. Tensor payloads are raw little-endian f64, so save/load round-trips
//! bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffusion::{ArchConfig, DiffusionModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"ASCK";
const VERSION: u32 = 1;

/// Section order is fixed; parameters map to sections by name prefix.
const SECTIONS: [(&str, &str); 6] = [
    ("autoencoder", "ae."),
    ("unet", "unet."),
    ("gated", "gated."),
    ("scm", "scm."),
    ("token_bank", "bank."),
    ("mask_unet", "mask_unet."),
];

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SectionMeta {
    name: String,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    arch: ArchConfig,
    latent_scale: f64,
    schedule_t_max: usize,
    sections: Vec<SectionMeta>,
    trainstate_len: usize,
}

fn section_of(name: &str) -> Result<&'static str> {
    SECTIONS
        .iter()
        .find(|(_, prefix)| name.starts_with(prefix))
        .map(|(s, _)| *s)
        .ok_or_else(|| Error::Checkpoint(format!("parameter '{name}' belongs to no known section")))
}

/// Write the model (and optional opaque trainer state) to one file.
pub fn save(model: &DiffusionModel, path: &Path, trainstate: Option<&[u8]>) -> Result<()> {
    // group parameters by section, preserving store order
    let mut grouped: BTreeMap<&'static str, Vec<(String, &Tensor)>> = BTreeMap::new();
    for (_, e) in model.store.iter() {
        grouped.entry(section_of(&e.name)?).or_default().push((e.name.clone(), &e.value));
    }

    let mut sections = Vec::new();
    let mut payloads: Vec<Vec<u8>> = Vec::new();
    // schedule first: betas as one tensor
    {
        let betas = Tensor::new(vec![model.schedule.t_max()], model.schedule.betas().to_vec());
        sections.push(SectionMeta {
            name: "schedule".into(),
            tensors: vec![TensorMeta { name: "schedule.betas".into(), shape: betas.shape().to_vec() }],
        });
        payloads.push(betas.to_le_bytes());
    }
    for (name, _) in SECTIONS {
        let entries = grouped.remove(name).unwrap_or_default();
        let mut payload = Vec::new();
        let mut metas = Vec::new();
        for (pname, t) in entries {
            metas.push(TensorMeta { name: pname, shape: t.shape().to_vec() });
            payload.extend_from_slice(&t.to_le_bytes());
        }
        sections.push(SectionMeta { name: name.into(), tensors: metas });
        payloads.push(payload);
    }

    let manifest = Manifest {
        version: VERSION,
        arch: model.arch.clone(),
        latent_scale: model.latent_scale,
        schedule_t_max: model.schedule.t_max(),
        sections,
        trainstate_len: trainstate.map_or(0, |b| b.len()),
    };
    let manifest_json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for p in &payloads {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(p);
    }
    if let Some(ts) = trainstate {
        out.extend_from_slice(ts);
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a model plus the opaque trainer-state bytes, when present.
pub fn load(path: &Path) -> Result<(DiffusionModel, Option<Vec<u8>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let ver = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if ver != VERSION {
        return Err(Error::Checkpoint(format!("checkpoint version {ver}, expected {VERSION}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut off = 16;
    if bytes.len() < off + mlen {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[off..off + mlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    off += mlen;

    let mut model = DiffusionModel::from_arch(manifest.arch.clone())?;
    model.latent_scale = manifest.latent_scale;

    let mut assigned = vec![false; model.store.len()];
    for section in &manifest.sections {
        if bytes.len() < off + 8 {
            return Err(Error::Checkpoint(format!("truncated section header for '{}'", section.name)));
        }
        let plen = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if bytes.len() < off + plen {
            return Err(Error::Checkpoint(format!("truncated payload for section '{}'", section.name)));
        }
        let mut poff = off;
        for meta in &section.tensors {
            let n: usize = meta.shape.iter().product();
            let end = poff + 8 * n;
            if end > off + plen {
                return Err(Error::Checkpoint(format!("section '{}' payload underruns tensor {}", section.name, meta.name)));
            }
            let t = Tensor::from_le_bytes(meta.shape.clone(), &bytes[poff..end])?;
            poff = end;
            if meta.name == "schedule.betas" {
                model.schedule = NoiseSchedule::from_parts(manifest.schedule_t_max, t.into_data())?;
                continue;
            }
            let id = model
                .store
                .by_name(&meta.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint tensor '{}' has no model slot", meta.name)))?;
            if model.store.get(id).shape() != meta.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' shape {:?} does not match model {:?}",
                    meta.name,
                    meta.shape,
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
            assigned[id.0] = true;
        }
        if poff != off + plen {
            return Err(Error::Checkpoint(format!("section '{}' payload overruns its tensors", section.name)));
        }
        off += plen;
    }
    if let Some((_, e)) = model.store.iter().find(|(id, _)| !assigned[id.0]) {
        return Err(Error::Checkpoint(format!("checkpoint is missing parameter '{}'", e.name)));
    }

    let trainstate = if manifest.trainstate_len > 0 {
        if bytes.len() < off + manifest.trainstate_len {
            return Err(Error::Checkpoint("truncated trainer state".into()));
        }
        Some(bytes[off..off + manifest.trainstate_len].to_vec())
    } else {
        None
    };
    Ok((model, trainstate))
}
