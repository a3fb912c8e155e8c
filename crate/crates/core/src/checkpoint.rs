//! Checkpoint persistence: a directory holding `manifest.json` with the
//! architecture descriptor, parameter table and seed provenance, plus
//! `weights.bin` with every tensor concatenated as little-endian f32 in
//! manifest order. Optimized neuron noise persists alongside as `noise.bin`
//! under the same binary convention. All writes go through a temp file and a
//! rename.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, ArchDescriptor, LayeredClassifier, ParamSelection, ParamSpec};
use crate::noise::NeuronNoise;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub layer: usize,
    pub role: crate::model::ParamRole,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub root_seed: u64,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub epsilon: f32,
    pub selection: ParamSelection,
    pub seed: u64,
    pub delta_len: usize,
    pub xi_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: ArchDescriptor,
    pub split_index: usize,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    pub seed_provenance: SeedProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseEntry>,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tensor_bytes(model: &LayeredClassifier, specs: &[ParamSpec]) -> Result<Vec<u8>> {
    let total: usize = specs.iter().map(|s| s.len).sum();
    let mut bytes = Vec::with_capacity(total * 4);
    for spec in specs {
        for v in model.param_values(spec.layer, spec.role)? {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Write the model (and optionally its optimized noise) into `dir`.
pub fn save_checkpoint(
    model: &LayeredClassifier,
    dir: &Path,
    noise: Option<&NeuronNoise>,
    provenance: SeedProvenance,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let specs = model.param_specs();
    let mut entries = Vec::with_capacity(specs.len());
    let mut offset = 0u64;
    for spec in &specs {
        entries.push(ParamEntry {
            name: spec.name.clone(),
            layer: spec.layer,
            role: spec.role,
            shape: spec.shape.clone(),
            offset,
            len: spec.len,
        });
        offset += (spec.len * 4) as u64;
    }
    let manifest = Manifest {
        format_version: 1,
        architecture: model.arch.clone(),
        split_index: model.split_index,
        num_classes: model.num_classes,
        input_shape: model.input_shape,
        dtype: "f32le".into(),
        params: entries,
        seed_provenance: provenance,
        noise: noise.map(|n| NoiseEntry {
            epsilon: n.epsilon,
            selection: n.selection,
            seed: n.seed,
            delta_len: n.delta.len(),
            xi_len: n.xi.len(),
        }),
    };

    atomic_write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    atomic_write(&dir.join("weights.bin"), &tensor_bytes(model, &specs)?)?;
    if let Some(n) = noise {
        let mut bytes = Vec::with_capacity((n.delta.len() + n.xi.len()) * 4);
        for v in n.delta.iter().chain(n.xi.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        atomic_write(&dir.join("noise.bin"), &bytes)?;
    }
    Ok(())
}

fn read_f32s(bytes: &[u8], offset: usize, len: usize, path: &Path) -> Result<Vec<f32>> {
    let end = offset + len * 4;
    if end > bytes.len() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            msg: format!("tensor at {offset}..{end} out of bounds ({} bytes)", bytes.len()),
        });
    }
    Ok(bytes[offset..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Load a checkpoint directory back into a model and optional noise.
pub fn load_checkpoint(dir: &Path) -> Result<(LayeredClassifier, Option<NeuronNoise>, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(
        |e| Error::Ingestion { path: manifest_path.clone(), msg: e.to_string() },
    )?)?;
    if manifest.dtype != "f32le" {
        return Err(Error::Ingestion {
            path: manifest_path.clone(),
            msg: format!("unsupported dtype {}", manifest.dtype),
        });
    }
    let mut model = build_model(
        &manifest.architecture,
        manifest.input_shape,
        manifest.num_classes,
        manifest.seed_provenance.root_seed,
    )?;
    if model.split_index != manifest.split_index {
        return Err(Error::Ingestion {
            path: manifest_path.clone(),
            msg: "split index does not match the architecture".into(),
        });
    }
    let weights_path = dir.join("weights.bin");
    let bytes = fs::read(&weights_path)
        .map_err(|e| Error::Ingestion { path: weights_path.clone(), msg: e.to_string() })?;
    for entry in &manifest.params {
        let values = read_f32s(&bytes, entry.offset as usize, entry.len, &weights_path)?;
        model.set_param_values(entry.layer, entry.role, &values)?;
    }

    let noise = match &manifest.noise {
        Some(entry) => {
            let noise_path = dir.join("noise.bin");
            let nb = fs::read(&noise_path)
                .map_err(|e| Error::Ingestion { path: noise_path.clone(), msg: e.to_string() })?;
            let delta = read_f32s(&nb, 0, entry.delta_len, &noise_path)?;
            let xi = read_f32s(&nb, entry.delta_len * 4, entry.xi_len, &noise_path)?;
            Some(NeuronNoise {
                delta,
                xi,
                epsilon: entry.epsilon,
                selection: entry.selection,
                seed: entry.seed,
            })
        }
        None => None,
    };
    Ok((model, noise, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActKind, Batch};
    use crate::noise::init_noise;
    use ndarray::Array4;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_preserves_forward_bitwise() {
        let arch = ArchDescriptor::Cnn {
            channels: vec![4, 8],
            kernel: 3,
            activation: ActKind::LeakyRelu,
            batch_norm: true,
        };
        let mut model = build_model(&arch, (3, 8, 8), 5, 77).unwrap();
        // Perturb so the state differs from a fresh build.
        let data = Batch::new(
            Array4::from_shape_fn((10, 3, 8, 8), |(n, c, i, j)| {
                ((n + c + i + j) % 13) as f32 / 13.0
            }),
            (0..10).map(|i| i % 5).collect(),
            5,
        )
        .unwrap();
        crate::model::train(
            &mut model,
            &data,
            &crate::model::TrainHyper { epochs: 2, batch_size: 5, ..Default::default() },
        )
        .unwrap();

        let noise = init_noise(&model, 0.3, Default::default(), 9);
        let dir = tempdir().unwrap();
        save_checkpoint(
            &model,
            dir.path(),
            Some(&noise),
            SeedProvenance { root_seed: 77, labels: vec!["train".into()] },
        )
        .unwrap();

        let (loaded, loaded_noise, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.num_classes, 5);
        let x = Array4::from_elem((2, 3, 8, 8), 0.4);
        let a = model.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let ln = loaded_noise.unwrap();
        assert_eq!(
            ln.delta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            noise.delta.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(ln.epsilon, 0.3);
    }

    #[test]
    fn missing_checkpoint_is_ingestion_error() {
        let dir = tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }

    #[test]
    fn manifest_offsets_cover_weights_file() {
        let model = build_model(&ArchDescriptor::default_cnn(), (3, 8, 8), 3, 1).unwrap();
        let dir = tempdir().unwrap();
        save_checkpoint(
            &model,
            dir.path(),
            None,
            SeedProvenance { root_seed: 1, labels: vec![] },
        )
        .unwrap();
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        let bytes = std::fs::read(dir.path().join("weights.bin")).unwrap();
        let total: usize = manifest.params.iter().map(|p| p.len * 4).sum();
        assert_eq!(bytes.len(), total);
        let last = manifest.params.last().unwrap();
        assert_eq!(last.offset as usize + last.len * 4, bytes.len());
    }
}
