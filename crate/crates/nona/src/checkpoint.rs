//! Checkpoint persistence: a JSON manifest plus one little-endian raw
//! f64 blob per tensor, referenced by name. Bit-exact by construction.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{build_model, HeadState, Model};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ExperimentConfig,
    best_epoch: usize,
    tensors: Vec<TensorEntry>,
    /// Present for NONA heads with a frozen neighbor bank.
    bank: Option<[TensorEntry; 2]>,
}

fn write_blob(dir: &Path, file: &str, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(file), bytes)?;
    Ok(())
}

fn read_blob(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let bytes = fs::read(dir.join(&entry.file))?;
    let numel: usize = entry.shape.iter().product();
    if bytes.len() != numel * 8 {
        return Err(Error::Contract(format!(
            "checkpoint blob {}: {} bytes, expected {}",
            entry.file,
            bytes.len(),
            numel * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new_scores(entry.shape.clone(), data)?)
}

fn blob_name(tensor_name: &str) -> String {
    format!("{}.f64le", tensor_name.replace('.', "_"))
}

/// Write `manifest.json` and one blob per parameter (and bank tensor)
/// into `dir`, creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    config: &ExperimentConfig,
    best_epoch: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in model.named_param_tensors() {
        let file = blob_name(&name);
        write_blob(dir, &file, t)?;
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), file });
    }
    let bank = match &model.head {
        HeadState::Nona(head) => match &head.bank {
            Some(bank) => {
                let entries = [
                    TensorEntry {
                        name: "bank.embeddings".into(),
                        shape: bank.embeddings.shape().to_vec(),
                        file: blob_name("bank.embeddings"),
                    },
                    TensorEntry {
                        name: "bank.labels".into(),
                        shape: bank.labels.shape().to_vec(),
                        file: blob_name("bank.labels"),
                    },
                ];
                write_blob(dir, &entries[0].file, &bank.embeddings)?;
                write_blob(dir, &entries[1].file, &bank.labels)?;
                Some(entries)
            }
            None => None,
        },
        HeadState::Dense(_) => None,
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        best_epoch,
        tensors,
        bank,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Rebuild the model from the manifest's config echo and overwrite every
/// parameter with the stored blobs.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, ExperimentConfig, usize)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("checkpoint manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Contract(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let cfg = &manifest.config;
    let mut model = build_model(
        cfg.head,
        &cfg.model,
        cfg.similarity,
        cfg.softstep,
        cfg.dataset.seed,
    );
    {
        let expected: Vec<String> =
            model.named_param_tensors().iter().map(|(n, _)| n.clone()).collect();
        let stored: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
        if expected != stored {
            return Err(Error::Contract(format!(
                "checkpoint parameter names {stored:?} do not match config architecture {expected:?}"
            )));
        }
        let mut params = model.param_tensors_mut();
        for (slot, entry) in params.iter_mut().zip(&manifest.tensors) {
            let t = read_blob(dir, entry)?;
            if t.shape() != slot.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {}: shape {:?} vs expected {:?}",
                    entry.name,
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
    }
    if let Some(entries) = &manifest.bank {
        let embeddings = read_blob(dir, &entries[0])?;
        let labels = read_blob(dir, &entries[1])?;
        match &mut model.head {
            HeadState::Nona(head) => head.set_neighbor_bank(embeddings, labels)?,
            HeadState::Dense(_) => {
                return Err(Error::Contract("checkpoint has a bank but a dense head".into()))
            }
        }
    }
    Ok((model, manifest.config, manifest.best_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SplitPlan};
    use crate::similarity::SimilarityKind;
    use crate::softstep::SoftStepConfig;
    use crate::train::{train_model, DataSplits, HeadKind, ModelConfig, TrainConfig};

    fn tiny_config(head: HeadKind) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "dataset": {{"target": "linear", "n_points": 50, "noise_std": 0.05, "seed": 7}},
                "model": {{"input_dim": 2, "hidden_dim": 8, "embedding_dim": 3, "depth": 1}},
                "head": "{}",
                "similarity": "neg_l2",
                "softstep": {{"family": "s2", "param_mode": "global", "epsilon": 1e-6, "t_clamp": 1e-3}},
                "train": {{"batch_size": 16, "learning_rate": 1e-3, "max_epochs": 3, "patience": 10, "optimizer": "adam", "seed": 7}},
                "output_dir": "unused"
            }}"#,
            if head == HeadKind::Nona { "nona" } else { "dense" }
        ))
        .unwrap()
    }

    fn trained(cfg: &ExperimentConfig) -> (Model, DataSplits) {
        let (x, y) = generate(&cfg.dataset).unwrap();
        let data = DataSplits::from_dataset(&x, &y, &SplitPlan::new(cfg.train.seed)).unwrap();
        let model = build_model(
            cfg.head,
            &cfg.model,
            cfg.similarity,
            cfg.softstep,
            cfg.train.seed,
        );
        let (model, _) = train_model(model, &data, &cfg.train).unwrap();
        (model, data)
    }

    #[test]
    fn roundtrip_is_bitwise_identity() {
        for head in [HeadKind::Nona, HeadKind::Dense] {
            let cfg = tiny_config(head);
            let (model, _) = trained(&cfg);
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(dir.path(), &model, &cfg, 3).unwrap();
            let (loaded, _, best_epoch) = load_checkpoint(dir.path()).unwrap();
            assert_eq!(best_epoch, 3);
            for ((n1, t1), (n2, t2)) in
                model.named_param_tensors().iter().zip(loaded.named_param_tensors().iter())
            {
                assert_eq!(n1, n2);
                assert_eq!(t1, t2, "tensor {n1} changed in round trip");
            }
            if let (HeadState::Nona(a), HeadState::Nona(b)) = (&model.head, &loaded.head) {
                assert_eq!(a.bank.as_ref().unwrap().embeddings, b.bank.as_ref().unwrap().embeddings);
                assert_eq!(a.bank.as_ref().unwrap().labels, b.bank.as_ref().unwrap().labels);
            }
        }
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let cfg = tiny_config(HeadKind::Nona);
        let (model, data) = trained(&cfg);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &cfg, 1).unwrap();
        let (loaded, _, _) = load_checkpoint(dir.path()).unwrap();
        let a = crate::train::evaluate(&model, &data.x_test, &data.y_test).unwrap();
        let b = crate::train::evaluate(&loaded, &data.x_test, &data.y_test).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let cfg = tiny_config(HeadKind::Dense);
        let (model, _) = trained(&cfg);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &cfg, 1).unwrap();
        fs::write(dir.path().join(blob_name("dense.weight")), b"short").unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
