//! Model checkpoints as safetensors files. The header metadata carries the
//! backbone configuration and the class registry so a checkpoint is
//! self-describing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::OmniSeg;
use crate::registry::{ClassEntry, Registry};

const FORMAT_KEY: &str = "format";
const FORMAT: &str = "omniseg/1";

#[derive(Debug)]
pub struct Checkpoint {
    pub model: OmniSeg<f32>,
    pub registry: Registry,
    pub epoch: Option<usize>,
}

pub fn save_checkpoint(path: &Path, model: &OmniSeg<f32>, registry: &Registry, epoch: Option<usize>) -> Result<()> {
    if registry.num_classes() != model.num_classes() {
        return Err(Error::Checkpoint(format!(
            "registry has {} classes, model {}",
            registry.num_classes(),
            model.num_classes()
        )));
    }
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params()
        .iter()
        .map(|(name, t)| {
            let data = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), t.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::from([
        (FORMAT_KEY.to_string(), FORMAT.to_string()),
        ("backbone".to_string(), to_json(model.backbone_config())?),
        ("classes".to_string(), to_json(&registry.entries())?),
    ]);
    if let Some(e) = epoch {
        meta.insert("epoch".to_string(), e.to_string());
    }
    let buf = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(bad("not a model checkpoint".into()));
    }
    let field = |key: &str| meta.get(key).ok_or_else(|| bad(format!("missing {key} metadata")));
    let config: BackboneConfig = serde_json::from_str(field("backbone")?).map_err(|e| bad(e.to_string()))?;
    let entries: Vec<ClassEntry> = serde_json::from_str(field("classes")?).map_err(|e| bad(e.to_string()))?;
    let registry = Registry::new(&entries)?;
    let epoch = match meta.get("epoch") {
        Some(e) => Some(e.parse().map_err(|_| bad(format!("bad epoch {e}")))?),
        None => None,
    };

    let tensors = SafeTensors::deserialize(&buf).map_err(|e| bad(e.to_string()))?;
    let mut model = OmniSeg::<f32>::new(&config, registry.num_classes(), 0)?;
    if tensors.len() != model.params().len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            model.params().len(),
            tensors.len()
        )));
    }
    for (name, slot) in model.params_mut().iter_mut() {
        let view = tensors.tensor(name).map_err(|e| bad(format!("{name}: {e}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != slot.shape() {
            return Err(bad(format!(
                "{name}: expected f32 {:?}, found {:?} {:?}",
                slot.shape(),
                view.dtype(),
                view.shape()
            )));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *slot = ArrayD::from_shape_vec(slot.shape(), values).map_err(|e| bad(e.to_string()))?;
    }
    Ok(Checkpoint { model, registry, epoch })
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let reg = Registry::renal_default();
        let model = OmniSeg::<f32>::new(&BackboneConfig::tiny(&[4, 8], 2), 6, 3).unwrap();
        save_checkpoint(&path, &model, &reg, Some(7)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, Some(7));
        assert_eq!(back.registry, reg);
        let x = Array4::<f32>::from_shape_fn((2, 3, 8, 8), |(n, c, y, x)| ((n + c + y * x) % 5) as f32 / 5.0);
        let a = model.predict(x.view(), &[1, 4]).unwrap();
        let b = back.model.predict(x.view(), &[1, 4]).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
    }

    #[test]
    fn rejects_garbage_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        assert!(matches!(load_checkpoint(&path), Err(Error::Io { .. })));
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
