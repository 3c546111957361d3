//! Detector weights as `detector.json` plus one NPY file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::{npy, write_atomic};
use crate::detector::{Branch, ConvLayer, Detector, DetectorConfig, DetectorWeights};
use crate::error::{Error, Result};
use crate::numerics::Activation;

const DETECTOR_FILE: &str = "detector.json";

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct LayerRecord {
    id: String,
    input: String,
    stride: usize,
    padding: usize,
    activation: Option<Activation>,
    branch: Branch,
    weight_file: String,
    bias_file: String,
}

#[derive(Serialize, Deserialize)]
struct DetectorRecord {
    config: DetectorConfig,
    layers: Vec<LayerRecord>,
}

pub fn write_detector(detector: &Detector, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, l) in detector.weights().layers.iter().enumerate() {
        let weight_file = format!("{i:02}_{}_weight.npy", l.id);
        let bias_file = format!("{i:02}_{}_bias.npy", l.id);
        write_atomic(&dir.join(&weight_file), &npy::to_bytes(&l.weight))?;
        write_atomic(&dir.join(&bias_file), &npy::to_bytes(&l.bias))?;
        layers.push(LayerRecord {
            id: l.id.clone(),
            input: l.input.clone(),
            stride: l.stride,
            padding: l.padding,
            activation: l.activation,
            branch: l.branch,
            weight_file,
            bias_file,
        });
    }
    let record = DetectorRecord {
        config: detector.config().clone(),
        layers,
    };
    let mut json = serde_json::to_vec_pretty(&record)?;
    json.push(b'\n');
    write_atomic(&dir.join(DETECTOR_FILE), &json)
}

pub fn read_detector(dir: &Path) -> Result<Detector> {
    let path = dir.join(DETECTOR_FILE);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io(e),
    })?;
    let record: DetectorRecord =
        serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(e.to_string()))?;
    let mut layers = Vec::with_capacity(record.layers.len());
    for l in record.layers {
        layers.push(ConvLayer {
            weight: npy::read(&dir.join(&l.weight_file))?,
            bias: npy::read(&dir.join(&l.bias_file))?,
            id: l.id,
            input: l.input,
            stride: l.stride,
            padding: l.padding,
            activation: l.activation,
            branch: l.branch,
        });
    }
    Detector::from_parts(record.config, DetectorWeights { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::build_blob_detector;

    #[test]
    fn detector_round_trip() {
        let det = build_blob_detector(&DetectorConfig::default()).unwrap();
        let d = tempfile::tempdir().unwrap();
        write_detector(&det, d.path()).unwrap();
        assert_eq!(read_detector(d.path()).unwrap(), det);
    }
}
