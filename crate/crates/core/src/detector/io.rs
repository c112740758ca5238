//! Detector file: one JSON header line, a newline, then the weights as
//! little-endian f32 (parameters first, then scaler minima and maxima).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Architecture, MinMaxScaler, Network, TrainConfig, VaDetector};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::trace::{decode_f32_le, encode_f32_le, NeuronId};

pub const DETECTOR_FORMAT: &str = "vaprobe-detector/1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    architecture: Architecture,
    beta: f64,
    neuron_order: Vec<NeuronId>,
    train_config: TrainConfig,
    n_inputs: usize,
    n_weights: usize,
    scaler: bool,
    final_train_loss: f64,
}

pub fn write_detector(detector: &VaDetector, destination: &Path) -> Result<()> {
    let header = Header {
        format: DETECTOR_FORMAT.to_string(),
        architecture: detector.architecture,
        beta: detector.beta,
        neuron_order: detector.neuron_order.clone(),
        train_config: detector.train_config.clone(),
        n_inputs: detector.n_inputs(),
        n_weights: detector.params.len(),
        scaler: detector.scaler.is_some(),
        final_train_loss: detector.final_train_loss,
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::json(destination, e))?;
    bytes.push(b'\n');
    let scaler_values = detector
        .scaler
        .iter()
        .flat_map(|s| s.min.iter().chain(&s.max).copied());
    bytes.extend(encode_f32_le(
        detector.params.iter().copied().chain(scaler_values),
    ));
    fsutil::write_file_atomic(destination, &bytes)
}

pub fn read_detector(source: &Path) -> Result<VaDetector> {
    let bytes = std::fs::read(source).map_err(|e| Error::io(source, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::InvalidArgument(format!("{}: missing header line", source.display())))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::json(source, e))?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if format != DETECTOR_FORMAT {
        return Err(Error::UnsupportedVersion(format.to_string()));
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::json(source, e))?;
    if header.n_inputs != header.neuron_order.len()
        || header.n_weights != Network::param_count(header.n_inputs, header.architecture)
    {
        return Err(Error::DimensionMismatch(format!(
            "{}: header describes {} inputs and {} weights",
            source.display(),
            header.n_inputs,
            header.n_weights
        )));
    }
    let blob = &bytes[split + 1..];
    let scaler_len = if header.scaler { 2 * header.n_inputs } else { 0 };
    let expected = 4 * (header.n_weights + scaler_len);
    if blob.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: expected {expected} weight bytes, found {}",
            source.display(),
            blob.len()
        )));
    }
    let mut values = decode_f32_le(blob);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: weight {i}", source.display())));
    }
    let scaler = header.scaler.then(|| {
        let max = values.split_off(header.n_weights + header.n_inputs);
        let min = values.split_off(header.n_weights);
        MinMaxScaler { min, max }
    });
    Ok(VaDetector {
        neuron_order: header.neuron_order,
        beta: header.beta,
        architecture: header.architecture,
        train_config: header.train_config,
        params: values,
        scaler,
        final_train_loss: header.final_train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::network::{predict, train_detector, StepSchedule};

    fn sample(arch: Architecture, scale: bool) -> VaDetector {
        let set = super::super::network::tests::gaussian_set(20, 2.0, 3, 9);
        let cfg = TrainConfig {
            architecture: arch,
            epochs: 5,
            min_max_scale: scale,
            schedule: StepSchedule::HalveOnIncrease,
            ..Default::default()
        };
        train_detector(&set, 0.45, &cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (arch, scale) in [
            (Architecture::Mlp { hidden: 8 }, false),
            (Architecture::Linear, true),
        ] {
            let det = sample(arch, scale);
            let path = dir.path().join("det.bin");
            write_detector(&det, &path).unwrap();
            let back = read_detector(&path).unwrap();
            assert_eq!(back, det);
            let x = [0.3, -1.2, 2.5];
            assert_eq!(
                predict(&det, &x).unwrap().p_absent.to_bits(),
                predict(&back, &x).unwrap().p_absent.to_bits()
            );
        }
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let det = sample(Architecture::Linear, false);
        let path = dir.path().join("det.bin");
        write_detector(&det, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_detector(&path), Err(Error::DimensionMismatch(_))));

        let text = String::from_utf8_lossy(&std::fs::read(dir.path().join("det.bin")).unwrap())
            .replace(DETECTOR_FORMAT, "vaprobe-detector/9");
        std::fs::write(&path, text.as_bytes()).unwrap();
        assert!(matches!(read_detector(&path), Err(Error::UnsupportedVersion(_))));
    }
}
