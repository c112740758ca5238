//! Activation-trace data model and its on-disk format.
//!
//! A trace directory holds a JSON manifest (`manifest.json`) with the model
//! dimensions and token metadata, plus one `layer_<l>.f32` file per layer.
//! Each layer file is a row-major `[tokens x d_ffn]` block of little-endian
//! IEEE-754 single-precision values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const TRACE_FORMAT: &str = "vaprobe-trace/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A feed-forward neuron, addressed by layer and index within the layer.
///
/// Ordering is layer-major: `(layer, index)` compared lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub const fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl std::fmt::Display for NeuronId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingLabel {
    Present,
    Absent,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub position: usize,
    pub text: String,
    pub is_word_final: bool,
    pub is_content: bool,
    pub grounding_label: GroundingLabel,
    pub sample_id: String,
    /// Whether the model answered this token's question correctly, when the
    /// producer knows it. Used only for optional curation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered_correctly: Option<bool>,
}

impl TokenRecord {
    pub fn new(position: usize, text: impl Into<String>, sample_id: impl Into<String>) -> Self {
        Self {
            position,
            text: text.into(),
            is_word_final: true,
            is_content: false,
            grounding_label: GroundingLabel::Unlabeled,
            sample_id: sample_id.into(),
            answered_correctly: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub d_ffn: usize,
}

impl ModelDims {
    pub fn neurons(&self) -> usize {
        self.layers * self.d_ffn
    }

    pub fn contains(&self, n: NeuronId) -> bool {
        n.layer < self.layers && n.index < self.d_ffn
    }

    pub fn flat_index(&self, n: NeuronId) -> usize {
        n.layer * self.d_ffn + n.index
    }

    pub fn neuron_at(&self, flat: usize) -> NeuronId {
        NeuronId::new(flat / self.d_ffn, flat % self.d_ffn)
    }
}

/// Per-token, per-layer, per-neuron FFN activations with token metadata.
///
/// Activations are stored token-major: `[token][layer][neuron]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    dims: ModelDims,
    tokens: Vec<TokenRecord>,
    activations: Vec<f32>,
}

impl ActivationTrace {
    pub fn new(dims: ModelDims, tokens: Vec<TokenRecord>, activations: Vec<f32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyTrace);
        }
        if dims.layers == 0 || dims.d_ffn == 0 {
            return Err(Error::DimensionMismatch(format!(
                "model dims must be positive, got {} x {}",
                dims.layers, dims.d_ffn
            )));
        }
        let expected = tokens.len() * dims.neurons();
        if activations.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens x {} layers x {} neurons needs {} values, got {}",
                tokens.len(),
                dims.layers,
                dims.d_ffn,
                expected,
                activations.len()
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.position != i {
                return Err(Error::InvalidArgument(format!(
                    "token positions must be consecutive from 0; token {i} has position {}",
                    t.position
                )));
            }
        }
        if let Some(bad) = activations.iter().position(|v| !v.is_finite()) {
            let per_token = dims.neurons();
            let n = dims.neuron_at(bad % per_token);
            return Err(Error::NonFinite(format!(
                "token {}, neuron {n}",
                bad / per_token
            )));
        }
        Ok(Self {
            dims,
            tokens,
            activations,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn activations(&self) -> &[f32] {
        &self.activations
    }

    #[inline]
    pub fn get(&self, position: usize, neuron: NeuronId) -> f32 {
        self.activations[position * self.dims.neurons() + self.dims.flat_index(neuron)]
    }

    /// All activations of one token, layer-major.
    pub fn token_row(&self, position: usize) -> &[f32] {
        let n = self.dims.neurons();
        &self.activations[position * n..(position + 1) * n]
    }

    pub fn layer_row(&self, position: usize, layer: usize) -> &[f32] {
        let start = position * self.dims.neurons() + layer * self.dims.d_ffn;
        &self.activations[start..start + self.dims.d_ffn]
    }

    /// Distinct sample ids in order of first appearance.
    pub fn sample_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.tokens
            .iter()
            .filter(|t| seen.insert(t.sample_id.as_str()))
            .map(|t| t.sample_id.as_str())
            .collect()
    }

    /// The tokens of one sample as a standalone trace, positions rebased to 0.
    pub fn sample(&self, sample_id: &str) -> Option<ActivationTrace> {
        let n = self.dims.neurons();
        let mut tokens = Vec::new();
        let mut acts = Vec::new();
        for t in self.tokens.iter().filter(|t| t.sample_id == sample_id) {
            let mut rec = t.clone();
            rec.position = tokens.len();
            tokens.push(rec);
            acts.extend_from_slice(&self.activations[t.position * n..(t.position + 1) * n]);
        }
        if tokens.is_empty() {
            return None;
        }
        Some(Self {
            dims: self.dims,
            tokens,
            activations: acts,
        })
    }

    /// Concatenate traces with identical dimensions, renumbering positions.
    pub fn concat(traces: &[ActivationTrace]) -> Result<ActivationTrace> {
        let first = traces.first().ok_or(Error::EmptyTrace)?;
        let mut tokens = Vec::new();
        let mut acts = Vec::new();
        for t in traces {
            if t.dims != first.dims {
                return Err(Error::DimensionMismatch(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.dims, t.dims
                )));
            }
            for rec in &t.tokens {
                let mut rec = rec.clone();
                rec.position = tokens.len();
                tokens.push(rec);
            }
            acts.extend_from_slice(&t.activations);
        }
        ActivationTrace::new(first.dims, tokens, acts)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    model_dims: ModelDims,
    tokens: Vec<TokenRecord>,
}

fn layer_file(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer_{layer}.f32"))
}

/// Encode a row-major block of f32 values as little-endian bytes.
pub fn encode_f32_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn write_trace_into(trace: &ActivationTrace, dir: &Path) -> Result<()> {
    let manifest = Manifest {
        format: TRACE_FORMAT.to_string(),
        model_dims: trace.dims,
        tokens: trace.tokens.clone(),
    };
    fsutil::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    for layer in 0..trace.dims.layers {
        let bytes = encode_f32_le(
            (0..trace.len()).flat_map(|t| trace.layer_row(t, layer).iter().copied()),
        );
        let path = layer_file(dir, layer);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Write `trace` as a trace directory at `destination`.
///
/// The directory is assembled in a staging location and renamed into place.
pub fn write_trace(trace: &ActivationTrace, destination: &Path) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    fsutil::write_dir_atomic(destination, |dir| write_trace_into(trace, dir))
}

/// Read a trace directory written by [`write_trace`] or an external producer.
pub fn read_trace(source: &Path) -> Result<ActivationTrace> {
    let manifest_path = source.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    match raw.get("format").and_then(|v| v.as_str()) {
        Some(TRACE_FORMAT) => {}
        Some(other) => return Err(Error::UnsupportedVersion(other.to_string())),
        None => return Err(Error::UnsupportedVersion("<missing>".to_string())),
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::json(&manifest_path, e))?;
    let dims = manifest.model_dims;
    let n_tokens = manifest.tokens.len();
    if n_tokens == 0 {
        return Err(Error::EmptyTrace);
    }
    let expected = 4 * n_tokens * dims.d_ffn;
    let mut layers = Vec::with_capacity(dims.layers);
    for layer in 0..dims.layers {
        let path = layer_file(source, layer);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != expected {
            return Err(Error::LayerLength {
                layer,
                expected,
                found: bytes.len(),
            });
        }
        layers.push(decode_f32_le(&bytes));
    }
    let mut activations = Vec::with_capacity(n_tokens * dims.neurons());
    for t in 0..n_tokens {
        for layer in &layers {
            activations.extend_from_slice(&layer[t * dims.d_ffn..(t + 1) * dims.d_ffn]);
        }
    }
    ActivationTrace::new(dims, manifest.tokens, activations)
}

/// Read either a single trace directory or a directory whose immediate
/// subdirectories are trace directories (visited in name order).
pub fn read_traces(source: &Path) -> Result<Vec<ActivationTrace>> {
    if source.join(MANIFEST_FILE).exists() {
        return Ok(vec![read_trace(source)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(source)
        .map_err(|e| Error::io(source, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::io(
            source,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no trace manifest found"),
        ));
    }
    dirs.iter().map(|d| read_trace(d)).collect()
}

/// Present and absent activation samples of one neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSetPair {
    pub neuron: NeuronId,
    pub a_pre: Vec<f64>,
    pub a_abs: Vec<f64>,
}

/// Which labeled tokens feed the present/absent sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curation {
    /// Drop tokens whose `answered_correctly` flag is `Some(false)`.
    pub require_correct: bool,
}

/// Addresses `(trace index, position)` of every labeled word-final token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledTokens {
    pub present: Vec<(usize, usize)>,
    pub absent: Vec<(usize, usize)>,
}

impl LabeledTokens {
    pub fn gather(traces: &[ActivationTrace], curation: Curation) -> Result<Self> {
        let mut out = LabeledTokens::default();
        for (ti, trace) in traces.iter().enumerate() {
            for tok in trace.tokens() {
                if !tok.is_word_final {
                    continue;
                }
                if curation.require_correct && tok.answered_correctly == Some(false) {
                    continue;
                }
                match tok.grounding_label {
                    GroundingLabel::Present => out.present.push((ti, tok.position)),
                    GroundingLabel::Absent => out.absent.push((ti, tok.position)),
                    GroundingLabel::Unlabeled => {}
                }
            }
        }
        if out.present.is_empty() || out.absent.is_empty() {
            return Err(Error::EmptyLabelSet(format!(
                "{} present and {} absent word-final tokens",
                out.present.len(),
                out.absent.len()
            )));
        }
        Ok(out)
    }

    /// Build the activation-set pair of one neuron.
    pub fn pair(&self, traces: &[ActivationTrace], neuron: NeuronId) -> ActivationSetPair {
        let pick = |idx: &[(usize, usize)]| -> Vec<f64> {
            idx.iter()
                .map(|&(t, p)| traces[t].get(p, neuron) as f64)
                .collect()
        };
        ActivationSetPair {
            neuron,
            a_pre: pick(&self.present),
            a_abs: pick(&self.absent),
        }
    }
}

/// Check that every trace shares one set of model dimensions.
pub fn common_dims(traces: &[ActivationTrace]) -> Result<ModelDims> {
    let first = traces.first().ok_or(Error::EmptyTrace)?.dims();
    if let Some(t) = traces.iter().find(|t| t.dims() != first) {
        return Err(Error::DimensionMismatch(format!(
            "traces disagree on model dims: {:?} vs {:?}",
            first,
            t.dims()
        )));
    }
    Ok(first)
}

/// Gather present/absent activation sets for every neuron.
pub fn collect_activation_sets(
    traces: &[ActivationTrace],
) -> Result<BTreeMap<NeuronId, ActivationSetPair>> {
    collect_activation_sets_curated(traces, Curation::default())
}

pub fn collect_activation_sets_curated(
    traces: &[ActivationTrace],
    curation: Curation,
) -> Result<BTreeMap<NeuronId, ActivationSetPair>> {
    let dims = common_dims(traces)?;
    let labeled = LabeledTokens::gather(traces, curation)?;
    Ok((0..dims.neurons())
        .map(|f| {
            let n = dims.neuron_at(f);
            (n, labeled.pair(traces, n))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(pos: usize, text: &str, label: GroundingLabel, word_final: bool) -> TokenRecord {
        TokenRecord {
            grounding_label: label,
            is_word_final: word_final,
            is_content: true,
            ..TokenRecord::new(pos, text, "s0")
        }
    }

    fn one_token_trace() -> ActivationTrace {
        ActivationTrace::new(
            ModelDims { layers: 1, d_ffn: 2 },
            vec![TokenRecord::new(0, "dog", "s0")],
            vec![0.5, -1.0],
        )
        .unwrap()
    }

    #[test]
    fn layer_file_bytes_match_hand_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t");
        write_trace(&one_token_trace(), &dest).unwrap();
        let bytes = fs::read(dest.join("layer_0.f32")).unwrap();
        // 0.5 = 0x3F000000, -1.0 = 0xBF800000, little-endian.
        assert_eq!(bytes, [0x00, 0x00, 0x00, 0x3F, 0x00, 0x00, 0x80, 0xBF]);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dest.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["format"], "vaprobe-trace/1");
    }

    #[test]
    fn empty_trace_rejected() {
        let err = ActivationTrace::new(ModelDims { layers: 1, d_ffn: 2 }, vec![], vec![]);
        assert_eq!(err.unwrap_err().to_string(), "empty trace");
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t");
        let trace = one_token_trace();
        write_trace(&trace, &dest).unwrap();
        assert_eq!(read_trace(&dest).unwrap(), trace);
    }

    #[test]
    fn truncated_layer_reports_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t");
        write_trace(&one_token_trace(), &dest).unwrap();
        let path = dest.join("layer_0.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..4]).unwrap();
        let err = read_trace(&dest).unwrap_err();
        assert_eq!(err.to_string(), "layer 0: expected 8 bytes, found 4");
    }

    #[test]
    fn missing_layer_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t");
        write_trace(&one_token_trace(), &dest).unwrap();
        fs::remove_file(dest.join("layer_0.f32")).unwrap();
        assert!(read_trace(&dest).unwrap_err().is_io());
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t");
        write_trace(&one_token_trace(), &dest).unwrap();
        let path = dest.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("vaprobe-trace/1", "vaprobe-trace/9");
        fs::write(&path, text).unwrap();
        let err = read_trace(&dest).unwrap_err();
        assert!(err.to_string().starts_with("unsupported version"), "{err}");
    }

    #[test]
    fn non_finite_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t");
        write_trace(&one_token_trace(), &dest).unwrap();
        let path = dest.join("layer_0.f32");
        fs::write(&path, encode_f32_le([f32::NAN, 1.0])).unwrap();
        assert!(matches!(read_trace(&dest), Err(Error::NonFinite(_))));
    }

    #[test]
    fn collect_counts_labeled_tokens() {
        let dims = ModelDims { layers: 1, d_ffn: 3 };
        let make = |offset: f32| {
            ActivationTrace::new(
                dims,
                vec![
                    tok(0, "meadow", GroundingLabel::Present, true),
                    tok(1, "on", GroundingLabel::Unlabeled, true),
                    tok(2, "bed", GroundingLabel::Absent, true),
                ],
                (0..9).map(|v| v as f32 + offset).collect(),
            )
            .unwrap()
        };
        let traces = vec![make(0.0), make(100.0)];
        let sets = collect_activation_sets(&traces).unwrap();
        assert_eq!(sets.len(), 3);
        for (n, pair) in &sets {
            assert_eq!(pair.a_pre.len(), 2);
            assert_eq!(pair.a_abs.len(), 2);
            assert_eq!(pair.neuron, *n);
        }
        let p = &sets[&NeuronId::new(0, 1)];
        assert_eq!(p.a_pre, vec![1.0, 101.0]);
        assert_eq!(p.a_abs, vec![7.0, 107.0]);
    }

    #[test]
    fn only_present_labels_is_error() {
        let trace = ActivationTrace::new(
            ModelDims { layers: 1, d_ffn: 1 },
            vec![tok(0, "dog", GroundingLabel::Present, true)],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(
            collect_activation_sets(&[trace]),
            Err(Error::EmptyLabelSet(_))
        ));
    }

    #[test]
    fn non_final_pieces_excluded() {
        // "mea" + "dow" form one word; only the final piece counts.
        let trace = ActivationTrace::new(
            ModelDims { layers: 1, d_ffn: 1 },
            vec![
                tok(0, "mea", GroundingLabel::Present, false),
                tok(1, "dow", GroundingLabel::Present, true),
                tok(2, "bed", GroundingLabel::Absent, true),
            ],
            vec![10.0, 20.0, 30.0],
        )
        .unwrap();
        let sets = collect_activation_sets(&[trace]).unwrap();
        let p = &sets[&NeuronId::new(0, 0)];
        assert_eq!(p.a_pre, vec![20.0]);
        assert_eq!(p.a_abs, vec![30.0]);
    }

    #[test]
    fn curation_drops_incorrect_tokens() {
        let mut wrong = tok(1, "cat", GroundingLabel::Present, true);
        wrong.answered_correctly = Some(false);
        let trace = ActivationTrace::new(
            ModelDims { layers: 1, d_ffn: 1 },
            vec![
                tok(0, "dog", GroundingLabel::Present, true),
                wrong,
                tok(2, "bed", GroundingLabel::Absent, true),
            ],
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        let all = collect_activation_sets(&[trace.clone()]).unwrap();
        assert_eq!(all[&NeuronId::new(0, 0)].a_pre.len(), 2);
        let curated =
            collect_activation_sets_curated(&[trace], Curation { require_correct: true }).unwrap();
        assert_eq!(curated[&NeuronId::new(0, 0)].a_pre, vec![1.0]);
    }

    #[test]
    fn sample_slicing_rebases_positions() {
        let dims = ModelDims { layers: 1, d_ffn: 1 };
        let mut a = TokenRecord::new(0, "x", "a");
        a.sample_id = "a".into();
        let mut b0 = TokenRecord::new(1, "y", "b");
        b0.sample_id = "b".into();
        let mut b1 = TokenRecord::new(2, "z", "b");
        b1.sample_id = "b".into();
        let trace = ActivationTrace::new(dims, vec![a, b0, b1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(trace.sample_ids(), vec!["a", "b"]);
        let b = trace.sample("b").unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.tokens()[0].position, 0);
        assert_eq!(b.activations(), &[2.0, 3.0]);
        assert!(trace.sample("c").is_none());
    }

    #[test]
    fn neuron_order_is_layer_major() {
        let mut ids = vec![
            NeuronId::new(1, 0),
            NeuronId::new(0, 5),
            NeuronId::new(0, 1),
            NeuronId::new(2, 0),
        ];
        ids.sort();
        assert_eq!(
            ids,
            vec![
                NeuronId::new(0, 1),
                NeuronId::new(0, 5),
                NeuronId::new(1, 0),
                NeuronId::new(2, 0)
            ]
        );
    }
}
