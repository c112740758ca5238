//! Synthetic gated-FFN harness with planted visual-absence neurons.
//!
//! Every layer applies its gated FFN to the token embedding directly and the
//! layer outputs are summed into a residual state. Keeping layers
//! independent means a planted shift never leaks into other neurons, so the
//! harness has an exact ground truth: planted neurons move by `shift` on
//! ungrounded concept tokens and nothing else does.
//!
//! The harness also answers yes/no questions through an evidence head that
//! reads the summed FFN output along the planted neurons' memory columns,
//! and produces next-token logits from a scene-conditioned bigram table for
//! open-ended generation.

mod dataset;
mod ffn;
mod oracle;

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{
    contrastive_pair, dataset_trace, generate_contrastive_dataset,
    generate_contrastive_dataset_salted, question_tokens, record_trace, ContrastivePair, Gold,
    QaRecord, Scene, SwapRole, Triplet,
};
pub use ffn::{dot, gated_ffn_forward, GateFn, GatedFfnWeights, Matrix};
pub use oracle::SynthOracle;

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{ActivationTrace, ModelDims, NeuronId, TokenRecord};

pub const EOS: &str = "<eos>";
pub const PROMPT: &str = "describe";
pub const YES: &str = "yes";
pub const NO: &str = "no";

/// Non-concept tokens that every synthetic vocabulary carries.
pub const FUNCTION_WORDS: [&str; 9] = [PROMPT, "is", "the", "on", "?", ".", EOS, YES, NO];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocab {
    pub subjects: Vec<String>,
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for ConceptVocab {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            subjects: s(&[
                "dog", "cat", "man", "woman", "boy", "girl", "horse", "bird", "cow", "sheep",
            ]),
            verbs: s(&[
                "lying", "sitting", "standing", "running", "sleeping", "eating", "walking",
                "jumping",
            ]),
            objects: s(&[
                "meadow", "bed", "sofa", "grass", "table", "beach", "road", "floor", "bench",
                "snow", "rock", "carpet",
            ]),
        }
    }
}

impl ConceptVocab {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.subjects.iter().chain(&self.verbs).chain(&self.objects)
    }

    pub fn role(&self, role: SwapRole) -> &[String] {
        match role {
            SwapRole::Subject => &self.subjects,
            SwapRole::Verb => &self.verbs,
            SwapRole::Object => &self.objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthModelConfig {
    pub vocab: ConceptVocab,
    pub layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub planted: BTreeSet<NeuronId>,
    pub shift_magnitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub gate_fn: GateFn,
    /// Probability that a bigram entry prefers an ungrounded concept.
    pub hallucination_prob: f64,
    /// Normalized evidence level at which the answer head says "no".
    pub answer_threshold: f64,
    /// Spread of the per-question answer prior.
    pub answer_prior_sigma: f64,
    /// Weight of the tied-embedding readout added to bigram logits.
    pub readout_scale: f64,
}

impl Default for SynthModelConfig {
    fn default() -> Self {
        Self {
            vocab: ConceptVocab::default(),
            layers: 4,
            d_model: 32,
            d_ffn: 64,
            planted: default_planted(),
            shift_magnitude: 4.0,
            noise_sigma: 0.4,
            seed: 0,
            gate_fn: GateFn::Silu,
            hallucination_prob: 0.3,
            answer_threshold: 1.0,
            answer_prior_sigma: 0.35,
            readout_scale: 0.01,
        }
    }
}

/// Eight neurons spread over the two middle layers of the default model.
pub fn default_planted() -> BTreeSet<NeuronId> {
    [
        (1, 3),
        (1, 17),
        (1, 40),
        (1, 58),
        (2, 5),
        (2, 22),
        (2, 37),
        (2, 61),
    ]
    .into_iter()
    .map(|(l, i)| NeuronId::new(l, i))
    .collect()
}

/// Pick `count` distinct neurons uniformly at random (sorted).
pub fn random_planted(dims: ModelDims, count: usize, seed: u64) -> BTreeSet<NeuronId> {
    let mut rng = seed::rng(seed::derive(seed, "planted"));
    let picked = rand::seq::index::sample(&mut rng, dims.neurons(), count.min(dims.neurons()));
    picked.into_iter().map(|f| dims.neuron_at(f)).collect()
}

impl SynthModelConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            d_ffn: self.d_ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return Err(Error::InvalidArgument(
                "layers, d_model and d_ffn must be positive".into(),
            ));
        }
        let dims = self.dims();
        if let Some(n) = self.planted.iter().find(|n| !dims.contains(**n)) {
            return Err(Error::NeuronOutOfRange {
                layer: n.layer,
                index: n.index,
            });
        }
        let non_negative = [
            ("shift_magnitude", self.shift_magnitude),
            ("noise_sigma", self.noise_sigma),
            ("answer_prior_sigma", self.answer_prior_sigma),
        ];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.hallucination_prob) {
            return Err(Error::InvalidArgument(format!(
                "hallucination_prob must be in [0, 1], got {}",
                self.hallucination_prob
            )));
        }
        if !self.answer_threshold.is_finite() || !self.readout_scale.is_finite() {
            return Err(Error::NonFinite("answer_threshold / readout_scale".into()));
        }
        let mut seen = BTreeSet::new();
        for w in FUNCTION_WORDS.iter().copied().chain(self.vocab.all().map(String::as_str)) {
            if !seen.insert(w) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(())
    }
}

/// Role of a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Function,
    Subject,
    Verb,
    Object,
    Period,
    Eos,
}

impl TokenRole {
    pub fn is_concept(self) -> bool {
        matches!(self, TokenRole::Subject | TokenRole::Verb | TokenRole::Object)
    }

    /// Nouns, i.e. things a caption can mention as objects.
    pub fn is_noun(self) -> bool {
        matches!(self, TokenRole::Subject | TokenRole::Object)
    }
}

/// Activation edit applied before projecting through `W_mem`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    Zero,
    Double,
}

impl InterventionMode {
    fn apply(self, a: f64) -> f64 {
        match self {
            InterventionMode::Zero => 0.0,
            InterventionMode::Double => 2.0 * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub neurons: BTreeSet<NeuronId>,
    pub mode: InterventionMode,
}

/// Everything one forward step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Layer-major activations `[layer][neuron]`, after planting and any
    /// intervention.
    pub activations: Vec<f64>,
    /// Sum of all layers' FFN outputs.
    pub ffn_out: Vec<f64>,
    /// Next-token logits over the full vocabulary.
    pub logits: Vec<f32>,
}

/// Output of a full forward pass over a token sequence.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub trace: ActivationTrace,
    pub steps: Vec<StepOutput>,
}

impl ForwardPass {
    pub fn logits(&self) -> Vec<Vec<f32>> {
        self.steps.iter().map(|s| s.logits.clone()).collect()
    }
}

/// Yes/no decision of the answer head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnswerOutcome {
    pub answer: Gold,
    /// `[yes, no]` logits.
    pub logits: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct SynthModel {
    cfg: SynthModelConfig,
    tokens: Vec<String>,
    roles: Vec<TokenRole>,
    index: HashMap<String, usize>,
    embeddings: Vec<Vec<f64>>,
    layers: Vec<GatedFfnWeights>,
    answer_direction: Vec<f64>,
    evidence_center: f64,
    evidence_scale: f64,
    planted_flat: Vec<usize>,
}

impl SynthModel {
    pub fn new(cfg: SynthModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tokens: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        let mut roles: Vec<TokenRole> = FUNCTION_WORDS
            .iter()
            .map(|&w| match w {
                "." => TokenRole::Period,
                EOS => TokenRole::Eos,
                _ => TokenRole::Function,
            })
            .collect();
        for (list, role) in [
            (&cfg.vocab.subjects, TokenRole::Subject),
            (&cfg.vocab.verbs, TokenRole::Verb),
            (&cfg.vocab.objects, TokenRole::Object),
        ] {
            tokens.extend(list.iter().cloned());
            roles.extend(std::iter::repeat_n(role, list.len()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();

        let mut rng = seed::rng(seed::derive(cfg.seed, "synth-weights"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let embeddings = tokens
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..cfg.d_model).map(|_| normal.sample(&mut rng)).collect();
                let norm = dot(&v, &v).sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mem_std = 1.0 / (cfg.d_ffn as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| {
                GatedFfnWeights::new(
                    Matrix::random_normal(cfg.d_ffn, cfg.d_model, 1.0, &mut rng),
                    Matrix::random_normal(cfg.d_ffn, cfg.d_model, 1.0, &mut rng),
                    Matrix::random_normal(cfg.d_model, cfg.d_ffn, mem_std, &mut rng),
                    cfg.gate_fn,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let dims = cfg.dims();
        let planted_flat = cfg.planted.iter().map(|&n| dims.flat_index(n)).collect();
        let mut model = Self {
            cfg,
            tokens,
            roles,
            index,
            embeddings,
            layers,
            answer_direction: vec![],
            evidence_center: 0.0,
            evidence_scale: 1.0,
            planted_flat,
        };
        model.calibrate_answer_head();
        Ok(model)
    }

    fn calibrate_answer_head(&mut self) {
        let d_model = self.cfg.d_model;
        let mut g = vec![0.0; d_model];
        for n in &self.cfg.planted {
            let w = &self.layers[n.layer].w_mem;
            for (r, gr) in g.iter_mut().enumerate() {
                *gr += w.get(r, n.index);
            }
        }
        let norm = dot(&g, &g).sqrt();
        self.answer_direction = if norm > 0.0 {
            g.iter().map(|v| v / norm).collect()
        } else {
            g
        };
        let shift = self.cfg.shift_magnitude * norm;
        self.evidence_scale = if shift > 0.0 { shift } else { 1.0 };
        let concept_ids: Vec<usize> = (0..self.tokens.len())
            .filter(|&t| self.roles[t].is_concept())
            .collect();
        let baseline: f64 = concept_ids
            .iter()
            .map(|&t| {
                let out = self.clean_out(t);
                dot(&out, &self.answer_direction)
            })
            .sum();
        self.evidence_center = baseline / concept_ids.len().max(1) as f64;
    }

    fn clean_out(&self, token: usize) -> Vec<f64> {
        let x = &self.embeddings[token];
        let mut out = vec![0.0; self.cfg.d_model];
        for layer in &self.layers {
            let (_, o) = gated_ffn_forward(x, layer).expect("consistent dims");
            out.iter_mut().zip(o).for_each(|(acc, v)| *acc += v);
        }
        out
    }

    pub fn config(&self) -> &SynthModelConfig {
        &self.cfg
    }

    pub fn dims(&self) -> ModelDims {
        self.cfg.dims()
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_text(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn token_id(&self, text: &str) -> Result<usize> {
        self.index
            .get(text)
            .copied()
            .ok_or_else(|| Error::UnknownToken(text.to_string()))
    }

    pub fn role(&self, id: usize) -> TokenRole {
        self.roles[id]
    }

    pub fn layer_weights(&self, layer: usize) -> &GatedFfnWeights {
        &self.layers[layer]
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.embeddings[id]
    }

    /// Whether `token` receives the absence shift in `scene`.
    pub fn is_ungrounded(&self, token: usize, scene: &Scene) -> bool {
        self.roles[token].is_concept() && !scene.grounded_concepts.contains(&self.tokens[token])
    }

    fn check_intervention(&self, iv: Option<&Intervention>) -> Result<()> {
        if let Some(iv) = iv {
            let dims = self.dims();
            if let Some(n) = iv.neurons.iter().find(|n| !dims.contains(**n)) {
                return Err(Error::NeuronOutOfRange {
                    layer: n.layer,
                    index: n.index,
                });
            }
        }
        Ok(())
    }

    /// One forward step for `token` at `position` of sample `sample_key`.
    pub fn step(
        &self,
        token: usize,
        position: usize,
        sample_key: u64,
        scene: &Scene,
        intervention: Option<&Intervention>,
    ) -> Result<StepOutput> {
        if token >= self.tokens.len() {
            return Err(Error::UnknownToken(format!("id {token}")));
        }
        self.check_intervention(intervention)?;
        let dims = self.dims();
        let x = &self.embeddings[token];
        let mut activations = Vec::with_capacity(dims.neurons());
        for layer in &self.layers {
            activations.extend(layer.activations(x)?);
        }

        if !self.planted_flat.is_empty() {
            let shift = if self.is_ungrounded(token, scene) {
                self.cfg.shift_magnitude
            } else {
                0.0
            };
            let mut rng = seed::rng(seed::derive_indexed(
                self.cfg.seed ^ sample_key,
                "planted-noise",
                position as u64,
            ));
            let noise = Normal::new(0.0, self.cfg.noise_sigma)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for &f in &self.planted_flat {
                let eps = if self.cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                activations[f] += shift + eps;
            }
        }

        if let Some(iv) = intervention {
            for n in &iv.neurons {
                let f = dims.flat_index(*n);
                activations[f] = iv.mode.apply(activations[f]);
            }
        }

        let mut ffn_out = vec![0.0; self.cfg.d_model];
        for (l, layer) in self.layers.iter().enumerate() {
            let o = layer.project(&activations[l * dims.d_ffn..(l + 1) * dims.d_ffn])?;
            ffn_out.iter_mut().zip(o).for_each(|(acc, v)| *acc += v);
        }

        let mut logits = self.bigram_logits(scene, token);
        if self.cfg.readout_scale != 0.0 {
            let h: Vec<f64> = x.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();
            for (j, l) in logits.iter_mut().enumerate() {
                *l += (self.cfg.readout_scale * dot(&self.embeddings[j], &h)) as f32;
            }
        }
        Ok(StepOutput {
            activations,
            ffn_out,
            logits,
        })
    }

    /// Scene-conditioned bigram logits for the token following `prev`.
    pub fn bigram_logits(&self, scene: &Scene, prev: usize) -> Vec<f32> {
        let key = seed::fnv1a(scene.id.as_bytes()) ^ seed::mix64(prev as u64);
        let mut rng = seed::rng(seed::derive_indexed(self.cfg.seed, "bigram", key));
        let next_role = match self.roles[prev] {
            TokenRole::Subject => TokenRole::Verb,
            TokenRole::Verb => TokenRole::Object,
            TokenRole::Object => TokenRole::Period,
            TokenRole::Eos => TokenRole::Eos,
            TokenRole::Function | TokenRole::Period => TokenRole::Subject,
        };
        let mut logits: Vec<f32> = (0..self.tokens.len())
            .map(|_| rng.random_range(-2.0f32..-1.0))
            .collect();
        let mut ungrounded = Vec::new();
        for (id, logit) in logits.iter_mut().enumerate() {
            let role = self.roles[id];
            if role == next_role {
                if role.is_concept() {
                    let jitter = rng.random_range(0.0f32..1.0);
                    if scene.grounded_concepts.contains(&self.tokens[id]) {
                        *logit = 2.0 + jitter;
                    } else {
                        *logit = jitter;
                        ungrounded.push(id);
                    }
                } else {
                    *logit = 3.0;
                }
            }
        }
        if !ungrounded.is_empty() && rng.random_bool(self.cfg.hallucination_prob) {
            let pick = ungrounded[rng.random_range(0..ungrounded.len())];
            logits[pick] = 3.5 + rng.random_range(0.0f32..0.5);
        }
        logits
    }

    fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.token_id(t)).collect()
    }

    fn run(
        &self,
        tokens: &[String],
        scene: &Scene,
        sample_id: &str,
        intervention: Option<&Intervention>,
    ) -> Result<ForwardPass> {
        let ids = self.encode(tokens)?;
        if ids.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let key = seed::fnv1a(sample_id.as_bytes());
        let steps = ids
            .iter()
            .enumerate()
            .map(|(p, &t)| self.step(t, p, key, scene, intervention))
            .collect::<Result<Vec<_>>>()?;
        let records = ids
            .iter()
            .enumerate()
            .map(|(p, &t)| TokenRecord {
                is_content: self.roles[t].is_concept(),
                ..TokenRecord::new(p, self.tokens[t].clone(), sample_id)
            })
            .collect();
        let acts = steps
            .iter()
            .flat_map(|s| s.activations.iter().map(|&v| v as f32))
            .collect();
        let trace = ActivationTrace::new(self.dims(), records, acts)?;
        Ok(ForwardPass { trace, steps })
    }

    /// Forward pass over a question. Token labels are left unlabeled.
    pub fn synth_forward(
        &self,
        tokens: &[String],
        scene: &Scene,
        sample_id: &str,
    ) -> Result<ForwardPass> {
        self.run(tokens, scene, sample_id, None)
    }

    /// Forward pass with selected activations zeroed or doubled.
    pub fn intervene_forward(
        &self,
        tokens: &[String],
        scene: &Scene,
        sample_id: &str,
        intervention: &Intervention,
    ) -> Result<ForwardPass> {
        self.run(tokens, scene, sample_id, Some(intervention))
    }

    /// Yes/no answer to a question about `scene`.
    ///
    /// The head takes the strongest absence evidence among concept tokens
    /// (FFN output projected on the planted memory direction, centered and
    /// scaled so an ungrounded token sits near 1) and compares it against
    /// `answer_threshold` plus a per-question prior.
    pub fn answer(
        &self,
        record: &QaRecord,
        scene: &Scene,
        intervention: Option<&Intervention>,
    ) -> Result<AnswerOutcome> {
        let pass = self.run(&record.tokens, scene, &record.record_id, intervention)?;
        let ids = self.encode(&record.tokens)?;
        let evidence = ids
            .iter()
            .zip(&pass.steps)
            .filter(|(&t, _)| self.roles[t].is_concept())
            .map(|(_, s)| {
                (dot(&s.ffn_out, &self.answer_direction) - self.evidence_center)
                    / self.evidence_scale
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let evidence = if evidence.is_finite() { evidence } else { 0.0 };
        let mut rng = seed::rng(seed::derive(
            self.cfg.seed ^ seed::fnv1a(record.record_id.as_bytes()),
            "answer-prior",
        ));
        let prior = Normal::new(0.0, self.cfg.answer_prior_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(&mut rng);
        let margin = evidence - self.cfg.answer_threshold + prior;
        Ok(AnswerOutcome {
            answer: if margin > 0.0 { Gold::No } else { Gold::Yes },
            logits: [0.0, margin],
        })
    }

    /// Fraction of emitted concept tokens that are not grounded in `scene`.
    /// `None` when no concept token was emitted.
    pub fn hallucination_rate(&self, tokens: &[usize], scene: &Scene) -> Option<f64> {
        let concepts: Vec<usize> = tokens
            .iter()
            .copied()
            .filter(|&t| t < self.roles.len() && self.roles[t].is_concept())
            .collect();
        if concepts.is_empty() {
            return None;
        }
        let bad = concepts
            .iter()
            .filter(|&&t| self.is_ungrounded(t, scene))
            .count();
        Some(bad as f64 / concepts.len() as f64)
    }

    /// Noun vocabulary used for caption object matching.
    pub fn object_vocabulary(&self) -> BTreeSet<String> {
        self.cfg
            .vocab
            .subjects
            .iter()
            .chain(&self.cfg.vocab.objects)
            .cloned()
            .collect()
    }
}
