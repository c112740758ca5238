//! Contrastive scene/question generation.
//!
//! Each pair shares one scene. The matching question names the scene's
//! triplet; its counterpart swaps one triplet element for a concept the
//! scene does not contain.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SynthModel, SynthModelConfig};
use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{ActivationTrace, GroundingLabel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub verb: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: &str, verb: &str, object: &str) -> Self {
        Self {
            subject: subject.into(),
            verb: verb.into(),
            object: object.into(),
        }
    }

    pub fn get(&self, role: SwapRole) -> &str {
        match role {
            SwapRole::Subject => &self.subject,
            SwapRole::Verb => &self.verb,
            SwapRole::Object => &self.object,
        }
    }

    fn with(&self, role: SwapRole, value: &str) -> Self {
        let mut t = self.clone();
        match role {
            SwapRole::Subject => t.subject = value.into(),
            SwapRole::Verb => t.verb = value.into(),
            SwapRole::Object => t.object = value.into(),
        }
        t
    }
}

/// Symbolic stand-in for an image: the concepts it visibly contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub grounded_concepts: BTreeSet<String>,
    pub triplet: Triplet,
}

impl Scene {
    /// Build a scene; the triplet is always added to the grounded set.
    pub fn new(
        id: impl Into<String>,
        triplet: Triplet,
        extra: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut grounded: BTreeSet<String> = extra.into_iter().collect();
        grounded.insert(triplet.subject.clone());
        grounded.insert(triplet.verb.clone());
        grounded.insert(triplet.object.clone());
        Self {
            id: id.into(),
            grounded_concepts: grounded,
            triplet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gold {
    Yes,
    No,
}

impl std::fmt::Display for Gold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Gold::Yes => "yes",
            Gold::No => "no",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapRole {
    Subject,
    Verb,
    Object,
}

impl SwapRole {
    pub const ALL: [SwapRole; 3] = [SwapRole::Subject, SwapRole::Verb, SwapRole::Object];

    /// Position of this role's token in [`question_tokens`].
    pub fn position(self) -> usize {
        match self {
            SwapRole::Subject => 2,
            SwapRole::Verb => 3,
            SwapRole::Object => 6,
        }
    }
}

/// One yes/no question. Serialized one per line in `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub record_id: String,
    pub scene_id: String,
    pub tokens: Vec<String>,
    pub gold: Gold,
    #[serde(rename = "absent_positions")]
    pub absent_token_positions: BTreeSet<usize>,
    /// Position of the element that differs between the paired questions.
    pub probe_position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub scene: Scene,
    pub yes: QaRecord,
    pub no: QaRecord,
}

/// `is the <subject> <verb> on the <object> ?`
pub fn question_tokens(t: &Triplet) -> Vec<String> {
    ["is", "the", &t.subject, &t.verb, "on", "the", &t.object, "?"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Build the matching/counterpart questions for `scene`, replacing the
/// `role` element with `replacement` in the counterpart.
pub fn contrastive_pair(
    scene: &Scene,
    pair_id: &str,
    role: SwapRole,
    replacement: &str,
) -> Result<ContrastivePair> {
    if scene.grounded_concepts.contains(replacement) {
        return Err(Error::InvalidArgument(format!(
            "replacement {replacement:?} is grounded in scene {}",
            scene.id
        )));
    }
    let pos = role.position();
    let yes = QaRecord {
        record_id: format!("{pair_id}-yes"),
        scene_id: scene.id.clone(),
        tokens: question_tokens(&scene.triplet),
        gold: Gold::Yes,
        absent_token_positions: BTreeSet::new(),
        probe_position: pos,
    };
    let no = QaRecord {
        record_id: format!("{pair_id}-no"),
        scene_id: scene.id.clone(),
        tokens: question_tokens(&scene.triplet.with(role, replacement)),
        gold: Gold::No,
        absent_token_positions: [pos].into(),
        probe_position: pos,
    };
    Ok(ContrastivePair {
        scene: scene.clone(),
        yes,
        no,
    })
}

/// Generate `n_pairs` pairs seeded by `cfg.seed`.
pub fn generate_contrastive_dataset(
    cfg: &SynthModelConfig,
    n_pairs: usize,
) -> Result<Vec<ContrastivePair>> {
    generate_contrastive_dataset_salted(cfg, n_pairs, "pairs")
}

/// Like [`generate_contrastive_dataset`] with an explicit salt, so disjoint
/// splits can come from one root seed. The salt also prefixes ids.
pub fn generate_contrastive_dataset_salted(
    cfg: &SynthModelConfig,
    n_pairs: usize,
    salt: &str,
) -> Result<Vec<ContrastivePair>> {
    let v = &cfg.vocab;
    for role in SwapRole::ALL {
        if v.role(role).len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocab too small: need at least 2 {role:?} concepts"
            )));
        }
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, &format!("dataset/{salt}")));
    let nouns: Vec<&String> = v.subjects.iter().chain(&v.objects).collect();
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let pick = |xs: &[String], rng: &mut rand_chacha::ChaCha8Rng| {
            xs.choose(rng).expect("non-empty").clone()
        };
        let triplet = Triplet {
            subject: pick(&v.subjects, &mut rng),
            verb: pick(&v.verbs, &mut rng),
            object: pick(&v.objects, &mut rng),
        };
        let extra: Vec<String> = nouns
            .iter()
            .filter(|n| ***n != triplet.subject && ***n != triplet.object)
            .copied()
            .cloned()
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, 2)
            .cloned()
            .collect();
        let pair_id = format!("{salt}-{i:05}");
        let scene = Scene::new(pair_id.clone(), triplet, extra);

        let mut roles = SwapRole::ALL.to_vec();
        let first = rng.random_range(0..roles.len());
        roles.rotate_left(first);
        let mut built = None;
        for role in roles {
            let candidates: Vec<&String> = v
                .role(role)
                .iter()
                .filter(|c| !scene.grounded_concepts.contains(*c))
                .collect();
            if let Some(rep) = candidates.choose(&mut rng) {
                built = Some(contrastive_pair(&scene, &pair_id, role, rep)?);
                break;
            }
        }
        out.push(built.ok_or_else(|| {
            Error::InvalidArgument("vocab too small: no ungrounded replacement available".into())
        })?);
    }
    Ok(out)
}

/// Labeled trace of one question: the probe token is `Present` in a
/// matching question, absent positions are `Absent`.
pub fn record_trace(model: &SynthModel, record: &QaRecord, scene: &Scene) -> Result<ActivationTrace> {
    let pass = model.synth_forward(&record.tokens, scene, &record.record_id)?;
    let mut tokens = pass.trace.tokens().to_vec();
    for t in tokens.iter_mut() {
        if record.absent_token_positions.contains(&t.position) {
            t.grounding_label = GroundingLabel::Absent;
        } else if record.gold == Gold::Yes && t.position == record.probe_position {
            t.grounding_label = GroundingLabel::Present;
        }
    }
    ActivationTrace::new(pass.trace.dims(), tokens, pass.trace.activations().to_vec())
}

/// One trace holding every question of `pairs` (matching question first).
pub fn dataset_trace(model: &SynthModel, pairs: &[ContrastivePair]) -> Result<ActivationTrace> {
    let traces = pairs
        .par_iter()
        .map(|p| {
            Ok([
                record_trace(model, &p.yes, &p.scene)?,
                record_trace(model, &p.no, &p.scene)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<ActivationTrace> = traces.into_iter().flatten().collect();
    ActivationTrace::concat(&flat)
}
