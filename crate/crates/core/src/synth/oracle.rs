use super::{Scene, SynthModel, EOS, PROMPT};
use crate::error::{Error, Result};
use crate::refine::DecodeOracle;
use crate::seed;

/// Open-ended generation from the synthetic model about one scene.
///
/// Activations of a token depend only on the token and its position, so
/// sentence masking has nothing to remove here.
#[derive(Debug, Clone)]
pub struct SynthOracle<'a> {
    model: &'a SynthModel,
    scene: &'a Scene,
    sample_key: u64,
    eos: usize,
}

impl<'a> SynthOracle<'a> {
    pub fn new(model: &'a SynthModel, scene: &'a Scene, sample_id: &str) -> Result<Self> {
        Ok(Self {
            model,
            scene,
            sample_key: seed::fnv1a(sample_id.as_bytes()),
            eos: model.token_id(EOS)?,
        })
    }

    pub fn prompt(&self) -> Vec<usize> {
        vec![self.model.token_id(PROMPT).expect("prompt token is in every vocabulary")]
    }

    fn last_step(&self, context: &[usize]) -> Result<super::StepOutput> {
        let (&last, _) = context
            .split_last()
            .ok_or_else(|| Error::Oracle("empty context".into()))?;
        self.model
            .step(last, context.len() - 1, self.sample_key, self.scene, None)
    }
}

impl DecodeOracle for SynthOracle<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn token_text(&self, id: usize) -> String {
        self.model.token_text(id).to_string()
    }

    fn is_eos(&self, id: usize) -> bool {
        id == self.eos
    }

    fn next_logits(&self, context: &[usize]) -> Result<Vec<f32>> {
        Ok(self.last_step(context)?.logits)
    }

    fn activation_row(&self, context: &[usize], _visible: &[bool]) -> Result<Vec<f32>> {
        Ok(self
            .last_step(context)?
            .activations
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::{greedy_decode, rollback_decode, AbsenceJudge, JudgeInput};
    use crate::synth::{SynthModelConfig, Triplet};

    /// Judge with perfect knowledge of the scene.
    struct Truth<'a>(&'a SynthModel, &'a Scene);

    impl AbsenceJudge for Truth<'_> {
        fn is_absent(&mut self, i: &JudgeInput<'_>) -> Result<bool> {
            Ok(self.0.is_ungrounded(i.token, self.1))
        }
    }

    #[test]
    fn perfect_judge_removes_hallucinations() {
        let model = SynthModel::new(SynthModelConfig {
            hallucination_prob: 0.8,
            ..Default::default()
        })
        .unwrap();
        let scene = Scene::new(
            "gen-0",
            Triplet::new("dog", "lying", "meadow"),
            ["cat", "sitting", "bed"].map(String::from),
        );
        let oracle = SynthOracle::new(&model, &scene, "gen-0").unwrap();
        let prompt = oracle.prompt();
        let base = greedy_decode(&oracle, &prompt, 24).unwrap();
        let base_rate = model.hallucination_rate(&base, &scene).unwrap();
        assert!(base_rate > 0.0);
        let limits = crate::refine::DecodeLimits {
            max_tokens: 24,
            ..Default::default()
        };
        let out = rollback_decode(&oracle, &mut Truth(&model, &scene), &prompt, &limits).unwrap();
        assert_eq!(model.hallucination_rate(&out.final_tokens, &scene), Some(0.0));
        assert!(out.rollback_count > 0);
    }
}
