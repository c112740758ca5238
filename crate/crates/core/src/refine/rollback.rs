//! Greedy decoding with detector-driven rollback.
//!
//! After each emitted token the judge sees that token's activation row. A
//! token judged absent is banned at its position (its logit is treated as
//! negative infinity there) and decoding resumes `deepen_level` positions
//! back. Two rollbacks whose positions lie within `window` emitted
//! positions of each other raise `deepen_level` by one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::filter::ContentTokenFilter;
use crate::detector::{features_from_row, predict, VaDetector};
use crate::error::{Error, Result};
use crate::trace::ModelDims;

/// Source of logits and activations for a decoding session.
pub trait DecodeOracle {
    fn vocab_size(&self) -> usize;
    fn token_text(&self, id: usize) -> String;
    fn is_eos(&self, id: usize) -> bool;
    /// Logits for the token following `context`.
    fn next_logits(&self, context: &[usize]) -> Result<Vec<f32>>;
    /// Layer-major activation row of the last token of `context`.
    /// `visible[i]` says whether context position `i` survives sentence
    /// masking; oracles that aggregate over context must skip hidden ones.
    fn activation_row(&self, context: &[usize], visible: &[bool]) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, Copy)]
pub struct JudgeInput<'a> {
    /// Output position (0 = first generated token).
    pub position: usize,
    pub token: usize,
    pub text: &'a str,
    pub activations: &'a [f32],
    pub step: usize,
}

pub trait AbsenceJudge {
    fn is_absent(&mut self, input: &JudgeInput<'_>) -> Result<bool>;
}

/// Judge that never flags.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeverAbsent;

impl AbsenceJudge for NeverAbsent {
    fn is_absent(&mut self, _: &JudgeInput<'_>) -> Result<bool> {
        Ok(false)
    }
}

/// Runs the trained detector on content tokens.
#[derive(Debug, Clone)]
pub struct DetectorJudge<'a> {
    pub detector: &'a VaDetector,
    pub dims: ModelDims,
    pub filter: &'a ContentTokenFilter,
}

impl AbsenceJudge for DetectorJudge<'_> {
    fn is_absent(&mut self, input: &JudgeInput<'_>) -> Result<bool> {
        if !self.filter.is_content(input.text) {
            return Ok(false);
        }
        let v = features_from_row(input.activations, self.dims, &self.detector.neuron_order)?;
        Ok(predict(self.detector, &v)?.label == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeLimits {
    pub max_tokens: usize,
    pub max_attempts_per_position: usize,
    pub window: usize,
    /// Drop `deepen_level` back to 1 after a rollback outside the window.
    pub reset_deepen_on_quiet: bool,
    pub sentence_terminators: Vec<String>,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        Self {
            max_tokens: 32,
            max_attempts_per_position: 10,
            window: 5,
            reset_deepen_on_quiet: false,
            sentence_terminators: [".", "!", "?"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emitted {
    pub token: usize,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackEvent {
    pub step: usize,
    pub position: usize,
    pub token: usize,
    /// Positions removed, including the flagged one.
    pub reverted: usize,
    pub deepen_level_after: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BanStatus {
    Banned,
    AlreadyBanned,
    /// The ban leaves no selectable token at this position.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSession {
    pub prompt_tokens: Vec<usize>,
    pub emitted: Vec<Emitted>,
    pub banned: BTreeMap<usize, BTreeSet<usize>>,
    pub rollback_events: Vec<RollbackEvent>,
    pub deepen_level: usize,
    pub max_attempts_per_position: usize,
    pub window: usize,
    pub vocab_size: usize,
    pub step: usize,
    attempts: BTreeMap<usize, usize>,
    exhausted: BTreeSet<usize>,
}

impl DecodeSession {
    pub fn new(prompt: &[usize], vocab_size: usize, limits: &DecodeLimits) -> Self {
        Self {
            prompt_tokens: prompt.to_vec(),
            emitted: Vec::new(),
            banned: BTreeMap::new(),
            rollback_events: Vec::new(),
            deepen_level: 1,
            max_attempts_per_position: limits.max_attempts_per_position,
            window: limits.window,
            vocab_size,
            step: 0,
            attempts: BTreeMap::new(),
            exhausted: BTreeSet::new(),
        }
    }

    pub fn context(&self) -> Vec<usize> {
        self.prompt_tokens
            .iter()
            .copied()
            .chain(self.emitted.iter().map(|e| e.token))
            .collect()
    }

    pub fn is_banned(&self, position: usize, token: usize) -> bool {
        self.banned.get(&position).is_some_and(|b| b.contains(&token))
    }

    /// Highest non-banned logit, smallest id on ties. `None` if every token
    /// is banned.
    pub fn select(&self, position: usize, logits: &[f32]) -> Result<Option<usize>> {
        let mut best: Option<(usize, f32)> = None;
        for (id, &l) in logits.iter().enumerate() {
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("logit of token {id} at position {position}")));
            }
            if self.is_banned(position, id) {
                continue;
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((id, l));
            }
        }
        Ok(best.map(|(id, _)| id))
    }

    pub fn ban(&mut self, position: usize, token: usize) -> BanStatus {
        let set = self.banned.entry(position).or_default();
        let fresh = set.insert(token);
        if set.len() >= self.vocab_size {
            BanStatus::Exhausted
        } else if fresh {
            BanStatus::Banned
        } else {
            BanStatus::AlreadyBanned
        }
    }
}

/// Bans `token` at `position` for the rest of the session. Idempotent.
pub fn ban_token(session: &mut DecodeSession, position: usize, token: usize) -> BanStatus {
    session.ban(position, token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub final_tokens: Vec<usize>,
    pub final_text: Vec<String>,
    pub rollback_count: usize,
    pub exhausted_positions: Vec<usize>,
    pub rollback_events: Vec<RollbackEvent>,
    pub deepen_level: usize,
    /// Decoder iterations, retries included.
    pub steps: usize,
}

/// Visibility of each context position for judging output position `p`:
/// the prompt, the most recent completed sentence and the current one.
fn visible_mask(prompt_len: usize, emitted_terminal: &[bool], p: usize) -> Vec<bool> {
    let mut sentence = Vec::with_capacity(emitted_terminal.len());
    let mut k = 0usize;
    for &t in emitted_terminal {
        sentence.push(k);
        if t {
            k += 1;
        }
    }
    let current = sentence[p];
    std::iter::repeat_n(true, prompt_len)
        .chain(sentence.iter().map(|&s| s + 1 >= current))
        .collect()
}

fn check_logits(logits: &[f32], vocab: usize) -> Result<()> {
    if logits.len() != vocab {
        return Err(Error::Oracle(format!(
            "oracle returned {} logits for a vocabulary of {vocab}",
            logits.len()
        )));
    }
    Ok(())
}

/// Plain greedy decoding, the unrefined baseline.
pub fn greedy_decode<O: DecodeOracle + ?Sized>(
    oracle: &O,
    prompt: &[usize],
    max_tokens: usize,
) -> Result<Vec<usize>> {
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let logits = oracle.next_logits(&context)?;
        check_logits(&logits, oracle.vocab_size())?;
        let mut best = 0;
        for (id, &l) in logits.iter().enumerate() {
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("logit of token {id}")));
            }
            if l > logits[best] {
                best = id;
            }
        }
        context.push(best);
        out.push(best);
        if oracle.is_eos(best) {
            break;
        }
    }
    Ok(out)
}

pub fn rollback_decode<O: DecodeOracle + ?Sized, J: AbsenceJudge + ?Sized>(
    oracle: &O,
    judge: &mut J,
    prompt: &[usize],
    limits: &DecodeLimits,
) -> Result<RefineOutcome> {
    let vocab = oracle.vocab_size();
    if vocab == 0 {
        return Err(Error::Oracle("empty vocabulary".into()));
    }
    if limits.window == 0 {
        return Err(Error::InvalidArgument("rollback window must be positive".into()));
    }
    let mut s = DecodeSession::new(prompt, vocab, limits);
    let mut terminal: Vec<bool> = Vec::new();

    while s.emitted.len() < limits.max_tokens {
        let p = s.emitted.len();
        let mut context = s.context();
        let logits = oracle.next_logits(&context)?;
        check_logits(&logits, vocab)?;
        let token = s
            .select(p, &logits)?
            .ok_or_else(|| Error::Oracle(format!("every token banned at position {p}")))?;
        s.step += 1;
        s.emitted.push(Emitted { token, logits });
        let text = oracle.token_text(token);
        terminal.truncate(p);
        terminal.push(limits.sentence_terminators.contains(&text));
        context.push(token);

        let visible = visible_mask(s.prompt_tokens.len(), &terminal, p);
        let row = oracle.activation_row(&context, &visible)?;
        let flagged = judge.is_absent(&JudgeInput {
            position: p,
            token,
            text: &text,
            activations: &row,
            step: s.step,
        })?;

        if flagged {
            let attempts = s.attempts.get(&p).copied().unwrap_or(0);
            let banned = s.banned.get(&p).map_or(0, BTreeSet::len);
            if attempts >= s.max_attempts_per_position || banned + 1 >= vocab {
                if s.exhausted.insert(p) {
                    log::debug!("position {p}: attempts exhausted, keeping {text:?}");
                }
            } else {
                *s.attempts.entry(p).or_default() += 1;
                s.ban(p, token);
                let depth = s.deepen_level.min(p + 1);
                s.emitted.truncate(p + 1 - depth);
                let within = s
                    .rollback_events
                    .last()
                    .is_some_and(|q| q.position.abs_diff(p) < s.window);
                if within {
                    s.deepen_level += 1;
                } else if limits.reset_deepen_on_quiet {
                    s.deepen_level = 1;
                }
                s.rollback_events.push(RollbackEvent {
                    step: s.step,
                    position: p,
                    token,
                    reverted: depth,
                    deepen_level_after: s.deepen_level,
                });
                continue;
            }
        }
        if oracle.is_eos(token) {
            break;
        }
    }

    let final_tokens: Vec<usize> = s.emitted.iter().map(|e| e.token).collect();
    for (p, &t) in final_tokens.iter().enumerate() {
        debug_assert!(!s.is_banned(p, t));
    }
    Ok(RefineOutcome {
        final_text: final_tokens.iter().map(|&t| oracle.token_text(t)).collect(),
        exhausted_positions: s
            .exhausted
            .iter()
            .copied()
            .filter(|&p| p < final_tokens.len())
            .collect(),
        rollback_count: s.rollback_events.len(),
        rollback_events: s.rollback_events,
        deepen_level: s.deepen_level,
        steps: s.step,
        final_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Logits depend on the previous token only; the ranking at each step
    /// is a rotation of the vocabulary.
    struct RotatingOracle {
        vocab: usize,
        eos: Option<usize>,
    }

    impl DecodeOracle for RotatingOracle {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn token_text(&self, id: usize) -> String {
            if id == 0 {
                ".".into()
            } else {
                format!("t{id}")
            }
        }
        fn is_eos(&self, id: usize) -> bool {
            self.eos == Some(id)
        }
        fn next_logits(&self, context: &[usize]) -> Result<Vec<f32>> {
            let shift = context.len() + context.last().copied().unwrap_or(0);
            Ok((0..self.vocab)
                .map(|v| -(((v + shift) % self.vocab) as f32))
                .collect())
        }
        fn activation_row(&self, _: &[usize], _: &[bool]) -> Result<Vec<f32>> {
            Ok(Vec::new())
        }
    }

    /// Flags scripted output positions the first time each is judged.
    struct Scripted {
        pending: BTreeSet<usize>,
    }

    impl AbsenceJudge for Scripted {
        fn is_absent(&mut self, i: &JudgeInput<'_>) -> Result<bool> {
            Ok(self.pending.remove(&i.position))
        }
    }

    struct Always;

    impl AbsenceJudge for Always {
        fn is_absent(&mut self, _: &JudgeInput<'_>) -> Result<bool> {
            Ok(true)
        }
    }

    fn limits(max_tokens: usize) -> DecodeLimits {
        DecodeLimits {
            max_tokens,
            ..Default::default()
        }
    }

    fn ranked(logits: &[f32]) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..logits.len()).collect();
        ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        ids
    }

    #[test]
    fn no_flags_equals_greedy() {
        let o = RotatingOracle { vocab: 7, eos: None };
        let out = rollback_decode(&o, &mut NeverAbsent, &[1, 2], &limits(12)).unwrap();
        assert_eq!(out.final_tokens, greedy_decode(&o, &[1, 2], 12).unwrap());
        assert_eq!(out.rollback_count, 0);
        assert_eq!(out.steps, 12);
    }

    #[test]
    fn single_flag_takes_second_best() {
        let o = RotatingOracle { vocab: 7, eos: None };
        let base = greedy_decode(&o, &[1], 8).unwrap();
        let mut j = Scripted {
            pending: BTreeSet::from([3]),
        };
        let out = rollback_decode(&o, &mut j, &[1], &limits(8)).unwrap();
        let mut ctx = vec![1];
        ctx.extend(&base[..3]);
        let second = ranked(&o.next_logits(&ctx).unwrap())[1];
        assert_eq!(out.final_tokens[..3], base[..3]);
        assert_eq!(out.final_tokens[3], second);
        assert_eq!(out.rollback_count, 1);
        assert_eq!(out.deepen_level, 1);
        assert_eq!(out.rollback_events[0].position, 3);
        assert_eq!(out.rollback_events[0].token, base[3]);
    }

    #[test]
    fn two_close_flags_deepen_the_next_revert() {
        let o = RotatingOracle { vocab: 7, eos: None };
        let mut j = Scripted {
            pending: BTreeSet::from([3, 5, 8]),
        };
        let out = rollback_decode(&o, &mut j, &[1], &limits(12)).unwrap();
        let ev = &out.rollback_events;
        assert_eq!(ev.len(), 3);
        assert_eq!((ev[0].position, ev[0].reverted, ev[0].deepen_level_after), (3, 1, 1));
        assert_eq!((ev[1].position, ev[1].reverted, ev[1].deepen_level_after), (5, 1, 2));
        assert_eq!((ev[2].position, ev[2].reverted, ev[2].deepen_level_after), (8, 2, 3));
        assert_eq!(out.deepen_level, 3);
    }

    #[test]
    fn far_apart_flags_do_not_deepen() {
        let o = RotatingOracle { vocab: 7, eos: None };
        let mut j = Scripted {
            pending: BTreeSet::from([1, 6]),
        };
        let out = rollback_decode(&o, &mut j, &[1], &limits(10)).unwrap();
        assert_eq!(out.deepen_level, 1);
        assert!(out.rollback_events.iter().all(|e| e.reverted == 1));
    }

    #[test]
    fn always_flag_terminates() {
        let o = RotatingOracle { vocab: 4, eos: None };
        let lim = DecodeLimits {
            max_tokens: 6,
            max_attempts_per_position: 3,
            ..Default::default()
        };
        let out = rollback_decode(&o, &mut Always, &[0], &lim).unwrap();
        assert_eq!(out.final_tokens.len(), 6);
        assert!(out.rollback_count <= 6 * 3);
        assert_eq!(out.exhausted_positions, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_vocab_exhausts_by_bans() {
        let o = RotatingOracle { vocab: 2, eos: None };
        let out = rollback_decode(&o, &mut Always, &[0], &limits(1)).unwrap();
        assert_eq!(out.rollback_count, 1);
        assert_eq!(out.exhausted_positions, vec![0]);
    }

    #[test]
    fn ban_semantics() {
        let mut s = DecodeSession::new(&[], 3, &DecodeLimits::default());
        let logits = [3.0, 2.0, 1.0];
        assert_eq!(s.select(0, &logits).unwrap(), Some(0));
        assert_eq!(ban_token(&mut s, 0, 0), BanStatus::Banned);
        let snapshot = s.clone();
        assert_eq!(ban_token(&mut s, 0, 0), BanStatus::AlreadyBanned);
        assert_eq!(s, snapshot);
        assert_eq!(s.select(0, &logits).unwrap(), Some(1));
        assert_eq!(s.select(1, &logits).unwrap(), Some(0));
        assert_eq!(ban_token(&mut s, 0, 1), BanStatus::Banned);
        assert_eq!(ban_token(&mut s, 0, 2), BanStatus::Exhausted);
        assert_eq!(s.select(0, &logits).unwrap(), None);
    }

    #[test]
    fn eos_stops_and_nan_fails() {
        let o = RotatingOracle { vocab: 5, eos: Some(4) };
        let out = rollback_decode(&o, &mut NeverAbsent, &[0], &limits(50)).unwrap();
        assert_eq!(out.final_tokens.last(), Some(&4));

        struct Nan;
        impl DecodeOracle for Nan {
            fn vocab_size(&self) -> usize {
                2
            }
            fn token_text(&self, _: usize) -> String {
                String::new()
            }
            fn is_eos(&self, _: usize) -> bool {
                false
            }
            fn next_logits(&self, _: &[usize]) -> Result<Vec<f32>> {
                Ok(vec![0.0, f32::NAN])
            }
            fn activation_row(&self, _: &[usize], _: &[bool]) -> Result<Vec<f32>> {
                Ok(Vec::new())
            }
        }
        assert!(matches!(
            rollback_decode(&Nan, &mut NeverAbsent, &[], &limits(3)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn masking_keeps_last_sentence() {
        // emitted: a . b c . d   (terminals at 1 and 4)
        let term = [false, true, false, false, true, false];
        let m = visible_mask(2, &term, 5);
        assert_eq!(m, vec![true, true, false, false, true, true, true, true]);
        let m = visible_mask(0, &term, 1);
        assert_eq!(m, vec![true; 6]);
    }

    proptest! {
        #[test]
        fn random_scripts_respect_invariants(
            vocab in 2usize..6,
            max_tokens in 1usize..14,
            max_attempts in 0usize..4,
            flags in proptest::collection::vec(any::<bool>(), 0..80),
        ) {
            struct Seq { flags: Vec<bool>, i: usize }
            impl AbsenceJudge for Seq {
                fn is_absent(&mut self, _: &JudgeInput<'_>) -> Result<bool> {
                    let f = self.flags.get(self.i).copied().unwrap_or(false);
                    self.i += 1;
                    Ok(f)
                }
            }
            let o = RotatingOracle { vocab, eos: None };
            let lim = DecodeLimits { max_tokens, max_attempts_per_position: max_attempts, ..Default::default() };
            let mut j = Seq { flags, i: 0 };
            let out = rollback_decode(&o, &mut j, &[0], &lim).unwrap();
            prop_assert_eq!(out.final_tokens.len(), max_tokens);
            prop_assert!(out.rollback_count <= max_tokens * max_attempts);
            // steps strictly increase over events
            for w in out.rollback_events.windows(2) {
                prop_assert!(w[0].step < w[1].step);
            }
            // brute-force replay of the deepening rule
            let mut level = 1;
            for w in out.rollback_events.windows(2) {
                if w[0].position.abs_diff(w[1].position) < 5 {
                    level += 1;
                }
            }
            prop_assert_eq!(out.deepen_level, level);
            // replayed bans never contain the final token
            let mut banned: BTreeSet<(usize, usize)> = BTreeSet::new();
            for e in &out.rollback_events {
                banned.insert((e.position, e.token));
            }
            for (p, &t) in out.final_tokens.iter().enumerate() {
                prop_assert!(!banned.contains(&(p, t)));
            }
        }
    }
}
