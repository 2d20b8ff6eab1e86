//! Synthetic cross-modal tasks.
//!
//! A fixed random permutation pairs every audio code with a text id. Content
//! codes for step `s` come from a generator keyed by `(seed, s)` alone, so the
//! ASR and TTS batches of the same step carry the same underlying codes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Targets;
use crate::stream::{ModalitySequence, ModalityToken};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Audio codes in, their paired text ids out.
    PseudoAsr,
    /// Text ids in, their paired audio codes out.
    PseudoTts,
    /// Next-token prediction on arithmetic text progressions.
    TextLm,
    /// Audio prompt, answered in text with the paired ids reversed.
    SpeechInstruct,
    /// Text prompt, answered with the same ids reversed.
    TextInstruct,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::PseudoAsr,
        TaskKind::PseudoTts,
        TaskKind::TextLm,
        TaskKind::SpeechInstruct,
        TaskKind::TextInstruct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PseudoAsr => "pseudo_asr",
            TaskKind::PseudoTts => "pseudo_tts",
            TaskKind::TextLm => "text_lm",
            TaskKind::SpeechInstruct => "speech_instruct",
            TaskKind::TextInstruct => "text_instruct",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown task kind `{s}`")))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub kind: TaskKind,
    pub seqs: Vec<ModalitySequence>,
    pub targets: Vec<Targets>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Stream id reserved for held-out evaluation content.
pub const EVAL_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    seed: u64,
    seq_len: usize,
    code_to_text: Vec<usize>,
    text_to_code: Vec<usize>,
}

impl TaskSpec {
    pub fn new(seed: u64, seq_len: usize, vocab: usize, code_vocab: usize) -> Result<Self> {
        if vocab != code_vocab {
            return Err(Error::Config(format!(
                "the code/text bijection needs vocab_size == code_vocab (got {vocab} and {code_vocab})"
            )));
        }
        if seq_len < 4 || seq_len % 2 != 0 {
            return Err(Error::Config(format!("seq_len must be an even number ≥ 4, got {seq_len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EVAL_STREAM - 1);
        let mut code_to_text: Vec<usize> = (0..vocab).collect();
        code_to_text.shuffle(&mut rng);
        let mut text_to_code = vec![0; vocab];
        for (c, &t) in code_to_text.iter().enumerate() {
            text_to_code[t] = c;
        }
        Ok(Self {
            seed,
            seq_len,
            code_to_text,
            text_to_code,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab(&self) -> usize {
        self.code_to_text.len()
    }

    pub fn text_of(&self, code: usize) -> usize {
        self.code_to_text[code]
    }

    pub fn code_of(&self, text: usize) -> usize {
        self.text_to_code[text]
    }

    fn content_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// `batch_size` samples of `kind` for training step `step`.
    pub fn gen_batch(&self, kind: TaskKind, batch_size: usize, step: u64) -> Result<Batch> {
        if step == EVAL_STREAM {
            return Err(Error::Argument("step id reserved for evaluation".into()));
        }
        self.gen_from_stream(kind, batch_size, step)
    }

    /// Held-out samples drawn from a stream no training step uses.
    pub fn eval_batch(&self, kind: TaskKind, batch_size: usize) -> Result<Batch> {
        self.gen_from_stream(kind, batch_size, EVAL_STREAM)
    }

    fn gen_from_stream(&self, kind: TaskKind, batch_size: usize, stream: u64) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::EmptyBatch("batch_size must be positive".into()));
        }
        let mut rng = self.content_rng(stream);
        let half = self.seq_len / 2;
        let v = self.vocab();
        let mut seqs = Vec::with_capacity(batch_size);
        let mut targets = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let codes: Vec<usize> = (0..half).map(|_| rng.gen_range(0..v)).collect();
            let progression = (rng.gen_range(0..v), rng.gen_range(1..=4usize));
            let (tokens, t) = match kind {
                TaskKind::PseudoAsr => {
                    let text: Vec<usize> = codes.iter().map(|&c| self.text_of(c)).collect();
                    self.prompt_answer(codes.iter().map(|&c| ModalityToken::AudioCode(c)), &text)
                }
                TaskKind::PseudoTts => {
                    let text: Vec<usize> = codes.iter().map(|&c| self.text_of(c)).collect();
                    let tokens: Vec<ModalityToken> = text
                        .iter()
                        .map(|&t| ModalityToken::Text(t))
                        .chain(codes.iter().map(|&c| ModalityToken::AudioCode(c)))
                        .collect();
                    let code = (0..half).map(|j| (half - 1 + j, self.code_of(text[j]))).collect();
                    (tokens, Targets { text: Vec::new(), code })
                }
                TaskKind::TextLm => {
                    let (start, stride) = progression;
                    let ids: Vec<usize> = (0..self.seq_len).map(|i| (start + i * stride) % v).collect();
                    let text = (0..self.seq_len - 1).map(|i| (i, ids[i + 1])).collect();
                    (
                        ids.into_iter().map(ModalityToken::Text).collect(),
                        Targets { text, code: Vec::new() },
                    )
                }
                TaskKind::SpeechInstruct => {
                    let text: Vec<usize> = codes.iter().rev().map(|&c| self.text_of(c)).collect();
                    self.prompt_answer(codes.iter().map(|&c| ModalityToken::AudioCode(c)), &text)
                }
                TaskKind::TextInstruct => {
                    let prompt: Vec<usize> = codes.iter().map(|&c| self.text_of(c)).collect();
                    let answer: Vec<usize> = prompt.iter().rev().copied().collect();
                    self.prompt_answer(prompt.into_iter().map(ModalityToken::Text), &answer)
                }
            };
            seqs.push(ModalitySequence::new(tokens)?);
            targets.push(t);
        }
        Ok(Batch { kind, seqs, targets })
    }

    /// `[prompt, answer]` with the answer's text ids supervised LM-style,
    /// starting from the last prompt position.
    fn prompt_answer(
        &self,
        prompt: impl Iterator<Item = ModalityToken>,
        answer: &[usize],
    ) -> (Vec<ModalityToken>, Targets) {
        let mut tokens: Vec<ModalityToken> = prompt.collect();
        let start = tokens.len() - 1;
        tokens.extend(answer.iter().map(|&t| ModalityToken::Text(t)));
        let text = answer.iter().enumerate().map(|(j, &t)| (start + j, t)).collect();
        (tokens, Targets { text, code: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::Modality;

    fn spec() -> TaskSpec {
        TaskSpec::new(3, 16, 64, 64).unwrap()
    }

    #[test]
    fn bijection_is_a_permutation() {
        let s = spec();
        let mut seen = vec![false; 64];
        for c in 0..64 {
            let t = s.text_of(c);
            assert!(!seen[t]);
            seen[t] = true;
            assert_eq!(s.code_of(t), c);
        }
        assert!(TaskSpec::new(3, 16, 64, 32).is_err());
        assert!(TaskSpec::new(3, 15, 64, 64).is_err());
    }

    #[test]
    fn asr_and_tts_are_inverse() {
        let s = spec();
        let asr = s.gen_batch(TaskKind::PseudoAsr, 4, 11).unwrap();
        let tts = s.gen_batch(TaskKind::PseudoTts, 4, 11).unwrap();
        for b in 0..4 {
            let a_targets = &asr.targets[b].text;
            let t_targets = &tts.targets[b].code;
            assert_eq!(a_targets.len(), 8);
            assert!(asr.targets[b].code.is_empty() && tts.targets[b].text.is_empty());
            for (&(pa, text), &(pt, code)) in a_targets.iter().zip(t_targets) {
                assert_eq!(pa, pt);
                assert_eq!(s.code_of(text), code);
            }
            // ASR input is audio then text; TTS mirrors it
            let m = asr.seqs[b].modalities();
            assert!(m[..8].iter().all(|&x| x == Modality::Audio));
            assert!(m[8..].iter().all(|&x| x == Modality::Text));
            let m = tts.seqs[b].modalities();
            assert!(m[..8].iter().all(|&x| x == Modality::Text));
            assert!(m[8..].iter().all(|&x| x == Modality::Audio));
        }
    }

    #[test]
    fn targets_are_next_tokens() {
        let s = spec();
        for kind in TaskKind::ALL {
            let b = s.gen_batch(kind, 3, 2).unwrap();
            for (seq, t) in b.seqs.iter().zip(&b.targets) {
                assert_eq!(seq.len(), 16);
                for &(pos, class) in &t.text {
                    assert_eq!(seq.tokens()[pos + 1], ModalityToken::Text(class), "{kind}");
                }
                for &(pos, class) in &t.code {
                    assert_eq!(seq.tokens()[pos + 1], ModalityToken::AudioCode(class), "{kind}");
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_step() {
        let s = spec();
        for kind in TaskKind::ALL {
            assert_eq!(s.gen_batch(kind, 5, 7).unwrap(), s.gen_batch(kind, 5, 7).unwrap());
            assert_ne!(s.gen_batch(kind, 5, 7).unwrap(), s.gen_batch(kind, 5, 8).unwrap());
        }
        assert_ne!(
            s.eval_batch(TaskKind::PseudoAsr, 5).unwrap(),
            s.gen_batch(TaskKind::PseudoAsr, 5, 0).unwrap()
        );
        assert!(s.gen_batch(TaskKind::PseudoAsr, 1, EVAL_STREAM).is_err());
    }

    #[test]
    fn code_marginal_is_uniform() {
        // chi-squared with 63 degrees of freedom; the 0.99 quantile is 92.01
        let s = spec();
        let mut counts = vec![0usize; 64];
        let mut total = 0;
        let mut step = 0;
        while total < 10_000 * 8 {
            let b = s.gen_batch(TaskKind::PseudoTts, 50, step).unwrap();
            for t in &b.targets {
                for &(_, c) in &t.code {
                    counts[c] += 1;
                    total += 1;
                }
            }
            step += 1;
        }
        let expect = total as f64 / 64.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 92.01, "chi2 {chi2}");
    }

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("asr".parse::<TaskKind>().is_err());
    }
}
