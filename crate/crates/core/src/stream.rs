//! Interleaved text/audio input sequences.
//!
//! Audio enters as discrete codes that a seeded [`PseudoEncoder`] renders to
//! continuous frames; frames are projected to model width by a trainable
//! matrix, text ids are looked up in an embedding table, and both are merged
//! back into token order alongside a per-token modality vector.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{ParamTensor, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Audio];

    pub fn from_indicator(m: u8) -> Result<Self> {
        match m {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Audio),
            other => Err(Error::Argument(format!(
                "modality indicator must be 0 (text) or 1 (audio), got {other}"
            ))),
        }
    }

    pub fn indicator(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModalityToken {
    Text(usize),
    /// Discrete audio code, rendered by the pseudo-encoder at assembly time.
    AudioCode(usize),
    /// Precomputed audio frame of exactly `d_feat` values.
    AudioFrame(Vec<f64>),
}

impl ModalityToken {
    pub fn modality(&self) -> Modality {
        match self {
            ModalityToken::Text(_) => Modality::Text,
            ModalityToken::AudioCode(_) | ModalityToken::AudioFrame(_) => Modality::Audio,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    tokens: Vec<ModalityToken>,
}

impl ModalitySequence {
    pub fn new(tokens: Vec<ModalityToken>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Argument("sequence must contain at least one token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[ModalityToken] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.tokens.iter().map(ModalityToken::modality).collect()
    }
}

/// One line of the sequence fixture format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureLine {
    modality: u8,
    id: usize,
}

/// Reads JSON-lines `{"modality": 0|1, "id": n}`; audio ids are codes.
pub fn read_fixture<R: BufRead>(reader: R) -> Result<ModalitySequence> {
    let mut tokens = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FixtureLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let tok = match Modality::from_indicator(parsed.modality).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })? {
            Modality::Text => ModalityToken::Text(parsed.id),
            Modality::Audio => ModalityToken::AudioCode(parsed.id),
        };
        tokens.push(tok);
    }
    ModalitySequence::new(tokens)
}

pub fn write_fixture(seq: &ModalitySequence) -> Result<String> {
    let mut out = String::new();
    for tok in seq.tokens() {
        let line = match tok {
            ModalityToken::Text(id) => FixtureLine { modality: 0, id: *id },
            ModalityToken::AudioCode(code) => FixtureLine {
                modality: 1,
                id: *code,
            },
            ModalityToken::AudioFrame(_) => {
                return Err(Error::Argument(
                    "raw audio frames have no fixture representation".into(),
                ))
            }
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Deterministic stand-in for a frozen speech feature extractor: each code
/// maps to a fixed pseudo-random frame in `[-1, 1]^d_feat`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoEncoder {
    seed: u64,
    d_feat: usize,
    code_vocab: usize,
    table: Vec<f64>,
}

impl PseudoEncoder {
    pub fn new(seed: u64, d_feat: usize, code_vocab: usize) -> Result<Self> {
        if d_feat == 0 || code_vocab == 0 {
            return Err(Error::Config(
                "pseudo-encoder needs positive d_feat and code_vocab".into(),
            ));
        }
        let mut table = Vec::with_capacity(d_feat * code_vocab);
        for code in 0..code_vocab {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(code as u64);
            table.extend((0..d_feat).map(|_| rng.gen_range(-1.0..=1.0)));
        }
        let enc = Self {
            seed,
            d_feat,
            code_vocab,
            table,
        };
        for a in 0..code_vocab {
            for b in a + 1..code_vocab {
                if enc.frame_unchecked(a) == enc.frame_unchecked(b) {
                    return Err(Error::Config(format!(
                        "seed {seed} renders codes {a} and {b} identically"
                    )));
                }
            }
        }
        Ok(enc)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn code_vocab(&self) -> usize {
        self.code_vocab
    }

    fn frame_unchecked(&self, code: usize) -> &[f64] {
        &self.table[code * self.d_feat..(code + 1) * self.d_feat]
    }

    pub fn frame(&self, code: usize) -> Result<&[f64]> {
        if code >= self.code_vocab {
            return Err(Error::Argument(format!(
                "audio code {code} outside vocabulary of {}",
                self.code_vocab
            )));
        }
        Ok(self.frame_unchecked(code))
    }
}

/// Renders codes to an `[L × d_feat]` frame matrix.
pub fn synth_frames(codes: &[usize], enc: &PseudoEncoder) -> Result<ParamTensor> {
    let mut data = Vec::with_capacity(codes.len() * enc.d_feat);
    for &c in codes {
        data.extend_from_slice(enc.frame(c)?);
    }
    ParamTensor::matrix(codes.len(), enc.d_feat, data)
}

/// `H_audio = F · W_proj`.
pub fn project_audio(tape: &mut Tape, frames: Var, w_proj: Var) -> Result<Var> {
    tape.matmul(frames, w_proj)
}

/// Row lookup into the text embedding table.
pub fn embed_text(tape: &mut Tape, ids: &[usize], table: Var) -> Result<Var> {
    let vocab = tape.value(table).rows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Argument(format!(
            "text id {bad} outside vocabulary of {vocab}"
        )));
    }
    tape.gather_rows(table, ids)
}

/// Builds `H_input` in token order and the per-token modality vector.
pub fn assemble(
    tape: &mut Tape,
    seq: &ModalitySequence,
    embeddings: Var,
    w_proj: Var,
    enc: &PseudoEncoder,
) -> Result<(Var, Vec<Modality>)> {
    let d_model = tape.value(embeddings).cols();
    if tape.value(w_proj).dims2() != (enc.d_feat, d_model) {
        return Err(Error::shape(
            "assemble",
            tape.value(w_proj).shape(),
            &[enc.d_feat, d_model],
        ));
    }
    let mut text_pos = Vec::new();
    let mut text_ids = Vec::new();
    let mut audio_pos = Vec::new();
    let mut frames = Vec::new();
    for (t, tok) in seq.tokens().iter().enumerate() {
        match tok {
            ModalityToken::Text(id) => {
                text_pos.push(t);
                text_ids.push(*id);
            }
            ModalityToken::AudioCode(code) => {
                audio_pos.push(t);
                frames.extend_from_slice(enc.frame(*code)?);
            }
            ModalityToken::AudioFrame(f) => {
                if f.len() != enc.d_feat {
                    return Err(Error::shape("assemble", &[f.len()], &[enc.d_feat]));
                }
                audio_pos.push(t);
                frames.extend_from_slice(f);
            }
        }
    }
    let n = seq.len();
    let text_only = audio_pos.is_empty();
    let audio_only = text_pos.is_empty();
    let mut parts = Vec::with_capacity(2);
    if !text_pos.is_empty() {
        let rows = embed_text(tape, &text_ids, embeddings)?;
        // contiguous all-text input needs no scatter
        parts.push(if text_only {
            rows
        } else {
            tape.scatter_rows(rows, &text_pos, n)?
        });
    }
    if !audio_pos.is_empty() {
        let f = tape.constant(ParamTensor::matrix(audio_pos.len(), enc.d_feat, frames)?);
        let rows = project_audio(tape, f, w_proj)?;
        parts.push(if audio_only {
            rows
        } else {
            tape.scatter_rows(rows, &audio_pos, n)?
        });
    }
    let h = match parts.as_slice() {
        [one] => *one,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!("sequence is non-empty"),
    };
    Ok((h, seq.modalities()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::ParamStore;
    use proptest::prelude::*;
    use rand::Rng;

    fn enc() -> PseudoEncoder {
        PseudoEncoder::new(5, 4, 16).unwrap()
    }

    #[test]
    fn synth_frames_examples() {
        let e = enc();
        let empty = synth_frames(&[], &e).unwrap();
        assert_eq!(empty.dims2(), (0, 4));

        let a = synth_frames(&[3, 3, 7], &e).unwrap();
        let b = synth_frames(&[3, 3, 7], &PseudoEncoder::new(5, 4, 16).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row(0), a.row(1));
        assert_ne!(a.row(0), a.row(2));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        assert!(synth_frames(&[16], &e).is_err());
    }

    #[test]
    fn encoder_injective_over_vocab() {
        let e = PseudoEncoder::new(123, 16, 64).unwrap();
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(e.frame(a).unwrap(), e.frame(b).unwrap());
            }
        }
    }

    #[test]
    fn project_audio_examples() {
        let mut t = Tape::new();
        let f = t.constant(ParamTensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = t.leaf(ParamTensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let h = project_audio(&mut t, f, w).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 4.0]);

        let frames = synth_frames(&[1, 2, 3], &enc()).unwrap();
        let f = t.constant(frames.clone());
        let zero = t.leaf(ParamTensor::zeros(vec![4, 6]));
        let h = project_audio(&mut t, f, zero).unwrap();
        assert!(t.value(h).data().iter().all(|&v| v == 0.0));

        let id = t.leaf(ParamTensor::identity(4));
        let h = project_audio(&mut t, f, id).unwrap();
        assert_eq!(t.value(h).data(), frames.data());
    }

    #[test]
    fn embed_text_examples_and_gradient() {
        let table = ParamTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut t = Tape::new();
        let e = t.leaf(table.clone());
        let empty = embed_text(&mut t, &[], e).unwrap();
        assert_eq!(t.value(empty).dims2(), (0, 2));
        let twice = embed_text(&mut t, &[1, 1], e).unwrap();
        assert_eq!(t.value(twice).row(0), t.value(twice).row(1));
        assert!(embed_text(&mut t, &[3], e).is_err());

        let r = crate::numkit::grad_check(
            |t, e| {
                let rows = embed_text(t, &[2, 0, 2], e)?;
                Ok(t.sum(rows))
            },
            &table,
            1e-6,
        )
        .unwrap();
        // only rows 0 and 2 are looked up; row 2 twice
        assert_eq!(r.analytic, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(r.max_rel_err < 1e-8);
    }

    fn params(d_model: usize) -> (ParamStore, crate::numkit::ParamId, crate::numkit::ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let e = s.add("emb", ParamTensor::randn(vec![16, d_model], 1.0, &mut rng));
        let w = s.add("proj", ParamTensor::randn(vec![4, d_model], 1.0, &mut rng));
        (s, e, w)
    }

    #[test]
    fn assemble_all_text_and_all_audio() {
        let (s, e, w) = params(3);
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let seq = ModalitySequence::new(vec![ModalityToken::Text(4), ModalityToken::Text(9)]).unwrap();
        let (h, m) = assemble(&mut t, &seq, b[e], b[w], &enc()).unwrap();
        assert_eq!(m, vec![Modality::Text; 2]);
        let direct = embed_text(&mut t, &[4, 9], b[e]).unwrap();
        assert_eq!(t.value(h).data(), t.value(direct).data());

        let seq = ModalitySequence::new(vec![ModalityToken::AudioCode(2); 3]).unwrap();
        let (_, m) = assemble(&mut t, &seq, b[e], b[w], &enc()).unwrap();
        assert_eq!(m, vec![Modality::Audio; 3]);
    }

    #[test]
    fn assemble_interleaved_matches_per_modality_paths() {
        let (s, e, w) = params(3);
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let en = enc();
        let seq = ModalitySequence::new(vec![
            ModalityToken::Text(1),
            ModalityToken::AudioCode(5),
            ModalityToken::Text(2),
        ])
        .unwrap();
        let (h, m) = assemble(&mut t, &seq, b[e], b[w], &en).unwrap();
        assert_eq!(m.iter().map(|m| m.indicator()).collect::<Vec<_>>(), vec![0, 1, 0]);
        let hv = t.value(h).clone();
        assert_eq!(hv.row(0), s.get(e).row(1));
        assert_eq!(hv.row(2), s.get(e).row(2));
        let audio = crate::numkit::matmul(&synth_frames(&[5], &en).unwrap(), s.get(w)).unwrap();
        assert_eq!(hv.row(1), audio.row(0));
    }

    #[test]
    fn fixture_round_trip_and_errors() {
        let text = "{\"modality\": 0, \"id\": 3}\n{\"modality\": 1, \"id\": 7}\n";
        let seq = read_fixture(text.as_bytes()).unwrap();
        assert_eq!(seq.tokens(), &[ModalityToken::Text(3), ModalityToken::AudioCode(7)]);
        assert_eq!(read_fixture(write_fixture(&seq).unwrap().as_bytes()).unwrap(), seq);

        let bad = "{\"modality\": 0, \"id\": 3}\n{\"modality\": 2, \"id\": 1}\n";
        match read_fixture(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(read_fixture("".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn assemble_is_order_equivariant(
            toks in proptest::collection::vec((0u8..2, 0usize..16), 1..8),
            seed in 0u64..1000,
        ) {
            let (s, e, w) = params(3);
            let en = enc();
            let make = |v: &[(u8, usize)]| ModalitySequence::new(v.iter().map(|&(m, id)| {
                if m == 0 { ModalityToken::Text(id) } else { ModalityToken::AudioCode(id) }
            }).collect()).unwrap();
            let mut perm: Vec<usize> = (0..toks.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permuted: Vec<(u8, usize)> = perm.iter().map(|&i| toks[i]).collect();

            let mut t = Tape::new();
            let b = s.bind(&mut t);
            let (h, m) = assemble(&mut t, &make(&toks), b[e], b[w], &en).unwrap();
            let (hp, mp) = assemble(&mut t, &make(&permuted), b[e], b[w], &en).unwrap();
            prop_assert_eq!(m.len(), toks.len());
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(mp[k], m[i]);
                prop_assert_eq!(t.value(hp).row(k), t.value(h).row(i));
            }
        }
    }
}
