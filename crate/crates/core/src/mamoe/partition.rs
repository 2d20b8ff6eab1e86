use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::Modality;

/// Disjoint text and audio expert groups covering `0..n_experts`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition", into = "RawPartition")]
pub struct ExpertPartition {
    n_experts: usize,
    text: Vec<usize>,
    audio: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawPartition {
    n_experts: usize,
    audio_indices: Vec<usize>,
}

impl TryFrom<RawPartition> for ExpertPartition {
    type Error = Error;

    fn try_from(r: RawPartition) -> Result<Self> {
        ExpertPartition::from_audio_indices(r.n_experts, &r.audio_indices)
    }
}

impl From<ExpertPartition> for RawPartition {
    fn from(p: ExpertPartition) -> Self {
        RawPartition {
            n_experts: p.n_experts,
            audio_indices: p.audio,
        }
    }
}

impl ExpertPartition {
    /// Audio gets the listed experts; text gets the rest.
    pub fn from_audio_indices(n_experts: usize, audio: &[usize]) -> Result<Self> {
        let mut is_audio = vec![false; n_experts];
        for &i in audio {
            if i >= n_experts {
                return Err(Error::Config(format!(
                    "audio expert index {i} outside 0..{n_experts}"
                )));
            }
            if is_audio[i] {
                return Err(Error::Config(format!("audio expert index {i} listed twice")));
            }
            is_audio[i] = true;
        }
        let text: Vec<usize> = (0..n_experts).filter(|&i| !is_audio[i]).collect();
        let audio: Vec<usize> = (0..n_experts).filter(|&i| is_audio[i]).collect();
        if text.is_empty() || audio.is_empty() {
            return Err(Error::Config(format!(
                "both expert groups must be non-empty (text {}, audio {})",
                text.len(),
                audio.len()
            )));
        }
        Ok(Self {
            n_experts,
            text,
            audio,
        })
    }

    /// Lower half text, upper half audio.
    pub fn half_split(n_experts: usize) -> Result<Self> {
        let audio: Vec<usize> = (n_experts / 2..n_experts).collect();
        Self::from_audio_indices(n_experts, &audio)
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn text(&self) -> &[usize] {
        &self.text
    }

    pub fn audio(&self) -> &[usize] {
        &self.audio
    }

    pub fn group(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
        }
    }

    pub fn modality_of(&self, expert: usize) -> Option<Modality> {
        if self.audio.binary_search(&expert).is_ok() {
            Some(Modality::Audio)
        } else if expert < self.n_experts {
            Some(Modality::Text)
        } else {
            None
        }
    }

    /// Partition after renaming expert `i` to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_experts {
            return Err(Error::shape("relabel", &[perm.len()], &[self.n_experts]));
        }
        let audio: Vec<usize> = self.audio.iter().map(|&i| perm[i]).collect();
        Self::from_audio_indices(self.n_experts, &audio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_split_matches_reference_layout() {
        let p = ExpertPartition::half_split(64).unwrap();
        assert_eq!(p.audio(), (32..64).collect::<Vec<_>>().as_slice());
        assert_eq!(p.text(), (0..32).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn rejects_bad_partitions() {
        assert!(ExpertPartition::from_audio_indices(4, &[]).is_err());
        assert!(ExpertPartition::from_audio_indices(4, &[0, 1, 2, 3]).is_err());
        assert!(ExpertPartition::from_audio_indices(4, &[4]).is_err());
        assert!(ExpertPartition::from_audio_indices(4, &[1, 1]).is_err());
    }

    #[test]
    fn groups_are_disjoint_and_cover() {
        let p = ExpertPartition::from_audio_indices(6, &[5, 0, 3]).unwrap();
        assert_eq!(p.text(), &[1, 2, 4]);
        assert_eq!(p.audio(), &[0, 3, 5]);
        assert_eq!(p.modality_of(3), Some(Modality::Audio));
        assert_eq!(p.modality_of(2), Some(Modality::Text));
        assert_eq!(p.modality_of(6), None);
    }

    #[test]
    fn serde_round_trip() {
        let p = ExpertPartition::from_audio_indices(6, &[5, 0, 3]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ExpertPartition>(&s).unwrap(), p);
        assert!(serde_json::from_str::<ExpertPartition>(r#"{"n_experts":2,"audio_indices":[0,1]}"#).is_err());
    }
}
