//! Text tokenization and the hybrid text / summary / EEG sequence layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tensor::{TensorError, TensorResult};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

/// Whitespace tokenizer hashing lower-cased words into
/// `[RESERVED, vocab)`; collisions are accepted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextTokenizer {
    pub vocab: usize,
    pub max_tokens: usize,
}

impl Default for TextTokenizer {
    fn default() -> Self {
        Self {
            vocab: 512,
            max_tokens: 64,
        }
    }
}

impl TextTokenizer {
    pub fn token_id(&self, word: &str) -> usize {
        let w = word.to_lowercase();
        if w.is_empty() || self.vocab <= RESERVED {
            return UNK;
        }
        let h = w
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        RESERVED + (h % (self.vocab - RESERVED) as u64) as usize
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .take(self.max_tokens)
            .map(|w| self.token_id(w))
            .collect()
    }
}

/// Spans are half-open position ranges into the sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub text: Range<usize>,
    pub sem: Range<usize>,
    pub eeg: Range<usize>,
    pub instr: Range<usize>,
    pub answer: Range<usize>,
}

/// `BOS text SEP sem SEP eeg EOS`, or with an answer
/// `BOS text SEP sem SEP eeg SEP instr answer EOS`.
///
/// Summary positions hold continuous rows supplied at embedding time, so
/// their id slot is `None`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridSequence {
    pub ids: Vec<Option<usize>>,
    pub spans: Spans,
    pub v_text: usize,
}

/// Parts recovered from a sequence, EEG ids without their offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub text: Vec<usize>,
    pub sem_len: usize,
    pub eeg: Vec<usize>,
    pub instr: Vec<usize>,
    pub answer: Vec<usize>,
}

impl HybridSequence {
    pub fn assemble(
        text: &[usize],
        sem_len: usize,
        eeg: &[usize],
        v_text: usize,
        v_eeg: usize,
        instr: &[usize],
        answer: &[usize],
    ) -> TensorResult<Self> {
        if let Some(t) = text.iter().chain(instr).chain(answer).find(|&&t| t >= v_text) {
            return Err(TensorError::Contract(format!("text id {t} outside vocabulary {v_text}")));
        }
        if let Some(e) = eeg.iter().find(|&&e| e >= v_eeg) {
            return Err(TensorError::Contract(format!("EEG id {e} outside codebook {v_eeg}")));
        }
        if answer.is_empty() && !instr.is_empty() {
            return Err(TensorError::Contract("instruction without an answer span".into()));
        }
        let mut ids = vec![Some(BOS)];
        let text_span = ids.len()..ids.len() + text.len();
        ids.extend(text.iter().map(|&t| Some(t)));
        ids.push(Some(SEP));
        let sem = ids.len()..ids.len() + sem_len;
        ids.extend(std::iter::repeat_n(None, sem_len));
        ids.push(Some(SEP));
        let eeg_span = ids.len()..ids.len() + eeg.len();
        ids.extend(eeg.iter().map(|&e| Some(v_text + e)));
        let (instr_span, answer_span) = if answer.is_empty() {
            (ids.len()..ids.len(), ids.len()..ids.len())
        } else {
            ids.push(Some(SEP));
            let i = ids.len()..ids.len() + instr.len();
            ids.extend(instr.iter().map(|&t| Some(t)));
            let a = ids.len()..ids.len() + answer.len();
            ids.extend(answer.iter().map(|&t| Some(t)));
            (i, a)
        };
        ids.push(Some(EOS));
        Ok(Self {
            ids,
            spans: Spans {
                text: text_span,
                sem,
                eeg: eeg_span,
                instr: instr_span,
                answer: answer_span,
            },
            v_text,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn decode(&self) -> Decoded {
        let take = |r: &Range<usize>| -> Vec<usize> {
            self.ids[r.clone()].iter().map(|t| t.expect("id span")).collect()
        };
        Decoded {
            text: take(&self.spans.text),
            sem_len: self.spans.sem.len(),
            eeg: take(&self.spans.eeg).into_iter().map(|e| e - self.v_text).collect(),
            instr: take(&self.spans.instr),
            answer: take(&self.spans.answer),
        }
    }

    /// Next-token targets at position `t` whenever `t + 1` lies in `span`.
    pub fn targets_for(&self, span: &Range<usize>) -> Vec<Option<usize>> {
        (0..self.len())
            .map(|t| {
                if span.contains(&(t + 1)) {
                    self.ids[t + 1]
                } else {
                    None
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_without_answer() {
        let s = HybridSequence::assemble(&[10, 11, 12], 2, &[0, 1, 2, 3], 100, 8, &[], &[]).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!(s.spans.text, 1..4);
        assert_eq!(s.spans.sem, 5..7);
        assert_eq!(s.spans.eeg, 8..12);
        assert_eq!(s.ids[0], Some(BOS));
        assert_eq!(s.ids[4], Some(SEP));
        assert_eq!(s.ids[7], Some(SEP));
        assert_eq!(s.ids[12], Some(EOS));
        assert!(s.ids[5..7].iter().all(Option::is_none));
    }

    #[test]
    fn eeg_offset() {
        let s = HybridSequence::assemble(&[], 0, &[5], 100, 8, &[], &[]).unwrap();
        assert_eq!(s.ids[s.spans.eeg.start], Some(105));
    }

    #[test]
    fn answer_layout_round_trips() {
        let s = HybridSequence::assemble(&[7], 1, &[3, 4], 50, 8, &[20, 21], &[30]).unwrap();
        let d = s.decode();
        assert_eq!(d, Decoded {
            text: vec![7],
            sem_len: 1,
            eeg: vec![3, 4],
            instr: vec![20, 21],
            answer: vec![30],
        });
        assert_eq!(s.ids[s.spans.answer.end], Some(EOS));
        assert_eq!(s.ids[s.spans.instr.start - 1], Some(SEP));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        assert!(HybridSequence::assemble(&[100], 0, &[], 100, 8, &[], &[]).is_err());
        assert!(HybridSequence::assemble(&[], 0, &[8], 100, 8, &[], &[]).is_err());
    }

    #[test]
    fn targets_skip_summary_slots() {
        let s = HybridSequence::assemble(&[10, 11], 2, &[0, 1], 100, 8, &[], &[]).unwrap();
        let t = s.targets_for(&s.spans.eeg);
        // SEP before the EEG span predicts the first EEG token
        assert_eq!(t[s.spans.eeg.start - 1], Some(100));
        assert_eq!(t.iter().filter(|x| x.is_some()).count(), 2);
    }

    #[test]
    fn tokenizer_is_stable_and_bounded() {
        let tk = TextTokenizer::default();
        let a = tk.encode("Delta band dominates");
        assert_eq!(a, tk.encode("delta BAND dominates"));
        assert!(a.iter().all(|&t| (RESERVED..512).contains(&t)));
        assert_eq!(tk.encode(&"w ".repeat(100)).len(), 64);
    }
}
