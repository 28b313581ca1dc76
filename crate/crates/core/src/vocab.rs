//! Joint token vocabulary for the decoder-side sequence.
//!
//! Ids 0..=4 are reserved in a fixed order, then translation units, then
//! phoneme units. Silence is the phoneme-class token `SIL` so pauses carry
//! durations through the same machinery as ordinary phonemes.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const SOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const OC_ID: u32 = 3;
pub const SIL_ID: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<OC>", "SIL"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary line {line}: expected reserved token `{expected}`, found `{found}`")]
    BadReserved {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("vocabulary must contain the {} reserved tokens plus at least one unit", RESERVED.len())]
    TooSmall,
}

/// Token-per-line vocabulary with the reserved prefix and a split point
/// between translation units and phoneme units.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    /// First id of the phoneme-unit block.
    phoneme_start: u32,
}

impl Vocab {
    /// Build from unit surface lists. Translation units come first.
    pub fn new(translation_units: &[String], phoneme_units: &[String]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(translation_units.iter().cloned());
        let phoneme_start = tokens.len() as u32;
        tokens.extend(phoneme_units.iter().cloned());
        Vocab {
            tokens,
            phoneme_start,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn surface(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("<unk>")
    }

    pub fn translation_unit_range(&self) -> std::ops::Range<u32> {
        RESERVED.len() as u32..self.phoneme_start
    }

    pub fn phoneme_unit_range(&self) -> std::ops::Range<u32> {
        self.phoneme_start..self.tokens.len() as u32
    }

    pub fn is_translation_unit(&self, id: u32) -> bool {
        self.translation_unit_range().contains(&id)
    }

    /// Phoneme-class tokens carry durations; this includes `SIL`.
    pub fn is_timed(&self, id: u32) -> bool {
        id == SIL_ID || self.phoneme_unit_range().contains(&id)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Read a token-per-line file, validating the reserved prefix. The
    /// translation/phoneme split is recovered from the unit naming written by
    /// the generator (phoneme units start with `p`, translation units with
    /// `w`); files with other conventions fall back to treating every
    /// non-reserved token after the last `w*` token as a phoneme unit.
    pub fn read_file(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() <= RESERVED.len() {
            return Err(VocabError::TooSmall);
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(VocabError::BadReserved {
                    line: i + 1,
                    expected: want.to_string(),
                    found: tokens[i].clone(),
                });
            }
        }
        let last_w = tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .filter(|(_, t)| t.starts_with('w'))
            .map(|(i, _)| i)
            .last();
        let phoneme_start = match last_w {
            Some(i) => (i + 1) as u32,
            None => RESERVED.len() as u32,
        };
        Ok(Vocab {
            tokens,
            phoneme_start,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vocab {
        Vocab::new(
            &["w00".into(), "w01".into()],
            &["p00".into(), "p01".into(), "p02".into()],
        )
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = sample();
        assert_eq!(v.surface(PAD_ID), "<pad>");
        assert_eq!(v.surface(SOS_ID), "<sos>");
        assert_eq!(v.surface(EOS_ID), "<eos>");
        assert_eq!(v.surface(OC_ID), "<OC>");
        assert_eq!(v.surface(SIL_ID), "SIL");
        assert_eq!(v.size(), 10);
    }

    #[test]
    fn unit_classes() {
        let v = sample();
        assert!(v.is_translation_unit(5) && v.is_translation_unit(6));
        assert!(!v.is_translation_unit(7));
        assert!(v.is_timed(SIL_ID));
        assert!(v.is_timed(7) && v.is_timed(9));
        assert!(!v.is_timed(5) && !v.is_timed(EOS_ID) && !v.is_timed(OC_ID));
    }

    #[test]
    fn file_round_trip() {
        let v = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.write_file(&path).unwrap();
        let back = Vocab::read_file(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn reserved_prefix_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\n<sos>\nOOPS\n<OC>\nSIL\nw00\np00\n").unwrap();
        let err = Vocab::read_file(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }
}
