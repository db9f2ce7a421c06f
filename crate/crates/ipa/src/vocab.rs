//! Shared token vocabulary for base, adapter, and approximate policies.
//!
//! Ids are dense: BOS = 0, EOS = 1, PAD = 2, then a contiguous block of
//! control-token slots (reward-quantile conditioning, consumed only by
//! adapter-side contexts), then the regular alphabet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
const SPECIALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    control_count: usize,
}

impl Vocab {
    /// Build from single-character regular tokens plus `control_count`
    /// reserved control slots. Needs at least one regular token.
    pub fn from_alphabet(alphabet: &str, control_count: usize) -> Result<Self> {
        let mut tokens = vec!["<bos>".to_string(), "<eos>".to_string(), "<pad>".to_string()];
        for k in 0..control_count {
            tokens.push(format!("<ctrl{k}>"));
        }
        let mut seen = std::collections::HashSet::new();
        for ch in alphabet.chars() {
            if !seen.insert(ch) {
                return Err(Error::Config(format!("duplicate alphabet char {ch:?}")));
            }
            tokens.push(ch.to_string());
        }
        if tokens.len() < SPECIALS + control_count + 1 {
            return Err(Error::Config("alphabet must be nonempty".into()));
        }
        Ok(Vocab {
            tokens,
            control_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn control_count(&self) -> usize {
        self.control_count
    }

    /// Id of the control token for quantile bin `k`.
    pub fn control_token(&self, k: usize) -> Result<u32> {
        if k >= self.control_count {
            return Err(Error::Index(format!(
                "control bin {k} of {}",
                self.control_count
            )));
        }
        Ok((SPECIALS + k) as u32)
    }

    pub fn is_control(&self, id: u32) -> bool {
        (id as usize) >= SPECIALS && (id as usize) < SPECIALS + self.control_count
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS
    }

    /// Regular (non-special, non-control) token ids.
    pub fn regular_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (SPECIALS + self.control_count..self.tokens.len()).map(|i| i as u32)
    }

    pub fn token_str(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Index(format!("token id {id} of {}", self.tokens.len())))
    }

    /// Id of a single-character regular token.
    pub fn char_id(&self, ch: char) -> Result<u32> {
        let s = ch.to_string();
        self.tokens[SPECIALS + self.control_count..]
            .iter()
            .position(|t| *t == s)
            .map(|i| (SPECIALS + self.control_count + i) as u32)
            .ok_or_else(|| Error::Index(format!("char {ch:?} not in vocab")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.char_id(c)).collect()
    }

    /// Encode a prompt with the leading BOS every context starts from.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    /// Render generated ids, skipping special and control tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id) && !self.is_control(id))
            .filter_map(|&id| self.tokens.get(id as usize))
            .map(|s| s.as_str())
            .collect()
    }

    /// Strip special/control ids (used by rewards and n-gram metrics).
    pub fn content_ids(&self, ids: &[u32]) -> Vec<u32> {
        ids.iter()
            .copied()
            .filter(|&id| !self.is_special(id) && !self.is_control(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_dense_with_leading_specials() {
        let v = Vocab::from_alphabet("abc", 2).unwrap();
        assert_eq!(v.len(), 3 + 2 + 3);
        assert!(v.len() >= 4 + v.control_count());
        assert_eq!(v.control_token(0).unwrap(), 3);
        assert_eq!(v.control_token(1).unwrap(), 4);
        assert!(v.is_control(3) && v.is_control(4));
        assert!(!v.is_control(5));
        assert_eq!(v.char_id('a').unwrap(), 5);
        assert_eq!(v.token_str(5).unwrap(), "a");
    }

    #[test]
    fn encode_decode_skips_specials() {
        let v = Vocab::from_alphabet("xyz", 1).unwrap();
        let ids = v.encode_prompt("xy").unwrap();
        assert_eq!(ids[0], BOS);
        let mut with_specials = ids.clone();
        with_specials.push(EOS);
        assert_eq!(v.decode(&with_specials), "xy");
    }

    #[test]
    fn control_bin_out_of_range() {
        let v = Vocab::from_alphabet("ab", 1).unwrap();
        assert!(v.control_token(1).is_err());
    }

    #[test]
    fn empty_alphabet_rejected() {
        assert!(Vocab::from_alphabet("", 2).is_err());
    }
}
