use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::sampling::MAX_WORD_LEN;

pub type Token = usize;

/// Character vocabulary: `a..=z` map to `0..=25`, then `[BOS]` and `[EOW]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharVocab;

impl CharVocab {
    pub const BOS: Token = 26;
    pub const EOW: Token = 27;
    pub const SIZE: usize = 28;
    pub const MAX_LEN: usize = MAX_WORD_LEN;

    pub fn encode(word: &str) -> Result<Vec<Token>> {
        word.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    Ok((c as u8 - b'a') as Token)
                } else {
                    Err(Error::Parameter(format!("character {c:?} outside a..z")))
                }
            })
            .collect()
    }

    /// Letters only; control tokens are dropped.
    pub fn decode(tokens: &[Token]) -> String {
        tokens.iter().filter(|&&t| t < 26).map(|&t| (b'a' + t as u8) as char).collect()
    }
}

/// Greedy autoregressive decoding.
///
/// `step` receives the fused features and the prefix generated so far
/// (starting with `[BOS]`) and returns a distribution over the 28 tokens.
/// Decoding stops at `[EOW]` or after 15 letters.
pub fn greedy_decode<F>(theta: ArrayView2<f64>, mut step: F) -> Result<String>
where
    F: FnMut(ArrayView2<f64>, &[Token]) -> Vec<f64>,
{
    let mut prefix = vec![CharVocab::BOS];
    while prefix.len() - 1 < CharVocab::MAX_LEN {
        let dist = step(theta, &prefix);
        let tok = argmax_checked(&dist)?;
        match tok {
            CharVocab::EOW => break,
            CharVocab::BOS => return Err(Error::Contract("step function selected [BOS]".into())),
            t => prefix.push(t),
        }
    }
    Ok(CharVocab::decode(&prefix[1..]))
}

fn argmax_checked(dist: &[f64]) -> Result<Token> {
    if dist.len() != CharVocab::SIZE {
        return Err(Error::Contract(format!(
            "distribution has {} entries, expected {}",
            dist.len(),
            CharVocab::SIZE
        )));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Contract("distribution has negative or non-finite entries".into()));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("distribution sums to {sum}")));
    }
    // first maximum wins on ties
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;

    fn one_hot(t: Token) -> Vec<f64> {
        let mut v = vec![0.0; CharVocab::SIZE];
        v[t] = 1.0;
        v
    }

    #[test]
    fn immediate_eow_is_empty() {
        let theta = Array2::zeros((1, 4));
        assert_eq!(greedy_decode(theta.view(), |_, _| one_hot(CharVocab::EOW)).unwrap(), "");
    }

    #[test]
    fn scripted_word() {
        let theta = Array2::zeros((3, 4));
        let script = CharVocab::encode("draft").unwrap();
        let out = greedy_decode(theta.view(), |_, prefix| {
            one_hot(script.get(prefix.len() - 1).copied().unwrap_or(CharVocab::EOW))
        })
        .unwrap();
        assert_eq!(out, "draft");
    }

    #[test]
    fn never_ending_decoder_is_capped() {
        let theta = Array2::zeros((2, 2));
        let mut calls = 0;
        let out = greedy_decode(theta.view(), |_, _| {
            calls += 1;
            one_hot(4)
        })
        .unwrap();
        assert_eq!(out, "eeeeeeeeeeeeeee");
        assert_eq!(calls, 15);
    }

    #[test]
    fn prefix_starts_with_bos() {
        let theta = Array2::zeros((1, 1));
        greedy_decode(theta.view(), |_, prefix| {
            assert_eq!(prefix[0], CharVocab::BOS);
            one_hot(if prefix.len() < 3 { 0 } else { CharVocab::EOW })
        })
        .unwrap();
    }

    #[test]
    fn invalid_distributions_are_contract_errors() {
        let theta = Array2::zeros((1, 1));
        let bad: Vec<Vec<f64>> = vec![
            vec![0.5; CharVocab::SIZE],
            vec![1.0; 3],
            {
                let mut v = one_hot(0);
                v[1] = -0.5;
                v[2] = 0.5;
                v
            },
            one_hot(CharVocab::BOS),
        ];
        for d in bad {
            assert!(matches!(greedy_decode(theta.view(), |_, _| d.clone()), Err(Error::Contract(_))));
        }
        // within tolerance is fine
        let mut nearly = one_hot(CharVocab::EOW);
        nearly[0] = 5e-7;
        assert_eq!(greedy_decode(theta.view(), |_, _| nearly.clone()).unwrap(), "");
    }

    #[test]
    fn vocab_round_trip() {
        let t = CharVocab::encode("watermark").unwrap();
        assert_eq!(CharVocab::decode(&t), "watermark");
        assert!(CharVocab::encode("Draft").is_err());
    }
}
