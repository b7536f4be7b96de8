use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Polarity};
use crate::error::{Error, Result};

/// One line of a JSONL dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub aspect: String,
    pub polarity: Polarity,
}

/// Parses JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_jsonl(content: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        let ex = Example::from_text(&rec.text, &rec.aspect, rec.polarity)
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&content)
}

pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        let rec = Record {
            text: ex.sentence.join(" "),
            aspect: ex.aspect.join(" "),
            polarity: ex.label,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(examples)).map_err(|e| Error::io(path, e))
}

/// Word pools used by [`synth_dataset`].
///
/// Aspects and opinion words are split into [`SynthLexicon::GROUPS`] groups by
/// index parity; an aspect is only ever described by opinion words of its
/// own group.
pub struct SynthLexicon;

impl SynthLexicon {
    pub const ASPECTS: [&'static str; 6] = ["waiter", "staff", "food", "service", "battery", "screen"];
    pub const POSITIVE: [&'static str; 5] = ["great", "friendly", "excellent", "tasty", "lovely"];
    pub const NEGATIVE: [&'static str; 5] = ["rude", "awful", "terrible", "bland", "slow"];
    pub const NEUTRAL: [&'static str; 5] = ["average", "ordinary", "standard", "typical", "plain"];
    pub const GROUPS: usize = 2;

    pub fn opinion_words(p: Polarity) -> &'static [&'static str] {
        match p {
            Polarity::Positive => &Self::POSITIVE,
            Polarity::Negative => &Self::NEGATIVE,
            Polarity::Neutral => &Self::NEUTRAL,
        }
    }

    pub fn group(aspect: usize) -> usize {
        aspect % Self::GROUPS
    }

    /// Opinion words of polarity `p` that may describe aspect index `aspect`.
    pub fn bound_words(aspect: usize, p: Polarity) -> Vec<&'static str> {
        Self::opinion_words(p)
            .iter()
            .enumerate()
            .filter(|(j, _)| j % Self::GROUPS == Self::group(aspect))
            .map(|(_, w)| *w)
            .collect()
    }

    pub fn filler(i: usize) -> String {
        format!("w{i}")
    }
}

const DISTRACTOR_P: f64 = 0.5;

fn clause(rng: &mut ChaCha8Rng, aspect: usize, p: Polarity) -> Vec<String> {
    let word = *SynthLexicon::bound_words(aspect, p).choose(rng).expect("nonempty");
    vec![word.to_string(), SynthLexicon::ASPECTS[aspect].to_string()]
}

/// Seeded toy ABSA task of exactly `n` examples.
///
/// Each sentence places an opinion word directly before an aspect; that
/// word's polarity is the aspect's label. Half of the sentences hold a second
/// clause, with an aspect from the other group and a different polarity.
/// Such sentences yield one example per aspect (target first), as in
/// multi-aspect review corpora. `vocab_size` is the number of distinct
/// filler words.
pub fn synth_dataset(n: usize, seed: u64, vocab_size: usize) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Data("synth_dataset needs n > 0".into()));
    }
    if vocab_size == 0 {
        return Err(Error::Data("synth_dataset needs vocab_size > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<String> {
        let k = rng.gen_range(lo..=hi);
        (0..k)
            .map(|_| SynthLexicon::filler(rng.gen_range(0..vocab_size)))
            .collect()
    };
    let n_aspects = SynthLexicon::ASPECTS.len();

    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let label = Polarity::ALL[rng.gen_range(0..3)];
        let target = rng.gen_range(0..n_aspects);
        let mut targets = vec![(target, label)];
        if rng.gen_bool(DISTRACTOR_P) {
            let other = loop {
                let a = rng.gen_range(0..n_aspects);
                if SynthLexicon::group(a) != SynthLexicon::group(target) {
                    break a;
                }
            };
            let others: Vec<Polarity> = Polarity::ALL.into_iter().filter(|&p| p != label).collect();
            targets.push((other, others[rng.gen_range(0..others.len())]));
        }

        let mut clauses: Vec<Vec<String>> = targets.iter().map(|&(a, p)| clause(&mut rng, a, p)).collect();
        clauses.shuffle(&mut rng);
        let mut sentence = fillers(&mut rng, 0, 2);
        for (k, c) in clauses.into_iter().enumerate() {
            if k > 0 {
                sentence.extend(fillers(&mut rng, 1, 2));
            }
            sentence.extend(c);
        }
        sentence.extend(fillers(&mut rng, 0, 2));

        for (a, p) in targets {
            if out.len() == n {
                break;
            }
            out.push(Example {
                sentence: sentence.clone(),
                aspect: vec![SynthLexicon::ASPECTS[a].to_string()],
                label: p,
            });
        }
    }
    Ok(out)
}
