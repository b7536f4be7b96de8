use super::{Example, Polarity, Segment, Vocabulary, CLS_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One example laid out as `[CLS] sentence [SEP] aspect [SEP] [PAD]*`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// 1 on real positions, 0 on padding.
    pub pad_mask: Vec<u8>,
    /// `[N, N]` matrix of 1s and 2s; 2 on sentence↔aspect cells.
    pub amplify: Tensor,
    pub label: Polarity,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pad_mask_f64(&self) -> Vec<f64> {
        self.pad_mask.iter().map(|&m| f64::from(m)).collect()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m != 0).count()
    }

    /// Copy with the padding tail removed.
    pub fn trimmed(&self) -> EncodedInput {
        self.resized(self.real_len()).expect("real length is valid")
    }

    /// Copy padded (or trimmed of padding) to exactly `n` positions.
    pub fn resized(&self, n: usize) -> Result<EncodedInput> {
        let real = self.real_len();
        if n < real {
            return Err(Error::Encoding(format!("cannot resize {real} real positions to {n}")));
        }
        let mut ids = self.ids[..real].to_vec();
        let mut segments = self.segments[..real].to_vec();
        ids.resize(n, PAD_ID);
        segments.resize(n, Segment::Pad);
        let pad_mask = segments.iter().map(|&s| u8::from(s != Segment::Pad)).collect();
        let amplify = build_amplify(&segments);
        Ok(EncodedInput {
            ids,
            segments,
            pad_mask,
            amplify,
            label: self.label,
        })
    }

    /// Checks the segment layout and the amplify/mask invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || self.segments.len() != n || self.pad_mask.len() != n {
            return Err(Error::Encoding("inconsistent encoded lengths".into()));
        }
        check_layout(&self.segments)?;
        for (i, (&s, &m)) in self.segments.iter().zip(&self.pad_mask).enumerate() {
            if (m == 0) != (s == Segment::Pad) {
                return Err(Error::Encoding(format!("pad mask disagrees with segment at {i}")));
            }
        }
        if self.amplify != build_amplify(&self.segments) {
            return Err(Error::Encoding("amplify matrix does not match segments".into()));
        }
        Ok(())
    }
}

fn check_layout(segments: &[Segment]) -> Result<()> {
    use Segment::*;
    let bad = |why: &str| Err(Error::Encoding(format!("invalid segment layout: {why}")));
    let mut it = segments.iter().copied().peekable();
    if it.next() != Some(Cls) {
        return bad("must start with CLS");
    }
    while it.peek() == Some(&Sent) {
        it.next();
    }
    if it.next() != Some(Sep1) {
        return bad("expected SEP1 after sentence");
    }
    let mut asp = 0;
    while it.peek() == Some(&Asp) {
        it.next();
        asp += 1;
    }
    if asp == 0 {
        return bad("aspect span is empty");
    }
    if it.next() != Some(Sep2) {
        return bad("expected SEP2 after aspect");
    }
    if it.any(|s| s != Pad) {
        return bad("only PAD may follow SEP2");
    }
    Ok(())
}

/// True iff one position is in the sentence span and the other in the aspect span.
pub fn cross_segment(a: Segment, b: Segment) -> bool {
    matches!((a, b), (Segment::Sent, Segment::Asp) | (Segment::Asp, Segment::Sent))
}

/// Amplify matrix: 2 where exactly one of `i`, `j` is SENT and the other ASP, else 1.
pub fn build_amplify(segments: &[Segment]) -> Tensor {
    let n = segments.len();
    let mut data = vec![1.0; n * n];
    for (i, &si) in segments.iter().enumerate() {
        for (j, &sj) in segments.iter().enumerate() {
            if cross_segment(si, sj) {
                data[i * n + j] = 2.0;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// Encodes an example, truncating the sentence tail if it does not fit.
pub fn encode(ex: &Example, vocab: &Vocabulary, max_len: usize) -> Result<EncodedInput> {
    if ex.aspect.is_empty() {
        return Err(Error::Encoding("aspect is empty".into()));
    }
    if ex.aspect.len() + 3 > max_len {
        return Err(Error::Encoding(format!(
            "aspect of {} tokens does not fit max_len {max_len}",
            ex.aspect.len()
        )));
    }
    let sent_len = ex.sentence.len().min(max_len - 3 - ex.aspect.len());

    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    segments.push(Segment::Cls);
    for tok in &ex.sentence[..sent_len] {
        ids.push(vocab.id(tok));
        segments.push(Segment::Sent);
    }
    ids.push(SEP_ID);
    segments.push(Segment::Sep1);
    for tok in &ex.aspect {
        ids.push(vocab.id(tok));
        segments.push(Segment::Asp);
    }
    ids.push(SEP_ID);
    segments.push(Segment::Sep2);
    ids.resize(max_len, PAD_ID);
    segments.resize(max_len, Segment::Pad);

    let pad_mask = segments.iter().map(|&s| u8::from(s != Segment::Pad)).collect();
    let amplify = build_amplify(&segments);
    Ok(EncodedInput {
        ids,
        segments,
        pad_mask,
        amplify,
        label: ex.label,
    })
}

/// Recovers `(sentence, aspect)` token strings from an encoding.
pub fn decode(enc: &EncodedInput, vocab: &Vocabulary) -> (Vec<String>, Vec<String>) {
    let mut sentence = Vec::new();
    let mut aspect = Vec::new();
    for (&id, &seg) in enc.ids.iter().zip(&enc.segments) {
        let tok = vocab.token(id).unwrap_or("[UNK]").to_string();
        match seg {
            Segment::Sent => sentence.push(tok),
            Segment::Asp => aspect.push(tok),
            _ => {}
        }
    }
    (sentence, aspect)
}
