use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    System,
    Text,
    Visual,
    Output,
}

impl Modality {
    pub fn code(self) -> char {
        match self {
            Modality::System => 'S',
            Modality::Text => 'T',
            Modality::Visual => 'V',
            Modality::Output => 'O',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'S' => Some(Modality::System),
            'T' => Some(Modality::Text),
            'V' => Some(Modality::Visual),
            'O' => Some(Modality::Output),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::System => "system",
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Output => "output",
        };
        f.write_str(s)
    }
}

/// Token ids and visual embeddings interleaved by a per-position tag list.
///
/// `token_ids` holds one id per non-visual position (system, text and
/// output) in sequence order; `visual_embeds` holds one `visual_dim` row per
/// visual position, also in order. The output span, when present, is a
/// contiguous suffix and doubles as the supervision target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedMultimodalSequence {
    pub token_ids: Vec<u32>,
    pub visual_embeds: Vec<f64>,
    pub visual_dim: usize,
    pub tags: Vec<Modality>,
}

impl TokenizedMultimodalSequence {
    pub fn new(token_ids: Vec<u32>, visual_embeds: Vec<f64>, visual_dim: usize, tags: Vec<Modality>) -> Result<Self> {
        let s = Self { token_ids, visual_embeds, visual_dim, tags };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.tags.iter().filter(|t| **t == Modality::Visual).count();
        if self.tags.len() != self.token_ids.len() + nv {
            return Err(Error::shape(
                "sequence",
                format!("{} tags for {} tokens + {nv} visual", self.tags.len(), self.token_ids.len()),
            ));
        }
        if self.visual_embeds.len() != nv * self.visual_dim {
            return Err(Error::shape(
                "sequence",
                format!("{} visual values for {nv} rows of width {}", self.visual_embeds.len(), self.visual_dim),
            ));
        }
        if !self.visual_embeds.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("visual embeddings".into()));
        }
        if let Some(first) = self.tags.iter().position(|t| *t == Modality::Output) {
            if self.tags[first..].iter().any(|t| *t != Modality::Output) {
                return Err(Error::shape("sequence", "output span must be a contiguous suffix"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn num_visual(&self) -> usize {
        self.tags.iter().filter(|t| **t == Modality::Visual).count()
    }

    pub fn positions_of(&self, m: Modality) -> Vec<usize> {
        self.tags.iter().enumerate().filter(|(_, t)| **t == m).map(|(i, _)| i).collect()
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        self.positions_of(Modality::Visual)
    }

    /// Positions of the output suffix (empty range if absent).
    pub fn output_span(&self) -> Range<usize> {
        let start = self.tags.iter().position(|t| *t == Modality::Output).unwrap_or(self.tags.len());
        start..self.tags.len()
    }

    /// Token ids of the output span.
    pub fn target_ids(&self) -> &[u32] {
        let n = self.output_span().len();
        &self.token_ids[self.token_ids.len() - n..]
    }

    /// Positions whose next-token prediction produces an output token: the
    /// query rows of output generation.
    pub fn generating_positions(&self) -> Vec<usize> {
        self.output_span().filter(|&p| p > 0).map(|p| p - 1).collect()
    }

    /// The sequence without its output span.
    pub fn prompt(&self) -> Self {
        let n = self.output_span().len();
        Self {
            token_ids: self.token_ids[..self.token_ids.len() - n].to_vec(),
            visual_embeds: self.visual_embeds.clone(),
            visual_dim: self.visual_dim,
            tags: self.tags[..self.tags.len() - n].to_vec(),
        }
    }

    /// Appends output tokens to the end of the sequence.
    pub fn with_output(&self, tokens: &[u32]) -> Self {
        let mut s = self.clone();
        s.token_ids.extend_from_slice(tokens);
        s.tags.extend(std::iter::repeat(Modality::Output).take(tokens.len()));
        s
    }

    /// Row `k` of the visual embeddings.
    pub fn visual_row(&self, k: usize) -> &[f64] {
        &self.visual_embeds[k * self.visual_dim..(k + 1) * self.visual_dim]
    }

    /// Per-position token id (`None` for visual positions).
    pub fn position_tokens(&self) -> Vec<Option<u32>> {
        let mut ids = self.token_ids.iter();
        self.tags
            .iter()
            .map(|t| if *t == Modality::Visual { None } else { ids.next().copied() })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Modality::*;

    fn sample() -> TokenizedMultimodalSequence {
        TokenizedMultimodalSequence::new(
            vec![1, 5, 9],
            vec![0.5, -0.5, 1.0, 2.0],
            2,
            vec![System, Visual, Visual, Text, Output],
        )
        .unwrap()
    }

    #[test]
    fn spans_and_positions() {
        let s = sample();
        assert_eq!(s.output_span(), 4..5);
        assert_eq!(s.target_ids(), &[9]);
        assert_eq!(s.generating_positions(), vec![3]);
        assert_eq!(s.visual_positions(), vec![1, 2]);
        assert_eq!(s.position_tokens(), vec![Some(1), None, None, Some(5), Some(9)]);
        assert_eq!(s.prompt().with_output(&[9]), s);
    }

    #[test]
    fn rejects_inconsistent_layouts() {
        assert!(TokenizedMultimodalSequence::new(vec![1], vec![], 2, vec![System, Visual]).is_err());
        assert!(TokenizedMultimodalSequence::new(vec![1, 2], vec![], 2, vec![Output, Text]).is_err());
        assert!(TokenizedMultimodalSequence::new(vec![1], vec![f64::NAN, 0.0], 2, vec![System, Visual]).is_err());
    }
}
