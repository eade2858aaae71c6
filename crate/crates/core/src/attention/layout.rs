use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::rope::{RopeConfig, SourcePositions};
use crate::error::{GragError, Result};

/// One of the three token segments of an editing sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Text,
    Edit,
    Source,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Text, Segment::Edit, Segment::Source];

    pub fn name(self) -> &'static str {
        match self {
            Segment::Text => "text",
            Segment::Edit => "edit",
            Segment::Source => "source",
        }
    }
}

/// Partition of the joint sequence into `text | edit | source`.
///
/// The edit and source segments both hold `n_img` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLayout")]
pub struct SegmentLayout {
    n_text: usize,
    n_img: usize,
}

#[derive(Deserialize)]
struct RawLayout {
    n_text: usize,
    n_img: usize,
}

impl TryFrom<RawLayout> for SegmentLayout {
    type Error = GragError;

    fn try_from(raw: RawLayout) -> Result<Self> {
        SegmentLayout::new(raw.n_text, raw.n_img)
    }
}

impl SegmentLayout {
    pub fn new(n_text: usize, n_img: usize) -> Result<Self> {
        if n_text == 0 || n_img == 0 {
            return Err(GragError::config(format!(
                "segment layout needs n_text >= 1 and n_img >= 1, got ({n_text}, {n_img})"
            )));
        }
        Ok(Self { n_text, n_img })
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_img(&self) -> usize {
        self.n_img
    }

    /// Total sequence length `n_text + 2 * n_img`.
    pub fn total(&self) -> usize {
        self.n_text + 2 * self.n_img
    }

    pub fn text(&self) -> Range<usize> {
        0..self.n_text
    }

    pub fn edit(&self) -> Range<usize> {
        self.n_text..self.n_text + self.n_img
    }

    pub fn source(&self) -> Range<usize> {
        self.n_text + self.n_img..self.total()
    }

    pub fn range(&self, segment: Segment) -> Range<usize> {
        match segment {
            Segment::Text => self.text(),
            Segment::Edit => self.edit(),
            Segment::Source => self.source(),
        }
    }

    pub fn segment_of(&self, token: usize) -> Option<Segment> {
        Segment::ALL
            .into_iter()
            .find(|&s| self.range(s).contains(&token))
    }

    pub fn check_len(&self, seq_len: usize) -> Result<()> {
        if seq_len != self.total() {
            return Err(GragError::shape(format!(
                "sequence length {seq_len} does not match layout ({} text + 2 x {} image = {})",
                self.n_text,
                self.n_img,
                self.total()
            )));
        }
        Ok(())
    }

    /// Flat RoPE position of every token in the joint sequence.
    ///
    /// Text tokens take `0..n_text` (or all 0 when text rotation is off),
    /// edit tokens continue from `n_text`, and source tokens either repeat
    /// the edit positions or continue after them.
    pub fn positions(&self, rope: &RopeConfig) -> Vec<i64> {
        let mut pos = Vec::with_capacity(self.total());
        let text_rotated = rope.rotate_text;
        pos.extend(self.text().map(|p| if text_rotated { p as i64 } else { 0 }));
        pos.extend(self.edit().map(|p| p as i64));
        match rope.source_positions {
            SourcePositions::SharedWithEdit => pos.extend(self.edit().map(|p| p as i64)),
            SourcePositions::Sequential => pos.extend(self.source().map(|p| p as i64)),
        }
        pos
    }
}
