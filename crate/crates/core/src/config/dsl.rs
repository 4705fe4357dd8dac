use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    C,
    T,
    /// Convolution block with a time-embedding shift.
    CCond,
    /// Transformer block with cross-attention, RoPE and QK normalisation.
    TCond,
}

impl BlockKind {
    pub fn is_conv(self) -> bool {
        matches!(self, BlockKind::C | BlockKind::CCond)
    }

    pub fn is_attention(self) -> bool {
        !self.is_conv()
    }

    pub fn is_conditioned(self) -> bool {
        matches!(self, BlockKind::CCond | BlockKind::TCond)
    }

    pub fn conditioned(self) -> BlockKind {
        if self.is_conv() {
            BlockKind::CCond
        } else {
            BlockKind::TCond
        }
    }

    pub fn letter(self) -> char {
        if self.is_conv() {
            'C'
        } else {
            'T'
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::C => write!(f, "C"),
            BlockKind::T => write!(f, "T"),
            BlockKind::CCond => write!(f, "Ccond"),
            BlockKind::TCond => write!(f, "Tcond"),
        }
    }
}

pub type Layout = Vec<Vec<BlockKind>>;

fn parse_err(column: usize, message: impl Into<String>) -> Error {
    Error::Parse { column, message: message.into() }
}

/// Parses a dash-separated block string such as `CC-CCCT-CCTT-CTTT`.
/// Columns in errors are 1-based.
pub fn parse_layout(text: &str) -> Result<Layout> {
    if text.is_empty() {
        return Err(parse_err(1, "empty configuration string"));
    }
    let mut stages: Layout = vec![Vec::new()];
    for (i, ch) in text.chars().enumerate() {
        let column = i + 1;
        match ch.to_ascii_uppercase() {
            'C' => stages.last_mut().unwrap().push(BlockKind::C),
            'T' => stages.last_mut().unwrap().push(BlockKind::T),
            '-' => {
                if stages.last().unwrap().is_empty() {
                    return Err(parse_err(column, "empty stage before '-'"));
                }
                stages.push(Vec::new());
            }
            other => return Err(parse_err(column, format!("illegal character {other:?}; expected C, T or '-'"))),
        }
    }
    if stages.last().unwrap().is_empty() {
        return Err(parse_err(text.chars().count() + 1, "empty stage at end of string"));
    }
    Ok(stages)
}

pub fn render_stage(blocks: &[BlockKind]) -> String {
    blocks.iter().map(|b| b.letter()).collect()
}

pub fn render_layout(layout: &[Vec<BlockKind>]) -> String {
    layout.iter().map(|s| render_stage(s)).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

/// A layout is symmetric when every stage (a leading all-C stage aside)
/// holds equally many C and T blocks or only one kind.
pub fn classify_symmetry(layout: &[Vec<BlockKind>]) -> Symmetry {
    let skip = usize::from(layout.len() > 1 && layout[0].iter().all(|b| b.is_conv()));
    let symmetric = layout[skip..].iter().all(|stage| {
        let c = stage.iter().filter(|b| b.is_conv()).count();
        let t = stage.len() - c;
        c == t || c == 0 || t == 0
    });
    if symmetric {
        Symmetry::Symmetric
    } else {
        Symmetry::Asymmetric
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use BlockKind::{C, T};

    #[test]
    fn parses_c1() {
        assert_eq!(
            parse_layout("CC-CCCT-CCTT-CTTT").unwrap(),
            vec![vec![C, C], vec![C, C, C, T], vec![C, C, T, T], vec![C, T, T, T]]
        );
        assert_eq!(parse_layout("C").unwrap(), vec![vec![C]]);
        assert_eq!(parse_layout("cc-tTtT").unwrap(), vec![vec![C, C], vec![T, T, T, T]]);
    }

    #[test]
    fn errors_carry_columns() {
        let col = |s: &str| match parse_layout(s) {
            Err(Error::Parse { column, .. }) => column,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(col(""), 1);
        assert_eq!(col("CC-CXCT"), 5);
        assert_eq!(col("-CC"), 1);
        assert_eq!(col("CC--T"), 4);
        assert_eq!(col("CC-"), 4);
    }

    #[test]
    fn symmetry_labels() {
        let s = |x: &str| classify_symmetry(&parse_layout(x).unwrap());
        assert_eq!(s("CC-CCCT-CCTT-CTTT"), Symmetry::Asymmetric);
        assert_eq!(s("CC-CCTT-CCTT-CCTT"), Symmetry::Symmetric);
        assert_eq!(s("TTTT"), Symmetry::Symmetric);
        assert_eq!(s("CC-CCCC-CCCC-TTTT"), Symmetry::Symmetric);
    }
}
