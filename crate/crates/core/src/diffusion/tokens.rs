//! Caption token ids over the closed vocabulary.

use crate::scene::{Caption, CaptionToken, PaletteColor, ShapeKind};

pub const NULL_TOKEN: usize = 0;
pub const PAD_TOKEN: usize = 1;
const COLOR_BASE: usize = 2;
const SHAPE_BASE: usize = COLOR_BASE + PaletteColor::ALL.len();
const ON_TOKEN: usize = SHAPE_BASE + ShapeKind::ALL.len();
pub const VOCAB_SIZE: usize = ON_TOKEN + 1;
pub const MAX_TOKENS: usize = 8;

/// Fixed-length token ids; positions past the caption hold `PAD_TOKEN`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CaptionTokens(pub [usize; MAX_TOKENS]);

impl CaptionTokens {
    pub fn encode(caption: &Caption) -> Self {
        let mut ids = [PAD_TOKEN; MAX_TOKENS];
        for (slot, tok) in ids.iter_mut().zip(caption.tokens()) {
            *slot = match tok {
                CaptionToken::Color(c) => COLOR_BASE + PaletteColor::ALL.iter().position(|x| x == c).expect("palette color"),
                CaptionToken::Shape(s) => SHAPE_BASE + ShapeKind::ALL.iter().position(|x| x == s).expect("shape kind"),
                CaptionToken::On => ON_TOKEN,
            };
        }
        Self(ids)
    }

    /// The unconditional sequence: one `NULL_TOKEN` followed by padding.
    pub fn null() -> Self {
        let mut ids = [PAD_TOKEN; MAX_TOKENS];
        ids[0] = NULL_TOKEN;
        Self(ids)
    }

    pub fn is_null(&self) -> bool {
        self.0[0] == NULL_TOKEN
    }

    /// `true` for positions attention may look at.
    pub fn key_mask(&self) -> [bool; MAX_TOKENS] {
        self.0.map(|id| id != PAD_TOKEN)
    }
}
