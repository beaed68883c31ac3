use serde::{Deserialize, Serialize};

/// Which modality an image belongs to.
///
/// `Source` images are angiography-like (bright, thicker vessels); `Target`
/// images are venography-like (dark, thinner vessels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn flip(self) -> Self {
        match self {
            DomainLabel::Source => DomainLabel::Target,
            DomainLabel::Target => DomainLabel::Source,
        }
    }

    /// Constant value of the encoder's conditioning channel.
    pub fn channel_value(self) -> f64 {
        match self {
            DomainLabel::Source => -1.0,
            DomainLabel::Target => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainLabel::Source => "source",
            DomainLabel::Target => "target",
        }
    }
}
