//! Corpus types: binary-labeled articles grouped into train/val/test splits.
//!
//! Labels follow the 0 = fake, 1 = real convention on the wire (JSON) while
//! staying a proper enum in code.

use alloc::string::String;
use alloc::vec::Vec;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Article veracity. Serialized as the integer 0 (fake) / 1 (real).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Veracity {
    Fake,
    Real,
}

impl Veracity {
    pub fn as_u8(self) -> u8 {
        match self {
            Veracity::Fake => 0,
            Veracity::Real => 1,
        }
    }

    pub fn from_u8(value: u8) -> Result<Self, String> {
        match value {
            0 => Ok(Veracity::Fake),
            1 => Ok(Veracity::Real),
            other => Err(alloc::format!("label domain: {other} is not 0 or 1")),
        }
    }
}

impl Serialize for Veracity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Veracity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = u8::deserialize(deserializer)?;
        Veracity::from_u8(value).map_err(D::Error::custom)
    }
}

/// One article with a stable id and a veracity label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledArticle {
    pub id: String,
    pub text: String,
    pub label: Veracity,
}

/// Split identity within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl core::fmt::Display for SplitName {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(alloc::format!("unknown split name: {other}")),
        }
    }
}

/// One named split with its articles. Ids must be unique within a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub articles: Vec<LabeledArticle>,
}

impl DatasetSplit {
    /// `(fake, real)` article counts.
    pub fn counts(&self) -> (usize, usize) {
        let fake = self
            .articles
            .iter()
            .filter(|a| a.label == Veracity::Fake)
            .count();
        (fake, self.articles.len() - fake)
    }

    /// Returns the first duplicated id, if any.
    pub fn duplicate_id(&self) -> Option<&str> {
        let mut seen: Vec<&str> = self.articles.iter().map(|a| a.id.as_str()).collect();
        seen.sort_unstable();
        seen.windows(2)
            .find(|pair| pair[0] == pair[1])
            .map(|pair| pair[0])
    }
}
