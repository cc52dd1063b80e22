use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "T",
            Modality::Audio => "A",
            Modality::Visual => "V",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T" => Ok(Modality::Text),
            "A" => Ok(Modality::Audio),
            "V" => Ok(Modality::Visual),
            other => Err(format!("unknown modality {other:?} (expected T, A or V)")),
        }
    }
}

/// One value per modality, indexed by [`Modality`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct PerModality<T>(pub [T; 3]);

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        PerModality([
            f(Modality::Text),
            f(Modality::Audio),
            f(Modality::Visual),
        ])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, &self[m]))
    }
}

impl<T> std::ops::Index<Modality> for PerModality<T> {
    type Output = T;
    fn index(&self, m: Modality) -> &T {
        &self.0[m.index()]
    }
}

impl<T> std::ops::IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        &mut self.0[m.index()]
    }
}
