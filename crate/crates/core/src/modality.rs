use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One spectral channel of an aligned image triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Nir,
    Tir,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Nir, Modality::Tir];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Nir => 1,
            Modality::Tir => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Nir => "nir",
            Modality::Tir => "tir",
        }
    }

    pub fn others(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| *m != self)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "nir" => Ok(Modality::Nir),
            "tir" => Ok(Modality::Tir),
            other => Err(format!("unknown modality '{other}'")),
        }
    }
}

/// A fixed-size value per modality, indexed by [`Modality`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub rgb: T,
    pub nir: T,
    pub tir: T,
}

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        Self {
            rgb: f(Modality::Rgb),
            nir: f(Modality::Nir),
            tir: f(Modality::Tir),
        }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Nir => &self.nir,
            Modality::Tir => &self.tir,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Rgb => &mut self.rgb,
            Modality::Nir => &mut self.nir,
            Modality::Tir => &mut self.tir,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL.into_iter().map(move |m| (m, self.get(m)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, self.get(m)))
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Modality) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            rgb: f(Modality::Rgb)?,
            nir: f(Modality::Nir)?,
            tir: f(Modality::Tir)?,
        })
    }
}
