use super::TilestoreError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// A physical sensor band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Thermal,
    Rgb,
    Lidar,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Thermal, Band::Rgb, Band::Lidar];

    pub fn channels(self) -> usize {
        match self {
            Band::Rgb => 3,
            Band::Thermal | Band::Lidar => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Thermal => "thermal",
            Band::Rgb => "rgb",
            Band::Lidar => "lidar",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Band::Thermal => 1,
            Band::Rgb => 2,
            Band::Lidar => 4,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = TilestoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "thermal" | "t" => Ok(Band::Thermal),
            "rgb" | "r" => Ok(Band::Rgb),
            "lidar" | "l" => Ok(Band::Lidar),
            other => Err(TilestoreError::UnknownModality(other.to_string())),
        }
    }
}

/// A non-empty set of bands. A single band is a raw modality; two or more
/// name a fused modality such as `thermal+rgb`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Modality(u8);

impl Modality {
    pub const THERMAL: Modality = Modality(1);
    pub const RGB: Modality = Modality(2);
    pub const LIDAR: Modality = Modality(4);

    pub fn single(band: Band) -> Self {
        Modality(band.bit())
    }

    pub fn from_bands(bands: &[Band]) -> Option<Self> {
        let bits = bands.iter().fold(0u8, |acc, b| acc | b.bit());
        (bits != 0).then_some(Modality(bits))
    }

    /// Bands in canonical order (thermal, rgb, lidar).
    pub fn bands(self) -> Vec<Band> {
        Band::ALL
            .into_iter()
            .filter(|b| self.0 & b.bit() != 0)
            .collect()
    }

    pub fn contains(self, band: Band) -> bool {
        self.0 & band.bit() != 0
    }

    pub fn is_fused(self) -> bool {
        self.0.count_ones() > 1
    }

    /// File-name safe form (`thermal_rgb`).
    pub fn file_stem(self) -> String {
        self.bands()
            .iter()
            .map(|b| b.name())
            .collect::<Vec<_>>()
            .join("_")
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.bands().iter().map(|b| b.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl fmt::Debug for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Modality({self})")
    }
}

impl FromStr for Modality {
    type Err = TilestoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bands = s
            .split(['+', '_'])
            .filter(|p| !p.trim().is_empty())
            .map(Band::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Modality::from_bands(&bands).ok_or_else(|| TilestoreError::UnknownModality(s.to_string()))
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
