//! Canonical key-value view of PMU data shared by VOs, CVOs and applications.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::codec::DataFrame;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("unknown field key {0:?}")]
    Unknown(String),
    #[error("malformed key-value line {0:?}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Re,
    Im,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FieldKey {
    Idcode,
    Soc,
    Fracsec,
    /// Frequency deviation, mHz.
    Freq,
    /// Hz/s.
    Rocof,
    Phasor(usize, Part),
}

impl FieldKey {
    /// Value of this field in the first block of `f`.
    pub fn value_in(self, f: &DataFrame) -> Option<f64> {
        let block = f.blocks.first()?;
        Some(match self {
            FieldKey::Idcode => f64::from(f.idcode),
            FieldKey::Soc => f64::from(f.timestamp.soc),
            FieldKey::Fracsec => f64::from(f.timestamp.fracsec),
            FieldKey::Freq => block.freq_dev,
            FieldKey::Rocof => block.rocof,
            FieldKey::Phasor(k, part) => {
                let p = block.phasors.get(k)?;
                match part {
                    Part::Re => p.re,
                    Part::Im => p.im,
                }
            }
        })
    }

    /// Identity fields come from the newest frame when averaging.
    pub fn is_header(self) -> bool {
        matches!(self, FieldKey::Idcode | FieldKey::Soc | FieldKey::Fracsec)
    }

    /// Every key present in a frame with `n_phasors` channels.
    pub fn all(n_phasors: usize) -> Vec<FieldKey> {
        let mut keys = vec![
            FieldKey::Idcode,
            FieldKey::Soc,
            FieldKey::Fracsec,
            FieldKey::Freq,
            FieldKey::Rocof,
        ];
        for k in 0..n_phasors {
            keys.push(FieldKey::Phasor(k, Part::Re));
            keys.push(FieldKey::Phasor(k, Part::Im));
        }
        keys
    }
}

impl fmt::Display for FieldKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKey::Idcode => f.write_str("idcode"),
            FieldKey::Soc => f.write_str("soc"),
            FieldKey::Fracsec => f.write_str("fracsec"),
            FieldKey::Freq => f.write_str("freq"),
            FieldKey::Rocof => f.write_str("rocof"),
            FieldKey::Phasor(k, Part::Re) => write!(f, "phasor.{k}.re"),
            FieldKey::Phasor(k, Part::Im) => write!(f, "phasor.{k}.im"),
        }
    }
}

impl FromStr for FieldKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "idcode" => FieldKey::Idcode,
            "soc" => FieldKey::Soc,
            "fracsec" => FieldKey::Fracsec,
            "freq" => FieldKey::Freq,
            "rocof" => FieldKey::Rocof,
            other => {
                let mut it = other.split('.');
                match (it.next(), it.next(), it.next(), it.next()) {
                    (Some("phasor"), Some(k), Some(part), None) => {
                        let k = k
                            .parse()
                            .map_err(|_| KeyError::Unknown(other.to_string()))?;
                        let part = match part {
                            "re" => Part::Re,
                            "im" => Part::Im,
                            _ => return Err(KeyError::Unknown(other.to_string())),
                        };
                        FieldKey::Phasor(k, part)
                    }
                    _ => return Err(KeyError::Unknown(other.to_string())),
                }
            }
        })
    }
}

/// Parses a comma-separated field list such as `freq,rocof,phasor.0.re`.
pub fn parse_selector(s: &str) -> Result<Vec<FieldKey>, KeyError> {
    s.split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(str::parse)
        .collect()
}

pub fn selector_to_string(sel: &[FieldKey]) -> String {
    sel.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Flat map of canonical keys to numbers; on the wire one `key=value` per line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyValueRecord(pub BTreeMap<FieldKey, f64>);

impl KeyValueRecord {
    pub fn get(&self, key: FieldKey) -> Option<f64> {
        self.0.get(&key).copied()
    }

    /// Selected fields of the first block of `f`; unknown phasor indices yield `None`.
    pub fn project(f: &DataFrame, selector: &[FieldKey]) -> Option<Self> {
        let keys: Vec<FieldKey> = if selector.is_empty() {
            FieldKey::all(f.blocks.first().map_or(0, |b| b.phasors.len()))
        } else {
            selector.to_vec()
        };
        let mut map = BTreeMap::new();
        for key in keys {
            map.insert(key, key.value_in(f)?);
        }
        Some(Self(map))
    }

    pub fn to_document(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_document(doc: &str) -> Result<Self, KeyError> {
        let mut map = BTreeMap::new();
        for line in doc.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| KeyError::Malformed(line.to_string()))?;
            let v: f64 = v
                .parse()
                .map_err(|_| KeyError::Malformed(line.to_string()))?;
            map.insert(k.parse()?, v);
        }
        Ok(Self(map))
    }
}
