use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Imaging channel. Each configured modality gets its own encoder branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Depth,
    Nir,
    Thermal,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Depth, Modality::Nir, Modality::Thermal];

    pub fn tag(self) -> char {
        match self {
            Modality::Rgb => 'r',
            Modality::Depth => 'd',
            Modality::Nir => 'n',
            Modality::Thermal => 't',
        }
    }

    pub fn from_tag(c: char) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.tag() == c)
            .ok_or_else(|| Error::Config(format!("unknown modality tag {c:?} (expected r, d, n or t)")))
    }

    /// Position in the canonical `r, d, n, t` order.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Parses `"r,d"` (commas optional: `"rd"` also works). Duplicates are
    /// rejected.
    pub fn parse_list(s: &str) -> Result<Vec<Modality>> {
        let mut out = Vec::new();
        for c in s.chars().filter(|c| !c.is_whitespace() && *c != ',') {
            let m = Modality::from_tag(c)?;
            if out.contains(&m) {
                return Err(Error::Config(format!("duplicate modality {c:?} in {s:?}")));
            }
            out.push(m);
        }
        if out.is_empty() {
            return Err(Error::Config("empty modality list".into()));
        }
        Ok(out)
    }

    pub fn list_string(ms: &[Modality]) -> String {
        ms.iter().map(|m| m.tag().to_string()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Modality::from_tag(c),
            _ => Err(Error::Config(format!("bad modality {s:?}"))),
        }
    }
}
