use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::MetricKind;

/// First-stage training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage1Method {
    /// Plain cross-entropy.
    Ce,
    /// Cross-entropy with class-balanced re-sampling.
    Rs,
    /// Class-weighted cross-entropy.
    Rw,
    /// Cross-entropy with deferred re-weighting.
    CeDrw,
    Focal,
    CbFocal,
    Ldam,
    LdamDrw,
    Mixup,
    /// Cross-entropy plus center loss.
    CeCt,
    /// Cross-entropy plus triplet loss.
    CeTp,
    /// Cross-entropy plus supervised contrastive loss.
    CeSc,
    /// Supervised contrastive loss alone.
    Sc,
}

impl Stage1Method {
    pub const ALL: [Stage1Method; 13] = [
        Stage1Method::Ce,
        Stage1Method::Rs,
        Stage1Method::Rw,
        Stage1Method::CeDrw,
        Stage1Method::Focal,
        Stage1Method::CbFocal,
        Stage1Method::Ldam,
        Stage1Method::LdamDrw,
        Stage1Method::Mixup,
        Stage1Method::CeCt,
        Stage1Method::CeTp,
        Stage1Method::CeSc,
        Stage1Method::Sc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage1Method::Ce => "CE",
            Stage1Method::Rs => "RS",
            Stage1Method::Rw => "RW",
            Stage1Method::CeDrw => "CE-DRW",
            Stage1Method::Focal => "Focal",
            Stage1Method::CbFocal => "CB-Focal",
            Stage1Method::Ldam => "LDAM",
            Stage1Method::LdamDrw => "LDAM-DRW",
            Stage1Method::Mixup => "Mixup",
            Stage1Method::CeCt => "CE+CT",
            Stage1Method::CeTp => "CE+TP",
            Stage1Method::CeSc => "CE+SC",
            Stage1Method::Sc => "SC",
        }
    }

    /// The metric loss this method adds, if any.
    pub fn metric(self) -> Option<MetricKind> {
        match self {
            Stage1Method::CeCt => Some(MetricKind::Center),
            Stage1Method::CeTp => Some(MetricKind::Triplet),
            Stage1Method::CeSc | Stage1Method::Sc => Some(MetricKind::Supcon),
            _ => None,
        }
    }

    /// False only for the metric-only recipe, which leaves the classifier
    /// head untouched in stage 1.
    pub fn uses_cross_entropy(self) -> bool {
        self != Stage1Method::Sc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage2Kind {
    /// Classifier re-training with a re-weighted loss.
    #[serde(rename = "cRW")]
    Crw,
    /// Classifier re-training with class-balanced re-sampling.
    #[serde(rename = "cRS")]
    Crs,
}

impl Stage2Kind {
    pub fn tag(self) -> &'static str {
        match self {
            Stage2Kind::Crw => "cRW",
            Stage2Kind::Crs => "cRS",
        }
    }
}

/// A method tag such as `CE`, `LDAM-DRW` or `CE+SC→cRW`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Method {
    pub stage1: Stage1Method,
    pub stage2: Option<Stage2Kind>,
}

impl Method {
    pub fn one_stage(stage1: Stage1Method) -> Self {
        Self {
            stage1,
            stage2: None,
        }
    }

    pub fn two_stage(stage1: Stage1Method, stage2: Stage2Kind) -> Self {
        Self {
            stage1,
            stage2: Some(stage2),
        }
    }

    pub fn valid_tags() -> String {
        let base: Vec<&str> = Stage1Method::ALL.iter().map(|m| m.tag()).collect();
        format!("{} (optionally followed by →cRW or →cRS)", base.join(", "))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.stage1.tag())?;
        if let Some(s2) = self.stage2 {
            write!(f, "→{}", s2.tag())?;
        }
        Ok(())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts `→` or `->` between the stages; case-sensitive.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || {
            Error::invalid(format!(
                "unknown method tag `{s}`; valid tags: {}",
                Method::valid_tags()
            ))
        };
        let normalized = s.replace("->", "→");
        let (first, second) = match normalized.split_once('→') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (normalized.trim(), None),
        };
        let stage1 = Stage1Method::ALL
            .into_iter()
            .find(|m| m.tag() == first)
            .ok_or_else(unknown)?;
        let stage2 = match second {
            None => None,
            Some("cRW") => Some(Stage2Kind::Crw),
            Some("cRS") => Some(Stage2Kind::Crs),
            Some(_) => return Err(unknown()),
        };
        Ok(Self { stage1, stage2 })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
