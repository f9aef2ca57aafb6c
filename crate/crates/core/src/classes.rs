//! Command classes shared by the audio and image modalities, and the
//! five-way classification target.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandClass {
    Go,
    Right,
    Left,
    Stop,
}

impl CommandClass {
    pub const ALL: [CommandClass; 4] = [
        CommandClass::Go,
        CommandClass::Right,
        CommandClass::Left,
        CommandClass::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CommandClass::Go => "go",
            CommandClass::Right => "right",
            CommandClass::Left => "left",
            CommandClass::Stop => "stop",
        }
    }
}

impl fmt::Display for CommandClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CommandClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command class `{s}`")))
    }
}

/// Classifier target: one of the four matched commands, or a mismatched
/// (attack) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Command(CommandClass),
    Anomaly,
}

pub const N_TARGETS: usize = 5;
pub const ANOMALY_INDEX: usize = 4;

impl Target {
    pub const ALL: [Target; N_TARGETS] = [
        Target::Command(CommandClass::Go),
        Target::Command(CommandClass::Right),
        Target::Command(CommandClass::Left),
        Target::Command(CommandClass::Stop),
        Target::Anomaly,
    ];

    pub fn index(self) -> usize {
        match self {
            Target::Command(c) => c.index(),
            Target::Anomaly => ANOMALY_INDEX,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Command(c) => c.name(),
            Target::Anomaly => "anomaly",
        }
    }

    pub fn is_anomaly(self) -> bool {
        matches!(self, Target::Anomaly)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "anomaly" {
            Ok(Target::Anomaly)
        } else {
            s.parse().map(Target::Command)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_round_trip() {
        for (i, t) in Target::ALL.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(Target::from_index(i), Some(*t));
            assert_eq!(t.name().parse::<Target>().unwrap(), *t);
        }
        assert!("yes".parse::<CommandClass>().is_err());
    }
}
