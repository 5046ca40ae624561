//! Reference plants, their controllers and desired trajectories.

pub mod dubins;
pub mod quadrotor;
pub mod so3;
pub mod trajectory;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TuneError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Dubins,
    Quadrotor,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Dubins => "dubins",
            SystemKind::Quadrotor => "quadrotor",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = TuneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dubins" => Ok(SystemKind::Dubins),
            "quadrotor" => Ok(SystemKind::Quadrotor),
            other => Err(TuneError::Config(format!("unknown system {other:?}"))),
        }
    }
}
