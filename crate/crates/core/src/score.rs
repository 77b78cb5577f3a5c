use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Three-way drawing score. The index mapping (0, 1, 2) is used for logits,
/// confusion matrices and noise-channel rows everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Correct,
    PartiallyCorrect,
    Incorrect,
}

impl Score {
    pub const ALL: [Score; 3] = [Score::Correct, Score::PartiallyCorrect, Score::Incorrect];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Score::Correct => 0,
            Score::PartiallyCorrect => 1,
            Score::Incorrect => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Score> {
        Score::ALL.get(i).copied()
    }

    /// Wire name used by the service and the record files.
    pub fn as_str(self) -> &'static str {
        match self {
            Score::Correct => "correct",
            Score::PartiallyCorrect => "partially_correct",
            Score::Incorrect => "incorrect",
        }
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown score `{0}`")]
pub struct ParseScoreError(String);

impl FromStr for Score {
    type Err = ParseScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correct" | "0" => Ok(Score::Correct),
            "partially_correct" | "partial" | "1" => Ok(Score::PartiallyCorrect),
            "incorrect" | "2" => Ok(Score::Incorrect),
            other => Err(ParseScoreError(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        for s in Score::ALL {
            assert_eq!(Score::from_index(s.index()), Some(s));
            assert_eq!(s.as_str().parse::<Score>().unwrap(), s);
        }
        assert_eq!(Score::from_index(3), None);
    }

    #[test]
    fn serde_uses_wire_names() {
        let json = serde_json::to_string(&Score::PartiallyCorrect).unwrap();
        assert_eq!(json, "\"partially_correct\"");
    }
}
