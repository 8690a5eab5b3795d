//! Synthetic task families.
//!
//! Every example is a length-32 sequence over a 32-token vocabulary with a
//! per-position target:
//!
//! - `copy`: the target at position `i` is the input at `i - 1` (position 0
//!   echoes itself), so the model has to look one token back.
//! - `modadd`: running sum of the inputs modulo the vocabulary size.
//! - `sortnext`: the input multiset in ascending order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const VOCAB: usize = 32;
pub const SEQ_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Copy,
    Modadd,
    Sortnext,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [TaskFamily::Copy, TaskFamily::Modadd, TaskFamily::Sortnext];

    pub fn targets(self, input: &[u32]) -> Vec<u32> {
        match self {
            TaskFamily::Copy => (0..input.len()).map(|i| input[i.saturating_sub(1)]).collect(),
            TaskFamily::Modadd => input
                .iter()
                .scan(0u32, |acc, &x| {
                    *acc = (*acc + x) % VOCAB as u32;
                    Some(*acc)
                })
                .collect(),
            TaskFamily::Sortnext => {
                let mut sorted = input.to_vec();
                sorted.sort_unstable();
                sorted
            }
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFamily::Copy => "copy",
            TaskFamily::Modadd => "modadd",
            TaskFamily::Sortnext => "sortnext",
        })
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskFamily::Copy),
            "modadd" => Ok(TaskFamily::Modadd),
            "sortnext" => Ok(TaskFamily::Sortnext),
            other => Err(Error::Value(format!("unknown task family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

pub fn make_dataset(family: TaskFamily, seed: u64, size: usize) -> Result<Vec<Example>> {
    if size == 0 {
        return Err(Error::Value("dataset size must be positive".into()));
    }
    let mut rng = SplitMix64::new(seed);
    Ok((0..size)
        .map(|_| {
            let input: Vec<u32> = (0..SEQ_LEN).map(|_| rng.below(VOCAB as u64) as u32).collect();
            let target = family.targets(&input);
            Example { input, target }
        })
        .collect())
}
