//! Seeded train/validation/test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Relative sizes of the train, validation and test parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SplitRatios(pub [u32; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([6, 3, 1])
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = String;

    /// Parses `"6:3:1"`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("split ratios must look like 6:3:1, got `{s}`"));
        }
        let mut r = [0u32; 3];
        for (slot, p) in r.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| format!("bad ratio component `{p}` in `{s}`"))?;
        }
        if r.iter().any(|&v| v == 0) {
            return Err(format!("every ratio component must be >= 1, got `{s}`"));
        }
        Ok(SplitRatios(r))
    }
}

impl TryFrom<String> for SplitRatios {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<SplitRatios> for String {
    fn from(r: SplitRatios) -> Self {
        format!("{}:{}:{}", r.0[0], r.0[1], r.0[2])
    }
}

/// Part sizes by largest-remainder rounding; remainder ties go to the earlier part.
pub fn split_sizes(n: usize, ratios: SplitRatios) -> [usize; 3] {
    let total: u64 = ratios.0.iter().map(|&r| r as u64).sum();
    let mut sizes = [0usize; 3];
    let mut rems = [(0u64, 0usize); 3];
    for i in 0..3 {
        let exact = n as u64 * ratios.0[i] as u64;
        sizes[i] = (exact / total) as usize;
        rems[i] = (exact % total, i);
    }
    let short = n - sizes.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it into contiguous parts.
pub fn split_dataset(n: usize, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let sizes = split_sizes(n, ratios);
    if sizes.contains(&0) {
        return invalid(format!("{n} items cannot fill a {}:{}:{} split", ratios.0[0], ratios.0[1], ratios.0[2]));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let validation = idx.split_off(sizes[0]);
    Ok(DatasetSplit { train: idx, validation, test })
}
