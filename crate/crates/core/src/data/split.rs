use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.2, 0.1];

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partition sizes for `n` items: floors of `n * ratio`, with the leftover
/// items handed one each to the largest fractional parts (earlier partition on ties).
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    Ok(counts)
}

/// Seeded shuffle followed by contiguous slicing into train/val/test.
pub fn split_dataset(ids: &[String], seed: u64, ratios: [f64; 3]) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    let [a, b, _] = split_counts(ids.len(), ratios)?;
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(a + b);
    let val = shuffled.split_off(a);
    Ok(SplitManifest {
        seed,
        ratios,
        train: shuffled,
        val,
        test,
    })
}

impl SplitManifest {
    pub fn part(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "ratios = {} {} {}", self.ratios[0], self.ratios[1], self.ratios[2]);
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = writeln!(s, "[{name}]");
            for id in ids {
                let _ = writeln!(s, "{id}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut ratios = None;
        let mut parts: [Vec<String>; 3] = Default::default();
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match name {
                    "train" => 0,
                    "val" => 1,
                    "test" => 2,
                    other => return Err(err(format!("unknown section [{other}]"))),
                });
                continue;
            }
            match current {
                Some(k) => parts[k].push(line.to_string()),
                None => {
                    let (key, value) = line
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
                    match key.trim() {
                        "seed" => seed = Some(value.trim().parse().map_err(|_| err("bad seed".into()))?),
                        "ratios" => {
                            let r: Vec<f64> = value
                                .split_whitespace()
                                .map(|v| v.parse())
                                .collect::<std::result::Result<_, _>>()
                                .map_err(|_| err("bad ratios".into()))?;
                            let r: [f64; 3] = r.try_into().map_err(|_| err("expected three ratios".into()))?;
                            ratios = Some(r);
                        }
                        other => return Err(err(format!("unknown key {other:?}"))),
                    }
                }
            }
        }
        let [train, val, test] = parts;
        Ok(Self {
            seed: seed.ok_or_else(|| Error::Data("manifest lacks a seed".into()))?,
            ratios: ratios.ok_or_else(|| Error::Data("manifest lacks ratios".into()))?,
            train,
            val,
            test,
        })
    }
}
