//! Class balancing and stratified train/validation/test splitting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{uniform_mode, FeatureMode, LabeledSample, MaterialClass};
use crate::error::{write_file, Error, Result};
use crate::features::write_feature_csv;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::domain("split fractions must be positive"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

fn class_rng(seed: u64, class: MaterialClass) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class.index() as u64 + 1);
    rng
}

fn indices_by_class<'a>(labels: impl Iterator<Item = &'a MaterialClass>) -> BTreeMap<MaterialClass, Vec<usize>> {
    let mut by_class: BTreeMap<MaterialClass, Vec<usize>> = BTreeMap::new();
    for (i, c) in labels.enumerate() {
        by_class.entry(*c).or_default().push(i);
    }
    by_class
}

/// Downsamples every class to the size of the smallest one.
///
/// Survivors are chosen uniformly per class with a seeded shuffle and keep
/// their original relative order. Every class in `classes` must be present
/// and no sample may carry a label outside it.
pub fn balance_classes(samples: Vec<LabeledSample>, classes: &[MaterialClass], seed: u64) -> Result<Vec<LabeledSample>> {
    let by_class = indices_by_class(samples.iter().map(|s| &s.label));
    if let Some(extra) = by_class.keys().find(|c| !classes.contains(c)) {
        return Err(Error::domain(format!("sample labeled {extra} is outside the class set")));
    }
    let mut min = usize::MAX;
    for c in classes {
        let n = by_class.get(c).map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::domain(format!("class {c} has no samples")));
        }
        min = min.min(n);
    }
    let mut keep = vec![false; samples.len()];
    for (c, idx) in &by_class {
        let mut idx = idx.clone();
        idx.shuffle(&mut class_rng(seed, *c));
        for &i in &idx[..min] {
            keep[i] = true;
        }
    }
    Ok(samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect())
}

/// Splits `n` items by `fractions` using largest-remainder rounding.
/// Equal remainders favor the earlier split.
pub fn apportion(n: usize, fractions: &SplitFractions) -> [usize; 3] {
    let quotas = fractions.as_array().map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Positions of the samples assigned to each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each class is shuffled on its own and apportioned.
pub fn split_indices(labels: &[MaterialClass], fractions: &SplitFractions, seed: u64) -> Result<SplitIndices> {
    fractions.validate()?;
    let mut out = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (c, mut idx) in indices_by_class(labels.iter()) {
        if idx.len() < 3 {
            return Err(Error::domain(format!(
                "class {c} has {} samples; at least 3 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut class_rng(seed, c));
        let [a, b, _] = apportion(idx.len(), fractions);
        out.train.extend_from_slice(&idx[..a]);
        out.validation.extend_from_slice(&idx[a..a + b]);
        out.test.extend_from_slice(&idx[a + b..]);
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub fractions: SplitFractions,
    pub seed: u64,
}

pub fn split(samples: &[LabeledSample], fractions: &SplitFractions, seed: u64) -> Result<SplitDataset> {
    uniform_mode(samples)?;
    let labels: Vec<MaterialClass> = samples.iter().map(|s| s.label).collect();
    let idx = split_indices(&labels, fractions, seed)?;
    let take = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok(SplitDataset {
        train: take(&idx.train),
        validation: take(&idx.validation),
        test: take(&idx.test),
        fractions: *fractions,
        seed,
    })
}

/// Metadata stored next to the split CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub feature_mode: FeatureMode,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitDataset {
    /// Writes `train.csv`, `validation.csv`, `test.csv` and `split.json` into `dir`.
    pub fn save(&self, dir: &Path, mode: FeatureMode) -> Result<()> {
        for (name, part) in [
            ("train.csv", &self.train),
            ("validation.csv", &self.validation),
            ("test.csv", &self.test),
        ] {
            let mut buf = Vec::new();
            write_feature_csv(part, mode, &mut buf)?;
            write_file(&dir.join(name), buf)?;
        }
        let manifest = SplitManifest {
            seed: self.seed,
            fractions: self.fractions,
            feature_mode: mode,
            train: self.train.len(),
            validation: self.validation.len(),
            test: self.test.len(),
        };
        write_file(&dir.join("split.json"), serde_json::to_string_pretty(&manifest)?)
    }
}
