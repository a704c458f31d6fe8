//! Reference oversamplers on flattened pixel vectors: random oversampling,
//! SMOTE and ADASYN. Each tops every class up to the largest class count.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k_neighbors: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            seed: 0,
        }
    }
}

/// How a synthetic row was made: `base + gap·(neighbor − base)`, with
/// indices into the input set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOrigin {
    pub base: usize,
    pub neighbor: usize,
    pub gap: f64,
}

/// Oversampled set and the origin of every appended row.
#[derive(Debug, Clone)]
pub struct Oversampled {
    pub set: LabeledImageSet,
    pub origins: Vec<SyntheticOrigin>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` candidates closest to `query` (itself excluded), nearest first;
/// equal distances are ordered by index.
pub fn nearest_neighbors(data: &Array2<f64>, query: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let q = data.row(query);
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&c| c != query)
        .map(|&c| (sq_dist(q, data.row(c)), c))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, c)| c).collect()
}

/// Splits `total` proportionally to `weights` so the parts sum exactly to
/// `total`; leftover units go to the largest fractional parts, lower index
/// first on ties.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

struct Builder<'a> {
    train: &'a LabeledImageSet,
    rows: Vec<Array1<f64>>,
    labels: Vec<usize>,
    origins: Vec<SyntheticOrigin>,
}

impl<'a> Builder<'a> {
    fn new(train: &'a LabeledImageSet) -> Self {
        Self {
            train,
            rows: Vec::new(),
            labels: Vec::new(),
            origins: Vec::new(),
        }
    }

    fn push(&mut self, base: usize, neighbor: usize, gap: f64) {
        let b = self.train.image(base);
        let n = self.train.image(neighbor);
        let row = if base == neighbor || gap == 0.0 {
            b.to_owned()
        } else {
            ndarray::Zip::from(&b)
                .and(&n)
                .map_collect(|&x, &y| (x + gap * (y - x)).clamp(0.0, 1.0))
        };
        self.rows.push(row);
        self.labels.push(self.train.labels()[base]);
        self.origins.push(SyntheticOrigin { base, neighbor, gap });
    }

    fn duplicate_random<R: Rng>(&mut self, members: &[usize], count: usize, rng: &mut R) {
        for _ in 0..count {
            let i = members[rng.random_range(0..members.len())];
            self.push(i, i, 0.0);
        }
    }

    fn finish(self) -> Result<Oversampled> {
        let pixels = self.train.shape().pixels();
        let mut images = Array2::zeros((self.rows.len(), pixels));
        for (mut dst, src) in images.rows_mut().into_iter().zip(&self.rows) {
            dst.assign(src);
        }
        let synthetic = LabeledImageSet::new(
            images,
            self.labels,
            self.train.shape(),
            self.train.class_count(),
        )?;
        Ok(Oversampled {
            set: self.train.concat(&synthetic)?,
            origins: self.origins,
        })
    }
}

/// `(class, members, deficit)` for every class below the largest count.
fn deficits(train: &LabeledImageSet) -> Result<Vec<(usize, Vec<usize>, usize)>> {
    let counts = train.counts_per_class();
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    for (class, &count) in counts.iter().enumerate() {
        if count < target {
            if count == 0 {
                return Err(Error::Data(format!(
                    "class {class} has no samples to oversample from"
                )));
            }
            out.push((class, train.class_indices(class), target - count));
        }
    }
    Ok(out)
}

/// Random oversampling: duplicates uniformly chosen members.
pub fn ros(train: &LabeledImageSet, cfg: &SamplerConfig) -> Result<LabeledImageSet> {
    Ok(ros_traced(train, cfg)?.set)
}

pub fn ros_traced(train: &LabeledImageSet, cfg: &SamplerConfig) -> Result<Oversampled> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut builder = Builder::new(train);
    for (_, members, need) in deficits(train)? {
        builder.duplicate_random(&members, need, &mut rng);
    }
    builder.finish()
}

fn check_k(cfg: &SamplerConfig) -> Result<()> {
    if cfg.k_neighbors == 0 {
        return Err(Error::Config("k_neighbors must be at least 1".into()));
    }
    Ok(())
}

pub fn smote(train: &LabeledImageSet, cfg: &SamplerConfig) -> Result<LabeledImageSet> {
    Ok(smote_traced(train, cfg)?.set)
}

/// SMOTE: interpolate between a random member and one of its `k` nearest
/// same-class neighbors. Classes with at most `k` members are duplicated
/// instead.
pub fn smote_traced(train: &LabeledImageSet, cfg: &SamplerConfig) -> Result<Oversampled> {
    check_k(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut builder = Builder::new(train);
    let k = cfg.k_neighbors;
    for (class, members, need) in deficits(train)? {
        if members.len() <= k {
            warn!(
                "smote: class {class} has {} members, not more than k = {k}; using random oversampling",
                members.len()
            );
            builder.duplicate_random(&members, need, &mut rng);
            continue;
        }
        let neighbors: Vec<Vec<usize>> = members
            .iter()
            .map(|&m| nearest_neighbors(train.images(), m, &members, k))
            .collect();
        for _ in 0..need {
            let slot = rng.random_range(0..members.len());
            let nn = neighbors[slot][rng.random_range(0..k)];
            let gap: f64 = rng.random();
            builder.push(members[slot], nn, gap);
        }
    }
    builder.finish()
}

/// Share of other-class points among each member's `k` nearest neighbors in
/// the whole set.
pub fn adasyn_difficulty(train: &LabeledImageSet, class: usize, k: usize) -> Vec<f64> {
    let all: Vec<usize> = (0..train.len()).collect();
    train
        .class_indices(class)
        .into_iter()
        .map(|m| {
            let nn = nearest_neighbors(train.images(), m, &all, k);
            let others = nn.iter().filter(|&&i| train.labels()[i] != class).count();
            others as f64 / k as f64
        })
        .collect()
}

/// Per-member synthesis budget for `class`: `need` split in proportion to
/// the normalized difficulty, or uniformly when every difficulty is zero.
pub fn adasyn_budgets(train: &LabeledImageSet, class: usize, k: usize, need: usize) -> Vec<usize> {
    let difficulty = adasyn_difficulty(train, class, k);
    if difficulty.iter().all(|&r| r == 0.0) {
        warn!("adasyn: class {class} has no difficult members; apportioning uniformly");
        return largest_remainder(need, &vec![1.0; difficulty.len()]);
    }
    largest_remainder(need, &difficulty)
}

pub fn adasyn(train: &LabeledImageSet, cfg: &SamplerConfig) -> Result<LabeledImageSet> {
    Ok(adasyn_traced(train, cfg)?.set)
}

/// ADASYN: like SMOTE, but members with more other-class neighbors receive
/// a larger share of the synthesis budget.
pub fn adasyn_traced(train: &LabeledImageSet, cfg: &SamplerConfig) -> Result<Oversampled> {
    check_k(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut builder = Builder::new(train);
    let k = cfg.k_neighbors;
    for (class, members, need) in deficits(train)? {
        if members.len() <= k {
            warn!(
                "adasyn: class {class} has {} members, not more than k = {k}; using random oversampling",
                members.len()
            );
            builder.duplicate_random(&members, need, &mut rng);
            continue;
        }
        let budgets = adasyn_budgets(train, class, k, need);
        for (&m, &budget) in members.iter().zip(&budgets) {
            if budget == 0 {
                continue;
            }
            let nn = nearest_neighbors(train.images(), m, &members, k);
            for _ in 0..budget {
                let neighbor = nn[rng.random_range(0..k)];
                let gap: f64 = rng.random();
                builder.push(m, neighbor, gap);
            }
        }
    }
    builder.finish()
}
