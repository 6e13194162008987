//! Preference datasets: sampling from a ground-truth population, agreement
//! filtering, relabeling, and the JSONL on-disk format.
//!
//! A record `(x, y1, y2, o)` has `o = 1` iff `y2` was preferred.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preference::{Link, RewardTable, SamplingDistribution, UserPopulation};
use crate::scalar::Real;

pub const FORMAT_VERSION: &str = "hetpref-v1";

/// Attempts allowed per record before consensus sampling gives up.
pub const DEFAULT_CONSENSUS_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnonymousSample {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
    pub o: u8,
}

impl AnonymousSample {
    /// `(loser, winner)` of the comparison.
    #[inline]
    pub fn loser_winner(&self) -> (usize, usize) {
        if self.o == 1 {
            (self.y1, self.y2)
        } else {
            (self.y2, self.y1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedSample {
    pub first: AnonymousSample,
    pub second: AnonymousSample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullAnnotationSample {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
    pub o_vec: Vec<u8>,
}

impl FullAnnotationSample {
    /// `Some(label)` when every type agrees.
    pub fn consensus(&self) -> Option<u8> {
        let first = *self.o_vec.first()?;
        self.o_vec.iter().all(|&o| o == first).then_some(first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Anonymous,
    Paired,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullMode {
    #[default]
    Vector,
    Consensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelabelMode {
    #[default]
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub kind: DatasetKind,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Records {
    Anonymous(Vec<AnonymousSample>),
    Paired(Vec<PairedSample>),
    Full(Vec<FullAnnotationSample>),
}

impl Records {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Records::Anonymous(_) => DatasetKind::Anonymous,
            Records::Paired(_) => DatasetKind::Paired,
            Records::Full(_) => DatasetKind::Full,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Records::Anonymous(v) => v.len(),
            Records::Paired(v) => v.len(),
            Records::Full(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dataset together with its header line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Records,
}

impl DatasetFile {
    pub fn new(seed: u64, config_hash: String, records: Records) -> Self {
        Self {
            header: DatasetHeader {
                format: FORMAT_VERSION.to_string(),
                kind: records.kind(),
                seed,
                config_hash,
            },
            records,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        fn lines<W: Write, T: Serialize>(w: &mut W, items: &[T]) -> Result<()> {
            for item in items {
                serde_json::to_writer(&mut *w, item)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        }
        match &self.records {
            Records::Anonymous(v) => lines(&mut w, v)?,
            Records::Paired(v) => lines(&mut w, v)?,
            Records::Full(v) => lines(&mut w, v)?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(s) if s.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("dataset file is empty".into()))?;
        let header: DatasetHeader = serde_json::from_str(&first?)?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {:?}",
                header.format
            )));
        }
        fn parse<T: for<'de> Deserialize<'de>>(
            lines: impl Iterator<Item = (usize, std::io::Result<String>)>,
        ) -> Result<Vec<T>> {
            lines
                .map(|(n, l)| {
                    serde_json::from_str(&l?)
                        .map_err(|e| Error::Format(format!("line {n}: {e}")))
                })
                .collect()
        }
        let records = match header.kind {
            DatasetKind::Anonymous => Records::Anonymous(parse(lines)?),
            DatasetKind::Paired => Records::Paired(parse(lines)?),
            DatasetKind::Full => Records::Full(parse(lines)?),
        };
        validate_records(&records)?;
        Ok(Self { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }
}

fn validate_records(records: &Records) -> Result<()> {
    let bit = |o: u8| {
        if o > 1 {
            Err(Error::Format(format!("label must be 0 or 1, got {o}")))
        } else {
            Ok(())
        }
    };
    match records {
        Records::Anonymous(v) => v.iter().try_for_each(|s| bit(s.o)),
        Records::Paired(v) => v.iter().try_for_each(|p| {
            bit(p.first.o)?;
            bit(p.second.o)
        }),
        Records::Full(v) => {
            let width = v.first().map_or(0, |s| s.o_vec.len());
            v.iter().try_for_each(|s| {
                if s.o_vec.len() != width {
                    return Err(Error::Format("full-annotation vectors have mixed lengths".into()));
                }
                s.o_vec.iter().try_for_each(|&o| bit(o))
            })
        }
    }
}

/// Derives an independent stream seed for shard `k`.
pub fn shard_seed(seed: u64, shard: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(shard.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples preference data from a ground-truth population.
pub struct Generator<'a, F> {
    rewards: &'a RewardTable<F>,
    pop: &'a UserPopulation<F>,
    link: Link<F>,
    prompt_sampler: WeightedIndex<f64>,
    resp_samplers: Vec<Option<WeightedIndex<f64>>>,
    type_sampler: WeightedIndex<f64>,
    config_hash: String,
}

impl<'a, F: Real> Generator<'a, F> {
    pub fn new(
        rewards: &'a RewardTable<F>,
        pop: &'a UserPopulation<F>,
        link: Link<F>,
        prompt_dist: &[F],
        resp_dist: &SamplingDistribution<F>,
    ) -> Result<Self> {
        rewards.check_population(pop)?;
        let (nx, ny) = (rewards.n_prompts(), rewards.n_responses());
        if prompt_dist.len() != nx || resp_dist.probs().dim() != (nx, ny) {
            return Err(Error::Shape("sampling distributions do not match reward table".into()));
        }
        let to64 = |v: &[F]| v.iter().map(|p| p.as_f64()).collect::<Vec<_>>();
        let prompt_sampler = WeightedIndex::new(to64(prompt_dist))
            .map_err(|e| Error::Generation(format!("prompt distribution: {e}")))?;
        let mut resp_samplers = Vec::with_capacity(nx);
        for x in 0..nx {
            let row = to64(&resp_dist.row(x).to_vec());
            let support = row.iter().filter(|p| **p > 0.0).count();
            if support < 2 {
                if prompt_dist[x] > F::zero() {
                    return Err(Error::Generation(format!(
                        "response distribution at prompt {x} has fewer than two responses in its support"
                    )));
                }
                resp_samplers.push(None);
            } else {
                resp_samplers.push(Some(WeightedIndex::new(row).map_err(|e| {
                    Error::Generation(format!("response distribution at prompt {x}: {e}"))
                })?));
            }
        }
        let type_sampler = WeightedIndex::new(to64(pop.weights()))
            .map_err(|e| Error::Generation(format!("type distribution: {e}")))?;

        let mut hasher = Sha256::new();
        hasher.update(format!("{nx}x{ny}x{}", rewards.n_types()).as_bytes());
        for v in rewards.values().iter() {
            hasher.update(v.as_f64().to_le_bytes());
        }
        for v in pop.weights().iter().chain(prompt_dist).chain(resp_dist.probs().iter()) {
            hasher.update(v.as_f64().to_le_bytes());
        }
        hasher.update(link.temperature().as_f64().to_le_bytes());
        let digest = hasher.finalize();
        let config_hash = digest[..8].iter().map(|b| format!("{b:02x}")).collect();

        Ok(Self {
            rewards,
            pop,
            link,
            prompt_sampler,
            resp_samplers,
            type_sampler,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn triple<R: Rng>(&self, rng: &mut R) -> (usize, usize, usize) {
        let x = self.prompt_sampler.sample(rng);
        let resp = self.resp_samplers[x]
            .as_ref()
            .expect("prompts with degenerate response support have zero mass");
        loop {
            let y1 = resp.sample(rng);
            let y2 = resp.sample(rng);
            if y1 != y2 {
                return (x, y1, y2);
            }
        }
    }

    /// `Pr(y2 ≻ y1)` for type `u`.
    #[inline]
    fn win_prob(&self, x: usize, y1: usize, y2: usize, u: usize) -> f64 {
        self.link
            .value(self.rewards.get(x, y2, u) - self.rewards.get(x, y1, u))
            .as_f64()
    }

    #[inline]
    fn label<R: Rng>(&self, rng: &mut R, p: f64) -> u8 {
        u8::from(rng.gen::<f64>() < p)
    }

    pub fn sample_anonymous(&self, n: usize, seed: u64) -> Result<Vec<AnonymousSample>> {
        check_count(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let (x, y1, y2) = self.triple(&mut rng);
                let u = self.type_sampler.sample(&mut rng);
                let o = self.label(&mut rng, self.win_prob(x, y1, y2, u));
                AnonymousSample { x, y1, y2, o }
            })
            .collect())
    }

    /// Two labels of the same triple by one annotator.
    pub fn sample_paired(&self, n: usize, seed: u64) -> Result<Vec<PairedSample>> {
        check_count(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let (x, y1, y2) = self.triple(&mut rng);
                let u = self.type_sampler.sample(&mut rng);
                let p = self.win_prob(x, y1, y2, u);
                let first = AnonymousSample { x, y1, y2, o: self.label(&mut rng, p) };
                let second = AnonymousSample { x, y1, y2, o: self.label(&mut rng, p) };
                PairedSample { first, second }
            })
            .collect())
    }

    /// One label from every type per triple.
    pub fn sample_full_vector(&self, n: usize, seed: u64) -> Result<Vec<FullAnnotationSample>> {
        check_count(n)?;
        self.warn_if_unequal();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.pop.len();
        Ok((0..n)
            .map(|_| {
                let (x, y1, y2) = self.triple(&mut rng);
                let o_vec = (0..k)
                    .map(|u| self.label(&mut rng, self.win_prob(x, y1, y2, u)))
                    .collect();
                FullAnnotationSample { x, y1, y2, o_vec }
            })
            .collect())
    }

    /// Redraws the whole label vector of a triple until all types agree and
    /// keeps the agreed label.
    pub fn sample_consensus(&self, n: usize, seed: u64, cap: usize) -> Result<Vec<AnonymousSample>> {
        check_count(n)?;
        self.warn_if_unequal();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.pop.len();
        let mut out = Vec::with_capacity(n);
        let mut probs = vec![0.0; k];
        for i in 0..n {
            let (x, y1, y2) = self.triple(&mut rng);
            for (u, p) in probs.iter_mut().enumerate() {
                *p = self.win_prob(x, y1, y2, u);
            }
            let mut agreed = None;
            for _ in 0..cap {
                let first = self.label(&mut rng, probs[0]);
                let mut all = true;
                for p in &probs[1..] {
                    // every label is drawn even after a disagreement so the
                    // stream does not depend on short-circuiting
                    if self.label(&mut rng, *p) != first {
                        all = false;
                    }
                }
                if all {
                    agreed = Some(first);
                    break;
                }
            }
            let o = agreed.ok_or_else(|| {
                Error::Generation(format!(
                    "record {i}: no consensus within {cap} attempts at (x={x}, y1={y1}, y2={y2})"
                ))
            })?;
            out.push(AnonymousSample { x, y1, y2, o });
        }
        Ok(out)
    }

    pub fn sample_full(&self, n: usize, seed: u64, mode: FullMode) -> Result<Records> {
        Ok(match mode {
            FullMode::Vector => Records::Full(self.sample_full_vector(n, seed)?),
            FullMode::Consensus => Records::Anonymous(self.sample_consensus(n, seed, DEFAULT_CONSENSUS_CAP)?),
        })
    }

    /// Anonymous sampling split over `shards` independent streams. The
    /// result depends on the shard count but not on thread scheduling.
    pub fn sample_anonymous_sharded(&self, n: usize, seed: u64, shards: usize) -> Result<Vec<AnonymousSample>>
    where
        F: Sync,
    {
        if shards <= 1 {
            return self.sample_anonymous(n, seed);
        }
        let sizes = shard_sizes(n, shards);
        let parts: Result<Vec<_>> = sizes
            .par_iter()
            .enumerate()
            .filter(|(_, &m)| m > 0)
            .map(|(k, &m)| self.sample_anonymous(m, shard_seed(seed, k as u64)))
            .collect();
        Ok(parts?.into_iter().flatten().collect())
    }

    fn warn_if_unequal(&self) {
        if !self.pop.is_uniform(F::lit(1e-9)) {
            log::warn!("full-annotation sampling with unequal type weights: consistent-loss guarantees assume equal weights");
        }
    }
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok(())
}

fn shard_sizes(n: usize, shards: usize) -> Vec<usize> {
    (0..shards)
        .map(|k| n / shards + usize::from(k < n % shards))
        .collect()
}

/// Records kept by [`agreement_filter`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub samples: Vec<AnonymousSample>,
    pub kept: usize,
    pub total: usize,
}

impl FilterOutcome {
    pub fn usable_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }
}

/// Keeps unanimous records, labeled with the agreed bit.
pub fn agreement_filter(full: &[FullAnnotationSample]) -> FilterOutcome {
    let samples: Vec<_> = full
        .iter()
        .filter_map(|s| {
            s.consensus().map(|o| AnonymousSample {
                x: s.x,
                y1: s.y1,
                y2: s.y2,
                o,
            })
        })
        .collect();
    FilterOutcome {
        kept: samples.len(),
        total: full.len(),
        samples,
    }
}

/// Labels comparison triples with an averaged reward `rbar[x][y]`.
/// Deterministic mode breaks exact ties toward `o = 0`.
pub fn relabel_with_reward<F: Real>(
    pairs: &[(usize, usize, usize)],
    rbar: &Array2<F>,
    link: &Link<F>,
    mode: RelabelMode,
    seed: u64,
) -> Result<Vec<AnonymousSample>> {
    let (nx, ny) = rbar.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|&(x, y1, y2)| {
            if x >= nx || y1 >= ny || y2 >= ny {
                return Err(Error::InvalidArgument(format!(
                    "triple ({x},{y1},{y2}) outside the {nx}x{ny} reward table"
                )));
            }
            let gap = rbar[[x, y2]] - rbar[[x, y1]];
            let o = match mode {
                RelabelMode::Deterministic => u8::from(gap > F::zero()),
                RelabelMode::Stochastic => u8::from(rng.gen::<f64>() < link.value(gap).as_f64()),
            };
            Ok(AnonymousSample { x, y1, y2, o })
        })
        .collect()
}

/// Every `(x, y1, y2, o)` outcome with its exact probability under the
/// sampling protocol (distinct pairs, label law mixed over types). Used for
/// exact-expectation training.
pub fn enumerate_anonymous<F: Real>(
    rewards: &RewardTable<F>,
    pop: &UserPopulation<F>,
    link: &Link<F>,
    prompt_dist: &[F],
    resp_dist: &SamplingDistribution<F>,
) -> Result<(Vec<AnonymousSample>, Vec<F>)> {
    let mut samples = Vec::new();
    let mut weights = Vec::new();
    for_each_pair(rewards, prompt_dist, resp_dist, |x, y1, y2, w| {
        let p: F = pop
            .weights()
            .iter()
            .enumerate()
            .map(|(u, wu)| *wu * link.value(rewards.get(x, y2, u) - rewards.get(x, y1, u)))
            .sum();
        for (o, po) in [(1u8, p), (0u8, F::one() - p)] {
            samples.push(AnonymousSample { x, y1, y2, o });
            weights.push(w * po);
        }
    })?;
    Ok((samples, weights))
}

/// Every full-annotation outcome with its exact probability.
pub fn enumerate_full<F: Real>(
    rewards: &RewardTable<F>,
    link: &Link<F>,
    prompt_dist: &[F],
    resp_dist: &SamplingDistribution<F>,
) -> Result<(Vec<FullAnnotationSample>, Vec<F>)> {
    let k = rewards.n_types();
    if k > 16 {
        return Err(Error::InvalidArgument("too many types to enumerate label vectors".into()));
    }
    let mut samples = Vec::new();
    let mut weights = Vec::new();
    for_each_pair(rewards, prompt_dist, resp_dist, |x, y1, y2, w| {
        let probs: Vec<F> = (0..k)
            .map(|u| link.value(rewards.get(x, y2, u) - rewards.get(x, y1, u)))
            .collect();
        for mask in 0u32..(1 << k) {
            let o_vec: Vec<u8> = (0..k).map(|u| ((mask >> u) & 1) as u8).collect();
            let p: F = o_vec
                .iter()
                .zip(&probs)
                .map(|(&o, &p)| if o == 1 { p } else { F::one() - p })
                .fold(F::one(), |a, b| a * b);
            samples.push(FullAnnotationSample { x, y1, y2, o_vec });
            weights.push(w * p);
        }
    })?;
    Ok((samples, weights))
}

fn for_each_pair<F: Real>(
    rewards: &RewardTable<F>,
    prompt_dist: &[F],
    resp_dist: &SamplingDistribution<F>,
    mut visit: impl FnMut(usize, usize, usize, F),
) -> Result<()> {
    let (nx, ny) = (rewards.n_prompts(), rewards.n_responses());
    if prompt_dist.len() != nx || resp_dist.probs().dim() != (nx, ny) {
        return Err(Error::Shape("sampling distributions do not match reward table".into()));
    }
    for x in 0..nx {
        let row = resp_dist.row(x);
        let same: F = row.iter().map(|p| *p * *p).sum();
        let distinct = F::one() - same;
        if !(distinct > F::zero()) {
            if prompt_dist[x] > F::zero() {
                return Err(Error::Generation(format!("prompt {x} has a degenerate response distribution")));
            }
            continue;
        }
        for y1 in 0..ny {
            for y2 in 0..ny {
                if y1 != y2 {
                    let w = prompt_dist[x] * row[y1] * row[y2] / distinct;
                    if w > F::zero() {
                        visit(x, y1, y2, w);
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::sigmoid;
    use ndarray::Array3;

    fn env(rows: &[Vec<f64>], weights: Vec<f64>) -> (RewardTable<f64>, UserPopulation<f64>) {
        let r = RewardTable::single_prompt(rows).unwrap();
        let k = weights.len();
        let pop = UserPopulation::new((0..k).map(|u| format!("t{u}")).collect(), weights).unwrap();
        (r, pop)
    }

    fn se(p: f64, n: usize) -> f64 {
        (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn indifferent_annotators_flip_fair_coins() {
        let r = RewardTable::new(Array3::from_elem((3, 4, 2), 1.5)).unwrap();
        let pop = UserPopulation::uniform(2).unwrap();
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0 / 3.0; 3], &SamplingDistribution::uniform(3, 4)).unwrap();
        let n = 100_000;
        let data = g.sample_anonymous(n, 11).unwrap();
        let mean = data.iter().map(|s| s.o as f64).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt());
        assert!(data.iter().all(|s| s.y1 != s.y2));
    }

    #[test]
    fn single_type_label_rate() {
        let (r, pop) = env(&[vec![0.0], vec![3f64.ln()]], vec![1.0]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        let n = 100_000;
        let data = g.sample_anonymous(n, 5).unwrap();
        // orientation y1=0, y2=1 wins with 0.75
        let (hits, total) = data
            .iter()
            .filter(|s| s.y1 == 0)
            .fold((0usize, 0usize), |(h, t), s| (h + s.o as usize, t + 1));
        let mean = hits as f64 / total as f64;
        assert!((mean - 0.75).abs() < 3.0 * se(0.75, total));
    }

    #[test]
    fn same_seed_same_bytes() {
        let (r, pop) = env(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]], vec![0.5, 0.5]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 3)).unwrap();
        let a = DatasetFile::new(3, g.config_hash().into(), Records::Anonymous(g.sample_anonymous(500, 3).unwrap()));
        let b = DatasetFile::new(3, g.config_hash().into(), Records::Anonymous(g.sample_anonymous(500, 3).unwrap()));
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = g.sample_anonymous(500, 4).unwrap();
        assert_ne!(a.records, Records::Anonymous(c));
    }

    #[test]
    fn sharded_generation_is_deterministic_per_shard_count() {
        let (r, pop) = env(&[vec![0.0], vec![1.0], vec![2.0]], vec![1.0]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 3)).unwrap();
        let a = g.sample_anonymous_sharded(1001, 9, 4).unwrap();
        let b = g.sample_anonymous_sharded(1001, 9, 4).unwrap();
        assert_eq!(a.len(), 1001);
        assert_eq!(a, b);
        assert_eq!(g.sample_anonymous_sharded(50, 9, 1).unwrap(), g.sample_anonymous(50, 9).unwrap());
    }

    #[test]
    fn degenerate_response_distribution_rejected() {
        let (r, pop) = env(&[vec![0.0], vec![1.0]], vec![1.0]);
        let d = SamplingDistribution::repeated(&[1.0, 0.0], 1).unwrap();
        assert!(matches!(
            Generator::new(&r, &pop, Link::logistic(), &[1.0], &d),
            Err(Error::Generation(_))
        ));
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        assert!(g.sample_anonymous(0, 1).is_err());
    }

    #[test]
    fn paired_single_type_labels_uncorrelated() {
        let (r, pop) = env(&[vec![0.0], vec![0.8]], vec![1.0]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        let n = 200_000;
        let data = g.sample_paired(n, 21).unwrap();
        let f: Vec<(f64, f64)> = data
            .iter()
            .filter(|p| p.first.y1 == 0)
            .map(|p| (p.first.o as f64, p.second.o as f64))
            .collect();
        let m = f.len() as f64;
        let ma = f.iter().map(|v| v.0).sum::<f64>() / m;
        let mb = f.iter().map(|v| v.1).sum::<f64>() / m;
        let cov = f.iter().map(|v| (v.0 - ma) * (v.1 - mb)).sum::<f64>() / m;
        let p = sigmoid(0.8);
        let corr = cov / (p * (1.0 - p));
        assert!(corr.abs() < 3.0 / m.sqrt(), "corr {corr}");
    }

    #[test]
    fn paired_two_types_moments() {
        // gaps Δr = {1, -0.5} in the (y1=0, y2=1) orientation
        let (r, pop) = env(&[vec![0.0, 0.0], vec![1.0, -0.5]], vec![0.5, 0.5]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        let n = 1_000_000;
        let data = g.sample_paired(n, 99).unwrap();
        let oriented: Vec<(f64, f64)> = data
            .iter()
            .map(|p| {
                let (a, b) = (p.first.o as f64, p.second.o as f64);
                if p.first.y1 == 0 { (a, b) } else { (1.0 - a, 1.0 - b) }
            })
            .collect();
        let m = oriented.len() as f64;
        let j1 = oriented.iter().map(|v| v.0 * v.1).sum::<f64>() / m;
        let j2 = oriented.iter().map(|v| v.0 * (1.0 - v.1)).sum::<f64>() / m;
        let mean = oriented.iter().map(|v| v.0).sum::<f64>() / m;
        assert!((j1 - 0.338_49).abs() < 3.0 * se(0.338_49, n), "J1 {j1}");
        assert!((j2 - 0.215_80).abs() < 3.0 * se(0.215_80, n), "J2 {j2}");
        assert!((j1 + j2 - mean).abs() < 3.0 * se(0.25, n));
    }

    #[test]
    fn consensus_label_law() {
        let (r, pop) = env(&[vec![0.0, 0.0], vec![1.0, -0.5]], vec![0.5, 0.5]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        let n = 200_000;
        let expected = sigmoid(0.5);
        let cons = g.sample_consensus(n, 4, DEFAULT_CONSENSUS_CAP).unwrap();
        let rate = |v: &[AnonymousSample]| {
            let hits = v
                .iter()
                .map(|s| if s.y1 == 0 { s.o as f64 } else { 1.0 - s.o as f64 })
                .sum::<f64>();
            hits / v.len() as f64
        };
        assert!((rate(&cons) - expected).abs() < 3.0 * se(expected, n));

        let filtered = agreement_filter(&g.sample_full_vector(n, 5).unwrap());
        let m = filtered.kept;
        assert!((rate(&filtered.samples) - expected).abs() < 3.0 * se(expected, m));
        let agree = sigmoid(1.0) * sigmoid(-0.5) + sigmoid(-1.0) * sigmoid(0.5);
        assert!((filtered.usable_fraction() - agree).abs() < 3.0 * se(agree, n));
    }

    #[test]
    fn consensus_cap_exceeded() {
        // the two types disagree almost surely
        let (r, pop) = env(&[vec![0.0, 0.0], vec![40.0, -40.0]], vec![0.5, 0.5]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        assert!(matches!(g.sample_consensus(3, 1, 50), Err(Error::Generation(_))));
    }

    #[test]
    fn identical_types_agreement_rate() {
        let gap = 0.7;
        let (r, pop) = env(&[vec![0.0; 3], vec![gap; 3]], vec![1.0 / 3.0; 3]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        let n = 100_000;
        let full = g.sample_full_vector(n, 8).unwrap();
        assert!(full.iter().all(|s| s.o_vec.len() == 3));
        let s = sigmoid(gap);
        let expected = s.powi(3) + (1.0 - s).powi(3);
        let frac = agreement_filter(&full).usable_fraction();
        assert!((frac - expected).abs() < 3.0 * se(expected, n));
    }

    #[test]
    fn agreement_filter_edge_cases() {
        let mixed = vec![FullAnnotationSample { x: 0, y1: 0, y2: 1, o_vec: vec![0, 1] }; 4];
        let out = agreement_filter(&mixed);
        assert!(out.samples.is_empty());
        assert_eq!(out.usable_fraction(), 0.0);

        let single = vec![
            FullAnnotationSample { x: 0, y1: 0, y2: 1, o_vec: vec![1] },
            FullAnnotationSample { x: 0, y1: 1, y2: 0, o_vec: vec![0] },
        ];
        let out = agreement_filter(&single);
        assert_eq!(out.usable_fraction(), 1.0);
        assert_eq!(out.samples[1].o, 0);

        let (r, pop) = env(&[vec![0.0; 3], vec![0.0; 3]], vec![1.0 / 3.0; 3]);
        let g = Generator::new(&r, &pop, Link::logistic(), &[1.0], &SamplingDistribution::uniform(1, 2)).unwrap();
        let n = 100_000;
        let frac = agreement_filter(&g.sample_full_vector(n, 1).unwrap()).usable_fraction();
        assert!((frac - 0.25).abs() < 3.0 * se(0.25, n));
    }

    #[test]
    fn relabel_modes() {
        let rbar = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 50.0]).unwrap();
        let link = Link::logistic();
        let pairs = vec![(0, 0, 1), (0, 1, 0), (0, 0, 2), (0, 1, 2)];
        let det = relabel_with_reward(&pairs, &rbar, &link, RelabelMode::Deterministic, 0).unwrap();
        assert_eq!(det.iter().map(|s| s.o).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        let sto = relabel_with_reward(&pairs, &rbar, &link, RelabelMode::Stochastic, 0).unwrap();
        assert_eq!(sto[2].o, 1);
        assert_eq!(sto[3].o, 1);

        let rbar = Array2::from_shape_vec((1, 2), vec![0.0, 3f64.ln()]).unwrap();
        let n = 100_000;
        let pairs = vec![(0, 0, 1); n];
        let sto = relabel_with_reward(&pairs, &rbar, &link, RelabelMode::Stochastic, 17).unwrap();
        let mean = sto.iter().map(|s| s.o as f64).sum::<f64>() / n as f64;
        assert!((mean - 0.75).abs() < 3.0 * se(0.75, n));
        assert!(relabel_with_reward(&[(1, 0, 1)], &rbar, &link, RelabelMode::Stochastic, 0).is_err());
    }

    #[test]
    fn label_frequencies_pass_chi_square() {
        let rows = vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![0.5, 2.0]];
        let (r, pop) = env(&rows, vec![0.3, 0.7]);
        let link = Link::logistic();
        let d = SamplingDistribution::uniform(1, 3);
        let g = Generator::new(&r, &pop, link, &[1.0], &d).unwrap();
        let n = 100_000;
        let data = g.sample_anonymous(n, 123).unwrap();
        let (cells, probs) = enumerate_anonymous(&r, &pop, &link, &[1.0], &d).unwrap();
        let mut counts = vec![0usize; cells.len()];
        for s in &data {
            counts[cells.iter().position(|c| c == s).unwrap()] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 11 degrees of freedom, 99.9% quantile ≈ 31.3
        assert!(chi2 < 31.3, "chi2 {chi2}");
    }

    #[test]
    fn enumerations_are_distributions() {
        let rows = vec![vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 0.0], vec![0.5, 2.0, 1.0]];
        let (r, pop) = env(&rows, vec![1.0 / 3.0; 3]);
        let link = Link::logistic();
        let d = SamplingDistribution::uniform(1, 3);
        let (_, w) = enumerate_anonymous(&r, &pop, &link, &[1.0], &d).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (s, w) = enumerate_full(&r, &link, &[1.0], &d).unwrap();
        assert_eq!(s.len(), 6 * 8);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let recs = Records::Paired(vec![PairedSample {
            first: AnonymousSample { x: 1, y1: 2, y2: 3, o: 1 },
            second: AnonymousSample { x: 1, y1: 2, y2: 3, o: 0 },
        }]);
        let file = DatasetFile::new(42, "abcd".into(), recs);
        let bytes = file.to_bytes().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            r#"{"format":"hetpref-v1","kind":"paired","seed":42,"config_hash":"abcd"}"#
        );
        assert_eq!(
            lines.next().unwrap(),
            r#"{"first":{"x":1,"y1":2,"y2":3,"o":1},"second":{"x":1,"y1":2,"y2":3,"o":0}}"#
        );
        let back = DatasetFile::read_jsonl(bytes.as_slice()).unwrap();
        assert_eq!(back, file);

        let full = DatasetFile::new(1, "h".into(), Records::Full(vec![FullAnnotationSample { x: 0, y1: 0, y2: 1, o_vec: vec![1, 0, 1] }]));
        let text = String::from_utf8(full.to_bytes().unwrap()).unwrap();
        assert!(text.contains(r#"{"x":0,"y1":0,"y2":1,"o_vec":[1,0,1]}"#));
    }

    #[test]
    fn malformed_files_rejected() {
        let bad_label = "{\"format\":\"hetpref-v1\",\"kind\":\"anonymous\",\"seed\":1,\"config_hash\":\"x\"}\n{\"x\":0,\"y1\":0,\"y2\":1,\"o\":2}\n";
        assert!(DatasetFile::read_jsonl(bad_label.as_bytes()).is_err());
        let bad_format = "{\"format\":\"other\",\"kind\":\"anonymous\",\"seed\":1,\"config_hash\":\"x\"}\n";
        assert!(DatasetFile::read_jsonl(bad_format.as_bytes()).is_err());
        assert!(DatasetFile::read_jsonl("".as_bytes()).is_err());
    }
}
