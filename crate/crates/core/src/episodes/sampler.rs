use std::hash::Hasher;

use fnv::FnvHasher;

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// SplitMix64 generator. Episode sampling is specified in terms of this stream so that
/// other implementations can reproduce episodes exactly.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, n)` via the high word of a 64×64 multiply.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// First `m` entries of a Fisher–Yates shuffle of `0..n`: for `i` in `0..m`, swap
/// position `i` with `i + below(n − i)`.
pub fn partial_fisher_yates(n: usize, m: usize, rng: &mut SplitMix64) -> Vec<usize> {
    assert!(m <= n, "cannot draw {m} of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

/// One N-way K-shot task. Queries are grouped by class: the first Q rows have label 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T = f32> {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Per class, a `shot × dim` matrix.
    pub support: Vec<Tensor<T>>,
    /// `(way · queries_per_class) × dim`.
    pub query: Tensor<T>,
    pub query_labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub class_ids: Vec<usize>,
    pub support_indices: Vec<Vec<usize>>,
    pub query_indices: Vec<Vec<usize>>,
    pub index: u64,
    pub seed: u64,
}

impl<T: Real> Episode<T> {
    /// Builds an episode from explicit tensors, for fixtures and external callers.
    pub fn from_parts(support: Vec<Tensor<T>>, query: Tensor<T>, query_labels: Vec<usize>) -> Result<Self> {
        let way = support.len();
        if way == 0 {
            return Err(Error::Usage("episode needs at least one class".into()));
        }
        let shot = support[0].rows();
        let dim = support[0].cols();
        for (c, s) in support.iter().enumerate() {
            if s.shape() != [shot, dim] {
                return Err(Error::Dimension(format!(
                    "support of class {c} has shape {:?}, expected [{shot}, {dim}]",
                    s.shape()
                )));
            }
        }
        if query.shape().len() != 2 || query.cols() != dim || query.rows() != query_labels.len() {
            return Err(Error::Dimension(format!(
                "query of shape {:?} with {} labels does not fit dim {dim}",
                query.shape(),
                query_labels.len()
            )));
        }
        if let Some(&bad) = query_labels.iter().find(|&&l| l >= way) {
            return Err(Error::Data(format!("query label {bad} out of range for {way} classes")));
        }
        let q = query_labels.len() / way;
        Ok(Self {
            way,
            shot,
            queries_per_class: q,
            class_names: (0..way).map(|c| format!("class{c}")).collect(),
            class_ids: (0..way).collect(),
            support_indices: vec![Vec::new(); way],
            query_indices: vec![Vec::new(); way],
            support,
            query,
            query_labels,
            index: 0,
            seed: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.cols()
    }

    pub fn cast<U: Real>(&self) -> Episode<U> {
        Episode {
            way: self.way,
            shot: self.shot,
            queries_per_class: self.queries_per_class,
            support: self.support.iter().map(Tensor::cast).collect(),
            query: self.query.cast(),
            query_labels: self.query_labels.clone(),
            class_names: self.class_names.clone(),
            class_ids: self.class_ids.clone(),
            support_indices: self.support_indices.clone(),
            query_indices: self.query_indices.clone(),
            index: self.index,
            seed: self.seed,
        }
    }

    /// FNV-1a over the sampled class and sample indices; equal digests mean equal draws.
    pub fn digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        for (c, (s, q)) in self
            .class_ids
            .iter()
            .zip(self.support_indices.iter().zip(&self.query_indices))
        {
            h.write_u64(*c as u64);
            s.iter().for_each(|&i| h.write_u64(i as u64));
            h.write_u64(u64::MAX);
            q.iter().for_each(|&i| h.write_u64(i as u64));
        }
        h.finish()
    }
}

/// Indices of classes holding at least `need` samples, in dataset order.
pub fn eligible_classes(ds: &EmbeddingDataset, need: usize) -> Vec<usize> {
    ds.classes()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.count() >= need)
        .map(|(i, _)| i)
        .collect()
}

fn check_request(ds: &EmbeddingDataset, way: usize, shot: usize, queries: usize) -> Result<Vec<usize>> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::Config(format!(
            "way ({way}), shot ({shot}) and queries ({queries}) must be positive"
        )));
    }
    let eligible = eligible_classes(ds, shot + queries);
    if eligible.len() < way {
        return Err(Error::Sampling(format!(
            "{way}-way episodes need {way} classes with at least {} samples, only {} qualify",
            shot + queries,
            eligible.len()
        )));
    }
    Ok(eligible)
}

fn sample_from(
    ds: &EmbeddingDataset,
    eligible: &[usize],
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    index: u64,
) -> Episode<f32> {
    let dim = ds.dim();
    let mut rng = SplitMix64::new(seed ^ index);
    let chosen: Vec<usize> = partial_fisher_yates(eligible.len(), way, &mut rng)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support = Vec::with_capacity(way);
    let mut query = Vec::with_capacity(way * queries * dim);
    let mut query_labels = Vec::with_capacity(way * queries);
    let mut support_indices = Vec::with_capacity(way);
    let mut query_indices = Vec::with_capacity(way);
    for (label, &c) in chosen.iter().enumerate() {
        let class = &ds.classes()[c];
        let picks = partial_fisher_yates(class.count(), shot + queries, &mut rng);
        let (s, q) = picks.split_at(shot);
        let rows: Vec<f32> = s.iter().flat_map(|&i| class.row(i).iter().copied()).collect();
        support.push(Tensor::matrix(shot, dim, rows).expect("support shape"));
        for &i in q {
            query.extend_from_slice(class.row(i));
            query_labels.push(label);
        }
        support_indices.push(s.to_vec());
        query_indices.push(q.to_vec());
    }
    Episode {
        way,
        shot,
        queries_per_class: queries,
        support,
        query: Tensor::matrix(way * queries, dim, query).expect("query shape"),
        query_labels,
        class_names: chosen.iter().map(|&c| ds.classes()[c].name().to_owned()).collect(),
        class_ids: chosen,
        support_indices,
        query_indices,
        index,
        seed,
    }
}

/// Draws episode `index` of the stream keyed by `seed`.
///
/// A SplitMix64 generator is started from state `seed XOR index`. It first picks the
/// classes with a partial Fisher–Yates over the eligible class list, then, class by
/// class, draws `shot + queries` sample indices the same way; the first `shot` become
/// support and the rest queries.
pub fn sample_episode(
    ds: &EmbeddingDataset,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    index: u64,
) -> Result<Episode<f32>> {
    let eligible = check_request(ds, way, shot, queries)?;
    Ok(sample_from(ds, &eligible, way, shot, queries, seed, index))
}

/// Episodes `0..count` of one seed. Supports random access for index-partitioned
/// parallel consumption.
#[derive(Debug, Clone)]
pub struct EpisodeStream<'a> {
    ds: &'a EmbeddingDataset,
    eligible: Vec<usize>,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    start: u64,
    count: u64,
    next: u64,
}

impl<'a> EpisodeStream<'a> {
    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Episode `i` of the stream (stream-relative).
    pub fn get(&self, i: u64) -> Episode<f32> {
        sample_from(
            self.ds,
            &self.eligible,
            self.way,
            self.shot,
            self.queries,
            self.seed,
            self.start + i,
        )
    }

    /// A stream over episode indices `start..start + count`.
    pub fn with_offset(mut self, start: u64) -> Self {
        self.start = start;
        self
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Episode<f32>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let ep = self.get(self.next);
        self.next += 1;
        Some(ep)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.count - self.next) as usize;
        (n, Some(n))
    }
}

pub fn episode_stream(
    ds: &EmbeddingDataset,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    count: u64,
) -> Result<EpisodeStream<'_>> {
    if count == 0 {
        return Err(Error::Config("episode count must be at least 1".into()));
    }
    let eligible = check_request(ds, way, shot, queries)?;
    let excluded = ds.class_count() - eligible.len();
    if excluded > 0 {
        log::info!(
            "{excluded} of {} classes have fewer than {} samples and are excluded from sampling",
            ds.class_count(),
            shot + queries
        );
    }
    Ok(EpisodeStream {
        ds,
        eligible,
        way,
        shot,
        queries,
        seed,
        start: 0,
        count,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(classes: usize, per_class: usize, dim: usize) -> EmbeddingDataset {
        let classes = (0..classes)
            .map(|c| {
                let data = (0..per_class * dim)
                    .map(|i| (c * 1000 + i / dim) as f32)
                    .collect();
                (format!("c{c:02}"), data)
            })
            .collect();
        EmbeddingDataset::new(dim, classes).unwrap()
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of the SplitMix64 stream seeded with 0.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xe220a8397b1dcdaf);
        assert_eq!(r.next_u64(), 0x6e789e6aa1b965f4);
        assert_eq!(r.next_u64(), 0x06c45d188009454f);
    }

    #[test]
    fn fisher_yates_draws_distinct_indices() {
        let mut r = SplitMix64::new(42);
        let mut picks = partial_fisher_yates(10, 10, &mut r);
        picks.sort_unstable();
        assert_eq!(picks, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_and_index_give_same_episode() {
        let ds = dataset(8, 12, 3);
        let a = sample_episode(&ds, 5, 2, 3, 7, 11).unwrap();
        let b = sample_episode(&ds, 5, 2, 3, 7, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&ds, 5, 2, 3, 7, 12).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn exhaustive_episode_uses_every_sample_once() {
        let ds = dataset(4, 5, 2);
        let ep = sample_episode(&ds, 4, 2, 3, 1, 0).unwrap();
        let mut classes = ep.class_ids.clone();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2, 3]);
        for (s, q) in ep.support_indices.iter().zip(&ep.query_indices) {
            let mut all: Vec<usize> = s.iter().chain(q).copied().collect();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn rows_and_labels_follow_indices() {
        let ds = dataset(6, 10, 2);
        let ep = sample_episode(&ds, 3, 2, 4, 99, 3).unwrap();
        for (label, &c) in ep.class_ids.iter().enumerate() {
            for (k, &i) in ep.support_indices[label].iter().enumerate() {
                assert_eq!(ep.support[label].row(k), ds.classes()[c].row(i));
            }
            for (k, &i) in ep.query_indices[label].iter().enumerate() {
                let row = label * 4 + k;
                assert_eq!(ep.query.row(row), ds.classes()[c].row(i));
                assert_eq!(ep.query_labels[row], label);
            }
        }
    }

    #[test]
    fn small_classes_are_excluded_and_shortfall_is_an_error() {
        let mut classes: Vec<(String, Vec<f32>)> =
            (0..3).map(|c| (format!("big{c}"), vec![c as f32; 10])).collect();
        classes.push(("tiny".into(), vec![9.0; 2]));
        let ds = EmbeddingDataset::new(1, classes).unwrap();
        assert_eq!(eligible_classes(&ds, 5), vec![0, 1, 2]);
        for i in 0..50 {
            let ep = sample_episode(&ds, 3, 2, 3, 5, i).unwrap();
            assert!(!ep.class_ids.contains(&3));
        }
        assert!(matches!(sample_episode(&ds, 4, 2, 3, 5, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn stream_enumerates_indices() {
        let ds = dataset(6, 10, 2);
        let s = episode_stream(&ds, 3, 1, 1, 4, 2000).unwrap();
        let idx: Vec<u64> = s.map(|e| e.index).collect();
        assert_eq!(idx, (0..2000).collect::<Vec<_>>());
        assert!(episode_stream(&ds, 3, 1, 1, 4, 0).is_err());
    }

    #[test]
    fn class_selection_is_uniform() {
        // 10,000 5-way draws over 20 classes: each class is picked with p = 1/4.
        let ds = dataset(20, 4, 1);
        let mut counts = [0usize; 20];
        for ep in episode_stream(&ds, 5, 1, 1, 2024, 10_000).unwrap() {
            ep.class_ids.iter().for_each(|&c| counts[c] += 1);
        }
        let (n, p) = (10_000.0, 0.25);
        let sigma = f64::sqrt(n * p * (1.0 - p));
        for (c, &k) in counts.iter().enumerate() {
            let z = (k as f64 - n * p).abs() / sigma;
            assert!(z < 5.0, "class {c}: {k} picks, z = {z:.2}");
        }
    }
}
