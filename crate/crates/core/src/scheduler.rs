//! Staged length curriculum, crop-vs-drop policy, length buckets with
//! per-bucket batch sizes, and a schedule simulator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{shuffle, stream_rng};
use crate::sample::{ModalityRegistry, MultimodalSample, TrackGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub context_budget: usize,
    pub max_lr: f64,
    pub batch_target: usize,
    /// Passes over the surviving samples before the next stage.
    pub epochs: usize,
}

/// Context budgets and peak learning rates of the five curriculum stages.
pub fn paper_stages() -> Vec<Stage> {
    [
        (1_000, 2.21e-4, 2_000),
        (2_000, 1.89e-4, 2_300),
        (4_000, 1.44e-4, 2_600),
        (8_000, 1.05e-4, 3_000),
        (10_000, 4.66e-5, 3_100),
    ]
    .into_iter()
    .map(|(context_budget, max_lr, batch_target)| Stage {
        context_budget,
        max_lr,
        batch_target,
        epochs: 30,
    })
    .collect()
}

pub fn validate_stages(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Empty("stage list"));
    }
    for w in stages.windows(2) {
        if w[1].context_budget <= w[0].context_budget {
            return Err(invalid("stage budgets must be strictly increasing"));
        }
    }
    for s in stages {
        if s.batch_target == 0 || !(s.max_lr.is_finite() && s.max_lr > 0.0) {
            return Err(invalid(format!("stage {} has an invalid batch target or lr", s.context_budget)));
        }
    }
    Ok(())
}

/// Encoder tokens a sample occupies with every present track as input:
/// each aligned group counts once, each semantic track by its length.
/// Registers are not included.
pub fn sample_encoder_length(sample: &MultimodalSample, registry: &ModalityRegistry) -> usize {
    let mut total = 0;
    for group in [TrackGroup::Nucleic, TrackGroup::Protein] {
        total += sample.group_len(registry, group).unwrap_or(0);
    }
    for (name, track) in &sample.tracks {
        if let Ok(d) = registry.get(name) {
            if !d.aligned || d.track_group.is_semantic() {
                total += track.len();
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthDecision {
    Keep,
    Crop { start: usize, len: usize },
    Drop,
}

/// Keep within budget; crop nucleic-only samples to a uniform random
/// window; drop anything carrying a protein group.
pub fn apply_length_policy<R: Rng + ?Sized>(
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    budget: usize,
    rng: &mut R,
) -> LengthDecision {
    let total = sample_encoder_length(sample, registry);
    if total <= budget {
        return LengthDecision::Keep;
    }
    if sample.group_len(registry, TrackGroup::Protein).is_some() {
        return LengthDecision::Drop;
    }
    let Some(nucleic) = sample.group_len(registry, TrackGroup::Nucleic) else {
        return LengthDecision::Drop;
    };
    let other = total - nucleic;
    if other >= budget {
        return LengthDecision::Drop;
    }
    let len = budget - other;
    let start = rng.random_range(0..=nucleic - len);
    LengthDecision::Crop { start, len }
}

/// Applies the policy, returning the (possibly cropped) sample or `None`.
pub fn enforce_length_policy<R: Rng + ?Sized>(
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    budget: usize,
    rng: &mut R,
) -> Option<MultimodalSample> {
    match apply_length_policy(sample, registry, budget, rng) {
        LengthDecision::Keep => Some(sample.clone()),
        LengthDecision::Crop { start, len } => {
            let mut s = sample.clone();
            s.crop_nucleic(registry, start, len);
            Some(s)
        }
        LengthDecision::Drop => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub a: f64,
    pub b: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0 / 512.0 }
    }
}

impl CostModel {
    pub fn cost(&self, len: usize) -> f64 {
        let l = len as f64;
        self.a * l + self.b * l * l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Admitted lengths `[lo, hi)`.
    pub lo: usize,
    pub hi: usize,
    pub batch_size: usize,
    pub assigned_worker: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, len: usize) -> bool {
        self.lo <= len && len < self.hi
    }

    /// Largest admitted length.
    pub fn max_len(&self) -> usize {
        self.hi.saturating_sub(1)
    }
}

/// Quantile-edged buckets covering `[0, budget]`; returns buckets and the
/// bucket index of every length.
pub fn bucketize(lengths: &[usize], budget: usize, n_buckets: usize) -> Result<(Vec<Bucket>, Vec<usize>)> {
    if lengths.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if n_buckets == 0 {
        return Err(invalid("n_buckets must be at least 1"));
    }
    if let Some(&over) = lengths.iter().find(|&&l| l > budget) {
        return Err(Error::OverBudget { total: over, budget });
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut cuts: Vec<usize> = Vec::new();
    for k in 1..n_buckets {
        let rank = (k * n).div_ceil(n_buckets).max(1);
        let cut = sorted[rank - 1] + 1;
        if cut <= budget && cuts.last().is_none_or(|&c| cut > c) {
            cuts.push(cut);
        }
    }
    let mut buckets = Vec::with_capacity(cuts.len() + 1);
    let mut lo = 0;
    for &c in &cuts {
        buckets.push(Bucket {
            lo,
            hi: c,
            batch_size: 1,
            assigned_worker: None,
        });
        lo = c;
    }
    buckets.push(Bucket {
        lo,
        hi: budget + 1,
        batch_size: 1,
        assigned_worker: None,
    });
    let assignment = lengths
        .iter()
        .map(|&l| buckets.partition_point(|b| b.hi <= l))
        .collect();
    Ok((buckets, assignment))
}

/// Largest `B` with `B · cost(len) ≤ memory`, at least 1. The flag reports
/// that a single sample already exceeds memory.
pub fn batch_size_for_length(len: usize, memory_budget: f64, cost: &CostModel) -> (usize, bool) {
    let c = cost.cost(len);
    if c <= 0.0 {
        return (usize::MAX, false);
    }
    let b = libm::floor(memory_budget / c);
    if b < 1.0 {
        (1, true)
    } else {
        (b as usize, false)
    }
}

pub fn batch_size_for_bucket(bucket: &Bucket, memory_budget: f64, cost: &CostModel) -> (usize, bool) {
    batch_size_for_length(bucket.max_len(), memory_budget, cost)
}

/// Fraction of padded slots when a batch is padded to its longest member.
pub fn padding_waste(lengths: &[usize]) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let max = *lengths.iter().max().unwrap();
    if max == 0 {
        return Ok(0.0);
    }
    let pad: usize = lengths.iter().map(|l| max - l).sum();
    Ok(pad as f64 / (lengths.len() * max) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Bucketed,
    /// Sequence packing into budget-length rows; simulator comparison only.
    Packing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_workers: usize,
    pub affinity: bool,
    pub strategy: Strategy,
    pub n_buckets: usize,
    pub memory_budget: f64,
    pub cost: CostModel,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMetrics {
    pub padding_waste: f64,
    pub steps: usize,
    pub worker_bucket_switches: usize,
    pub modeled_cost: f64,
    /// Batches whose size was floored to 1 by memory.
    pub memory_warnings: usize,
    /// Set when more workers than buckets forced pinned workers to share.
    pub shared_buckets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub bucket: usize,
    pub worker: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub metrics: ScheduleMetrics,
    pub buckets: Vec<Bucket>,
    pub batches: Vec<ScheduledBatch>,
}

fn chunk_batches(members: &[usize], lengths: &[usize], cfg: &SimConfig, bucket: usize, warnings: &mut usize) -> Vec<ScheduledBatch> {
    if members.is_empty() {
        return Vec::new();
    }
    let max = members.iter().map(|&i| lengths[i]).max().unwrap();
    let (b, warn) = batch_size_for_length(max, cfg.memory_budget, &cfg.cost);
    let b = b.min(members.len()).max(1);
    let out: Vec<ScheduledBatch> = members
        .chunks(b)
        .map(|c| ScheduledBatch {
            bucket,
            worker: 0,
            members: c.to_vec(),
        })
        .collect();
    if warn {
        *warnings += out.len();
    }
    out
}

/// Simulates one epoch over `lengths` (already under the stage budget).
pub fn simulate_schedule(lengths: &[usize], budget: usize, cfg: &SimConfig) -> Result<ScheduleReport> {
    if lengths.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if cfg.n_workers == 0 {
        return Err(invalid("at least one worker is required"));
    }
    let mut rng = stream_rng(cfg.seed, 0x5C4E);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    shuffle(&mut order, &mut rng);
    let mut warnings = 0;
    let mut shared = false;

    if cfg.strategy == Strategy::Packing {
        // first-fit packing into budget-length rows
        let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
        for &i in &order {
            let l = lengths[i];
            match rows.iter_mut().find(|(used, _)| used + l <= budget) {
                Some((used, m)) => {
                    *used += l;
                    m.push(i);
                }
                None => rows.push((l, alloc::vec![i])),
            }
        }
        let (per_batch, warn) = batch_size_for_length(budget, cfg.memory_budget, &cfg.cost);
        let mut batches = Vec::new();
        let mut slots = 0usize;
        let mut used_total = 0usize;
        let mut cost = 0.0;
        for (k, chunk) in rows.chunks(per_batch.max(1)).enumerate() {
            slots += chunk.len() * budget;
            used_total += chunk.iter().map(|(u, _)| u).sum::<usize>();
            cost += chunk.len() as f64 * cfg.cost.cost(budget);
            batches.push(ScheduledBatch {
                bucket: 0,
                worker: k % cfg.n_workers,
                members: chunk.iter().flat_map(|(_, m)| m.iter().copied()).collect(),
            });
        }
        if warn {
            warnings = batches.len();
        }
        return Ok(ScheduleReport {
            metrics: ScheduleMetrics {
                padding_waste: (slots - used_total) as f64 / slots as f64,
                steps: batches.len(),
                worker_bucket_switches: 0,
                modeled_cost: cost,
                memory_warnings: warnings,
                shared_buckets: false,
            },
            buckets: alloc::vec![Bucket {
                lo: 0,
                hi: budget + 1,
                batch_size: per_batch,
                assigned_worker: None,
            }],
            batches,
        });
    }

    let (mut buckets, assignment, mut batches) = match cfg.strategy {
        Strategy::Naive => {
            let (buckets, _) = bucketize(lengths, budget, 1)?;
            let batches = chunk_batches(&order, lengths, cfg, 0, &mut warnings);
            (buckets, alloc::vec![0; lengths.len()], batches)
        }
        _ => {
            let (buckets, assignment) = bucketize(lengths, budget, cfg.n_buckets)?;
            let mut batches = Vec::new();
            for b in 0..buckets.len() {
                let mut members: Vec<usize> = order.iter().copied().filter(|&i| assignment[i] == b).collect();
                // length-sorted within the bucket; shuffle order breaks ties
                members.sort_by_key(|&i| lengths[i]);
                batches.extend(chunk_batches(&members, lengths, cfg, b, &mut warnings));
            }
            shuffle(&mut batches, &mut rng);
            (buckets, assignment, batches)
        }
    };
    let _ = assignment;

    for (b, bucket) in buckets.iter_mut().enumerate() {
        bucket.batch_size = batches
            .iter()
            .filter(|x| x.bucket == b)
            .map(|x| x.members.len())
            .max()
            .unwrap_or_else(|| batch_size_for_bucket(bucket, cfg.memory_budget, &cfg.cost).0);
    }

    let mut switches = 0;
    if cfg.affinity && cfg.strategy == Strategy::Bucketed {
        let active: Vec<usize> = (0..buckets.len())
            .filter(|b| batches.iter().any(|x| x.bucket == *b))
            .collect();
        shared = cfg.n_workers > active.len();
        // pin buckets round-robin; surplus workers share buckets round-robin
        let mut pins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, &b) in active.iter().enumerate() {
            pins.entry(b).or_default().push(k % cfg.n_workers);
            buckets[b].assigned_worker = Some(k % cfg.n_workers);
        }
        if shared {
            for w in active.len()..cfg.n_workers {
                pins.get_mut(&active[w % active.len()]).unwrap().push(w);
            }
        }
        let mut next: BTreeMap<usize, usize> = BTreeMap::new();
        for batch in &mut batches {
            let ws = &pins[&batch.bucket];
            let k = next.entry(batch.bucket).or_insert(0);
            batch.worker = ws[*k % ws.len()];
            *k += 1;
        }
        // each worker drains its pinned buckets one after another; the first
        // batch of every pin is warmup, so no post-warmup switches occur
        batches.sort_by_key(|b| (b.worker, b.bucket));
    } else {
        let mut last: Vec<Option<usize>> = alloc::vec![None; cfg.n_workers];
        for (k, batch) in batches.iter_mut().enumerate() {
            let w = k % cfg.n_workers;
            batch.worker = w;
            if let Some(prev) = last[w] {
                if prev != batch.bucket {
                    switches += 1;
                }
            }
            last[w] = Some(batch.bucket);
        }
    }

    let mut pad = 0usize;
    let mut slots = 0usize;
    let mut cost = 0.0;
    for b in &batches {
        let max = b.members.iter().map(|&i| lengths[i]).max().unwrap();
        pad += b.members.iter().map(|&i| max - lengths[i]).sum::<usize>();
        slots += b.members.len() * max;
        cost += b.members.len() as f64 * cfg.cost.cost(max);
    }
    Ok(ScheduleReport {
        metrics: ScheduleMetrics {
            padding_waste: if slots == 0 { 0.0 } else { pad as f64 / slots as f64 },
            steps: batches.len(),
            worker_bucket_switches: switches,
            modeled_cost: cost,
            memory_warnings: warnings,
            shared_buckets: shared,
        },
        buckets,
        batches,
    })
}

/// Log-normal integer lengths clamped to `[1, max]`.
pub fn lognormal_lengths(n: usize, mu: f64, sigma: f64, max: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, 0x106);
    (0..n)
        .map(|_| {
            let z = crate::rng::standard_normal(&mut rng);
            (libm::round(libm::exp(mu + sigma * z)) as usize).clamp(1, max)
        })
        .collect()
}

/// Training-time epoch plan: length buckets, per-bucket shuffles, chunks of
/// at most `batch_size`, then a shuffled batch order.
pub fn plan_epoch<R: Rng + ?Sized>(
    lengths: &[usize],
    budget: usize,
    n_buckets: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let (buckets, assignment) = bucketize(lengths, budget, n_buckets)?;
    let mut batches = Vec::new();
    for b in 0..buckets.len() {
        let mut members: Vec<usize> = (0..lengths.len()).filter(|&i| assignment[i] == b).collect();
        shuffle(&mut members, rng);
        batches.extend(members.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    shuffle(&mut batches, rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{Entity, Split};
    use crate::synth::{default_registry, names};
    use alloc::string::ToString;
    use alloc::vec;

    fn sample(tracks: &[(&str, usize)]) -> MultimodalSample {
        MultimodalSample {
            id: "x".into(),
            entity: Entity::Rna,
            cluster_id: "c".into(),
            split: Split::Train,
            tracks: tracks.iter().map(|(n, l)| (n.to_string(), vec![0u32; *l])).collect(),
            region_labels: None,
        }
    }

    fn cfg(strategy: Strategy, affinity: bool, seed: u64) -> SimConfig {
        SimConfig {
            n_workers: 4,
            affinity,
            strategy,
            n_buckets: 4,
            memory_budget: 2_000_000.0,
            cost: CostModel::default(),
            seed,
        }
    }

    #[test]
    fn length_policy() {
        let reg = default_registry(8);
        let mut rng = stream_rng(1, 1);
        let nt = sample(&[(names::NT_SEQ, 3000), (names::PHYLOP, 3000)]);
        match apply_length_policy(&nt, &reg, 1000, &mut rng) {
            LengthDecision::Crop { start, len } => {
                assert_eq!(len, 1000);
                assert!(start <= 2000);
            }
            d => panic!("{d:?}"),
        }
        let cropped = enforce_length_policy(&nt, &reg, 1000, &mut rng).unwrap();
        assert!(cropped.tracks.values().all(|t| t.len() == 1000));
        let prot = sample(&[(names::AA_SEQ, 3000)]);
        assert_eq!(apply_length_policy(&prot, &reg, 1000, &mut rng), LengthDecision::Drop);
        let small = sample(&[(names::NT_SEQ, 1000)]);
        assert_eq!(apply_length_policy(&small, &reg, 1000, &mut rng), LengthDecision::Keep);
        let with_text = sample(&[(names::NT_SEQ, 1200), (names::CONTEXT, 50)]);
        assert_eq!(
            match apply_length_policy(&with_text, &reg, 1000, &mut rng) {
                LengthDecision::Crop { len, .. } => len,
                _ => 0,
            },
            950
        );
    }

    #[test]
    fn bucket_edges() {
        let (b, a) = bucketize(&[5, 6, 7], 10, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert!(a.iter().all(|&x| x == 0));
        let (b, a) = bucketize(&[7; 50], 10, 8).unwrap();
        let nonempty = (0..b.len()).filter(|k| a.contains(k)).count();
        assert_eq!(nonempty, 1);
        assert!(bucketize(&[], 10, 2).is_err());
        assert!(bucketize(&[11], 10, 2).is_err());
        // partition of [0, budget]
        assert_eq!(b[0].lo, 0);
        assert_eq!(b.last().unwrap().hi, 11);
        for w in b.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
        }
    }

    #[test]
    fn lognormal_bucket_populations() {
        let n = 10_000;
        let lengths = lognormal_lengths(n, 5.0, 1.0, 20_000, 3);
        let (b, a) = bucketize(&lengths, 20_000, 8).unwrap();
        assert_eq!(b.len(), 8);
        let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for k in 0..8 {
            let c = a.iter().filter(|&&x| x == k).count() as f64;
            assert!((c - n as f64 / 8.0).abs() < 3.0 * sigma, "bucket {k} has {c}");
        }
    }

    #[test]
    fn batch_sizes() {
        let quad = CostModel { a: 1e-12, b: 1.0 };
        let (b1, _) = batch_size_for_length(100, 1e6, &quad);
        let (b2, _) = batch_size_for_length(200, 1e6, &quad);
        assert_eq!(b1 / b2, 4);
        let (one, warn) = batch_size_for_length(10_000, 10.0, &CostModel::default());
        assert_eq!((one, warn), (1, true));
        let c = CostModel::default();
        let half = CostModel { a: 0.5, b: 1.0 / 1024.0 };
        assert!(batch_size_for_length(300, 1e5, &half).0 >= 2 * batch_size_for_length(300, 1e5, &c).0);
    }

    #[test]
    fn waste_formula() {
        assert_eq!(padding_waste(&[10, 100]).unwrap(), 0.45);
        assert_eq!(padding_waste(&[7, 7, 7]).unwrap(), 0.0);
        assert_eq!(padding_waste(&[42]).unwrap(), 0.0);
        assert!(padding_waste(&[]).is_err());
    }

    #[test]
    fn uniform_corpus_strategies_agree() {
        let lengths = vec![64; 500];
        let naive = simulate_schedule(&lengths, 512, &cfg(Strategy::Naive, false, 1)).unwrap();
        let bucketed = simulate_schedule(&lengths, 512, &cfg(Strategy::Bucketed, false, 1)).unwrap();
        assert_eq!(naive.metrics.padding_waste, bucketed.metrics.padding_waste);
        assert_eq!(naive.metrics.steps, bucketed.metrics.steps);
        assert_eq!(naive.metrics.modeled_cost, bucketed.metrics.modeled_cost);
    }

    #[test]
    fn heavy_tail_dominance_and_affinity() {
        let lengths = lognormal_lengths(5_000, 5.0, 1.0, 4_000, 7);
        let naive = simulate_schedule(&lengths, 4_000, &cfg(Strategy::Naive, false, 7)).unwrap();
        let off = simulate_schedule(&lengths, 4_000, &cfg(Strategy::Bucketed, false, 7)).unwrap();
        let on = simulate_schedule(&lengths, 4_000, &cfg(Strategy::Bucketed, true, 7)).unwrap();
        assert!(off.metrics.padding_waste < naive.metrics.padding_waste);
        assert_eq!(on.metrics.worker_bucket_switches, 0);
        assert!(off.metrics.worker_bucket_switches > 0);
        let packed = simulate_schedule(&lengths, 4_000, &cfg(Strategy::Packing, false, 7)).unwrap();
        // conservation under every strategy
        for r in [&naive, &off, &on, &packed] {
            let mut seen: Vec<usize> = r.batches.iter().flat_map(|b| b.members.iter().copied()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn more_workers_than_buckets_share() {
        let lengths = lognormal_lengths(400, 4.0, 1.0, 1_000, 2);
        let mut c = cfg(Strategy::Bucketed, true, 2);
        c.n_workers = 9;
        let r = simulate_schedule(&lengths, 1_000, &c).unwrap();
        assert!(r.metrics.shared_buckets);
        assert_eq!(r.metrics.worker_bucket_switches, 0);
    }

    #[test]
    fn epoch_plan_covers_all() {
        let lengths = lognormal_lengths(100, 3.0, 0.5, 200, 1);
        let mut rng = stream_rng(1, 2);
        let plan = plan_epoch(&lengths, 200, 4, 8, &mut rng).unwrap();
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(plan.iter().all(|b| b.len() <= 8));
    }
}
