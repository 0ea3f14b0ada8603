//! Constrained generation: RNA window redesign, the iterative protein
//! generate-and-verify loop, annealing schedules and surface similarity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::{pearson, predict_chunked, Predictor};
use crate::layout::{assemble_encoder_layout, LayoutConfig};
use crate::model::{DecoderInput, DecoderSegment};
use crate::rng::stream_rng;
use crate::sample::{Entity, ModalityRegistry, MultimodalSample, Split};
use crate::synth::names::{AA_SEQ, MASIF_CHARGE, MASIF_HBOND, MASIF_HYDRO, MASIF_SI, NT_SEQ, STRUCTURE};
use crate::tokenization::TokenizerKind;

pub const DESIGN_WIDTHS: [usize; 2] = [30, 50];

/// A masked redesign interval `[center - w/2, center + w/2)` and the
/// mutation it must stay clear of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignWindow {
    pub center: usize,
    pub width: usize,
    pub mutation: Option<usize>,
}

impl DesignWindow {
    pub fn new(center: usize, width: usize, mutation: Option<usize>, seq_len: usize) -> Result<Self> {
        if !DESIGN_WIDTHS.contains(&width) {
            return Err(invalid(format!("window width {width} not in {DESIGN_WIDTHS:?}")));
        }
        let w = Self { center, width, mutation };
        let (lo, hi) = w.interval_signed();
        if lo < 0 || hi > seq_len as i64 {
            return Err(invalid(format!("window [{lo}, {hi}) outside sequence of length {seq_len}")));
        }
        if w.overlaps_protection() {
            return Err(invalid(format!("window [{lo}, {hi}) overlaps the protected region around the mutation")));
        }
        Ok(w)
    }

    fn interval_signed(&self) -> (i64, i64) {
        let c = self.center as i64;
        let h = (self.width / 2) as i64;
        (c - h, c + h)
    }

    pub fn interval(&self) -> core::ops::Range<usize> {
        let (lo, hi) = self.interval_signed();
        lo.max(0) as usize..hi.max(0) as usize
    }

    /// Inclusive protected span `[m - w/4, m + w/4]`.
    pub fn protected(&self) -> Option<(i64, i64)> {
        self.mutation.map(|m| protected_span(m as i64, self.width))
    }

    pub fn overlaps_protection(&self) -> bool {
        let (lo, hi) = self.interval_signed();
        self.protected().is_some_and(|(a, b)| lo <= b && a < hi)
    }
}

fn protected_span(mutation: i64, width: usize) -> (i64, i64) {
    let q = (width / 4) as i64;
    (mutation - q, mutation + q)
}

/// Arithmetic progressions of window centers relative to the mutation,
/// each inclusive of both ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub ranges: Vec<(i64, i64, i64)>,
}

impl CenterSpec {
    /// Step 5 over [-300, -130], step 1 over [-130, 50], step 5 over [50, 200].
    pub fn standard() -> Self {
        Self {
            ranges: alloc::vec![(-300, -130, 5), (-130, 50, 1), (50, 200, 5)],
        }
    }
}

/// Union of the spec's progressions, sorted. With a width, centers whose
/// window would cover the protected span are removed.
pub fn window_centers(spec: &CenterSpec, width: Option<usize>) -> Vec<i64> {
    let mut set = BTreeSet::new();
    for &(start, end, step) in &spec.ranges {
        if step <= 0 {
            continue;
        }
        let mut c = start;
        while c <= end {
            set.insert(c);
            c += step;
        }
    }
    set.into_iter()
        .filter(|&c| {
            width.is_none_or(|w| {
                let h = (w / 2) as i64;
                let (a, b) = protected_span(0, w);
                !(c - h <= b && a < c + h)
            })
        })
        .collect()
}

/// Valid windows of one width around `mutation` in a sequence of `seq_len`.
pub fn enumerate_windows(spec: &CenterSpec, seq_len: usize, mutation: usize, width: usize) -> Vec<DesignWindow> {
    window_centers(spec, Some(width))
        .into_iter()
        .filter_map(|off| {
            let c = mutation as i64 + off;
            (c >= 0).then(|| DesignWindow::new(c as usize, width, Some(mutation), seq_len).ok())?
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealKind {
    Linear,
    Cosine,
    Exponential,
}

pub const ANNEAL_KINDS: [AnnealKind; 3] = [AnnealKind::Linear, AnnealKind::Cosine, AnnealKind::Exponential];

/// Value at cycle `i` of `n` moving from `start` to `end`. Exponential
/// schedules need endpoints of one strict sign and fall back to linear
/// otherwise.
pub fn anneal(kind: AnnealKind, start: f64, end: f64, i: usize, n: usize) -> f64 {
    if n < 2 || start == end {
        return start;
    }
    let f = i.min(n - 1) as f64 / (n - 1) as f64;
    match kind {
        AnnealKind::Linear => start + (end - start) * f,
        AnnealKind::Cosine => end + (start - end) * (1.0 + libm::cos(core::f64::consts::PI * f)) / 2.0,
        AnnealKind::Exponential if start * end > 0.0 => start * libm::pow(end / start, f),
        AnnealKind::Exponential => start + (end - start) * f,
    }
}

pub const T_START_GRID: [f64; 4] = [1.0, 1.5, 2.0, 3.0];
pub const T_END_GRID: [f64; 5] = [0.001, 0.01, 0.05, 0.1, 0.5];
pub const THRESHOLD_GRID: [f64; 4] = [0.15, 0.2, 0.25, 0.3];
pub const R_START_GRID: [f64; 6] = [0.25, 0.3, 0.4, 0.5, 0.7, 0.9];
pub const R_END_GRID: [f64; 4] = [0.02, 0.05, 0.08, 0.1];
pub const REPEAT_P_GRID: [f64; 2] = [0.99, 1.0];
pub const MAX_DESIGN_CYCLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignHyperparams {
    pub temperature_kind: AnnealKind,
    pub t_start: f64,
    pub t_end: f64,
    /// Acceptance threshold on the verification distance.
    pub threshold: f64,
    pub resample_kind: AnnealKind,
    /// Fraction of satisfied positions resampled anyway.
    pub r_start: f64,
    pub r_end: f64,
    /// Chance of resampling positions inside repeated-residue runs.
    pub repeat_p: f64,
    pub max_cycles: usize,
}

impl DesignHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.t_start) || !ok(self.t_end) || !ok(self.r_start) || !ok(self.r_end) {
            return Err(invalid("temperatures and resample fractions must be finite and non-negative"));
        }
        if self.r_start > 1.0 || self.r_end > 1.0 || !(0.0..=1.0).contains(&self.repeat_p) {
            return Err(invalid("fractions and probabilities must lie in [0, 1]"));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(invalid("threshold must be non-negative"));
        }
        if self.max_cycles == 0 || self.max_cycles > MAX_DESIGN_CYCLES {
            return Err(invalid(format!("max_cycles must be in 1..={MAX_DESIGN_CYCLES}")));
        }
        Ok(())
    }

    /// True when every value comes from the search grids.
    pub fn on_grid(&self) -> bool {
        T_START_GRID.contains(&self.t_start)
            && T_END_GRID.contains(&self.t_end)
            && THRESHOLD_GRID.contains(&self.threshold)
            && R_START_GRID.contains(&self.r_start)
            && R_END_GRID.contains(&self.r_end)
            && REPEAT_P_GRID.contains(&self.repeat_p)
            && self.t_end < self.t_start
            && self.r_end < self.r_start
            && self.max_cycles == MAX_DESIGN_CYCLES
    }

    /// Never rejects a position and never resamples beyond cycle one.
    pub fn vacuous() -> Self {
        Self {
            temperature_kind: AnnealKind::Linear,
            t_start: 1.0,
            t_end: 0.001,
            threshold: f64::INFINITY,
            resample_kind: AnnealKind::Linear,
            r_start: 0.0,
            r_end: 0.0,
            repeat_p: 0.0,
            max_cycles: MAX_DESIGN_CYCLES,
        }
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(grid: &[T], rng: &mut R) -> T {
    grid[rng.random_range(0..grid.len())]
}

pub fn sample_design_hyperparams<R: Rng + ?Sized>(rng: &mut R) -> DesignHyperparams {
    DesignHyperparams {
        temperature_kind: pick(&ANNEAL_KINDS, rng),
        t_start: pick(&T_START_GRID, rng),
        t_end: pick(&T_END_GRID, rng),
        threshold: pick(&THRESHOLD_GRID, rng),
        resample_kind: pick(&ANNEAL_KINDS, rng),
        r_start: pick(&R_START_GRID, rng),
        r_end: pick(&R_END_GRID, rng),
        repeat_p: pick(&REPEAT_P_GRID, rng),
        max_cycles: MAX_DESIGN_CYCLES,
    }
}

/// Draws a value token from `softmax(logits / t)`; `t == 0` is argmax.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<u32> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|x| x.is_nan()) || !(temperature >= 0.0) {
        return Err(invalid("logits must not be NaN and temperature must be non-negative"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if temperature == 0.0 {
        return Ok(logits.iter().position(|&x| x == max).unwrap() as u32);
    }
    let w: Vec<f64> = logits.iter().map(|&x| libm::exp((x - max) / temperature)).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return Ok(i as u32);
        }
        u -= wi;
    }
    Ok(w.iter().rposition(|&x| x > 0.0).unwrap() as u32)
}

/// Redesigns one nucleotide window in a single forward pass, conditioned
/// on the listed tracks of `sample`. Positions outside the window are
/// returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn design_rna_window<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    window: &DesignWindow,
    conditioning: &BTreeSet<String>,
    layout: &LayoutConfig,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let seq = sample.track(NT_SEQ).ok_or_else(|| invalid(format!("{}: no nucleotide track", sample.id)))?;
    let w = DesignWindow::new(window.center, window.width, window.mutation, seq.len())?;
    for m in conditioning {
        if sample.track(m).is_none() {
            return Err(invalid(format!("{}: conditioning track {m} is absent", sample.id)));
        }
    }
    let tok = &registry.get(NT_SEQ)?.tokenizer;
    let mut inputs = conditioning.clone();
    inputs.insert(NT_SEQ.to_string());
    let mut enc = assemble_encoder_layout(sample, registry, &inputs, layout)?;
    let range = w.interval();
    enc.mask_window(NT_SEQ, range.start, range.len(), tok.specials.mask)?;
    let dec = DecoderInput {
        segments: alloc::vec![DecoderSegment {
            modality: NT_SEQ.to_string(),
            positions: range.clone().collect(),
            targets: seq[range.clone()].to_vec(),
        }],
    };
    let logits = predict_chunked(predictor, &enc.flatten(), &dec)?;
    let logits = logits.first().ok_or(Error::Empty("predictor output"))?;
    let n = tok.n_values().min(logits.cols);
    let mut out = seq.to_vec();
    for (row, p) in range.enumerate() {
        out[p] = sample_token(&logits.row(row)[..n], temperature, rng)?;
    }
    Ok(out)
}

/// Protein conditioning menu: backbone structure tokens, the four surface
/// channels at full or 40% residue coverage, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningStrategy {
    Backbone,
    Surface40,
    Surface100,
    BackboneSurface40,
    BackboneSurface100,
}

pub const SURFACE_CHANNELS: [&str; 4] = [MASIF_SI, MASIF_CHARGE, MASIF_HBOND, MASIF_HYDRO];

impl ConditioningStrategy {
    pub const ALL: [Self; 5] = [
        Self::Backbone,
        Self::Surface40,
        Self::Surface100,
        Self::BackboneSurface40,
        Self::BackboneSurface100,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "backbone" => Self::Backbone,
            "surface40" => Self::Surface40,
            "surface100" => Self::Surface100,
            "backbone+surface40" => Self::BackboneSurface40,
            "backbone+surface100" => Self::BackboneSurface100,
            other => return Err(invalid(format!("unknown conditioning strategy {other:?}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Surface40 => "surface40",
            Self::Surface100 => "surface100",
            Self::BackboneSurface40 => "backbone+surface40",
            Self::BackboneSurface100 => "backbone+surface100",
        }
    }

    fn backbone(self) -> bool {
        matches!(self, Self::Backbone | Self::BackboneSurface40 | Self::BackboneSurface100)
    }

    fn surface_coverage(self) -> Option<f64> {
        match self {
            Self::Surface40 | Self::BackboneSurface40 => Some(0.4),
            Self::Surface100 | Self::BackboneSurface100 => Some(1.0),
            Self::Backbone => None,
        }
    }
}

/// Target tracks for protein design; `None` marks uncovered positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConditioning {
    pub length: usize,
    pub tracks: BTreeMap<String, Vec<Option<u32>>>,
}

impl DesignConditioning {
    pub fn validate(&self, registry: &ModalityRegistry) -> Result<()> {
        if self.tracks.is_empty() || self.length == 0 {
            return Err(invalid("protein design needs at least one conditioning track"));
        }
        for (m, ids) in &self.tracks {
            let d = registry.get(m)?;
            if ids.len() != self.length {
                return Err(Error::Shape(format!("conditioning track {m} has length {}, expected {}", ids.len(), self.length)));
            }
            for id in ids.iter().flatten() {
                d.tokenizer.check_id(*id)?;
            }
        }
        Ok(())
    }
}

/// Builds conditioning from a protein sample. Partial surface coverage
/// keeps a uniformly drawn subset of residues, the same for all channels.
pub fn conditioning_from_sample<R: Rng + ?Sized>(
    sample: &MultimodalSample,
    strategy: ConditioningStrategy,
    rng: &mut R,
) -> Result<DesignConditioning> {
    let length = sample
        .track(AA_SEQ)
        .map(<[u32]>::len)
        .ok_or_else(|| invalid(format!("{}: no amino-acid track", sample.id)))?;
    let fetch = |m: &str| {
        sample
            .track(m)
            .map(|t| t.iter().map(|&x| Some(x)).collect::<Vec<_>>())
            .ok_or_else(|| invalid(format!("{}: conditioning track {m} is absent", sample.id)))
    };
    let mut tracks = BTreeMap::new();
    if strategy.backbone() {
        tracks.insert(STRUCTURE.to_string(), fetch(STRUCTURE)?);
    }
    if let Some(cov) = strategy.surface_coverage() {
        let mut idx: Vec<usize> = (0..length).collect();
        crate::rng::shuffle(&mut idx, rng);
        let keep = libm::round(cov * length as f64) as usize;
        let mut covered = alloc::vec![false; length];
        for &i in &idx[..keep] {
            covered[i] = true;
        }
        for m in SURFACE_CHANNELS {
            let mut t = fetch(m)?;
            for (x, &c) in t.iter_mut().zip(&covered) {
                if !c {
                    *x = None;
                }
            }
            tracks.insert(m.to_string(), t);
        }
    }
    Ok(DesignConditioning { length, tracks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    AllSatisfied,
    MaxCycles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignCycle {
    pub cycle: usize,
    pub temperature: f64,
    pub resample_fraction: f64,
    pub sequence: Vec<u32>,
    pub unsatisfied: Vec<usize>,
    /// Positions regenerated in the next cycle.
    pub resampled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTrace {
    pub cycles: Vec<DesignCycle>,
    pub exit: ExitReason,
    /// Mean verification cross-entropy of the final design; lower ranks first.
    pub verification_loss: f64,
}

impl DesignTrace {
    pub fn final_sequence(&self) -> &[u32] {
        &self.cycles.last().expect("a trace has at least one cycle").sequence
    }
}

/// Runs positions with the same residue at least twice in a row.
pub fn repeat_run_positions(seq: &[u32]) -> Vec<usize> {
    (0..seq.len())
        .filter(|&i| (i > 0 && seq[i - 1] == seq[i]) || (i + 1 < seq.len() && seq[i + 1] == seq[i]))
        .collect()
}

fn track_distance(kind: TokenizerKind, centers: &[f64], predicted: u32, target: u32) -> f64 {
    if kind == TokenizerKind::Continuous {
        match (centers.get(predicted as usize), centers.get(target as usize)) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => f64::INFINITY,
        }
    } else if predicted == target {
        0.0
    } else {
        f64::INFINITY
    }
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| libm::exp(x - max)).sum();
    row[t] - max - libm::log(z)
}

fn design_sample(seq: &[u32], cond: &DesignConditioning, registry: &ModalityRegistry, mask_aa: &BTreeSet<usize>) -> Result<MultimodalSample> {
    let aa_mask = registry.get(AA_SEQ)?.tokenizer.specials.mask;
    let mut tracks = BTreeMap::new();
    tracks.insert(
        AA_SEQ.to_string(),
        seq.iter().enumerate().map(|(i, &x)| if mask_aa.contains(&i) { aa_mask } else { x }).collect(),
    );
    for (m, ids) in &cond.tracks {
        let mask = registry.get(m)?.tokenizer.specials.mask;
        tracks.insert(m.clone(), ids.iter().map(|x| x.unwrap_or(mask)).collect());
    }
    Ok(MultimodalSample {
        id: "design".into(),
        entity: Entity::Protein,
        cluster_id: "design".into(),
        split: Split::Test,
        tracks,
        region_labels: None,
    })
}

/// Generate-and-verify loop. Each cycle samples the marked positions at
/// the annealed temperature, predicts the conditioning tracks back from
/// the design alone, and marks covered positions whose prediction misses
/// the target by more than the threshold. Unsatisfied positions, an
/// annealed fraction of satisfied ones and (with probability `repeat_p`)
/// repeated-residue runs are regenerated next cycle.
pub fn iterative_protein_design<P: Predictor + ?Sized>(
    predictor: &P,
    registry: &ModalityRegistry,
    cond: &DesignConditioning,
    hp: &DesignHyperparams,
    layout: &LayoutConfig,
    seed: u64,
) -> Result<DesignTrace> {
    hp.validate()?;
    cond.validate(registry)?;
    let mut rng = stream_rng(seed, 0xDE5);
    let aa = &registry.get(AA_SEQ)?.tokenizer;
    let n_aa = aa.n_values();
    let len = cond.length;
    let mut seq = alloc::vec![aa.specials.mask; len];
    let mut marked: BTreeSet<usize> = (0..len).collect();
    let only_aa: BTreeSet<String> = [AA_SEQ.to_string()].into();
    let mut gen_inputs: BTreeSet<String> = cond.tracks.keys().cloned().collect();
    gen_inputs.insert(AA_SEQ.to_string());
    let mut cycles = Vec::new();
    for c in 0..hp.max_cycles {
        let temperature = anneal(hp.temperature_kind, hp.t_start, hp.t_end, c, hp.max_cycles);
        let r = anneal(hp.resample_kind, hp.r_start, hp.r_end, c, hp.max_cycles);

        let positions: Vec<usize> = marked.iter().copied().collect();
        let s = design_sample(&seq, cond, registry, &marked)?;
        let enc = assemble_encoder_layout(&s, registry, &gen_inputs, layout)?;
        let dec = DecoderInput {
            segments: alloc::vec![DecoderSegment {
                modality: AA_SEQ.to_string(),
                targets: positions.iter().map(|_| 0).collect(),
                positions: positions.clone(),
            }],
        };
        let logits = predict_chunked(predictor, &enc.flatten(), &dec)?;
        let logits = logits.first().ok_or(Error::Empty("predictor output"))?;
        for (row, &p) in positions.iter().enumerate() {
            seq[p] = sample_token(&logits.row(row)[..n_aa.min(logits.cols)], temperature, &mut rng)?;
        }

        let s = design_sample(&seq, cond, registry, &BTreeSet::new())?;
        let enc = assemble_encoder_layout(&s, registry, &only_aa, layout)?;
        let segments: Vec<DecoderSegment> = cond
            .tracks
            .iter()
            .map(|(m, ids)| {
                let covered: Vec<usize> = (0..len).filter(|&i| ids[i].is_some()).collect();
                DecoderSegment {
                    modality: m.clone(),
                    targets: covered.iter().map(|&i| ids[i].unwrap()).collect(),
                    positions: covered,
                }
            })
            .filter(|s| !s.positions.is_empty())
            .collect();
        let dec = DecoderInput { segments };
        let preds = predict_chunked(predictor, &enc.flatten(), &dec)?;
        let mut unsatisfied = BTreeSet::new();
        let (mut nll, mut count) = (0.0, 0usize);
        for (seg, l) in dec.segments.iter().zip(&preds) {
            let tok = &registry.get(&seg.modality)?.tokenizer;
            let n = tok.n_values().min(l.cols);
            for (row, (&p, &t)) in seg.positions.iter().zip(&seg.targets).enumerate() {
                let values = &l.row(row)[..n];
                if t as usize >= n {
                    continue;
                }
                let guess = sample_token(values, 0.0, &mut rng)?;
                if track_distance(tok.kind, &tok.bin_centers, guess, t) > hp.threshold {
                    unsatisfied.insert(p);
                }
                nll -= log_softmax_at(values, t as usize);
                count += 1;
            }
        }
        let verification_loss = if count > 0 { nll / count as f64 } else { 0.0 };

        let last = c + 1 == hp.max_cycles;
        let mut resampled = BTreeSet::new();
        if !unsatisfied.is_empty() && !last {
            resampled.extend(&unsatisfied);
            let mut satisfied: Vec<usize> = (0..len).filter(|i| !unsatisfied.contains(i)).collect();
            let k = libm::round(r * satisfied.len() as f64) as usize;
            crate::rng::shuffle(&mut satisfied, &mut rng);
            resampled.extend(&satisfied[..k.min(satisfied.len())]);
            if rng.random::<f64>() < hp.repeat_p {
                resampled.extend(repeat_run_positions(&seq));
            }
        }
        let done = unsatisfied.is_empty();
        cycles.push(DesignCycle {
            cycle: c + 1,
            temperature,
            resample_fraction: r,
            sequence: seq.clone(),
            unsatisfied: unsatisfied.into_iter().collect(),
            resampled: resampled.iter().copied().collect(),
        });
        if done || last {
            return Ok(DesignTrace {
                cycles,
                exit: if done { ExitReason::AllSatisfied } else { ExitReason::MaxCycles },
                verification_loss,
            });
        }
        marked = resampled;
    }
    unreachable!("max_cycles is at least one")
}

/// Indices of traces ordered by verification loss, best first.
pub fn rank_designs(traces: &[DesignTrace]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..traces.len()).collect();
    idx.sort_by(|&a, &b| traces[a].verification_loss.total_cmp(&traces[b].verification_loss));
    idx
}

pub const MIN_JOINT_RESIDUES: usize = 5;

/// Per-residue surface channels (shape index, charge, hydrogen bonding,
/// hydrophobicity) for a predicted and a native structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePair {
    pub predicted: Vec<[f64; 4]>,
    pub native: Vec<[f64; 4]>,
    /// Residues with at least one mapped vertex in both surfaces.
    pub joint: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasifScore {
    pub score: f64,
    pub joint_residues: usize,
    pub correlations: [f64; 4],
    /// Channels with zero variance, scored as correlation 0.
    pub degenerate_channels: Vec<usize>,
}

pub fn masif_similarity(pair: &SurfacePair) -> Result<MasifScore> {
    let n = pair.joint.len();
    if pair.predicted.len() != n || pair.native.len() != n {
        return Err(Error::Shape("surface pair tables differ in length".into()));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| pair.joint[i]).collect();
    if idx.iter().any(|&i| pair.predicted[i].iter().chain(&pair.native[i]).any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { where_: "surface features".into() });
    }
    if idx.len() < MIN_JOINT_RESIDUES {
        return Ok(MasifScore {
            score: 0.5,
            joint_residues: idx.len(),
            correlations: [0.0; 4],
            degenerate_channels: Vec::new(),
        });
    }
    let mut correlations = [0.0; 4];
    let mut degenerate = Vec::new();
    for (ch, corr) in correlations.iter_mut().enumerate() {
        let x: Vec<f64> = idx.iter().map(|&i| pair.predicted[i][ch]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| pair.native[i][ch]).collect();
        match pearson(&x, &y) {
            Ok(r) => *corr = r,
            Err(_) => degenerate.push(ch),
        }
    }
    let mean = correlations.iter().sum::<f64>() / 4.0;
    Ok(MasifScore {
        score: ((mean + 1.0) / 2.0).clamp(0.0, 1.0),
        joint_residues: idx.len(),
        correlations,
        degenerate_channels: degenerate,
    })
}
