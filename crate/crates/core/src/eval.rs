//! Evaluation metrics: masked completion, uplift grids, variant scoring,
//! splice AUPR, reactivity correlation and base-pair structure metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::layout::{assemble_encoder_layout, FlatLayout, LayoutConfig};
use crate::model::{DecoderInput, DecoderSegment, Model, Objective};
use crate::sample::{ModalityRegistry, MultimodalSample, Region};
use crate::synth::names::{NT_SEQ, SPLICE, TX_TYPE};
use crate::tensor::Mat;

/// Anything that maps an encoder layout and decoder queries to logits,
/// one matrix per decoder segment.
pub trait Predictor {
    fn predict(&self, enc: &FlatLayout, dec: &DecoderInput) -> Result<Vec<Mat>>;

    /// Largest number of decoder queries accepted by one call.
    fn decoder_budget(&self) -> usize {
        usize::MAX
    }
}

impl Predictor for Model {
    fn predict(&self, enc: &FlatLayout, dec: &DecoderInput) -> Result<Vec<Mat>> {
        Ok(self.forward(enc, dec, Objective::CrossEntropy)?.logits)
    }

    fn decoder_budget(&self) -> usize {
        self.config.decoder_budget
    }
}

/// Like [`Predictor::predict`], but splits the decoder queries into
/// consecutive chunks that fit the predictor's decoder budget.
pub fn predict_chunked<P: Predictor + ?Sized>(predictor: &P, enc: &FlatLayout, dec: &DecoderInput) -> Result<Vec<Mat>> {
    let budget = predictor.decoder_budget().max(1);
    let total: usize = dec.segments.iter().map(|s| s.positions.len()).sum();
    if total <= budget {
        return predictor.predict(enc, dec);
    }
    let mut out: Vec<Option<Mat>> = alloc::vec![None; dec.segments.len()];
    let mut pending: Vec<(usize, usize)> = Vec::new();
    let mut chunk = DecoderInput { segments: Vec::new() };
    let mut used = 0;
    let flush = |chunk: &mut DecoderInput, pending: &mut Vec<(usize, usize)>, out: &mut Vec<Option<Mat>>| -> Result<()> {
        if chunk.segments.is_empty() {
            return Ok(());
        }
        let logits = predictor.predict(enc, chunk)?;
        if logits.len() != pending.len() {
            return Err(Error::Empty("predictor output"));
        }
        for ((seg, _), m) in pending.drain(..).zip(logits) {
            match &mut out[seg] {
                Some(acc) => {
                    acc.data.extend_from_slice(&m.data);
                    acc.rows += m.rows;
                }
                slot => *slot = Some(m),
            }
        }
        chunk.segments.clear();
        Ok(())
    };
    for (i, seg) in dec.segments.iter().enumerate() {
        let mut start = 0;
        while start < seg.positions.len() {
            if used == budget {
                flush(&mut chunk, &mut pending, &mut out)?;
                used = 0;
            }
            let take = (budget - used).min(seg.positions.len() - start);
            chunk.segments.push(DecoderSegment {
                modality: seg.modality.clone(),
                positions: seg.positions[start..start + take].to_vec(),
                targets: seg.targets[start..start + take].to_vec(),
            });
            pending.push((i, take));
            used += take;
            start += take;
        }
    }
    flush(&mut chunk, &mut pending, &mut out)?;
    out.into_iter()
        .zip(&dec.segments)
        .map(|(m, seg)| Ok(m.unwrap_or_else(|| Mat::zeros(seg.positions.len(), 0))))
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Rank of `target` among `xs` (0 = top), ties broken against the target.
fn rank_of(xs: &[f64], target: usize) -> usize {
    let t = xs[target];
    xs.iter().enumerate().filter(|&(i, &x)| i != target && x >= t).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionConfig {
    pub target: String,
    pub mask_width: usize,
    /// Extra input modalities, used where the sample carries them.
    pub conditioning: BTreeSet<String>,
    pub layout: LayoutConfig,
}

impl CompletionConfig {
    pub fn new(target: &str, mask_width: usize, layout: LayoutConfig) -> Self {
        Self {
            target: target.to_string(),
            mask_width,
            conditioning: BTreeSet::new(),
            layout,
        }
    }

    pub fn conditioned_on(mut self, modalities: &[&str]) -> Self {
        self.conditioning = modalities.iter().map(|m| m.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub id: String,
    pub top1: f64,
    pub top10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub overall: Tally,
    /// Present only when every evaluated sample carries region labels.
    pub exon: Option<Tally>,
    pub intron: Option<Tally>,
    pub records: Vec<CompletionRecord>,
    pub skipped: Vec<String>,
}

impl CompletionReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy().unwrap_or(0.0)
    }
}

/// Masks a centered window of the target track and scores top-1 argmax
/// over value tokens, one forward pass per sample.
pub fn sequence_completion_eval<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[MultimodalSample],
    registry: &ModalityRegistry,
    cfg: &CompletionConfig,
) -> Result<CompletionReport> {
    if cfg.mask_width == 0 {
        return Err(invalid("mask_width must be positive"));
    }
    let desc = registry.get(&cfg.target)?;
    let n_values = desc.tokenizer.n_values();
    let mask = desc.tokenizer.specials.mask;
    let mut overall = Tally::default();
    let (mut exon, mut intron) = (Tally::default(), Tally::default());
    let mut all_labelled = true;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for s in samples {
        let Some(track) = s.track(&cfg.target) else {
            skipped.push(format!("{}: no {} track", s.id, cfg.target));
            continue;
        };
        if track.len() <= cfg.mask_width {
            skipped.push(format!("{}: length {} not above mask width", s.id, track.len()));
            continue;
        }
        let start = (track.len() - cfg.mask_width) / 2;
        let mut inputs: BTreeSet<String> = cfg
            .conditioning
            .iter()
            .filter(|m| s.track(m).is_some())
            .cloned()
            .collect();
        inputs.insert(cfg.target.clone());
        let mut layout = assemble_encoder_layout(s, registry, &inputs, &cfg.layout)?;
        layout.mask_window(&cfg.target, start, cfg.mask_width, mask)?;
        let window = start..start + cfg.mask_width;
        let dec = DecoderInput {
            segments: alloc::vec![DecoderSegment {
                modality: cfg.target.clone(),
                positions: window.clone().collect(),
                targets: track[window.clone()].to_vec(),
            }],
        };
        let logits = predict_chunked(predictor, &layout.flatten(), &dec)?;
        let logits = logits.first().ok_or(Error::Empty("predictor output"))?;
        let regions = s.region_labels.as_ref().filter(|r| r.len() == track.len());
        all_labelled &= regions.is_some();
        let (mut c1, mut c10) = (0usize, 0usize);
        for (row, pos) in window.enumerate() {
            let values = &logits.row(row)[..n_values.min(logits.cols)];
            let target = track[pos] as usize;
            let ok = target < values.len() && argmax(values) == target;
            if target < values.len() && rank_of(values, target) < 10 {
                c10 += 1;
            }
            c1 += ok as usize;
            overall.add(ok);
            if let Some(r) = regions {
                match r[pos] {
                    Region::Exon => exon.add(ok),
                    Region::Intron => intron.add(ok),
                }
            }
        }
        records.push(CompletionRecord {
            id: s.id.clone(),
            top1: c1 as f64 / cfg.mask_width as f64,
            top10: c10 as f64 / cfg.mask_width as f64,
        });
    }
    let strata = all_labelled && overall.total > 0;
    Ok(CompletionReport {
        overall,
        exon: strata.then_some(exon),
        intron: strata.then_some(intron),
        records,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpliftRecord {
    pub top1: f64,
    pub top10: f64,
    pub uplift: f64,
}

/// Mean uplift per (top-1 bin, top-10 bin) cell; `None` marks empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftGrid {
    pub bins: usize,
    pub means: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

fn unit_bin(x: f64, bins: usize) -> usize {
    ((x * bins as f64) as usize).min(bins - 1)
}

pub fn uplift_attribution(records: &[UpliftRecord], bins: usize) -> Result<UpliftGrid> {
    if records.is_empty() {
        return Err(Error::Empty("uplift records"));
    }
    if bins == 0 {
        return Err(invalid("bins must be positive"));
    }
    let mut sums = alloc::vec![alloc::vec![0.0; bins]; bins];
    let mut counts = alloc::vec![alloc::vec![0usize; bins]; bins];
    for r in records {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(r.top1) || !unit(r.top10) || !r.uplift.is_finite() {
            return Err(invalid("uplift record outside [0, 1] or non-finite"));
        }
        if r.top10 < r.top1 {
            return Err(invalid(format!("top-10 accuracy {} below top-1 {}", r.top10, r.top1)));
        }
        let (i, j) = (unit_bin(r.top1, bins), unit_bin(r.top10, bins));
        sums[i][j] += r.uplift;
        counts[i][j] += 1;
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(row, c)| row.iter().zip(c).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect())
        .collect();
    Ok(UpliftGrid { bins, means, counts })
}

/// Softmax-weighted mean of bin centers over the value tokens of a row.
pub fn expected_bin_value(row: &[f64], centers: &[f64]) -> Result<f64> {
    let n = centers.len().min(row.len());
    if n == 0 {
        return Err(Error::Empty("bin centers"));
    }
    let max = row[..n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row[..n].iter().map(|x| libm::exp(x - max)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.iter().zip(centers).map(|(a, c)| a * c).sum::<f64>() / z)
}

pub const DEFAULT_VEP_WINDOW: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScoreInput {
    pub wt_profile: Vec<f64>,
    pub mut_profile: Vec<f64>,
    pub variant_position: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VepScore {
    pub score: f64,
    pub window_start: usize,
    /// Window length after clipping at the sequence ends.
    pub window_len: usize,
}

/// Mean absolute profile change over `[pos - W/2, pos - W/2 + W)`, clipped.
pub fn phylop_vep(input: &VariantScoreInput) -> Result<VepScore> {
    let n = input.wt_profile.len();
    if input.mut_profile.len() != n {
        return Err(Error::Shape(format!("profiles of length {n} and {}", input.mut_profile.len())));
    }
    if input.window == 0 {
        return Err(invalid("zero-length window"));
    }
    if input.variant_position >= n {
        return Err(invalid(format!("variant position {} outside profile of length {n}", input.variant_position)));
    }
    let lo = input.variant_position.saturating_sub(input.window / 2);
    let hi = (input.variant_position + input.window - input.window / 2).min(n);
    let mut sum = 0.0;
    for i in lo..hi {
        let (a, b) = (input.wt_profile[i], input.mut_profile[i]);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { where_: "variant profile".into() });
        }
        sum += (b - a).abs();
    }
    Ok(VepScore {
        score: sum / (hi - lo) as f64,
        window_start: lo,
        window_len: hi - lo,
    })
}

/// Classes of the junction track, in token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpliceClass {
    NonSplice = 0,
    Donor = 1,
    Acceptor = 2,
    Tss = 3,
    Tes = 4,
}

/// Probability of class `a` under a softmax over logits `a` and `b` only.
pub fn restricted_softmax(logits: &[f64], a: usize, b: usize) -> Result<f64> {
    let (&la, &lb) = logits
        .get(a)
        .zip(logits.get(b))
        .ok_or_else(|| invalid(format!("class pair ({a}, {b}) outside {} logits", logits.len())))?;
    if la.is_nan() || lb.is_nan() {
        return Err(Error::NonFinite { where_: "logits".into() });
    }
    if la == lb {
        return Ok(0.5);
    }
    // logistic of the difference; handles infinite logits
    let d = la - lb;
    Ok(if d >= 0.0 {
        1.0 / (1.0 + libm::exp(-d))
    } else {
        let e = libm::exp(d);
        e / (1.0 + e)
    })
}

/// Area under the precision-recall step curve, thresholds swept from the
/// highest score down with tied scores entering together.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores and {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { where_: "scores".into() });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(invalid("aupr needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(invalid("pearson needs at least two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { where_: "pearson input".into() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("pearson undefined for zero variance"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Min-max scaling over finite entries. Non-finite entries count as
/// missing and stay missing; a constant input maps to zero.
pub fn normalize_reactivity(values: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    let finite = || values.iter().filter_map(|v| v.filter(|x| x.is_finite()));
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    if lo > hi {
        return Err(invalid("reactivity profile has no finite values"));
    }
    let range = hi - lo;
    Ok(values
        .iter()
        .map(|v| {
            v.filter(|x| x.is_finite())
                .map(|x| if range > 0.0 { (x - lo) / range } else { 0.0 })
        })
        .collect())
}

/// Base pairs `(i, j)` with `i < j`, 0-based.
pub type PairSet = BTreeSet<(usize, usize)>;

pub fn parse_dot_bracket(s: &str) -> Result<PairSet> {
    let mut stack = Vec::new();
    let mut pairs = PairSet::new();
    for (i, c) in s.chars().enumerate() {
        match c {
            '.' => {}
            '(' => stack.push(i),
            ')' => {
                let open = stack.pop().ok_or(Error::DotBracket {
                    index: i,
                    reason: "unmatched closing bracket",
                })?;
                pairs.insert((open, i));
            }
            _ => {
                return Err(Error::DotBracket {
                    index: i,
                    reason: "unexpected character",
                })
            }
        }
    }
    if let Some(&open) = stack.first() {
        return Err(Error::DotBracket {
            index: open,
            reason: "unmatched opening bracket",
        });
    }
    Ok(pairs)
}

/// Checks pair orientation, bounds and that no index pairs twice.
pub fn validate_pairs(pairs: &PairSet, len: usize) -> Result<()> {
    let mut used = alloc::vec![false; len];
    for &(i, j) in pairs {
        if i >= j || j >= len {
            return Err(invalid(format!("pair ({i}, {j}) invalid for length {len}")));
        }
        for k in [i, j] {
            if core::mem::replace(&mut used[k], true) {
                return Err(invalid(format!("index {k} paired twice")));
            }
        }
    }
    Ok(())
}

/// Inverse of [`parse_dot_bracket`] for nested (pseudoknot-free) pair sets.
pub fn pairs_to_dot_bracket(pairs: &PairSet, len: usize) -> Result<String> {
    validate_pairs(pairs, len)?;
    let mut out = alloc::vec!['.'; len];
    for &(i, j) in pairs {
        out[i] = '(';
        out[j] = ')';
    }
    let s: String = out.into_iter().collect();
    if parse_dot_bracket(&s)? != *pairs {
        return Err(invalid("crossing pairs have no dot-bracket form"));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEvalResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ppv: f64,
    pub sensitivity: f64,
    pub f1: f64,
}

pub fn pair_metrics(pred: &PairSet, reference: &PairSet) -> PairEvalResult {
    let tp = pred.intersection(reference).count();
    let fp = pred.len() - tp;
    let fn_ = reference.len() - tp;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let ppv = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    let f1 = if ppv + sensitivity == 0.0 {
        0.0
    } else {
        2.0 * ppv * sensitivity / (ppv + sensitivity)
    };
    PairEvalResult {
        tp,
        fp,
        fn_,
        ppv,
        sensitivity,
        f1,
    }
}

/// Positive when the structure-guided prediction is closer to the reference.
pub fn delta_f1(f1_pred: f64, f1_seq: f64) -> Result<f64> {
    for f in [f1_pred, f1_seq] {
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid(format!("F1 {f} outside [0, 1]")));
        }
    }
    Ok(f1_pred - f1_seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeiganParams {
    pub m: f64,
    pub b: f64,
}

impl Default for DeiganParams {
    fn default() -> Self {
        Self { m: 1.8, b: -0.6 }
    }
}

/// Per-nucleotide pseudo-energy `m * ln(r + 1) + b`.
pub fn deigan_pseudo_energy(r: f64, params: &DeiganParams) -> Result<f64> {
    if !params.m.is_finite() || !params.b.is_finite() {
        return Err(Error::NonFinite { where_: "Deigan parameters".into() });
    }
    if !(r >= 0.0 && r.is_finite()) {
        return Err(invalid(format!("reactivity {r} must be finite and non-negative")));
    }
    Ok(params.m * libm::log1p(r) + params.b)
}

pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences used.
    pub n: usize,
    /// Rank sum of positive differences.
    pub w_plus: f64,
    pub p_two_sided: f64,
    /// Alternative: first member of each pair is larger.
    pub p_one_sided: f64,
    pub exact: bool,
    pub median_difference: f64,
}

/// Average ranks of `xs` (1-based), ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = alloc::vec![0.0; xs.len()];
    let mut k = 0;
    while k < order.len() {
        let mut e = k;
        while e + 1 < order.len() && xs[order[e + 1]] == xs[order[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &order[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Signed-rank test on paired scores. Zero differences are discarded and
/// tied magnitudes share average ranks. The null is enumerated exactly up
/// to [`WILCOXON_EXACT_MAX_N`] differences; above that a tie- and
/// continuity-corrected normal approximation is used. The one-sided value
/// halves the two-sided one when the median difference is positive and is
/// `1 - p/2` otherwise.
pub fn wilcoxon_signed_rank_one_sided(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::NonFinite { where_: "paired scores".into() });
    }
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return Err(invalid("all paired differences are zero"));
    }
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mu = (n * (n + 1)) as f64 / 4.0;
    let (p_two, exact) = if n <= WILCOXON_EXACT_MAX_N {
        // doubled ranks are integers, so the null is a subset-sum count
        let doubled: Vec<usize> = ranks.iter().map(|r| libm::round(2.0 * r) as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = alloc::vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total = libm::pow(2.0, n as f64);
        let w2 = libm::round(2.0 * w_plus) as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / total;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / total;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let mut tie_term = 0.0;
        let mut sorted = mags.clone();
        sorted.sort_by(f64::total_cmp);
        let mut k = 0;
        while k < n {
            let mut e = k;
            while e + 1 < n && sorted[e + 1] == sorted[k] {
                e += 1;
            }
            let t = (e - k + 1) as f64;
            tie_term += t * t * t - t;
            k = e + 1;
        }
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((w_plus - mu).abs() - 0.5).max(0.0) / libm::sqrt(var);
        (libm::erfc(z / core::f64::consts::SQRT_2).min(1.0), false)
    };
    let med = median(&d);
    let p_one = if med > 0.0 { p_two / 2.0 } else { 1.0 - p_two / 2.0 };
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_two_sided: p_two,
        p_one_sided: p_one,
        exact,
        median_difference: med,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpliceConditioning {
    None,
    /// Reveal TSS/TES tokens of the junction track as input.
    TssTes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceConfig {
    pub conditioning: SpliceConditioning,
    /// Genomic context kept on either side of the transcript span.
    pub flank: usize,
    pub layout: LayoutConfig,
}

impl SpliceConfig {
    pub fn new(conditioning: SpliceConditioning, layout: LayoutConfig) -> Self {
        Self {
            conditioning,
            flank: 200,
            layout,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplicePool {
    pub donor_scores: Vec<f64>,
    pub donor_labels: Vec<bool>,
    pub acceptor_scores: Vec<f64>,
    pub acceptor_labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpliceAupr {
    pub donor: Option<f64>,
    pub acceptor: Option<f64>,
    /// Mean of the per-class values.
    pub macro_avg: Option<f64>,
    /// Single curve over donor and acceptor decisions pooled.
    pub micro_avg: Option<f64>,
    pub positions: usize,
}

impl SplicePool {
    fn extend(&mut self, o: &SplicePool) {
        self.donor_scores.extend(&o.donor_scores);
        self.donor_labels.extend(&o.donor_labels);
        self.acceptor_scores.extend(&o.acceptor_scores);
        self.acceptor_labels.extend(&o.acceptor_labels);
    }

    pub fn summarize(&self) -> SpliceAupr {
        let d = aupr(&self.donor_scores, &self.donor_labels).ok();
        let a = aupr(&self.acceptor_scores, &self.acceptor_labels).ok();
        let mut scores = self.donor_scores.clone();
        scores.extend(&self.acceptor_scores);
        let mut labels = self.donor_labels.clone();
        labels.extend(&self.acceptor_labels);
        SpliceAupr {
            donor: d,
            acceptor: a,
            macro_avg: d.zip(a).map(|(x, y)| (x + y) / 2.0),
            micro_avg: aupr(&scores, &labels).ok(),
            positions: self.donor_scores.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceReport {
    pub overall: SpliceAupr,
    /// Keyed by `coding`, `noncoding` or `unknown`.
    pub strata: BTreeMap<String, SpliceAupr>,
    pub skipped: Vec<String>,
}

fn coding_stratum(sample: &MultimodalSample, registry: &ModalityRegistry) -> String {
    let label = sample
        .track(TX_TYPE)
        .and_then(|ids| ids.first().copied())
        .zip(registry.get(TX_TYPE).ok())
        .and_then(|(id, d)| d.tokenizer.vocab.get(id as usize).cloned());
    match label.as_deref() {
        Some("protein_coding") => "coding".into(),
        Some(_) => "noncoding".into(),
        None => "unknown".into(),
    }
}

/// Per-position donor and acceptor probabilities for one sample, scored
/// over the transcript span.
pub fn splice_scores<P: Predictor + ?Sized>(
    predictor: &P,
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    cfg: &SpliceConfig,
) -> Result<SplicePool> {
    let labels = sample.track(SPLICE).ok_or_else(|| invalid(format!("{}: no junction track", sample.id)))?;
    if sample.track(NT_SEQ).is_none() {
        return Err(invalid(format!("{}: no nucleotide track", sample.id)));
    }
    let len = labels.len();
    let find = |c: SpliceClass| labels.iter().position(|&l| l == c as u32);
    let tss = find(SpliceClass::Tss).unwrap_or(0);
    let tes = find(SpliceClass::Tes).unwrap_or(len.saturating_sub(1)).max(tss);
    let lo = tss.saturating_sub(cfg.flank);
    let hi = (tes + cfg.flank + 1).min(len);
    let mut s = sample.clone();
    s.crop_nucleic(registry, lo, hi - lo);
    let mut inputs: BTreeSet<String> = [NT_SEQ.to_string()].into();
    if cfg.conditioning == SpliceConditioning::TssTes {
        let mask = registry.get(SPLICE)?.tokenizer.specials.mask;
        let junctions = s.tracks.get_mut(SPLICE).unwrap();
        for id in junctions.iter_mut() {
            if *id != SpliceClass::Tss as u32 && *id != SpliceClass::Tes as u32 {
                *id = mask;
            }
        }
        inputs.insert(SPLICE.to_string());
    }
    let layout = assemble_encoder_layout(&s, registry, &inputs, &cfg.layout)?;
    let span: Vec<usize> = (tss - lo..=tes - lo).collect();
    let dec = DecoderInput {
        segments: alloc::vec![DecoderSegment {
            modality: SPLICE.to_string(),
            positions: span.clone(),
            targets: span.iter().map(|&p| labels[p + lo]).collect(),
        }],
    };
    let logits = predict_chunked(predictor, &layout.flatten(), &dec)?;
    let logits = logits.first().ok_or(Error::Empty("predictor output"))?;
    let mut pool = SplicePool::default();
    for (row, &p) in span.iter().enumerate() {
        let l = logits.row(row);
        let truth = labels[p + lo];
        pool.donor_scores
            .push(restricted_softmax(l, SpliceClass::Donor as usize, SpliceClass::NonSplice as usize)?);
        pool.donor_labels.push(truth == SpliceClass::Donor as u32);
        pool.acceptor_scores
            .push(restricted_softmax(l, SpliceClass::Acceptor as usize, SpliceClass::NonSplice as usize)?);
        pool.acceptor_labels.push(truth == SpliceClass::Acceptor as u32);
    }
    Ok(pool)
}

/// Pools per-position scores across records and reports AUPR overall and
/// by coding status. Records without any donor or acceptor are skipped.
pub fn splice_site_eval<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[MultimodalSample],
    registry: &ModalityRegistry,
    cfg: &SpliceConfig,
) -> Result<SpliceReport> {
    let mut overall = SplicePool::default();
    let mut strata: BTreeMap<String, SplicePool> = BTreeMap::new();
    let mut skipped = Vec::new();
    for s in samples {
        let Some(labels) = s.track(SPLICE) else {
            skipped.push(format!("{}: no junction track", s.id));
            continue;
        };
        let has = |c: SpliceClass| labels.contains(&(c as u32));
        if !has(SpliceClass::Donor) && !has(SpliceClass::Acceptor) {
            skipped.push(format!("{}: no positive splice sites", s.id));
            continue;
        }
        let pool = splice_scores(predictor, s, registry, cfg)?;
        overall.extend(&pool);
        strata.entry(coding_stratum(s, registry)).or_default().extend(&pool);
    }
    Ok(SpliceReport {
        overall: overall.summarize(),
        strata: strata.into_iter().map(|(k, v)| (k, v.summarize())).collect(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::synth::{default_registry, generate_synthetic_corpus, GeneratorRecipe};
    use rand::Rng;

    /// Reads the true targets back as saturated logits.
    struct Oracle(usize);

    impl Predictor for Oracle {
        fn predict(&self, _: &FlatLayout, dec: &DecoderInput) -> Result<Vec<Mat>> {
            Ok(dec
                .segments
                .iter()
                .map(|s| {
                    let mut m = Mat::zeros(s.targets.len(), self.0);
                    for (r, &t) in s.targets.iter().enumerate() {
                        m.set(r, t as usize, 50.0);
                    }
                    m
                })
                .collect())
        }
    }

    struct Flat(usize);

    impl Predictor for Flat {
        fn predict(&self, _: &FlatLayout, dec: &DecoderInput) -> Result<Vec<Mat>> {
            Ok(dec.segments.iter().map(|s| Mat::zeros(s.targets.len(), self.0)).collect())
        }
    }

    #[test]
    fn oracle_completion_is_perfect_with_strata() {
        let reg = default_registry(8);
        let recipe = GeneratorRecipe::named("splice-bounds").unwrap();
        let corpus = generate_synthetic_corpus(&recipe, &reg, 6, 3).unwrap();
        let cfg = CompletionConfig::new(NT_SEQ, 10, LayoutConfig::default());
        let r = sequence_completion_eval(&Oracle(7), &corpus, &reg, &cfg).unwrap();
        assert_eq!(r.accuracy(), 1.0);
        assert!(r.exon.is_some() && r.intron.is_some());
        assert_eq!(r.records.len(), 6);
        let r = sequence_completion_eval(&Oracle(7), &corpus, &reg, &CompletionConfig::new(NT_SEQ, 500, LayoutConfig::default())).unwrap();
        assert_eq!(r.skipped.len(), 6);
    }

    #[test]
    fn uplift_grid_means() {
        let recs = [
            UpliftRecord { top1: 0.1, top10: 0.9, uplift: 0.2 },
            UpliftRecord { top1: 0.1, top10: 0.95, uplift: 0.4 },
            UpliftRecord { top1: 0.8, top10: 1.0, uplift: -0.1 },
        ];
        let g = uplift_attribution(&recs, 4).unwrap();
        assert!((g.means[0][3].unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(g.means[3][3], Some(-0.1));
        assert_eq!(g.means[1][1], None);
        let same = [UpliftRecord { top1: 0.5, top10: 0.6, uplift: 0.7 }; 5];
        let g = uplift_attribution(&same, 3).unwrap();
        assert_eq!(g.counts.iter().flatten().filter(|&&c| c > 0).count(), 1);
        assert!(uplift_attribution(&[UpliftRecord { top1: 0.5, top10: 0.4, uplift: 0.0 }], 3).is_err());
    }

    #[test]
    fn vep_examples() {
        let wt: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let mut input = VariantScoreInput {
            wt_profile: wt.clone(),
            mut_profile: wt.clone(),
            variant_position: 50,
            window: 30,
        };
        assert_eq!(phylop_vep(&input).unwrap().score, 0.0);
        input.mut_profile = wt.iter().map(|x| x + 0.5).collect();
        let s = phylop_vep(&input).unwrap();
        assert!((s.score - 0.5).abs() < 1e-12);
        assert_eq!((s.window_start, s.window_len), (35, 30));
        input.variant_position = 3;
        assert_eq!(phylop_vep(&input).unwrap().window_len, 18);
        input.window = 0;
        assert!(phylop_vep(&input).is_err());
    }

    #[test]
    fn restricted_softmax_examples() {
        assert_eq!(restricted_softmax(&[1.0, 1.0, 0.0, 0.0, 0.0], 1, 0).unwrap(), 0.5);
        let p = restricted_softmax(&[libm::log(3.0), 0.0, 0.0, 0.0, 0.0], 1, 0).unwrap();
        assert!((p - 0.25).abs() < 1e-15);
        assert_eq!(restricted_softmax(&[0.0, f64::INFINITY, 0.0], 1, 0).unwrap(), 1.0);
        assert_eq!(restricted_softmax(&[0.0, 1e308, 0.0], 1, 0).unwrap(), 1.0);
        assert!(restricted_softmax(&[0.0; 5], 1, 7).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap(), 1.0);
        let labels = [true, false, false, false, true];
        assert!((aupr(&[0.3; 5], &labels).unwrap() - 0.4).abs() < 1e-15);
        assert!(aupr(&[0.1, 0.2], &[false, false]).is_err());
        // worst ranking: positive last among 4
        assert!((aupr(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 10]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_reactivity(&[Some(0.0), Some(5.0), Some(10.0), None]).unwrap();
        assert_eq!(n, [Some(0.0), Some(0.5), Some(1.0), None]);
        assert_eq!(normalize_reactivity(&[Some(3.0); 3]).unwrap(), [Some(0.0); 3]);
        let unit = [Some(0.0), Some(0.25), Some(1.0)];
        assert_eq!(normalize_reactivity(&unit).unwrap(), unit);
        assert!(normalize_reactivity(&[None, Some(f64::NAN)]).is_err());
    }

    #[test]
    fn dot_bracket_examples() {
        assert_eq!(parse_dot_bracket("((..))").unwrap(), PairSet::from([(0, 5), (1, 4)]));
        assert!(parse_dot_bracket("....").unwrap().is_empty());
        assert_eq!(
            parse_dot_bracket(")(").unwrap_err(),
            Error::DotBracket { index: 0, reason: "unmatched closing bracket" }
        );
        assert!(matches!(parse_dot_bracket("(()"), Err(Error::DotBracket { index: 0, .. })));
        assert!(matches!(parse_dot_bracket("(x)"), Err(Error::DotBracket { index: 1, .. })));
        let s = "((.(..)).)..";
        assert_eq!(pairs_to_dot_bracket(&parse_dot_bracket(s).unwrap(), s.len()).unwrap(), s);
        assert!(pairs_to_dot_bracket(&PairSet::from([(0, 2), (1, 3)]), 4).is_err());
    }

    #[test]
    fn pair_metric_examples() {
        let a = PairSet::from([(0, 5), (2, 9)]);
        let b = PairSet::from([(0, 5), (1, 4)]);
        let r = pair_metrics(&a, &b);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
        assert_eq!(r.f1, 0.5);
        assert_eq!(pair_metrics(&b, &b).f1, 1.0);
        assert_eq!(pair_metrics(&PairSet::from([(3, 8)]), &b).f1, 0.0);
        assert_eq!(pair_metrics(&PairSet::new(), &PairSet::new()).f1, 0.0);
    }

    #[test]
    fn delta_f1_and_deigan() {
        assert!((delta_f1(0.987, 0.404).unwrap() - 0.583).abs() < 1e-12);
        assert_eq!(delta_f1(1.0, 0.0).unwrap(), 1.0);
        assert!(delta_f1(1.2, 0.0).is_err());
        let p = DeiganParams::default();
        assert_eq!(deigan_pseudo_energy(0.0, &p).unwrap(), -0.6);
        assert!((deigan_pseudo_energy(core::f64::consts::E - 1.0, &p).unwrap() - 1.2).abs() < 1e-12);
        assert!(deigan_pseudo_energy(-0.1, &p).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, 0.0)).collect();
        let r = wilcoxon_signed_rank_one_sided(&pairs).unwrap();
        assert!((r.p_one_sided - 1.0 / 32.0).abs() < 1e-15);
        let sym = [(1.0, 0.0), (0.0, 1.0), (2.0, 0.0), (0.0, 2.0)];
        assert_eq!(wilcoxon_signed_rank_one_sided(&sym).unwrap().p_two_sided, 1.0);
        assert!(wilcoxon_signed_rank_one_sided(&[(0.3, 0.3)]).is_err());
        let mut rng = stream_rng(4, 0);
        let big: Vec<(f64, f64)> = (0..40).map(|_| (rng.random::<f64>() + 0.2, rng.random::<f64>())).collect();
        let r = wilcoxon_signed_rank_one_sided(&big).unwrap();
        assert!(!r.exact && r.p_one_sided < 0.05);
    }

    #[test]
    fn splice_oracle_and_flat() {
        let reg = default_registry(8);
        let recipe = GeneratorRecipe::named("splice-bounds").unwrap();
        let corpus = generate_synthetic_corpus(&recipe, &reg, 8, 5).unwrap();
        let cfg = SpliceConfig::new(SpliceConditioning::TssTes, LayoutConfig::default());
        let r = splice_site_eval(&Oracle(8), &corpus, &reg, &cfg).unwrap();
        assert_eq!(r.overall.macro_avg, Some(1.0));
        assert_eq!(r.overall.micro_avg, Some(1.0));
        let flat = splice_site_eval(&Flat(8), &corpus, &reg, &cfg).unwrap();
        let pool_rate = {
            let mut p = SplicePool::default();
            for s in &corpus {
                p.extend(&splice_scores(&Flat(8), s, &reg, &cfg).unwrap());
            }
            p.donor_labels.iter().filter(|&&l| l).count() as f64 / p.donor_labels.len() as f64
        };
        assert!((flat.overall.donor.unwrap() - pool_rate).abs() < 1e-12);
    }
}
