//! Split-track encoder layout: grouping, group-local rotary positions, token
//! dropout and the per-head attention mask mix.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sample::{ModalityRegistry, MultimodalSample, TrackGroup};

pub const DEFAULT_ENCODER_BUDGET: usize = 10_000;
pub const DEFAULT_REGISTER_COUNT: usize = 5;
pub const MAX_TOKEN_DROPOUT: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackGroupLayout {
    pub group: TrackGroup,
    /// Modality grids in registry order; all have the group's length.
    pub modality_grids: Vec<(String, Vec<u32>)>,
    pub positions: Vec<usize>,
    pub keep_mask: Vec<bool>,
}

impl TrackGroupLayout {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn retained_positions(&self) -> Vec<usize> {
        self.positions
            .iter()
            .zip(&self.keep_mask)
            .filter(|(_, k)| **k)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn grid(&self, modality: &str) -> Option<&[u32]> {
        self.modality_grids
            .iter()
            .find(|(m, _)| m == modality)
            .map(|(_, g)| g.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayout {
    pub groups: Vec<TrackGroupLayout>,
    pub register_count: usize,
    pub total_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub encoder_budget: usize,
    pub register_count: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            encoder_budget: DEFAULT_ENCODER_BUDGET,
            register_count: DEFAULT_REGISTER_COUNT,
        }
    }
}

/// Group-local position indices: each group restarts at zero.
pub fn assign_rope_positions(lengths: &[usize]) -> Vec<Vec<usize>> {
    lengths.iter().map(|&n| (0..n).collect()).collect()
}

/// Stacks the selected input modalities into track groups. Aligned
/// modalities of a group share one grid set; each non-aligned (semantic)
/// modality forms its own group. Group order is nucleic, protein, then
/// semantic modalities in registry order.
pub fn assemble_encoder_layout(
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    inputs: &BTreeSet<String>,
    config: &LayoutConfig,
) -> Result<EncoderLayout> {
    for m in inputs {
        registry.get(m)?;
        if sample.track(m).is_none() {
            return Err(invalid(format!("input modality {m} is absent from sample {}", sample.id)));
        }
    }
    let mut groups = Vec::new();
    for group in [TrackGroup::Nucleic, TrackGroup::Protein] {
        let grids: Vec<(String, Vec<u32>)> = registry
            .modalities
            .iter()
            .filter(|d| d.track_group == group && d.aligned && inputs.contains(&d.name))
            .map(|d| (d.name.clone(), sample.track(&d.name).unwrap().to_vec()))
            .collect();
        if let Some((_, first)) = grids.first() {
            let n = first.len();
            if let Some((m, g)) = grids.iter().find(|(_, g)| g.len() != n) {
                return Err(Error::Misaligned {
                    sample: sample.id.clone(),
                    modality: m.clone(),
                    expected: n,
                    got: g.len(),
                });
            }
            groups.push(TrackGroupLayout {
                group,
                modality_grids: grids,
                positions: (0..n).collect(),
                keep_mask: alloc::vec![true; n],
            });
        }
    }
    for d in &registry.modalities {
        if inputs.contains(&d.name) && !(d.aligned && !d.track_group.is_semantic()) {
            let ids = sample.track(&d.name).unwrap().to_vec();
            let n = ids.len();
            groups.push(TrackGroupLayout {
                group: d.track_group,
                modality_grids: alloc::vec![(d.name.clone(), ids)],
                positions: (0..n).collect(),
                keep_mask: alloc::vec![true; n],
            });
        }
    }
    let total = groups.iter().map(TrackGroupLayout::len).sum::<usize>() + config.register_count;
    if total > config.encoder_budget {
        return Err(Error::OverBudget {
            total,
            budget: config.encoder_budget,
        });
    }
    Ok(EncoderLayout {
        groups,
        register_count: config.register_count,
        total_length: total,
    })
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// Drops each track position independently with probability `rate`.
/// Positions keep their indices; registers are never dropped.
pub fn apply_token_dropout<R: Rng + ?Sized>(layout: &EncoderLayout, rate: f64, rng: &mut R) -> Result<EncoderLayout> {
    check_rate(rate)?;
    let mut out = layout.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    for g in &mut out.groups {
        for k in g.keep_mask.iter_mut() {
            if *k && rng.random::<f64>() < rate {
                *k = false;
            }
        }
    }
    Ok(out)
}

impl EncoderLayout {
    /// Marks explicit indices of one group as dropped.
    pub fn drop_indices(&mut self, group: usize, indices: &[usize]) -> Result<()> {
        let g = self
            .groups
            .get_mut(group)
            .ok_or_else(|| invalid(format!("group {group} out of range")))?;
        for &i in indices {
            *g.keep_mask
                .get_mut(i)
                .ok_or_else(|| invalid(format!("index {i} out of range for group {group}")))? = false;
        }
        Ok(())
    }

    /// Replaces `modality`'s tokens over `[start, start+len)` with `mask_id`.
    pub fn mask_window(&mut self, modality: &str, start: usize, len: usize, mask_id: u32) -> Result<()> {
        for g in &mut self.groups {
            for (m, grid) in &mut g.modality_grids {
                if m == modality {
                    let end = start
                        .checked_add(len)
                        .filter(|&e| e <= grid.len())
                        .ok_or_else(|| invalid(format!("mask window out of range for {modality}")))?;
                    grid[start..end].iter_mut().for_each(|t| *t = mask_id);
                    return Ok(());
                }
            }
        }
        Err(Error::UnknownModality(modality.into()))
    }

    pub fn dropped_count(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.keep_mask.iter().filter(|k| !**k).count())
            .sum()
    }

    /// Concatenates groups (registers last) into one flat sequence.
    pub fn flatten(&self) -> FlatLayout {
        let n = self.total_length;
        let mut positions = Vec::with_capacity(n);
        let mut keep = Vec::with_capacity(n);
        let mut group_index = Vec::with_capacity(n);
        let mut grids: Vec<(String, Vec<Option<u32>>)> = Vec::new();
        let mut offset = 0;
        for (gi, g) in self.groups.iter().enumerate() {
            for (m, ids) in &g.modality_grids {
                let col = match grids.iter().position(|(name, _)| name == m) {
                    Some(c) => c,
                    None => {
                        grids.push((m.clone(), alloc::vec![None; n]));
                        grids.len() - 1
                    }
                };
                for (i, &id) in ids.iter().enumerate() {
                    grids[col].1[offset + i] = Some(id);
                }
            }
            positions.extend_from_slice(&g.positions);
            keep.extend_from_slice(&g.keep_mask);
            group_index.extend(core::iter::repeat_n(Some(gi), g.len()));
            offset += g.len();
        }
        positions.extend(0..self.register_count);
        keep.extend(core::iter::repeat_n(true, self.register_count));
        group_index.extend(core::iter::repeat_n(None, self.register_count));
        FlatLayout {
            positions,
            keep,
            group_index,
            grids,
            register_start: offset,
            register_count: self.register_count,
        }
    }
}

/// Flat encoder sequence consumed by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatLayout {
    pub positions: Vec<usize>,
    pub keep: Vec<bool>,
    /// Source group per position; `None` for registers.
    pub group_index: Vec<Option<usize>>,
    /// Per-modality token column; `None` outside the modality's group.
    pub grids: Vec<(String, Vec<Option<u32>>)>,
    pub register_start: usize,
    pub register_count: usize,
}

impl FlatLayout {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Bidirectional,
    Causal,
    Anticausal,
}

impl MaskKind {
    /// Whether query `i` may attend key `j` (flat sequence indices).
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::Bidirectional => true,
            MaskKind::Causal => j <= i,
            MaskKind::Anticausal => j >= i,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAssignment {
    pub heads: Vec<MaskKind>,
}

impl MaskAssignment {
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |k| self.heads.iter().filter(|h| **h == k).count();
        (c(MaskKind::Bidirectional), c(MaskKind::Causal), c(MaskKind::Anticausal))
    }

    pub fn all_bidirectional(n_heads: usize) -> Self {
        Self {
            heads: alloc::vec![MaskKind::Bidirectional; n_heads],
        }
    }
}

/// 50/25/25 split of heads into bidirectional/causal/anticausal; floor for
/// the directional kinds, remainder to bidirectional.
pub fn partition_attention_heads(n_heads: usize) -> MaskAssignment {
    let quarter = n_heads / 4;
    let bi = n_heads - 2 * quarter;
    let mut heads = alloc::vec![MaskKind::Bidirectional; bi];
    heads.extend(core::iter::repeat_n(MaskKind::Causal, quarter));
    heads.extend(core::iter::repeat_n(MaskKind::Anticausal, quarter));
    MaskAssignment { heads }
}
