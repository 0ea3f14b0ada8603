//! Partially observed multimodal samples and the modality registry.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tokenization::{TokenizerKind, TokenizerSpec};

/// Coordinate system a modality lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackGroup {
    Nucleic,
    Protein,
    SemanticContext,
    SemanticCaption,
    SemanticTaxonomy,
}

impl TrackGroup {
    pub fn is_semantic(self) -> bool {
        !matches!(self, TrackGroup::Nucleic | TrackGroup::Protein)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrackGroup::Nucleic => "nucleic",
            TrackGroup::Protein => "protein",
            TrackGroup::SemanticContext => "semantic_context",
            TrackGroup::SemanticCaption => "semantic_caption",
            TrackGroup::SemanticTaxonomy => "semantic_taxonomy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub name: String,
    pub track_group: TrackGroup,
    pub tokenizer: TokenizerSpec,
    /// Shares the coordinate system of its group's anchor.
    pub aligned: bool,
    /// The group's anchor sequence (nucleotides or amino acids).
    #[serde(default)]
    pub anchor: bool,
}

/// Ordered set of known modalities. Order fixes layout and parameter order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModalityRegistry {
    pub modalities: Vec<ModalityDescriptor>,
}

impl ModalityRegistry {
    pub fn new(modalities: Vec<ModalityDescriptor>) -> Result<Self> {
        let reg = Self { modalities };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        let mut anchors = BTreeMap::new();
        for d in &self.modalities {
            d.tokenizer.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(invalid(format!("modality {:?} registered twice", d.name)));
            }
            if d.anchor {
                if !d.aligned || d.track_group.is_semantic() {
                    return Err(invalid(format!("anchor {:?} must be an aligned nucleic/protein track", d.name)));
                }
                if anchors.insert(d.track_group, d.name.as_str()).is_some() {
                    return Err(invalid(format!("group {} has two anchors", d.track_group.as_str())));
                }
            }
            if d.aligned && d.track_group.is_semantic() {
                return Err(invalid(format!("semantic modality {:?} cannot be aligned", d.name)));
            }
        }
        for d in &self.modalities {
            if d.aligned && !anchors.contains_key(&d.track_group) {
                return Err(invalid(format!("group of {:?} has no anchor", d.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ModalityDescriptor> {
        self.modalities
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.modalities.iter().any(|d| d.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|d| d.name == name)
    }

    pub fn anchor_of(&self, group: TrackGroup) -> Option<&ModalityDescriptor> {
        self.modalities.iter().find(|d| d.anchor && d.track_group == group)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Rna,
    Protein,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Exon,
    Intron,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: String,
    pub entity: Entity,
    pub cluster_id: String,
    pub split: Split,
    pub tracks: BTreeMap<String, Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_labels: Option<Vec<Region>>,
}

/// Sorted set of modalities present in a sample.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct PresenceSignature(pub BTreeSet<String>);

impl PresenceSignature {
    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn contains_all<'a, I: IntoIterator<Item = &'a String>>(&self, names: I) -> bool {
        names.into_iter().all(|n| self.0.contains(n))
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.0.iter()
    }
}

pub fn presence_signature(sample: &MultimodalSample) -> PresenceSignature {
    PresenceSignature(sample.tracks.keys().cloned().collect())
}

impl MultimodalSample {
    pub fn track(&self, name: &str) -> Option<&[u32]> {
        self.tracks.get(name).map(|v| v.as_slice())
    }

    /// Length of the anchor sequence of `group`, if present.
    pub fn group_len(&self, registry: &ModalityRegistry, group: TrackGroup) -> Option<usize> {
        let anchor = registry.anchor_of(group)?;
        self.tracks.get(&anchor.name).map(|t| t.len())
    }

    /// Checks registry membership, token ranges, anchor presence and alignment.
    pub fn validate(&self, registry: &ModalityRegistry) -> Result<()> {
        let mut anchor_lens: BTreeMap<TrackGroup, usize> = BTreeMap::new();
        for (name, ids) in &self.tracks {
            let d = registry.get(name)?;
            for &id in ids {
                d.tokenizer.check_id(id)?;
            }
            if d.anchor {
                anchor_lens.insert(d.track_group, ids.len());
            }
            if d.tokenizer.kind == TokenizerKind::Class && ids.len() != 1 {
                return Err(invalid(format!("class track {name:?} must hold one token")));
            }
        }
        let need: &[TrackGroup] = match self.entity {
            Entity::Rna => &[TrackGroup::Nucleic],
            Entity::Protein => &[TrackGroup::Protein],
            Entity::Paired => &[TrackGroup::Nucleic, TrackGroup::Protein],
        };
        for g in need {
            if !anchor_lens.contains_key(g) {
                return Err(invalid(format!(
                    "sample {:?} lacks its {} anchor sequence",
                    self.id,
                    g.as_str()
                )));
            }
        }
        for (name, ids) in &self.tracks {
            let d = registry.get(name)?;
            if d.aligned {
                let expected = *anchor_lens.get(&d.track_group).ok_or_else(|| {
                    invalid(format!("aligned track {name:?} present without its anchor"))
                })?;
                if ids.len() != expected {
                    return Err(Error::Misaligned {
                        sample: self.id.clone(),
                        modality: name.clone(),
                        expected,
                        got: ids.len(),
                    });
                }
            }
        }
        if let Some(labels) = &self.region_labels {
            let expected = anchor_lens.get(&TrackGroup::Nucleic).copied().unwrap_or(0);
            if labels.len() != expected {
                return Err(Error::Misaligned {
                    sample: self.id.clone(),
                    modality: "region_labels".into(),
                    expected,
                    got: labels.len(),
                });
            }
        }
        if self.cluster_id.is_empty() {
            return Err(invalid(format!("sample {:?} has no cluster id", self.id)));
        }
        Ok(())
    }

    /// Restricts the nucleic group (all aligned grids and region labels) to
    /// `start..start + len`.
    pub fn crop_nucleic(&mut self, registry: &ModalityRegistry, start: usize, len: usize) {
        for (name, ids) in self.tracks.iter_mut() {
            if let Ok(d) = registry.get(name) {
                if d.aligned && d.track_group == TrackGroup::Nucleic {
                    let end = (start + len).min(ids.len());
                    *ids = ids[start.min(end)..end].to_vec();
                }
            }
        }
        if let Some(labels) = self.region_labels.as_mut() {
            let end = (start + len).min(labels.len());
            *labels = labels[start.min(end)..end].to_vec();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Assigns one split per cluster, so cluster members never straddle splits.
///
/// Clusters are visited in sorted id order and each draws one uniform variate
/// from a stream seeded by `seed`.
pub fn assign_splits(samples: &mut [MultimodalSample], fractions: SplitFractions, seed: u64) -> Result<()> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid("split fractions must be non-negative and sum to 1"));
    }
    if let Some(s) = samples.iter().find(|s| s.cluster_id.is_empty()) {
        return Err(invalid(format!("sample {:?} has no cluster id", s.id)));
    }
    let clusters: BTreeSet<&str> = samples.iter().map(|s| s.cluster_id.as_str()).collect();
    let mut rng = crate::rng::stream_rng(seed, 0);
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for c in clusters {
        let u: f64 = rng.random();
        let split = if u < f[0] {
            Split::Train
        } else if u < f[0] + f[1] {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(c.to_string(), split);
    }
    for s in samples.iter_mut() {
        s.split = assignment[&s.cluster_id];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::default_registry;
    use alloc::vec;

    fn sample(id: &str, cluster: &str, tracks: &[(&str, Vec<u32>)]) -> MultimodalSample {
        MultimodalSample {
            id: id.into(),
            entity: Entity::Rna,
            cluster_id: cluster.into(),
            split: Split::Train,
            tracks: tracks.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            region_labels: None,
        }
    }

    #[test]
    fn signature_is_sorted_and_value_independent() {
        let a = sample("a", "c", &[("phylop", vec![1, 2]), ("nt_seq", vec![0, 1]), ("splice_junctions", vec![0, 0])]);
        let b = sample("b", "c", &[("nt_seq", vec![3, 3]), ("splice_junctions", vec![1, 2]), ("phylop", vec![0, 0])]);
        let sa = presence_signature(&a);
        assert_eq!(
            sa.iter().cloned().collect::<Vec<_>>(),
            vec!["nt_seq", "phylop", "splice_junctions"]
        );
        assert_eq!(sa, presence_signature(&b));
        let only = sample("c", "c", &[("nt_seq", vec![0])]);
        assert_eq!(presence_signature(&only).0.len(), 1);
    }

    #[test]
    fn alignment_enforced() {
        let reg = default_registry(16);
        let ok = sample("a", "c", &[("nt_seq", vec![0, 1, 2]), ("aux", vec![1, 1, 1])]);
        ok.validate(&reg).unwrap();
        let bad = sample("a", "c", &[("nt_seq", vec![0, 1, 2]), ("aux", vec![1, 1])]);
        assert!(matches!(bad.validate(&reg), Err(Error::Misaligned { .. })));
        let no_anchor = sample("a", "c", &[("aux", vec![1, 1])]);
        assert!(no_anchor.validate(&reg).is_err());
        let unknown = sample("a", "c", &[("nt_seq", vec![0]), ("bogus", vec![0])]);
        assert_eq!(unknown.validate(&reg), Err(Error::UnknownModality("bogus".into())));
    }

    #[test]
    fn single_cluster_single_split() {
        let mut xs: Vec<_> = (0..20).map(|i| sample(&format!("s{i}"), "only", &[])).collect();
        assign_splits(&mut xs, SplitFractions::default(), 3).unwrap();
        assert!(xs.iter().all(|s| s.split == xs[0].split));
    }

    #[test]
    fn shared_cluster_never_straddles() {
        let mut xs: Vec<_> = (0..300)
            .map(|i| sample(&format!("s{i}"), &format!("c{}", i % 37), &[]))
            .collect();
        assign_splits(&mut xs, SplitFractions::default(), 9).unwrap();
        let mut by_cluster: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for s in &xs {
            by_cluster.entry(&s.cluster_id).or_default().insert(s.split);
        }
        assert!(by_cluster.values().all(|s| s.len() == 1));
    }

    #[test]
    fn singleton_split_counts_within_three_sigma() {
        let n = 1000;
        let mut xs: Vec<_> = (0..n).map(|i| sample(&format!("s{i}"), &format!("c{i}"), &[])).collect();
        assign_splits(&mut xs, SplitFractions::default(), 2024).unwrap();
        for (split, p) in [(Split::Train, 0.8), (Split::Val, 0.1), (Split::Test, 0.1)] {
            let k = xs.iter().filter(|s| s.split == split).count() as f64;
            let mean = n as f64 * p;
            let sd = libm::sqrt(n as f64 * p * (1.0 - p));
            assert!((k - mean).abs() <= 3.0 * sd, "{split:?}: {k} vs {mean}");
        }
    }

    #[test]
    fn split_errors() {
        let mut xs = vec![sample("a", "", &[])];
        assert!(assign_splits(&mut xs, SplitFractions::default(), 0).is_err());
        let mut ys = vec![sample("a", "c", &[])];
        let bad = SplitFractions { train: 0.5, val: 0.1, test: 0.1 };
        assert!(assign_splits(&mut ys, bad, 0).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let mk = || -> Vec<_> { (0..50).map(|i| sample(&format!("s{i}"), &format!("c{i}"), &[])).collect() };
        let mut a = mk();
        let mut b = mk();
        assign_splits(&mut a, SplitFractions::default(), 5).unwrap();
        assign_splits(&mut b, SplitFractions::default(), 5).unwrap();
        assert_eq!(a, b);
    }
}
