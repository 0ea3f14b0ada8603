//! Training pathways: which modalities a step conditions on and predicts.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::layout::EncoderLayout;
use crate::model::{DecoderInput, DecoderSegment};
use crate::sample::{presence_signature, ModalityRegistry, MultimodalSample, PresenceSignature, TrackGroup};
use crate::synth::names::*;

pub const DEFAULT_DECODER_BUDGET: usize = 1_000;
pub const DEFAULT_OPTIONAL_INPUT_P: f64 = 0.5;

fn default_p() -> f64 {
    DEFAULT_OPTIONAL_INPUT_P
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    pub name: String,
    #[serde(default)]
    pub inputs_required: BTreeSet<String>,
    #[serde(default)]
    pub inputs_optional: BTreeSet<String>,
    #[serde(default)]
    pub targets_required: BTreeSet<String>,
    #[serde(default)]
    pub targets_optional: BTreeSet<String>,
    pub weight: f64,
    #[serde(default = "default_p")]
    pub optional_input_p: f64,
    /// Greedy packing priority of optional targets (higher first, default 0).
    #[serde(default)]
    pub priority: BTreeMap<String, i64>,
    /// When set, a target that is also a selected input is predicted over a
    /// random contiguous span of this fraction of its length; the input is
    /// masked there.
    #[serde(default)]
    pub span_fraction: Option<f64>,
}

fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Pathway {
    pub fn new(name: &str, i_req: &[&str], i_opt: &[&str], t_req: &[&str], t_opt: &[&str], weight: f64) -> Result<Self> {
        Self::build(name, i_req, i_opt, t_req, t_opt, weight, None)
    }

    /// Like [`Pathway::new`] with a self-target span fraction.
    pub fn spanned(name: &str, i_req: &[&str], i_opt: &[&str], t_req: &[&str], t_opt: &[&str], weight: f64, span: f64) -> Result<Self> {
        Self::build(name, i_req, i_opt, t_req, t_opt, weight, Some(span))
    }

    fn build(
        name: &str,
        i_req: &[&str],
        i_opt: &[&str],
        t_req: &[&str],
        t_opt: &[&str],
        weight: f64,
        span_fraction: Option<f64>,
    ) -> Result<Self> {
        let p = Self {
            name: name.to_string(),
            inputs_required: set(i_req),
            inputs_optional: set(i_opt),
            targets_required: set(t_req),
            targets_optional: set(t_opt),
            weight,
            optional_input_p: DEFAULT_OPTIONAL_INPUT_P,
            priority: BTreeMap::new(),
            span_fraction,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(invalid(format!("pathway {} needs a positive finite weight", self.name)));
        }
        if !(0.0..=1.0).contains(&self.optional_input_p) {
            return Err(invalid(format!("pathway {} optional_input_p outside [0, 1]", self.name)));
        }
        if let Some(f) = self.span_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid(format!("pathway {} span_fraction outside (0, 1]", self.name)));
            }
        }
        let overlap: Vec<&String> = self.inputs_required.intersection(&self.targets_required).collect();
        if !overlap.is_empty() && self.span_fraction.is_none() {
            return Err(invalid(format!(
                "pathway {} requires {:?} as both input and target without a span",
                self.name, overlap
            )));
        }
        Ok(())
    }

    pub fn requirements(&self) -> impl Iterator<Item = &String> {
        self.inputs_required.iter().chain(&self.targets_required)
    }

    pub fn modalities(&self) -> BTreeSet<&String> {
        self.inputs_required
            .iter()
            .chain(&self.inputs_optional)
            .chain(&self.targets_required)
            .chain(&self.targets_optional)
            .collect()
    }
}

pub fn validate_pathways(pathways: &[Pathway], registry: &ModalityRegistry) -> Result<()> {
    let mut names = BTreeSet::new();
    for p in pathways {
        p.validate()?;
        if !names.insert(&p.name) {
            return Err(Error::DuplicateSymbol(p.name.clone()));
        }
        for m in p.modalities() {
            registry.get(m)?;
        }
    }
    Ok(())
}

/// Pathways whose required inputs and targets are all present.
pub fn eligible_pathways<'a>(signature: &PresenceSignature, pathways: &'a [Pathway]) -> Vec<&'a Pathway> {
    pathways
        .iter()
        .filter(|p| signature.contains_all(p.requirements()))
        .collect()
}

/// Draws a pathway with probability proportional to its weight.
pub fn sample_pathway<'a, R: Rng + ?Sized>(eligible: &[&'a Pathway], rng: &mut R) -> Result<&'a Pathway> {
    if eligible.is_empty() {
        return Err(Error::Skip("no eligible pathway".into()));
    }
    let total: f64 = eligible.iter().map(|p| p.weight).sum();
    let mut u = rng.random::<f64>() * total;
    for p in eligible {
        if u < p.weight {
            return Ok(p);
        }
        u -= p.weight;
    }
    Ok(eligible[eligible.len() - 1])
}

/// Selection probabilities over an eligible set.
pub fn selection_probabilities(eligible: &[&Pathway]) -> Vec<f64> {
    let total: f64 = eligible.iter().map(|p| p.weight).sum();
    eligible.iter().map(|p| p.weight / total).collect()
}

/// Required inputs plus an independent coin flip for each present optional.
pub fn select_inputs<R: Rng + ?Sized>(sample: &MultimodalSample, pathway: &Pathway, rng: &mut R) -> BTreeSet<String> {
    let mut out = pathway.inputs_required.clone();
    for m in &pathway.inputs_optional {
        if sample.track(m).is_some() && !out.contains(m) && rng.random::<f64>() < pathway.optional_input_p {
            out.insert(m.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSegment {
    pub modality: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PackedTargets {
    pub segments: Vec<TargetSegment>,
    pub total: usize,
}

fn is_structural(registry: &ModalityRegistry, m: &str) -> bool {
    registry
        .get(m)
        .map(|d| d.aligned && d.track_group == TrackGroup::Protein)
        .unwrap_or(false)
}

/// Fills the decoder budget: required targets first (windowed when they do
/// not fit), then optional targets by descending priority and registry order.
pub fn pack_targets<R: Rng + ?Sized>(
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    pathway: &Pathway,
    inputs: &BTreeSet<String>,
    budget: usize,
    rng: &mut R,
) -> Result<PackedTargets> {
    if budget == 0 {
        return Err(Error::Skip("decoder budget is zero".into()));
    }
    let mut packed = PackedTargets::default();
    fn order<'s>(set: &'s BTreeSet<String>, registry: &ModalityRegistry) -> Vec<&'s String> {
        let mut v: Vec<&String> = set.iter().collect();
        v.sort_by_key(|m| registry.position(m).unwrap_or(usize::MAX));
        v
    }
    let natural = |m: &str, len: usize| -> usize {
        match pathway.span_fraction {
            Some(f) if inputs.contains(m) => (libm::ceil(f * len as f64) as usize).clamp(1, len.max(1)),
            _ => len,
        }
    };
    for m in order(&pathway.targets_required, registry) {
        let len = sample
            .track(m)
            .ok_or_else(|| Error::Skip(format!("required target {m} absent")))?
            .len();
        let remaining = budget - packed.total;
        let mut w = natural(m, len);
        if w == 0 {
            return Err(Error::Skip(format!("required target {m} is empty")));
        }
        if w > remaining {
            if is_structural(registry, m) || remaining == 0 {
                return Err(Error::Skip(format!("required target {m} does not fit the decoder budget")));
            }
            w = remaining;
        }
        let start = rng.random_range(0..=len - w);
        packed.segments.push(TargetSegment {
            modality: m.clone(),
            start,
            len: w,
        });
        packed.total += w;
    }
    let mut optional: Vec<&String> = order(&pathway.targets_optional, registry)
        .into_iter()
        .filter(|m| !pathway.targets_required.contains(*m) && sample.track(m).is_some())
        .collect();
    optional.sort_by_key(|m| -pathway.priority.get(*m).copied().unwrap_or(0));
    for m in optional {
        let remaining = budget - packed.total;
        if remaining == 0 {
            break;
        }
        let len = sample.track(m).unwrap().len();
        let mut w = natural(m, len);
        if w == 0 {
            continue;
        }
        if w > remaining {
            if is_structural(registry, m) {
                continue;
            }
            w = remaining;
        }
        let start = rng.random_range(0..=len - w);
        packed.segments.push(TargetSegment {
            modality: m.clone(),
            start,
            len: w,
        });
        packed.total += w;
    }
    Ok(packed)
}

/// Masks the input copy of every packed target over its window.
pub fn mask_targets_in_layout(
    layout: &mut EncoderLayout,
    registry: &ModalityRegistry,
    packed: &PackedTargets,
    inputs: &BTreeSet<String>,
) -> Result<()> {
    for s in &packed.segments {
        if inputs.contains(&s.modality) {
            let mask = registry.get(&s.modality)?.tokenizer.specials.mask;
            layout.mask_window(&s.modality, s.start, s.len, mask)?;
        }
    }
    Ok(())
}

/// Decoder queries and targets for packed segments of `sample`.
pub fn decoder_input(sample: &MultimodalSample, packed: &PackedTargets) -> Result<DecoderInput> {
    let segments = packed
        .segments
        .iter()
        .map(|s| {
            let track = sample
                .track(&s.modality)
                .ok_or_else(|| Error::UnknownModality(s.modality.clone()))?;
            let targets = track
                .get(s.start..s.start + s.len)
                .ok_or_else(|| invalid(format!("segment of {} out of range", s.modality)))?
                .to_vec();
            Ok(DecoderSegment {
                modality: s.modality.clone(),
                positions: (s.start..s.start + s.len).collect(),
                targets,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DecoderInput { segments })
}

/// Everything one training step needs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub pathway: String,
    pub inputs: BTreeSet<String>,
    pub packed: PackedTargets,
    pub layout: EncoderLayout,
    pub decoder: DecoderInput,
}

/// Pathway draw, input selection, packing, assembly and target masking.
pub fn prepare_sample<R: Rng + ?Sized>(
    sample: &MultimodalSample,
    registry: &ModalityRegistry,
    pathways: &[Pathway],
    layout_config: &crate::layout::LayoutConfig,
    decoder_budget: usize,
    rng: &mut R,
) -> Result<PreparedSample> {
    let sig = presence_signature(sample);
    let eligible = eligible_pathways(&sig, pathways);
    let pathway = sample_pathway(&eligible, rng)?;
    let inputs = select_inputs(sample, pathway, rng);
    let packed = pack_targets(sample, registry, pathway, &inputs, decoder_budget, rng)?;
    let mut layout = crate::layout::assemble_encoder_layout(sample, registry, &inputs, layout_config)?;
    mask_targets_in_layout(&mut layout, registry, &packed, &inputs)?;
    let decoder = decoder_input(sample, &packed)?;
    Ok(PreparedSample {
        pathway: pathway.name.clone(),
        inputs,
        packed,
        layout,
        decoder,
    })
}

/// Reconstructed pathway set over the synthetic modality registry.
pub fn default_pathways() -> Vec<Pathway> {
    let masif = [MASIF_SI, MASIF_CHARGE, MASIF_HBOND, MASIF_HYDRO];
    let mut v = alloc::vec![
        Pathway::spanned("nt_completion", &[NT_SEQ], &[AUX, PHYLOP, SPLICE, RASP, CONTEXT, TX_TYPE], &[NT_SEQ], &[], 3.0, 0.25),
        Pathway::spanned("nt_completion_aux", &[NT_SEQ, AUX], &[], &[NT_SEQ], &[], 1.0, 0.25),
        Pathway::spanned("nt_multitask", &[NT_SEQ], &[CONTEXT], &[NT_SEQ], &[PHYLOP, SPLICE, RASP, AUX], 1.0, 0.15),
        Pathway::new("splice_from_seq", &[NT_SEQ], &[TX_TYPE, CONTEXT], &[SPLICE], &[PHYLOP], 2.0),
        Pathway::new("phylop_from_seq", &[NT_SEQ], &[SPLICE, CONTEXT], &[PHYLOP], &[SPLICE], 1.5),
        Pathway::new("rasp_from_seq", &[NT_SEQ], &[CONTEXT], &[RASP], &[], 1.0),
        Pathway::new("seq_from_phylop", &[PHYLOP], &[SPLICE], &[NT_SEQ], &[], 0.5),
        Pathway::new("seq_from_splice", &[SPLICE], &[PHYLOP, TX_TYPE], &[NT_SEQ], &[], 0.5),
        Pathway::new("aux_from_seq", &[NT_SEQ], &[], &[AUX], &[], 0.5),
        Pathway::new("tx_type_from_seq", &[NT_SEQ], &[SPLICE], &[TX_TYPE], &[], 1.0),
        Pathway::new("context_from_reactivity", &[NT_SEQ, RASP], &[], &[CONTEXT], &[], 0.5),
        Pathway::spanned("aa_completion", &[AA_SEQ], &[DSSP, STRUCTURE, CAPTION, TAXONOMY], &[AA_SEQ], &[], 3.0, 0.25),
        Pathway::new("dssp_from_aa", &[AA_SEQ], &[], &[DSSP], &[STRUCTURE], 1.0),
        Pathway::new("structure_from_aa", &[AA_SEQ], &[CAPTION], &[STRUCTURE], &[DSSP], 1.5),
        Pathway::new("aa_from_structure", &[STRUCTURE], &[DSSP, MASIF_SI, MASIF_CHARGE, MASIF_HBOND, MASIF_HYDRO], &[AA_SEQ], &[], 2.0),
        Pathway::new("aa_from_surface", &masif, &[STRUCTURE], &[AA_SEQ], &[], 1.5),
        Pathway::new("surface_from_aa", &[AA_SEQ], &[STRUCTURE], &[MASIF_HYDRO], &[MASIF_SI, MASIF_CHARGE, MASIF_HBOND, MASIF_NVERTS], 1.0),
        Pathway::new("caption_from_aa", &[AA_SEQ], &[TAXONOMY], &[CAPTION], &[], 1.0),
        Pathway::new("taxonomy_from_aa", &[AA_SEQ], &[], &[TAXONOMY], &[], 0.5),
        Pathway::new("aa_from_caption", &[CAPTION], &[TAXONOMY], &[AA_SEQ], &[], 0.5),
        Pathway::new("dssp_from_structure", &[STRUCTURE], &[], &[DSSP], &[], 0.5),
        Pathway::new("translate", &[NT_SEQ], &[], &[AA_SEQ], &[], 1.0),
        Pathway::new("back_translate", &[AA_SEQ], &[], &[NT_SEQ], &[], 1.0),
        Pathway::spanned("paired_completion", &[NT_SEQ, AA_SEQ], &[], &[AA_SEQ], &[DSSP], 1.0, 0.25),
        Pathway::new("seq_from_context", &[CONTEXT], &[TX_TYPE], &[NT_SEQ], &[], 0.25),
    ]
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .expect("default pathways are valid");
    for p in &mut v {
        if p.name == "nt_multitask" {
            p.priority.insert(SPLICE.into(), 2);
            p.priority.insert(PHYLOP.into(), 1);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::sample::{Entity, Split};
    use crate::synth::default_registry;
    use alloc::vec;

    fn sample(tracks: &[(&str, usize)]) -> MultimodalSample {
        MultimodalSample {
            id: "p".into(),
            entity: Entity::Rna,
            cluster_id: "c".into(),
            split: Split::Train,
            tracks: tracks.iter().map(|(n, l)| (n.to_string(), vec![0u32; *l])).collect(),
            region_labels: None,
        }
    }

    #[test]
    fn default_registry_is_valid() {
        let p = default_pathways();
        assert_eq!(p.len(), 25);
        validate_pathways(&p, &default_registry(8)).unwrap();
    }

    #[test]
    fn eligibility() {
        let ps = vec![
            Pathway::new("a", &[NT_SEQ, CONTEXT], &[], &[], &[], 1.0).unwrap(),
            Pathway::new("b", &[], &[], &[], &[], 1.0).unwrap(),
            Pathway::new("c", &[NT_SEQ], &[], &[PHYLOP], &[], 1.0).unwrap(),
        ];
        let sig = presence_signature(&sample(&[(NT_SEQ, 4)]));
        let names: Vec<&str> = eligible_pathways(&sig, &ps).iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b"]);
        let sig = presence_signature(&sample(&[(NT_SEQ, 4), (PHYLOP, 4), (AUX, 4)]));
        assert_eq!(eligible_pathways(&sig, &ps).len(), 2);
    }

    #[test]
    fn weights_validated() {
        assert!(Pathway::new("z", &[], &[], &[], &[], 0.0).is_err());
        assert!(Pathway::new("z", &[], &[], &[], &[], f64::NAN).is_err());
        assert!(Pathway::new("z", &[NT_SEQ], &[], &[NT_SEQ], &[], 1.0).is_err());
    }

    #[test]
    fn sampling_frequencies() {
        let ps = [
            Pathway::new("a", &[], &[], &[], &[], 1.0).unwrap(),
            Pathway::new("b", &[], &[], &[], &[], 2.0).unwrap(),
        ];
        let refs: Vec<&Pathway> = ps.iter().collect();
        let mut rng = stream_rng(5, 0);
        let n = 10_000;
        let a = (0..n).filter(|_| sample_pathway(&refs, &mut rng).unwrap().name == "a").count() as f64;
        let p = 1.0 / 3.0;
        assert!((a - n as f64 * p).abs() < 3.0 * (n as f64 * p * (1.0 - p)).sqrt());
        assert!(sample_pathway(&[], &mut rng).is_err());
        let one = [&ps[1]];
        assert_eq!(sample_pathway(&one, &mut rng).unwrap().name, "b");
        let probs = selection_probabilities(&refs);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn optional_inputs() {
        let p = Pathway::new("x", &[NT_SEQ], &[AUX, PHYLOP], &[SPLICE], &[], 1.0).unwrap();
        let s = sample(&[(NT_SEQ, 4), (AUX, 4), (SPLICE, 4)]);
        let mut rng = stream_rng(1, 0);
        let n = 10_000;
        let mut with_aux = 0;
        for _ in 0..n {
            let i = select_inputs(&s, &p, &mut rng);
            assert!(i.contains(NT_SEQ));
            assert!(!i.contains(PHYLOP));
            with_aux += i.contains(AUX) as usize;
        }
        assert!((with_aux as f64 - 5000.0).abs() < 3.0 * 50.0);
        let bare = Pathway::new("y", &[NT_SEQ], &[], &[SPLICE], &[], 1.0).unwrap();
        assert_eq!(select_inputs(&s, &bare, &mut rng), set(&[NT_SEQ]));
    }

    #[test]
    fn packing_fills_budget() {
        let reg = default_registry(8);
        let s = sample(&[(NT_SEQ, 2000), (SPLICE, 200), (PHYLOP, 2000)]);
        // splice target is 200 tokens here because the track is cropped to 200
        let s2 = sample(&[(NT_SEQ, 200), (SPLICE, 200), (PHYLOP, 800)]);
        let p = Pathway::new("x", &[NT_SEQ], &[], &[SPLICE], &[PHYLOP], 1.0).unwrap();
        let mut rng = stream_rng(2, 0);
        let inputs = set(&[NT_SEQ]);
        let packed = pack_targets(&s2, &reg, &p, &inputs, 1000, &mut rng).unwrap();
        assert_eq!(packed.total, 1000);
        assert_eq!(packed.segments[0].modality, SPLICE);
        let packed = pack_targets(&s, &reg, &p, &inputs, 1000, &mut rng).unwrap();
        assert_eq!(packed.total, 1000);
        assert_eq!(packed.segments[1].len, 800);
        assert!(pack_targets(&s, &reg, &p, &inputs, 0, &mut rng).is_err());
    }

    #[test]
    fn long_required_target_windowed_protein_skipped() {
        let reg = default_registry(8);
        let s = sample(&[(NT_SEQ, 3000), (AA_SEQ, 1500), (DSSP, 1500)]);
        let nt = Pathway::new("y", &[AA_SEQ], &[], &[NT_SEQ], &[], 1.0).unwrap();
        let mut rng = stream_rng(3, 0);
        let packed = pack_targets(&s, &reg, &nt, &set(&[AA_SEQ]), 1000, &mut rng).unwrap();
        assert_eq!(packed.segments[0].len, 1000);
        assert!(packed.segments[0].start <= 2000);
        let prot = Pathway::new("z", &[AA_SEQ], &[], &[DSSP], &[], 1.0).unwrap();
        assert!(matches!(pack_targets(&s, &reg, &prot, &set(&[AA_SEQ]), 1000, &mut rng), Err(Error::Skip(_))));
    }

    #[test]
    fn self_target_span_masks_input() {
        let reg = default_registry(8);
        let s = sample(&[(NT_SEQ, 40)]);
        let p = Pathway::spanned("c", &[NT_SEQ], &[], &[NT_SEQ], &[], 1.0, 0.25).unwrap();
        let mut rng = stream_rng(4, 0);
        let prep = prepare_sample(&s, &reg, &[p], &crate::layout::LayoutConfig::default(), 1000, &mut rng).unwrap();
        let seg = &prep.packed.segments[0];
        assert_eq!(seg.len, 10);
        let grid = prep.layout.groups[0].grid(NT_SEQ).unwrap();
        let mask = reg.get(NT_SEQ).unwrap().tokenizer.specials.mask;
        for (i, t) in grid.iter().enumerate() {
            assert_eq!(*t == mask, (seg.start..seg.start + seg.len).contains(&i));
        }
        assert_eq!(prep.decoder.segments[0].positions[0], seg.start);
    }
}
