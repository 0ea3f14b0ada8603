//! Synthetic multimodal corpora with known generative dependencies.
//!
//! Auxiliary tracks are deterministic or noisy functions of the anchor so
//! that "conditioning helps" can be checked exactly: the `aux` track is a
//! fixed permutation of the nucleotide at the same coordinate, donor and
//! acceptor sites sit at fixed offsets from the transcript boundaries, and
//! so on.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{mix64, standard_normal, stream_rng, StreamRng};
use crate::sample::{
    assign_splits, Entity, ModalityDescriptor, ModalityRegistry, MultimodalSample, Region, Split,
    SplitFractions, TrackGroup,
};
use crate::tokenization::{
    build_character_tokenizer, build_class_tokenizer, fit_continuous_tokenizer, fit_text_tokenizer,
    RawTrack, RawValue, TokenizerSpec,
};

/// Modality names used by the synthetic registry.
pub mod names {
    pub const NT_SEQ: &str = "nt_seq";
    pub const AUX: &str = "aux";
    pub const SPLICE: &str = "splice_junctions";
    pub const PHYLOP: &str = "phylop";
    pub const RASP: &str = "rasp";
    pub const AA_SEQ: &str = "aa_seq";
    pub const DSSP: &str = "dssp";
    pub const STRUCTURE: &str = "structure_tokens";
    pub const MASIF_SI: &str = "masif_si";
    pub const MASIF_CHARGE: &str = "masif_charge";
    pub const MASIF_HBOND: &str = "masif_hbond";
    pub const MASIF_HYDRO: &str = "masif_hydro";
    pub const MASIF_NVERTS: &str = "masif_nverts";
    pub const CONTEXT: &str = "context";
    pub const CAPTION: &str = "caption";
    pub const TAXONOMY: &str = "taxonomy";
    pub const TX_TYPE: &str = "transcript_type";
}

use names::*;

pub const NUCLEOTIDES: [&str; 4] = ["A", "C", "G", "U"];
pub const AUX_SYMBOLS: [&str; 4] = ["w", "x", "y", "z"];
/// Splice classes in head order: non-splice, donor, acceptor, TSS, TES.
pub const SPLICE_CLASSES: [&str; 5] = ["none", "donor", "acceptor", "tss", "tes"];
pub const AMINO_ACIDS: [&str; 24] = [
    "A", "C", "D", "E", "F", "G", "H", "I", "K", "L", "M", "N", "P", "Q", "R", "S", "T", "V", "W", "Y",
    "X", "B", "Z", "U",
];
pub const DSSP_STATES: [&str; 9] = ["H", "B", "E", "G", "I", "T", "S", "P", "-"];
pub const STRUCTURE_VOCAB: usize = 16;
pub const TRANSCRIPT_TYPES: [&str; 7] = [
    "protein_coding",
    "lncRNA",
    "miRNA",
    "snRNA",
    "snoRNA",
    "pseudogene",
    "misc_RNA",
];
pub const KINGDOMS: [&str; 11] = [
    "Metazoa",
    "Viridiplantae",
    "Fungi",
    "Bacteria",
    "Archaea",
    "Viruses",
    "Alveolata",
    "Stramenopiles",
    "Rhodophyta",
    "Euglenozoa",
    "Amoebozoa",
];
const CONTEXTS: [&str; 6] = [
    "in vivo icSHAPE in HEK293 cells",
    "in vitro DMS-seq of K562 lysate",
    "ATAC-seq peaks in liver tissue",
    "CAGE promoter usage in CD34+ stem cells",
    "in vivo DMS-MaPseq in mouse embryonic stem cells",
    "protein abundance in HeLa cells",
];
const CAPTIONS: [&str; 6] = [
    "membrane transporter with ATP binding activity",
    "nuclear transcription factor binding DNA",
    "cytoplasmic kinase involved in signal transduction",
    "secreted protein with receptor binding activity",
    "mitochondrial enzyme of the respiratory chain",
    "ribosomal protein involved in translation",
];

// Kyte-Doolittle hydropathy for the 20 standard residues in AMINO_ACIDS order.
const HYDROPATHY: [f64; 20] = [
    1.8, 2.5, -3.5, -3.5, 2.8, -0.4, -3.2, 4.5, -3.9, 3.8, 1.9, -3.5, -1.6, -3.5, -4.5, -0.8, -0.7, 4.2,
    -0.9, -1.3,
];
const CHARGE: [f64; 20] = [
    0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
];
const HBOND: [f64; 20] = [
    0.0, 0.5, 2.0, 2.0, 0.0, 0.0, 1.5, 0.0, 1.5, 0.0, 0.5, 2.0, 0.0, 2.0, 2.0, 1.0, 1.0, 0.0, 1.0, 1.0,
];

/// Continuous modalities of the synthetic registry.
pub const CONTINUOUS: [&str; 7] = [
    PHYLOP,
    RASP,
    MASIF_SI,
    MASIF_CHARGE,
    MASIF_HBOND,
    MASIF_HYDRO,
    MASIF_NVERTS,
];

fn descriptor(name: &str, group: TrackGroup, tokenizer: TokenizerSpec, aligned: bool, anchor: bool) -> ModalityDescriptor {
    ModalityDescriptor {
        name: name.to_string(),
        track_group: group,
        tokenizer,
        aligned,
        anchor,
    }
}

/// Number of raw draws used to fit each continuous tokenizer.
pub const FIT_DRAWS: usize = 20_000;

/// Registry of every synthetic modality, continuous tokenizers fitted on
/// draws from the generator's own value distributions.
pub fn default_registry(continuous_bins: usize) -> ModalityRegistry {
    let mut rng = stream_rng(0x5EED_F17, 0);
    let mut fit = |name: &str| {
        let xs: Vec<f64> = (0..FIT_DRAWS)
            .filter_map(|i| raw_continuous_draw(name, i, &mut rng))
            .collect();
        fit_continuous_tokenizer(&xs, continuous_bins).expect("synthetic draws are finite")
    };
    let phylop = fit(PHYLOP);
    let rasp = fit(RASP);
    let si = fit(MASIF_SI);
    let charge = fit(MASIF_CHARGE);
    let hbond = fit(MASIF_HBOND);
    let hydro = fit(MASIF_HYDRO);
    let nverts = fit(MASIF_NVERTS);
    let mut texts: Vec<&str> = CONTEXTS.to_vec();
    texts.extend(CAPTIONS);
    let text = fit_text_tokenizer(&texts, 64, 1).expect("templates are nonempty");
    let structure: Vec<String> = (0..STRUCTURE_VOCAB).map(|i| format!("s{i}")).collect();

    let modalities = alloc::vec![
        descriptor(NT_SEQ, TrackGroup::Nucleic, build_character_tokenizer(&NUCLEOTIDES).unwrap(), true, true),
        descriptor(AUX, TrackGroup::Nucleic, build_character_tokenizer(&AUX_SYMBOLS).unwrap(), true, false),
        descriptor(SPLICE, TrackGroup::Nucleic, build_character_tokenizer(&SPLICE_CLASSES).unwrap(), true, false),
        descriptor(PHYLOP, TrackGroup::Nucleic, phylop, true, false),
        descriptor(RASP, TrackGroup::Nucleic, rasp, true, false),
        descriptor(AA_SEQ, TrackGroup::Protein, build_character_tokenizer(&AMINO_ACIDS).unwrap(), true, true),
        descriptor(DSSP, TrackGroup::Protein, build_character_tokenizer(&DSSP_STATES).unwrap(), true, false),
        descriptor(STRUCTURE, TrackGroup::Protein, build_character_tokenizer(&structure).unwrap(), true, false),
        descriptor(MASIF_SI, TrackGroup::Protein, si, true, false),
        descriptor(MASIF_CHARGE, TrackGroup::Protein, charge, true, false),
        descriptor(MASIF_HBOND, TrackGroup::Protein, hbond, true, false),
        descriptor(MASIF_HYDRO, TrackGroup::Protein, hydro, true, false),
        descriptor(MASIF_NVERTS, TrackGroup::Protein, nverts, true, false),
        descriptor(CONTEXT, TrackGroup::SemanticContext, text.clone(), false, false),
        descriptor(CAPTION, TrackGroup::SemanticCaption, text, false, false),
        descriptor(TAXONOMY, TrackGroup::SemanticTaxonomy, build_class_tokenizer(&KINGDOMS).unwrap(), false, false),
        descriptor(TX_TYPE, TrackGroup::SemanticCaption, build_class_tokenizer(&TRANSCRIPT_TYPES).unwrap(), false, false),
    ];
    ModalityRegistry::new(modalities).expect("synthetic registry is consistent")
}

fn raw_continuous_draw(name: &str, i: usize, rng: &mut StreamRng) -> Option<f64> {
    // mixes mirror the per-position generators below
    match name {
        PHYLOP => Some(if i % 2 == 0 { phylop_value(true, 2, rng) } else { phylop_value(false, (i / 2) % 4, rng) }),
        RASP => Some(rasp_value(i % 4, rng)),
        _ => {
            let aa = i % 20;
            let f = masif_values(aa, rng);
            let idx = match name {
                MASIF_SI => 0,
                MASIF_CHARGE => 1,
                MASIF_HBOND => 2,
                MASIF_HYDRO => 3,
                MASIF_NVERTS => 4,
                _ => return None,
            };
            Some(f[idx])
        }
    }
}

fn phylop_value(exon: bool, nt: usize, rng: &mut StreamRng) -> f64 {
    let gc = if nt == 1 || nt == 2 { 0.3 } else { 0.0 };
    if exon {
        2.0 + gc + 0.5 * standard_normal(rng)
    } else {
        -0.2 + gc + 0.7 * standard_normal(rng)
    }
}

fn rasp_value(nt: usize, rng: &mut StreamRng) -> f64 {
    let v = if nt <= 1 {
        0.6 + 0.2 * standard_normal(rng)
    } else {
        0.15 + 0.1 * standard_normal(rng)
    };
    v.max(0.0)
}

fn masif_values(aa: usize, rng: &mut StreamRng) -> [f64; 5] {
    let kd = HYDROPATHY[aa];
    [
        0.5 * libm::tanh(kd / 2.0) + 0.2 * standard_normal(rng),
        CHARGE[aa] + 0.1 * standard_normal(rng),
        HBOND[aa] + 0.1 * standard_normal(rng),
        kd / 4.5 + 0.1 * standard_normal(rng),
        5.0 + 10.0 * rng.random::<f64>(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Uniform { min: usize, max: usize },
    LogNormal { mu: f64, sigma: f64, min: usize, max: usize },
}

impl LengthDist {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            LengthDist::Uniform { min, max } => rng.random_range(min..=max.max(min)),
            LengthDist::LogNormal { mu, sigma, min, max } => {
                let z = loop {
                    let u1: f64 = rng.random();
                    let u2: f64 = rng.random();
                    if u1 > f64::MIN_POSITIVE {
                        break libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2);
                    }
                };
                let x = libm::exp(mu + sigma * z);
                (libm::round(x) as usize).clamp(min, max.max(min))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityWeights {
    pub rna: f64,
    pub protein: f64,
    pub paired: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecipe {
    pub name: String,
    pub entity_weights: EntityWeights,
    pub nucleic_length: LengthDist,
    pub protein_length: LengthDist,
    /// Inclusion probability of each optional modality; anchors are always present.
    pub presence: BTreeMap<String, f64>,
    /// Seeds the nucleotide -> aux permutation.
    pub aux_key: u64,
    pub first_exon: usize,
    pub last_exon: usize,
    pub internal_exon_p: f64,
    /// Maximum random shift of TSS/TES from their nominal flanks.
    pub boundary_jitter: usize,
    pub buried_fraction: f64,
    pub cluster_size: usize,
    pub splits: SplitFractions,
    pub continuous_bins: usize,
}

impl GeneratorRecipe {
    fn base(name: &str) -> Self {
        Self {
            name: name.to_string(),
            entity_weights: EntityWeights {
                rna: 0.6,
                protein: 0.3,
                paired: 0.1,
            },
            nucleic_length: LengthDist::Uniform { min: 48, max: 128 },
            protein_length: LengthDist::Uniform { min: 24, max: 64 },
            presence: BTreeMap::new(),
            aux_key: 0xA0C5,
            first_exon: 6,
            last_exon: 6,
            internal_exon_p: 0.5,
            boundary_jitter: 4,
            buried_fraction: 0.3,
            cluster_size: 1,
            splits: SplitFractions::default(),
            continuous_bins: 32,
        }
    }

    fn with_presence(mut self, items: &[(&str, f64)]) -> Self {
        self.presence = items.iter().map(|(n, p)| (n.to_string(), *p)).collect();
        self
    }

    /// Mixed entities with every synthetic modality at partial coverage.
    pub fn mixed() -> Self {
        Self::base("mixed").with_presence(&[
            (AUX, 0.5),
            (SPLICE, 0.7),
            (PHYLOP, 0.7),
            (RASP, 0.4),
            (DSSP, 0.7),
            (STRUCTURE, 0.6),
            (MASIF_SI, 0.3),
            (MASIF_CHARGE, 0.3),
            (MASIF_HBOND, 0.3),
            (MASIF_HYDRO, 0.3),
            (MASIF_NVERTS, 0.3),
            (CONTEXT, 0.4),
            (CAPTION, 0.4),
            (TAXONOMY, 0.5),
            (TX_TYPE, 0.5),
        ])
    }

    /// Short RNA sequences only, for overfitting checks.
    pub fn memorize() -> Self {
        let mut r = Self::base("memorize");
        r.entity_weights = EntityWeights {
            rna: 1.0,
            protein: 0.0,
            paired: 0.0,
        };
        r.nucleic_length = LengthDist::Uniform { min: 32, max: 40 };
        r.splits = SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        r
    }

    /// RNA with the disambiguating `aux` track always observed.
    pub fn aux4() -> Self {
        let mut r = Self::memorize().with_presence(&[(AUX, 1.0)]);
        r.name = "aux4".into();
        r.nucleic_length = LengthDist::Uniform { min: 24, max: 40 };
        r.splits = SplitFractions::default();
        r
    }

    /// RNA whose donor/acceptor sites are fixed offsets from jittered TSS/TES.
    pub fn splice_bounds() -> Self {
        let mut r = Self::memorize().with_presence(&[(SPLICE, 1.0), (TX_TYPE, 1.0)]);
        r.name = "splice-bounds".into();
        r.nucleic_length = LengthDist::Uniform { min: 40, max: 56 };
        r.boundary_jitter = 10;
        r.internal_exon_p = 0.0;
        r.splits = SplitFractions::default();
        r
    }

    /// Heavy-tailed lengths (log-normal, sigma 1) for scheduling studies.
    pub fn heavy_tail() -> Self {
        let mut r = Self::mixed();
        r.name = "heavy-tail".into();
        r.nucleic_length = LengthDist::LogNormal {
            mu: 5.0,
            sigma: 1.0,
            min: 16,
            max: 20_000,
        };
        r.protein_length = LengthDist::LogNormal {
            mu: 4.5,
            sigma: 1.0,
            min: 16,
            max: 5_000,
        };
        r
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "mixed" | "default" => Ok(Self::mixed()),
            "memorize" => Ok(Self::memorize()),
            "aux4" => Ok(Self::aux4()),
            "splice-bounds" => Ok(Self::splice_bounds()),
            "heavy-tail" => Ok(Self::heavy_tail()),
            other => Err(invalid(format!("unknown recipe {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.entity_weights;
        if [w.rna, w.protein, w.paired].iter().any(|x| !x.is_finite() || *x < 0.0) || w.rna + w.protein + w.paired <= 0.0 {
            return Err(invalid("entity weights must be non-negative with positive sum"));
        }
        if self.presence.values().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("presence probabilities must lie in [0, 1]"));
        }
        if self.cluster_size == 0 {
            return Err(invalid("cluster_size must be positive"));
        }
        Ok(())
    }

    /// Permutation mapping nucleotide index to aux symbol index.
    pub fn aux_permutation(&self) -> [usize; 4] {
        let mut perm = [0usize, 1, 2, 3];
        let mut h = self.aux_key;
        for i in (1..4).rev() {
            h = mix64(h);
            let j = (h % (i as u64 + 1)) as usize;
            perm.swap(i, j);
        }
        perm
    }

    fn present(&self, name: &str, rng: &mut StreamRng) -> bool {
        match self.presence.get(name) {
            Some(&p) => rng.random::<f64>() < p,
            None => false,
        }
    }
}

/// Mutual information in bits between a uniform nucleotide and its aux
/// symbol, computed by enumerating the joint distribution of the rule.
pub fn aux_mutual_information_bits(recipe: &GeneratorRecipe) -> f64 {
    let perm = recipe.aux_permutation();
    let mut joint = [[0.0f64; 4]; 4];
    for (nt, &aux) in perm.iter().enumerate() {
        joint[nt][aux] += 0.25;
    }
    let px: [f64; 4] = core::array::from_fn(|i| joint[i].iter().sum());
    let py: [f64; 4] = core::array::from_fn(|j| (0..4).map(|i| joint[i][j]).sum());
    let mut mi = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let p = joint[i][j];
            if p > 0.0 {
                mi += p * libm::log2(p / (px[i] * py[j]));
            }
        }
    }
    mi
}

/// Exon/intron structure with TSS/TES anchors for one transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneModel {
    pub tss: usize,
    pub tes: usize,
    pub exons: Vec<(usize, usize)>,
}

impl GeneModel {
    pub fn splice_labels(&self, len: usize) -> Vec<usize> {
        let mut labels = alloc::vec![0usize; len];
        for w in self.exons.windows(2) {
            labels[w[0].1] = 1;
            labels[w[1].0] = 2;
        }
        labels[self.tes] = 4;
        labels[self.tss] = 3;
        labels
    }

    pub fn regions(&self, len: usize) -> Vec<Region> {
        let mut r = alloc::vec![Region::Intron; len];
        for &(a, b) in &self.exons {
            for x in r.iter_mut().take(b + 1).skip(a) {
                *x = Region::Exon;
            }
        }
        r
    }
}

fn gene_model(len: usize, recipe: &GeneratorRecipe, rng: &mut StreamRng) -> GeneModel {
    let flank = len / 10;
    let j5 = rng.random_range(0..=recipe.boundary_jitter);
    let j3 = rng.random_range(0..=recipe.boundary_jitter);
    let tss = (flank + j5).min(len.saturating_sub(1));
    let tes = len.saturating_sub(1 + flank + j3).max(tss);
    let span = tes - tss + 1;
    let (e1, e2) = (recipe.first_exon.max(1), recipe.last_exon.max(1));
    if span < e1 + e2 + 4 {
        return GeneModel {
            tss,
            tes,
            exons: alloc::vec![(tss, tes)],
        };
    }
    let donor = tss + e1 - 1;
    let acceptor = tes - e2 + 1;
    let mut exons = alloc::vec![(tss, donor)];
    // internal exon needs >= 2 intronic positions on both sides
    let lo = donor + 3;
    let hi = acceptor.saturating_sub(3);
    if hi >= lo + 1 && rng.random::<f64>() < recipe.internal_exon_p {
        let a = rng.random_range(lo..hi);
        let b = rng.random_range(a + 1..=hi);
        exons.push((a, b));
    }
    exons.push((acceptor, tes));
    GeneModel { tss, tes, exons }
}

fn choose_entity(recipe: &GeneratorRecipe, rng: &mut StreamRng) -> Entity {
    let w = recipe.entity_weights;
    let u = rng.random::<f64>() * (w.rna + w.protein + w.paired);
    if u < w.rna {
        Entity::Rna
    } else if u < w.rna + w.protein {
        Entity::Protein
    } else {
        Entity::Paired
    }
}

fn pick<'a>(xs: &[&'a str], rng: &mut StreamRng) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn encode(registry: &ModalityRegistry, name: &str, values: Vec<RawValue>) -> Vec<u32> {
    registry
        .get(name)
        .expect("synthetic modality registered")
        .tokenizer
        .encode(&RawTrack::new(name, values))
        .expect("synthetic values match tokenizer kinds")
}

fn generate_one(
    i: usize,
    recipe: &GeneratorRecipe,
    registry: &ModalityRegistry,
    rng: &mut StreamRng,
) -> MultimodalSample {
    let entity = choose_entity(recipe, rng);
    let mut tracks: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    let mut region_labels = None;
    let perm = recipe.aux_permutation();

    let protein_len = match entity {
        Entity::Rna => 0,
        _ => recipe.protein_length.draw(rng).max(1),
    };
    if entity != Entity::Protein {
        let len = if entity == Entity::Paired {
            3 * protein_len
        } else {
            recipe.nucleic_length.draw(rng).max(1)
        };
        let nt: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let gene = gene_model(len, recipe, rng);
        let regions = gene.regions(len);
        tracks.insert(
            NT_SEQ.into(),
            encode(registry, NT_SEQ, nt.iter().map(|&k| RawValue::Symbol(NUCLEOTIDES[k].into())).collect()),
        );
        if recipe.present(AUX, rng) {
            let v = nt.iter().map(|&k| RawValue::Symbol(AUX_SYMBOLS[perm[k]].into())).collect();
            tracks.insert(AUX.into(), encode(registry, AUX, v));
        }
        if recipe.present(SPLICE, rng) {
            let v = gene
                .splice_labels(len)
                .into_iter()
                .map(|c| RawValue::Symbol(SPLICE_CLASSES[c].into()))
                .collect();
            tracks.insert(SPLICE.into(), encode(registry, SPLICE, v));
        }
        if recipe.present(PHYLOP, rng) {
            let v = (0..len)
                .map(|p| RawValue::Real(phylop_value(regions[p] == Region::Exon, nt[p], rng)))
                .collect();
            tracks.insert(PHYLOP.into(), encode(registry, PHYLOP, v));
        }
        if recipe.present(RASP, rng) {
            let v = nt.iter().map(|&k| RawValue::Real(rasp_value(k, rng))).collect();
            tracks.insert(RASP.into(), encode(registry, RASP, v));
        }
        region_labels = Some(regions);
    }
    if entity != Entity::Rna {
        let len = protein_len;
        let aa: Vec<usize> = (0..len).map(|_| rng.random_range(0..20)).collect();
        tracks.insert(
            AA_SEQ.into(),
            encode(registry, AA_SEQ, aa.iter().map(|&k| RawValue::Symbol(AMINO_ACIDS[k].into())).collect()),
        );
        if recipe.present(DSSP, rng) {
            let v = (0..len)
                .map(|p| {
                    let next = aa.get(p + 1).copied().unwrap_or(0) as u64;
                    let h = mix64(aa[p] as u64 * 31 + next);
                    RawValue::Symbol(DSSP_STATES[(h % 9) as usize].into())
                })
                .collect();
            tracks.insert(DSSP.into(), encode(registry, DSSP, v));
        }
        if recipe.present(STRUCTURE, rng) {
            let v = (0..len)
                .map(|p| {
                    let prev = if p == 0 { 20 } else { aa[p - 1] } as u64;
                    let h = mix64(prev * 37 + aa[p] as u64);
                    RawValue::Symbol(format!("s{}", h % STRUCTURE_VOCAB as u64))
                })
                .collect();
            tracks.insert(STRUCTURE.into(), encode(registry, STRUCTURE, v));
        }
        let masif_names = [MASIF_SI, MASIF_CHARGE, MASIF_HBOND, MASIF_HYDRO, MASIF_NVERTS];
        if recipe.present(MASIF_HYDRO, rng) {
            let mut channels: [Vec<RawValue>; 5] = Default::default();
            for &a in &aa {
                let buried = rng.random::<f64>() < recipe.buried_fraction;
                let f = masif_values(a, rng);
                for (c, ch) in channels.iter_mut().enumerate() {
                    ch.push(if buried { RawValue::Missing } else { RawValue::Real(f[c]) });
                }
            }
            for (c, name) in masif_names.iter().enumerate() {
                if *name == MASIF_HYDRO || recipe.present(name, rng) {
                    tracks.insert((*name).into(), encode(registry, name, core::mem::take(&mut channels[c])));
                }
            }
        }
        if recipe.present(CAPTION, rng) {
            let v = alloc::vec![RawValue::Text(pick(&CAPTIONS, rng).into())];
            tracks.insert(CAPTION.into(), encode(registry, CAPTION, v));
        }
        if recipe.present(TAXONOMY, rng) {
            let v = alloc::vec![RawValue::Label(pick(&KINGDOMS, rng).into())];
            tracks.insert(TAXONOMY.into(), encode(registry, TAXONOMY, v));
        }
    }
    if entity != Entity::Protein {
        if recipe.present(CONTEXT, rng) {
            let v = alloc::vec![RawValue::Text(pick(&CONTEXTS, rng).into())];
            tracks.insert(CONTEXT.into(), encode(registry, CONTEXT, v));
        }
        if recipe.present(TX_TYPE, rng) {
            let label = if entity == Entity::Paired {
                "protein_coding"
            } else {
                pick(&TRANSCRIPT_TYPES, rng)
            };
            tracks.insert(TX_TYPE.into(), encode(registry, TX_TYPE, alloc::vec![RawValue::Label(label.into())]));
        }
    }
    MultimodalSample {
        id: format!("s{i:06}"),
        entity,
        cluster_id: format!("c{:06}", i / recipe.cluster_size),
        split: Split::Train,
        tracks,
        region_labels,
    }
}

/// Generates `n` samples; sample `i` draws from its own stream so the corpus
/// does not depend on generation order.
pub fn generate_synthetic_corpus(
    recipe: &GeneratorRecipe,
    registry: &ModalityRegistry,
    n: usize,
    seed: u64,
) -> Result<Vec<MultimodalSample>> {
    recipe.validate()?;
    let mut corpus: Vec<MultimodalSample> = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64 + 1);
            generate_one(i, recipe, registry, &mut rng)
        })
        .collect();
    for s in &corpus {
        s.validate(registry)?;
    }
    if !corpus.is_empty() {
        assign_splits(&mut corpus, recipe.splits, seed)?;
    }
    Ok(corpus)
}
