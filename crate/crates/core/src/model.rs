//! Split-track encoder-decoder transformer on the [`Graph`] tape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{rope_angles, AttnMask, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::layout::{partition_attention_heads, FlatLayout, MaskKind};
use crate::rng::{standard_normal, stream_rng, RngState};
use crate::sample::ModalityRegistry;
use crate::tensor::Mat;
use crate::tokenization::TokenizerKind;
use crate::training::OptimState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const TEXT_TABLE: &str = "text";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityVocab {
    pub name: String,
    pub vocab_size: usize,
    /// Embedding table; all text modalities share [`TEXT_TABLE`].
    pub table: String,
    pub mask_id: u32,
    pub pad_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub width: usize,
    pub n_heads: usize,
    pub encoder_budget: usize,
    pub decoder_budget: usize,
    pub register_count: usize,
    pub rope_fraction: f64,
    pub rope_base: f64,
    pub ffn_mult: usize,
    pub final_norm: bool,
    /// Diagnostic switch; when off decoder targets cannot see each other.
    pub decoder_self_attention: bool,
    /// Rotary angles on cross-attention queries and keys; target queries carry
    /// no other positional signal.
    pub cross_attention_rope: bool,
    pub modalities: Vec<ModalityVocab>,
}

impl ModelConfig {
    pub fn with_dims(
        encoder_depth: usize,
        decoder_depth: usize,
        width: usize,
        n_heads: usize,
        encoder_budget: usize,
        decoder_budget: usize,
        register_count: usize,
        rope_fraction: f64,
    ) -> Self {
        Self {
            encoder_depth,
            decoder_depth,
            width,
            n_heads,
            encoder_budget,
            decoder_budget,
            register_count,
            rope_fraction,
            rope_base: 10_000.0,
            ffn_mult: 4,
            final_norm: true,
            decoder_self_attention: true,
            cross_attention_rope: true,
            modalities: Vec::new(),
        }
    }

    pub fn paper() -> Self {
        Self::with_dims(20, 12, 1536, 24, 10_000, 1_000, 5, 0.75)
    }

    pub fn desk() -> Self {
        Self::with_dims(2, 2, 64, 4, 512, 128, 5, 0.75)
    }

    /// Fills modality vocabularies from a registry.
    pub fn for_registry(mut self, registry: &ModalityRegistry) -> Self {
        self.modalities = registry
            .modalities
            .iter()
            .map(|d| ModalityVocab {
                name: d.name.clone(),
                vocab_size: d.tokenizer.vocab_size(),
                table: if d.tokenizer.kind == TokenizerKind::Text {
                    TEXT_TABLE.to_string()
                } else {
                    d.name.clone()
                },
                mask_id: d.tokenizer.specials.mask,
                pad_id: d.tokenizer.specials.pad,
            })
            .collect();
        self
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn rot_dims(&self) -> usize {
        libm::round(self.rope_fraction * self.head_dim() as f64) as usize
    }

    pub fn modality(&self, name: &str) -> Result<&ModalityVocab> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModality(name.into()))
    }

    /// Embedding tables with their row counts, in first-use order.
    pub fn tables(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for m in &self.modalities {
            match out.iter_mut().find(|(t, _)| *t == m.table) {
                Some((_, n)) => *n = (*n).max(m.vocab_size),
                None => out.push((m.table.clone(), m.vocab_size)),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_heads == 0 || self.width % self.n_heads != 0 {
            return Err(invalid(format!("width {} not divisible by {} heads", self.width, self.n_heads)));
        }
        if !(self.rope_fraction > 0.0 && self.rope_fraction <= 1.0) {
            return Err(invalid("rope_fraction must lie in (0, 1]"));
        }
        if self.rot_dims() % 2 != 0 {
            return Err(invalid(format!(
                "rotated dims round({} * {}) = {} is odd",
                self.rope_fraction,
                self.head_dim(),
                self.rot_dims()
            )));
        }
        if self.ffn_mult == 0 {
            return Err(invalid("ffn_mult must be positive"));
        }
        if self.modalities.is_empty() {
            return Err(invalid("model config lists no modalities"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::DuplicateSymbol(m.name.clone()));
            }
            if m.mask_id as usize >= m.vocab_size || m.pad_id as usize >= m.vocab_size {
                return Err(invalid(format!("special ids out of range for {}", m.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl Parameters {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }
}

#[derive(Debug, Clone)]
struct AttnIds {
    ln_g: usize,
    ln_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct BlockIds {
    attn: AttnIds,
    cross: Option<AttnIds>,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct ParamIndex {
    tables: BTreeMap<String, usize>,
    registers: usize,
    encoder: Vec<BlockIds>,
    decoder: Vec<BlockIds>,
    enc_final: (usize, usize),
    dec_final: (usize, usize),
    heads: BTreeMap<String, (usize, usize)>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct SpecBuilder {
    specs: Vec<(String, usize, usize, Init)>,
}

impl SpecBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push((name, rows, cols, init));
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let s = 1.0 / libm::sqrt(d as f64);
        AttnIds {
            ln_g: self.add(format!("{prefix}.ln.g"), 1, d, Init::Ones),
            ln_b: self.add(format!("{prefix}.ln.b"), 1, d, Init::Zeros),
            wq: self.add(format!("{prefix}.wq"), d, d, Init::Normal(s)),
            wk: self.add(format!("{prefix}.wk"), d, d, Init::Normal(s)),
            wv: self.add(format!("{prefix}.wv"), d, d, Init::Normal(s)),
            wo: self.add(format!("{prefix}.wo"), d, d, Init::Normal(s)),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize, cross: bool) -> BlockIds {
        let attn = self.attn(&format!("{prefix}.self"), d);
        let cross = cross.then(|| self.attn(&format!("{prefix}.cross"), d));
        BlockIds {
            attn,
            cross,
            ln2_g: self.add(format!("{prefix}.ffn.ln.g"), 1, d, Init::Ones),
            ln2_b: self.add(format!("{prefix}.ffn.ln.b"), 1, d, Init::Zeros),
            w1: self.add(format!("{prefix}.ffn.w1"), d, hidden, Init::Normal(1.0 / libm::sqrt(d as f64))),
            b1: self.add(format!("{prefix}.ffn.b1"), 1, hidden, Init::Zeros),
            w2: self.add(format!("{prefix}.ffn.w2"), hidden, d, Init::Normal(1.0 / libm::sqrt(hidden as f64))),
            b2: self.add(format!("{prefix}.ffn.b2"), 1, d, Init::Zeros),
        }
    }
}

fn build_index(cfg: &ModelConfig) -> (Vec<(String, usize, usize, Init)>, ParamIndex) {
    let d = cfg.width;
    let hidden = cfg.ffn_mult * d;
    let mut b = SpecBuilder { specs: Vec::new() };
    let mut tables = BTreeMap::new();
    for (t, rows) in cfg.tables() {
        let id = b.add(format!("embed.{t}"), rows, d, Init::Normal(0.5));
        tables.insert(t, id);
    }
    let registers = b.add("registers".into(), cfg.register_count, d, Init::Normal(0.5));
    let encoder = (0..cfg.encoder_depth)
        .map(|l| b.block(&format!("enc.{l}"), d, hidden, false))
        .collect();
    let decoder = (0..cfg.decoder_depth)
        .map(|l| b.block(&format!("dec.{l}"), d, hidden, true))
        .collect();
    let enc_final = (
        b.add("enc.final.g".into(), 1, d, Init::Ones),
        b.add("enc.final.b".into(), 1, d, Init::Zeros),
    );
    let dec_final = (
        b.add("dec.final.g".into(), 1, d, Init::Ones),
        b.add("dec.final.b".into(), 1, d, Init::Zeros),
    );
    let mut heads = BTreeMap::new();
    for m in &cfg.modalities {
        let w = b.add(format!("head.{}.w", m.name), d, m.vocab_size, Init::Normal(1.0 / libm::sqrt(d as f64)));
        let bias = b.add(format!("head.{}.b", m.name), 1, m.vocab_size, Init::Zeros);
        heads.insert(m.name.clone(), (w, bias));
    }
    (
        b.specs,
        ParamIndex {
            tables,
            registers,
            encoder,
            decoder,
            enc_final,
            dec_final,
            heads,
        },
    )
}

/// One packed decoder target segment: query positions in the target's
/// native coordinates and the token ids to reconstruct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSegment {
    pub modality: String,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecoderInput {
    pub segments: Vec<DecoderSegment>,
}

impl DecoderInput {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.positions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Summed token cross-entropy over non-pad targets.
    CrossEntropy,
    /// Summed target logits; linear in the logits, used by gradient checks.
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Mat>,
    pub loss_sum: f64,
    pub target_count: usize,
    /// `[decoder layer][head]` cross-attention probabilities (queries × latent).
    pub cross_attention: Vec<Vec<Mat>>,
}

impl ForwardOutput {
    pub fn mean_loss(&self) -> Option<f64> {
        (self.target_count > 0).then(|| self.loss_sum / self.target_count as f64)
    }
}

struct Built {
    logits: Vec<Var>,
    loss: Var,
    target_count: usize,
    cross: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, index) = build_index(&config);
        let mut rng = stream_rng(seed, 0x1417);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, rows, cols, init) in specs {
            let m = match init {
                Init::Ones => Mat::filled(rows, cols, 1.0),
                Init::Zeros => Mat::zeros(rows, cols),
                Init::Normal(s) => Mat::from_vec(rows, cols, (0..rows * cols).map(|_| s * standard_normal(&mut rng)).collect()),
            };
            names.push(name);
            tensors.push(m);
        }
        // pad rows embed to zero
        for m in &config.modalities {
            let t = &mut tensors[index.tables[&m.table]];
            t.row_mut(m.pad_id as usize).iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(Self {
            config,
            params: Parameters { names, tensors },
        })
    }

    /// Wraps loaded parameters after checking they match the config's shapes.
    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let (specs, _) = build_index(&config);
        if specs.len() != params.tensors.len() || params.names.len() != params.tensors.len() {
            return Err(Error::Shape("parameter count does not match config".into()));
        }
        for ((name, rows, cols, _), (pn, t)) in specs.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pn || *rows != t.rows || *cols != t.cols || t.data.len() != rows * cols {
                return Err(Error::Shape(format!("parameter {pn} does not match config")));
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                where_: "loaded parameters".into(),
            });
        }
        Ok(Self { config, params })
    }

    fn index(&self) -> ParamIndex {
        build_index(&self.config).1
    }

    fn attention_block(
        &self,
        g: &mut Graph,
        pv: &[Var],
        ids: &AttnIds,
        x: Var,
        kv_source: Option<Var>,
        q_angles: Option<Vec<Vec<(f64, f64)>>>,
        k_angles: Option<Vec<Vec<(f64, f64)>>>,
        mask: &AttnMask,
    ) -> (Var, Var) {
        let h = self.config.n_heads;
        let xn = g.layer_norm(x, pv[ids.ln_g], pv[ids.ln_b]);
        let kv = kv_source.unwrap_or(xn);
        let mut q = g.matmul(xn, pv[ids.wq]);
        let mut k = g.matmul(kv, pv[ids.wk]);
        let v = g.matmul(kv, pv[ids.wv]);
        if let Some(a) = q_angles {
            q = g.rope(q, a, h);
        }
        if let Some(a) = k_angles {
            k = g.rope(k, a, h);
        }
        let att = g.attention(q, k, v, h, mask);
        let o = g.matmul(att, pv[ids.wo]);
        (g.add(x, o), att)
    }

    fn ffn(&self, g: &mut Graph, pv: &[Var], b: &BlockIds, x: Var) -> Var {
        let xn = g.layer_norm(x, pv[b.ln2_g], pv[b.ln2_b]);
        let h1 = g.matmul(xn, pv[b.w1]);
        let h1 = g.add_row(h1, pv[b.b1]);
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, pv[b.w2]);
        let h2 = g.add_row(h2, pv[b.b2]);
        g.add(x, h2)
    }

    fn build(&self, g: &mut Graph, enc: &FlatLayout, dec: &DecoderInput, objective: Objective) -> Result<Built> {
        let cfg = &self.config;
        let idx = self.index();
        if dec.len() > cfg.decoder_budget {
            return Err(Error::OverBudget {
                total: dec.len(),
                budget: cfg.decoder_budget,
            });
        }
        if enc.len() > cfg.encoder_budget {
            return Err(Error::OverBudget {
                total: enc.len(),
                budget: cfg.encoder_budget,
            });
        }
        if enc.register_count != cfg.register_count {
            return Err(Error::Shape(format!(
                "layout has {} registers, model expects {}",
                enc.register_count, cfg.register_count
            )));
        }
        let pv: Vec<Var> = self.params.tensors.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let n = enc.len();
        let rot = cfg.rot_dims();

        // embed and sum aligned grids
        let mut x: Option<Var> = None;
        for (name, col) in &enc.grids {
            let m = cfg.modality(name)?;
            let ids: Vec<Option<usize>> = col
                .iter()
                .map(|t| match *t {
                    Some(id) if id == m.pad_id => Ok(None),
                    Some(id) if (id as usize) < m.vocab_size => Ok(Some(id as usize)),
                    Some(id) => Err(Error::TokenOutOfRange { id, size: m.vocab_size }),
                    None => Ok(None),
                })
                .collect::<Result<_>>()?;
            let e = g.embed(pv[idx.tables[&m.table]], ids);
            x = Some(match x {
                Some(acc) => g.add(acc, e),
                None => e,
            });
        }
        let reg_ids: Vec<Option<usize>> = (0..n)
            .map(|i| {
                (i >= enc.register_start && i < enc.register_start + enc.register_count).then(|| i - enc.register_start)
            })
            .collect();
        let r = g.embed(pv[idx.registers], reg_ids);
        let mut x = match x {
            Some(acc) => g.add(acc, r),
            None => r,
        };

        let enc_angles = rope_angles(&enc.positions, rot, cfg.rope_base);
        let self_mask = AttnMask {
            kinds: partition_attention_heads(cfg.n_heads).heads,
            key_keep: enc.keep.clone(),
        };
        for (l, b) in idx.encoder.iter().enumerate() {
            let (y, _) = self.attention_block(g, &pv, &b.attn, x, None, Some(enc_angles.clone()), Some(enc_angles.clone()), &self_mask);
            x = self.ffn(g, &pv, b, y);
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite {
                    where_: format!("encoder layer {l}"),
                });
            }
        }
        let latent = if cfg.final_norm {
            g.layer_norm(x, pv[idx.enc_final.0], pv[idx.enc_final.1])
        } else {
            x
        };

        // decoder queries: the modality's mask embedding at native positions
        let mut parts = Vec::new();
        let mut q_positions = Vec::new();
        for s in &dec.segments {
            let m = cfg.modality(&s.modality)?;
            if s.positions.len() != s.targets.len() {
                return Err(Error::Shape(format!("segment {} has mismatched targets", s.modality)));
            }
            if s.positions.is_empty() {
                continue;
            }
            parts.push(g.embed(pv[idx.tables[&m.table]], alloc::vec![Some(m.mask_id as usize); s.positions.len()]));
            q_positions.extend_from_slice(&s.positions);
        }
        let nq = q_positions.len();
        let mut cross = Vec::new();
        let mut logits = Vec::new();
        let mut losses = Vec::new();
        let mut target_count = 0;
        if nq > 0 {
            let mut y = if parts.len() == 1 { parts[0] } else { g.concat_rows(parts) };
            let q_angles = rope_angles(&q_positions, rot, cfg.rope_base);
            let dec_mask = AttnMask {
                kinds: partition_attention_heads(cfg.n_heads).heads,
                key_keep: alloc::vec![true; nq],
            };
            let cross_mask = AttnMask {
                kinds: alloc::vec![MaskKind::Bidirectional; cfg.n_heads],
                key_keep: enc.keep.clone(),
            };
            for (l, b) in idx.decoder.iter().enumerate() {
                if cfg.decoder_self_attention {
                    y = self.attention_block(g, &pv, &b.attn, y, None, Some(q_angles.clone()), Some(q_angles.clone()), &dec_mask).0;
                }
                let c = b.cross.as_ref().expect("decoder blocks carry cross-attention");
                let (qa, ka) = if cfg.cross_attention_rope {
                    (Some(q_angles.clone()), Some(enc_angles.clone()))
                } else {
                    (None, None)
                };
                let (z, att) = self.attention_block(g, &pv, c, y, Some(latent), qa, ka, &cross_mask);
                cross.push(att);
                y = self.ffn(g, &pv, b, z);
                if !g.value(y).is_finite() {
                    return Err(Error::NonFinite {
                        where_: format!("decoder layer {l}"),
                    });
                }
            }
            if cfg.final_norm {
                y = g.layer_norm(y, pv[idx.dec_final.0], pv[idx.dec_final.1]);
            }
            let mut off = 0;
            for s in dec.segments.iter().filter(|s| !s.positions.is_empty()) {
                let m = cfg.modality(&s.modality)?;
                let (w, bias) = idx.heads[&s.modality];
                let rows = g.slice_rows(y, off, s.positions.len());
                off += s.positions.len();
                let lg = g.matmul(rows, pv[w]);
                let lg = g.add_row(lg, pv[bias]);
                let targets: Vec<Option<usize>> = s
                    .targets
                    .iter()
                    .map(|&t| {
                        if t == m.pad_id {
                            Ok(None)
                        } else if (t as usize) < m.vocab_size {
                            Ok(Some(t as usize))
                        } else {
                            Err(Error::TokenOutOfRange { id: t, size: m.vocab_size })
                        }
                    })
                    .collect::<Result<_>>()?;
                target_count += targets.iter().filter(|t| t.is_some()).count();
                losses.push(match objective {
                    Objective::CrossEntropy => g.cross_entropy_sum(lg, targets),
                    Objective::LinearProbe => g.pick_sum(lg, targets),
                });
                logits.push(lg);
            }
        }
        let loss = g.sum_scalars(losses);
        Ok(Built {
            logits,
            loss,
            target_count,
            cross,
        })
    }

    fn output(&self, g: &Graph, b: &Built, dec: &DecoderInput) -> ForwardOutput {
        // empty segments get empty logit matrices so indices line up
        let mut it = b.logits.iter();
        let logits = dec
            .segments
            .iter()
            .map(|s| {
                if s.positions.is_empty() {
                    Mat::zeros(0, self.config.modality(&s.modality).map_or(0, |m| m.vocab_size))
                } else {
                    g.value(*it.next().unwrap()).clone()
                }
            })
            .collect();
        ForwardOutput {
            logits,
            loss_sum: g.value(b.loss).data[0],
            target_count: b.target_count,
            cross_attention: b.cross.iter().map(|v| g.attention_probs(*v).unwrap().to_vec()).collect(),
        }
    }

    pub fn forward(&self, enc: &FlatLayout, dec: &DecoderInput, objective: Objective) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let b = self.build(&mut g, enc, dec, objective)?;
        Ok(self.output(&g, &b, dec))
    }

    /// Forward pass plus gradients of the summed loss, one per parameter.
    pub fn loss_and_grads(&self, enc: &FlatLayout, dec: &DecoderInput, objective: Objective) -> Result<(ForwardOutput, Vec<Mat>)> {
        let mut g = Graph::new();
        let b = self.build(&mut g, enc, dec, objective)?;
        let out = self.output(&g, &b, dec);
        let grads = g
            .backward(b.loss, self.params.tensors.len())
            .into_iter()
            .zip(&self.params.tensors)
            .map(|(gr, p)| gr.unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
            .collect();
        Ok((out, grads))
    }
}

/// Relative error used by the gradient check; the floor keeps parameters
/// with vanishing gradients from dividing roundoff by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const GRADCHECK_STEP: f64 = 1e-5;

/// Maximum relative error between analytic gradients of the mean loss and
/// central finite differences, over every parameter entry.
pub fn gradient_check(model: &Model, enc: &FlatLayout, dec: &DecoderInput, objective: Objective) -> Result<f64> {
    let (out, grads) = model.loss_and_grads(enc, dec, objective)?;
    let count = out.target_count.max(1) as f64;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (pi, p) in model.params.tensors.iter().enumerate() {
        for e in 0..p.len() {
            let x0 = p.data[e];
            probe.params.tensors[pi].data[e] = x0 + GRADCHECK_STEP;
            let plus = probe.forward(enc, dec, objective)?.loss_sum / count;
            probe.params.tensors[pi].data[e] = x0 - GRADCHECK_STEP;
            let minus = probe.forward(enc, dec, objective)?.loss_sum / count;
            probe.params.tensors[pi].data[e] = x0;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            worst = worst.max(relative_error(grads[pi].data[e] / count, numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Parameters,
    pub optimizer: OptimState,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: &Model, optimizer: OptimState, step: u64, rng: RngState) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.config.clone(),
            params: model.params.clone(),
            optimizer,
            step,
            rng,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{assemble_encoder_layout, LayoutConfig};
    use crate::sample::{Entity, MultimodalSample, Split};
    use crate::synth::{default_registry, names};
    use alloc::collections::BTreeSet;
    use alloc::vec;

    fn tiny_registry() -> ModalityRegistry {
        let full = default_registry(4);
        let keep = [names::NT_SEQ, names::AUX, names::CONTEXT, names::TAXONOMY];
        ModalityRegistry::new(full.modalities.into_iter().filter(|d| keep.contains(&d.name.as_str())).collect()).unwrap()
    }

    fn tiny_config(reg: &ModalityRegistry) -> ModelConfig {
        let mut c = ModelConfig::with_dims(1, 1, 16, 2, 64, 16, 2, 0.75).for_registry(reg);
        c.ffn_mult = 2;
        c
    }

    fn case(reg: &ModalityRegistry, seed: u64) -> (FlatLayout, DecoderInput) {
        let mut rng = stream_rng(seed, 99);
        let len = 7;
        let mut tracks = BTreeMap::new();
        tracks.insert(names::NT_SEQ.to_string(), (0..len).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect::<Vec<u32>>());
        tracks.insert(names::AUX.to_string(), (0..len).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect::<Vec<u32>>());
        tracks.insert(names::TAXONOMY.to_string(), vec![3]);
        let s = MultimodalSample {
            id: "g".into(),
            entity: Entity::Rna,
            cluster_id: "c".into(),
            split: Split::Train,
            tracks,
            region_labels: None,
        };
        let inputs: BTreeSet<String> = s.tracks.keys().cloned().collect();
        let mut l = assemble_encoder_layout(&s, reg, &inputs, &LayoutConfig { encoder_budget: 64, register_count: 2 }).unwrap();
        let mask = reg.get(names::NT_SEQ).unwrap().tokenizer.specials.mask;
        l.mask_window(names::NT_SEQ, 2, 3, mask).unwrap();
        l.drop_indices(0, &[5]).unwrap();
        let nt = s.track(names::NT_SEQ).unwrap();
        let dec = DecoderInput {
            segments: vec![
                DecoderSegment {
                    modality: names::NT_SEQ.into(),
                    positions: vec![2, 3, 4],
                    targets: nt[2..5].to_vec(),
                },
                DecoderSegment {
                    modality: names::TAXONOMY.into(),
                    positions: vec![0],
                    targets: vec![3],
                },
            ],
        };
        (l.flatten(), dec)
    }

    #[test]
    fn config_validation() {
        let reg = tiny_registry();
        assert!(ModelConfig::desk().for_registry(&reg).validate().is_ok());
        assert!(ModelConfig::paper().for_registry(&reg).validate().is_ok());
        assert_eq!(ModelConfig::paper().rot_dims(), 48);
        let mut bad = ModelConfig::desk().for_registry(&reg);
        bad.n_heads = 5;
        assert!(bad.validate().is_err());
        let mut odd = ModelConfig::with_dims(1, 1, 8, 2, 10, 10, 1, 0.75).for_registry(&reg);
        assert!(odd.validate().is_err());
        odd.rope_fraction = 0.5;
        assert!(odd.validate().is_ok());
    }

    #[test]
    fn full_model_gradcheck() {
        let reg = tiny_registry();
        let model = Model::init(tiny_config(&reg), 3).unwrap();
        let (enc, dec) = case(&reg, 3);
        let err = gradient_check(&model, &enc, &dec, Objective::CrossEntropy).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn linear_ablation_gradcheck() {
        let reg = tiny_registry();
        let mut cfg = tiny_config(&reg);
        cfg.encoder_depth = 0;
        cfg.decoder_depth = 0;
        cfg.final_norm = false;
        let model = Model::init(cfg, 5).unwrap();
        let (enc, dec) = case(&reg, 5);
        let err = gradient_check(&model, &enc, &dec, Objective::LinearProbe).unwrap();
        assert!(err < 1e-8, "max relative error {err}");
    }

    #[test]
    fn pad_grid_is_additive_identity() {
        let reg = tiny_registry();
        let model = Model::init(tiny_config(&reg), 1).unwrap();
        let (enc, dec) = case(&reg, 1);
        let pad = reg.get(names::AUX).unwrap().tokenizer.specials.pad;
        let mut padded = enc.clone();
        let mut stripped = enc.clone();
        let col = padded.grids.iter().position(|(m, _)| m == names::AUX).unwrap();
        padded.grids[col].1.iter_mut().for_each(|t| {
            if t.is_some() {
                *t = Some(pad)
            }
        });
        stripped.grids.remove(col);
        let a = model.forward(&padded, &dec, Objective::CrossEntropy).unwrap();
        let b = model.forward(&stripped, &dec, Objective::CrossEntropy).unwrap();
        assert_eq!(a.logits, b.logits);
        // summation order
        let mut rev = enc.clone();
        rev.grids.reverse();
        let c = model.forward(&enc, &dec, Objective::CrossEntropy).unwrap();
        let d = model.forward(&rev, &dec, Objective::CrossEntropy).unwrap();
        for (x, y) in c.logits.iter().zip(&d.logits) {
            for (u, v) in x.data.iter().zip(&y.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropped_latents_get_no_cross_attention() {
        let reg = tiny_registry();
        let model = Model::init(tiny_config(&reg), 2).unwrap();
        let (enc, dec) = case(&reg, 2);
        let out = model.forward(&enc, &dec, Objective::CrossEntropy).unwrap();
        for layer in &out.cross_attention {
            for head in layer {
                for i in 0..head.rows {
                    for j in 0..head.cols {
                        if !enc.keep[j] {
                            assert_eq!(head.get(i, j), 0.0);
                        }
                    }
                }
            }
        }
        assert_eq!(out.logits[0].cols, 7);
        assert_eq!(out.logits[1].cols, 11 + 3);
    }

    #[test]
    fn forward_is_deterministic() {
        let reg = tiny_registry();
        let model = Model::init(tiny_config(&reg), 4).unwrap();
        let (enc, dec) = case(&reg, 4);
        let a = model.forward(&enc, &dec, Objective::CrossEntropy).unwrap();
        let b = model.forward(&enc, &dec, Objective::CrossEntropy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_segments_independent_without_self_attention() {
        let reg = tiny_registry();
        let mut cfg = tiny_config(&reg);
        cfg.decoder_self_attention = false;
        let model = Model::init(cfg, 6).unwrap();
        let (enc, dec) = case(&reg, 6);
        let both = model.forward(&enc, &dec, Objective::CrossEntropy).unwrap();
        let mut first_only = dec.clone();
        first_only.segments.truncate(1);
        first_only.segments[0].targets = vec![0, 0, 0];
        let one = model.forward(&enc, &first_only, Objective::CrossEntropy).unwrap();
        assert_eq!(both.logits[0], one.logits[0]);
    }

    #[test]
    fn decoder_budget_enforced() {
        let reg = tiny_registry();
        let model = Model::init(tiny_config(&reg), 6).unwrap();
        let (enc, _) = case(&reg, 6);
        let dec = DecoderInput {
            segments: vec![DecoderSegment {
                modality: names::NT_SEQ.into(),
                positions: (0..17).collect(),
                targets: vec![0; 17],
            }],
        };
        assert!(matches!(model.forward(&enc, &dec, Objective::CrossEntropy), Err(Error::OverBudget { .. })));
    }

    #[test]
    fn saturated_correct_logits_have_near_zero_loss() {
        let reg = tiny_registry();
        let mut model = Model::init(tiny_config(&reg), 8).unwrap();
        let (enc, dec) = case(&reg, 8);
        for s in &dec.segments {
            let bid = model.params.id(&format!("head.{}.b", s.modality)).unwrap();
            let wid = model.params.id(&format!("head.{}.w", s.modality)).unwrap();
            model.params.tensors[wid].data.iter_mut().for_each(|x| *x = 0.0);
            let target = s.targets[0] as usize;
            for (i, x) in model.params.tensors[bid].data.iter_mut().enumerate() {
                *x = if i == target { 60.0 } else { 0.0 };
            }
        }
        let same_targets = DecoderInput {
            segments: dec
                .segments
                .iter()
                .map(|s| DecoderSegment {
                    targets: vec![s.targets[0]; s.targets.len()],
                    ..s.clone()
                })
                .collect(),
        };
        let (out, grads) = model.loss_and_grads(&enc, &same_targets, Objective::CrossEntropy).unwrap();
        assert!(out.mean_loss().unwrap() < 1e-20);
        let gmax = grads.iter().flat_map(|g| g.data.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gmax < 1e-20);
    }
}
