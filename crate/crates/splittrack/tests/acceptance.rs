//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::Rng;

use splittrack::formats::{load_checkpoint, load_corpus, load_registry, load_tokenizer, save_checkpoint, save_corpus, save_registry, save_tokenizer};
use splittrack::profile::Profile;
use splittrack_core::design::{
    conditioning_from_sample, design_rna_window, iterative_protein_design, sample_design_hyperparams, window_centers,
    CenterSpec, ConditioningStrategy, DesignHyperparams, DesignWindow, ExitReason, DESIGN_WIDTHS, MAX_DESIGN_CYCLES,
};
use splittrack_core::eval::{
    aupr, deigan_pseudo_energy, delta_f1, pair_metrics, parse_dot_bracket, pearson, phylop_vep, sequence_completion_eval,
    wilcoxon_signed_rank_one_sided, CompletionConfig, DeiganParams, PairSet, Predictor, VariantScoreInput,
};
use splittrack_core::layout::{apply_token_dropout, assemble_encoder_layout, FlatLayout, LayoutConfig};
use splittrack_core::model::{gradient_check, Checkpoint, DecoderInput, DecoderSegment, Model, ModelConfig, Objective, Parameters};
use splittrack_core::pathways::{
    default_pathways, eligible_pathways, pack_targets, sample_pathway, select_inputs, selection_probabilities, Pathway,
    DEFAULT_DECODER_BUDGET,
};
use splittrack_core::rng::{mix64, stream_rng, RngState};
use splittrack_core::sample::{presence_signature, Entity, ModalityRegistry, MultimodalSample, Split, SplitFractions};
use splittrack_core::scheduler::{lognormal_lengths, padding_waste, paper_stages, simulate_schedule, CostModel, SimConfig, Stage, Strategy};
use splittrack_core::synth::names::{AA_SEQ, AUX, CONTEXT, DSSP, NT_SEQ, PHYLOP, SPLICE, TAXONOMY};
use splittrack_core::synth::{default_registry, generate_synthetic_corpus, GeneratorRecipe};
use splittrack_core::tensor::Mat;
use splittrack_core::training::{lr_at, optimizer_step, train, LrSchedule, OptimState};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

fn gradcheck_registry() -> ModalityRegistry {
    let keep = [NT_SEQ, AUX, AA_SEQ, DSSP, CONTEXT, TAXONOMY];
    let full = default_registry(4);
    ModalityRegistry::new(full.modalities.into_iter().filter(|d| keep.contains(&d.name.as_str())).collect()).unwrap()
}

fn gradcheck_case(reg: &ModalityRegistry, seed: u64, registers: usize) -> (FlatLayout, DecoderInput) {
    let mut rng = stream_rng(seed, 1);
    let mut draw = |n: usize, k: u32| -> Vec<u32> { (0..n).map(|_| rng.random_range(0..k)).collect() };
    let mut tracks = BTreeMap::new();
    tracks.insert(NT_SEQ.to_string(), draw(9, 4));
    tracks.insert(AUX.to_string(), draw(9, 4));
    tracks.insert(AA_SEQ.to_string(), draw(3, 20));
    tracks.insert(DSSP.to_string(), draw(3, 8));
    tracks.insert(TAXONOMY.to_string(), draw(1, 8));
    let s = MultimodalSample {
        id: format!("g{seed}"),
        entity: Entity::Paired,
        cluster_id: "c".into(),
        split: Split::Train,
        tracks,
        region_labels: None,
    };
    let inputs: BTreeSet<String> = s.tracks.keys().cloned().collect();
    let cfg = LayoutConfig {
        encoder_budget: 64,
        register_count: registers,
    };
    let mut l = assemble_encoder_layout(&s, reg, &inputs, &cfg).unwrap();
    let nt_mask = reg.get(NT_SEQ).unwrap().tokenizer.specials.mask;
    let dssp_mask = reg.get(DSSP).unwrap().tokenizer.specials.mask;
    l.mask_window(NT_SEQ, 3, 3, nt_mask).unwrap();
    l.mask_window(DSSP, 1, 2, dssp_mask).unwrap();
    l.drop_indices(0, &[(seed % 3) as usize]).unwrap();
    let t = |m: &str| s.track(m).unwrap().to_vec();
    let dec = DecoderInput {
        segments: vec![
            DecoderSegment {
                modality: NT_SEQ.into(),
                positions: vec![3, 4, 5],
                targets: t(NT_SEQ)[3..6].to_vec(),
            },
            DecoderSegment {
                modality: DSSP.into(),
                positions: vec![1, 2],
                targets: t(DSSP)[1..3].to_vec(),
            },
            DecoderSegment {
                modality: TAXONOMY.into(),
                positions: vec![0],
                targets: t(TAXONOMY),
            },
        ],
    };
    (l.flatten(), dec)
}

fn criterion_gradcheck() -> Outcome {
    let reg = gradcheck_registry();
    // (encoder depth, decoder depth, width, heads, rope fraction, registers, decoder self-attention, cross-attention rope)
    let configs = [
        (1, 1, 16, 2, 0.75, 2, true, false),
        (2, 1, 16, 2, 0.75, 1, true, false),
        (1, 2, 16, 4, 0.5, 2, true, true),
        (1, 1, 24, 2, 0.5, 3, true, false),
        (2, 2, 16, 2, 0.75, 2, false, false),
        (1, 1, 24, 3, 0.75, 1, true, true),
        (1, 1, 16, 2, 1.0, 2, true, true),
        (2, 1, 24, 2, 0.5, 2, true, false),
        (1, 2, 16, 2, 0.25, 4, true, false),
        (1, 1, 16, 1, 0.75, 2, true, false),
    ];
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for (seed, &(de, dd, w, h, rf, regs, self_attn, cross_rope)) in configs.iter().enumerate() {
        let mut cfg = ModelConfig::with_dims(de, dd, w, h, 64, 16, regs, rf).for_registry(&reg);
        cfg.ffn_mult = 2;
        cfg.decoder_self_attention = self_attn;
        cfg.cross_attention_rope = cross_rope;
        cfg.validate().map_err(|e| format!("config {seed}: {e}"))?;
        let model = Model::init(cfg, seed as u64).unwrap();
        let (enc, dec) = gradcheck_case(&reg, seed as u64, regs);
        let err = gradient_check(&model, &enc, &dec, Objective::CrossEntropy).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    let elapsed = t0.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("max relative error {worst:.2e} over 10 configs in {}", secs(elapsed)),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_rope() -> Outcome {
    let reg = default_registry(8);
    let corpus = generate_synthetic_corpus(&GeneratorRecipe::named("mixed").unwrap(), &reg, 200, 7).unwrap();
    let mut rng = stream_rng(2, 0);
    let (mut violations, mut cases) = (0usize, 0usize);
    while cases < 1000 {
        let s = &corpus[rng.random_range(0..corpus.len())];
        let inputs: BTreeSet<String> = s.tracks.keys().filter(|_| rng.random::<f64>() < 0.7).cloned().collect();
        if inputs.is_empty() {
            continue;
        }
        let registers = rng.random_range(0..6);
        let cfg = LayoutConfig {
            encoder_budget: 100_000,
            register_count: registers,
        };
        let layout = assemble_encoder_layout(s, &reg, &inputs, &cfg).unwrap();
        cases += 1;
        let flat = layout.flatten();
        let mut offset = 0;
        for g in &layout.groups {
            let want: Vec<usize> = (0..g.len()).collect();
            if g.positions != want || flat.positions[offset..offset + g.len()] != want[..] {
                violations += 1;
            }
            offset += g.len();
        }
        if flat.positions[offset..] != (0..registers).collect::<Vec<_>>()[..] {
            violations += 1;
        }
        let rate = rng.random_range(0.0..0.6);
        let dropped = apply_token_dropout(&layout, rate, &mut rng).unwrap();
        let dflat = dropped.flatten();
        if dflat.positions != flat.positions || dflat.keep[offset..].iter().any(|k| !k) {
            violations += 1;
        }
        for (g0, g1) in layout.groups.iter().zip(&dropped.groups) {
            let kept: Vec<usize> = (0..g1.len()).filter(|&i| g1.keep_mask[i]).map(|i| g0.positions[i]).collect();
            if g1.retained_positions() != kept {
                violations += 1;
            }
        }
    }
    check(violations == 0, format!("{cases} partitions, {violations} violations"))
}

// ---------------------------------------------------------------- 3

fn criterion_memorization() -> Outcome {
    let profile = Profile::resolve("desk").unwrap();
    let reg = default_registry(profile.corpus.continuous_bins);
    let corpus = generate_synthetic_corpus(&GeneratorRecipe::named("memorize").unwrap(), &reg, 32, 1).unwrap();
    let model = Model::init(profile.model_config_for(&reg), 1).unwrap();
    let pathway = Pathway::spanned("memorize", &[NT_SEQ], &[], &[NT_SEQ], &[], 1.0, 0.25).unwrap();
    let mut tc = profile.train_config(1);
    tc.stages = vec![Stage {
        context_budget: 64,
        max_lr: 1e-3,
        batch_target: 8,
        epochs: 600,
    }];
    tc.n_buckets = 1;
    tc.fixed_dropout = Some(0.0);
    let t0 = Instant::now();
    let out = train(model, &corpus, &reg, &[pathway], &tc, |_| {}).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let layout = LayoutConfig {
        encoder_budget: out.model.config.encoder_budget,
        register_count: out.model.config.register_count,
    };
    let rep = sequence_completion_eval(&out.model, &corpus, &reg, &CompletionConfig::new(NT_SEQ, profile.eval.mask_width, layout))
        .map_err(|e| e.to_string())?;
    let window = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
    let first = window(&losses[..4.min(losses.len())]);
    let last = window(&losses[losses.len().saturating_sub(4)..]);
    let ratio = first / last;
    check(
        rep.accuracy() >= 0.95 && ratio >= 10.0 && elapsed < Duration::from_secs(600),
        format!(
            "accuracy {:.3}, loss {first:.3} -> {last:.5} ({ratio:.0}x) in {} over {} steps",
            rep.accuracy(),
            secs(elapsed),
            out.step
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_uplift() -> Outcome {
    let reg = default_registry(8);
    let mut recipe = GeneratorRecipe::named("aux4").unwrap();
    recipe.splits = SplitFractions {
        train: 1.0,
        val: 0.0,
        test: 0.0,
    };
    let corpus = generate_synthetic_corpus(&recipe, &reg, 128, 1).unwrap();
    let held_out = generate_synthetic_corpus(&recipe, &reg, 64, 2).unwrap();
    let model = Model::init(ModelConfig::desk().for_registry(&reg), 1).unwrap();
    let mut pathway = Pathway::spanned("aux_completion", &[NT_SEQ], &[AUX], &[NT_SEQ], &[], 1.0, 0.25).unwrap();
    pathway.optional_input_p = 0.5;
    let tc = splittrack_core::training::TrainConfig {
        stages: vec![Stage {
            context_budget: 128,
            max_lr: 1e-3,
            batch_target: 8,
            epochs: 40,
        }],
        warmup_epochs: 2.0,
        cooldown_epochs: 0.0,
        n_buckets: 1,
        dropout_max: 0.0,
        fixed_dropout: Some(0.0),
        weight_decay: 0.0,
        seed: 1,
    };
    let out = train(model, &corpus, &reg, &[pathway], &tc, |_| {}).map_err(|e| e.to_string())?;
    let layout = LayoutConfig {
        encoder_budget: 512,
        register_count: 5,
    };
    let base = CompletionConfig::new(NT_SEQ, 8, layout);
    let with = sequence_completion_eval(&out.model, &held_out, &reg, &base.clone().conditioned_on(&[AUX])).map_err(|e| e.to_string())?;
    let without = sequence_completion_eval(&out.model, &held_out, &reg, &base).map_err(|e| e.to_string())?;
    let uplift = with.accuracy() - without.accuracy();
    check(
        uplift >= 0.20,
        format!(
            "conditioned {:.3}, unconditioned {:.3}, uplift {uplift:.3} on {} held-out samples",
            with.accuracy(),
            without.accuracy(),
            with.records.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_pathways() -> Outcome {
    let reg = default_registry(8);
    let pathways: Vec<Pathway> = default_pathways();
    let mixed = generate_synthetic_corpus(&GeneratorRecipe::named("mixed").unwrap(), &reg, 300, 5).unwrap();
    let heavy = generate_synthetic_corpus(&GeneratorRecipe::named("heavy-tail").unwrap(), &reg, 300, 6).unwrap();
    let richest = mixed
        .iter()
        .max_by_key(|s| eligible_pathways(&presence_signature(s), &pathways).len())
        .unwrap();
    let eligible = eligible_pathways(&presence_signature(richest), &pathways);
    let probs = selection_probabilities(&eligible);
    let n = 10_000usize;
    let mut rng = stream_rng(5, 0);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for _ in 0..n {
        *counts.entry(sample_pathway(&eligible, &mut rng).unwrap().name.as_str()).or_default() += 1;
    }
    let mut worst_z = 0.0f64;
    for (p, &prob) in eligible.iter().zip(&probs) {
        let c = counts.get(p.name.as_str()).copied().unwrap_or(0) as f64;
        let sigma = (n as f64 * prob * (1.0 - prob)).sqrt();
        let z = if sigma > 0.0 { (c - n as f64 * prob).abs() / sigma } else { 0.0 };
        worst_z = worst_z.max(z);
    }

    let pool: Vec<&MultimodalSample> = mixed.iter().chain(&heavy).collect();
    let (mut over, mut packed_cases, mut max_total) = (0usize, 0usize, 0usize);
    for case in 0..10_000 {
        let mut r = stream_rng(55, case);
        let s = pool[r.random_range(0..pool.len())];
        let el = eligible_pathways(&presence_signature(s), &pathways);
        if el.is_empty() {
            continue;
        }
        let p = sample_pathway(&el, &mut r).unwrap();
        let inputs = select_inputs(s, p, &mut r);
        let Ok(packed) = pack_targets(s, &reg, p, &inputs, DEFAULT_DECODER_BUDGET, &mut r) else {
            continue;
        };
        packed_cases += 1;
        let sum: usize = packed.segments.iter().map(|g| g.len).sum();
        let in_track = packed.segments.iter().all(|g| g.start + g.len <= s.track(&g.modality).map_or(0, <[u32]>::len));
        if packed.total > DEFAULT_DECODER_BUDGET || sum != packed.total || !in_track {
            over += 1;
        }
        max_total = max_total.max(packed.total);
    }
    check(
        worst_z <= 3.0 && over == 0,
        format!(
            "{} eligible pathways, max |z| {worst_z:.2}; {packed_cases} packings, max {max_total} tokens, {over} over budget",
            eligible.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_scheduler() -> Outcome {
    let budget = paper_stages()[4].context_budget;
    let cost = CostModel::default();
    let mut failures = Vec::new();
    let (mut naive_sum, mut bucket_sum) = (0.0, 0.0);
    for seed in 0..10u64 {
        let lengths = lognormal_lengths(10_000, 6.0, 1.0, budget, seed);
        let run = |strategy, affinity| {
            let cfg = SimConfig {
                n_workers: 4,
                affinity,
                strategy,
                n_buckets: 8,
                memory_budget: 64.0 * cost.cost(budget),
                cost,
                seed,
            };
            simulate_schedule(&lengths, budget, &cfg).unwrap().metrics
        };
        let naive = run(Strategy::Naive, false);
        let bucketed = run(Strategy::Bucketed, true);
        naive_sum += naive.padding_waste;
        bucket_sum += bucketed.padding_waste;
        if bucketed.padding_waste >= naive.padding_waste {
            failures.push(format!("seed {seed}: waste {} >= {}", bucketed.padding_waste, naive.padding_waste));
        }
        if bucketed.worker_bucket_switches != 0 {
            failures.push(format!("seed {seed}: {} switches", bucketed.worker_bucket_switches));
        }
    }
    let pair = padding_waste(&[10, 100]).unwrap();
    if pair != 0.45 {
        failures.push(format!("[10, 100] waste {pair}"));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "mean waste naive {:.3} vs bucketed {:.3}, zero switches, [10, 100] -> {pair}",
                naive_sum / 10.0,
                bucket_sum / 10.0
            )
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 7

fn aupr_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut total = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= s).collect();
        let tp = above.iter().filter(|&&j| labels[j]).count() as f64;
        total += tp / above.len() as f64;
    }
    total / positives
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

/// Random non-crossing structure of length `len` with its pair set.
fn random_structure<R: Rng>(len: usize, rng: &mut R) -> (String, PairSet) {
    let mut chars = vec!['.'; len];
    let mut pairs = PairSet::new();
    fn fill<R: Rng>(lo: usize, hi: usize, chars: &mut [char], pairs: &mut PairSet, rng: &mut R) {
        let mut i = lo;
        while i + 1 < hi {
            if rng.random::<f64>() < 0.4 {
                let j = rng.random_range(i + 1..hi);
                chars[i] = '(';
                chars[j] = ')';
                pairs.insert((i, j));
                fill(i + 1, j, chars, pairs, rng);
                i = j + 1;
            } else {
                i += 1;
            }
        }
    }
    fill(0, len, &mut chars, &mut pairs, rng);
    (chars.into_iter().collect(), pairs)
}

fn dot_bracket_valid_oracle(s: &str) -> bool {
    if s.chars().any(|c| !matches!(c, '(' | ')' | '.')) {
        return false;
    }
    let mut t: String = s.chars().filter(|&c| c != '.').collect();
    while t.contains("()") {
        t = t.replace("()", "");
    }
    t.is_empty()
}

fn dot_bracket_pairs_oracle(s: &str) -> PairSet {
    let c: Vec<char> = s.chars().collect();
    let balanced = |a: usize, b: usize| {
        let inner: String = c[a..b].iter().collect();
        dot_bracket_valid_oracle(&inner)
    };
    let mut pairs = PairSet::new();
    for j in 0..c.len() {
        if c[j] == ')' {
            let i = (0..j).rev().find(|&i| c[i] == '(' && balanced(i + 1, j)).unwrap();
            pairs.insert((i, j));
        }
    }
    pairs
}

fn wilcoxon_oracle(pairs: &[(f64, f64)]) -> (f64, f64) {
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|&x| x != 0.0).collect();
    let mags: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let rank = |m: f64| {
        let less = mags.iter().filter(|&&x| x < m).count() as f64;
        let equal = mags.iter().filter(|&&x| x == m).count() as f64;
        less + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = mags.iter().map(|&m| rank(m)).collect();
    let w: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += (s <= w) as u64;
        ge += (s >= w) as u64;
    }
    let total = (1u64 << n) as f64;
    let p_two = (2.0 * (le as f64 / total).min(ge as f64 / total)).min(1.0);
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    let med = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let p_one = if med > 0.0 { p_two / 2.0 } else { 1.0 - p_two / 2.0 };
    (p_two, p_one)
}

fn criterion_metrics() -> Outcome {
    let mut rng = stream_rng(7, 0);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |name: &'static str| *failures.entry(name).or_default() += 1;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    for _ in 0..1000 {
        // aupr, with ties from a coarse score grid
        let n = rng.random_range(1..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        labels[rng.random_range(0..n)] = true;
        if !close(aupr(&scores, &labels).unwrap(), aupr_oracle(&scores, &labels)) {
            fail("aupr");
        }

        // pearson over integer data, so both formulas sum exactly
        let n = rng.random_range(2..25);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-20..=20) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-20..=20) as f64).collect();
        let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
        if !constant(&x) && !constant(&y) && !close(pearson(&x, &y).unwrap(), pearson_oracle(&x, &y)) {
            fail("pearson");
        }

        // pair metrics
        let len = rng.random_range(4..40);
        let (_, reference) = random_structure(len, &mut rng);
        let (_, pred) = random_structure(len, &mut rng);
        let r = pair_metrics(&pred, &reference);
        let pv: Vec<_> = pred.iter().collect();
        let rv: Vec<_> = reference.iter().collect();
        let tp = pv.iter().filter(|p| rv.contains(p)).count();
        let (fp, fn_) = (pv.len() - tp, rv.len() - tp);
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        if (r.tp, r.fp, r.fn_) != (tp, fp, fn_) || !close(r.f1, f1) {
            fail("pair_metrics");
        }

        // dot-bracket: generated structures and random strings
        let (s, pairs) = random_structure(rng.random_range(0..40), &mut rng);
        if parse_dot_bracket(&s).ok() != Some(pairs) {
            fail("parse_dot_bracket");
        }
        let alphabet = ['(', ')', '.', '(', ')', '.', 'x'];
        let garbage: String = (0..rng.random_range(0..14)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        let parsed = parse_dot_bracket(&garbage);
        let ok = match (dot_bracket_valid_oracle(&garbage), parsed) {
            (true, Ok(p)) => p == dot_bracket_pairs_oracle(&garbage),
            (false, Err(_)) => true,
            _ => false,
        };
        if !ok {
            fail("parse_dot_bracket");
        }

        // wilcoxon by full sign enumeration
        let n = rng.random_range(1..=10);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0..6) as f64 / 4.0, rng.random_range(0..6) as f64 / 4.0))
            .collect();
        if pairs.iter().any(|(a, b)| a != b) {
            let w = wilcoxon_signed_rank_one_sided(&pairs).unwrap();
            let (p2, p1) = wilcoxon_oracle(&pairs);
            if !w.exact || !close(w.p_two_sided, p2) || !close(w.p_one_sided, p1) {
                fail("wilcoxon");
            }
        }

        // variant effect window
        let n = rng.random_range(1..80);
        let wt: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mt: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pos = rng.random_range(0..n);
        let window = rng.random_range(1..40);
        let v = phylop_vep(&VariantScoreInput {
            wt_profile: wt.clone(),
            mut_profile: mt.clone(),
            variant_position: pos,
            window,
        })
        .unwrap();
        let lo = pos as i64 - (window / 2) as i64;
        let inside: Vec<usize> = (0..n).filter(|&i| (lo..lo + window as i64).contains(&(i as i64))).collect();
        let expect = inside.iter().map(|&i| (mt[i] - wt[i]).abs()).sum::<f64>() / inside.len() as f64;
        if !close(v.score, expect) || v.window_len != inside.len() {
            fail("phylop_vep");
        }

        // pseudo-energy
        let reactivity = rng.random_range(0.0..5.0);
        let params = DeiganParams {
            m: rng.random_range(0.0..3.0),
            b: rng.random_range(-2.0..1.0),
        };
        if !close(deigan_pseudo_energy(reactivity, &params).unwrap(), params.m * (reactivity + 1.0f64).ln() + params.b) {
            fail("deigan_pseudo_energy");
        }
    }
    let d = delta_f1(0.987, 0.404).unwrap();
    if !close(d, 0.583) {
        fail("delta_f1");
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("1000 instances per metric agree with brute-force oracles; delta F1 {d:.3}")
        } else {
            format!("mismatches {failures:?}")
        },
    )
}

// ---------------------------------------------------------------- 8

/// Deterministic pseudo-random logits keyed on the queried positions.
struct Noise(u64);

impl Predictor for Noise {
    fn predict(&self, _: &FlatLayout, dec: &DecoderInput) -> splittrack_core::Result<Vec<Mat>> {
        Ok(dec
            .segments
            .iter()
            .enumerate()
            .map(|(si, s)| {
                let mut m = Mat::zeros(s.positions.len(), 32);
                for (r, &p) in s.positions.iter().enumerate() {
                    for c in 0..32 {
                        let h = mix64(self.0 ^ mix64((si as u64) << 40 ^ (p as u64) << 8 ^ c as u64));
                        m.set(r, c, (h >> 11) as f64 / (1u64 << 53) as f64 * 6.0);
                    }
                }
                m
            })
            .collect())
    }
}

fn criterion_design() -> Outcome {
    let reg = default_registry(8);
    let corpus = generate_synthetic_corpus(&GeneratorRecipe::named("mixed").unwrap(), &reg, 400, 8).unwrap();
    let layout = LayoutConfig {
        encoder_budget: 100_000,
        register_count: 5,
    };
    let proteins: Vec<&MultimodalSample> = corpus.iter().filter(|s| s.track(AA_SEQ).is_some() && s.track("structure_tokens").is_some()).collect();
    let mut rng = stream_rng(8, 0);
    let (mut runs, mut too_long, mut bad_exit) = (0usize, 0usize, 0usize);
    for k in 0..200u64 {
        let s = proteins[k as usize % proteins.len()];
        let hp = sample_design_hyperparams(&mut rng);
        let cond = conditioning_from_sample(s, ConditioningStrategy::Backbone, &mut rng).unwrap();
        let trace = iterative_protein_design(&Noise(k), &reg, &cond, &hp, &layout, k).map_err(|e| e.to_string())?;
        runs += 1;
        too_long += (trace.cycles.len() > MAX_DESIGN_CYCLES) as usize;
        bad_exit += (trace.exit == ExitReason::MaxCycles && trace.cycles.len() != hp.max_cycles) as usize;
    }
    let cond = conditioning_from_sample(proteins[0], ConditioningStrategy::Backbone, &mut rng).unwrap();
    let vacuous = iterative_protein_design(&Noise(1), &reg, &cond, &DesignHyperparams::vacuous(), &layout, 1).map_err(|e| e.to_string())?;
    let vacuous_ok = vacuous.cycles.len() == 1 && vacuous.exit == ExitReason::AllSatisfied;
    let centers = window_centers(&CenterSpec::standard(), None).len();

    let rna: Vec<&MultimodalSample> = corpus.iter().filter(|s| s.track(NT_SEQ).is_some_and(|t| t.len() >= 60)).collect();
    let (mut cases, mut edits) = (0usize, 0usize);
    let mut k = 0u64;
    while cases < 10_000 {
        k += 1;
        let mut r = stream_rng(88, k);
        let s = rna[r.random_range(0..rna.len())];
        let seq = s.track(NT_SEQ).unwrap();
        let width = DESIGN_WIDTHS[r.random_range(0..DESIGN_WIDTHS.len())];
        let mutation = r.random::<bool>().then(|| r.random_range(0..seq.len()));
        let center = r.random_range(0..seq.len());
        let Ok(window) = DesignWindow::new(center, width, mutation, seq.len()) else {
            continue;
        };
        let conditioning: BTreeSet<String> = [SPLICE, PHYLOP].into_iter().filter(|m| s.track(m).is_some()).map(String::from).collect();
        let out = design_rna_window(&Noise(k), s, &reg, &window, &conditioning, &layout, r.random_range(0.0..2.0), &mut r)
            .map_err(|e| e.to_string())?;
        let range = window.interval();
        edits += (0..seq.len()).filter(|i| !range.contains(i) && out[*i] != seq[*i]).count();
        cases += 1;
    }
    check(
        too_long == 0 && bad_exit == 0 && vacuous_ok && centers == 245 && edits == 0,
        format!(
            "{runs} loops within {MAX_DESIGN_CYCLES} cycles, vacuous exit after {} cycle, {centers} centers, {edits} out-of-window edits over {cases} cases",
            vacuous.cycles.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_schedules() -> Outcome {
    let mut failures = Vec::new();
    for stage in paper_stages() {
        let s = LrSchedule::paper(stage.max_lr, stage.epochs as f64).unwrap();
        let epoch_length = 97;
        let at_warmup = lr_at(8 * epoch_length, epoch_length, &s);
        if (at_warmup - stage.max_lr).abs() > 1e-12 * stage.max_lr {
            failures.push(format!("lr at warmup end {at_warmup} for max {}", stage.max_lr));
        }
        let total = stage.epochs as u64 * epoch_length;
        let floor = stage.max_lr / 100.0;
        let lrs: Vec<f64> = (0..=total).map(|t| lr_at(t, epoch_length, &s)).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        let tail_exact = lrs[(total - 10 * epoch_length) as usize..].iter().all(|&x| x == floor);
        let after_warmup_floor = lrs[(8 * epoch_length) as usize..].iter().all(|&x| x >= floor);
        if !tail_exact || !after_warmup_floor || peak > stage.max_lr * (1.0 + 1e-12) {
            failures.push(format!("stage {} schedule misses its floor or peak", stage.context_budget));
        }
    }

    let mut rng = stream_rng(9, 0);
    let mut params = Parameters {
        names: vec!["w".into()],
        tensors: vec![Mat::from_vec(1, 1, vec![0.7])],
    };
    let mut state = OptimState::new(&params);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for t in 1..=100 {
        let g: f64 = rng.random_range(-2.0..2.0);
        let lr: f64 = rng.random_range(1e-5..1e-2);
        optimizer_step(&mut params, &[Mat::from_vec(1, 1, vec![g])], &mut state, lr).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        p = p * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        worst = worst.max((params.tensors[0].data[0] - p).abs());
    }
    if worst > 1e-12 {
        failures.push(format!("optimizer deviates by {worst:.2e}"));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("5 stage schedules peak at max_lr and floor at max_lr/100; optimizer within {worst:.1e} over 100 steps")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 10

fn criterion_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let reg = default_registry(16);
    let corpus = generate_synthetic_corpus(&GeneratorRecipe::named("mixed").unwrap(), &reg, 60, 10).unwrap();
    save_corpus(&d.join("c.jsonl"), &corpus).unwrap();
    let corpus_ok = load_corpus(&d.join("c.jsonl"), Some(&reg)).unwrap() == corpus;
    let mut tokenizers_ok = true;
    for m in &reg.modalities {
        let p = d.join(format!("{}.tok.json", m.name));
        save_tokenizer(&p, &m.tokenizer).unwrap();
        tokenizers_ok &= load_tokenizer(&p).unwrap() == m.tokenizer;
    }
    save_registry(&d.join("registry.json"), &reg).unwrap();
    let registry_ok = load_registry(&d.join("registry.json")).unwrap() == reg;

    let model = Model::init(ModelConfig::desk().for_registry(&reg), 10).unwrap();
    let mut optimizer = OptimState::new(&model.params);
    optimizer.step = 17;
    optimizer.m[0].data[0] = 0.1 + 1e-17;
    let ckpt = Checkpoint::new(&model, optimizer, 17, RngState::capture(&stream_rng(10, 3)));
    save_checkpoint(&d.join("m.ckpt"), &ckpt).unwrap();
    let loaded = load_checkpoint(&d.join("m.ckpt"), Some(&model.config)).unwrap();
    let ckpt_ok = loaded == ckpt;
    let reloaded = loaded.model().unwrap();

    let mut bit_identical = true;
    for s in corpus.iter().filter(|s| s.track(NT_SEQ).is_some()).take(8) {
        let inputs: BTreeSet<String> = s.tracks.keys().cloned().collect();
        let enc = assemble_encoder_layout(s, &reg, &inputs, &LayoutConfig { encoder_budget: 100_000, register_count: 5 })
            .unwrap()
            .flatten();
        let n = s.track(NT_SEQ).unwrap().len().min(64);
        let dec = DecoderInput {
            segments: vec![DecoderSegment {
                modality: NT_SEQ.into(),
                positions: (0..n).collect(),
                targets: s.track(NT_SEQ).unwrap()[..n].to_vec(),
            }],
        };
        let bits = |m: &Model| -> Vec<u64> {
            m.forward(&enc, &dec, Objective::CrossEntropy).unwrap().logits.iter().flat_map(|l| l.data.iter().map(|x| x.to_bits())).collect()
        };
        bit_identical &= bits(&model) == bits(&reloaded);
    }
    check(
        corpus_ok && tokenizers_ok && registry_ok && ckpt_ok && bit_identical,
        format!(
            "corpus {corpus_ok}, {} tokenizers {tokenizers_ok}, registry {registry_ok}, checkpoint {ckpt_ok}, logits bit-identical {bit_identical}",
            reg.modalities.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("numerical core", criterion_gradcheck),
        ("rope contract", criterion_rope),
        ("memorization", criterion_memorization),
        ("conditioning uplift", criterion_uplift),
        ("pathway sampler", criterion_pathways),
        ("scheduler dominance", criterion_scheduler),
        ("metric oracles", criterion_metrics),
        ("design loop", criterion_design),
        ("schedules", criterion_schedules),
        ("persistence", criterion_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|w| w == &id.to_string() || name.contains(w.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {name:<20} {tag}  {detail} [{}]", secs(t0.elapsed()));
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
