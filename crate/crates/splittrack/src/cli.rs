//! Command-line entry point.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use splittrack_core::design::{
    conditioning_from_sample, design_rna_window, enumerate_windows, iterative_protein_design, rank_designs,
    sample_design_hyperparams, CenterSpec, ConditioningStrategy, DESIGN_WIDTHS,
};
use splittrack_core::eval::{
    delta_f1, deigan_pseudo_energy, expected_bin_value, normalize_reactivity, pair_metrics, predict_chunked, parse_dot_bracket, pearson,
    phylop_vep, sequence_completion_eval, splice_site_eval, wilcoxon_signed_rank_one_sided, CompletionConfig, DeiganParams,
    SpliceConditioning, SpliceConfig, VariantScoreInput,
};
use splittrack_core::layout::{assemble_encoder_layout, LayoutConfig};
use splittrack_core::model::{Checkpoint, DecoderInput, DecoderSegment, Model};
use splittrack_core::pathways::default_pathways;
use splittrack_core::rng::stream_rng;
use splittrack_core::sample::{presence_signature, Entity, ModalityRegistry, MultimodalSample, Split};
use splittrack_core::scheduler::{
    enforce_length_policy, lognormal_lengths, sample_encoder_length, simulate_schedule, CostModel, SimConfig, Strategy,
};
use splittrack_core::synth::names::{AA_SEQ, NT_SEQ, PHYLOP, RASP, SPLICE};
use splittrack_core::synth::{default_registry, generate_synthetic_corpus, GeneratorRecipe};
use splittrack_core::training::train;

use crate::formats::{
    corpus_digest, load_checkpoint, load_corpus, load_pathways, load_registry, read_two_column, save_checkpoint, save_corpus,
    save_pathways, save_registry, JsonLines,
};
use crate::profile::{select_stages, Profile};
use crate::report::{fmt_f, output_dir, write_report, Columns, Report, RunManifest};

pub const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint format 1, tokenizer format 1, registry format 1, pathway format 1)"
);

#[derive(Debug, Parser)]
#[command(name = "splittrack", version = VERSION, about = "Split-track multimodal encoder-decoder toolkit")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Profile name (`desk`, `paper`) or path to a profile file.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Output directory; defaults to $SPLITTRACK_OUT/<command> or runs/<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with its modality registry.
    GenCorpus(GenCorpusArgs),
    /// Train a model through the profile's stage curriculum.
    Train(TrainArgs),
    /// Simulate batch scheduling over corpus lengths.
    SchedSim(SchedArgs),
    /// Evaluation suites.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Constrained design.
    #[command(subcommand)]
    Design(DesignCommand),
    /// Print checkpoint, corpus or layout summaries.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// mixed, memorize, aux4, splice-bounds or heavy-tail.
    #[arg(long, default_value = "mixed")]
    pub recipe: String,
    #[arg(long)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to registry.json beside the corpus.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: CorpusArgs,
    /// `all`, `k`, `a-b`, or `budget:lr:batch:epochs[,...]`.
    #[arg(long, default_value = "all")]
    pub stages: String,
    /// Pathway registry file; defaults to the built-in set.
    #[arg(long)]
    pub pathways: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Naive,
    Bucketed,
    Packing,
}

#[derive(Debug, Args)]
pub struct SchedArgs {
    /// Corpus whose encoder lengths are scheduled.
    #[arg(long, conflicts_with = "lognormal")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Draw this many log-normal lengths instead of reading a corpus.
    #[arg(long)]
    pub lognormal: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// 1-based stage whose context budget applies.
    #[arg(long, default_value_t = 1)]
    pub stage: usize,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, value_enum, default_value = "on")]
    pub affinity: OnOff,
    #[arg(long, value_enum, default_value = "bucketed")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 8)]
    pub buckets: usize,
    /// Per-worker memory in cost units; defaults to 64 budget-length samples.
    #[arg(long)]
    pub memory: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: CorpusArgs,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Masked completion accuracy over a centered window.
    Complete {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        mask_width: Option<usize>,
        /// Comma-separated conditioning modalities.
        #[arg(long, value_delimiter = ',')]
        condition: Vec<String>,
        #[arg(long, default_value = NT_SEQ)]
        target: String,
    },
    /// Donor/acceptor AUPR from restricted softmax scores.
    Splice {
        #[command(flatten)]
        m: ModelArgs,
        /// none or tss-tes.
        #[arg(long, default_value = "none")]
        conditioning: String,
        #[arg(long)]
        flank: Option<usize>,
    },
    /// Variant effect scores from predicted conservation profiles.
    Vep(VepArgs),
    /// Base-pair metrics, reactivity correlation and paired tests.
    Shape(ShapeArgs),
}

#[derive(Debug, Args)]
pub struct VepArgs {
    #[arg(long, requires = "corpus")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Two-column wild-type profile (profile mode).
    #[arg(long, requires = "mut_profile", conflicts_with = "ckpt")]
    pub wt: Option<PathBuf>,
    #[arg(long = "mut")]
    pub mut_profile: Option<PathBuf>,
    /// Variant position; defaults to the sequence center.
    #[arg(long)]
    pub position: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    /// TSV with columns id, reference, with_reactivity, sequence_only (dot-brackets).
    #[arg(long)]
    pub structures: Option<PathBuf>,
    /// Two-column measured reactivities.
    #[arg(long, requires = "reactivity_pred")]
    pub reactivity_gt: Option<PathBuf>,
    #[arg(long)]
    pub reactivity_pred: Option<PathBuf>,
    #[arg(long, default_value_t = 1.8)]
    pub deigan_m: f64,
    #[arg(long, default_value_t = -0.6, allow_negative_numbers = true)]
    pub deigan_b: f64,
    /// Model-predicted reactivity against corpus tracks.
    #[arg(long, requires = "corpus")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DesignCommand {
    /// Redesign windows around a fixed variant in one pass each.
    Rna {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus file holding the sequence and its conditioning tracks.
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Sample id within the file; defaults to the first record.
        #[arg(long)]
        sample_id: Option<String>,
        #[arg(long)]
        mutation: usize,
        #[arg(long, default_value_t = 30)]
        width: usize,
        /// splice or splice+phylop.
        #[arg(long, default_value = "splice")]
        conditioning: String,
    },
    /// Iterative generate-and-verify protein design.
    Protein {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus supplying the conditioning protein.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        sample_id: Option<String>,
        /// backbone, surface40, surface100, backbone+surface40 or backbone+surface100.
        #[arg(long)]
        conditioning: String,
        #[arg(long, default_value_t = 20)]
        n_draws: usize,
    },
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Print the encoder layout of this sample id with every track as input.
    #[arg(long, requires = "corpus")]
    pub dump_layout: Option<String>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let echo: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &echo) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    argv: &'a [String],
    profile: Profile,
}

impl Ctx<'_> {
    fn out(&self, command: &str) -> PathBuf {
        output_dir(self.cli.out.as_deref(), command)
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::start(self.argv, &self.profile.canonical(), self.cli.seed)
    }

    fn layout(&self, model: &Model) -> LayoutConfig {
        let _ = &self.profile;
        LayoutConfig {
            encoder_budget: model.config.encoder_budget,
            register_count: model.config.register_count,
        }
    }

    /// Loads a checkpoint; an explicit `--config` must match its echo.
    fn model(&self, path: &Path, registry: &ModalityRegistry) -> anyhow::Result<Model> {
        let expected = self.cli.config.as_ref().map(|_| self.profile.model_config_for(registry));
        let ckpt = load_checkpoint(path, expected.as_ref())?;
        Ok(ckpt.model()?)
    }
}

fn execute(cli: &Cli, argv: &[String]) -> anyhow::Result<()> {
    let profile = Profile::resolve(cli.config.as_deref().unwrap_or("desk"))?;
    let ctx = Ctx { cli, argv, profile };
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::SchedSim(a) => sched_sim(&ctx, a),
        Command::Eval(e) => match e {
            EvalCommand::Complete {
                m,
                mask_width,
                condition,
                target,
            } => eval_complete(&ctx, m, *mask_width, condition, target),
            EvalCommand::Splice { m, conditioning, flank } => eval_splice(&ctx, m, conditioning, *flank),
            EvalCommand::Vep(a) => eval_vep(&ctx, a),
            EvalCommand::Shape(a) => eval_shape(&ctx, a),
        },
        Command::Design(d) => match d {
            DesignCommand::Rna {
                ckpt,
                seq,
                registry,
                sample_id,
                mutation,
                width,
                conditioning,
            } => design_rna(&ctx, ckpt, seq, registry.as_deref(), sample_id.as_deref(), *mutation, *width, conditioning),
            DesignCommand::Protein {
                ckpt,
                corpus,
                registry,
                sample_id,
                conditioning,
                n_draws,
            } => design_protein(&ctx, ckpt, corpus, registry.as_deref(), sample_id.as_deref(), conditioning, *n_draws),
        },
        Command::Inspect(a) => inspect(&ctx, a),
    }
}

fn registry_path(corpus: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| corpus.parent().unwrap_or(Path::new(".")).join("registry.json"))
}

fn load_data(corpus: &Path, registry: Option<&Path>) -> anyhow::Result<(ModalityRegistry, Vec<MultimodalSample>)> {
    let rp = registry_path(corpus, registry);
    let reg = load_registry(&rp).with_context(|| format!("loading registry {}", rp.display()))?;
    let samples = load_corpus(corpus, Some(&reg))?;
    Ok((reg, samples))
}

fn filter_split(samples: Vec<MultimodalSample>, split: &str) -> anyhow::Result<Vec<MultimodalSample>> {
    let want = match split {
        "all" => return Ok(samples),
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?} (expected train, val, test or all)"),
    };
    Ok(samples.into_iter().filter(|s| s.split == want).collect())
}

fn gen_corpus(ctx: &Ctx, a: &GenCorpusArgs) -> anyhow::Result<()> {
    let out = ctx.out("gen-corpus");
    let mut recipe = GeneratorRecipe::named(&a.recipe)?;
    recipe.continuous_bins = ctx.profile.corpus.continuous_bins;
    let registry = default_registry(recipe.continuous_bins);
    let corpus = generate_synthetic_corpus(&recipe, &registry, a.n, ctx.cli.seed)?;
    save_registry(&out.join("registry.json"), &registry)?;
    save_corpus(&out.join("corpus.jsonl"), &corpus)?;
    save_pathways(&out.join("pathways.json"), &default_pathways())?;
    ctx.manifest().with_corpus(corpus_digest(&corpus)).finish(&out)?;
    println!("wrote {} samples to {}", corpus.len(), out.join("corpus.jsonl").display());
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<()> {
    let out = ctx.out("train");
    let (reg, corpus) = load_data(&a.data.corpus, a.data.registry.as_deref())?;
    let pathways = match &a.pathways {
        Some(p) => load_pathways(p, &reg)?,
        None => default_pathways().into_iter().filter(|p| p.modalities().iter().all(|m| reg.contains(m))).collect(),
    };
    let mut tc = ctx.profile.train_config(ctx.cli.seed);
    tc.stages = select_stages(&ctx.profile.train.stages, &a.stages)?;
    let model = Model::init(ctx.profile.model_config_for(&reg), ctx.cli.seed)?;
    std::fs::create_dir_all(&out)?;
    let metrics_path = out.join("metrics.jsonl");
    let _ = std::fs::remove_file(&metrics_path);
    let mut log = JsonLines::create(&metrics_path)?;
    let mut log_err = None;
    let outcome = train(model, &corpus, &reg, &pathways, &tc, |r| {
        if let Err(e) = log.write(r) {
            log_err.get_or_insert(e);
        }
    })?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let ckpt = Checkpoint::new(&outcome.model, outcome.optimizer, outcome.step, outcome.rng);
    save_checkpoint(&out.join("checkpoint.ckpt"), &ckpt)?;
    let mut rep = Report::new("train");
    rep.push("steps", outcome.step);
    rep.push("skipped_samples", outcome.skipped_samples);
    if let (Some(f), Some(l)) = (outcome.records.first(), outcome.records.last()) {
        rep.push("first_loss", fmt_f(f.loss));
        rep.push("final_loss", fmt_f(l.loss));
    }
    rep.push("parameters", outcome.model.params.count());
    let mut cols = Columns::new(&["step", "stage", "epoch", "loss", "lr", "padding_waste", "dropout"]);
    for r in &outcome.records {
        cols.push(vec![
            r.step.to_string(),
            r.stage.to_string(),
            r.epoch.to_string(),
            fmt_f(r.loss),
            format!("{:e}", r.lr),
            fmt_f(r.padding_waste),
            fmt_f(r.dropout),
        ]);
    }
    write_report(&out.join("train_report.txt"), &rep, Some(&cols))?;
    ctx.manifest().with_corpus(corpus_digest(&corpus)).finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

fn sched_sim(ctx: &Ctx, a: &SchedArgs) -> anyhow::Result<()> {
    let out = ctx.out("sched-sim");
    let stages = &ctx.profile.train.stages;
    ensure!(a.stage >= 1 && a.stage <= stages.len(), "--stage {} outside 1..={}", a.stage, stages.len());
    let budget = stages[a.stage - 1].context_budget;
    let mut manifest = ctx.manifest();
    let lengths: Vec<usize> = match (&a.corpus, a.lognormal) {
        (Some(path), None) => {
            let (reg, corpus) = load_data(path, a.registry.as_deref())?;
            manifest = manifest.with_corpus(corpus_digest(&corpus));
            let mut rng = stream_rng(ctx.cli.seed, 0x51);
            corpus
                .iter()
                .filter_map(|s| enforce_length_policy(s, &reg, budget, &mut rng))
                .map(|s| sample_encoder_length(&s, &reg))
                .collect()
        }
        (None, Some(n)) => lognormal_lengths(n, a.mu, a.sigma, budget, ctx.cli.seed),
        _ => bail!("one of --corpus or --lognormal is required"),
    };
    let cost = CostModel::default();
    let cfg = SimConfig {
        n_workers: a.workers,
        affinity: matches!(a.affinity, OnOff::On),
        strategy: match a.strategy {
            StrategyArg::Naive => Strategy::Naive,
            StrategyArg::Bucketed => Strategy::Bucketed,
            StrategyArg::Packing => Strategy::Packing,
        },
        n_buckets: a.buckets,
        memory_budget: a.memory.unwrap_or(64.0 * cost.cost(budget)),
        cost,
        seed: ctx.cli.seed,
    };
    let r = simulate_schedule(&lengths, budget, &cfg)?;
    let m = &r.metrics;
    let mut rep = Report::new("sched-sim");
    rep.push("samples", lengths.len());
    rep.push("budget", budget);
    rep.push("padding_waste", fmt_f(m.padding_waste));
    rep.push("steps", m.steps);
    rep.push("worker_bucket_switches", m.worker_bucket_switches);
    rep.push("modeled_cost", fmt_f(m.modeled_cost));
    rep.push("memory_warnings", m.memory_warnings);
    rep.push("shared_buckets", m.shared_buckets);
    let mut cols = Columns::new(&["batch", "bucket", "worker", "size", "max_len", "waste"]);
    for (i, b) in r.batches.iter().enumerate() {
        let lens: Vec<usize> = b.members.iter().map(|&j| lengths[j]).collect();
        let waste = splittrack_core::scheduler::padding_waste(&lens).unwrap_or(0.0);
        cols.push(vec![
            i.to_string(),
            b.bucket.to_string(),
            b.worker.to_string(),
            lens.len().to_string(),
            lens.iter().max().unwrap_or(&0).to_string(),
            fmt_f(waste),
        ]);
    }
    let path = a.report.clone().unwrap_or_else(|| out.join("sched_report.txt"));
    write_report(&path, &rep, Some(&cols))?;
    manifest.finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

fn eval_complete(ctx: &Ctx, m: &ModelArgs, mask_width: Option<usize>, condition: &[String], target: &str) -> anyhow::Result<()> {
    let out = ctx.out("eval-complete");
    let (reg, corpus) = load_data(&m.data.corpus, m.data.registry.as_deref())?;
    let samples = filter_split(corpus, &m.split)?;
    let model = ctx.model(&m.ckpt, &reg)?;
    let width = mask_width.unwrap_or(ctx.profile.eval.mask_width);
    let base = CompletionConfig::new(target, width, ctx.layout(&model));
    let cond: Vec<&str> = condition.iter().map(String::as_str).collect();
    for c in &cond {
        reg.get(c)?;
    }
    let with = sequence_completion_eval(&model, &samples, &reg, &base.clone().conditioned_on(&cond))?;
    let mut rep = Report::new("eval complete");
    rep.push("samples", with.records.len());
    rep.push("skipped", with.skipped.len());
    rep.push("mask_width", width);
    rep.push("conditioning", if cond.is_empty() { "none".to_string() } else { cond.join(",") });
    rep.push("accuracy", fmt_f(with.accuracy()));
    rep.push_opt("exon_accuracy", with.exon.and_then(|t| t.accuracy()));
    rep.push_opt("intron_accuracy", with.intron.and_then(|t| t.accuracy()));
    let mut cols = Columns::new(&["id", "top1", "top10", "uplift"]);
    if cond.is_empty() {
        for r in &with.records {
            cols.push(vec![r.id.clone(), fmt_f(r.top1), fmt_f(r.top10), "NA".into()]);
        }
    } else {
        let without = sequence_completion_eval(&model, &samples, &reg, &base)?;
        rep.push("unconditioned_accuracy", fmt_f(without.accuracy()));
        rep.push("uplift", fmt_f(with.accuracy() - without.accuracy()));
        let base_by_id: BTreeMap<&str, f64> = without.records.iter().map(|r| (r.id.as_str(), r.top1)).collect();
        for r in &with.records {
            let up = base_by_id.get(r.id.as_str()).map_or("NA".into(), |b| fmt_f(r.top1 - b));
            cols.push(vec![r.id.clone(), fmt_f(r.top1), fmt_f(r.top10), up]);
        }
    }
    let path = m.report.clone().unwrap_or_else(|| out.join("complete_report.txt"));
    write_report(&path, &rep, Some(&cols))?;
    ctx.manifest().with_corpus(corpus_digest(&samples)).finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

fn eval_splice(ctx: &Ctx, m: &ModelArgs, conditioning: &str, flank: Option<usize>) -> anyhow::Result<()> {
    let out = ctx.out("eval-splice");
    let (reg, corpus) = load_data(&m.data.corpus, m.data.registry.as_deref())?;
    let samples: Vec<_> = filter_split(corpus, &m.split)?.into_iter().filter(|s| s.track(SPLICE).is_some()).collect();
    let model = ctx.model(&m.ckpt, &reg)?;
    let cond = match conditioning {
        "none" => SpliceConditioning::None,
        "tss-tes" | "tss_tes" => SpliceConditioning::TssTes,
        other => bail!("unknown splice conditioning {other:?} (expected none or tss-tes)"),
    };
    let mut cfg = SpliceConfig::new(cond, ctx.layout(&model));
    cfg.flank = flank.unwrap_or(ctx.profile.eval.splice_flank);
    let r = splice_site_eval(&model, &samples, &reg, &cfg)?;
    let mut rep = Report::new("eval splice");
    rep.push("conditioning", conditioning);
    rep.push("positions", r.overall.positions);
    rep.push("skipped", r.skipped.len());
    rep.push_opt("donor_aupr", r.overall.donor);
    rep.push_opt("acceptor_aupr", r.overall.acceptor);
    rep.push_opt("macro_aupr", r.overall.macro_avg);
    rep.push_opt("micro_aupr", r.overall.micro_avg);
    let na = |x: Option<f64>| x.map_or("NA".to_string(), fmt_f);
    let mut cols = Columns::new(&["stratum", "positions", "donor", "acceptor", "macro", "micro"]);
    for (k, v) in std::iter::once(("all".to_string(), r.overall)).chain(r.strata.clone()) {
        cols.push(vec![k, v.positions.to_string(), na(v.donor), na(v.acceptor), na(v.macro_avg), na(v.micro_avg)]);
    }
    for line in &r.skipped {
        eprintln!("skipped {line}");
    }
    let path = m.report.clone().unwrap_or_else(|| out.join("splice_report.txt"));
    write_report(&path, &rep, Some(&cols))?;
    ctx.manifest().with_corpus(corpus_digest(&samples)).finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

/// Expected track value per position, decoded from a continuous head with
/// only `inputs` visible to the encoder.
fn predict_profile(model: &Model, reg: &ModalityRegistry, s: &MultimodalSample, track: &str, layout: &LayoutConfig) -> anyhow::Result<Vec<f64>> {
    let tok = &reg.get(track)?.tokenizer;
    let n = s.track(NT_SEQ).ok_or_else(|| anyhow!("{}: no nucleotide track", s.id))?.len();
    let inputs: BTreeSet<String> = [NT_SEQ.to_string()].into();
    let enc = assemble_encoder_layout(s, reg, &inputs, layout)?;
    let dec = DecoderInput {
        segments: vec![DecoderSegment {
            modality: track.to_string(),
            positions: (0..n).collect(),
            targets: vec![tok.specials.pad; n],
        }],
    };
    let logits = predict_chunked(model, &enc.flatten(), &dec)?;
    (0..n).map(|r| Ok(expected_bin_value(logits[0].row(r), &tok.bin_centers)?)).collect()
}

fn eval_vep(ctx: &Ctx, a: &VepArgs) -> anyhow::Result<()> {
    let out = ctx.out("eval-vep");
    let window = a.window.unwrap_or(ctx.profile.eval.vep_window);
    let mut rep = Report::new("eval vep");
    let mut cols = Columns::new(&["id", "position", "score", "window_start", "window_len"]);
    let mut manifest = ctx.manifest();
    if let (Some(wt), Some(mt)) = (&a.wt, &a.mut_profile) {
        let complete = |p: &Path| -> anyhow::Result<Vec<f64>> {
            read_two_column(p)?
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| anyhow!("{}: profile has missing entries", p.display()))
        };
        let (wt_p, mt_p) = (complete(wt)?, complete(mt)?);
        let pos = a.position.unwrap_or(wt_p.len() / 2);
        let s = phylop_vep(&VariantScoreInput {
            wt_profile: wt_p,
            mut_profile: mt_p,
            variant_position: pos,
            window,
        })?;
        rep.push("score", fmt_f(s.score));
        rep.push("window_len", s.window_len);
        cols.push(vec!["profile".into(), pos.to_string(), fmt_f(s.score), s.window_start.to_string(), s.window_len.to_string()]);
    } else {
        let (Some(ckpt), Some(corpus)) = (&a.ckpt, &a.corpus) else {
            bail!("either --wt/--mut or --ckpt/--corpus is required");
        };
        let (reg, all) = load_data(corpus, a.registry.as_deref())?;
        let samples = filter_split(all, &a.split)?;
        manifest = manifest.with_corpus(corpus_digest(&samples));
        let model = ctx.model(ckpt, &reg)?;
        let layout = ctx.layout(&model);
        let nt = reg.get(NT_SEQ)?.tokenizer.n_values() as u32;
        let mut scores = Vec::new();
        for s in samples.iter().filter(|s| s.track(NT_SEQ).is_some()) {
            let seq = s.track(NT_SEQ).unwrap();
            let pos = a.position.unwrap_or(seq.len() / 2);
            ensure!(pos < seq.len(), "{}: position {pos} outside sequence of length {}", s.id, seq.len());
            let wt = predict_profile(&model, &reg, s, PHYLOP, &layout)?;
            let mut mutant = s.clone();
            let t = mutant.tracks.get_mut(NT_SEQ).unwrap();
            t[pos] = (t[pos] + 1) % nt;
            let mt = predict_profile(&model, &reg, &mutant, PHYLOP, &layout)?;
            let v = phylop_vep(&VariantScoreInput {
                wt_profile: wt,
                mut_profile: mt,
                variant_position: pos,
                window,
            })?;
            scores.push(v.score);
            cols.push(vec![s.id.clone(), pos.to_string(), fmt_f(v.score), v.window_start.to_string(), v.window_len.to_string()]);
        }
        rep.push("variants", scores.len());
        rep.push_opt("mean_score", (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64));
    }
    let path = a.report.clone().unwrap_or_else(|| out.join("vep_report.txt"));
    write_report(&path, &rep, Some(&cols))?;
    manifest.finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

fn eval_shape(ctx: &Ctx, a: &ShapeArgs) -> anyhow::Result<()> {
    let out = ctx.out("eval-shape");
    let mut rep = Report::new("eval shape");
    let mut cols = Columns::new(&["id", "f1_with_reactivity", "f1_sequence_only", "delta_f1", "pearson"]);
    let mut manifest = ctx.manifest();
    let mut any = false;
    if let Some(path) = &a.structures {
        any = true;
        let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("id\t")) {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            ensure!(f.len() == 4, "{}:{}: expected 4 tab-separated columns", path.display(), i + 1);
            let parse = |s: &str| parse_dot_bracket(s).with_context(|| format!("{}:{}", path.display(), i + 1));
            let (reference, with, seq_only) = (parse(f[1])?, parse(f[2])?, parse(f[3])?);
            let a1 = pair_metrics(&with, &reference).f1;
            let a2 = pair_metrics(&seq_only, &reference).f1;
            pairs.push((a1, a2));
            cols.push(vec![f[0].into(), fmt_f(a1), fmt_f(a2), fmt_f(delta_f1(a1, a2)?), "NA".into()]);
        }
        ensure!(!pairs.is_empty(), "{}: no structure records", path.display());
        let n = pairs.len() as f64;
        rep.push("records", pairs.len());
        rep.push("mean_f1_with_reactivity", fmt_f(pairs.iter().map(|p| p.0).sum::<f64>() / n));
        rep.push("mean_f1_sequence_only", fmt_f(pairs.iter().map(|p| p.1).sum::<f64>() / n));
        match wilcoxon_signed_rank_one_sided(&pairs) {
            Ok(w) => {
                rep.push("wilcoxon_w_plus", fmt_f(w.w_plus));
                rep.push("wilcoxon_p_one_sided", format!("{:e}", w.p_one_sided));
                rep.push("wilcoxon_exact", w.exact);
            }
            Err(e) => rep.push("wilcoxon", format!("not computed: {e}")),
        }
    }
    if let (Some(gt), Some(pred)) = (&a.reactivity_gt, &a.reactivity_pred) {
        any = true;
        let g = normalize_reactivity(&read_two_column(gt)?)?;
        let p = normalize_reactivity(&read_two_column(pred)?)?;
        let (x, y): (Vec<f64>, Vec<f64>) = g.iter().zip(&p).filter_map(|(a, b)| a.zip(*b)).unzip();
        rep.push("reactivity_pearson", fmt_f(pearson(&y, &x)?));
        let params = DeiganParams { m: a.deigan_m, b: a.deigan_b };
        let energies: Vec<f64> = g.iter().flatten().map(|&r| deigan_pseudo_energy(r, &params)).collect::<Result<_, _>>()?;
        rep.push("mean_pseudo_energy", fmt_f(energies.iter().sum::<f64>() / energies.len() as f64));
    }
    if let (Some(ckpt), Some(corpus)) = (&a.ckpt, &a.corpus) {
        any = true;
        let (reg, all) = load_data(corpus, a.registry.as_deref())?;
        let samples: Vec<_> = filter_split(all, &a.split)?.into_iter().filter(|s| s.track(RASP).is_some()).collect();
        manifest = manifest.with_corpus(corpus_digest(&samples));
        let model = ctx.model(ckpt, &reg)?;
        let layout = ctx.layout(&model);
        let tok = &reg.get(RASP)?.tokenizer;
        let mut rs = Vec::new();
        for s in &samples {
            let pred = predict_profile(&model, &reg, s, RASP, &layout)?;
            let truth: Vec<Option<f64>> = s.track(RASP).unwrap().iter().map(|&id| tok.center(id)).collect();
            let (x, y): (Vec<f64>, Vec<f64>) = pred.iter().zip(&truth).filter_map(|(p, t)| t.map(|t| (*p, t))).unzip();
            let r = pearson(&x, &y).ok();
            if let Some(r) = r {
                rs.push(r);
            }
            cols.push(vec![s.id.clone(), "NA".into(), "NA".into(), "NA".into(), r.map_or("NA".into(), fmt_f)]);
        }
        rep.push("reactivity_records", rs.len());
        rep.push_opt("mean_reactivity_pearson", (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64));
    }
    ensure!(any, "nothing to evaluate: pass --structures, --reactivity-gt/--reactivity-pred, or --ckpt/--corpus");
    let path = a.report.clone().unwrap_or_else(|| out.join("shape_report.txt"));
    write_report(&path, &rep, Some(&cols))?;
    manifest.finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

fn pick_sample<'a>(samples: &'a [MultimodalSample], id: Option<&str>, ok: impl Fn(&MultimodalSample) -> bool) -> anyhow::Result<&'a MultimodalSample> {
    match id {
        Some(id) => samples.iter().find(|s| s.id == id).ok_or_else(|| anyhow!("no sample with id {id:?}")),
        None => samples.iter().find(|s| ok(s)).ok_or_else(|| anyhow!("no suitable sample in the file")),
    }
}

fn decode(reg: &ModalityRegistry, modality: &str, ids: &[u32]) -> anyhow::Result<String> {
    let tok = &reg.get(modality)?.tokenizer;
    Ok(ids.iter().map(|&i| tok.vocab.get(i as usize).map_or("?", String::as_str)).collect())
}

#[allow(clippy::too_many_arguments)]
fn design_rna(
    ctx: &Ctx,
    ckpt: &Path,
    seq: &Path,
    registry: Option<&Path>,
    sample_id: Option<&str>,
    mutation: usize,
    width: usize,
    conditioning: &str,
) -> anyhow::Result<()> {
    let out = ctx.out("design-rna");
    ensure!(DESIGN_WIDTHS.contains(&width), "--width must be one of {DESIGN_WIDTHS:?}");
    let cond: BTreeSet<String> = match conditioning {
        "splice" => [SPLICE.to_string()].into(),
        "splice+phylop" => [SPLICE.to_string(), PHYLOP.to_string()].into(),
        other => bail!("unknown RNA conditioning {other:?} (expected splice or splice+phylop)"),
    };
    let (reg, samples) = load_data(seq, registry)?;
    let sample = pick_sample(&samples, sample_id, |s| cond.iter().all(|m| s.track(m).is_some()))?;
    let model = ctx.model(ckpt, &reg)?;
    let layout = ctx.layout(&model);
    let original = sample.track(NT_SEQ).ok_or_else(|| anyhow!("{}: no nucleotide track", sample.id))?;
    ensure!(mutation < original.len(), "--mutation {mutation} outside sequence of length {}", original.len());
    let windows = enumerate_windows(&CenterSpec::standard(), original.len(), mutation, width);
    let mut rng = stream_rng(ctx.cli.seed, 0x2A);
    let mut cols = Columns::new(&["center", "start", "end", "changed", "window"]);
    for w in &windows {
        let designed = design_rna_window(&model, sample, &reg, w, &cond, &layout, 0.0, &mut rng)?;
        let r = w.interval();
        let changed = r.clone().filter(|&i| designed[i] != original[i]).count();
        cols.push(vec![
            w.center.to_string(),
            r.start.to_string(),
            r.end.to_string(),
            changed.to_string(),
            decode(&reg, NT_SEQ, &designed[r])?,
        ]);
    }
    let mut rep = Report::new("design rna");
    rep.push("sample", &sample.id);
    rep.push("mutation", mutation);
    rep.push("width", width);
    rep.push("conditioning", conditioning);
    rep.push("windows", windows.len());
    write_report(&out.join("designs.txt"), &rep, Some(&cols))?;
    ctx.manifest().with_corpus(corpus_digest(std::slice::from_ref(sample))).finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

fn design_protein(
    ctx: &Ctx,
    ckpt: &Path,
    corpus: &Path,
    registry: Option<&Path>,
    sample_id: Option<&str>,
    conditioning: &str,
    n_draws: usize,
) -> anyhow::Result<()> {
    let out = ctx.out("design-protein");
    let strategy = ConditioningStrategy::parse(conditioning)?;
    let (reg, samples) = load_data(corpus, registry)?;
    let probe = |s: &MultimodalSample| {
        let mut r = stream_rng(0, 0);
        s.entity == Entity::Protein && presence_signature(s).contains(AA_SEQ) && conditioning_from_sample(s, strategy, &mut r).is_ok()
    };
    let sample = pick_sample(&samples, sample_id, probe)?;
    let model = ctx.model(ckpt, &reg)?;
    let layout = ctx.layout(&model);
    let traces_dir = out.join("traces");
    std::fs::create_dir_all(&traces_dir)?;
    let mut traces = Vec::new();
    for k in 0..n_draws {
        let mut rng = stream_rng(ctx.cli.seed, 0x9000 + k as u64);
        let hp = sample_design_hyperparams(&mut rng);
        let cond = conditioning_from_sample(sample, strategy, &mut rng)?;
        let trace = iterative_protein_design(&model, &reg, &cond, &hp, &layout, ctx.cli.seed.wrapping_add(k as u64))?;
        let record = serde_json::json!({ "draw": k, "hyperparams": hp, "trace": trace });
        std::fs::write(traces_dir.join(format!("draw_{k:03}.json")), serde_json::to_string_pretty(&record)? + "\n")?;
        traces.push(trace);
    }
    let mut cols = Columns::new(&["rank", "draw", "verification_loss", "cycles", "exit", "sequence"]);
    for (rank, &k) in rank_designs(&traces).iter().enumerate() {
        let t = &traces[k];
        cols.push(vec![
            (rank + 1).to_string(),
            k.to_string(),
            fmt_f(t.verification_loss),
            t.cycles.len().to_string(),
            serde_json::to_value(t.exit)?.as_str().unwrap_or("?").to_string(),
            decode(&reg, AA_SEQ, t.final_sequence())?,
        ]);
    }
    let mut rep = Report::new("design protein");
    rep.push("sample", &sample.id);
    rep.push("conditioning", strategy.as_str());
    rep.push("draws", n_draws);
    rep.push(
        "all_satisfied",
        traces.iter().filter(|t| t.exit == splittrack_core::design::ExitReason::AllSatisfied).count(),
    );
    write_report(&out.join("ranking.txt"), &rep, Some(&cols))?;
    ctx.manifest().with_corpus(corpus_digest(std::slice::from_ref(sample))).finish(&out)?;
    print!("{}", rep.render());
    Ok(())
}

fn inspect(ctx: &Ctx, a: &InspectArgs) -> anyhow::Result<()> {
    ensure!(a.ckpt.is_some() || a.corpus.is_some(), "one of --ckpt or --corpus is required");
    if let Some(path) = &a.ckpt {
        let ckpt = load_checkpoint(path, None)?;
        println!("config {}", serde_json::to_string(&ckpt.config)?);
        println!("step {}", ckpt.step);
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for (name, t) in ckpt.params.names.iter().zip(&ckpt.params.tensors) {
            let key = name.split('.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(key).or_default() += t.len();
        }
        for (k, v) in &groups {
            println!("params {k} {v}");
        }
        println!("params total {}", ckpt.params.count());
    }
    if let Some(path) = &a.corpus {
        let (reg, samples) = load_data(path, a.registry.as_deref())?;
        println!("samples {}", samples.len());
        let count = |label: &str, key: String, map: &mut BTreeMap<String, usize>| {
            *map.entry(format!("{label} {key}")).or_default() += 1;
        };
        let mut tallies = BTreeMap::new();
        for s in &samples {
            count("entity", serde_json::to_value(s.entity)?.as_str().unwrap_or("?").into(), &mut tallies);
            count("split", serde_json::to_value(s.split)?.as_str().unwrap_or("?").into(), &mut tallies);
            for m in s.tracks.keys() {
                count("track", m.clone(), &mut tallies);
            }
        }
        for (k, v) in &tallies {
            println!("{k} {v}");
        }
        if let Some(id) = &a.dump_layout {
            let s = samples.iter().find(|s| &s.id == id).ok_or_else(|| anyhow!("no sample with id {id:?}"))?;
            let inputs: BTreeSet<String> = s.tracks.keys().cloned().collect();
            let cfg = LayoutConfig {
                encoder_budget: ctx.profile.model.encoder_budget.max(s.tracks.values().map(Vec::len).sum::<usize>() + ctx.profile.model.register_count),
                register_count: ctx.profile.model.register_count,
            };
            let layout = assemble_encoder_layout(s, &reg, &inputs, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&layout)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{PATHWAY_FORMAT_VERSION, REGISTRY_FORMAT_VERSION, TOKENIZER_FORMAT_VERSION};
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn version_string_matches_constants() {
        let want = format!(
            "checkpoint format {}, tokenizer format {}, registry format {}, pathway format {}",
            splittrack_core::model::CHECKPOINT_FORMAT_VERSION,
            TOKENIZER_FORMAT_VERSION,
            REGISTRY_FORMAT_VERSION,
            PATHWAY_FORMAT_VERSION
        );
        assert!(VERSION.contains(&want));
    }
}
