use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use trajgpt::checkpoint;
use trajgpt::infer::{infill, InfillDiagnostics};
use trajgpt::ingest::{
    discretize, normalize_times, parse_csv, read_plt_dir, split, split_by_agent, stays_from_traces, AgentStays,
    RegionVocabulary, SplitMode, StayPoint, VocabFile,
};
use trajgpt::io::{read_partials, read_sequences, write_partials, write_sequences, PartialSequence};
use trajgpt::metrics::{evaluate, MetricsReport, Scope};
use trajgpt::model::{TrajGpt, Variant};
use trajgpt::synth::generate;
use trajgpt::train::{instances, log_to_csv, train, Task, TrainConfig};
use trajgpt::types::{Token, VisitSequence};

use crate::config::{DecodeMode, InputFormat, RunConfig};
use crate::manifest::Manifest;
use crate::{Cli, Command, DecodeArg, FormatArg, TaskArg, VariantArg};

struct Ctx {
    config: RunConfig,
    seed: u64,
    deterministic: bool,
    out_dir: std::path::PathBuf,
}

impl Ctx {
    fn manifest(&self, command: &str) -> Result<Manifest> {
        Manifest::new(command, self.seed, self.deterministic, &self.config)
    }

    fn write(&self, manifest: &mut Manifest, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.out_dir.join(name), bytes).with_context(|| format!("writing {name}"))?;
        manifest.outputs.push(name.to_string());
        Ok(())
    }
}

fn task(arg: Option<TaskArg>, default: Task) -> Task {
    match arg {
        Some(TaskArg::Next) => Task::Next,
        Some(TaskArg::Infill) => Task::Infill,
        None => default,
    }
}

fn variant(arg: VariantArg) -> Variant {
    match arg {
        VariantArg::Full => Variant::Full,
        VariantArg::Independence => Variant::Independence,
        VariantArg::Regression => Variant::Regression,
    }
}

fn json_pretty(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn read_vocab(path: &Path) -> Result<RegionVocabulary> {
    let file: VocabFile = serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?;
    Ok(RegionVocabulary::from_file(&file)?)
}

/// Seed for data that must stay fixed across epochs and runs (validation
/// and evaluation masks).
fn eval_mask_seed(seed: u64) -> u64 {
    seed ^ 0x5E_ED0F_E7A1
}

fn scope(task: Task) -> Scope {
    match task {
        Task::Next => Scope::AllVisits,
        Task::Infill => Scope::Answers,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut config = RunConfig::load(g.config.as_deref())?;
    let seed = match (g.seed, config.seed, g.deterministic) {
        (Some(s), _, _) | (None, Some(s), _) => s,
        (None, None, true) => 0,
        (None, None, false) => std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH)?.as_nanos() as u64,
    };
    config.seed = Some(seed);
    config.train.seed = seed;
    config.synth.seed = seed;
    let threads = g.threads.or(g.deterministic.then_some(1));
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    let mut ctx = Ctx { config, seed, deterministic: g.deterministic, out_dir: g.out_dir };

    match cli.command {
        Command::Preprocess { input, format, task: t } => {
            if let Some(f) = format {
                ctx.config.preprocess.format = match f {
                    FormatArg::Plt => InputFormat::Plt,
                    FormatArg::Csv => InputFormat::Csv,
                    FormatArg::Jsonl => InputFormat::Jsonl,
                };
            }
            ctx.config.preprocess.task = task(t, ctx.config.preprocess.task);
            ctx.config.validate()?;
            preprocess(&ctx, &input)
        }
        Command::Synth { agents, days } => {
            ctx.config.synth.n_agents = agents.unwrap_or(ctx.config.synth.n_agents);
            ctx.config.synth.n_days = days.unwrap_or(ctx.config.synth.n_days);
            ctx.config.validate()?;
            let mut m = ctx.manifest("synth")?;
            let seqs = generate(&ctx.config.synth)?;
            write_sequences(&ctx.out_dir.join("synth.jsonl"), &seqs)?;
            m.outputs.push("synth.jsonl".into());
            ctx.write(&mut m, "vocab.json", json_pretty(&ctx.config.synth.vocabulary()?.to_file())?)?;
            m.write(&ctx.out_dir)
        }
        Command::Train { train: train_path, valid, vocab, variant: v, task: t, epochs } => {
            ctx.config.train.task = task(t, ctx.config.train.task);
            ctx.config.train.max_epochs = epochs.unwrap_or(ctx.config.train.max_epochs);
            ctx.config.validate()?;
            let mut m = ctx.manifest("train")?;
            let vocabulary = read_vocab(&vocab)?;
            let train_seqs = read_sequences(&train_path).with_context(|| format!("reading {}", train_path.display()))?;
            let valid_seqs = match &valid {
                Some(p) => read_sequences(p).with_context(|| format!("reading {}", p.display()))?,
                None => Vec::new(),
            };
            for p in [Some(&train_path), valid.as_ref(), Some(&vocab)].into_iter().flatten() {
                m.input(p)?;
            }
            let model = TrajGpt::new(ctx.config.model.clone(), variant(v), vocabulary, ctx.seed)?;
            let outcome = train(model, &ctx.config.train, &train_seqs, &valid_seqs, |r| {
                eprintln!("epoch {} train {:.5} valid {:.5}", r.epoch, r.train_loss, r.valid_loss)
            })?;
            checkpoint::save(&outcome.model, &ctx.out_dir.join("checkpoint.bin"))?;
            m.outputs.push("checkpoint.bin".into());
            ctx.write(&mut m, "epoch_log.csv", log_to_csv(&outcome.log))?;
            m.write(&ctx.out_dir)
        }
        Command::Eval { checkpoint: ckpt, data, task: t } => {
            ctx.config.train.task = task(t, ctx.config.train.task);
            ctx.config.validate()?;
            let mut m = ctx.manifest("eval")?;
            m.input(&ckpt)?;
            m.input(&data)?;
            let model = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let seqs = read_sequences(&data).with_context(|| format!("reading {}", data.display()))?;
            let report = eval_report(&model, &seqs, &ctx.config.train, ctx.seed)?;
            ctx.write(&mut m, "metrics.csv", report.to_csv())?;
            ctx.write(&mut m, "metrics.json", json_pretty(&report)?)?;
            m.write(&ctx.out_dir)
        }
        Command::Generate { checkpoint: ckpt, input, decode, max_per_blank } => {
            if let Some(d) = decode {
                ctx.config.generate.decode = match d {
                    DecodeArg::Greedy => DecodeMode::Greedy,
                    DecodeArg::Sample => DecodeMode::Sample,
                };
            }
            ctx.config.generate.max_per_blank = max_per_blank.unwrap_or(ctx.config.generate.max_per_blank);
            ctx.config.validate()?;
            let mut m = ctx.manifest("generate")?;
            m.input(&ckpt)?;
            m.input(&input)?;
            let model = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let partials = read_partials(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut completed = Vec::with_capacity(partials.len());
            let mut diagnostics: Vec<InfillDiagnostics> = Vec::with_capacity(partials.len());
            for (i, p) in partials.iter().enumerate() {
                let decode = ctx.config.generate.decode(ctx.seed.wrapping_add(i as u64));
                let out = infill(&model, &p.agent, &p.tokens()?, decode, ctx.config.generate.max_per_blank)
                    .with_context(|| format!("sequence {} ({})", i + 1, p.agent))?;
                completed.push(out.sequence);
                diagnostics.push(out.diagnostics);
            }
            write_sequences(&ctx.out_dir.join("generated.jsonl"), &completed)?;
            m.outputs.push("generated.jsonl".into());
            ctx.write(&mut m, "diagnostics.json", json_pretty(&diagnostics)?)?;
            m.write(&ctx.out_dir)
        }
        Command::Ablate { train: train_path, valid, test, vocab, task: t, epochs } => {
            ctx.config.train.task = task(t, ctx.config.train.task);
            ctx.config.train.max_epochs = epochs.unwrap_or(ctx.config.train.max_epochs);
            ctx.config.validate()?;
            let mut m = ctx.manifest("ablate")?;
            let vocabulary = read_vocab(&vocab)?;
            let train_seqs = read_sequences(&train_path).with_context(|| format!("reading {}", train_path.display()))?;
            let valid_seqs = match &valid {
                Some(p) => read_sequences(p).with_context(|| format!("reading {}", p.display()))?,
                None => Vec::new(),
            };
            let test_seqs = read_sequences(&test).with_context(|| format!("reading {}", test.display()))?;
            for p in [Some(&train_path), valid.as_ref(), Some(&test), Some(&vocab)].into_iter().flatten() {
                m.input(p)?;
            }
            let mut rows = Vec::new();
            for v in Variant::ALL {
                let model = TrajGpt::new(ctx.config.model.clone(), v, vocabulary.clone(), ctx.seed)?;
                let outcome = train(model, &ctx.config.train, &train_seqs, &valid_seqs, |r| {
                    eprintln!("{} epoch {} train {:.5} valid {:.5}", v.name(), r.epoch, r.train_loss, r.valid_loss)
                })?;
                ctx.write(&mut m, &format!("epoch_log_{}.csv", v.name()), log_to_csv(&outcome.log))?;
                rows.push(AblationRow { variant: v, metrics: eval_report(&outcome.model, &test_seqs, &ctx.config.train, ctx.seed)? });
            }
            ctx.write(&mut m, "ablation.csv", ablation_csv(&rows))?;
            ctx.write(&mut m, "ablation.json", json_pretty(&rows)?)?;
            m.write(&ctx.out_dir)
        }
    }
}

fn eval_report(model: &TrajGpt, seqs: &[VisitSequence], train: &TrainConfig, seed: u64) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_mask_seed(seed));
    let data: Vec<Vec<Token>> = instances(seqs, train.task, train.mask_prob, &mut rng)?;
    Ok(evaluate(model, &data, scope(train.task))?)
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: Variant,
    #[serde(flatten)]
    metrics: MetricsReport,
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,{},region_count,arrival_count,departure_count\n", MetricsReport::COLUMNS.join(","));
    for r in rows {
        let values: Vec<String> = r.metrics.rows().iter().map(|(_, v, _)| v.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant.name(),
            values.join(","),
            r.metrics.region_count,
            r.metrics.arrival_count,
            r.metrics.departure_count
        ));
    }
    out
}

fn visits_to_stays(seqs: Vec<VisitSequence>) -> Vec<AgentStays> {
    seqs.into_iter()
        .map(|s| AgentStays {
            agent: s.agent,
            stays: s.visits.iter().map(|v| StayPoint { location: v.location, arrival: v.arrival, departure: v.departure }).collect(),
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct PreprocessSummary {
    agents: usize,
    visits: usize,
    repaired_overlaps: usize,
    regions: usize,
    time_origin: i64,
    train: usize,
    valid: usize,
    test: usize,
}

fn preprocess(ctx: &Ctx, input: &Path) -> Result<()> {
    let cfg = &ctx.config.preprocess;
    let mut m = ctx.manifest("preprocess")?;
    m.input(input)?;
    let origin = cfg.origin.map(|[lat, lon]| (lat, lon));
    let (agents, repaired) = match cfg.format {
        InputFormat::Plt => stays_from_traces(&read_plt_dir(input)?, origin, cfg.radius_m, cfg.min_duration_s)?,
        InputFormat::Csv => {
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            stays_from_traces(&parse_csv(&text)?, origin, cfg.radius_m, cfg.min_duration_s)?
        }
        InputFormat::Jsonl => (visits_to_stays(read_sequences(input).with_context(|| format!("reading {}", input.display()))?), 0),
    };
    if agents.is_empty() {
        bail!(trajgpt::Error::Argument("no stay points found in the input".into()));
    }
    let mut agents = agents;
    agents.sort_by(|a, b| a.agent.cmp(&b.agent));
    let (vocab, seqs) = match cfg.task {
        Task::Next => discretize(cfg.cell_size, &agents, None)?,
        Task::Infill => {
            // the vocabulary comes from training agents only
            let (_, all) = discretize(cfg.cell_size, &agents, None)?;
            let by_agent = split_by_agent(&all, &ctx.config.split.ratios, ctx.seed)?;
            let train_agents: HashSet<String> = by_agent.train.iter().map(|s| s.agent.clone()).collect();
            discretize(cfg.cell_size, &agents, Some(&train_agents))?
        }
    };
    let (seqs, scaling) = normalize_times(&seqs);
    let mut spec = ctx.config.split.clone();
    spec.mode = match cfg.task {
        Task::Next => SplitMode::Chronological,
        Task::Infill => SplitMode::ByAgent,
    };
    let splits = split(&seqs, &spec, ctx.seed)?;
    for (name, part) in [("train.jsonl", &splits.train), ("valid.jsonl", &splits.valid), ("test.jsonl", &splits.test)] {
        write_sequences(&ctx.out_dir.join(name), part)?;
        m.outputs.push(name.into());
    }
    let mut out_m = m;
    ctx.write(&mut out_m, "vocab.json", json_pretty(&vocab.to_file())?)?;
    let summary = PreprocessSummary {
        agents: seqs.len(),
        visits: seqs.iter().map(|s| s.visits.len()).sum(),
        repaired_overlaps: repaired,
        regions: vocab.n_regions(),
        time_origin: scaling.origin,
        train: splits.train.len(),
        valid: splits.valid.len(),
        test: splits.test.len(),
    };
    ctx.write(&mut out_m, "preprocess.json", json_pretty(&summary)?)?;
    // partial sequences for `generate`: the test split with its evaluation mask
    if cfg.task == Task::Infill {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_mask_seed(ctx.seed));
        let partials = splits
            .test
            .iter()
            .filter(|s| s.visits.len() >= 3)
            .map(|s| {
                let r = trajgpt::reframe::reframe(s, spec.mask_prob, &mut rng)?;
                PartialSequence::from_tokens(s.agent.clone(), r.partial())
            })
            .collect::<trajgpt::Result<Vec<_>>>()?;
        write_partials(&ctx.out_dir.join("test_partial.jsonl"), &partials)?;
        out_m.outputs.push("test_partial.jsonl".into());
    }
    out_m.write(&ctx.out_dir)
}
