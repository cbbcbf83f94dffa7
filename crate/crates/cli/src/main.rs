mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use grath_core::datagen::{audit_pairs, DatagenError, TruthPair};
use grath_core::eval::{domain_gap_sweep, evaluate, EvalError, EvalInputs, ReportMeta, SweepConfig};
use grath_core::jsonl;
use grath_core::lm::{load_checkpoint, save_checkpoint, LmError, ModelHandle};
use grath_core::numerics::NumericsError;
use grath_core::pipeline::{
    budget_sweep, generate_initial_pairs, pretrain, reference_ablation, run_grath, step_sweep, PipelineError,
    ReferencePolicy, Setting,
};
use grath_core::train::TrainError;
use grath_core::world::{make_pretrain_corpus, McQuestion};

use config::{RunConfig, RESOLVED_CONFIG};
use report::{emit_report, to_csv, ReportFormat};

#[derive(Parser, Debug)]
#[command(name = "grath", version, about = "Gradual self-truthifying on a synthetic QA world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed everywhere.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArg {
    /// Pretrained checkpoint; pretrain from the config when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReferenceArg {
    CurrentBase,
    FixedPretrained,
}

impl From<ReferenceArg> for ReferencePolicy {
    fn from(r: ReferenceArg) -> Self {
        match r {
            ReferenceArg::CurrentBase => ReferencePolicy::CurrentBase,
            ReferenceArg::FixedPretrained => ReferencePolicy::FixedPretrained,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// World construction.
    #[command(subcommand)]
    World(WorldCommand),
    /// Pretrain the toy model on the world corpus.
    Pretrain(Common),
    /// Generate iteration-0 pairs from a pretrained model.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Self-truthify and run the refine/update iterations.
    Truthify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// Refine/update iterations T; the run has T+1 DPO phases.
        #[arg(long)]
        iterations: Option<usize>,
        /// Reference model of each DPO phase.
        #[arg(long, value_enum)]
        reference: Option<ReferenceArg>,
    },
    /// Score a checkpoint; prints the report as JSON.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to score.
        #[arg(long)]
        model: PathBuf,
        /// Multiple-choice items as JSONL; the world's in-domain test set
        /// when omitted.
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Also measure held-out perplexity.
        #[arg(long)]
        heldout: bool,
    },
    /// Experiment sweeps; each prints its table as CSV.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Ablations; each prints its table as CSV.
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Label pairs against the world's ground truth; prints JSON.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pairs as JSONL.
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Render a finished run directory.
    Report {
        /// Run directory holding `ledger.json`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormat,
    },
}

#[derive(Subcommand, Debug)]
enum WorldCommand {
    /// Write the world, its pools, the benchmark and the corpus.
    Gen(Common),
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArg,
    /// Run independent settings on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand, Debug)]
enum SweepCommand {
    /// MC1 against answer perturbation strength.
    DomainGap {
        #[command(flatten)]
        args: SweepArgs,
        /// Pairs to perturb; generated from the model when omitted.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// MC1 against DPO steps.
    Steps(SweepArgs),
    /// MC1 per phase for several pair budgets.
    Budget(SweepArgs),
}

#[derive(Subcommand, Debug)]
enum AblateCommand {
    /// Current-base against fixed-pretrained reference.
    Reference(SweepArgs),
}

/// Loaded config plus the resolved output directory.
struct Run {
    config: RunConfig,
    out: PathBuf,
}

impl Run {
    fn open(common: &Common, command: &str) -> Result<Self> {
        let mut config = RunConfig::load(common.config.as_deref())?;
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let out = config.output_dir(common.out.as_deref(), command);
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join(RESOLVED_CONFIG), config.to_toml())
            .with_context(|| format!("writing config to {}", out.display()))?;
        Ok(Self { config, out })
    }

    fn setting(&self) -> Result<Setting> {
        Ok(Setting::build(&self.config.world_config())?)
    }

    /// Load the given checkpoint or pretrain one into the output directory.
    fn pretrained(&self, setting: &Setting, model: &ModelArg) -> Result<ModelHandle> {
        match &model.model {
            Some(p) => load_model(p, setting),
            None => self.pretrain(setting),
        }
    }

    fn pretrain(&self, setting: &Setting) -> Result<ModelHandle> {
        let c = &self.config;
        let mc = c.model_config(setting.world.vocab().len());
        eprintln!("pretraining {} steps", c.pretrain.steps);
        let out = pretrain(&setting.world, &mc, &c.world.corpus, &c.pretrain_config())?;
        let mut provenance = BTreeMap::new();
        provenance.insert("seed".to_string(), c.seed.to_string());
        provenance.insert("pretrain_steps".to_string(), c.pretrain.steps.to_string());
        save_checkpoint(&out.model, &self.out.join("pretrained.grth"), provenance)?;
        let rows: Vec<(usize, f64)> = out.losses.iter().copied().enumerate().collect();
        let mut w = csv::Writer::from_path(self.out.join("pretrain_loss.csv"))?;
        w.write_record(["step", "loss"])?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let report = evaluate(&out.model, &setting.eval_inputs("pretrained", c.seed))?;
        write_json(&self.out.join("pretrained_report.json"), &report)?;
        eprintln!(
            "pretrained: MC1 {:.3}, held-out perplexity {:.3}",
            report.mc1, out.heldout_perplexity
        );
        Ok(out.model)
    }
}

fn load_model(path: &Path, setting: &Setting) -> Result<ModelHandle> {
    let (m, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let v = setting.world.vocab().len();
    if m.config.vocab_size != v {
        bail!(
            "checkpoint vocabulary has {} tokens, the world has {}",
            m.config.vocab_size,
            v
        );
    }
    Ok(m)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    jsonl::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<String> {
    let text = to_csv(rows)?;
    jsonl::write_atomic(path, text.as_bytes())?;
    Ok(text)
}

fn load_only(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut c = RunConfig::load(config)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::World(WorldCommand::Gen(common)) => {
            let run = Run::open(&common, "world")?;
            let s = run.setting()?;
            write_json(&run.out.join("world.json"), &s.world)?;
            for split in s.pools.splits() {
                jsonl::write(&run.out.join(format!("{}.jsonl", split.name.as_str())), &split.records)?;
            }
            jsonl::write(&run.out.join("benchmark.jsonl"), &s.benchmark)?;
            let corpus = make_pretrain_corpus(&s.world, &run.config.world.corpus)?;
            jsonl::write(&run.out.join("corpus.jsonl"), &corpus.docs)?;
            eprintln!(
                "world: {} facts, {} tokens; pools and benchmark in {}",
                s.world.num_facts(),
                s.world.vocab().len(),
                run.out.display()
            );
        }
        Command::Pretrain(common) => {
            let run = Run::open(&common, "pretrain")?;
            let s = run.setting()?;
            run.pretrain(&s)?;
        }
        Command::Datagen { common, model } => {
            let run = Run::open(&common, "datagen")?;
            let s = run.setting()?;
            let pre = run.pretrained(&s, &model)?;
            let (generated, template) = generate_initial_pairs(&pre, &s, &run.config.pipeline_config())?;
            jsonl::write(&run.out.join("pairs.jsonl"), &generated.pairs)?;
            jsonl::write(&run.out.join("rejections.jsonl"), &generated.rejections)?;
            write_json(&run.out.join("template.json"), &template)?;
            write_json(&run.out.join("audit.json"), &audit_pairs(&generated.pairs, &s.world)?)?;
            eprintln!("{} pairs kept, {} rejected", generated.pairs.len(), generated.rejections.len());
        }
        Command::Truthify {
            common,
            model,
            iterations,
            reference,
        } => {
            let mut run = Run::open(&common, "truthify")?;
            if let Some(t) = iterations {
                run.config.pipeline.iterations = t;
            }
            if let Some(r) = reference {
                run.config.pipeline.reference_policy = r.into();
            }
            std::fs::write(run.out.join(RESOLVED_CONFIG), run.config.to_toml())?;
            let s = run.setting()?;
            let pre = run.pretrained(&s, &model)?;
            let out = run_grath(&pre, &s, &run.config.pipeline_config(), &run.out)?;
            for p in &out.phases {
                eprintln!(
                    "phase {}: {} pairs, MC1 {:.3}, loss {:.4}",
                    p.report.phase, p.report.pairs, p.report.eval.mc1, p.report.final_loss
                );
            }
        }
        Command::Eval {
            config,
            seed,
            model,
            benchmark,
            heldout,
        } => {
            let c = load_only(config.as_deref(), seed)?;
            let s = Setting::build(&c.world_config())?;
            let m = load_model(&model, &s)?;
            let bench: Vec<McQuestion> = match &benchmark {
                Some(p) => jsonl::read(p)?,
                None => s.benchmark.clone(),
            };
            let inputs = EvalInputs {
                vocab: s.world.vocab(),
                benchmark: &bench,
                heldout: heldout.then_some(s.heldout.as_slice()),
                meta: ReportMeta {
                    model_id: model.display().to_string(),
                    benchmark_id: benchmark.map_or_else(|| "in-domain-test".to_string(), |p| p.display().to_string()),
                    seed: c.seed,
                },
            };
            println!("{}", serde_json::to_string_pretty(&evaluate(&m, &inputs)?)?);
        }
        Command::Sweep(SweepCommand::DomainGap { args, pairs }) => {
            let run = Run::open(&args.common, "sweep-domain-gap")?;
            let s = run.setting()?;
            let pre = run.pretrained(&s, &args.model)?;
            let cfg = run.config.pipeline_config();
            let pairs: Vec<TruthPair> = match pairs {
                Some(p) => jsonl::read(&p)?,
                None => generate_initial_pairs(&pre, &s, &cfg)?.0.pairs,
            };
            let sweep = SweepConfig {
                dpo: cfg.dpo.clone(),
                adapter: cfg.adapter.clone(),
                adapter_seed: cfg.seeds.adapter,
                perturbation_seed: run.config.seed,
                include_sft: run.config.eval.include_sft,
                parallel: args.parallel,
            };
            let inputs = s.eval_inputs("domain-gap", run.config.seed);
            let rows = domain_gap_sweep(&pre, &s.world, &pairs, &run.config.eval.strengths, &sweep, &inputs)?;
            print!("{}", write_csv(&run.out.join("domain_gap.csv"), &rows)?);
        }
        Command::Sweep(SweepCommand::Steps(args)) => {
            let run = Run::open(&args.common, "sweep-steps")?;
            let s = run.setting()?;
            let pre = run.pretrained(&s, &args.model)?;
            let rows = step_sweep(&pre, &s, &run.config.pipeline_config(), &run.config.eval.steps, args.parallel)?;
            print!("{}", write_csv(&run.out.join("steps.csv"), &rows)?);
        }
        Command::Sweep(SweepCommand::Budget(args)) => {
            let run = Run::open(&args.common, "sweep-budget")?;
            let s = run.setting()?;
            let pre = run.pretrained(&s, &args.model)?;
            let cfg = grath_core::pipeline::PipelineConfig {
                iterations: run.config.eval.budget_iterations,
                ..run.config.pipeline_config()
            };
            let rows = budget_sweep(&pre, &s, &cfg, &run.config.eval.budgets, &run.out, args.parallel)?;
            print!("{}", write_csv(&run.out.join("budget.csv"), &rows)?);
        }
        Command::Ablate(AblateCommand::Reference(args)) => {
            let run = Run::open(&args.common, "ablate-reference")?;
            let s = run.setting()?;
            let pre = run.pretrained(&s, &args.model)?;
            let cfg = grath_core::pipeline::PipelineConfig {
                iterations: run.config.eval.ablation_iterations,
                ..run.config.pipeline_config()
            };
            let rows = reference_ablation(&pre, &s, &cfg, &run.out, args.parallel)?;
            print!("{}", write_csv(&run.out.join("reference.csv"), &rows)?);
        }
        Command::Audit { config, seed, pairs } => {
            let c = load_only(config.as_deref(), seed)?;
            let s = Setting::build(&c.world_config())?;
            let p: Vec<TruthPair> = jsonl::read(&pairs)?;
            println!("{}", serde_json::to_string_pretty(&audit_pairs(&p, &s.world)?)?);
        }
        Command::Report { run, format } => {
            print!("{}", emit_report(&run, format)?);
        }
    }
    Ok(())
}

fn numerical_numerics(e: &NumericsError) -> bool {
    matches!(e, NumericsError::NonFinite { .. })
}

fn numerical_lm(e: &LmError) -> bool {
    matches!(e, LmError::Numerics(n) if numerical_numerics(n))
}

fn numerical_train(e: &TrainError) -> bool {
    match e {
        TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => true,
        TrainError::Lm(l) => numerical_lm(l),
        TrainError::Numerics(n) => numerical_numerics(n),
        _ => false,
    }
}

fn numerical_eval(e: &EvalError) -> bool {
    match e {
        EvalError::Lm(l) => numerical_lm(l),
        EvalError::Train(t) => numerical_train(t),
        EvalError::Datagen(DatagenError::Lm(l)) => numerical_lm(l),
        _ => false,
    }
}

fn numerical_pipeline(e: &PipelineError) -> bool {
    match e {
        PipelineError::Diverged { .. } => true,
        PipelineError::Lm(l) => numerical_lm(l),
        PipelineError::Train(t) => numerical_train(t),
        PipelineError::Eval(v) => numerical_eval(v),
        PipelineError::Datagen(DatagenError::Lm(l)) => numerical_lm(l),
        _ => false,
    }
}

/// 3 for numerical failures, 2 for everything else that went wrong with
/// the data, files or configuration.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let numerical = cause.downcast_ref::<PipelineError>().is_some_and(numerical_pipeline)
            || cause.downcast_ref::<TrainError>().is_some_and(numerical_train)
            || cause.downcast_ref::<EvalError>().is_some_and(numerical_eval)
            || cause.downcast_ref::<LmError>().is_some_and(numerical_lm)
            || cause.downcast_ref::<NumericsError>().is_some_and(numerical_numerics);
        if numerical {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
