use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conceptdet::ablation::{run_ablation, Toggle};
use conceptdet::checkpoint::{self, checkpoint_meta};
use conceptdet::config::ModelConfig;
use conceptdet::eval::{evaluate, PromptMode};
use conceptdet::gradcheck::{check_objective, Target, DEFAULT_STEP};
use conceptdet::pipeline::{distillation_stats, pretrain, train_visual_prompt, tune_prompts, RunSummary};
use conceptdet::tensor::suite::op_suite;
use conceptdet::train::{Regime, TrainConfig};
use conceptdet::world::{training_categories, BenchmarkSplit, SceneSpec};
use conceptdet::{io, Error};

type CliResult = Result<bool, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "conceptdet", version, about = "Prompt-conditioned detector on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a split of synthetic scenes to a directory.
    GenData {
        /// TOML scene spec; defaults to 64x64 scenes over the training categories.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        count: usize,
        /// Generate the held-out probe split instead.
        #[arg(long)]
        probe: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh detector with text prompts.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the visual prompt encoder on a frozen base.
    TrainVisualPrompt {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune optimized prompts on a frozen base.
    TunePrompt {
        #[arg(long)]
        base: PathBuf,
        /// Prompt rows per class.
        #[arg(long)]
        super_class: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP of a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Split directory; defaults to the overfit split from the checkpoint config.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        prompt_mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference checks in 64-bit.
    GradCheck {
        #[arg(long, value_enum, default_value = "all")]
        module: Module,
        /// Seeds per primitive in the op suite.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Toggle matrix at toy scale.
    Ablate {
        /// Components to disable one at a time; all when omitted.
        #[arg(long, value_enum)]
        toggle: Vec<ToggleArg>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 100)]
        tune_steps: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Flags override the matching config key.
#[derive(Args, Default)]
struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training split directory; generated from `scenes`/`data-seed` when omitted.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Default learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    negatives: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Text,
    Visual,
    Interactive,
    Optimized,
    Shuffled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    Ops,
    Pretrain,
    VisualPrompt,
    TunePrompt,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToggleArg {
    Mfg,
    Psf,
    AuxHead,
    PromptLoss,
    SuperClass,
}

/// Overlays `over` onto `base`, descending into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "lr" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl TrainArgs {
    fn config(&self, regime: Regime) -> Result<TrainConfig, Box<dyn std::error::Error>> {
        let defaults = TrainConfig::for_regime(regime);
        let mut cfg = match &self.config {
            None => defaults,
            Some(path) => {
                let mut table = toml::Table::try_from(&defaults)?;
                let file: toml::Table = toml::from_str(&std::fs::read_to_string(path)?)?;
                merge(&mut table, file);
                table.try_into()?
            }
        };
        if cfg.regime != regime {
            return Err(Error::Config(format!("config regime {:?} does not match the subcommand", cfg.regime)).into());
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr.insert("default".into(), v);
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.scenes {
            cfg.scenes = v;
        }
        if let Some(v) = self.data_seed {
            cfg.data_seed = v;
        }
        if let Some(v) = self.negatives {
            cfg.negatives = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn split(&self, cfg: &TrainConfig) -> conceptdet::Result<BenchmarkSplit> {
        match &self.split {
            Some(dir) => io::load_split(dir),
            None => BenchmarkSplit::overfit(cfg.scenes, cfg.data_seed),
        }
    }
}

fn progress(steps: usize) -> impl FnMut(usize, &conceptdet::model::LossReport) {
    let every = (steps / 20).max(1);
    move |i, r| {
        if i % every == 0 || i + 1 == steps {
            log::info!("step {i}: total {:.4} decoder {:.4} aux {:.4} prompt {:.4} mse {:.4}", r.total, r.decoder, r.aux, r.prompt, r.mse);
        }
    }
}

fn report_check(name: &str, ok: bool) -> bool {
    println!("check {name}: {}", if ok { "ok" } else { "FAILED" });
    ok
}

fn summary_checks(run: &RunSummary) -> bool {
    println!("steps {}; loss {:.4} -> {:.4}", run.steps, run.first.total, run.last.total);
    report_check("finite-loss", run.last.total.is_finite()) & report_check("frozen-unchanged", run.frozen_unchanged())
}

fn save(det: &conceptdet::model::Detector, run: &RunSummary, cfg: &TrainConfig, out: &Path) -> conceptdet::Result<()> {
    checkpoint::save(det, &checkpoint_meta(det, run.steps as u64, run.frozen.clone(), Some(cfg.clone())), out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData { spec, seed, count, probe, out } => {
            let split = if probe {
                BenchmarkSplit::held_out_probe(count, seed)?
            } else {
                let spec: SceneSpec = match spec {
                    Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
                    None => SceneSpec::default(),
                };
                spec.validate()?;
                let cats = spec.categories.clone();
                BenchmarkSplit::generate("generated", seed, count, &spec, cats)?
            };
            io::save_split(&split, &out)?;
            let objects: usize = split.scenes.iter().map(|s| s.objects.len()).sum();
            println!("wrote {} scenes ({objects} objects) to {}", split.scenes.len(), out.display());
            Ok(true)
        }
        Command::Pretrain { train, out } => {
            let cfg = train.config(Regime::Pretrain)?;
            let split = train.split(&cfg)?;
            let (det, run) = pretrain(&cfg, &split, progress(cfg.steps))?;
            let ap = evaluate(&det, &split, PromptMode::Text, cfg.seed)?;
            println!("training-set AP {:.4}, AP50 {:.4}", ap.coco.mean, ap.ap50.mean);
            save(&det, &run, &cfg, &out)?;
            Ok(summary_checks(&run))
        }
        Command::TrainVisualPrompt { base, train, out } => {
            let cfg = train.config(Regime::VisualPrompt)?;
            let split = train.split(&cfg)?;
            let (det, _) = checkpoint::load(&base)?;
            let (det, run) = train_visual_prompt(det, &cfg, &split, progress(cfg.steps))?;
            let stats = distillation_stats(&det, &split, &training_categories(), cfg.seed)?;
            println!("cosine {:.4}, MSE {:.5} over {} pairs", stats.cosine, stats.mse, stats.pairs);
            save(&det, &run, &cfg, &out)?;
            Ok(summary_checks(&run))
        }
        Command::TunePrompt { base, super_class, train, out } => {
            let mut cfg = train.config(Regime::TunePrompt)?;
            if let Some(m) = super_class {
                cfg.super_class = m;
            }
            cfg.validate()?;
            // without an explicit split, the label-shifted overfit split
            let split = match &train.split {
                Some(dir) => io::load_split(dir)?,
                None => BenchmarkSplit::overfit(cfg.scenes, cfg.data_seed)?.label_shifted(),
            };
            let (det, _) = checkpoint::load(&base)?;
            let (det, report) = tune_prompts(&det, &cfg, &split, progress(cfg.steps))?;
            println!("M={}: zero-shot AP {:.4}, tuned AP {:.4}; skipped categories {:?}", report.super_class, report.zero_shot_ap, report.tuned_ap, report.skipped);
            if let Some(out) = out {
                save(&det, &report.run, &cfg, &out)?;
            }
            Ok(summary_checks(&report.run))
        }
        Command::Eval { ckpt, split, prompt_mode, seed } => {
            let (det, meta) = checkpoint::load(&ckpt)?;
            let split = match split {
                Some(dir) => io::load_split(dir)?,
                None => {
                    let t = meta.train.unwrap_or_default();
                    BenchmarkSplit::overfit(t.scenes, t.data_seed)?
                }
            };
            let mode = match prompt_mode {
                Mode::Text => PromptMode::Text,
                Mode::Visual => PromptMode::Visual,
                Mode::Interactive => PromptMode::Interactive,
                Mode::Optimized => PromptMode::Optimized,
                Mode::Shuffled => PromptMode::Shuffled,
            };
            let r = evaluate(&det, &split, mode, seed)?;
            println!("{:<20} {:>8} {:>8}", "category", "AP", "AP50");
            for (c, ap) in &r.coco.per_class {
                println!("{:<20} {:>8.4} {:>8.4}", split.phrases[*c], ap, r.ap50.per_class.get(c).copied().unwrap_or(0.0));
            }
            println!("{:<20} {:>8.4} {:>8.4}", "mean", r.coco.mean, r.ap50.mean);
            Ok(true)
        }
        Command::GradCheck { module, seeds, h, tol } => {
            let mut ok = true;
            if matches!(module, Module::Ops | Module::All) {
                for r in op_suite(seeds, h, None)? {
                    println!("{:<22} {:.3e} (worst seed {}, {} coordinates, {} skipped)", r.op, r.max_rel_error, r.worst_seed, r.coordinates, r.skipped);
                    ok &= r.max_rel_error <= tol;
                }
            }
            let targets: &[(Module, Target)] = &[(Module::Pretrain, Target::Pretrain), (Module::VisualPrompt, Target::VisualPrompt), (Module::TunePrompt, Target::TunePrompt)];
            for &(m, target) in targets {
                if matches!(module, Module::All) || std::mem::discriminant(&module) == std::mem::discriminant(&m) {
                    let r = check_objective(target, &ModelConfig::compact(), 0, h)?;
                    println!("{target:?} objective {:.3e} over {} coordinates ({} refined, {} skipped)", r.max_rel_error, r.coordinates, r.refined, r.skipped);
                    ok &= r.max_rel_error <= tol;
                }
            }
            Ok(report_check(&format!("max relative error <= {tol:e}"), ok))
        }
        Command::Ablate { toggle, train, tune_steps, report } => {
            let mut base = train.config(Regime::Pretrain)?;
            if train.steps.is_none() && train.config.is_none() {
                base.steps = 300;
            }
            let tune = TrainConfig { steps: tune_steps, seed: base.seed, ..TrainConfig::for_regime(Regime::TunePrompt) };
            tune.validate()?;
            let toggles: Vec<Toggle> = if toggle.is_empty() {
                Toggle::ALL.to_vec()
            } else {
                toggle
                    .iter()
                    .map(|t| match t {
                        ToggleArg::Mfg => Toggle::Mfg,
                        ToggleArg::Psf => Toggle::Psf,
                        ToggleArg::AuxHead => Toggle::AuxHead,
                        ToggleArg::PromptLoss => Toggle::PromptLoss,
                        ToggleArg::SuperClass => Toggle::SuperClass,
                    })
                    .collect()
            };
            let split = train.split(&base)?;
            let r = run_ablation(&toggles, &base, &tune, &split, &split.label_shifted())?;
            print!("{r}");
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_vec_pretty(&r)?)?;
            }
            Ok(report_check("structural", r.all_checks_pass()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
