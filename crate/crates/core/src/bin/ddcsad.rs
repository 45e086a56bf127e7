#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ddcsad::checkpoint::Checkpoint;
use ddcsad::dataset::{build_task, featurize, pool_features, read_features, write_features, Corpus, FeatureStore};
use ddcsad::encoder::PooledClip;
use ddcsad::frontend::write_wav;
use ddcsad::pipeline::{evaluate_task, run_target, sweep_anomaly_budget, TargetRun};
use ddcsad::runspec::RunSpec;
use ddcsad::scoring::{AlphaPolicy, ScoringConfig};
use ddcsad::trainer::history_csv;

#[derive(Parser)]
#[command(name = "ddcsad", version, about = "Anomalous sound detection with a binary classifier and two class centroids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus, write its manifest and cache its features.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Also write every clip as a 16 kHz WAV file.
        #[arg(long)]
        audio: bool,
    },
    /// Train and evaluate one model per selected target id.
    Train(Common),
    /// Score the checkpoints written by `train`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitArg::Evaluation)]
        split: SplitArg,
        /// Overrides `scoring.alpha_policy`.
        #[arg(long, value_enum)]
        alpha_policy: Option<PolicyArg>,
        /// Overrides `scoring.alpha`; implies the fixed policy unless one is given.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train a base model per target, then fine-tune it for every anomaly budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Start from the checkpoints already in the output directory.
        #[arg(long)]
        reuse_base: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Run file (TOML). Defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Evaluation,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Auto,
    Fixed,
    Grid,
    Table,
}

impl From<PolicyArg> for AlphaPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Auto => AlphaPolicy::Auto,
            PolicyArg::Fixed => AlphaPolicy::Fixed,
            PolicyArg::Grid => AlphaPolicy::Grid,
            PolicyArg::Table => AlphaPolicy::Table,
        }
    }
}

/// A loaded run: resolved spec, corpus and pooled features.
struct Run {
    spec: RunSpec,
    digest: String,
    out: PathBuf,
    quiet: bool,
    corpus: Corpus,
    clips: Vec<PooledClip>,
}

impl Run {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn target_dir(&self, target: &(String, u32)) -> anyhow::Result<PathBuf> {
        let dir = self.out.join(format!("{}_id{:02}", target.0, target.1));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn read_spec(common: &Common) -> anyhow::Result<RunSpec> {
    let mut spec = match &common.spec {
        Some(path) => RunSpec::read(path)?,
        None => RunSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec = spec.with_seed(seed);
    }
    spec.validate()?;
    Ok(spec)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Reads the spec, builds the corpus and loads (or computes and caches) its
/// features.
fn load(common: &Common) -> anyhow::Result<Run> {
    let spec = read_spec(common)?;
    let digest = spec.digest();
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write(&common.out.join("run.toml"), spec.to_toml())?;
    let quiet = common.quiet;
    let corpus = spec.load_corpus()?;
    let cache = common.out.join(format!("features-{}.bin", &spec.feature_digest()[..16]));
    let started = Instant::now();
    let features = if cache.exists() {
        read_features(&cache, corpus.len())?
    } else {
        if !quiet {
            eprintln!("extracting features for {} clips", corpus.len());
        }
        let store = featurize(&corpus, &spec.frontend)?;
        write_features(&cache, &store.features)?;
        store.features
    };
    let store = FeatureStore {
        features,
        stats: Default::default(),
        feature_scale: None,
    };
    let clips = pool_features(&store, spec.encoder.input_pool)?;
    drop(store);
    let run = Run {
        spec,
        digest,
        out: common.out.clone(),
        quiet,
        corpus,
        clips,
    };
    run.log(format!("features ready in {:.1}s, digest {}", started.elapsed().as_secs_f64(), run.digest));
    Ok(run)
}

fn cmd_synth(common: &Common, audio: bool) -> anyhow::Result<()> {
    let run = load(common)?;
    write(&run.out.join("manifest.csv"), run.corpus.manifest())?;
    if audio {
        let dir = run.out.join("audio");
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for i in 0..run.corpus.len() {
            let clip = run.corpus.render(i)?;
            write_wav(&dir.join(format!("{}.wav", clip.clip_id)), &clip.samples)?;
        }
    }
    println!("{} clips, {} target ids, digest {}", run.corpus.len(), run.corpus.machine_ids().len(), run.digest);
    Ok(())
}

fn summary_header() -> String {
    String::from("machine_type,machine_id,auc,ci_low,ci_high,n_normal,n_anomalous,alpha\n")
}

fn summary_row(out: &mut String, target: &(String, u32), run: &TargetRun) {
    let o = &run.evaluation.evaluation.pooled;
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        target.0, target.1, o.auc, o.ci_low, o.ci_high, o.n_normal, o.n_anomalous, run.evaluation.alpha
    );
}

fn cmd_train(common: &Common) -> anyhow::Result<()> {
    let run = load(common)?;
    let spec = &run.spec;
    let config = spec.train_config();
    let mut summary = summary_header();
    for target in spec.targets(&run.corpus)? {
        let started = Instant::now();
        let result = run_target(
            &run.corpus,
            &run.clips,
            (&target.0, target.1),
            spec.task.anomaly_budget,
            &spec.encoder,
            &config,
            &spec.scoring,
            None,
            &run.digest,
        )?;
        let dir = run.target_dir(&target)?;
        result.checkpoint.write(&dir.join("model.ckpt"))?;
        write(&dir.join("history.csv"), history_csv(&result.history, &run.digest))?;
        write(&dir.join("scores.csv"), result.evaluation.evaluation.to_text())?;
        if let Some(v) = &result.evaluation.validation {
            write(&dir.join("validation.csv"), v.to_text())?;
        }
        let o = &result.evaluation.evaluation.pooled;
        run.log(format!(
            "{}:{} auc {:.4} [{:.4}, {:.4}] alpha {} ({:.1}s)",
            target.0,
            target.1,
            o.auc,
            o.ci_low,
            o.ci_high,
            result.evaluation.alpha,
            started.elapsed().as_secs_f64()
        ));
        summary_row(&mut summary, &target, &result);
    }
    let _ = writeln!(summary, "# digest={}", run.digest);
    write(&run.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval(
    common: &Common,
    split: SplitArg,
    policy: Option<PolicyArg>,
    alpha: Option<f64>,
) -> anyhow::Result<()> {
    let mut run = load(common)?;
    if let Some(a) = alpha {
        run.spec.scoring.alpha = a;
        run.spec.scoring.alpha_policy = AlphaPolicy::Fixed;
    }
    if let Some(p) = policy {
        run.spec.scoring.alpha_policy = p.into();
    }
    run.spec.validate()?;
    run.digest = run.spec.digest();
    let scoring: ScoringConfig = run.spec.scoring.clone();
    let mut summary = summary_header();
    for target in run.spec.targets(&run.corpus)? {
        let dir = run.target_dir(&target)?;
        let ck = Checkpoint::read(&dir.join("model.ckpt"))
            .with_context(|| format!("no usable checkpoint for {}:{}; run `train` first", target.0, target.1))?;
        let task = build_task(
            &run.corpus,
            &target.0,
            target.1,
            run.spec.task.anomaly_budget,
            run.spec.train.seed,
        )?;
        let evaluation = evaluate_task(&run.corpus, &task, &run.clips, &ck, &scoring, &run.digest)?;
        let (name, report) = match split {
            SplitArg::Evaluation => ("eval-scores.csv", &evaluation.evaluation),
            SplitArg::Validation => match &evaluation.validation {
                Some(r) => ("eval-validation.csv", r),
                None => bail!("validation pool of {}:{} lacks a class", target.0, target.1),
            },
        };
        write(&dir.join(name), report.to_text())?;
        let o = &report.pooled;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{}",
            target.0, target.1, o.auc, o.ci_low, o.ci_high, o.n_normal, o.n_anomalous, evaluation.alpha
        );
    }
    let _ = writeln!(summary, "# digest={}", run.digest);
    write(&run.out.join("eval-summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_sweep(common: &Common, reuse_base: bool) -> anyhow::Result<()> {
    let run = load(common)?;
    let spec = &run.spec;
    let config = spec.train_config();
    let mut table = String::from("machine_type,machine_id,k,auc,ci_low,ci_high,n_normal,n_anomalous,alpha\n");
    for target in spec.targets(&run.corpus)? {
        let started = Instant::now();
        let dir = run.target_dir(&target)?;
        let base = if reuse_base {
            let checkpoint = Checkpoint::read(&dir.join("model.ckpt"))?;
            let task = build_task(&run.corpus, &target.0, target.1, 0, config.seed)?;
            let evaluation = evaluate_task(&run.corpus, &task, &run.clips, &checkpoint, &spec.scoring, &run.digest)?;
            Some(TargetRun {
                task,
                checkpoint,
                history: Vec::new(),
                evaluation,
            })
        } else {
            None
        };
        let result = sweep_anomaly_budget(
            &run.corpus,
            &run.clips,
            (&target.0, target.1),
            &spec.sweep.budgets,
            &spec.encoder,
            &config,
            &spec.scoring,
            base,
            &run.digest,
        )?;
        write(&dir.join("sweep.csv"), result.to_text(&run.digest))?;
        if !reuse_base {
            result.base.checkpoint.write(&dir.join("model.ckpt"))?;
        }
        run.log(format!("{}:{} swept in {:.1}s", target.0, target.1, started.elapsed().as_secs_f64()));
        for r in &result.rows {
            let o = &r.outcome;
            let _ = writeln!(
                table,
                "{},{},{},{},{},{},{},{},{}",
                target.0, target.1, r.k, o.auc, o.ci_low, o.ci_high, o.n_normal, o.n_anomalous, r.alpha
            );
            run.log(format!(
                "  k={:<3} auc {:.4} ± {:.4}",
                r.k,
                o.auc,
                (o.ci_high - o.ci_low) / 2.0
            ));
        }
    }
    let _ = writeln!(table, "# digest={}", run.digest);
    write(&run.out.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ddcsad::Error>() {
        Some(e) if e.is_config() => 2,
        Some(e) if e.is_divergence() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { common, audio } => cmd_synth(common, *audio),
        Command::Train(common) => cmd_train(common),
        Command::Eval {
            common,
            split,
            alpha_policy,
            alpha,
        } => cmd_eval(common, *split, *alpha_policy, *alpha),
        Command::Sweep { common, reuse_base } => cmd_sweep(common, *reuse_base),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
