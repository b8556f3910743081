//! Command line front end: dataset generation, knowledge-base building,
//! training, evaluation, trace export, and the ablation harness.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ivt_core::knowledge::{load_kb_dir, write_kb_dir, EmbeddingTable, KnowledgeBase};
use ivt_core::model::load_checkpoint;
use ivt_core::synth::{load_dataset, save_dataset, DataConfig, Dataset};
use ivt_core::train::{
    apply_variant, evaluate, location_sweep, trace_from_csv, trace_to_csv, train, write_run_dir,
    AblationRow, LossKind, TrainConfig, ABLATION_VARIANTS,
};

#[derive(Parser)]
#[command(
    name = "ivt",
    about = "Desk-scale surgical action-triplet recognition workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Cgl,
    Bce,
    Focal,
    Eq,
}

impl From<LossArg> for LossKind {
    fn from(v: LossArg) -> Self {
        match v {
            LossArg::Cgl => LossKind::Cgl,
            LossArg::Bce => LossKind::Bce,
            LossArg::Focal => LossKind::Focal,
            LossArg::Eq => LossKind::Eq,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Knowledge-base directory produced by build-kb (needed unless --no-gpi).
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Training config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable the prompt-pool prefix path.
    #[arg(long)]
    no_gpi: bool,
    /// Disable the task-prompt adapter.
    #[arg(long)]
    no_tsp: bool,
    /// Loss for the triplet task.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Masking probability (cgl) or suppression probability (eq).
    #[arg(long)]
    gamma: Option<f64>,
    /// Fusion weight for the summed task slices.
    #[arg(long)]
    alpha: Option<f64>,
    /// Attention layer index receiving the prompt prefix.
    #[arg(long = "prefix-loc")]
    prefix_loc: Option<usize>,
    /// Prompts retrieved per sub-pool.
    #[arg(long = "topk")]
    topk: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainArgs {
    fn resolve_config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => serde_json::from_str(
                &std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            )
            .with_context(|| format!("parsing {}", path.display()))?,
            None => TrainConfig::default(),
        };
        if self.no_gpi {
            cfg.use_gpi = false;
        }
        if self.no_tsp {
            cfg.use_tsp = false;
        }
        if let Some(loss) = self.loss {
            cfg.loss = loss.into();
        }
        if let Some(gamma) = self.gamma {
            cfg.gamma = gamma;
        }
        if let Some(alpha) = self.alpha {
            cfg.alpha = alpha;
        }
        if let Some(loc) = self.prefix_loc {
            cfg.prefix_location = loc;
        }
        if let Some(k) = self.topk {
            cfg.top_k = k;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        Ok(cfg)
    }

    fn load_inputs(&self, cfg: &TrainConfig) -> Result<(Dataset, Option<EmbeddingTable>)> {
        let dataset = load_dataset(&self.data)
            .with_context(|| format!("loading dataset from {}", self.data.display()))?;
        let embeddings = if cfg.use_gpi {
            let kb_dir = self
                .kb
                .as_ref()
                .context("--kb is required unless --no-gpi is set")?;
            let (_, table) = load_kb_dir(kb_dir)
                .with_context(|| format!("loading knowledge base from {}", kb_dir.display()))?;
            Some(table)
        } else {
            None
        };
        Ok((dataset, embeddings))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed triplet dataset.
    GenData {
        /// Dataset config JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render knowledge sentences and build their embedding table.
    BuildKb {
        /// Knowledge JSON file.
        #[arg(long)]
        knowledge: PathBuf,
        /// Embedding source: a file path, or the literal `stub`.
        #[arg(long)]
        embeddings: String,
        /// Embedding dimension (enforced for files, used by the stub).
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Stub-encoder seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write the run directory.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a run's gradient-dynamics trace as CSV.
    Trace {
        /// Run directory written by train.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the module toggle grid and the prefix-location sweep.
    Ablate {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("name,use_gpi,use_tsp,loss,AP_I,AP_V,AP_T,AP_IV,AP_IT,AP_IVT\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{},{},{},{},{},{}\n",
            r.name,
            r.use_gpi,
            r.use_tsp,
            r.loss,
            fmt(r.report.ap_i),
            fmt(r.report.ap_v),
            fmt(r.report.ap_t),
            fmt(r.report.ap_iv),
            fmt(r.report.ap_it),
            fmt(r.report.ap_ivt),
        ));
    }
    out
}

fn sweep_csv(rows: &[(usize, ivt_core::metrics::ApReport)]) -> String {
    let mut out = String::from("location,AP_I,AP_V,AP_T,AP_IV,AP_IT,AP_IVT\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (loc, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            loc,
            fmt(r.ap_i),
            fmt(r.ap_v),
            fmt(r.ap_t),
            fmt(r.ap_iv),
            fmt(r.ap_it),
            fmt(r.ap_ivt),
        ));
    }
    out
}

fn run_ablate(args: &TrainArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve_config()?;
    let (dataset, embeddings) = args.load_inputs(&TrainConfig {
        use_gpi: true,
        ..cfg.clone()
    })?;
    std::fs::create_dir_all(out)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for variant in &ABLATION_VARIANTS {
        eprintln!("[ablate] {}", variant.name);
        let result = train(&apply_variant(&cfg, variant), &dataset, embeddings.as_ref());
        let run = match result {
            Ok(run) => run,
            Err(e) => {
                // Keep whatever finished; the grid aborts on first failure.
                std::fs::write(
                    out.join("ablation.json"),
                    serde_json::to_string_pretty(&rows)?,
                )?;
                std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
                bail!("grid run '{}' failed after {} rows: {e}", variant.name, rows.len());
            }
        };
        rows.push(AblationRow {
            name: variant.name.to_string(),
            use_gpi: variant.use_gpi,
            use_tsp: variant.use_tsp,
            loss: variant.loss,
            report: run.report,
        });
        std::fs::write(
            out.join("ablation.json"),
            serde_json::to_string_pretty(&rows)?,
        )?;
        std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    }
    eprintln!("[ablate] prefix-location sweep");
    let sweep = location_sweep(&cfg, &dataset, embeddings.as_ref())?;
    let pairs: Vec<(usize, ivt_core::metrics::ApReport)> = sweep;
    std::fs::write(
        out.join("location_sweep.json"),
        serde_json::to_string_pretty(
            &pairs
                .iter()
                .map(|(l, r)| serde_json::json!({"location": l, "report": r}))
                .collect::<Vec<_>>(),
        )?,
    )?;
    std::fs::write(out.join("location_sweep.csv"), sweep_csv(&pairs))?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg: DataConfig = match config {
                Some(path) => serde_json::from_str(
                    &std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?,
                )
                .with_context(|| format!("parsing {}", path.display()))?,
                None => DataConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let dataset = Dataset::generate(&cfg)?;
            save_dataset(&dataset, &out)?;
            let counts = dataset.train_class_counts();
            let max = counts.iter().max().copied().unwrap_or(0);
            let min_nonzero = counts.iter().filter(|&&c| c > 0).min().copied().unwrap_or(0);
            eprintln!(
                "wrote {} train / {} test videos to {} (realized train count max {max}, min nonzero {min_nonzero})",
                dataset.train.len(),
                dataset.test.len(),
                out.display()
            );
        }
        Command::BuildKb {
            knowledge,
            embeddings,
            dim,
            out,
            seed,
        } => {
            let kb = KnowledgeBase::parse_file(&knowledge)
                .with_context(|| format!("parsing {}", knowledge.display()))?;
            let expected: Vec<String> = kb.sentences().into_iter().map(|s| s.id).collect();
            let table = if embeddings == "stub" {
                EmbeddingTable::stub_for(&kb, dim, seed)?
            } else {
                let table = EmbeddingTable::ingest(Path::new(&embeddings), &expected)?;
                if table.dim() != dim {
                    bail!(
                        "embedding file has dimension {}, --dim says {dim}",
                        table.dim()
                    );
                }
                table
            };
            write_kb_dir(&kb, &table, &out)?;
            eprintln!(
                "wrote knowledge base ({} sentences, dim {}) to {}",
                expected.len(),
                table.dim(),
                out.display()
            );
        }
        Command::Train { args, out } => {
            let cfg = args.resolve_config()?;
            let (dataset, embeddings) = args.load_inputs(&cfg)?;
            let run = train(&cfg, &dataset, embeddings.as_ref())?;
            write_run_dir(&run, &out)?;
            let report = serde_json::to_string(&run.report)?;
            println!("{report}");
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let (model, pools) = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let dataset = load_dataset(&data)?;
            let report = evaluate(&model, pools.as_ref(), &dataset)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Trace { run, out } => {
            let csv_path = run.join("trace.csv");
            let text = std::fs::read_to_string(&csv_path)
                .with_context(|| format!("reading {}", csv_path.display()))?;
            let rows = trace_from_csv(&text)?;
            std::fs::write(&out, trace_to_csv(&rows))?;
            eprintln!("wrote {} trace rows to {}", rows.len(), out.display());
        }
        Command::Ablate { args, out } => run_ablate(&args, &out)?,
    }
    Ok(())
}
