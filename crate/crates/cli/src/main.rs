use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use descriptor_engine::embedding_store::{inspect_embeddings, read_embeddings_file, write_embeddings_file};
use descriptor_engine::eval::{
    mean_precision_at_k, per_query_precision, read_ground_truth, write_per_query, DEFAULT_K,
};
use descriptor_engine::metric_learning::trainer::{train_toy, write_training_log, ToyTrainConfig};
use descriptor_engine::pca::{fit_pca, project};
use descriptor_engine::pipeline::{apply_pipeline, load_pipeline};
use descriptor_engine::retrieval::{
    build_index, read_predictions, search_with, write_distances, write_predictions, SearchOptions,
};
use descriptor_engine::soup::{read_checkpoint, read_checkpoint_file, soup_uniform, write_checkpoint_file};
use descriptor_engine::synthetic::gaussian_set;
use descriptor_engine::Pca;

/// Image-descriptor toolkit: PCA, pipelines, exact kNN search, mP@k scoring,
/// checkpoint soups and a toy ArcFace trainer.
#[derive(Parser)]
#[command(name = "desc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a PCA model on a UEMB file and store it as a checkpoint.
    PcaFit {
        train: PathBuf,
        /// Number of components to keep.
        #[arg(long, short = 'k')]
        dims: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Project a UEMB file with a fitted PCA model.
    PcaApply {
        model: PathBuf,
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run a JSON pipeline over one UEMB file per declared source.
    PipelineApply {
        spec: PathBuf,
        #[arg(required = true)]
        sources: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Exact top-k search; writes one TSV line per query.
    Search {
        index: PathBuf,
        queries: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write squared distances in the same layout.
        #[arg(long)]
        distances: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Score predictions against ground truth with mean Precision@k.
    Evaluate {
        predictions: PathBuf,
        ground_truth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// Write per-query precision as TSV.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Average checkpoints element-wise.
    Soup {
        #[arg(required = true, num_args = 2..)]
        checkpoints: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the toy ArcFace embedder on synthetic clusters.
    TrainToy {
        #[arg(short, long)]
        output: PathBuf,
        /// Step-wise loss log (TSV).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        init_seed: Option<u64>,
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Check a UEMB or UCKP file and list every problem found.
    Validate { file: PathBuf },
    /// Measure search throughput on files or synthetic data.
    Bench {
        /// Index and query UEMB files; synthetic Gaussian data when omitted.
        #[arg(num_args = 2, value_names = ["INDEX", "QUERIES"])]
        files: Vec<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        queries: usize,
        #[arg(long, default_value_t = 200_000)]
        index_size: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[command(flatten)]
        tuning: Tuning,
    },
}

#[derive(Args)]
struct Tuning {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = SearchOptions::default().block_rows)]
    block_size: usize,
}

impl Tuning {
    fn options(&self) -> SearchOptions {
        SearchOptions {
            threads: self.threads,
            block_rows: self.block_size,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn load(path: &Path) -> Result<descriptor_engine::EmbeddingSet> {
    read_embeddings_file(path).with_context(|| format!("reading {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PcaFit { train, dims, output } => {
            let set = load(&train)?;
            let model: Pca = fit_pca(&set, dims)?;
            write_checkpoint_file(&model.to_checkpoint()?, &output)?;
            let total: f64 = model.eigenvalues().iter().sum();
            eprintln!(
                "fitted {} -> {} on {} rows; retained variance {total:.6}",
                model.input_dim(),
                model.output_dim(),
                set.len()
            );
        }
        Command::PcaApply { model, input, output } => {
            let model = Pca::from_checkpoint(&read_checkpoint_file(&model)?)?;
            write_embeddings_file(&project(&model, &load(&input)?)?, &output)?;
        }
        Command::PipelineApply { spec, sources, output } => {
            let pipeline = load_pipeline(&spec).with_context(|| format!("loading {}", spec.display()))?;
            let sets = sources.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let out = apply_pipeline(&pipeline, &sets)?;
            write_embeddings_file(&out, &output)?;
            eprintln!("{pipeline}: {} rows", out.len());
        }
        Command::Search {
            index,
            queries,
            k,
            output,
            distances,
            tuning,
        } => {
            let index = build_index(load(&index)?)?;
            let results = search_with(&index, &load(&queries)?, k, &tuning.options())?;
            let mut sink = create(&output)?;
            write_predictions(&results, &mut sink)?;
            sink.flush()?;
            if let Some(path) = distances {
                let mut sink = create(&path)?;
                write_distances(&results, &mut sink)?;
                sink.flush()?;
            }
        }
        Command::Evaluate {
            predictions,
            ground_truth,
            k,
            per_query,
        } => {
            let preds =
                read_predictions(open(&predictions)?).with_context(|| format!("reading {}", predictions.display()))?;
            let gt = read_ground_truth(open(&ground_truth)?)
                .with_context(|| format!("reading {}", ground_truth.display()))?;
            let score = mean_precision_at_k(&preds, &gt, k)?;
            if let Some(path) = per_query {
                let mut sink = create(&path)?;
                write_per_query(&per_query_precision(&preds, &gt, k)?, &mut sink)?;
                sink.flush()?;
            }
            println!("mP@{k} = {score:.6}");
        }
        Command::Soup { checkpoints, output } => {
            let cks = checkpoints
                .iter()
                .map(|p| read_checkpoint_file(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            write_checkpoint_file(&soup_uniform(&cks)?, &output)?;
        }
        Command::TrainToy {
            output,
            log,
            seed,
            init_seed,
            data_seed,
            classes,
            epochs,
        } => {
            let defaults = ToyTrainConfig::default();
            let config = ToyTrainConfig {
                seed,
                init_seed: init_seed.unwrap_or(defaults.init_seed),
                data_seed: data_seed.unwrap_or(defaults.data_seed),
                n_classes: classes.unwrap_or(defaults.n_classes),
                epochs: epochs.unwrap_or(defaults.epochs),
                ..defaults
            };
            let out = train_toy(&config)?;
            write_checkpoint_file(&out.checkpoint, &output)?;
            if let Some(path) = log {
                let mut sink = create(&path)?;
                write_training_log(&out.log, &mut sink)?;
                sink.flush()?;
            }
            eprintln!(
                "loss {:.4} -> {:.4} over {} steps",
                out.initial_loss,
                out.final_loss,
                out.log.len()
            );
        }
        Command::Validate { file } => validate_file(&file)?,
        Command::Bench {
            files,
            queries,
            index_size,
            dim,
            k,
            repeat,
            tuning,
        } => {
            let (index, queries) = match files.as_slice() {
                [i, q] => (load(i)?, load(q)?),
                _ => (
                    gaussian_set(index_size, dim, 1, "z")?,
                    gaussian_set(queries, dim, 2, "q")?,
                ),
            };
            let index = build_index(index)?;
            let opts = tuning.options();
            let mut best = f64::INFINITY;
            for _ in 0..repeat.max(1) {
                let start = Instant::now();
                let results = search_with(&index, &queries, k, &opts)?;
                best = best.min(start.elapsed().as_secs_f64());
                std::hint::black_box(results);
            }
            println!(
                "{} queries x {} index x {} dim, k={k}: {best:.3} s, {:.1} queries/sec",
                queries.len(),
                index.len(),
                index.dim(),
                queries.len() as f64 / best
            );
        }
    }
    Ok(())
}

fn validate_file(path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    open(path)?
        .read_exact(&mut magic)
        .with_context(|| format!("{}: too short for a header", path.display()))?;
    match &magic {
        b"UEMB" => {
            let (set, violations) = inspect_embeddings(open(path)?)?;
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                bail!("{}: {} violation(s)", path.display(), violations.len());
            }
            println!(
                "ok: {} rows, dim {}, {}",
                set.len(),
                set.dim(),
                if set.is_normalized() {
                    "normalized"
                } else {
                    "unnormalized"
                }
            );
        }
        b"UCKP" => {
            let ck = read_checkpoint(open(path)?)?;
            let params: usize = ck.tensors().iter().map(|t| t.data().len()).sum();
            println!("ok: {} tensors, {params} values", ck.len());
        }
        _ => bail!("{}: unrecognized file type (bad magic at offset 0)", path.display()),
    }
    Ok(())
}
