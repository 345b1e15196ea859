use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use protoner::config::RunConfig;
use protoner::corpus::{corpus_stats, parse_corpus, synth_confounded_corpus, write_corpus, CorpusFormat, SyntheticSpec};
use protoner::episodes::{build_class_index, sample_episode, validate_episode, write_episode_records, EpisodeParams};
use protoner::pipeline::{
    ablate, derive_seed, dump_features, evaluate, load_checkpoint, render_ablation, render_log, save_checkpoint,
    train_with, MetricRecord, ShotBlock,
};
use protoner::plot::{run_plot, write_feature_dump, PlotKind, PlotRequest};
use protoner::Error;

#[derive(Parser)]
#[command(name = "protoner", version, about = "Few-shot NER with intervened prototypical networks")]
#[command(after_help = "Run configuration keys can be overridden with PROTONER_<KEY> environment variables.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a corpus and print per-class statistics as JSON.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "fewnerd")]
        format: CorpusFormat,
        /// Write the normalised corpus here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the planted-confounder corpora.
    Synth {
        #[arg(long, default_value_t = 0.8)]
        rho: f64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        entities: usize,
        #[arg(long, default_value_t = 6)]
        context_vocab: usize,
        #[arg(long, default_value_t = 1000)]
        sentences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample episodes and write them as JSON lines of sentence indices.
    Sample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 1)]
        shot_lo: usize,
        #[arg(long, default_value_t = 2)]
        shot_hi: usize,
        #[arg(long, default_value_t = 1)]
        query: usize,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic training; writes a checkpoint directory and a metric log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Test corpus, needed for mmd_target = test_support.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Dump evaluation-mode features of training sentences.
        #[arg(long)]
        dump_features: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        dump_limit: usize,
    },
    /// Evaluate a checkpoint on a class-disjoint corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides the configuration stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        dump_features: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        dump_limit: usize,
    },
    /// Run the flag ablation rows for one or both shot windows.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// `lo,hi` windows separated by `;`, e.g. `1,2` or `1,2;5,10`.
        #[arg(long, default_value = "1,2")]
        shots: String,
        #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write projection or histogram data files from feature dumps.
    Plot {
        #[arg(long)]
        kind: PlotKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    let cfg = RunConfig::load(path)?;
    Ok(cfg.with_env(std::env::vars())?)
}

fn write_log(path: &Path, records: &[MetricRecord]) -> CmdResult {
    fs::write(path, render_log(records)?)?;
    Ok(())
}

fn parse_blocks(spec: &str) -> std::result::Result<Vec<ShotBlock>, Failure> {
    spec.split(';')
        .map(|w| {
            let parts: Vec<&str> = w.split(',').map(str::trim).collect();
            let nums: std::result::Result<Vec<usize>, _> = parts.iter().map(|p| p.parse()).collect();
            match nums.as_deref() {
                Ok([lo, hi]) => ShotBlock::from_shots(*lo, *hi).map_err(Failure::from),
                _ => Err(Failure::Usage(format!("bad shot window {w:?}, expected lo,hi"))),
            }
        })
        .collect()
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Ingest { input, format, out } => {
            let corpus = parse_corpus(&input, format)?;
            let stats = corpus_stats(&corpus);
            println!(
                "{}",
                serde_json::json!({
                    "sentences": stats.sentences,
                    "tokens": stats.tokens,
                    "class_counts": stats.class_counts,
                })
            );
            if let Some(out) = out {
                write_corpus(&corpus, out)?;
            }
        }
        Command::Synth {
            rho,
            classes,
            entities,
            context_vocab,
            sentences,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                n_classes: classes,
                entities_per_class: entities,
                context_vocab_per_class: context_vocab,
                rho,
                sentences,
                seed,
            };
            let c = synth_confounded_corpus(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
            fs::create_dir_all(&out)?;
            write_corpus(&c.train, out.join("train.txt"))?;
            write_corpus(&c.test_confounded, out.join("test_confounded.txt"))?;
            write_corpus(&c.test_anticonfounded, out.join("test_anticonfounded.txt"))?;
        }
        Command::Sample {
            corpus,
            way,
            shot_lo,
            shot_hi,
            query,
            episodes,
            seed,
            out,
        } => {
            let corpus = parse_corpus(&corpus, CorpusFormat::FewNerd)?;
            let index = build_class_index(&corpus);
            let params = EpisodeParams {
                way,
                shot_lo,
                shot_hi,
                query_per_class: query,
            };
            let mut eps = Vec::with_capacity(episodes);
            for i in 0..episodes {
                let ep = sample_episode(&corpus, &index, &params, derive_seed(seed, 0, i as u64))?;
                let bad = validate_episode(&ep);
                if !bad.is_empty() {
                    return Err(Failure::Runtime(format!("episode {i} invalid: {}", bad.join("; "))));
                }
                eps.push(ep);
            }
            let f = BufWriter::new(fs::File::create(&out)?);
            write_episode_records(f, &eps)?;
        }
        Command::Train {
            config,
            train,
            test,
            out,
            log,
            dump_features: dump,
            dump_limit,
        } => {
            let cfg = load_config(&config)?;
            let corpus = parse_corpus(&train, CorpusFormat::FewNerd)?;
            let test = test.map(|t| parse_corpus(&t, CorpusFormat::FewNerd)).transpose()?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
                None => Box::new(std::io::sink()),
            };
            let result = train_with(&cfg, &corpus, test.as_ref(), &mut |r| {
                writeln!(sink, "{}", serde_json::to_string(r)?)?;
                Ok(())
            });
            sink.flush()?;
            let model = result?;
            save_checkpoint(&model, &out)?;
            if let Some(p) = dump {
                write_feature_dump(&dump_features(&model.encoder, &corpus.sentences, dump_limit)?, p)?;
            }
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            config,
            log,
            report,
            dump_features: dump,
            dump_limit,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => model.config.with_env(std::env::vars())?,
            };
            let corpus = parse_corpus(&corpus, CorpusFormat::FewNerd)?;
            let rep = evaluate(&model, &cfg, &corpus)?;
            println!(
                "span_f1={:.4} p={:.4} r={:.4} episode_f1={:.4}±{:.4} token_f1={:.4}",
                rep.span.f1, rep.span.precision, rep.span.recall, rep.f1_mean, rep.f1_std, rep.token.f1
            );
            if let Some(p) = log {
                write_log(&p, &rep.episodes)?;
            }
            if let Some(p) = report {
                fs::write(p, serde_json::to_string_pretty(&rep).map_err(Error::from)?)?;
            }
            if let Some(p) = dump {
                write_feature_dump(&dump_features(&model.encoder, &corpus.sentences, dump_limit)?, p)?;
            }
        }
        Command::Ablate {
            config,
            train,
            test,
            shots,
            seeds,
            out,
        } => {
            let blocks = parse_blocks(&shots)?;
            let base = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default().with_env(std::env::vars())?,
            };
            let train = parse_corpus(&train, CorpusFormat::FewNerd)?;
            let test = parse_corpus(&test, CorpusFormat::FewNerd)?;
            let table = render_ablation(&ablate(&base, &train, &test, &blocks, &seeds)?);
            print!("{table}");
            if let Some(p) = out {
                fs::write(p, &table)?;
            }
        }
        Command::Plot {
            kind,
            input,
            target,
            bins,
            out,
        } => {
            if bins < 1 {
                return Err(Failure::Usage("--bins must be at least 1".into()));
            }
            run_plot(&PlotRequest {
                kind,
                input,
                target,
                output: out,
                bins,
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("protoner: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("protoner: {msg}");
            ExitCode::from(1)
        }
    }
}
