//! `tslm`: one binary driving the captioning pipeline stage by stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use tslm_core::autoencoder::{train_autoencoder, Autoencoder};
use tslm_core::checkpoint::Checkpoint;
use tslm_core::datagen::{duplicate_rate, generate_dataset, inject_mispairs, toy_pairs, GenerationBackend, GenerationConfig, TemplateBackend};
use tslm_core::decoder::{generate_captions, train_tslm, SamplingConfig, Tslm};
use tslm_core::denoiser::{filter_pairs, score_pairs, train_denoiser, DenoiseReport, Denoiser};
use tslm_core::encoder::Modality;
use tslm_core::eval::{evaluate_run, fraction_sweep, group_references, temperature_sweep, toy_test_items, training_mix, MetricsReport, FRACTIONS, TEMPERATURES};
use tslm_core::llm::{summarize_captions, LlmEndpoint, RemoteBackend, SummaryBackend};
use tslm_core::pipeline::{read_pairs, read_pairs_many, read_vocabulary, write_pairs, PipelineConfig};
use tslm_core::textrep::{build_vocab, Vocabulary};
use tslm_core::{CaptionedPair, Error, Source, TimeSeries};

#[derive(Parser)]
#[command(name = "tslm", version, about = "Time-series captioning pipeline")]
struct Cli {
    /// Pipeline configuration JSON; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Template,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Joint,
    Text,
    Timeseries,
}

impl From<Variant> for Modality {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Joint => Modality::Joint,
            Variant::Text => Modality::Text,
            Variant::Timeseries => Modality::TimeSeries,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Summarize {
    Remote,
    Fallback,
    None,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Sweep {
    Temperature,
    Fraction,
}

#[derive(Subcommand)]
enum Command {
    /// Grow a generated dataset from demonstration pairs.
    GenData {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        bootstrap: Option<bool>,
        #[arg(long)]
        group_threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "template")]
        backend: Backend,
        /// Swap the captions of this fraction of pairs after generation.
        #[arg(long)]
        inject_noise: Option<f64>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        llm_model: Option<String>,
    },
    /// Train the series autoencoder.
    TrainAe {
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Train the cross-modal retrieval model on clean pairs.
    TrainDenoiser {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score generated pairs and drop those below the threshold.
    Denoise {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the captioning model.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Percentage of generated pairs added to the original ones.
        #[arg(long, default_value_t = 100.0)]
        fraction: f64,
        #[arg(long, value_enum, default_value = "joint")]
        variant: Variant,
    },
    /// Caption one series.
    Caption {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        /// Comma-separated values.
        #[arg(long)]
        series: String,
        #[arg(short = 'k', long = "captions")]
        k: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, value_enum, default_value = "none")]
        summarize: Summarize,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        llm_model: Option<String>,
    },
    /// Compute ROUGE and TSLMScore on a test set.
    Evaluate {
        /// Trained captioning model; not used by the fraction sweep.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum)]
        sweep: Option<Sweep>,
        /// Training data for the fraction sweep's retraining.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "joint")]
        variant: Variant,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a small clean demonstration set and a held-out test set with
    /// several references per series.
    ToyData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 120)]
        demos: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 3)]
        references: usize,
    },
    /// Attach retrieval scores to pairs.
    Score {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 1,
        Error::Param(_) => 1,
        Error::Transport(_) | Error::Protocol(_) => 4,
        e if e.is_numeric() => 3,
        Error::Tensor(_) => 3,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_ae(path: &Path) -> Result<Autoencoder, Error> {
    Autoencoder::from_checkpoint(&Checkpoint::load(path)?)
}

fn endpoint(url: Option<String>, model: Option<String>) -> Result<LlmEndpoint, Failure> {
    let mut ep = match url {
        Some(u) => LlmEndpoint::new(u, "default"),
        None => LlmEndpoint::from_env().ok_or_else(|| Failure::Usage("remote backend needs --endpoint or TSLM_LLM_ENDPOINT".into()))?,
    };
    if let Some(m) = model.or_else(|| std::env::var(tslm_core::llm::MODEL_VAR).ok()) {
        ep.model = m;
    }
    if ep.token.is_none() {
        ep.token = std::env::var(tslm_core::llm::TOKEN_VAR).ok().filter(|t| !t.is_empty());
    }
    Ok(ep)
}

fn vocabulary(cfg: &PipelineConfig, pairs: &[CaptionedPair]) -> Result<Vocabulary, Error> {
    match &cfg.vocabulary {
        Some(p) => read_vocabulary(p),
        None => build_vocab(&pairs.iter().map(|p| p.caption.as_str()).collect::<Vec<_>>()),
    }
}

fn parse_series(text: &str) -> Result<TimeSeries, Failure> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Failure::Usage(format!("--series: {v:?} is not a number"))))
        .collect::<Result<Vec<_>, _>>()?;
    TimeSeries::new(values).map_err(|e| Failure::Run(Error::Data { line: 1, message: format!("--series: {e}") }))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn train_captioner(cfg: &PipelineConfig, pairs: &[CaptionedPair], ae: &Autoencoder, fraction: f64, variant: Variant) -> Result<Tslm, Error> {
    let (original, generated): (Vec<_>, Vec<_>) = pairs.iter().cloned().partition(|p| p.source == Source::Original);
    let mix = training_mix(&original, &generated, fraction, cfg.seed)?;
    if mix.is_empty() {
        return Err(Error::Contract(format!("no training pairs at fraction {fraction}%")));
    }
    let vocab = vocabulary(cfg, pairs)?;
    info!("training {} pairs ({} original, {fraction}% of {} generated)", mix.len(), original.len(), generated.len());
    let (model, history) = train_tslm(&mix, vocab, ae, cfg.tslm(variant.into()), &cfg.tslm_train)?;
    info!("caption loss {:.4} -> {:.4}", history[0], history[history.len() - 1]);
    Ok(model)
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData { demos, out, count, bootstrap, group_threshold, backend, inject_noise, endpoint: url, llm_model } => {
            let demos = read_pairs(&demos)?;
            let g = &cfg.generation;
            let gen_cfg = GenerationConfig {
                samples_per_query: g.samples_per_query,
                bootstrap: bootstrap.unwrap_or(g.bootstrap),
                group_threshold: group_threshold.unwrap_or(g.group_threshold),
            };
            let mut backend: Box<dyn GenerationBackend> = match backend {
                Backend::Template => Box::new(TemplateBackend { len_range: g.len_range, ..Default::default() }),
                Backend::Remote => Box::new(RemoteBackend::new(endpoint(url, llm_model)?)),
            };
            let outcome = generate_dataset(&demos, count.unwrap_or(g.count), &gen_cfg, backend.as_mut(), cfg.seed)?;
            info!("{} pairs from {} queries, duplicate rate {:.2}%", outcome.pairs.len(), outcome.queries, duplicate_rate(&outcome.pairs));
            let pairs = match inject_noise {
                Some(rate) => {
                    let (noisy, idx) = inject_mispairs(&outcome.pairs, rate, cfg.seed)?;
                    write_json(&out.with_extension("noisy.json"), &idx)?;
                    info!("swapped captions of {} pairs", idx.len());
                    noisy
                }
                None => outcome.pairs,
            };
            write_pairs(&out, &pairs)?;
        }
        Command::TrainAe { data, out, epochs, batch } => {
            let pairs = read_pairs_many(&data)?;
            let mut train = cfg.ae_train;
            train.epochs = epochs.unwrap_or(train.epochs);
            train.batch = batch.unwrap_or(train.batch);
            let series: Vec<TimeSeries> = pairs.into_iter().map(|p| p.series).collect();
            let (ae, history) = train_autoencoder(&series, cfg.autoencoder, &train)?;
            info!("autoencoder L1 {:.4} -> {:.4}", history[0], history[history.len() - 1]);
            ae.to_checkpoint().save(&out)?;
        }
        Command::TrainDenoiser { data, ae, out, batch, epochs } => {
            let pairs = read_pairs(&data)?;
            let ae = load_ae(&ae)?;
            let mut train = cfg.denoiser_train;
            train.epochs = epochs.unwrap_or(train.epochs);
            train.batch = batch.unwrap_or(train.batch);
            let vocab = vocabulary(&cfg, &pairs)?;
            let (model, history) = train_denoiser(&pairs, vocab, ae, cfg.encoder, &train)?;
            info!("retrieval loss {:.4} -> {:.4}", history[0], history[history.len() - 1]);
            model.to_checkpoint().save(&out)?;
        }
        Command::Denoise { data, model, threshold, out, report } => {
            let pairs = read_pairs(&data)?;
            let model = Denoiser::from_checkpoint(&Checkpoint::load(&model)?)?;
            let th = threshold.unwrap_or(cfg.threshold);
            let outcome = filter_pairs(score_pairs(&pairs, &model)?, th)?;
            info!("kept {} of {} pairs at threshold {th}", outcome.kept.len(), pairs.len());
            write_pairs(&out, &outcome.kept)?;
            write_json(&report, &DenoiseReport::new(&outcome, th))?;
        }
        Command::Train { data, ae, out, epochs, batch, fraction, variant } => {
            let pairs = read_pairs_many(&data)?;
            let ae = load_ae(&ae)?;
            let mut cfg = cfg;
            cfg.tslm_train.epochs = epochs.unwrap_or(cfg.tslm_train.epochs);
            cfg.tslm_train.batch = batch.unwrap_or(cfg.tslm_train.batch);
            train_captioner(&cfg, &pairs, &ae, fraction, variant)?.to_checkpoint().save(&out)?;
        }
        Command::Caption { model, ae, series, k, top_k, top_p, temperature, summarize, endpoint: url, llm_model } => {
            let series = parse_series(&series)?;
            let model = Tslm::from_checkpoint(&Checkpoint::load(&model)?)?;
            let ae = load_ae(&ae)?;
            let s = cfg.sampling;
            let sampling = SamplingConfig {
                k: k.unwrap_or(s.k),
                top_k: top_k.unwrap_or(s.top_k),
                top_p: top_p.unwrap_or(s.top_p),
                temperature: temperature.unwrap_or(s.temperature),
                ..s
            };
            let captions = generate_captions(&model, &model.prepare(&series, &ae)?, &sampling)?;
            let summary = match summarize {
                Summarize::None => None,
                Summarize::Fallback => Some(summarize_captions(&captions, &SummaryBackend::Fallback)?),
                Summarize::Remote => Some(summarize_captions(&captions, &SummaryBackend::Remote(endpoint(url, llm_model)?))?),
            };
            let out = serde_json::json!({ "captions": captions, "summary": summary });
            println!("{}", serde_json::to_string_pretty(&out).map_err(Error::from)?);
        }
        Command::Evaluate { model, ae, denoiser, test, sweep, data, variant, report } => {
            let ae = load_ae(&ae)?;
            let items = group_references(&read_pairs(&test)?);
            let denoiser = denoiser.map(|p| Checkpoint::load(p).and_then(|c| Denoiser::from_checkpoint(&c))).transpose()?;
            let load_model = || -> Result<Tslm, Failure> {
                let path = model.as_ref().ok_or_else(|| Failure::Usage("--model is required unless --sweep fraction".into()))?;
                Ok(Tslm::from_checkpoint(&Checkpoint::load(path)?)?)
            };
            let rows = match sweep {
                None => vec![evaluate_run(&load_model()?, &ae, &items, &cfg.sampling, denoiser.as_ref())?],
                Some(Sweep::Temperature) => temperature_sweep(&load_model()?, &ae, &items, &cfg.sampling, &TEMPERATURES, denoiser.as_ref())?,
                Some(Sweep::Fraction) => {
                    if data.is_empty() {
                        return Err(Failure::Usage("--sweep fraction needs --data with the training pairs".into()));
                    }
                    let pairs = read_pairs_many(&data)?;
                    fraction_sweep(&ae, &items, &cfg.sampling, &FRACTIONS, denoiser.as_ref(), |pct| train_captioner(&cfg, &pairs, &ae, pct, variant))?
                }
            };
            for r in &rows {
                let at = r.axis_value.map(|v| format!("{v}: ")).unwrap_or_default();
                let score = r.tslm_score.map(|v| format!(" TSLMScore {v:.2}")).unwrap_or_default();
                info!("{at}R-1 {:.2} R-2 {:.2} R-L {:.2}{score}", r.r1, r.r2, r.rl);
            }
            let dataset = test.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let axis = sweep.map(|s| match s {
                Sweep::Temperature => "temperature".to_string(),
                Sweep::Fraction => "fraction".to_string(),
            });
            MetricsReport { dataset, axis, rows }.write(&report)?;
        }
        Command::ToyData { out_dir, demos, test, references } => {
            std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
            let lens = (12, 24);
            let demo_pairs: Vec<CaptionedPair> = toy_pairs(demos, lens, Source::Original, cfg.seed)?.into_iter().map(|(p, _)| p).collect();
            write_pairs(&out_dir.join("demos.jsonl"), &demo_pairs)?;
            let mut test_pairs = Vec::new();
            for item in toy_test_items(test, lens, references, cfg.seed.wrapping_add(1))? {
                for r in item.references {
                    test_pairs.push(CaptionedPair::new(item.series.clone(), r, Source::Original)?);
                }
            }
            write_pairs(&out_dir.join("test.jsonl"), &test_pairs)?;
        }
        Command::Score { denoiser, pairs, out } => {
            let model = Denoiser::from_checkpoint(&Checkpoint::load(&denoiser)?)?;
            write_pairs(&out, &score_pairs(&read_pairs(&pairs)?, &model)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
