//! `itm`: build consensus matrices, score retrieval runs and train the toy
//! embedding model from the command line.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use itm_core::corpus::{self, Corpus, Modality, Split};
use itm_core::metrics::{self, Direction, EvalConfig, MSelection, RetrievalRun};
use itm_core::ngram::{self, DfTable};
use itm_core::semrel;
use itm_core::trainer::{self, Dataset, EmbeddingModel, RunConfig, Validation};
use itm_core::{Error, ErrorKind, Result};
use serde::Serialize;

use manifest::{sidecar, Recorder};

#[derive(Debug, Parser)]
#[command(name = "itm", version, about = "Semantics-aware image-text retrieval evaluation")]
struct Cli {
    /// Upper bound on worker threads for parallel stages.
    #[arg(long, global = true, env = "ITM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count per-image document frequencies of caption n-grams.
    BuildDf(BuildDfArgs),
    /// Score every caption against every image's references.
    Simmat(SimmatArgs),
    /// Compute recall, semantic recall and NCS for a pair of runs.
    Eval(EvalArgs),
    /// Train the linear embedding model from a TOML config.
    Train(TrainArgs),
    /// Pearson correlation between human judgments and metric scores.
    Correlate(CorrelateArgs),
    /// Rank a split with a trained model and write both retrieval runs.
    Rank(RankArgs),
    /// Write a synthetic corpus with image and caption features.
    Synth(SynthArgs),
}

#[derive(Debug, clap::Args, Serialize)]
struct BuildDfArgs {
    /// Caption file (Karpathy-style JSON).
    #[arg(long)]
    captions: PathBuf,
    /// Split to read from the caption file.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Destination df table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
struct SimmatArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// df table built over the same split.
    #[arg(long)]
    df: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop the candidate from its own image's reference set.
    #[arg(long)]
    leave_one_out: bool,
    /// Stream rows to disk in blocks of this many images instead of
    /// holding the whole matrix in memory.
    #[arg(long)]
    block_rows: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, clap::Args, Serialize)]
struct EvalArgs {
    /// Retrieval run file; give one image-to-text and one text-to-image run.
    #[arg(long = "run", required = true, num_args = 1)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Similarity matrix built over the same split.
    #[arg(long)]
    sim: PathBuf,
    /// When given, the matrix must have been built from this df table.
    #[arg(long)]
    df: Option<PathBuf>,
    /// Extended-set size: a positive integer, or "k" to follow each cut-off.
    #[arg(long)]
    m: String,
    /// Cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    /// Report NCS with the annotated ground truth removed (Nsum(N)).
    #[arg(long)]
    non_gt: bool,
    #[arg(long, value_enum, default_value = "table")]
    report: ReportFormat,
    /// Write the run manifest here instead of standard error.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
struct TrainArgs {
    /// TOML file with [train], [sam] and [data] sections.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint of the epoch with the best validation Nsum.
    #[arg(long)]
    out_model: PathBuf,
    /// Per-epoch validation reports (JSON).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
struct CorrelateArgs {
    /// TSV of image_id, caption_id, human score.
    #[arg(long)]
    judgments: PathBuf,
    /// TSV of image_id, caption_id, metric score.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    image_features: PathBuf,
    #[arg(long)]
    caption_features: PathBuf,
    #[arg(long)]
    out_i2t: PathBuf,
    #[arg(long)]
    out_t2i: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    topics: usize,
    #[arg(long, default_value_t = 50)]
    pairs_per_topic: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Split tag written into the caption file.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Receives captions.json, images.feat and captions.feat.
    #[arg(long)]
    out_dir: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 2,
        ErrorKind::Validation => 3,
        ErrorKind::Numeric => 4,
    }
}

fn report_error(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "kind": kind, "code": code, "message": message } })
    );
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report_error("usage", 3, e.to_string().trim_end());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Io => "io",
                ErrorKind::Validation => "validation",
                ErrorKind::Numeric => "numeric",
            };
            report_error(name, exit_code(kind), &e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::BuildDf(a) => build_df(a),
        Command::Simmat(a) => simmat(a),
        Command::Eval(a) => eval(a),
        Command::Train(a) => train(a),
        Command::Correlate(a) => correlate(a),
        Command::Rank(a) => rank(a),
        Command::Synth(a) => synth(a),
    }
}

fn load_corpus(rec: &mut Recorder, path: &Path, split: Split) -> Result<Corpus> {
    rec.input(path)?;
    corpus::load_corpus(path, split)
}

fn build_df(a: BuildDfArgs) -> Result<()> {
    let mut rec = Recorder::new("build-df");
    let corpus = load_corpus(&mut rec, &a.captions, a.split)?;
    let df = ngram::build_df(&corpus);
    df.save(&a.out)?;
    rec.output(&a.out);
    rec.finish(&a).write(&sidecar(&a.out))
}

fn simmat(a: SimmatArgs) -> Result<()> {
    let mut rec = Recorder::new("simmat");
    let corpus = load_corpus(&mut rec, &a.captions, a.split)?;
    rec.input(&a.df)?;
    let df = DfTable::load(&a.df)?;
    if df.corpus_size() as usize != corpus.n_images() {
        return Err(Error::Integrity(format!(
            "df table counts {} images but the {} split has {}",
            df.corpus_size(),
            a.split,
            corpus.n_images()
        )));
    }
    match a.block_rows {
        Some(0) => return Err(Error::InvalidParameter("--block-rows must be at least 1".into())),
        Some(block) => {
            semrel::write_sim_streaming(&corpus, &df, a.leave_one_out, block, &a.out)?;
        }
        None => semrel::save_sim(&semrel::build_sim_matrix_with(&corpus, &df, a.leave_one_out), &a.out)?,
    }
    rec.output(&a.out);
    rec.finish(&a).write(&sidecar(&a.out))
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval");
    let m: MSelection = a.m.parse()?;
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Error::InvalidParameter("--k needs positive cut-offs".into()));
    }
    let corpus = load_corpus(&mut rec, &a.captions, a.split)?;
    let expected_df = match &a.df {
        Some(p) => {
            rec.input(p)?;
            Some(DfTable::load(p)?.checksum())
        }
        None => None,
    };
    rec.input(&a.sim)?;
    let sim = semrel::load_sim(&a.sim, expected_df.as_deref())?;

    let (mut i2t, mut t2i) = (None, None);
    for p in &a.runs {
        rec.input(p)?;
        let run = RetrievalRun::load(p)?;
        let slot = match run.direction() {
            Direction::I2t => &mut i2t,
            Direction::T2i => &mut t2i,
        };
        if slot.replace(run).is_some() {
            return Err(Error::InvalidParameter(format!(
                "more than one run given for one direction ({})",
                p.display()
            )));
        }
    }
    let (i2t, t2i) = match (i2t, t2i) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidParameter(
                "eval needs one image-to-text and one text-to-image run".into(),
            ))
        }
    };
    let cfg = EvalConfig {
        ks: a.k.clone(),
        m,
        gt_removed: a.non_gt,
    };
    let report = metrics::aggregate(&i2t, &t2i, &corpus, &sim, &cfg)?;
    match a.report {
        ReportFormat::Table => print!("{}", report.to_table()),
        ReportFormat::Json => println!("{}", report.to_json()),
    }
    rec.finish(&a).emit(a.manifest.as_deref())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    best_epoch: usize,
    epochs: &'a [trainer::EpochRecord],
}

fn train(a: TrainArgs) -> Result<()> {
    let mut rec = Recorder::new("train");
    rec.input(&a.config)?;
    let cfg = RunConfig::load(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    for p in [
        &cfg.data.captions,
        &cfg.data.train_image_features,
        &cfg.data.train_caption_features,
        &cfg.data.val_image_features,
        &cfg.data.val_caption_features,
    ]
    .into_iter()
    .flatten()
    {
        if cfg.data.source == "files" {
            rec.input(&if p.is_absolute() { p.clone() } else { base.join(p) })?;
        }
    }
    let (train_set, val_set) = cfg.data.load(base)?;
    let sim = trainer::validation_matrix(&val_set);
    let val = Validation::new(&val_set, &sim)?;
    let outcome = trainer::train(&train_set, &val, &cfg.train)?;
    outcome.best.save(&a.out_model)?;
    rec.output(&a.out_model);
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        epochs: &outcome.history,
    };
    std::fs::write(&a.report, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")
        .map_err(|e| Error::io(&a.report, e))?;
    rec.output(&a.report);
    print!("{}", outcome.history[outcome.best_epoch].report.to_table());
    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a TrainArgs,
        config: &'a RunConfig,
    }
    rec.finish(Resolved { args: &a, config: &cfg }).write(&sidecar(&a.out_model))
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    let mut rec = Recorder::new("correlate");
    rec.input(&a.judgments)?;
    rec.input(&a.scores)?;
    let judged = metrics::load_pair_scores(&a.judgments)?;
    let scores = metrics::load_pair_scores(&a.scores)?;
    let result = metrics::correlate(&judged, &scores)?;
    println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
    rec.finish(&a).emit(a.manifest.as_deref())
}

fn rank(a: RankArgs) -> Result<()> {
    let mut rec = Recorder::new("rank");
    rec.input(&a.model)?;
    let model = EmbeddingModel::load(&a.model)?;
    let corpus = load_corpus(&mut rec, &a.captions, a.split)?;
    rec.input(&a.image_features)?;
    rec.input(&a.caption_features)?;
    let images = corpus::load_features(&a.image_features, &corpus, Modality::Image)?;
    let captions = corpus::load_features(&a.caption_features, &corpus, Modality::Caption)?;
    let data = Dataset::new(corpus, images, captions)?;
    let scores = trainer::score_matrix(&model, &data)?;
    let tag = a.model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let (i2t, t2i) = trainer::runs_from_scores(&scores, data.corpus.n_images(), data.corpus.n_captions(), tag)?;
    i2t.save(&a.out_i2t)?;
    t2i.save(&a.out_t2i)?;
    rec.output(&a.out_i2t);
    rec.output(&a.out_t2i);
    rec.finish(&a).write(&sidecar(&a.out_i2t))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut rec = Recorder::new("synth");
    let (corpus, images, captions) = corpus::synth_corpus(a.seed, a.topics, a.pairs_per_topic, a.dim)?;
    let all: Vec<usize> = (0..corpus.n_images()).collect();
    let (corpus, _) = corpus.subset(&all, a.split)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let caps_path = a.out_dir.join("captions.json");
    let img_path = a.out_dir.join("images.feat");
    let cap_feat_path = a.out_dir.join("captions.feat");
    corpus::write_corpus(&corpus, &caps_path)?;
    corpus::write_features(&images, &img_path)?;
    corpus::write_features(&captions, &cap_feat_path)?;
    for p in [&caps_path, &img_path, &cap_feat_path] {
        rec.output(p);
    }
    rec.finish(&a).write(&a.out_dir.join("synth.manifest.json"))
}
