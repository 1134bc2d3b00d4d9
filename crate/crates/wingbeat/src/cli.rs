//! The `wingbeat` command line.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error. Data goes to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use wingbeat_core::crowdsource::AggregationConfig;
use wingbeat_core::dataset::{LabeledSample, TrialConfig};
use wingbeat_core::dsp::{AudioBuffer, DspConfig};
use wingbeat_core::pipeline::{TwoStageConfig, TwoStageModel};
use wingbeat_core::stream::{batch_equivalent, DetectionEvent, StreamConfig, StreamMode, StreamSession};
use wingbeat_core::svm::KernelSpec;
use wingbeat_core::synth::{synth_corpus, SynthConfig};
use wingbeat_core::ClassId;

use crate::audio::{decode_wav_bytes, read_wav};
use crate::config::{augment_args, ConfigFile};
use crate::corpus::{featurize, load_corpus, read_features, write_corpus, write_features};
use crate::crowd::{clip_index, export, ingest, read_votes};
use crate::error::{io_err, Error, Result};
use crate::fsutil::{atomic_write_bytes, write_jsonl};
use crate::model_io::{load_model, save_model};
use crate::service::{AppState, ServiceConfig};
use crate::trials::{render, run_parallel, ReportFormat};

#[derive(Debug, Parser)]
#[command(
    name = "wingbeat",
    version,
    about = "Acoustic mosquito detection and species classification"
)]
pub struct Cli {
    /// Config file of `key = value` flag defaults, with optional `[subcommand]` sections.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Diagnostic verbosity on stderr.
    #[arg(long, global = true, default_value = "warn", value_name = "LEVEL")]
    pub log_level: tracing::Level,
    #[command(subcommand)]
    pub command: CommandKind,
}

#[derive(Debug, Subcommand)]
pub enum CommandKind {
    /// Generate the synthetic corpus of tone-complex species and noise background.
    SynthCorpus(SynthArgs),
    /// Label every clip of a corpus and write the feature cache.
    Extract(ExtractArgs),
    /// Train a two-stage model and write the model file.
    Train(TrainArgs),
    /// Run repeated balanced train/test trials and print the summary table.
    Trials(TrialsArgs),
    /// Classify every window of a WAV file; one JSON event per line.
    Detect(DetectArgs),
    /// Classify a live PCM stream from a file or stdin; one JSON event per line as windows complete.
    Stream(StreamArgs),
    /// Export model-flagged clips with spectrograms and a manifest for volunteer tagging.
    ExportCrowd(ExportArgs),
    /// Aggregate volunteer votes into crowd tags.
    IngestVotes(IngestArgs),
    /// Run the live detection service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output corpus directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of species.
    #[arg(long, default_value_t = 7)]
    pub n_species: usize,
    /// Recordings per class, background included.
    #[arg(long, default_value_t = 7)]
    pub recordings_per_class: usize,
    /// Length of each recording in seconds.
    #[arg(long, default_value_t = 2.0)]
    pub duration_s: f64,
    /// Signal-to-noise ratio of species recordings in dB.
    #[arg(long, default_value_t = 10.0)]
    pub snr_db: f64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CorpusSource {
    /// Corpus directory with recordings.jsonl, tags.jsonl and audio.
    #[arg(
        long,
        value_name = "DIR",
        conflicts_with = "features",
        required_unless_present = "features"
    )]
    pub corpus: Option<PathBuf>,
    /// Feature cache written by `extract`.
    #[arg(long, value_name = "FILE")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Feature cache to write (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Class name for untagged clips.
    #[arg(long, default_value = "background")]
    pub background: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// SVM box constraint.
    #[arg(long, default_value_t = 10.0)]
    pub c: f64,
    /// Kernel for both stages.
    #[arg(long, value_enum, default_value_t = KernelKind::Rbf)]
    pub kernel: KernelKind,
    /// RBF width; by default 1 / (dimension * variance) of the normalized training features.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Stage-1 scores above this count as mosquito.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Class name for untagged clips.
    #[arg(long, default_value = "background")]
    pub background: String,
}

impl ModelArgs {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(usage("--c must be positive"));
        }
        match (self.kernel, self.gamma) {
            (KernelKind::Linear, Some(_)) => Err(usage("--gamma applies only to the rbf kernel")),
            (_, Some(g)) if !(g > 0.0 && g.is_finite()) => Err(usage("--gamma must be positive")),
            _ => Ok(()),
        }
    }

    fn two_stage(&self) -> TwoStageConfig {
        let mut cfg = TwoStageConfig {
            threshold: self.threshold,
            background: ClassId::new(self.background.clone()),
            ..TwoStageConfig::default()
        };
        let kernel = match self.kernel {
            KernelKind::Linear => Some(KernelSpec::Linear),
            KernelKind::Rbf => self.gamma.map(|gamma| KernelSpec::Rbf { gamma }),
        };
        for stage in [&mut cfg.stage1, &mut cfg.stage2] {
            stage.c = self.c;
            stage.kernel = kernel;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: CorpusSource,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Model file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrialsArgs {
    #[command(flatten)]
    pub source: CorpusSource,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of trials.
    #[arg(long, default_value_t = 100)]
    pub n_trials: usize,
    /// Samples drawn per class in each trial.
    #[arg(long, default_value_t = 62)]
    pub per_class: usize,
    /// Fraction of each class used for training.
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    /// Label permutations for the macro-AUC p-value.
    #[arg(long, default_value_t = 1000)]
    pub permutations: usize,
    /// Base seed; trial t uses seed + t.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report format.
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Majority-vote length over raw window decisions (odd).
    #[arg(long, default_value_t = 3)]
    pub smoothing_k: usize,
    /// Attach this many log-energy bands to each event.
    #[arg(long)]
    pub bands: Option<usize>,
    /// Hop between windows in seconds.
    #[arg(long, default_value_t = 0.05)]
    pub hop_s: f64,
}

impl WindowArgs {
    fn stream_config(&self, sample_rate_hz: u32) -> StreamConfig {
        StreamConfig {
            sample_rate_hz,
            hop_s: self.hop_s,
            smoothing_k: self.smoothing_k,
            bands: self.bands,
            mode: StreamMode::RecordAndDetect,
            ..StreamConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Model file.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// WAV file to classify.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// WAV if the input starts with a RIFF header, raw PCM16LE otherwise.
    Auto,
    Wav,
    Pcm16,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Model file.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Audio source; `-` reads stdin.
    #[arg(long, value_name = "FILE", default_value = "-")]
    pub input: PathBuf,
    /// Input encoding.
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    pub format: InputFormat,
    /// Sample rate of raw PCM input.
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
    /// Samples per chunk fed to the session.
    #[arg(long, default_value_t = 400)]
    pub chunk_samples: usize,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Model file.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Extra audio context on both sides of each clip, in seconds.
    #[arg(long, default_value_t = 0.0)]
    pub padding_s: f64,
    /// Version string recorded in the manifest; defaults to the model file name.
    #[arg(long)]
    pub model_version: Option<String>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Votes as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub votes: PathBuf,
    /// Corpus the clip ids refer to.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Crowd tags to write (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the per-clip aggregated labels here.
    #[arg(long, value_name = "FILE")]
    pub labels_out: Option<PathBuf>,
    /// Votes a clip needs before it gets a label.
    #[arg(long, default_value_t = 3)]
    pub min_votes: usize,
    /// Yes fraction above which a clip is labelled mosquito.
    #[arg(long, default_value_t = 0.5)]
    pub yes_threshold: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model file.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Directory for the database and recordings.
    #[arg(long, value_name = "DIR")]
    pub data_dir: PathBuf,
    /// Listen address; port 0 picks a free port. The bound address is printed on stdout.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Per-session ring buffer length in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub ring_capacity_s: f64,
    /// Seconds of audio kept before a detection in record-on-detection mode.
    #[arg(long, default_value_t = 1.0)]
    pub pre_roll_s: f64,
    /// Seconds of audio kept after a detection in record-on-detection mode.
    #[arg(long, default_value_t = 2.0)]
    pub post_roll_s: f64,
    /// Comma-separated species vocabulary for metadata; defaults to the seven reference species and `unknown`.
    #[arg(long, value_delimiter = ',')]
    pub species_vocabulary: Option<Vec<String>>,
    /// Version string stored with sessions; defaults to the model file name.
    #[arg(long)]
    pub model_version: Option<String>,
    #[command(flatten)]
    pub window: WindowArgs,
}

/// Parses `argv` with config-file and environment defaults and runs the command.
pub fn run(argv: Vec<OsString>) -> i32 {
    let command = Cli::command();
    let matches = match command.clone().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => return print_clap_error(e),
    };
    let file = match matches
        .get_one::<PathBuf>("config")
        .map(|p| ConfigFile::load(p))
        .transpose()
    {
        Ok(f) => f,
        Err(e) => return report(&e),
    };
    let argv = match augment_args(&command, &matches, file.as_ref(), |k| std::env::var(k).ok(), argv) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let cli = match command
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => return print_clap_error(e),
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn print_clap_error(e: clap::Error) -> i32 {
    let _ = e.print();
    if e.use_stderr() {
        2
    } else {
        0
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

fn usage(message: impl Into<String>) -> Error {
    Error::Usage(message.into())
}

pub fn execute(command: CommandKind) -> Result<()> {
    match command {
        CommandKind::SynthCorpus(a) => synth(a),
        CommandKind::Extract(a) => extract(a),
        CommandKind::Train(a) => train(a),
        CommandKind::Trials(a) => trials(a),
        CommandKind::Detect(a) => detect(a),
        CommandKind::Stream(a) => stream(a),
        CommandKind::ExportCrowd(a) => export_crowd(a),
        CommandKind::IngestVotes(a) => ingest_votes(a),
        CommandKind::Serve(a) => serve(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_species: a.n_species,
        recordings_per_class: a.recordings_per_class,
        recording_duration_s: a.duration_s,
        snr_db: a.snr_db,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = synth_corpus(&cfg)?;
    write_corpus(&a.out, &corpus.recordings, &corpus.tags)?;
    eprintln!(
        "wrote {} recordings of {} species to {}",
        corpus.recordings.len(),
        corpus.species.len(),
        a.out.display()
    );
    Ok(())
}

fn samples_from(source: &CorpusSource, background: &str) -> Result<Vec<LabeledSample>> {
    match (&source.corpus, &source.features) {
        (_, Some(f)) => read_features(f),
        (Some(dir), None) => {
            let (samples, discarded) = featurize(&load_corpus(dir)?, &ClassId::new(background), &DspConfig::default())?;
            if discarded > 0 {
                eprintln!("{discarded} clips with tied tags discarded");
            }
            Ok(samples)
        }
        (None, None) => Err(usage("give --corpus or --features")),
    }
}

fn extract(a: ExtractArgs) -> Result<()> {
    let (samples, discarded) = featurize(
        &load_corpus(&a.corpus)?,
        &ClassId::new(a.background),
        &DspConfig::default(),
    )?;
    write_features(&a.out, &samples)?;
    eprintln!("wrote {} samples ({discarded} clips discarded)", samples.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    a.model.validate()?;
    let samples = samples_from(&a.source, &a.model.background)?;
    let model = wingbeat_core::dataset::train_on(&samples, &a.model.two_stage().with_seed(a.seed))?;
    save_model(&a.out, &model)?;
    eprintln!(
        "trained on {} samples: {} species, {} stage-1 support vectors",
        samples.len(),
        model.species_list.len(),
        model.stage1.support_vectors.len()
    );
    Ok(())
}

fn trials(a: TrialsArgs) -> Result<()> {
    a.model.validate()?;
    if a.n_trials == 0 || a.per_class == 0 {
        return Err(usage("--n-trials and --per-class must be positive"));
    }
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(usage("--train-fraction must be in (0, 1)"));
    }
    let samples = samples_from(&a.source, &a.model.background)?;
    let config = TrialConfig {
        per_class: a.per_class,
        train_fraction: a.train_fraction,
        n_permutations: a.permutations,
        model: a.model.two_stage(),
        classes: None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| usage(format!("thread pool: {e}")))?;
    let report = pool.install(|| run_parallel(&samples, a.n_trials, a.seed, &config))?;
    let text = render(&report, a.format);
    match &a.out {
        Some(path) => atomic_write_bytes(path, text.as_bytes()),
        None => write_stdout(text.as_bytes()),
    }
}

fn write_stdout(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes)
        .and_then(|_| out.flush())
        .map_err(io_err("<stdout>"))
}

fn write_event(out: &mut impl Write, e: &DetectionEvent) -> Result<()> {
    serde_json::to_writer(&mut *out, e).expect("event serializes");
    out.write_all(b"\n").map_err(io_err("<stdout>"))
}

fn load_for_window(model: &Path, window: &WindowArgs) -> Result<TwoStageModel> {
    let m = load_model(model)?;
    window
        .stream_config(8000)
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    Ok(m)
}

fn detect(a: DetectArgs) -> Result<()> {
    let model = load_for_window(&a.model, &a.window)?;
    let audio = read_wav(&a.input)?;
    let events = batch_equivalent(&model, &audio, &a.window.stream_config(audio.sample_rate_hz()))?;
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for e in &events {
        write_event(&mut out, e)?;
    }
    out.flush().map_err(io_err("<stdout>"))
}

fn open_input(path: &Path) -> Result<Box<dyn Read>> {
    if path == Path::new("-") {
        Ok(Box::new(std::io::stdin().lock()))
    } else {
        Ok(Box::new(std::fs::File::open(path).map_err(io_err(path))?))
    }
}

fn stream(a: StreamArgs) -> Result<()> {
    if a.chunk_samples == 0 {
        return Err(usage("--chunk-samples must be positive"));
    }
    let model = Arc::new(load_for_window(&a.model, &a.window)?);
    let mut reader = BufReader::new(open_input(&a.input)?);
    let is_wav = match a.format {
        InputFormat::Wav => true,
        InputFormat::Pcm16 => false,
        InputFormat::Auto => reader.fill_buf().map_err(io_err(&a.input))?.starts_with(b"RIFF"),
    };
    let mut out = std::io::stdout().lock();
    let mut emit = |session: &mut StreamSession| -> Result<()> {
        for e in session.poll_detections()? {
            write_event(&mut out, &e)?;
        }
        out.flush().map_err(io_err("<stdout>"))
    };
    if is_wav {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(io_err(&a.input))?;
        let audio: AudioBuffer = decode_wav_bytes(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: a.input.clone(),
                message,
            },
            other => other,
        })?;
        let mut session = StreamSession::new(model, a.window.stream_config(audio.sample_rate_hz()))?;
        for start in (0..audio.len()).step_by(a.chunk_samples) {
            session.push_audio(&audio.slice(start, (start + a.chunk_samples).min(audio.len())))?;
            emit(&mut session)?;
        }
        session.close()?;
        return Ok(());
    }
    let mut session = StreamSession::new(model, a.window.stream_config(a.sample_rate))?;
    let mut buf = vec![0u8; a.chunk_samples * 2];
    let mut carry: Option<u8> = None;
    loop {
        let n = reader.read(&mut buf).map_err(io_err(&a.input))?;
        if n == 0 {
            break;
        }
        let mut bytes: Vec<u8> = carry.take().into_iter().collect();
        bytes.extend_from_slice(&buf[..n]);
        if bytes.len() % 2 == 1 {
            carry = bytes.pop();
        }
        let pcm: Vec<i16> = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        session.push_pcm16(&pcm)?;
        emit(&mut session)?;
    }
    if carry.is_some() {
        tracing::warn!("input ended with half a sample; ignored");
    }
    session.close()?;
    Ok(())
}

fn version_of(path: &Path, explicit: Option<String>) -> String {
    explicit.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    })
}

fn export_crowd(a: ExportArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let version = version_of(&a.model, a.model_version);
    let outcome = export(&model, &corpus.recordings, &a.out, &version, a.padding_s)?;
    eprintln!(
        "exported {} clips from {} recordings",
        outcome.manifest.len(),
        corpus.recordings.len()
    );
    if outcome.failures.is_empty() {
        return Ok(());
    }
    for (id, reason) in &outcome.failures {
        eprintln!("recording {id}: {reason}");
    }
    Err(Error::Format {
        path: a.corpus,
        message: format!("{} recordings failed to export", outcome.failures.len()),
    })
}

fn ingest_votes(a: IngestArgs) -> Result<()> {
    let config = AggregationConfig {
        min_votes: a.min_votes,
        yes_threshold: a.yes_threshold,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let votes = read_votes(&a.votes)?;
    let corpus = load_corpus(&a.corpus)?;
    let outcome = ingest(&votes, &clip_index(&corpus.recordings), &config)?;
    write_jsonl(&a.out, &outcome.tags)?;
    if let Some(path) = &a.labels_out {
        write_jsonl(path, &outcome.labels)?;
    }
    eprintln!(
        "{} votes, {} clips labelled, {} crowd tags, {} unknown clip ids",
        votes.len(),
        outcome.labels.len(),
        outcome.tags.len(),
        outcome.unknown_clips.len()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut config = ServiceConfig::new(a.data_dir.clone());
    config.stream = StreamConfig {
        ring_capacity_s: a.ring_capacity_s,
        pre_roll_s: a.pre_roll_s,
        post_roll_s: a.post_roll_s,
        ..a.window.stream_config(8000)
    };
    config.stream.validate().map_err(|e| usage(e.to_string()))?;
    if let Some(v) = a.species_vocabulary {
        config.species_vocabulary = v.into_iter().map(|s| s.trim().to_string()).collect();
    }
    config.model_version = version_of(&a.model, a.model_version);
    let state = AppState::open(model, config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io_err("<runtime>"))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .map_err(io_err(a.addr.to_string()))?;
        let bound = listener.local_addr().map_err(io_err(a.addr.to_string()))?;
        println!("{bound}");
        let _ = std::io::stdout().flush();
        tracing::info!(%bound, "listening");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        crate::service::serve(listener, state, shutdown)
            .await
            .map_err(io_err(bound.to_string()))
    })?;
    Ok(())
}
