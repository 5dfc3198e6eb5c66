use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use privdiag_core::fixedpoint::{quantize_model, CodecConfig, CodecError, DEFAULT_FRAC_BITS, DEFAULT_INT_BITS};
use privdiag_core::metrics::{self, Confusion, View};
use privdiag_core::model::{
    load_model, parse_sizes, save_model, synth_dataset, train, Architecture, Dataset, ModelError, Optimizer,
    TrainConfig,
};
use privdiag_core::paillier::{PaillierError, DEFAULT_KEY_BITS};
use privdiag_core::protocol::server::required_key_bits;
use privdiag_core::protocol::transport::{tcp_connect, tcp_listen};
use privdiag_core::protocol::{
    sweep_precision, Client, ClientConfig, Credentials, ProtocolError, Server, ServerConfig, SessionReport, SweepRow,
};

#[derive(Parser)]
#[command(name = "privdiag", version, about = "Encrypted before/after image ordering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic before/after image set
    GenData(GenDataArgs),
    /// Train a model and report held-out metrics on a cross-subject split
    Train(TrainArgs),
    /// Serve encrypted inference sessions
    Serve(ServeArgs),
    /// Order two images as before/after through an encrypted session
    Diagnose(DiagnoseArgs),
    /// Encrypted and plaintext accuracy for a range of fractional bits
    SweepPrecision(SweepArgs),
    /// Closed-form operation and traffic counts for a layer vector
    PredictCost(PredictArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Image set file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate a synthetic set with this seed
    #[arg(long)]
    synth: Option<u64>,
}

#[derive(Args)]
struct SynthShape {
    #[arg(long, default_value_t = 52)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    per_subject: usize,
}

#[derive(Args)]
struct Split {
    /// Share of subjects held out for testing
    #[arg(long, default_value_t = 0.5)]
    test_fraction: f64,
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    shape: SynthShape,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    shape: SynthShape,
    #[command(flatten)]
    split: Split,
    #[arg(long, default_value = "1024-128-32-2")]
    sizes: String,
    /// Hidden-layer activations, comma separated
    #[arg(long, default_value = "sigmoid,relu")]
    activations: String,
    #[arg(long, default_value = "adam")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Precision {
    #[arg(long, default_value_t = DEFAULT_FRAC_BITS)]
    frac_bits: u32,
    #[arg(long, default_value_t = DEFAULT_INT_BITS)]
    int_bits: u32,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    /// `uid:password` lines
    #[arg(long)]
    credentials: PathBuf,
    #[command(flatten)]
    precision: Precision,
    /// Refuse sessions whose modulus is smaller than this
    #[arg(long, default_value_t = 256)]
    min_key_bits: u64,
    /// Exit after this many sessions
    #[arg(long)]
    max_sessions: Option<usize>,
    /// Seed for the shuffle RNG
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PairSource {
    /// Two single-image files, D1 then D2
    #[arg(long, num_args = 2, value_names = ["D1", "D2"])]
    images: Option<Vec<PathBuf>>,
    /// Take the pair of one subject from an image set
    #[arg(long, requires = "subject")]
    pair_from: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    pair: PairSource,
    /// Subject id for --pair-from
    #[arg(long)]
    subject: Option<u32>,
    /// Send the subject's after image as D1
    #[arg(long)]
    swap: bool,
    #[arg(long)]
    server: String,
    #[arg(long)]
    uid: String,
    #[arg(long)]
    pwd: String,
    #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
    key_bits: u64,
    #[command(flatten)]
    precision: Precision,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    shape: SynthShape,
    #[command(flatten)]
    split: Split,
    #[arg(long, default_value_t = 1)]
    frac_min: u32,
    #[arg(long, default_value_t = 10)]
    frac_max: u32,
    #[arg(long, default_value_t = 256)]
    key_bits: u64,
    #[arg(long, default_value_t = DEFAULT_INT_BITS)]
    int_bits: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, default_value = "1024-128-32-2")]
    sizes: String,
    #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
    key_bits: u64,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Crypto(#[from] PaillierError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 3,
            CliError::Model(ModelError::Io(_) | ModelError::Parse { .. }) => 3,
            CliError::Model(ModelError::Config(_) | ModelError::DimensionMismatch { .. }) => 1,
            CliError::Model(_) | CliError::Codec(_) | CliError::Protocol(_) | CliError::Crypto(_) => 2,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Serve(a) => serve(a),
        Command::Diagnose(a) => diagnose(a),
        Command::SweepPrecision(a) => sweep(a),
        Command::PredictCost(a) => predict_cost(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn side_for(dim: usize) -> Result<usize, CliError> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim || side < 8 {
        return Err(usage(format!("input width {dim} is not a square image of side >= 8")));
    }
    Ok(side)
}

fn load_source(source: &Source, shape: &SynthShape, dim: usize) -> Result<Dataset, CliError> {
    match (&source.data, source.synth) {
        (Some(path), _) => Ok(Dataset::load(path)?),
        (None, Some(seed)) => {
            if shape.subjects == 0 || shape.per_subject == 0 {
                return Err(usage("--subjects and --per-subject must be positive"));
            }
            Ok(synth_dataset(seed, shape.subjects, shape.per_subject, side_for(dim)?))
        }
        (None, None) => Err(usage("one of --data or --synth is required")),
    }
}

fn check_fraction(split: &Split) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&split.test_fraction) || split.test_fraction == 0.0 {
        return Err(usage("--test-fraction must lie in (0, 1)"));
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    if a.side < 8 || a.shape.subjects == 0 || a.shape.per_subject == 0 {
        return Err(usage("--side must be at least 8 and counts positive"));
    }
    let ds = synth_dataset(a.seed, a.shape.subjects, a.shape.per_subject, a.side);
    ds.save(&a.out)?;
    println!("images,{},side,{},path,{}", ds.len(), ds.side, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    check_fraction(&a.split)?;
    let arch = Architecture::parse(&a.sizes, &a.activations).map_err(|e| usage(e.to_string()))?;
    let data = load_source(&a.source, &a.shape, arch.sizes[0])?;
    let (train_set, test_set) = data.split_by_subject(a.split.test_fraction, a.split.split_seed);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(usage("split left one side empty; adjust --test-fraction"));
    }
    let cfg = TrainConfig {
        optimizer: a.optimizer,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
    };
    let outcome = train(&train_set, &arch, &cfg)?;
    let predicted: Vec<usize> = test_set
        .images
        .iter()
        .map(|x| outcome.model.predict(x))
        .collect::<Result<_, _>>()?;
    let c = Confusion::from_labels(&predicted, &test_set.labels);
    save_model(&outcome.model, &a.out)?;
    println!("optimizer,epochs,train_loss,test_images,accuracy,precision,recall,f1");
    println!(
        "{},{},{:.6},{},{:.4},{:.4},{:.4},{:.4}",
        a.optimizer,
        a.epochs,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        test_set.len(),
        c.accuracy(),
        c.precision(),
        c.recall(),
        c.f1()
    );
    Ok(())
}

fn log_report(r: &SessionReport, sizes: &[usize]) {
    let t = r.total();
    let status = match &r.error {
        None => "ok".to_string(),
        Some(e) => e.to_string().replace(',', ";"),
    };
    println!(
        "session,{},{},{},{},{},{},{},{},{},{}",
        r.session_id,
        r.uid.as_deref().unwrap_or("-"),
        r.images.len(),
        t.server_modexp,
        t.server_modmul,
        t.bigints_s2c,
        t.bigints_c2s,
        r.bytes_sent,
        r.bytes_received,
        status
    );
    let _ = std::io::stdout().flush();
    for (i, image) in r.images.iter().enumerate() {
        let bits = image.modulus_bits;
        let (Ok(compute), Ok(comm)) = (metrics::predict_compute(sizes), metrics::predict_comm(sizes, bits)) else {
            continue;
        };
        let rec = metrics::reconcile(&image.counters, View::Server, &compute, &comm);
        match rec.check() {
            Ok(()) => info!(
                "session {} image {i}: counts match the closed forms, server exponentiation share {:.4}",
                r.session_id, rec.exp_share
            ),
            Err(e) => log::warn!("session {} image {i}: {e}\n{}", r.session_id, rec.to_csv()),
        }
    }
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let credentials = Credentials::load(&a.credentials).map_err(io_err(format!("{}", a.credentials.display())))?;
    let codec = CodecConfig::new(a.precision.frac_bits, a.precision.int_bits, a.min_key_bits)?;
    let q = quantize_model(&model, &codec)?;
    let sizes = q.layer_sizes();
    let floor = required_key_bits(&q, a.min_key_bits);
    let server = Server::new(
        q,
        credentials,
        ServerConfig {
            min_key_bits: a.min_key_bits,
            seed: a.seed,
            record: false,
        },
    )?;
    let listener = tcp_listen(&a.bind).map_err(|e| CliError::Protocol(e.into()))?;
    let addr = listener.local_addr().map_err(io_err("local address"))?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    ctrlc::set_handler(move || flag.store(true, AtomicOrdering::SeqCst))
        .map_err(|e| usage(format!("signal handler: {e}")))?;
    println!("listening,{addr},min_key_bits,{floor}");
    let _ = std::io::stdout().flush();
    info!("serving {} on {addr}", sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-"));
    let served = server
        .serve(listener, &shutdown, a.max_sessions, |r| log_report(&r, &sizes))
        .map_err(|e| CliError::Protocol(e.into()))?;
    println!("shutdown,sessions,{served}");
    Ok(())
}

fn load_single(path: &Path) -> Result<Vec<f64>, CliError> {
    let ds = Dataset::load(path)?;
    if ds.len() != 1 {
        return Err(usage(format!("{} holds {} images, expected 1", path.display(), ds.len())));
    }
    Ok(ds.images.into_iter().next().expect("one image"))
}

fn diagnose(a: DiagnoseArgs) -> Result<(), CliError> {
    let (mut d1, mut d2) = match (&a.pair.images, &a.pair.pair_from) {
        (Some(paths), _) => (load_single(&paths[0])?, load_single(&paths[1])?),
        (None, Some(path)) => {
            let subject = a.subject.ok_or_else(|| usage("--pair-from needs --subject"))?;
            let ds = Dataset::load(path)?;
            let (before, after) = ds
                .subject_pair(subject)
                .ok_or_else(|| usage(format!("subject {subject} has no before/after pair")))?;
            (before.to_vec(), after.to_vec())
        }
        (None, None) => return Err(usage("one of --images or --pair-from is required")),
    };
    if a.swap {
        std::mem::swap(&mut d1, &mut d2);
    }
    let mut cfg = ClientConfig::new(&a.uid, &a.pwd);
    cfg.key_bits = a.key_bits;
    cfg.frac_bits = a.precision.frac_bits;
    cfg.int_bits = a.precision.int_bits;
    cfg.seed = a.seed;
    let mut client = Client::new(cfg)?;
    let conn = tcp_connect(&a.server).map_err(ProtocolError::from)?;
    let dx = client.diagnose(conn, &d1, &d2).map_err(|e| {
        if !e.partial.is_empty() {
            log::warn!("aborted after {} completed image(s)", e.partial.len());
        }
        CliError::Protocol(e.error)
    })?;
    println!("{} R1={:.6} R2={:.6}", dx.ordering, dx.first.score(), dx.second.score());
    println!("image,bigints_s2c,bigints_c2s,bigints_total,payload_bits,frame_bytes,client_exp,client_mul");
    for (name, o) in [("D1", &dx.first), ("D2", &dx.second)] {
        let t = o.counters.total();
        println!(
            "{name},{},{},{},{},{},{},{}",
            t.bigints_s2c,
            t.bigints_c2s,
            t.bigints_s2c + t.bigints_c2s,
            8 * (t.payload_bytes_s2c + t.payload_bytes_c2s),
            t.bytes_s2c + t.bytes_c2s,
            t.client_modexp,
            t.client_modmul
        );
    }
    println!("session_bytes,{},{}", dx.bytes_sent, dx.bytes_received);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    check_fraction(&a.split)?;
    if a.frac_min == 0 || a.frac_min > a.frac_max {
        return Err(usage("need 1 <= --frac-min <= --frac-max"));
    }
    let model = load_model(&a.model)?;
    let data = load_source(&a.source, &a.shape, model.input_dim)?;
    let (_, test) = data.split_by_subject(a.split.test_fraction, a.split.split_seed);
    let fracs: Vec<u32> = (a.frac_min..=a.frac_max).collect();
    let rows = sweep_precision(&model, &test, &fracs, a.key_bits, a.int_bits, a.seed)?;
    println!("{}", SweepRow::CSV_HEADER);
    for r in &rows {
        println!("{}", r.to_csv());
    }
    Ok(())
}

fn predict_cost(a: PredictArgs) -> Result<(), CliError> {
    let sizes = parse_sizes(&a.sizes).map_err(|e| usage(e.to_string()))?;
    let compute = metrics::predict_compute(&sizes).map_err(|e| usage(e.to_string()))?;
    let comm = metrics::predict_comm(&sizes, a.key_bits).map_err(|e| usage(e.to_string()))?;
    print!("{}", metrics::prediction_csv(&compute, &comm));
    Ok(())
}
