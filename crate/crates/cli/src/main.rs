use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use subuda::eval::{
    ablation_suite, consensus_cdf_auc, delta_auc_elbow, encode, evaluate, AblationVariant, ConsensusConfig,
    EvalOptions,
};
use subuda::gradcheck::{gradcheck, GradCheckConfig};
use subuda::io::{self, FeatureRow};
use subuda::linalg::Matrix;
use subuda::nn::{Checkpoint, EncoderParams};
use subuda::prototypes::{class_centroids, pseudo_label};
use subuda::rng::Rng;
use subuda::subtype::ClusterMode;
use subuda::synth::{generate_domain_pair, generate_test_set, preset, Dataset, Domain, DomainShiftSpec, LabeledSample};
use subuda::trainer::{default_encoder, run, TrainConfig};

/// Subtype-aware dynamic domain adaptation on synthetic data.
#[derive(Parser)]
#[command(name = "subuda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a source/target training set and a labelled target test set.
    Generate(GenerateArgs),
    /// Train an encoder; writes a metrics CSV and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints a JSON report.
    Eval(EvalArgs),
    /// Run the ablation grid on a preset; writes a comparison CSV.
    Ablate(AblateArgs),
    /// Consensus clustering CDF/AUC table of a features CSV.
    Consensus(ConsensusArgs),
    /// Finite-difference gradient checks; exit status 1 on failure.
    Gradcheck(GradcheckArgs),
    /// Encode the training pools with a checkpoint and write a features CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Training CSV (`id,domain,class,true_subtype,x0..`), source and target rows.
    #[arg(long)]
    data: PathBuf,
    /// Labelled target test CSV, same layout.
    #[arg(long)]
    test: PathBuf,
    /// Number of classes; defaults to the largest source label plus one.
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Named preset; `a+b` combines two.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Domain-shift spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Test CSV to write.
    #[arg(long)]
    test_out: PathBuf,
    /// Also write the resolved spec as JSON.
    #[arg(long)]
    spec_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Subtypes per class for K-means mode, e.g. `2,3,4`.
    #[arg(long, value_delimiter = ',')]
    subtypes: Option<Vec<usize>>,
    /// Overrides the config's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV to write.
    #[arg(long)]
    metrics: PathBuf,
    /// Checkpoint JSON to write.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dump the final queue as a features CSV.
    #[arg(long)]
    queue_dump: Option<PathBuf>,
    /// Dump final clusters to `<prefix>_members.csv` and `<prefix>_centroids.csv`.
    #[arg(long)]
    clusters_dump: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config whose cluster settings are used to count subtypes.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    subtypes: Option<Vec<usize>>,
    /// Largest K of the per-class consensus curves; 0 skips them.
    #[arg(long, default_value_t = 6)]
    consensus_k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    preset: String,
    /// First seed; runs use `seed..seed + runs`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    runs: u64,
    /// Comma-separated variant names; all seven by default.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<AblationVariant>>,
    /// Base training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConsensusArgs {
    /// Features CSV (`id,domain,class,pseudo,f0..`).
    #[arg(long)]
    features: PathBuf,
    /// Keep rows of this domain only.
    #[arg(long)]
    domain: Option<Domain>,
    /// Keep rows whose class (source) or pseudo-label (target) equals this.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = 6)]
    k_max: usize,
    #[arg(long, default_value_t = 50)]
    resamples: usize,
    #[arg(long, default_value_t = 0.8)]
    subsample_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent draws per suite.
    #[arg(long, default_value_t = 3)]
    runs: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Accepted for uniformity; encoding in eval mode draws no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    io::read_dataset(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let train = read_samples(&args.data)?;
    let test = read_samples(&args.test)?;
    let (source, target): (Vec<_>, Vec<_>) = train.into_iter().partition(|s| s.domain == Domain::Source);
    let n = match args.num_classes {
        Some(n) => n,
        None => source.iter().map(|s| s.class_label + 1).max().context("no source rows")?,
    };
    Ok(Dataset::from_samples(n, &source, &target, &test)?)
}

fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Reads a config, filling the encoder for `input_dim` when the file omits it.
fn load_config(path: Option<&Path>, input_dim: usize) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig { encoder: default_encoder(input_dim), ..TrainConfig::default() });
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let has_encoder = value.get("encoder").is_some();
    let mut config = TrainConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !has_encoder {
        config.encoder = default_encoder(input_dim);
    }
    Ok(config)
}

fn resolve_subtypes(config: &mut TrainConfig, subtypes: Option<Vec<usize>>, num_classes: usize) -> Result<()> {
    if let Some(k) = subtypes {
        config.cluster.subtypes_per_class = k;
    }
    if config.beta > 0.0 && config.cluster.mode == ClusterMode::KMeans && config.cluster.subtypes_per_class.is_empty() {
        bail!("K-means mode needs subtypes per class: pass --subtypes or set cluster.subtypes_per_class ({num_classes} classes)");
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let spec = match (&a.preset, &a.spec) {
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => DomainShiftSpec::from_json(&fs::read_to_string(path)?)?,
        _ => bail!("give exactly one of --preset or --spec"),
    };
    let (source, target) = generate_domain_pair(&spec, a.seed)?;
    let test = generate_test_set(&spec, a.seed)?;
    let train: Vec<LabeledSample> = source.into_iter().chain(target).collect();
    io::write_dataset(create(&a.out)?, &train)?;
    io::write_dataset(create(&a.test_out)?, &test)?;
    if let Some(p) = &a.spec_out {
        fs::write(p, spec.to_json()? + "\n")?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let mut config = load_config(a.config.as_deref(), data.input_dim())?;
    resolve_subtypes(&mut config, a.subtypes, data.num_classes)?;
    if let Some(n) = a.iterations {
        config.total_iterations = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let out = run(&config, &data)?;
    io::write_metrics(create(&a.metrics)?, &out.metrics)?;
    fs::write(&a.checkpoint, Checkpoint::from_params(&out.state.params).to_json()? + "\n")?;

    if let Some(p) = &a.queue_dump {
        let rows: Vec<FeatureRow> = out
            .state
            .queue
            .slots()
            .flat_map(|s| &s.records)
            .map(|r| FeatureRow {
                id: r.sample_id,
                domain: r.domain,
                class: r.source_label,
                pseudo: r.pseudo_class,
                feature: r.feature.clone(),
            })
            .collect();
        io::write_features(create(p)?, &rows)?;
    }
    if let Some(prefix) = &a.clusters_dump {
        let window = out.state.queue.window();
        let clusters = out.state.memory.as_ref().map(|m| m.clusters.as_slice()).unwrap_or(&[]);
        let with_suffix = |s: &str| {
            let mut name = prefix.as_os_str().to_owned();
            name.push(s);
            PathBuf::from(name)
        };
        io::write_cluster_members(create(&with_suffix("_members.csv"))?, clusters, &window.source_ids, &window.target_ids)?;
        io::write_cluster_centroids(create(&with_suffix("_centroids.csv"))?, clusters)?;
    }
    if let Some(last) = out.metrics.last() {
        eprintln!("iteration {}: target accuracy {:.4}", last.iteration, last.target_acc);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let cluster = if a.config.is_some() || a.subtypes.is_some() {
        let mut c = load_config(a.config.as_deref(), data.input_dim())?;
        resolve_subtypes(&mut c, a.subtypes, data.num_classes)?;
        Some(c.cluster)
    } else {
        None
    };
    let opts = EvalOptions { consensus_k_max: a.consensus_k_max, cluster, ..EvalOptions::default() };
    let report = evaluate(&params, &data, &opts, &mut Rng::new(a.seed))?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let spec = preset(&a.preset)?;
    let mut base = load_config(a.config.as_deref(), spec.input_dim)?;
    if base.cluster.subtypes_per_class.is_empty() {
        base.cluster.subtypes_per_class = spec.subtypes_per_class.clone();
    }
    if let Some(n) = a.iterations {
        base.total_iterations = n;
    }
    base.eval_every = 0;
    let seeds: Vec<u64> = (a.seed..a.seed + a.runs).collect();
    let variants = a.variants.unwrap_or_else(|| AblationVariant::ALL.to_vec());
    let rows = ablation_suite(&spec, &seeds, &base, &variants)?;
    io::write_ablation(create(&a.out)?, &rows, &seeds)?;
    for r in &rows {
        eprintln!("{:16} {:.4} ± {:.4}", r.variant.to_string(), r.mean, r.sd);
    }
    Ok(())
}

fn cmd_consensus(a: ConsensusArgs) -> Result<()> {
    let f = File::open(&a.features).with_context(|| format!("opening {}", a.features.display()))?;
    let rows: Vec<FeatureRow> = io::read_features(BufReader::new(f))?
        .into_iter()
        .filter(|r| a.domain.is_none_or(|d| r.domain == d))
        .filter(|r| a.class.is_none_or(|c| r.class.or(r.pseudo) == Some(c)))
        .collect();
    if rows.len() < 2 {
        bail!("need at least two feature rows after filtering, have {}", rows.len());
    }
    let points: Matrix = io::feature_matrix(&rows)?;
    let ks: Vec<usize> = (1..=a.k_max.min(points.rows())).collect();
    let cfg = ConsensusConfig { resamples: a.resamples, subsample_frac: a.subsample_frac, ..ConsensusConfig::default() };
    let table = consensus_cdf_auc(&points, &ks, &cfg, &mut Rng::new(a.seed))?;
    io::write_consensus(create(&a.out)?, &table)?;
    if let Some(k) = delta_auc_elbow(&table) {
        eprintln!("elbow at K = {k}");
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    println!("suite,run,term,value,max_rel_error,checked,skipped,status");
    for (name, cfg) in GradCheckConfig::suites() {
        for run in 0..a.runs {
            let report = gradcheck(&cfg, &mut Rng::substream(a.seed, run))?;
            for t in &report.terms {
                let pass = t.max_rel_error < a.tolerance && t.skipped * 100 <= report.num_params;
                ok &= pass;
                println!(
                    "{name},{run},{},{},{:e},{},{},{}",
                    t.term,
                    t.value,
                    t.max_rel_error,
                    t.checked,
                    t.skipped,
                    if pass { "pass" } else { "FAIL" }
                );
            }
        }
    }
    Ok(ok)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let fs_ = encode(&params, &data.source.x)?;
    let ft = encode(&params, &data.target.x)?;
    let centroids = class_centroids(&fs_, &data.source.labels, data.num_classes)?;
    let pseudo = pseudo_label(&ft, &centroids)?;
    let mut rows = Vec::with_capacity(fs_.rows() + ft.rows());
    for (i, f) in fs_.row_iter().enumerate() {
        rows.push(FeatureRow {
            id: data.source.ids[i],
            domain: Domain::Source,
            class: Some(data.source.labels[i]),
            pseudo: None,
            feature: f.to_vec(),
        });
    }
    for (i, f) in ft.row_iter().enumerate() {
        rows.push(FeatureRow { id: data.target.ids[i], domain: Domain::Target, class: None, pseudo: Some(pseudo[i]), feature: f.to_vec() });
    }
    io::write_features(create(&a.out)?, &rows)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Consensus(a) => cmd_consensus(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::ExportFeatures(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
