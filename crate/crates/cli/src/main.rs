use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lemon_kge::clustering::{kmeans_fit_seeded, KMeansParams};
use lemon_kge::evaluation::{evaluate, rank_all};
use lemon_kge::kg_data::{build_true_index, EntityTextTable, Triple, TripleStore, Vocab};
use lemon_kge::kge_models::{KgeModel, LossMode, ModelKind, Norm};
use lemon_kge::lemb;
use lemon_kge::rng::{stream_rng, Stream};
use lemon_kge::sampling::{NegativeSampler, Strategy};
use lemon_kge::text_embedding::{fallback_embed, pca_fit, read_label_lines, write_label_lines, EmbeddingMatrix};
use lemon_kge::trainer::{build_neighborhood, prepare_embeddings, train, NeighborhoodParams, TrainConfig, TrainLog};

mod report;

#[derive(Debug, Parser)]
#[command(
    name = "lemon",
    version,
    about = "Cluster-guided negative sampling for knowledge graph embedding"
)]
struct Cli {
    /// Master seed for every random stream. For `train` and `sample-dump` it
    /// overrides the config's seed when given.
    #[arg(long, global = true, default_value = "from config, else 0")]
    seed: SeedArg,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

/// A seed that remembers whether it was set on the command line.
#[derive(Debug, Clone, Copy)]
struct SeedArg(Option<u64>);

impl std::str::FromStr for SeedArg {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "from config, else 0" {
            return Ok(SeedArg(None));
        }
        s.parse().map(|v| SeedArg(Some(v)))
    }
}

impl SeedArg {
    fn or_zero(self) -> u64 {
        self.0.unwrap_or(0)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Hash entity texts into fixed-width vectors (no language model needed).
    EmbedFallback(EmbedFallbackArgs),
    /// Project an embedding matrix onto its leading principal components.
    Pca(PcaArgs),
    /// Reduce with PCA, then cluster with K-means++.
    Cluster(ClusterArgs),
    /// Train a model from a JSON config; flags override config values.
    Train(TrainArgs),
    /// Rank a test split with a saved checkpoint.
    Eval(EvalArgs),
    /// Print sorted centroid distances and sampled negatives for one triple.
    SampleDump(SampleDumpArgs),
    /// Compare final metrics of several run logs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct EmbedFallbackArgs {
    /// Entity text TSV: `label<TAB>text` per line. Required.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output LEMB matrix. Required.
    #[arg(long)]
    out: PathBuf,
    /// Output label file, one label per row of the matrix. Required.
    #[arg(long)]
    labels_out: PathBuf,
    /// Vector width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

#[derive(Debug, Args)]
struct PcaArgs {
    /// Input LEMB matrix. Required.
    #[arg(long = "in")]
    input: PathBuf,
    /// Number of components.
    #[arg(long, default_value_t = 2)]
    z: usize,
    /// Output LEMB matrix of reduced rows. Required.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Input LEMB matrix. Required.
    #[arg(long = "in")]
    input: PathBuf,
    /// Label file aligned with the matrix rows. Required.
    #[arg(long)]
    labels: PathBuf,
    /// Number of clusters. Required.
    #[arg(long)]
    k: usize,
    /// PCA components kept before clustering.
    #[arg(long, default_value_t = 2)]
    z: usize,
    /// Lloyd iteration cap.
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Stop once no centroid moves farther than this.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Output directory for the cluster model. Required.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run config (flat object of training fields). Required.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// Each flag replaces the matching config field when present.
#[derive(Debug, Args)]
struct Overrides {
    /// transe, distmult or rotate.
    #[arg(long, default_value = "from config")]
    model: Override<ModelKind>,
    /// Embedding width.
    #[arg(long, default_value = "from config")]
    dim: Override<usize>,
    /// Margin.
    #[arg(long, default_value = "from config")]
    gamma: Override<f64>,
    /// Adam learning rate.
    #[arg(long, default_value = "from config")]
    lr: Override<f64>,
    /// Self-adversarial temperature.
    #[arg(long, default_value = "from config")]
    temperature: Override<f64>,
    /// plain or self_adversarial.
    #[arg(long, default_value = "from config")]
    loss_mode: Override<LossModeArg>,
    /// l1 or l2.
    #[arg(long, default_value = "from config")]
    norm: Override<NormArg>,
    /// Positives per batch.
    #[arg(long, default_value = "from config")]
    batch_size: Override<usize>,
    /// Negatives per positive.
    #[arg(long, default_value = "from config")]
    num_negatives: Override<usize>,
    /// uniform or lemon.
    #[arg(long, default_value = "from config")]
    strategy: Override<Strategy>,
    /// K-means cluster count.
    #[arg(long, default_value = "from config")]
    clusters: Override<usize>,
    /// Nearest clusters eligible for negatives.
    #[arg(long, default_value = "from config")]
    hops: Override<usize>,
    /// PCA components.
    #[arg(long, default_value = "from config")]
    reduced_dim: Override<usize>,
    /// Maximum centroid distance for eligible clusters.
    #[arg(long, default_value = "from config")]
    d_max: Override<f64>,
    /// Redraw negatives that are known training triples (true or false).
    #[arg(long, default_value = "from config")]
    filter_true: Override<bool>,
    /// Step budget; replaces any epoch budget.
    #[arg(long, default_value = "from config")]
    max_steps: Override<u64>,
    /// Epoch budget; replaces any step budget.
    #[arg(long, default_value = "from config")]
    epochs: Override<u64>,
    /// Validation period in steps.
    #[arg(long, default_value = "from config")]
    eval_every: Override<u64>,
    /// Step of the first tenfold learning-rate cut.
    #[arg(long, default_value = "from config")]
    warm_up_steps: Override<u64>,
    /// Directory for checkpoints and the run log.
    #[arg(long, default_value = "from config")]
    output_dir: Override<PathBuf>,
    /// Run name used in reports.
    #[arg(long, default_value = "from config")]
    run_name: Override<String>,
}

/// A flag value, or a marker meaning "keep the config value".
#[derive(Debug, Clone)]
struct Override<T>(Option<T>);

impl<T: std::str::FromStr> std::str::FromStr for Override<T> {
    type Err = T::Err;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "from config" {
            return Ok(Override(None));
        }
        s.parse().map(|v| Override(Some(v)))
    }
}

#[derive(Debug, Clone, Copy)]
struct LossModeArg(LossMode);

impl std::str::FromStr for LossModeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(s.into())
            .map(LossModeArg)
            .map_err(|_| format!("unknown loss mode `{s}` (expected plain or self_adversarial)"))
    }
}

#[derive(Debug, Clone, Copy)]
struct NormArg(Norm);

impl std::str::FromStr for NormArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(s.into())
            .map(NormArg)
            .map_err(|_| format!("unknown norm `{s}` (expected l1 or l2)"))
    }
}

impl Overrides {
    fn apply(&self, c: &mut TrainConfig) {
        fn set<T: Clone>(slot: &mut T, o: &Override<T>) {
            if let Some(v) = &o.0 {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, o: &Override<T>) {
            if let Some(v) = &o.0 {
                *slot = Some(v.clone());
            }
        }
        set(&mut c.model, &self.model);
        set(&mut c.dim, &self.dim);
        set(&mut c.gamma, &self.gamma);
        set(&mut c.lr, &self.lr);
        set(&mut c.temperature, &self.temperature);
        if let Some(m) = self.loss_mode.0 {
            c.loss_mode = m.0;
        }
        if let Some(n) = self.norm.0 {
            c.norm = n.0;
        }
        set(&mut c.batch_size, &self.batch_size);
        set(&mut c.num_negatives, &self.num_negatives);
        set(&mut c.strategy, &self.strategy);
        set_opt(&mut c.clusters, &self.clusters);
        set_opt(&mut c.hops, &self.hops);
        set_opt(&mut c.reduced_dim, &self.reduced_dim);
        set_opt(&mut c.d_max, &self.d_max);
        set(&mut c.filter_true, &self.filter_true);
        if let Some(s) = self.max_steps.0 {
            c.max_steps = Some(s);
            c.epochs = None;
        }
        if let Some(e) = self.epochs.0 {
            c.epochs = Some(e);
            c.max_steps = None;
        }
        set(&mut c.eval_every, &self.eval_every);
        set_opt(&mut c.warm_up_steps, &self.warm_up_steps);
        set_opt(&mut c.output_dir, &self.output_dir);
        set_opt(&mut c.run_name, &self.run_name);
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`. Required.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding train.txt, valid.txt and test.txt. Required.
    #[arg(long)]
    data: PathBuf,
    /// Split to rank: test or valid.
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional TSV of per-query ranks.
    #[arg(long, default_value = "none")]
    ranks_out: PathBuf,
}

#[derive(Debug, Args)]
struct SampleDumpArgs {
    /// JSON run config naming data, embeddings and sampler settings. Required.
    #[arg(long)]
    config: PathBuf,
    /// Head label. Required.
    #[arg(long)]
    head: String,
    /// Relation label. Required.
    #[arg(long)]
    relation: String,
    /// Tail label. Required.
    #[arg(long)]
    tail: String,
    /// Negatives to draw; 0 keeps the config value.
    #[arg(long, default_value_t = 0)]
    num_negatives: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run logs (JSON lines); the first is the reference for deltas. Required.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
}

/// Bad input detected before any heavy work; exits with 1.
#[derive(Debug)]
struct Validation(String);

impl std::fmt::Display for Validation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Validation(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(invalid(format!("{what} `{}` does not exist", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<Validation>().is_some()
                || e.downcast_ref::<lemon_kge::Error>()
                    .is_some_and(lemon_kge::Error::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::EmbedFallback(a) => embed_fallback(a, cli.seed.or_zero()),
        Command::Pca(a) => pca(a),
        Command::Cluster(a) => cluster(a, cli.seed.or_zero()),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::SampleDump(a) => sample_dump(a, cli.seed),
        Command::Report(a) => {
            for log in &a.logs {
                require_file(log, "run log")?;
            }
            let logs = a
                .logs
                .iter()
                .map(|p| TrainLog::load(p).map(|log| (p.clone(), log)))
                .collect::<lemon_kge::Result<Vec<_>>>()?;
            print!("{}", report::render(&logs)?);
            Ok(())
        }
    }
}

fn read_text_tsv(path: &Path) -> anyhow::Result<(Vec<String>, Vec<String>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = Vec::new();
    let mut texts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').unwrap_or((line, line));
        if label.is_empty() {
            bail!("{}:{}: empty label", path.display(), i + 1);
        }
        labels.push(label.to_owned());
        texts.push(body.to_owned());
    }
    Ok((labels, texts))
}

fn embed_fallback(a: EmbedFallbackArgs, seed: u64) -> anyhow::Result<()> {
    require_file(&a.input, "text file")?;
    if a.dim < 2 {
        return Err(invalid("--dim must be >= 2"));
    }
    let (labels, texts) = read_text_tsv(&a.input)?;
    Vocab::from_labels(&labels)?;
    let emb = fallback_embed(&EntityTextTable::from_texts(texts), a.dim, seed)?;
    emb.save_lemb(&a.out)?;
    write_label_lines(&a.labels_out, &labels)?;
    println!("wrote {} x {} to {}", emb.rows(), emb.cols(), a.out.display());
    Ok(())
}

fn load_matrix(path: &Path) -> anyhow::Result<EmbeddingMatrix> {
    require_file(path, "matrix")?;
    Ok(EmbeddingMatrix::from_lemb(&lemb::read_file(path)?)?)
}

fn check_z(z: usize, x: &EmbeddingMatrix) -> anyhow::Result<()> {
    let max = x.cols().min(x.rows().saturating_sub(1));
    if z == 0 || z > max {
        return Err(invalid(format!(
            "--z must be in 1..={max} for a {}x{} matrix",
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

fn pca(a: PcaArgs) -> anyhow::Result<()> {
    let x = load_matrix(&a.input)?;
    check_z(a.z, &x)?;
    let model = pca_fit(&x, a.z)?;
    let reduced = model.transform(&x)?;
    reduced.save_lemb(&a.out)?;
    let total: f64 = model.explained_variance.iter().sum();
    println!("kept {} components, variance {total:.6}", a.z);
    Ok(())
}

fn cluster(a: ClusterArgs, seed: u64) -> anyhow::Result<()> {
    require_file(&a.labels, "label file")?;
    let x = load_matrix(&a.input)?;
    check_z(a.z, &x)?;
    if a.k == 0 || a.k > x.rows() {
        return Err(invalid(format!("--k must be in 1..={}", x.rows())));
    }
    let labels = read_label_lines(&a.labels)?;
    if labels.len() != x.rows() {
        return Err(invalid(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let reduced = pca_fit(&x, a.z)?.transform(&x)?;
    let params = KMeansParams {
        k: a.k,
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let model = kmeans_fit_seeded(&reduced, &params, seed)?;
    model.save(&a.out)?;
    reduced.save_lemb(a.out.join("reduced.lemb"))?;
    write_label_lines(a.out.join("labels.txt"), &labels)?;
    println!(
        "k={} inertia={:.6} iterations={} -> {}",
        model.k(),
        model.inertia,
        model.iterations_run,
        a.out.display()
    );
    Ok(())
}

fn load_config(path: &Path, seed: SeedArg) -> anyhow::Result<TrainConfig> {
    require_file(path, "config")?;
    let mut config = TrainConfig::from_file(path)?;
    if let Some(s) = seed.0 {
        config.seed = s;
    }
    Ok(config)
}

fn check_data_files(config: &TrainConfig) -> anyhow::Result<()> {
    require_file(&config.train_path, "train file")?;
    require_file(&config.valid_path, "valid file")?;
    require_file(&config.test_path, "test file")?;
    for (p, what) in [
        (&config.entity_text_path, "entity text file"),
        (&config.embedding_path, "embedding file"),
        (&config.embedding_labels_path, "embedding label file"),
    ] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: SeedArg) -> anyhow::Result<()> {
    let mut config = load_config(&a.config, seed)?;
    a.overrides.apply(&mut config);
    config.validate()?;
    check_data_files(&config)?;
    let store = config.load_store()?;
    let embeddings = match config.strategy {
        Strategy::Lemon => Some(prepare_embeddings(&config, &store)?),
        Strategy::Uniform => None,
    };
    let outcome = train(&config, &store, embeddings.as_ref())?;
    if let Some(t) = outcome.log.timings {
        print!("{}", t.render());
    }
    if let Some(m) = outcome.log.final_metrics() {
        println!("{} (test)", config.run_name());
        print!("{}", m.to_table());
    }
    if let Some(dir) = &config.output_dir {
        println!("checkpoint and log in {}", dir.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    if !a.checkpoint.is_dir() {
        return Err(invalid(format!(
            "checkpoint `{}` is not a directory",
            a.checkpoint.display()
        )));
    }
    for name in ["train.txt", "valid.txt", "test.txt"] {
        require_file(&a.data.join(name), "split file")?;
    }
    let store = TripleStore::load_dir(&a.data)?;
    let split = match a.split.as_str() {
        "test" => &store.test,
        "valid" => &store.valid,
        other => return Err(invalid(format!("--split must be test or valid, got `{other}`"))),
    };
    let model = KgeModel::load(&a.checkpoint)?;
    if model.num_entities() != store.num_entities() || model.num_relations() != store.num_relations() {
        return Err(invalid(format!(
            "checkpoint has {} entities / {} relations, data has {} / {}",
            model.num_entities(),
            model.num_relations(),
            store.num_entities(),
            store.num_relations()
        )));
    }
    let index = build_true_index(&store);
    if a.ranks_out.as_os_str() != "none" {
        let mut out = String::from("head\trelation\ttail\tside\traw_rank\tfiltered_rank\n");
        for r in rank_all(&model, split, &index) {
            let t = r.triple;
            out.push_str(&format!(
                "{}\t{}\t{}\t{:?}\t{}\t{}\n",
                store.entities.label(t.head),
                store.relations.label(t.relation),
                store.entities.label(t.tail),
                r.side,
                r.raw_rank,
                r.filtered_rank
            ));
        }
        fs::write(&a.ranks_out, out).with_context(|| format!("writing {}", a.ranks_out.display()))?;
    }
    print!("{}", evaluate(&model, split, &index).to_table());
    Ok(())
}

fn sample_dump(a: SampleDumpArgs, seed: SeedArg) -> anyhow::Result<()> {
    let mut config = load_config(&a.config, seed)?;
    config.strategy = Strategy::Lemon;
    if a.num_negatives > 0 {
        config.num_negatives = a.num_negatives;
    }
    config.validate()?;
    check_data_files(&config)?;
    let store = config.load_store()?;
    let lookup = |vocab: &Vocab, label: &str, kind: &'static str| {
        vocab.get(label).ok_or_else(|| {
            anyhow::Error::from(lemon_kge::Error::UnknownLabel {
                kind,
                label: label.to_owned(),
            })
        })
    };
    let triple = Triple::new(
        lookup(&store.entities, &a.head, "entity")?,
        lookup(&store.relations, &a.relation, "relation")?,
        lookup(&store.entities, &a.tail, "entity")?,
    );
    let emb = prepare_embeddings(&config, &store)?;
    let params = NeighborhoodParams {
        clusters: config.clusters.unwrap_or_default(),
        reduced_dim: config.reduced_dim.unwrap_or_default(),
        hops: config.hops.unwrap_or_default(),
        d_max: config.d_max,
        kmeans_max_iter: config.kmeans_max_iter,
        kmeans_tol: config.kmeans_tol,
        seed: config.seed,
    };
    let (neighborhood, _, _) = build_neighborhood(&emb.matrix, &params)?;
    let mut out = String::from("# entity\tcluster\tdistance\n");
    for entity in [triple.head, triple.tail] {
        let d = neighborhood.distances(entity);
        for c in d.sorted_clusters() {
            out.push_str(&format!("{}\t{}\t{:.6}\n", store.entities.label(entity), c, d.0[c]));
        }
    }
    let sampler = NegativeSampler::lemon(config.sampler_config(), neighborhood)?;
    let mut rng = stream_rng(config.seed, Stream::Sampling);
    let batch = sampler.sample(&[triple], &mut rng);
    out.push_str("# side\thead\trelation\ttail\n");
    let side = batch.corruptions[0].side;
    for neg in batch.triples(0, &triple) {
        out.push_str(&format!(
            "{:?}\t{}\t{}\t{}\n",
            side,
            store.entities.label(neg.head),
            store.relations.label(neg.relation),
            store.entities.label(neg.tail)
        ));
    }
    print!("{out}");
    Ok(())
}
