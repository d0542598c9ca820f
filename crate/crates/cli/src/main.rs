//! `modlib`: generate a synthetic benchmark, freeze a base model, build
//! adapter libraries, route and adapt over them, and run the experiments.
//!
//! Artifacts live under the output root (`--out`, else `$MODLIB_OUT`, else
//! `./modlib-out`):
//!
//! ```text
//! tasks/        benchmark datasets (gen-tasks)
//! base/         frozen base model (pretrain-base)
//! library/      default library location (build-library)
//! prototypes/   Arrow / CM prototype banks written by route-eval
//! results/      CSV and SVG outputs
//! ```
//!
//! Commands that need `tasks/` or `base/` create them with the current
//! configuration when they are missing.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use modlib::adapters::Library;
use modlib::evalharness::{
    base_model, histogram, norm_histogram_svg, recompute_similarity, run_cluster_ablation, run_cluster_sweep,
    run_norm_analysis, run_supervised_adaptation, run_transfer_experiment, run_upstream_eval, run_zeroshot_eval,
    to_csv, transfer_scatter_svg, EvalReport, RouterSpec, SupervisedMethod,
};
use modlib::librarian::{build_clustered, build_poly, build_private, build_shared, BuildConfig, ClusterMethod};
use modlib::libstore::{self, KvConfig, StoreError, MANIFEST_FILE};
use modlib::router::{arrow_init, cm_init, expert_datasets, FitConfig, TpConfig};
use modlib::synthtasks::{generate_benchmark, Benchmark, BenchmarkConfig};
use modlib::toymodel::{pretrain_base, PretrainConfig, ToyModel};

type F = f64;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const CLUSTERING_REPORT: &str = "clustering.json";

#[derive(Parser, Debug)]
#[command(
    name = "modlib",
    version,
    about = "Build, route and evaluate low-rank adapter libraries"
)]
struct Cli {
    /// Plain-text `key = value` configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output root [default: $MODLIB_OUT, else ./modlib-out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark into <out>/tasks.
    GenTasks {
        /// Benchmark master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Freeze the base model into <out>/base.
    PretrainBase {
        /// Pretraining steps on the pooled training tasks.
        #[arg(long)]
        steps: Option<usize>,
        /// Start from a random network instead of the benchmark reference.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a library over the training tasks.
    BuildLibrary {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Number of clusters (clustered modes) or skills (poly).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Share of the per-task budget spent on stage-1 private training.
        #[arg(long)]
        clustering_fraction: Option<f64>,
        /// Library directory [default: <out>/library].
        #[arg(long, value_name = "DIR")]
        library: Option<PathBuf>,
    },
    /// Evaluate a router over a library.
    RouteEval {
        #[arg(long, value_enum)]
        router: Option<RouterKind>,
        /// Experts kept per layer (arrow, cm).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        top_k: Option<u64>,
        /// Softmax temperature (arrow, cm).
        #[arg(long)]
        temperature: Option<f64>,
        /// Zero-shot on the held-out tasks' test splits instead of the training tasks' validation splits.
        #[arg(long)]
        heldout: bool,
        #[arg(long, value_name = "DIR")]
        library: Option<PathBuf>,
    },
    /// Adapt to each held-out task with supervision.
    Adapt {
        #[arg(long, value_enum)]
        method: Option<AdaptMethod>,
        /// Fraction of each held-out task's training split used.
        #[arg(long)]
        data_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        library: Option<PathBuf>,
    },
    /// Run one of the experiments; results go to <out>/results.
    Experiment {
        #[arg(value_enum)]
        which: ExperimentKind,
        #[arg(long)]
        seed: Option<u64>,
        /// Task pairs (transfer).
        #[arg(long)]
        pairs: Option<usize>,
        /// Samples (norm-ratio).
        #[arg(long)]
        samples: Option<usize>,
        /// Cluster count (cluster-ablation).
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated cluster counts (k-sweep).
        #[arg(long)]
        k_values: Option<String>,
        /// Library to analyze (norm-ratio, upstream) [default: a fresh private library].
        #[arg(long, value_name = "DIR")]
        library: Option<PathBuf>,
    },
    /// Print an artifact's manifest summary and, for libraries, the cluster report.
    Inspect {
        path: PathBuf,
        /// Print the raw manifest as well.
        #[arg(long)]
        json: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Private,
    Shared,
    Mbc,
    Poly,
    RandomTask,
    RandomExamples,
    Embeddings,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum RouterKind {
    Mu,
    Arrow,
    Cm,
    Tp,
    Oracle,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AdaptMethod {
    Poly,
    Polyz,
    Lorahub,
    None,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ExperimentKind {
    Transfer,
    NormRatio,
    KSweep,
    ClusterAblation,
    Upstream,
}

/// Every key the configuration file may set.
const KNOWN_KEYS: &[&str] = &[
    "bench.n_clusters",
    "bench.tasks_per_cluster",
    "bench.input_dim",
    "bench.output_dim",
    "bench.depth",
    "bench.n_train",
    "bench.n_valid",
    "bench.n_test",
    "bench.noise_std",
    "bench.intra_cluster_perturbation",
    "bench.inter_cluster_separation_deg",
    "bench.teacher_rank",
    "bench.delta_scale",
    "bench.aligned_deltas",
    "bench.input_shift",
    "bench.input_task_shift",
    "bench.input_subspace_dim",
    "bench.input_scale",
    "bench.input_floor",
    "bench.reference_gain",
    "bench.held_out_task_count",
    "bench.seed",
    "bench.max_attempts",
    "pretrain.steps",
    "pretrain.learning_rate",
    "pretrain.batch_size",
    "pretrain.seed",
    "pretrain.init_gain",
    "pretrain.random_init",
    "build.mode",
    "build.k",
    "build.seed",
    "build.clustering_fraction",
    "build.steps_per_task",
    "build.learning_rate",
    "build.batch_size",
    "build.k_reduce",
    "build.kmeans_iters",
    "build.warm_start",
    "route.router",
    "route.top_k",
    "route.temperature",
    "fit.steps",
    "fit.learning_rate",
    "fit.batch_size",
    "fit.seed",
    "fit.routing_lr_multiplier",
    "adapt.method",
    "adapt.data_fraction",
    "experiment.seed",
    "experiment.pairs",
    "experiment.samples",
    "experiment.k",
    "experiment.k_values",
];

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// Resolved configuration: file entries overlaid with command-line flags.
struct Settings {
    kv: KvConfig,
    out: PathBuf,
}

impl Settings {
    fn get<V: FromStr>(&self, key: &str, default: V) -> Outcome<V> {
        Ok(self.kv.get(key).map_err(usage)?.unwrap_or(default))
    }

    fn get_opt<V: FromStr>(&self, key: &str) -> Outcome<Option<V>> {
        self.kv.get(key).map_err(usage)
    }

    fn choice<E: ValueEnum>(&self, key: &str, default: E) -> Outcome<E> {
        match self.kv.raw(key) {
            None => Ok(default),
            Some(v) => E::from_str(v, true).map_err(|e| usage(format!("{key}: {e}"))),
        }
    }

    fn set<V: ToString>(&mut self, key: &str, value: Option<V>) {
        if let Some(v) = value {
            self.kv.set(key, v.to_string());
        }
    }

    fn set_choice<E: ValueEnum>(&mut self, key: &str, value: Option<E>) {
        if let Some(v) = value.and_then(|v| v.to_possible_value()) {
            self.kv.set(key, v.get_name());
        }
    }

    fn bench_config(&self) -> Outcome<BenchmarkConfig> {
        let mut c = BenchmarkConfig::default();
        let kv = &self.kv;
        let u = usage;
        kv.apply("bench.n_clusters", &mut c.n_clusters).map_err(u)?;
        kv.apply("bench.tasks_per_cluster", &mut c.tasks_per_cluster)
            .map_err(u)?;
        kv.apply("bench.input_dim", &mut c.input_dim).map_err(u)?;
        kv.apply("bench.output_dim", &mut c.output_dim).map_err(u)?;
        kv.apply("bench.depth", &mut c.depth).map_err(u)?;
        kv.apply("bench.n_train", &mut c.n_train).map_err(u)?;
        kv.apply("bench.n_valid", &mut c.n_valid).map_err(u)?;
        kv.apply("bench.n_test", &mut c.n_test).map_err(u)?;
        kv.apply("bench.noise_std", &mut c.noise_std).map_err(u)?;
        kv.apply("bench.intra_cluster_perturbation", &mut c.intra_cluster_perturbation)
            .map_err(u)?;
        kv.apply(
            "bench.inter_cluster_separation_deg",
            &mut c.inter_cluster_separation_deg,
        )
        .map_err(u)?;
        kv.apply("bench.teacher_rank", &mut c.teacher_rank).map_err(u)?;
        kv.apply("bench.delta_scale", &mut c.delta_scale).map_err(u)?;
        kv.apply("bench.aligned_deltas", &mut c.aligned_deltas).map_err(u)?;
        kv.apply("bench.input_shift", &mut c.input_shift).map_err(u)?;
        kv.apply("bench.input_task_shift", &mut c.input_task_shift).map_err(u)?;
        kv.apply("bench.input_subspace_dim", &mut c.input_subspace_dim)
            .map_err(u)?;
        kv.apply("bench.input_scale", &mut c.input_scale).map_err(u)?;
        kv.apply("bench.input_floor", &mut c.input_floor).map_err(u)?;
        kv.apply("bench.reference_gain", &mut c.reference_gain).map_err(u)?;
        kv.apply("bench.held_out_task_count", &mut c.held_out_task_count)
            .map_err(u)?;
        kv.apply("bench.seed", &mut c.master_seed).map_err(u)?;
        kv.apply("bench.max_attempts", &mut c.max_attempts).map_err(u)?;
        c.validate().map_err(usage)?;
        Ok(c)
    }

    fn pretrain_config(&self) -> Outcome<(PretrainConfig, bool)> {
        let random_init = self.get("pretrain.random_init", false)?;
        let mut c = PretrainConfig {
            steps: if random_init {
                PretrainConfig::default().steps
            } else {
                0
            },
            ..PretrainConfig::default()
        };
        let kv = &self.kv;
        kv.apply("pretrain.steps", &mut c.steps).map_err(usage)?;
        kv.apply("pretrain.learning_rate", &mut c.learning_rate)
            .map_err(usage)?;
        kv.apply("pretrain.batch_size", &mut c.batch_size).map_err(usage)?;
        kv.apply("pretrain.seed", &mut c.seed).map_err(usage)?;
        kv.apply("pretrain.init_gain", &mut c.init_gain).map_err(usage)?;
        Ok((c, random_init))
    }

    fn build_config(&self, seed_key: &str) -> Outcome<BuildConfig> {
        let mut c = BuildConfig::default();
        let kv = &self.kv;
        kv.apply("build.seed", &mut c.seed).map_err(usage)?;
        kv.apply(seed_key, &mut c.seed).map_err(usage)?;
        kv.apply("build.clustering_fraction", &mut c.budget.clustering_fraction)
            .map_err(usage)?;
        kv.apply("build.steps_per_task", &mut c.budget.total_steps_per_task)
            .map_err(usage)?;
        kv.apply("build.learning_rate", &mut c.train.learning_rate)
            .map_err(usage)?;
        kv.apply("build.batch_size", &mut c.train.batch_size).map_err(usage)?;
        kv.apply("build.kmeans_iters", &mut c.kmeans_iters).map_err(usage)?;
        kv.apply("build.warm_start", &mut c.warm_start).map_err(usage)?;
        if let Some(k) = self.get_opt::<usize>("build.k_reduce")? {
            c.k_reduce = Some(k);
        }
        c.budget.validate().map_err(usage)?;
        Ok(c)
    }

    fn fit_config(&self, seed_key: &str) -> Outcome<FitConfig> {
        let mut c = FitConfig::default();
        let kv = &self.kv;
        kv.apply("fit.steps", &mut c.steps).map_err(usage)?;
        kv.apply("fit.learning_rate", &mut c.learning_rate).map_err(usage)?;
        kv.apply("fit.batch_size", &mut c.batch_size).map_err(usage)?;
        kv.apply("fit.seed", &mut c.seed).map_err(usage)?;
        kv.apply(seed_key, &mut c.seed).map_err(usage)?;
        kv.apply("fit.routing_lr_multiplier", &mut c.routing_lr_multiplier)
            .map_err(usage)?;
        Ok(c)
    }

    fn tasks_dir(&self) -> PathBuf {
        self.out.join("tasks")
    }

    fn base_dir(&self) -> PathBuf {
        self.out.join("base")
    }

    fn results_dir(&self) -> Outcome<PathBuf> {
        let d = self.out.join("results");
        fs::create_dir_all(&d).map_err(|e| Failure::Runtime(format!("{}: {e}", d.display())))?;
        Ok(d)
    }

    fn library_dir(&self, explicit: Option<PathBuf>) -> PathBuf {
        explicit.unwrap_or_else(|| self.out.join("library"))
    }
}

fn run(cli: Cli) -> Outcome {
    let kv = match &cli.config {
        Some(p) => KvConfig::load(p).map_err(usage)?,
        None => KvConfig::default(),
    };
    if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
        return Err(usage(format!("unknown config key {k:?}")));
    }
    let mut s = Settings {
        kv,
        out: libstore::output_root(cli.out.as_deref()),
    };
    match cli.command {
        Command::GenTasks { seed } => {
            s.set("bench.seed", seed);
            gen_tasks(&s)
        }
        Command::PretrainBase {
            steps,
            random_init,
            seed,
        } => {
            s.set("pretrain.steps", steps);
            s.set("pretrain.seed", seed);
            if random_init {
                s.kv.set("pretrain.random_init", "true");
            }
            pretrain(&s)
        }
        Command::BuildLibrary {
            mode,
            k,
            seed,
            clustering_fraction,
            library,
        } => {
            s.set_choice("build.mode", mode);
            s.set("build.k", k);
            s.set("build.seed", seed);
            s.set("build.clustering_fraction", clustering_fraction);
            build_library(&s, s.library_dir(library))
        }
        Command::RouteEval {
            router,
            top_k,
            temperature,
            heldout,
            library,
        } => {
            s.set_choice("route.router", router);
            s.set("route.top_k", top_k);
            s.set("route.temperature", temperature);
            route_eval(&s, s.library_dir(library), heldout)
        }
        Command::Adapt {
            method,
            data_fraction,
            seed,
            library,
        } => {
            s.set_choice("adapt.method", method);
            s.set("adapt.data_fraction", data_fraction);
            s.set("fit.seed", seed);
            adapt(&s, s.library_dir(library))
        }
        Command::Experiment {
            which,
            seed,
            pairs,
            samples,
            k,
            k_values,
            library,
        } => {
            s.set("experiment.seed", seed);
            s.set("experiment.pairs", pairs);
            s.set("experiment.samples", samples);
            s.set("experiment.k", k);
            s.set("experiment.k_values", k_values);
            experiment(&s, which, library)
        }
        Command::Inspect { path, json } => inspect(&path, json),
    }
}

fn gen_tasks(s: &Settings) -> Outcome {
    let bench = generate_benchmark::<F>(&s.bench_config()?)?;
    let dir = s.tasks_dir();
    libstore::save_benchmark(&bench, &dir)?;
    println!(
        "wrote {} tasks ({} training, {} held out, {} planted clusters) to {}",
        bench.datasets.len(),
        bench.train_tasks.len(),
        bench.heldout_tasks.len(),
        bench.config.n_clusters,
        dir.display()
    );
    Ok(())
}

/// The saved benchmark, generating and saving it first when absent.
fn ensure_tasks(s: &Settings) -> Outcome<Benchmark<F>> {
    let dir = s.tasks_dir();
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(libstore::load_benchmark(&dir)?);
    }
    eprintln!("note: {} not found; generating the benchmark", dir.display());
    gen_tasks(s)?;
    Ok(libstore::load_benchmark(&dir)?)
}

fn pretrain(s: &Settings) -> Outcome {
    let bench = ensure_tasks(s)?;
    let (cfg, random_init) = s.pretrain_config()?;
    let model = if random_init {
        pretrain_base(&bench.config.architecture(), &cfg, &bench.train_datasets())?
    } else {
        base_model(&bench, &cfg)?
    };
    let dir = s.base_dir();
    libstore::save_model(&model, &dir)?;
    println!(
        "base model {} ({} steps from {}) saved to {}",
        &model.fingerprint()[..16],
        cfg.steps,
        if random_init {
            "random init"
        } else {
            "the reference network"
        },
        dir.display()
    );
    Ok(())
}

fn ensure_base(s: &Settings) -> Outcome<ToyModel<F>> {
    let dir = s.base_dir();
    if !dir.join(MANIFEST_FILE).exists() {
        eprintln!("note: {} not found; freezing the base model", dir.display());
        pretrain(s)?;
    }
    Ok(libstore::load_model(&dir)?)
}

fn load_library(dir: &Path, model: &ToyModel<F>) -> Outcome<Library<F>> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Failure::Runtime(format!(
            "no library at {} (run build-library first)",
            dir.display()
        )));
    }
    let lib = libstore::load_library::<F>(dir)?;
    model.check_library(&lib)?;
    Ok(lib)
}

fn build_library(s: &Settings, dir: PathBuf) -> Outcome {
    let bench = ensure_tasks(s)?;
    let model = ensure_base(s)?;
    let train = bench.train_datasets();
    let cfg = s.build_config("build.seed")?;
    let mode = s.choice("build.mode", Mode::Mbc)?;
    let k = s.get("build.k", bench.config.n_clusters)?;
    let clustered = |m: ClusterMethod| build_clustered(m, &model, &train, &cfg, k);
    let (lib, report) = match mode {
        Mode::Private => (build_private(&model, &train, &cfg)?.library, None),
        Mode::Shared => (build_shared(&model, &train, &cfg)?.library, None),
        Mode::Poly => (build_poly(&model, &train, &cfg, k)?.library, None),
        Mode::Mbc => clustered(ClusterMethod::Mbc).map(|c| (c.built.library, Some(c.report)))?,
        Mode::RandomTask => clustered(ClusterMethod::RandomTask).map(|c| (c.built.library, Some(c.report)))?,
        Mode::RandomExamples => clustered(ClusterMethod::RandomExamples).map(|c| (c.built.library, Some(c.report)))?,
        Mode::Embeddings => clustered(ClusterMethod::Embeddings).map(|c| (c.built.library, Some(c.report)))?,
    };
    let manifest = libstore::save_library(&lib, &dir)?;
    let report_path = dir.join(CLUSTERING_REPORT);
    match &report {
        Some(r) => fs::write(&report_path, r.to_json() + "\n")
            .map_err(|e| Failure::Runtime(format!("{}: {e}", report_path.display())))?,
        None if report_path.exists() => {
            fs::remove_file(&report_path).map_err(|e| Failure::Runtime(format!("{}: {e}", report_path.display())))?
        }
        None => {}
    }
    print!(
        "{} library with {} experts saved to {} (hash {})",
        lib.builder,
        lib.len(),
        dir.display(),
        &manifest.header.content_hash[..16]
    );
    match report {
        Some(r) => println!("; ARI vs planted clusters {:.3}", r.ari_vs_planted),
        None => println!(),
    }
    Ok(())
}

fn router_spec(s: &Settings) -> Outcome<RouterSpec> {
    let kind = s.choice("route.router", RouterKind::Arrow)?;
    let top_k: Option<usize> = s.get_opt("route.top_k")?;
    if top_k == Some(0) {
        return Err(usage("route.top_k must be at least 1"));
    }
    let temperature = s.get("route.temperature", 1.0)?;
    if !(temperature > 0.0) {
        return Err(usage("route.temperature must be positive"));
    }
    Ok(match kind {
        RouterKind::Mu => RouterSpec::Mu,
        RouterKind::Arrow => RouterSpec::Arrow { top_k, temperature },
        RouterKind::Cm => RouterSpec::Cm { top_k, temperature },
        RouterKind::Tp => RouterSpec::Tp(TpConfig::default()),
        RouterKind::Oracle => RouterSpec::Oracle,
    })
}

fn write_result(s: &Settings, name: &str, contents: &str) -> Outcome<PathBuf> {
    let path = s.results_dir()?.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn report_line(label: &str, r: &EvalReport) -> String {
    format!(
        "{label}: {} tasks, mean log-likelihood {:.5}, mean MSE {:.5}",
        r.per_task.len(),
        r.mean_log_likelihood,
        r.mean_mse
    )
}

fn route_eval(s: &Settings, lib_dir: PathBuf, heldout: bool) -> Outcome {
    let spec = router_spec(s)?;
    if heldout && spec == RouterSpec::Oracle {
        return Err(usage(
            "the oracle router needs task identities, which held-out evaluation withholds",
        ));
    }
    let bench = ensure_tasks(s)?;
    let model = ensure_base(s)?;
    let lib = load_library(&lib_dir, &model)?;
    let train = bench.train_datasets();
    let bank = match spec {
        RouterSpec::Arrow { .. } => Some(arrow_init(&lib)?),
        RouterSpec::Cm { .. } => Some(cm_init(&lib, &expert_datasets(&lib, &train), &model)?),
        _ => None,
    };
    if let Some(bank) = bank {
        let dir = s.out.join("prototypes").join(spec.name());
        libstore::save_prototypes(&bank, &lib.content_hash(), &dir)?;
    }
    let report = if heldout {
        run_zeroshot_eval(&model, Some(&lib), &spec, &bench.heldout_datasets(), &train)?
    } else {
        run_upstream_eval(&model, &lib, std::slice::from_ref(&spec), &train)?.remove(0)
    };
    let scope = if heldout { "heldout" } else { "upstream" };
    let path = write_result(
        s,
        &format!("route-{}-{scope}.csv", spec.name()),
        &to_csv(&report.per_task)?,
    )?;
    println!("{}", report_line(&format!("{} ({scope})", spec.name()), &report));
    println!("per-task results in {}", path.display());
    Ok(())
}

fn adapt(s: &Settings, lib_dir: PathBuf) -> Outcome {
    let method = match s.choice("adapt.method", AdaptMethod::Polyz)? {
        AdaptMethod::Poly => SupervisedMethod::Poly,
        AdaptMethod::Polyz => SupervisedMethod::PolyZ,
        AdaptMethod::Lorahub => SupervisedMethod::LoraHub,
        AdaptMethod::None => SupervisedMethod::None,
    };
    let fraction: f64 = s.get("adapt.data_fraction", 1.0)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(usage("adapt.data_fraction must be in (0, 1]"));
    }
    let fit = s.fit_config("fit.seed")?;
    let bench = ensure_tasks(s)?;
    let model = ensure_base(s)?;
    let lib = load_library(&lib_dir, &model)?;
    let report = run_supervised_adaptation(&model, &lib, method, &bench.heldout_datasets(), fraction, &fit)?;
    let path = write_result(
        s,
        &format!("adapt-{}-{fraction}.csv", method.as_str()),
        &to_csv(&report.per_task)?,
    )?;
    println!(
        "{}",
        report_line(&format!("{} at data fraction {fraction}", method.as_str()), &report)
    );
    println!("per-task results in {}", path.display());
    Ok(())
}

fn parse_k_values(raw: &str) -> Outcome<Vec<usize>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("experiment.k_values: bad entry {v:?}")))
        })
        .collect()
}

/// The library at `explicit`, or a freshly built private library.
fn library_or_private(
    s: &Settings,
    explicit: Option<PathBuf>,
    model: &ToyModel<F>,
    bench: &Benchmark<F>,
) -> Outcome<Library<F>> {
    match explicit {
        Some(dir) => load_library(&dir, model),
        None => Ok(build_private(model, &bench.train_datasets(), &s.build_config("experiment.seed")?)?.library),
    }
}

fn experiment(s: &Settings, which: ExperimentKind, library: Option<PathBuf>) -> Outcome {
    let seed: u64 = s.get("experiment.seed", 0)?;
    let bench = ensure_tasks(s)?;
    let model = ensure_base(s)?;
    let build = s.build_config("experiment.seed")?;
    let fit = s.fit_config("experiment.seed")?;
    match which {
        ExperimentKind::Transfer => {
            let pairs = s.get("experiment.pairs", 20)?;
            let report = run_transfer_experiment(&model, &bench, pairs, &build, seed)?;
            let csv = write_result(s, "transfer.csv", &to_csv(&report.records)?)?;
            write_result(s, "transfer.svg", &transfer_scatter_svg(&report))?;
            println!(
                "{} pairs ({} excluded): pearson {} spearman {}",
                report.records.len(),
                report.excluded.len(),
                fmt_opt(report.pearson),
                fmt_opt(report.spearman)
            );
            println!("records in {}", csv.display());
        }
        ExperimentKind::NormRatio => {
            let samples = s.get("experiment.samples", 500)?;
            let lib = library_or_private(s, library, &model, &bench)?;
            let report = run_norm_analysis(&lib, &model, &bench.train_datasets(), samples, seed)?;
            let hist = histogram(&report.ratios, 20);
            let csv = write_result(s, "norm-ratio.csv", &to_csv(&hist)?)?;
            write_result(s, "norm-ratio.svg", &norm_histogram_svg(&report))?;
            println!(
                "{} samples ({} excluded): fraction with ratio > 1 = {:.3}",
                report.ratios.len(),
                report.excluded,
                report.fraction_above_one
            );
            println!("histogram in {}", csv.display());
        }
        ExperimentKind::KSweep => {
            let raw: String = s.get("experiment.k_values", "1,2,4,8,16".to_string())?;
            let ks = parse_k_values(&raw)?;
            let rows = run_cluster_sweep(&model, &bench, &build, &ks, &fit)?;
            let csv = write_result(s, "k-sweep.csv", &to_csv(&rows)?)?;
            for r in &rows {
                println!(
                    "K={:<3} upstream {:.5}  held-out {:.5}  ARI {:.3}",
                    r.k, r.upstream_valid, r.heldout, r.ari_vs_planted
                );
            }
            println!("rows in {}", csv.display());
        }
        ExperimentKind::ClusterAblation => {
            let k = s.get("experiment.k", bench.config.n_clusters)?;
            let (rows, libs) = run_cluster_ablation(&model, &bench, &build, k, &fit)?;
            let csv = write_result(s, "cluster-ablation.csv", &to_csv(&rows)?)?;
            for (r, lib) in rows.iter().zip(&libs) {
                println!(
                    "{:<16} held-out {:.5}  similarity {:.4} (recomputed {:.4})  ARI {:.3}",
                    r.method.as_str(),
                    r.heldout,
                    r.similarity,
                    recompute_similarity(lib)?,
                    r.ari_vs_planted
                );
            }
            println!("rows in {}", csv.display());
        }
        ExperimentKind::Upstream => {
            let lib = library_or_private(s, library, &model, &bench)?;
            let specs = [
                RouterSpec::Oracle,
                RouterSpec::arrow(),
                RouterSpec::Cm {
                    top_k: None,
                    temperature: 1.0,
                },
                RouterSpec::Tp(TpConfig::default()),
                RouterSpec::Mu,
            ];
            let reports = run_upstream_eval(&model, &lib, &specs, &bench.train_datasets())?;
            let rows: Vec<UpstreamRow> = reports
                .iter()
                .map(|r| UpstreamRow {
                    router: r.fingerprint.method.clone(),
                    mean_log_likelihood: r.mean_log_likelihood,
                    mean_mse: r.mean_mse,
                })
                .collect();
            let csv = write_result(s, "upstream.csv", &to_csv(&rows)?)?;
            for r in &reports {
                println!("{}", report_line(&r.fingerprint.method, r));
            }
            println!("rows in {}", csv.display());
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct UpstreamRow {
    router: String,
    mean_log_likelihood: f64,
    mean_mse: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

fn inspect(path: &Path, json: bool) -> Outcome {
    let kind = libstore::artifact_kind(path).map_err(|e| match e {
        StoreError::Io { .. } => Failure::Runtime(format!("{} is not an artifact directory: {e}", path.display())),
        other => other.into(),
    })?;
    if json {
        let p = path.join(MANIFEST_FILE);
        print!(
            "{}",
            fs::read_to_string(&p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?
        );
    }
    match kind.as_str() {
        "library" => inspect_library(path),
        "model" => {
            let model = libstore::load_model::<F>(path)?;
            let a = model.architecture();
            println!(
                "model  width {}  depth {}  outputs {}  activation {}",
                a.width,
                a.depth,
                a.output_dim,
                a.activation.as_str()
            );
            println!("fingerprint {}", model.fingerprint());
            Ok(())
        }
        "datasets" => {
            let (data, m) = libstore::load_datasets::<F>(path)?;
            println!(
                "datasets  {} tasks  input dim {}  output dim {}  content hash {}",
                data.len(),
                m.input_dim,
                m.output_dim,
                m.header.content_hash
            );
            for d in &data {
                let role = if m.heldout_tasks.contains(&d.task_id) {
                    "held-out"
                } else {
                    "train"
                };
                println!(
                    "  task {:>3}  cluster {:>2}  {:<8}  {}/{}/{} examples",
                    d.task_id,
                    d.cluster_id,
                    role,
                    d.train.len(),
                    d.valid.len(),
                    d.test.len()
                );
            }
            Ok(())
        }
        "prototypes" => {
            let (bank, m) = libstore::load_prototypes::<F>(path)?;
            println!(
                "prototypes  source {:?}  {} layers x {} experts  library {}",
                bank.source,
                bank.layers.len(),
                bank.n_experts(),
                m.library_hash
            );
            Ok(())
        }
        other => Err(Failure::Runtime(format!("unknown artifact kind {other:?}"))),
    }
}

fn inspect_library(path: &Path) -> Outcome {
    let (lib, m) = libstore::load_library_with_manifest::<F>(path)?;
    println!(
        "library  builder {}  {} experts  rank {}  scaling {}  build seed {}",
        m.builder,
        lib.len(),
        m.rank,
        m.scaling,
        m.build_seed
    );
    println!("base model   {}", m.base_model_fingerprint);
    println!("content hash {}", m.header.content_hash);
    for (i, e) in lib.experts.iter().enumerate() {
        println!(
            "  expert {:>3}  {:<12} provenance {:<15} tasks {:?}",
            i, e.name, e.provenance.builder, e.provenance.member_tasks
        );
    }
    if let Some(a) = &lib.cluster_assignment {
        println!("clusters: k = {}  inertia {:.6}  seed {}", a.k, a.inertia, a.seed);
        let tasks = lib.covered_tasks();
        for (c, members) in a.members().iter().enumerate() {
            let ids: Vec<usize> = members.iter().filter_map(|&i| tasks.get(i).copied()).collect();
            println!("  cluster {c:>3}: tasks {ids:?}");
        }
    }
    let report = path.join(CLUSTERING_REPORT);
    if report.exists() {
        let text = fs::read_to_string(&report).map_err(|e| Failure::Runtime(format!("{}: {e}", report.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let get = |k: &str| v.get(k).map_or_else(|| "-".to_string(), |x| x.to_string());
        println!(
            "cluster report: method {}  ARI vs planted {}  mean pairwise expert similarity {}",
            get("method"),
            get("ari_vs_planted"),
            get("mean_pairwise_cluster_similarity")
        );
    }
    Ok(())
}
