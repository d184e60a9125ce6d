use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use neurocalc::data::mnist::{fetch_mnist, DEFAULT_MIRROR, MIRROR_ENV};
use neurocalc::data::png::write_png;
use neurocalc::data::sampler::{fixed_subset, sample_expression};
use neurocalc::data::{GlyphAtlas, Split, ATLAS_SEED};
use neurocalc::eval::{eval_triples, evaluate, EvalReport};
use neurocalc::models::{ANSWER_WIDTH, EXPR_WIDTH};
use neurocalc::rng::named_stream;
use neurocalc::tensor::{grad_check, CatalogOp};
use neurocalc::training::{
    train_classifier, train_gan, MetricsRecord, RunDir, TrainConfig, CLASSIFIER_FILE,
};
use neurocalc::ModelKind;
use neurocalc_cli::calc::{load_kind, Calculator, LoadError};
use neurocalc_cli::config::{pick, FileConfig, CONFIG_ENV, DATA_DIR_ENV, DEFAULT_DATA_DIR};
use neurocalc_cli::grammar::{parse_expr, GrammarError};
use neurocalc_cli::service::{router, AppState};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "neurocalc",
    version,
    about = "Neural image-to-image calculator"
)]
struct Cli {
    /// TOML config file (lowest precedence after built-in defaults).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// MNIST cache directory.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and unpack the four MNIST files into the data directory.
    FetchMnist {
        /// Mirror base URL (`file://` URLs are read from disk).
        #[arg(long, env = MIRROR_ENV)]
        mnist_url: Option<String>,
    },
    /// Write sample expression/answer pairs as PNG files.
    Render {
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 12-class cell classifier.
    TrainClassifier {
        #[command(flatten)]
        train: TrainArgs,
        /// Output directory for the checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator against a frozen classifier.
    TrainGan {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match evaluation on held-out triples.
    Eval {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Triple split; `test` uses held-out triples and test glyphs.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Number of triples; defaults to every triple of the split.
        #[arg(long)]
        n: Option<usize>,
        /// Evaluate on the first K fixed training triples instead.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compute one expression and write the answer PNG.
    Infer {
        #[arg(long)]
        expr: String,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "NEUROCALC_GENERATOR")]
        generator: Option<PathBuf>,
        #[arg(long, env = "NEUROCALC_CLASSIFIER")]
        classifier: Option<PathBuf>,
        #[arg(long, env = "NEUROCALC_HOST")]
        host: Option<String>,
        #[arg(long, env = "NEUROCALC_PORT")]
        port: Option<u16>,
        /// Directory of web UI assets served at `/`.
        #[arg(long, env = "NEUROCALC_STATIC_DIR")]
        static_dir: Option<PathBuf>,
        /// Fixed render seed; identical requests then return identical PNGs.
        #[arg(long, env = "NEUROCALC_RENDER_SEED")]
        render_seed: Option<u64>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

/// Overrides for [`TrainConfig`]; unset values fall back to the config file.
#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long, env = "NEUROCALC_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    classifier_batch_size: Option<usize>,
    #[arg(long)]
    classifier_epochs: Option<usize>,
    #[arg(long)]
    classifier_max_steps: Option<usize>,
    #[arg(long)]
    gan_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    overfit_subset: Option<usize>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    lambda_perc: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    /// Train with the L1 term only.
    #[arg(long)]
    l1_only: bool,
    /// Condition the discriminator on the expression canvas.
    #[arg(long)]
    conditional_discriminator: bool,
    /// Render batches on a background thread.
    #[arg(long)]
    prefetch: bool,
}

impl TrainArgs {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set! {
            seed => c.seed,
            batch_size => c.batch_size,
            classifier_batch_size => c.classifier_batch_size,
            classifier_epochs => c.classifier_epochs,
            gan_steps => c.gan_steps,
            checkpoint_every => c.checkpoint_every,
            log_every => c.log_every,
            lambda_adv => c.weights.lambda_adv,
            lambda_l1 => c.weights.lambda_l1,
            lambda_perc => c.weights.lambda_perc,
            lambda_cls => c.weights.lambda_cls,
            lr_g => c.generator_optim.lr,
            lr_d => c.discriminator_optim.lr,
        }
        c.classifier_max_steps = pick(self.classifier_max_steps, c.classifier_max_steps);
        c.overfit_subset = pick(self.overfit_subset, c.overfit_subset);
        c.l1_only |= self.l1_only;
        c.conditional_discriminator |= self.conditional_discriminator;
        if self.prefetch {
            c.determinism = false;
        }
        c
    }
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = if error.downcast_ref::<GrammarError>().is_some() {
            2
        } else if matches!(
            error.downcast_ref::<LoadError>(),
            Some(LoadError::Missing(_))
        ) {
            3
        } else {
            1
        };
        Self { code, error }
    }
}

fn data_dir(cli: &Cli, file: &FileConfig) -> PathBuf {
    pick(cli.data_dir.clone(), file.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn load_atlas(dir: &Path) -> anyhow::Result<GlyphAtlas> {
    GlyphAtlas::load(dir, ATLAS_SEED).with_context(|| {
        format!(
            "loading MNIST from {} (run `neurocalc fetch-mnist` first)",
            dir.display()
        )
    })
}

/// Checkpoints are checked before the (slower) MNIST load so a wrong path
/// fails fast.
fn open_calculator(generator: &Path, classifier: &Path, dir: &Path) -> Result<Calculator, Failure> {
    let generator = load_kind(ModelKind::Generator, generator)?;
    let classifier = load_kind(ModelKind::Classifier, classifier)?;
    Ok(Calculator {
        generator,
        classifier,
        atlas: load_atlas(dir)?,
    })
}

fn print_record(r: &MetricsRecord) {
    println!("{}", serde_json::to_string(r).expect("metrics serialize"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::FetchMnist { mnist_url } => {
            let url = pick(mnist_url.clone(), file.mnist_url.clone())
                .unwrap_or_else(|| DEFAULT_MIRROR.to_string());
            let dir = data_dir(&cli, &file);
            let report = fetch_mnist(&url, &dir)?;
            for name in &report.downloaded {
                println!("downloaded {name}");
            }
            for name in &report.cached {
                println!("cached {name}");
            }
            let atlas = load_atlas(&dir)?;
            println!(
                "train digits {}, test digits {} in {}",
                atlas.digits(Split::Train).len(),
                atlas.digits(Split::Test).len(),
                dir.display()
            );
        }
        Command::Render {
            split,
            count,
            seed,
            out,
        } => {
            let atlas = load_atlas(&data_dir(&cli, &file))?;
            std::fs::create_dir_all(out)?;
            let mut rng = named_stream(*seed, "render");
            for i in 0..*count {
                let s = sample_expression(&atlas, &mut rng, *split);
                write_png(
                    out.join(format!("{i:04}_expr.png")),
                    s.expr_image.data(),
                    EXPR_WIDTH,
                )?;
                write_png(
                    out.join(format!("{i:04}_answer.png")),
                    s.answer_image.data(),
                    ANSWER_WIDTH,
                )?;
                println!("{i:04} {} = {}", s.triple, s.result);
            }
        }
        Command::TrainClassifier { train, out } => {
            let config = train.apply(file.train.clone());
            let atlas = load_atlas(&data_dir(&cli, &file))?;
            let mut run = RunDir::create(out, "classifier_metrics.jsonl")?;
            let outcome = train_classifier(&config, &atlas, Some(&mut run), print_record)?;
            println!(
                "test accuracy {:.4}; wrote {}",
                outcome.test_accuracy,
                run.path(CLASSIFIER_FILE).display()
            );
        }
        Command::TrainGan {
            train,
            classifier,
            out,
        } => {
            let config = train.apply(file.train.clone());
            let classifier = load_kind(ModelKind::Classifier, classifier)?;
            let atlas = load_atlas(&data_dir(&cli, &file))?;
            let mut run = RunDir::create(out, "gan_metrics.jsonl")?;
            train_gan(&config, &atlas, &classifier, Some(&mut run), print_record)?;
            println!("wrote checkpoints to {}", out.display());
        }
        Command::Eval {
            generator,
            classifier,
            split,
            n,
            subset,
            seed,
            report,
        } => {
            let calc = open_calculator(generator, classifier, &data_dir(&cli, &file))?;
            let (triples, glyphs) = match subset {
                Some(k) => (fixed_subset(*k), Split::Train),
                None => (eval_triples(*split, n.unwrap_or(usize::MAX), *seed), *split),
            };
            let r: EvalReport = evaluate(
                &calc.generator,
                &calc.classifier,
                &calc.atlas,
                &triples,
                glyphs,
                *seed,
            )?;
            print!("{}", r.table());
            let json = serde_json::to_string_pretty(&r).expect("report serializes");
            match report {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
        }
        Command::Infer {
            expr,
            generator,
            classifier,
            out,
            seed,
        } => {
            let triple = parse_expr(expr)?;
            let calc = open_calculator(generator, classifier, &data_dir(&cli, &file))?;
            let answer = calc.answer(triple, &mut named_stream(*seed, expr))?;
            std::fs::write(out, &answer.png)?;
            let parsed = answer
                .parsed
                .value
                .map_or("none".to_string(), |v| v.to_string());
            print!("parsed={parsed} true={}", answer.true_value);
            match answer.correct() {
                Some(c) => println!(" correct={c}"),
                None => println!(" well_formed=false"),
            }
        }
        Command::Serve {
            generator,
            classifier,
            host,
            port,
            static_dir,
            render_seed,
        } => {
            let s = &file.serve;
            let generator =
                pick(generator.clone(), s.generator.clone()).context("--generator is required")?;
            let classifier = pick(classifier.clone(), s.classifier.clone())
                .context("--classifier is required")?;
            let host = pick(host.clone(), s.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
            let port = pick(*port, s.port).unwrap_or(8080);
            let static_dir = pick(static_dir.clone(), s.static_dir.clone());
            let state = Arc::new(AppState::new(pick(*render_seed, s.render_seed)));
            let dir = data_dir(&cli, &file);
            serve(
                state,
                generator,
                classifier,
                dir,
                format!("{host}:{port}"),
                static_dir,
            )?;
        }
        Command::Gradcheck { seeds } => {
            let mut failed = false;
            for (op, shapes) in CatalogOp::catalog() {
                let worst = (0..*seeds)
                    .map(|s| grad_check(op, &shapes, s))
                    .fold(0.0, f64::max);
                let ok = worst < GRADCHECK_TOLERANCE;
                failed |= !ok;
                println!(
                    "{:<22} {:.3e} {}",
                    op.name(),
                    worst,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed {
                return Err(
                    anyhow!("gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})").into(),
                );
            }
        }
    }
    Ok(())
}

fn serve(
    state: Arc<AppState>,
    generator: PathBuf,
    classifier: PathBuf,
    data_dir: PathBuf,
    addr: String,
    static_dir: Option<PathBuf>,
) -> Result<(), Failure> {
    // Fail fast with exit code 3 if a checkpoint path is wrong.
    for p in [&generator, &classifier] {
        if !p.is_file() {
            return Err(LoadError::Missing(p.clone()).into());
        }
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        println!("listening on http://{addr}");
        let loader = state.clone();
        tokio::task::spawn_blocking(move || {
            let loaded = load_atlas(&data_dir)
                .and_then(|atlas| Ok(Calculator::load(&generator, &classifier, atlas)?));
            match loaded {
                Ok(c) => {
                    loader.install(c);
                    println!("checkpoints loaded");
                }
                Err(e) => eprintln!("error: {e:#}"),
            }
        });
        axum::serve(listener, router(state, static_dir))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
