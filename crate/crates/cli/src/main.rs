use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Parser, Subcommand};
use log::info;

use slidessl::bagstore::{generate_synthetic, load_bag, Dataset};
use slidessl::checkpoint::Checkpoint;
use slidessl::config::{default_toml, ExperimentConfig};
use slidessl::eval::{self, EvalConfig, HeadSelect, LayerSelect, Protocol};
use slidessl::gradcheck::{self, Component};
use slidessl::par::{self, Execution};
use slidessl::trainer::{fit, FitOptions};
use slidessl::{Error, Result};

const LOG_ENV: &str = "SLIDESSL_LOG";

fn config_keys_help() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "Configuration keys and defaults (TOML, every key optional):\n\n{}\n\
             Log verbosity is read from {LOG_ENV} (error, warn, info, debug, trace).\n\
             Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.",
            default_toml()
        )
    })
}

#[derive(Parser)]
#[command(name = "slidessl", version, about = "Self-supervised slide representation workbench")]
#[command(after_help = config_keys_help())]
struct Cli {
    /// Worker threads (overrides optim.workers).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val dataset from the [data] section.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder; writes checkpoints, metrics.ndjson and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate frozen features with kNN or a linear probe.
    Eval {
        /// Checkpoint to extract features with; omit with --mean-pool.
        #[arg(long, required_unless_present = "mean_pool")]
        ckpt: Option<PathBuf>,
        /// Use mean-pooled token embeddings instead of an encoder.
        #[arg(long)]
        mean_pool: bool,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        val_data: PathBuf,
        #[arg(long, default_value = "knn")]
        protocol: String,
        #[arg(long)]
        report: PathBuf,
        /// Experiment config supplying the [eval] section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the extracted feature tables into this directory.
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Export CLS attention of one bag as sparse JSON plus a PNG raster.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bag: PathBuf,
        /// Output JSON path; the raster is written next to it with a .png extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "last")]
        layer: String,
        #[arg(long, default_value = "mean")]
        head: String,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// posembed, encoder, heads, objectives or all.
        #[arg(long)]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execution(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn setup_workers(cli: &Cli, configured: Option<usize>) {
    let threads = cli.workers.or(configured);
    if let Some(n) = threads {
        par::init_workers(n);
    }
    info!("workers: {}", if cli.sequential { 1 } else { par::worker_count() });
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generate(spec: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(spec)?;
    info!("resolved config:\n{}", cfg.to_toml_string());
    info!("seed: {}", cfg.data.seed);
    let data = generate_synthetic(&cfg.data)?;
    create_dir(out)?;
    data.train.save(&out.join("train"))?;
    data.val.save(&out.join("val"))?;
    let truth = serde_json::json!({
        "noise_phenotypes": data.noise_phenotypes,
        "phenotypes": data.phenotypes,
    });
    write_text(&out.join("phenotypes.json"), &serde_json::to_string(&truth)?)?;
    write_text(&out.join("resolved_config.toml"), &cfg.to_toml_string())?;
    info!(
        "wrote {} train and {} val bags to {}",
        data.train.len(),
        data.val.len(),
        out.display()
    );
    Ok(())
}

fn train(cli: &Cli, config: &Path, data: &Path, out: &Path, resume: Option<&Path>, stop_after: Option<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut tc = cfg.train_config();
    if let Some(w) = cli.workers {
        tc.optim.workers = w;
    }
    setup_workers(cli, Some(tc.optim.workers));
    info!("resolved config:\n{}", cfg.to_toml_string());
    info!("seed: {}", tc.optim.seed);
    let ds = Dataset::load(data)?;
    create_dir(out)?;
    write_text(&out.join("resolved_config.toml"), &cfg.to_toml_string())?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let opts = FitOptions {
        resume,
        stop_after,
        checkpoint_dir: Some(out.to_path_buf()),
        metrics_path: Some(out.join("metrics.ndjson")),
        execution: Some(execution(cli)),
    };
    let outcome = fit(&ds, &tc, &opts)?;
    if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
        info!("loss {:.4} at step {} -> {:.4} at step {}", first.loss, first.step, last.loss, last.step);
    }
    info!("final checkpoint: {}", out.join("final.ckpt").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cli: &Cli,
    ckpt: Option<&Path>,
    mean_pool: bool,
    train_dir: &Path,
    val_dir: &Path,
    protocol: &str,
    report: &Path,
    config: Option<&Path>,
    features_out: Option<&Path>,
) -> Result<()> {
    let mut ecfg = match config {
        Some(p) => ExperimentConfig::load(p)?.eval,
        None => EvalConfig::default(),
    };
    ecfg.protocol = protocol.parse::<Protocol>()?;
    ecfg.validate()?;
    setup_workers(cli, None);
    info!("eval config: {}", serde_json::to_string(&ecfg)?);
    let train = Dataset::load(train_dir)?;
    let val = Dataset::load(val_dir)?;
    let (ftr, fva) = if mean_pool {
        info!("features: mean-pooled token embeddings");
        (eval::mean_pool_features(&train)?, eval::mean_pool_features(&val)?)
    } else {
        let path = ckpt.ok_or_else(|| Error::config("ckpt", "a checkpoint is required without --mean-pool"))?;
        let ck = Checkpoint::load(path)?;
        info!("features: {} at step {}", path.display(), ck.state.step);
        let exec = execution(cli);
        (
            eval::extract_features(&train, ck.network(), exec)?,
            eval::extract_features(&val, ck.network(), exec)?,
        )
    };
    if let Some(dir) = features_out {
        create_dir(dir)?;
        ftr.save(&dir.join("train_features.bag"))?;
        fva.save(&dir.join("val_features.bag"))?;
    }
    let classes = train.num_classes().max(val.num_classes());
    let rep = eval::evaluate(&ftr, &fva, classes, &ecfg)?;
    info!("MCA {:.4}  macro-F1 {:.4}  AUC {:.4}", rep.mca, rep.macro_f1, rep.auc);
    write_text(report, &serde_json::to_string_pretty(&rep)?)?;
    println!("{}", serde_json::to_string(&rep)?);
    Ok(())
}

fn heatmap(ckpt: &Path, bag: &Path, out: &Path, layer: &str, head: &str) -> Result<()> {
    let layer: LayerSelect = layer.parse()?;
    let head: HeadSelect = head.parse()?;
    let ck = Checkpoint::load(ckpt)?;
    let bag = load_bag(bag)?;
    let hm = eval::attention_heatmap(&bag, ck.network(), layer, head)?;
    hm.save_json(out)?;
    let png = out.with_extension("png");
    hm.save_png(&png)?;
    info!(
        "{}: layer {} head {}, {} cells, CLS self-weight {:.4}; wrote {} and {}",
        hm.slide_id,
        hm.layer,
        hm.head,
        hm.cells.len(),
        hm.cls_weight,
        out.display(),
        png.display()
    );
    Ok(())
}

fn run_gradcheck(component: &str, seed: u64) -> Result<bool> {
    let component: Component = component.parse()?;
    info!("seed: {seed}");
    let report = gradcheck::grad_check(component, seed);
    println!("{report}");
    let ok = report.passed(gradcheck::TOLERANCE);
    println!("{} (tolerance {:e})", if ok { "PASS" } else { "FAIL" }, gradcheck::TOLERANCE);
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Generate { spec, out } => generate(spec, out).map(|_| true),
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after,
        } => train(cli, config, data, out, resume.as_deref(), *stop_after).map(|_| true),
        Command::Eval {
            ckpt,
            mean_pool,
            train_data,
            val_data,
            protocol,
            report,
            config,
            features_out,
        } => evaluate(
            cli,
            ckpt.as_deref(),
            *mean_pool,
            train_data,
            val_data,
            protocol,
            report,
            config.as_deref(),
            features_out.as_deref(),
        )
        .map(|_| true),
        Command::Heatmap {
            ckpt,
            bag,
            out,
            layer,
            head,
        } => heatmap(ckpt, bag, out, layer, head).map(|_| true),
        Command::Gradcheck { component, seed } => run_gradcheck(component, *seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
