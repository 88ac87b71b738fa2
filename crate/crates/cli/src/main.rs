use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fairsa_core::config::RunConfig;
use fairsa_core::curves::{PruningMode, Task};
use fairsa_core::embed::serve_toy;
use fairsa_core::fixtures::default_corpus;
use fairsa_core::perturb::{apply, PerturbationKind};
use fairsa_core::{report, run};

/// Robustness-fairness audits for face recognition models.
#[derive(Parser)]
#[command(name = "fairsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an audit and write curves, AUC matrices, SVGs and a manifest.
    Run(RunArgs),
    /// Precompute embeddings for every gallery image and probe level into an FSAE file.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one perturbation to one image and write a PNG.
    Perturb {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        kind: PerturbationKind,
        #[arg(long, allow_hyphen_values = true)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image id used to key speckle noise; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Re-render SVGs from the CSV and JSON files of a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Re-render the SVG figures; without it, print the AUC L1 norms.
        #[arg(long)]
        svg: bool,
    },
    /// Write the bundled synthetic corpus and a matching example config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the builtin toy embedder over the provider protocol on stdin/stdout.
    #[command(hide = true)]
    ServeToy,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    pruning: Option<PruningMode>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(task) = args.task {
        config.task = task;
        if args.pruning.is_none() && config.pruning.check_task(task).is_err() {
            config.pruning = PruningMode::None;
        }
    }
    if let Some(p) = args.pruning {
        config.pruning = p;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(t) = args.threshold {
        config.threshold = Some(t);
    }
    if let Some(o) = args.out {
        config.out = o;
    }
    config.validate()?;
    let (dir, outcome) = run::execute(&config)?;
    if let Some(m) = &outcome.matrix {
        println!("bias AUC L1 norm: {}", m.matrix_l1);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_perturb(image: &Path, kind: PerturbationKind, level: f64, seed: u64, out: &Path, id: Option<String>) -> Result<()> {
    let id = match id {
        Some(id) => id,
        None => image
            .file_stem()
            .and_then(|s| s.to_str())
            .context("cannot derive an image id from the file name; pass --id")?
            .to_string(),
    };
    let original = image::open(image)
        .with_context(|| format!("reading {}", image.display()))?
        .to_rgb8();
    let perturbed = apply(&original, kind, level, seed, &id)?;
    perturbed
        .save_with_format(out, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_synth(out: &Path, seed: u64) -> Result<()> {
    let corpus = default_corpus(seed);
    let paths = corpus.write(out)?;
    let relative = |p: &Path| p.strip_prefix(out).unwrap_or(p).display().to_string();
    let config = example_config(
        &relative(&paths.image_dir),
        &relative(&paths.identity_file),
        &relative(&paths.attr_file),
        seed,
    );
    let path = out.join("config.json");
    std::fs::write(&path, config).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn example_config(image_dir: &str, identity_file: &str, attr_file: &str, seed: u64) -> String {
    format!(
        r#"{{
  "dataset": {{
    "image_dir": "{image_dir}",
    "identity_file": "{identity_file}",
    "attr_file": "{attr_file}"
  }},
  "task": "verification",
  "provider": {{"variant": "builtin-toy"}},
  "perturbations": [
    {{"kind": "gaussian-blur", "n": 5}},
    {{"kind": "exposure", "n": 5}}
  ],
  "subgroups": [
    {{"attribute": "Bright", "value": true}},
    {{"attribute": "Textured", "value": true}}
  ],
  "seed": {seed},
  "out": "runs"
}}
"#
    )
}

fn print_summary(dir: &Path) -> Result<()> {
    let mut found = false;
    for name in ["auc.json", "irc_auc.json"] {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        found = true;
        let (m, _) = report::load_auc_json(&path)?;
        println!("{name}: {} / {}, L1 norm {}", m.task, m.pruning, m.matrix_l1);
        for (label, v) in m.row_labels.iter().zip(&m.row_l1) {
            println!("  {label}: {v}");
        }
        for (label, v) in m.col_labels.iter().zip(&m.col_l1) {
            println!("  {label}: {v}");
        }
    }
    if !found {
        bail!("no AUC files in {}", dir.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Embed { config, out } => {
            let config = load_config(&config)?;
            let rows = run::embed_to_file(&config, &out)?;
            println!("{rows} embeddings written to {}", out.display());
            Ok(())
        }
        Command::Perturb {
            image,
            kind,
            level,
            seed,
            out,
            id,
        } => cmd_perturb(&image, kind, level, seed, &out, id),
        Command::Report { input, svg } => {
            if svg {
                for path in run::rerender(&input)? {
                    println!("{}", path.display());
                }
            } else {
                print_summary(&input)?;
            }
            Ok(())
        }
        Command::Synth { out, seed } => cmd_synth(&out, seed),
        Command::ServeToy => {
            let stdin = io::stdin().lock();
            serve_toy(stdin, BufWriter::new(io::stdout().lock()))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
