//! End-to-end runs: configuration in, report directory out.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use num_rational::BigRational;

use crate::analysis::{build_auc_matrix, AucMatrix};
use crate::config::RunConfig;
use crate::curves::{Curve, Harness, HarnessOptions, SweepRequest, Task};
use crate::dataset::{load_dataset, Dataset, ImageSource};
use crate::embed::{probe_key, write_fsae, ProviderPool};
use crate::error::{Error, Result};
use crate::perturb::{self, make_ladder, PerturbationKind};
use crate::report::{
    self, curves_by_kind, emit_auc_json, emit_curves_csv, emit_text, render_curves_svg, render_heatmap_svg,
    HeatScale, RunManifest,
};

/// Everything a run produced, before or after it was written out.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub curves: Vec<Curve>,
    /// AUC matrix of the bias curves; `None` when there were no subgroups.
    pub matrix: Option<AucMatrix<f64>>,
    /// Match-rate curves and their matrix (self-matching only).
    pub irc: Vec<Curve>,
    pub irc_matrix: Option<AucMatrix<f64>>,
}

/// `<out>/<task>/<pruning>`.
pub fn run_dir(config: &RunConfig) -> PathBuf {
    config.out.join(config.task.name()).join(config.pruning.name())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}

fn exact_matrix(curves: &[Curve]) -> Result<Option<AucMatrix<f64>>> {
    if curves.is_empty() {
        return Ok(None);
    }
    Ok(Some(build_auc_matrix::<BigRational>(curves)?.to_f64()))
}

/// Run the audit on an already loaded dataset and provider pool.
pub fn compute(
    config: &RunConfig,
    dataset: &Dataset,
    images: &dyn ImageSource,
    pool: &ProviderPool,
) -> Result<RunOutcome> {
    config.validate()?;
    for s in &config.subgroups {
        dataset.attribute_index(&s.attribute)?;
    }
    let manifest = RunManifest {
        config_digest: config.digest(),
        dataset_digest: dataset.digest(),
        seed: config.seed,
        provider: pool.describe(),
        timestamp: now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.audit_value(),
    };
    let options = HarnessOptions {
        alpha: config.alpha,
        ..HarnessOptions::default()
    };
    let harness = Harness::new(dataset, images, pool, options)?;
    let mut curves = Vec::new();
    let mut irc = Vec::new();
    for spec in config.perturbation_specs() {
        let r = harness.sweep(&SweepRequest {
            perturbation: &spec,
            subgroups: &config.subgroups,
            task: config.task,
            threshold: config.threshold,
            pruning: config.pruning,
            with_irc: config.task == Task::SelfMatching,
        })?;
        curves.extend(r.curves);
        irc.extend(r.irc);
    }
    Ok(RunOutcome {
        manifest,
        matrix: exact_matrix(&curves)?,
        irc_matrix: exact_matrix(&irc)?,
        curves,
        irc,
    })
}

fn render_or_skip(path: &Path, svg: Result<String>) -> Result<()> {
    match svg {
        Ok(text) => emit_text(path, &text),
        Err(Error::NothingToRender(msg)) => {
            log::warn!("skipping {}: {msg}", path.display());
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn write_svgs(dir: &Path, prefix: &str, curves: &[Curve], matrix: Option<&AucMatrix<f64>>, digest: &str) -> Result<()> {
    for (kind, group) in curves_by_kind(curves) {
        render_or_skip(&dir.join(format!("{prefix}-{}.svg", kind.name())), render_curves_svg(&group, digest))?;
    }
    if let Some(m) = matrix {
        render_or_skip(
            &dir.join(format!("{prefix}-heatmap.svg")),
            render_heatmap_svg(m, HeatScale::for_matrix(m), digest),
        )?;
    }
    Ok(())
}

/// Write all report files for `outcome` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    let digest = outcome.manifest.digest();
    emit_text(&dir.join("manifest.json"), &outcome.manifest.to_json())?;
    if !outcome.curves.is_empty() {
        emit_curves_csv(&outcome.curves, &dir.join("curves.csv"))?;
    }
    if let Some(m) = &outcome.matrix {
        emit_auc_json(m, &digest, &dir.join("auc.json"))?;
    }
    write_svgs(dir, "curves", &outcome.curves, outcome.matrix.as_ref(), &digest)?;
    if !outcome.irc.is_empty() {
        emit_curves_csv(&outcome.irc, &dir.join("irc.csv"))?;
    }
    if let Some(m) = &outcome.irc_matrix {
        emit_auc_json(m, &digest, &dir.join("irc_auc.json"))?;
    }
    write_svgs(dir, "irc", &outcome.irc, outcome.irc_matrix.as_ref(), &digest)?;
    Ok(())
}

/// Load the dataset, open the provider pool, run, and write the report
/// directory. Returns the directory.
pub fn execute(config: &RunConfig) -> Result<(PathBuf, RunOutcome)> {
    config.validate()?;
    let (dataset, load) = load_dataset(&config.dataset.image_dir, &config.dataset.identity_file, &config.dataset.attr_file)?;
    log::info!(
        "loaded {} records ({} missing images, {} unmatched annotations)",
        dataset.len(),
        load.missing_images,
        load.unmatched_annotations
    );
    let pool = ProviderPool::open(&config.provider, config.workers)?;
    let outcome = thread_pool(config.workers)?.install(|| compute(config, &dataset, &dataset, &pool))?;
    let dir = run_dir(config);
    write_outputs(&outcome, &dir)?;
    Ok((dir, outcome))
}

/// Embed the gallery and every probe level of every ladder, writing one
/// FSAE file that a `file` provider can serve for the same config.
pub fn embed_to_file(config: &RunConfig, out: &Path) -> Result<usize> {
    config.validate()?;
    let (dataset, _) = load_dataset(&config.dataset.image_dir, &config.dataset.identity_file, &config.dataset.attr_file)?;
    let pool = ProviderPool::open(&config.provider, config.workers)?;
    let mut jobs: Vec<(usize, PerturbationKind, f64)> = (0..dataset.len()).map(|i| (i, PerturbationKind::GaussianBlur, 0.0)).collect();
    for spec in config.perturbation_specs() {
        for &delta in &make_ladder(&spec)?.levels {
            if delta != 0.0 {
                jobs.extend((0..dataset.len()).map(|i| (i, spec.kind, delta)));
            }
        }
    }
    let records = dataset.records();
    let keys: Vec<String> = jobs.iter().map(|&(i, k, d)| probe_key(&records[i].id, k, d)).collect();
    let seed = config.seed;
    let matrix = thread_pool(config.workers)?.install(|| {
        pool.embed_indexed(&keys, |j| {
            let (i, kind, delta) = jobs[j];
            let original = dataset.load_image(i)?;
            perturb::apply(&original, kind, delta, seed, &records[i].id)
        })
    })?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    write_fsae(&matrix, BufWriter::new(file)).map_err(|e| Error::io(out, e))?;
    Ok(matrix.len())
}

/// Re-render SVGs from the CSV and JSON files of an existing run directory.
pub fn rerender(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (prefix, csv, json) in [("curves", "curves.csv", "auc.json"), ("irc", "irc.csv", "irc_auc.json")] {
        let csv_path = dir.join(csv);
        let json_path = dir.join(json);
        if !csv_path.exists() && !json_path.exists() {
            continue;
        }
        let curves = if csv_path.exists() { report::load_curves_csv(&csv_path)? } else { Vec::new() };
        let (matrix, digest) = if json_path.exists() {
            let (m, d) = report::load_auc_json(&json_path)?;
            (Some(m), d)
        } else {
            (None, String::new())
        };
        write_svgs(dir, prefix, &curves, matrix.as_ref(), &digest)?;
        for (kind, _) in curves_by_kind(&curves) {
            written.push(dir.join(format!("{prefix}-{}.svg", kind.name())));
        }
        if matrix.is_some() {
            written.push(dir.join(format!("{prefix}-heatmap.svg")));
        }
    }
    if written.is_empty() {
        return Err(Error::NothingToRender(format!("no curves or AUC files in {}", dir.display())));
    }
    written.retain(|p| p.exists());
    Ok(written)
}
