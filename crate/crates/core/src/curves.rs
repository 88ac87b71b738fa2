//! Stimulus sweeps: perturb, embed, predict and measure bias per level.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageSource, SubgroupPartition, SubgroupSpec};
use crate::embed::{probe_key, EmbeddingMatrix, ProviderPool};
use crate::error::{Error, Result};
use crate::metrics::{
    default_self_match_threshold, paired_similarity, prune_identities_vpsa, prune_verification_pairs,
    self_match, similarity_matrix_blocked, statistical_imparity, verification_bias, Blocking, PairMask, SimilarityMatrix,
};
use crate::perturb::{self, make_ladder, PerturbationKind, PerturbationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Verification,
    SelfMatching,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Verification => "verification",
            Task::SelfMatching => "self-matching",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verification" => Ok(Task::Verification),
            "self-matching" => Ok(Task::SelfMatching),
            _ => Err(Error::InvalidArgument(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PruningMode {
    #[default]
    None,
    VerificationPairs,
    VpsaIdentities,
}

impl PruningMode {
    pub fn name(self) -> &'static str {
        match self {
            PruningMode::None => "none",
            PruningMode::VerificationPairs => "verification-pairs",
            PruningMode::VpsaIdentities => "vpsa-identities",
        }
    }

    /// Pair pruning belongs to verification, identity pruning to self-matching.
    pub fn check_task(self, task: Task) -> Result<()> {
        match (self, task) {
            (PruningMode::VerificationPairs, Task::SelfMatching) | (PruningMode::VpsaIdentities, Task::Verification) => {
                Err(Error::Config(format!("pruning mode {self} does not apply to {task}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PruningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PruningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PruningMode::None),
            "verification-pairs" => Ok(PruningMode::VerificationPairs),
            "vpsa-identities" => Ok(PruningMode::VpsaIdentities),
            _ => Err(Error::InvalidArgument(format!("unknown pruning mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub level_index: usize,
    pub stimulus: f64,
    /// Bias or match rate; `None` when the metric is undefined at this level.
    pub value: Option<f64>,
    pub n_protected: usize,
    pub n_unprotected: usize,
}

impl CurvePoint {
    pub fn defined(&self) -> bool {
        self.value.is_some()
    }
}

/// One curve per (task, perturbation, subgroup, pruning). Match-rate curves
/// have no subgroup.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub task: Task,
    pub kind: PerturbationKind,
    pub subgroup: Option<SubgroupSpec>,
    pub pruning: PruningMode,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn is_irc(&self) -> bool {
        self.subgroup.is_none()
    }

    /// Stimulus range of the ladder, taken from the first and last points.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        Some((self.points.first()?.stimulus, self.points.last()?.stimulus))
    }

    /// Pointwise negation of the values.
    pub fn negated(&self) -> Curve {
        let mut c = self.clone();
        for p in &mut c.points {
            p.value = p.value.map(|v| -v);
        }
        c
    }
}

/// Sweep parameters shared by every curve computed in one pass.
#[derive(Debug, Clone)]
pub struct SweepRequest<'r> {
    pub perturbation: &'r PerturbationSpec,
    pub subgroups: &'r [SubgroupSpec],
    pub task: Task,
    /// Self-matching threshold; `None` calibrates at FAR `alpha` on δ=0 off-diagonal pairs.
    pub threshold: Option<f64>,
    pub pruning: PruningMode,
    /// Also produce the match-rate curve (self-matching only).
    pub with_irc: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// One bias curve per requested subgroup, in request order.
    pub curves: Vec<Curve>,
    pub irc: Option<Curve>,
}

#[derive(Debug, Clone, Copy)]
pub struct HarnessOptions {
    pub alpha: f64,
    pub blocking: Blocking,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            alpha: 0.01,
            blocking: Blocking::default(),
        }
    }
}

/// Per-subgroup state fixed before the first level.
struct Prepared {
    spec: SubgroupSpec,
    /// `None` when the bias is undefined at every level.
    part: Option<SubgroupPartition>,
    mask: Option<PairMask>,
    n_protected: usize,
    n_unprotected: usize,
}

/// Runs sweeps against one dataset and provider pool. Gallery embeddings
/// are computed once; the δ=0 reference similarity is computed on first use.
pub struct Harness<'a> {
    dataset: &'a Dataset,
    images: &'a dyn ImageSource,
    pool: &'a ProviderPool,
    options: HarnessOptions,
    identities: Vec<i64>,
    gallery: EmbeddingMatrix<f32>,
    reference: OnceLock<SimilarityMatrix<f32>>,
}

/// Turn an undefined-metric error into `None`; everything else stays fatal.
fn undefined_as_none<T>(r: Result<T>, what: impl FnOnce() -> String) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_undefined_metric() => {
            log::warn!("{}: {e}", what());
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

impl<'a> Harness<'a> {
    pub fn new(
        dataset: &'a Dataset,
        images: &'a dyn ImageSource,
        pool: &'a ProviderPool,
        options: HarnessOptions,
    ) -> Result<Self> {
        if images.len() != dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images for {} records",
                images.len(),
                dataset.len()
            )));
        }
        if !(options.alpha > 0.0 && options.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", options.alpha)));
        }
        let ids = dataset.ids();
        log::info!("embedding {} gallery images", ids.len());
        let gallery = pool.embed_indexed(&ids, |i| images.load(i))?;
        Ok(Harness {
            dataset,
            images,
            pool,
            options,
            identities: dataset.identities(),
            gallery,
            reference: OnceLock::new(),
        })
    }

    pub fn gallery(&self) -> &EmbeddingMatrix<f32> {
        &self.gallery
    }

    pub fn options(&self) -> &HarnessOptions {
        &self.options
    }

    /// Unperturbed probes against the gallery.
    pub fn reference_similarity(&self) -> Result<&SimilarityMatrix<f32>> {
        if let Some(s) = self.reference.get() {
            return Ok(s);
        }
        let s = similarity_matrix_blocked(&self.gallery, &self.gallery, self.options.blocking)?;
        Ok(self.reference.get_or_init(|| s))
    }

    /// The given threshold, or the δ=0 FAR-calibrated default.
    pub fn self_match_threshold(&self, threshold: Option<f64>) -> Result<f64> {
        match threshold {
            Some(t) if t.is_finite() => Ok(t),
            Some(t) => Err(Error::InvalidArgument(format!("threshold must be finite, got {t}"))),
            None => default_self_match_threshold(self.reference_similarity()?, self.options.alpha),
        }
    }

    /// Embeddings of every record perturbed by `(kind, delta)`, rows in
    /// dataset order and labelled with record ids. At δ=0 these are the
    /// gallery embeddings.
    pub fn probe_embeddings(&self, kind: PerturbationKind, delta: f64, seed: u64) -> Result<EmbeddingMatrix<f32>> {
        if delta == 0.0 {
            return Ok(self.gallery.clone());
        }
        let records = self.dataset.records();
        let keys: Vec<String> = records.iter().map(|r| probe_key(&r.id, kind, delta)).collect();
        let probes = self.pool.embed_indexed(&keys, |i| {
            let original = self.images.load(i)?;
            perturb::apply(&original, kind, delta, seed, &records[i].id)
        })?;
        probes.with_ids(self.dataset.ids())
    }

    fn prepare(
        &self,
        spec: &SubgroupSpec,
        task: Task,
        pruning: PruningMode,
        retained: Option<&[usize]>,
    ) -> Result<Prepared> {
        let what = || format!("subgroup {}", spec.label());
        let index = self.dataset.attribute_index(&spec.attribute)?;
        let mut n_protected = self.dataset.records().iter().filter(|r| r.attributes[index] == spec.value).count();
        let mut n_unprotected = self.dataset.len() - n_protected;
        let mut part = undefined_as_none(self.dataset.partition(spec), what)?;
        let mut mask = None;
        match (task, pruning) {
            (Task::Verification, PruningMode::VerificationPairs) => {
                if let Some(p) = &part {
                    let sim0 = self.reference_similarity()?;
                    mask = undefined_as_none(prune_verification_pairs(sim0, &self.identities, p, self.options.alpha), what)?;
                    if mask.is_none() {
                        part = None;
                    }
                }
            }
            (Task::SelfMatching, PruningMode::VpsaIdentities) => {
                let retained = retained.expect("identity pruning computed before subgroups");
                let index_in = |i: &usize| retained.binary_search(i).is_ok();
                let all = 0..self.dataset.len();
                n_protected = all.clone().filter(|i| index_in(i) && self.dataset.records()[*i].attributes[index] == spec.value).count();
                n_unprotected = retained.len() - n_protected;
                if let Some(p) = part.take() {
                    part = undefined_as_none(p.restrict(retained), what)?;
                }
            }
            _ => pruning.check_task(task)?,
        }
        Ok(Prepared {
            spec: spec.clone(),
            part,
            mask,
            n_protected,
            n_unprotected,
        })
    }

    /// Sweep one perturbation ladder, producing every requested curve from
    /// a single pass over the levels.
    pub fn sweep(&self, req: &SweepRequest<'_>) -> Result<SweepResult> {
        let ladder = make_ladder(req.perturbation)?;
        self.sweep_levels(req, &ladder.levels)
    }

    fn sweep_levels(&self, req: &SweepRequest<'_>, levels: &[f64]) -> Result<SweepResult> {
        req.pruning.check_task(req.task)?;
        if req.with_irc && req.task != Task::SelfMatching {
            return Err(Error::InvalidArgument("match-rate curves need the self-matching task".into()));
        }
        let kind = req.perturbation.kind;
        let seed = req.perturbation.seed;
        let self_matching = req.task == Task::SelfMatching;
        let t = if self_matching {
            Some(self.self_match_threshold(req.threshold)?)
        } else {
            None
        };
        let retained = if req.pruning == PruningMode::VpsaIdentities {
            let t = t.expect("self-matching threshold");
            let r = prune_identities_vpsa(self.reference_similarity()?, t)?;
            log::info!("identity pruning kept {} of {} images", r.len(), self.dataset.len());
            Some(r)
        } else {
            None
        };
        let prepared: Vec<Prepared> = req
            .subgroups
            .iter()
            .map(|s| self.prepare(s, req.task, req.pruning, retained.as_deref()))
            .collect::<Result<_>>()?;

        let mut points: Vec<Vec<CurvePoint>> = vec![Vec::with_capacity(levels.len()); prepared.len()];
        let mut irc_points = Vec::new();
        for (level_index, &delta) in levels.iter().enumerate() {
            log::info!("{kind} level {level_index} (δ = {delta})");
            let probes = self.probe_embeddings(kind, delta, seed)?;
            match req.task {
                Task::Verification => {
                    let owned;
                    let sim = if delta == 0.0 {
                        self.reference_similarity()?
                    } else {
                        owned = similarity_matrix_blocked(&probes, &self.gallery, self.options.blocking)?;
                        &owned
                    };
                    for (prep, out) in prepared.iter().zip(&mut points) {
                        let value = match &prep.part {
                            Some(p) => undefined_as_none(
                                verification_bias(sim, &self.identities, p, self.options.alpha, prep.mask.as_ref()),
                                || format!("{kind} level {level_index}, subgroup {}", prep.spec.label()),
                            )?,
                            None => None,
                        };
                        out.push(point(level_index, delta, value, prep.n_protected, prep.n_unprotected));
                    }
                }
                Task::SelfMatching => {
                    let t = t.expect("self-matching threshold");
                    let diag = paired_similarity(&probes, &self.gallery)?;
                    let pred: Vec<bool> = diag.iter().map(|&s| self_match(s, t)).collect();
                    for (prep, out) in prepared.iter().zip(&mut points) {
                        let value = match &prep.part {
                            Some(p) => undefined_as_none(statistical_imparity(&pred, p), || {
                                format!("{kind} level {level_index}, subgroup {}", prep.spec.label())
                            })?,
                            None => None,
                        };
                        out.push(point(level_index, delta, value, prep.n_protected, prep.n_unprotected));
                    }
                    if req.with_irc {
                        let members: Vec<usize> = match &retained {
                            Some(r) => r.clone(),
                            None => (0..pred.len()).collect(),
                        };
                        let hits = members.iter().filter(|&&i| pred[i]).count();
                        let value = (!members.is_empty()).then(|| hits as f64 / members.len() as f64);
                        irc_points.push(point(level_index, delta, value, members.len(), 0));
                    }
                }
            }
        }

        let curves = prepared
            .into_iter()
            .zip(points)
            .map(|(prep, points)| Curve {
                task: req.task,
                kind,
                subgroup: Some(prep.spec),
                pruning: req.pruning,
                points,
            })
            .collect();
        let irc = req.with_irc.then_some(Curve {
            task: req.task,
            kind,
            subgroup: None,
            pruning: req.pruning,
            points: irc_points,
        });
        Ok(SweepResult { curves, irc })
    }

    /// Bias curve for one subgroup.
    pub fn fair_sa_curve(
        &self,
        perturbation: &PerturbationSpec,
        subgroup: &SubgroupSpec,
        task: Task,
        threshold: Option<f64>,
        pruning: PruningMode,
    ) -> Result<Curve> {
        let subgroups = [subgroup.clone()];
        let mut r = self.sweep(&SweepRequest {
            perturbation,
            subgroups: &subgroups,
            task,
            threshold,
            pruning,
            with_irc: false,
        })?;
        Ok(r.curves.remove(0))
    }

    /// Match rate over the (optionally pruned) population per level.
    pub fn vpsa_irc(&self, perturbation: &PerturbationSpec, threshold: Option<f64>, pruning: PruningMode) -> Result<Curve> {
        let r = self.sweep(&SweepRequest {
            perturbation,
            subgroups: &[],
            task: Task::SelfMatching,
            threshold,
            pruning,
            with_irc: true,
        })?;
        Ok(r.irc.expect("requested"))
    }

    /// Bias at a single stimulus level (reported with level index 0).
    #[allow(clippy::too_many_arguments)]
    pub fn fair_sa_point(
        &self,
        kind: PerturbationKind,
        delta: f64,
        seed: u64,
        subgroup: &SubgroupSpec,
        task: Task,
        threshold: Option<f64>,
        pruning: PruningMode,
    ) -> Result<CurvePoint> {
        let perturbation = PerturbationSpec {
            kind,
            n: 1,
            lower: delta,
            upper: delta,
            seed,
        };
        let subgroups = [subgroup.clone()];
        let req = SweepRequest {
            perturbation: &perturbation,
            subgroups: &subgroups,
            task,
            threshold,
            pruning,
            with_irc: false,
        };
        let mut r = self.sweep_levels(&req, &[delta])?;
        Ok(r.curves.remove(0).points.remove(0))
    }
}

fn point(level_index: usize, stimulus: f64, value: Option<f64>, n_protected: usize, n_unprotected: usize) -> CurvePoint {
    CurvePoint {
        level_index,
        stimulus,
        value,
        n_protected,
        n_unprotected,
    }
}
