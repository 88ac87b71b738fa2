//! Shared test support: a deliberately naive, sequential reimplementation of
//! the sweep (embed, compare, calibrate, predict, bias) used as an oracle
//! for the optimized pipeline.

#![allow(dead_code)]

use fairsa_core::curves::{PruningMode, Task};
use fairsa_core::embed::ToyEmbedder;
use fairsa_core::fixtures::SyntheticCorpus;
use fairsa_core::perturb::{apply, make_ladder, PerturbationSpec};
use image::RgbImage;

pub fn embed_all(images: &[RgbImage]) -> Vec<Vec<f32>> {
    images.iter().map(|im| ToyEmbedder.embed(im)).collect()
}

/// Plain cosine similarity in f64, stored at f32 like provider scores.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for k in 0..a.len() {
        dot += a[k] as f64 * b[k] as f64;
        na += a[k] as f64 * a[k] as f64;
        nb += b[k] as f64 * b[k] as f64;
    }
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())) as f32
}

pub fn similarity(probes: &[Vec<f32>], gallery: &[Vec<f32>]) -> Vec<Vec<f32>> {
    probes
        .iter()
        .map(|p| gallery.iter().map(|g| cosine(p, g)).collect())
        .collect()
}

/// Smallest candidate threshold whose strict-greater acceptance stays within
/// `alpha`, found by trying every candidate.
pub fn brute_threshold(imposter: &[f32], alpha: f64) -> f32 {
    let far = |t: f32| imposter.iter().filter(|&&s| s > t).count() as f64 / imposter.len() as f64;
    let mut best = f32::INFINITY;
    for &t in imposter.iter().chain([f32::NEG_INFINITY].iter()) {
        if far(t) <= alpha && t < best {
            best = t;
        }
    }
    best
}

pub fn brute_gar(genuine: &[f32], imposter: &[f32], alpha: f64) -> Option<f64> {
    if genuine.is_empty() || imposter.is_empty() {
        return None;
    }
    let t = brute_threshold(imposter, alpha);
    Some(genuine.iter().filter(|&&s| s > t).count() as f64 / genuine.len() as f64)
}

fn side_scores(
    sim: &[Vec<f32>],
    ids: &[i64],
    members: &[usize],
    removed: &[Vec<bool>],
) -> (Vec<f32>, Vec<f32>) {
    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for &i in members {
        for &j in members {
            if removed[i][j] {
                continue;
            }
            if ids[i] == ids[j] {
                genuine.push(sim[i][j]);
            } else {
                imposter.push(sim[i][j]);
            }
        }
    }
    (genuine, imposter)
}

/// One bias or match-rate value per ladder level.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCurve {
    pub label: String,
    pub stimuli: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

/// Full sweep over one ladder for every `(attribute index, value)` subgroup.
/// With `irc`, a final curve labelled `irc` holds the match rate.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    corpus: &SyntheticCorpus,
    spec: &PerturbationSpec,
    subgroups: &[(usize, bool)],
    task: Task,
    pruning: PruningMode,
    alpha: f64,
    threshold: Option<f64>,
    irc: bool,
) -> Vec<OracleCurve> {
    let n = corpus.len();
    let ids = &corpus.identities;
    let gallery = embed_all(&corpus.images);
    let sim0 = similarity(&gallery, &gallery);

    let mut off = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off.push(sim0[i][j]);
            }
        }
    }
    let t_match = threshold.map(|t| t as f32).unwrap_or_else(|| brute_threshold(&off, alpha));

    let mut retained: Vec<usize> = (0..n).collect();
    if pruning == PruningMode::VpsaIdentities {
        retained = (0..n)
            .filter(|&i| sim0[i][i] >= t_match && (0..n).all(|j| j == i || sim0[i][j] < t_match))
            .collect();
    }

    let sides: Vec<(Vec<usize>, Vec<usize>)> = subgroups
        .iter()
        .map(|&(a, v)| {
            let p = retained.iter().copied().filter(|&i| corpus.attributes[i][a] == v).collect();
            let u = retained.iter().copied().filter(|&i| corpus.attributes[i][a] != v).collect();
            (p, u)
        })
        .collect();

    let mut removed: Vec<Vec<Vec<bool>>> = vec![vec![vec![false; n]; n]; subgroups.len()];
    if pruning == PruningMode::VerificationPairs {
        for (g, (p, u)) in sides.iter().enumerate() {
            for members in [p, u] {
                let (_, imposter) = side_scores(&sim0, ids, members, &vec![vec![false; n]; n]);
                if imposter.is_empty() {
                    continue;
                }
                let t = brute_threshold(&imposter, alpha);
                for &i in members {
                    for &j in members {
                        if ids[i] != ids[j] && sim0[i][j] > t {
                            removed[g][i][j] = true;
                        }
                    }
                }
            }
        }
    }

    let levels = make_ladder(spec).unwrap().levels;
    let mut curves: Vec<OracleCurve> = subgroups
        .iter()
        .map(|&(a, v)| OracleCurve {
            label: format!("{}={}", corpus.attribute_names[a], if v { "1" } else { "-1" }),
            stimuli: levels.clone(),
            values: Vec::new(),
        })
        .collect();
    let mut rates = Vec::new();

    for &delta in &levels {
        let perturbed: Vec<RgbImage> = (0..n)
            .map(|i| apply(&corpus.images[i], spec.kind, delta, spec.seed, &corpus.ids[i]).unwrap())
            .collect();
        let probes = embed_all(&perturbed);
        match task {
            Task::Verification => {
                let sim = similarity(&probes, &gallery);
                for (g, (p, u)) in sides.iter().enumerate() {
                    let (gp, ip) = side_scores(&sim, ids, p, &removed[g]);
                    let (gu, iu) = side_scores(&sim, ids, u, &removed[g]);
                    let value = match (brute_gar(&gp, &ip, alpha), brute_gar(&gu, &iu, alpha)) {
                        (Some(a), Some(b)) => Some(a - b),
                        _ => None,
                    };
                    curves[g].values.push(value);
                }
            }
            Task::SelfMatching => {
                let pred: Vec<bool> = (0..n).map(|i| cosine(&probes[i], &gallery[i]) >= t_match).collect();
                let rate = |m: &[usize]| m.iter().filter(|&&i| pred[i]).count() as f64 / m.len() as f64;
                for (g, (p, u)) in sides.iter().enumerate() {
                    let value = (!p.is_empty() && !u.is_empty()).then(|| rate(p) - rate(u));
                    curves[g].values.push(value);
                }
                rates.push((!retained.is_empty()).then(|| rate(&retained)));
            }
        }
    }
    if irc {
        curves.push(OracleCurve {
            label: "irc".into(),
            stimuli: levels,
            values: rates,
        });
    }
    curves
}
