//! Cosine similarity, FAR calibration and the task-dependent bias measures.
//!
//! Acceptance everywhere is `score > threshold` except self-matching
//! predictions, which use `score >= t`.

use rayon::prelude::*;

use crate::dataset::SubgroupPartition;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norms below this are treated as zero vectors (similarity 0).
pub const ZERO_NORM: f64 = 1e-12;

/// `probe x gallery` cosine similarities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<S> {
    probe_ids: Vec<String>,
    gallery_ids: Vec<String>,
    values: Vec<S>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn from_values(probe_ids: Vec<String>, gallery_ids: Vec<String>, values: Vec<S>) -> Result<Self> {
        if values.len() != probe_ids.len() * gallery_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {}x{} similarity matrix",
                values.len(),
                probe_ids.len(),
                gallery_ids.len()
            )));
        }
        Ok(SimilarityMatrix {
            probe_ids,
            gallery_ids,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn probe_ids(&self) -> &[String] {
        &self.probe_ids
    }

    pub fn gallery_ids(&self) -> &[String] {
        &self.gallery_ids
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.values[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn diagonal(&self) -> Vec<S> {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).collect()
    }
}

/// Tile sizes for the similarity kernel. They change memory traffic only,
/// never the computed values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocking {
    pub probe_rows: usize,
    pub gallery_rows: usize,
}

impl Default for Blocking {
    fn default() -> Self {
        Blocking {
            probe_rows: 64,
            gallery_rows: 256,
        }
    }
}

/// Rows scaled to unit length in f64; near-zero rows become all zeros.
fn unit_rows<S: Scalar>(m: &EmbeddingMatrix<S>) -> Vec<f64> {
    let dim = m.dim();
    let mut out = Vec::with_capacity(m.len() * dim);
    for i in 0..m.len() {
        let row = m.row(i);
        let norm = row
            .iter()
            .map(|v| {
                let v = v.to_f64().expect("finite");
                v * v
            })
            .sum::<f64>()
            .sqrt();
        if norm < ZERO_NORM {
            out.extend(std::iter::repeat_n(0.0, dim));
        } else {
            out.extend(row.iter().map(|v| v.to_f64().expect("finite") / norm));
        }
    }
    out
}

/// Fixed-order dot product: eight interleaved partial sums, pairwise merged,
/// then the tail. The order depends only on the vector length.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    merge_lanes(&acc, tail)
}

/// Final merge of the eight lane sums plus the tail, shared by every path.
#[inline(always)]
fn merge_lanes(a: &[f64; 8], tail: f64) -> f64 {
    (((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))) + tail
}

/// Four dot products of `p` against consecutive rows of `g`, each summed in
/// exactly the order [`dot`] uses.
#[inline(always)]
fn dot4_portable(p: &[f64], g: &[f64], dim: usize) -> [f64; 4] {
    let rows = [&g[..dim], &g[dim..2 * dim], &g[2 * dim..3 * dim], &g[3 * dim..4 * dim]];
    let mut out = [0.0; 4];
    for (o, r) in out.iter_mut().zip(rows) {
        *o = dot(p, r);
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[inline]
unsafe fn dot4_avx2(p: &[f64], g: &[f64], dim: usize) -> [f64; 4] {
    use std::arch::x86_64::*;
    assert!(p.len() >= dim && g.len() >= 4 * dim);
    let full = dim / 8 * 8;
    let pp = p.as_ptr();
    let gp = [g.as_ptr(), g.as_ptr().add(dim), g.as_ptr().add(2 * dim), g.as_ptr().add(3 * dim)];
    let (g0, g1, g2, g3) = (gp[0], gp[1], gp[2], gp[3]);
    let z = _mm256_setzero_pd();
    let (mut l0, mut l1, mut l2, mut l3) = (z, z, z, z);
    let (mut h0, mut h1, mut h2, mut h3) = (z, z, z, z);
    let mut k = 0;
    while k < full {
        let xl = _mm256_loadu_pd(pp.add(k));
        let xh = _mm256_loadu_pd(pp.add(k + 4));
        // Multiply and add are rounded separately, as in `dot`.
        l0 = _mm256_add_pd(l0, _mm256_mul_pd(xl, _mm256_loadu_pd(g0.add(k))));
        h0 = _mm256_add_pd(h0, _mm256_mul_pd(xh, _mm256_loadu_pd(g0.add(k + 4))));
        l1 = _mm256_add_pd(l1, _mm256_mul_pd(xl, _mm256_loadu_pd(g1.add(k))));
        h1 = _mm256_add_pd(h1, _mm256_mul_pd(xh, _mm256_loadu_pd(g1.add(k + 4))));
        l2 = _mm256_add_pd(l2, _mm256_mul_pd(xl, _mm256_loadu_pd(g2.add(k))));
        h2 = _mm256_add_pd(h2, _mm256_mul_pd(xh, _mm256_loadu_pd(g2.add(k + 4))));
        l3 = _mm256_add_pd(l3, _mm256_mul_pd(xl, _mm256_loadu_pd(g3.add(k))));
        h3 = _mm256_add_pd(h3, _mm256_mul_pd(xh, _mm256_loadu_pd(g3.add(k + 4))));
        k += 8;
    }
    let lo = [l0, l1, l2, l3];
    let hi = [h0, h1, h2, h3];
    let mut out = [0.0; 4];
    for r in 0..4 {
        let mut lanes = [0.0f64; 8];
        _mm256_storeu_pd(lanes.as_mut_ptr(), lo[r]);
        _mm256_storeu_pd(lanes.as_mut_ptr().add(4), hi[r]);
        let mut tail = 0.0;
        for t in full..dim {
            tail += p[t] * *gp[r].add(t);
        }
        out[r] = merge_lanes(&lanes, tail);
    }
    out
}

#[inline(always)]
fn fill_block_with<S: Scalar>(
    probe: &[f64],
    gallery: &[f64],
    dim: usize,
    cols: usize,
    gallery_rows: usize,
    out: &mut [S],
    dot4: impl Fn(&[f64], &[f64], usize) -> [f64; 4],
) {
    let rows = out.len() / cols;
    let mut g0 = 0;
    while g0 < cols {
        let g1 = (g0 + gallery_rows).min(cols);
        for i in 0..rows {
            let p = &probe[i * dim..(i + 1) * dim];
            let dst = &mut out[i * cols + g0..i * cols + g1];
            let mut j = g0;
            for d4 in dst.chunks_exact_mut(4) {
                let r = dot4(p, &gallery[j * dim..(j + 4) * dim], dim);
                for (d, v) in d4.iter_mut().zip(r) {
                    *d = S::from_f64_rounded(v);
                }
                j += 4;
            }
            for d in dst.chunks_exact_mut(4).into_remainder() {
                *d = S::from_f64_rounded(dot(p, &gallery[j * dim..(j + 1) * dim]));
                j += 1;
            }
        }
        g0 = g1;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn fill_block_avx2<S: Scalar>(
    probe: &[f64],
    gallery: &[f64],
    dim: usize,
    cols: usize,
    gallery_rows: usize,
    out: &mut [S],
) {
    let rows = out.len() / cols;
    assert!(probe.len() >= rows * dim && gallery.len() >= cols * dim);
    let mut g0 = 0;
    while g0 < cols {
        let g1 = (g0 + gallery_rows).min(cols);
        for i in 0..rows {
            let p = &probe[i * dim..(i + 1) * dim];
            let mut j = g0;
            while j + 4 <= g1 {
                let r = dot4_avx2(p, &gallery[j * dim..(j + 4) * dim], dim);
                for (c, v) in r.into_iter().enumerate() {
                    out[i * cols + j + c] = S::from_f64_rounded(v);
                }
                j += 4;
            }
            while j < g1 {
                out[i * cols + j] = S::from_f64_rounded(dot(p, &gallery[j * dim..(j + 1) * dim]));
                j += 1;
            }
        }
        g0 = g1;
    }
}

/// Fill `out` (a `rows x cols` tile whose probe rows start at `probe`).
fn fill_block<S: Scalar>(probe: &[f64], gallery: &[f64], dim: usize, cols: usize, gallery_rows: usize, out: &mut [S]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { fill_block_avx2(probe, gallery, dim, cols, gallery_rows, out) };
            return;
        }
    }
    fill_block_with(probe, gallery, dim, cols, gallery_rows, out, dot4_portable)
}

fn check_dims<S: Scalar>(probe: &EmbeddingMatrix<S>, gallery: &EmbeddingMatrix<S>) -> Result<()> {
    if probe.dim() != gallery.dim() {
        return Err(Error::DimMismatch {
            expected: gallery.dim(),
            found: probe.dim(),
        });
    }
    Ok(())
}

/// Full cosine similarity matrix with default blocking.
pub fn similarity_matrix<S: Scalar>(
    probe: &EmbeddingMatrix<S>,
    gallery: &EmbeddingMatrix<S>,
) -> Result<SimilarityMatrix<S>> {
    similarity_matrix_blocked(probe, gallery, Blocking::default())
}

/// Cosine similarities computed tile by tile, probe-row tiles in parallel.
/// Every entry is bit-identical for any blocking and thread count.
pub fn similarity_matrix_blocked<S: Scalar>(
    probe: &EmbeddingMatrix<S>,
    gallery: &EmbeddingMatrix<S>,
    blocking: Blocking,
) -> Result<SimilarityMatrix<S>> {
    check_dims(probe, gallery)?;
    let (rows, cols, dim) = (probe.len(), gallery.len(), probe.dim());
    let mut values = vec![S::zero(); rows * cols];
    if rows > 0 && cols > 0 {
        let pn = unit_rows(probe);
        let gn = unit_rows(gallery);
        let tile_rows = blocking.probe_rows.max(1);
        let gallery_rows = blocking.gallery_rows.max(1);
        values
            .par_chunks_mut(tile_rows * cols)
            .enumerate()
            .for_each(|(b, out)| {
                let r0 = b * tile_rows;
                let r1 = r0 + out.len() / cols;
                fill_block(&pn[r0 * dim..r1 * dim], &gn, dim, cols, gallery_rows, out);
            });
    }
    SimilarityMatrix::from_values(probe.ids().to_vec(), gallery.ids().to_vec(), values)
}

/// Stream the similarity matrix through `sink` one probe-row tile at a time.
///
/// `sink(first_row, tile)` receives a `rows x gallery.len()` row-major tile
/// and may be called concurrently from several threads. Peak extra memory is
/// one tile per worker plus the normalized inputs.
pub fn for_each_similarity_block<S, F>(
    probe: &EmbeddingMatrix<S>,
    gallery: &EmbeddingMatrix<S>,
    blocking: Blocking,
    sink: F,
) -> Result<()>
where
    S: Scalar,
    F: Fn(usize, &[S]) + Sync,
{
    check_dims(probe, gallery)?;
    let (rows, cols, dim) = (probe.len(), gallery.len(), probe.dim());
    if rows == 0 || cols == 0 {
        return Ok(());
    }
    let pn = unit_rows(probe);
    let gn = unit_rows(gallery);
    let tile_rows = blocking.probe_rows.max(1);
    let gallery_rows = blocking.gallery_rows.max(1);
    (0..rows.div_ceil(tile_rows)).into_par_iter().for_each(|b| {
        let r0 = b * tile_rows;
        let r1 = (r0 + tile_rows).min(rows);
        let mut tile = vec![S::zero(); (r1 - r0) * cols];
        fill_block(&pn[r0 * dim..r1 * dim], &gn, dim, cols, gallery_rows, &mut tile);
        sink(r0, &tile);
    });
    Ok(())
}

/// `sim(probe_i, gallery_i)` for every `i`; equal to the diagonal of
/// [`similarity_matrix`] bit for bit.
pub fn paired_similarity<S: Scalar>(probe: &EmbeddingMatrix<S>, gallery: &EmbeddingMatrix<S>) -> Result<Vec<S>> {
    check_dims(probe, gallery)?;
    if probe.len() != gallery.len() {
        return Err(Error::InvalidArgument(format!(
            "paired similarity needs equal row counts ({} vs {})",
            probe.len(),
            gallery.len()
        )));
    }
    let dim = probe.dim();
    let pn = unit_rows(probe);
    let gn = unit_rows(gallery);
    Ok((0..probe.len())
        .into_par_iter()
        .map(|i| {
            let mut out = [S::zero()];
            fill_block(&pn[i * dim..(i + 1) * dim], &gn[i * dim..(i + 1) * dim], dim, 1, 1, &mut out);
            out[0]
        })
        .collect())
}

// ---------------------------------------------------------------------------
// FAR calibration and GAR
// ---------------------------------------------------------------------------

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Largest `k <= n` with `k / n <= alpha`, using the same float division as
/// the FAR itself so the two can never disagree.
pub fn acceptance_budget(n: usize, alpha: f64) -> usize {
    let nf = n as f64;
    let mut k = ((alpha * nf).floor().max(0.0) as usize).min(n);
    while k < n && ((k + 1) as f64 / nf) <= alpha {
        k += 1;
    }
    while k > 0 && (k as f64 / nf) > alpha {
        k -= 1;
    }
    k
}

/// Threshold `t` such that accepting `score > t` admits at most a fraction
/// `alpha` of the imposter scores.
///
/// With `k = floor(alpha * N)`, `t` is the `(k+1)`-th largest score (or
/// negative infinity when `k >= N`). Ties at `t` are rejected, so the FAR
/// can fall below `alpha` but never exceed it; no smaller observed score
/// keeps that guarantee.
pub fn far_threshold<S: Scalar>(imposter_scores: &[S], alpha: f64) -> Result<S> {
    check_alpha(alpha)?;
    if imposter_scores.is_empty() {
        return Err(Error::CalibrationUndefined("no imposter scores".into()));
    }
    if imposter_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite imposter score".into()));
    }
    let n = imposter_scores.len();
    let k = acceptance_budget(n, alpha);
    if k >= n {
        return Ok(S::neg_infinity());
    }
    let mut v = imposter_scores.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k, |a, b| Scalar::total_cmp(b, a));
    Ok(*kth)
}

/// Fraction of `scores` strictly above `t`.
pub fn acceptance_rate<S: Scalar>(scores: &[S], t: S) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64
}

/// GAR at the FAR-`alpha` operating point calibrated on the imposter scores.
pub fn gar_at_far_split<S: Scalar>(genuine: &[S], imposter: &[S], alpha: f64) -> Result<f64> {
    if genuine.is_empty() {
        return Err(Error::MetricUndefined("no genuine pairs".into()));
    }
    if imposter.is_empty() {
        return Err(Error::MetricUndefined("no imposter pairs".into()));
    }
    let t = far_threshold(imposter, alpha)?;
    Ok(acceptance_rate(genuine, t))
}

/// GAR at FAR `alpha` over a flat score list with a parallel genuine mask.
pub fn gar_at_far<S: Scalar>(scores: &[S], genuine_mask: &[bool], alpha: f64) -> Result<f64> {
    if scores.len() != genuine_mask.len() {
        return Err(Error::InvalidArgument("score and mask shapes differ".into()));
    }
    let pick = |want: bool| -> Vec<S> {
        scores.iter().zip(genuine_mask).filter(|&(_, &g)| g == want).map(|(&s, _)| s).collect()
    };
    let (genuine, imposter) = (pick(true), pick(false));
    gar_at_far_split(&genuine, &imposter, alpha)
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Retained `(probe, gallery)` pairs, stored as a bitset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMask {
    n: usize,
    words: Vec<u64>,
}

impl PairMask {
    pub fn full(n: usize) -> Self {
        let bits = n * n;
        let mut words = vec![u64::MAX; bits.div_ceil(64)];
        if bits % 64 != 0 {
            *words.last_mut().expect("non-empty") = (1u64 << (bits % 64)) - 1;
        }
        PairMask { n, words }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn retains(&self, i: usize, j: usize) -> bool {
        let b = i * self.n + j;
        self.words[b / 64] >> (b % 64) & 1 == 1
    }

    pub fn remove(&mut self, i: usize, j: usize) {
        let b = i * self.n + j;
        self.words[b / 64] &= !(1u64 << (b % 64));
    }

    pub fn retained_count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn removed_count(&self) -> usize {
        self.n * self.n - self.retained_count()
    }
}

fn check_square_labels<S: Scalar>(sim: &SimilarityMatrix<S>, identities: &[i64]) -> Result<()> {
    if !sim.is_square() || sim.rows() != identities.len() {
        return Err(Error::InvalidArgument(format!(
            "verification needs an n x n similarity matrix with n labels (got {}x{}, {} labels)",
            sim.rows(),
            sim.cols(),
            identities.len()
        )));
    }
    Ok(())
}

/// Genuine and imposter scores over pairs with both ends in `members`.
pub fn subgroup_pair_scores<S: Scalar>(
    sim: &SimilarityMatrix<S>,
    identities: &[i64],
    members: &[usize],
    mask: Option<&PairMask>,
) -> (Vec<S>, Vec<S>) {
    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for &i in members {
        for &j in members {
            if mask.is_some_and(|m| !m.retains(i, j)) {
                continue;
            }
            let s = sim.get(i, j);
            if identities[i] == identities[j] {
                genuine.push(s);
            } else {
                imposter.push(s);
            }
        }
    }
    (genuine, imposter)
}

/// GAR at FAR `alpha` for one subgroup, calibrated on its own imposters.
pub fn subgroup_gar<S: Scalar>(
    sim: &SimilarityMatrix<S>,
    identities: &[i64],
    members: &[usize],
    alpha: f64,
    mask: Option<&PairMask>,
) -> Result<f64> {
    check_square_labels(sim, identities)?;
    let (genuine, imposter) = subgroup_pair_scores(sim, identities, members, mask);
    gar_at_far_split(&genuine, &imposter, alpha)
}

/// GAR(protected) minus GAR(unprotected); cross-subgroup pairs are ignored.
pub fn verification_bias<S: Scalar>(
    sim: &SimilarityMatrix<S>,
    identities: &[i64],
    part: &SubgroupPartition,
    alpha: f64,
    mask: Option<&PairMask>,
) -> Result<f64> {
    let protected = subgroup_gar(sim, identities, &part.protected, alpha, mask)?;
    let unprotected = subgroup_gar(sim, identities, &part.unprotected, alpha, mask)?;
    Ok(protected - unprotected)
}

/// Drop, within each subgroup, the imposter pairs that already pass that
/// subgroup's FAR-`alpha` threshold on unperturbed data.
pub fn prune_verification_pairs<S: Scalar>(
    sim0: &SimilarityMatrix<S>,
    identities: &[i64],
    part: &SubgroupPartition,
    alpha: f64,
) -> Result<PairMask> {
    check_square_labels(sim0, identities)?;
    let mut mask = PairMask::full(sim0.rows());
    for members in [&part.protected, &part.unprotected] {
        let (_, imposter) = subgroup_pair_scores(sim0, identities, members, None);
        let t = far_threshold(&imposter, alpha)?;
        for &i in members.iter() {
            for &j in members.iter() {
                if identities[i] != identities[j] && sim0.get(i, j) > t {
                    mask.remove(i, j);
                }
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Self-matching
// ---------------------------------------------------------------------------

/// `diag(S >= t)`.
pub fn self_match_predictions<S: Scalar>(sim: &SimilarityMatrix<S>, t: f64) -> Result<Vec<bool>> {
    if !sim.is_square() || sim.probe_ids() != sim.gallery_ids() {
        return Err(Error::InvalidArgument(
            "self-matching needs a square matrix with identical probe and gallery ids".into(),
        ));
    }
    Ok(sim.diagonal().into_iter().map(|s| self_match(s, t)).collect())
}

fn rate(pred: &[bool], idx: &[usize]) -> f64 {
    idx.iter().filter(|&&i| pred[i]).count() as f64 / idx.len() as f64
}

/// Fraction of `indices` whose prediction is true.
pub fn match_rate(pred: &[bool], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::MetricUndefined("match rate over an empty set".into()));
    }
    if indices.iter().any(|&i| i >= pred.len()) {
        return Err(Error::InvalidArgument("index outside prediction vector".into()));
    }
    Ok(rate(pred, indices))
}

/// P(match | protected) - P(match | unprotected).
pub fn statistical_imparity(pred: &[bool], part: &SubgroupPartition) -> Result<f64> {
    if part.protected.is_empty() || part.unprotected.is_empty() {
        return Err(Error::SubgroupDegenerate {
            attribute: part.spec.attribute.clone(),
            value: part.spec.value,
            protected: part.protected.len(),
            unprotected: part.unprotected.len(),
        });
    }
    if part.protected.iter().chain(&part.unprotected).any(|&i| i >= pred.len()) {
        return Err(Error::InvalidArgument("partition index outside prediction vector".into()));
    }
    Ok(rate(pred, &part.protected) - rate(pred, &part.unprotected))
}

#[inline]
pub(crate) fn widen<S: Scalar>(s: S) -> f64 {
    s.to_f64().expect("float scores widen to f64")
}

/// `score >= t`, with `t` first rounded to the score precision so a
/// threshold written as a decimal matches the stored score of that decimal.
#[inline]
pub fn self_match<S: Scalar>(score: S, t: f64) -> bool {
    score >= S::from_f64_rounded(t)
}

/// Indices that match themselves (`diag >= t`) and nothing else (`max off-diagonal < t`).
pub fn prune_identities_vpsa<S: Scalar>(sim0: &SimilarityMatrix<S>, t: f64) -> Result<Vec<usize>> {
    if !sim0.is_square() {
        return Err(Error::InvalidArgument("identity pruning needs a square matrix".into()));
    }
    let retained: Vec<usize> = (0..sim0.rows())
        .filter(|&i| {
            let row = sim0.row(i);
            self_match(row[i], t) && row.iter().enumerate().all(|(j, &s)| j == i || !self_match(s, t))
        })
        .collect();
    if retained.is_empty() {
        return Err(Error::EmptyPruning);
    }
    Ok(retained)
}

/// Default self-match threshold: FAR-`alpha` calibration over all
/// off-diagonal pairs of the unperturbed similarity matrix.
pub fn default_self_match_threshold<S: Scalar>(sim0: &SimilarityMatrix<S>, alpha: f64) -> Result<f64> {
    if !sim0.is_square() {
        return Err(Error::InvalidArgument("threshold calibration needs a square matrix".into()));
    }
    let n = sim0.rows();
    let off: Vec<S> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| sim0.get(i, j))
        .collect();
    far_threshold(&off, alpha).map(widen)
}

#[cfg(test)]
mod tests {
    use crate::dataset::SubgroupSpec;

    use super::*;

    fn emb(rows: Vec<Vec<f32>>) -> EmbeddingMatrix<f32> {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        EmbeddingMatrix::from_rows(ids, rows).unwrap()
    }

    fn part(protected: Vec<usize>, unprotected: Vec<usize>) -> SubgroupPartition {
        SubgroupPartition {
            spec: SubgroupSpec::new("A", true),
            protected,
            unprotected,
        }
    }

    #[test]
    fn cosine_examples() {
        let a = emb(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![3.0, -2.0]]);
        let s = similarity_matrix(&a, &a).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(0, 2) - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        for i in 0..4 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_rows_have_zero_similarity() {
        let a = emb(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let s = similarity_matrix(&a, &a).unwrap();
        assert_eq!(s.values(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let a = emb(vec![vec![1.0, 0.0]]);
        let b = emb(vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(similarity_matrix(&a, &b), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn far_threshold_examples() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let t = far_threshold(&scores, 0.01).unwrap();
        assert_eq!(t, 0.99);
        assert_eq!(acceptance_rate(&scores, t), 0.01);

        let scores: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(far_threshold(&scores, 0.01).unwrap(), 49.0);
        assert_eq!(acceptance_rate(&scores, 49.0), 0.0);

        let flat = vec![0.3f32; 40];
        for alpha in [0.01, 0.5, 0.99] {
            let t = far_threshold(&flat, alpha).unwrap();
            assert_eq!(t, 0.3);
            assert_eq!(acceptance_rate(&flat, t), 0.0);
        }
        assert!(matches!(far_threshold::<f32>(&[], 0.01), Err(Error::CalibrationUndefined(_))));
        assert!(far_threshold(&[0.1f32], 0.0).is_err());
        assert!(far_threshold(&[0.1f32], 1.0).is_err());
    }

    #[test]
    fn budget_matches_division() {
        // 0.29 * 100 rounds below 29 in binary floating point.
        assert_eq!(acceptance_budget(100, 0.29), 29);
        assert_eq!(acceptance_budget(100, 0.01), 1);
        assert_eq!(acceptance_budget(50, 0.01), 0);
        assert_eq!(acceptance_budget(0, 0.5), 0);
    }

    #[test]
    fn gar_perfect_separation_and_undefined() {
        let scores = [1.0f32, 1.0, 0.0, 0.0, 0.0];
        let mask = [true, true, false, false, false];
        assert_eq!(gar_at_far(&scores, &mask, 0.01).unwrap(), 1.0);
        assert!(matches!(gar_at_far(&scores, &[true; 5], 0.01), Err(Error::MetricUndefined(_))));
        assert!(matches!(gar_at_far(&scores, &[false; 5], 0.01), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn self_match_examples() {
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let mut v = vec![0.0f32; 9];
        v[0] = 0.9;
        v[4] = 0.5;
        v[8] = 0.7;
        let s = SimilarityMatrix::from_values(ids.clone(), ids.clone(), v).unwrap();
        assert_eq!(self_match_predictions(&s, 0.7).unwrap(), vec![true, false, true]);
        assert_eq!(self_match_predictions(&s, 1.0 + 1e-6).unwrap(), vec![false; 3]);
        let other = SimilarityMatrix::from_values(ids.clone(), vec!["x".into(), "1".into(), "2".into()], vec![0.0; 9]).unwrap();
        assert!(self_match_predictions(&other, 0.5).is_err());
    }

    #[test]
    fn imparity_examples() {
        let p = |v: &[u8]| v.iter().map(|&b| b == 1).collect::<Vec<_>>();
        assert_eq!(statistical_imparity(&p(&[1, 1, 0, 0]), &part(vec![0, 1], vec![2, 3])).unwrap(), 1.0);
        assert_eq!(statistical_imparity(&[true; 4], &part(vec![0], vec![1, 2, 3])).unwrap(), 0.0);
        let v = statistical_imparity(&p(&[1, 0, 1, 0, 1, 0]), &part(vec![0, 1, 2], vec![3, 4, 5])).unwrap();
        assert_eq!(v, 2.0 / 3.0 - 1.0 / 3.0);
        assert!(matches!(
            statistical_imparity(&[true], &part(vec![0], vec![])),
            Err(Error::SubgroupDegenerate { .. })
        ));
    }

    #[test]
    fn vpsa_pruning_examples() {
        let ortho = emb((0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f32).collect()).collect());
        let s = similarity_matrix(&ortho, &ortho).unwrap();
        assert_eq!(prune_identities_vpsa(&s, 0.5).unwrap(), vec![0, 1, 2, 3]);

        let dup = emb(vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let s = similarity_matrix(&dup, &dup).unwrap();
        assert_eq!(prune_identities_vpsa(&s, 0.5).unwrap(), vec![2]);
        assert!(matches!(prune_identities_vpsa(&s, 1.5), Err(Error::EmptyPruning)));
    }

    #[test]
    fn verification_pruning_removes_forced_false_match() {
        // Four images, identities 0,0,1,2; images 1 and 2 collide. Ten ordered
        // imposter pairs at alpha 0.2 leave a budget of two acceptances.
        let e = emb(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.9, 0.0, 0.436, 0.0],
            vec![0.9, 0.0, 0.436, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let s = similarity_matrix(&e, &e).unwrap();
        let labels = [0, 0, 1, 2];
        let p = part(vec![0, 1, 2, 3], vec![]);
        let whole = SubgroupPartition {
            unprotected: vec![0, 1, 2, 3],
            ..p
        };
        let mask = prune_verification_pairs(&s, &labels, &whole, 0.2).unwrap();
        assert!(!mask.retains(1, 2));
        assert!(!mask.retains(2, 1));
        for i in 0..4 {
            assert!(mask.retains(i, i));
        }
        assert!(mask.retains(0, 1));
    }

    #[test]
    fn pair_mask_bits() {
        let mut m = PairMask::full(3);
        assert_eq!(m.retained_count(), 9);
        m.remove(2, 1);
        assert!(!m.retains(2, 1));
        assert!(m.retains(1, 2));
        assert_eq!(m.removed_count(), 1);
        assert_eq!(PairMask::full(8).retained_count(), 64);
    }

    #[test]
    fn streaming_matches_materialized() {
        let rows: Vec<Vec<f32>> = (0..37)
            .map(|i| (0..11).map(|j| ((i * 7 + j * 3) % 13) as f32 - 6.0).collect())
            .collect();
        let a = emb(rows);
        let full = similarity_matrix(&a, &a).unwrap();
        let seen = std::sync::Mutex::new(vec![0.0f32; 37 * 37]);
        for_each_similarity_block(&a, &a, Blocking { probe_rows: 5, gallery_rows: 3 }, |r0, tile| {
            seen.lock().unwrap()[r0 * 37..r0 * 37 + tile.len()].copy_from_slice(tile);
        })
        .unwrap();
        assert_eq!(seen.into_inner().unwrap(), full.values());
        assert_eq!(paired_similarity(&a, &a).unwrap(), full.diagonal());
    }
}
