//! Turning a saliency map into an ordered partition of the patch grid:
//! min-max normalization, Otsu threshold, 8-connected components, size
//! filter, scoring, and curriculum mixing with random blocks.

use rand::RngExt;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::saliency::SaliencyMap;

/// Attempts at drawing a random block disjoint from already placed regions
/// before falling back to clipping.
pub const DISJOINT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionParams {
    /// Number of regions including the residual.
    pub n: usize,
    /// Components smaller than `alpha * h * w` cells are discarded.
    pub alpha: f64,
    pub bins: usize,
    /// Random-block area as a fraction of the grid.
    pub scale: (f64, f64),
    pub min_patches: usize,
    /// Random-block height / width.
    pub aspect: (f64, f64),
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            n: 5,
            alpha: 0.15,
            bins: 64,
            scale: (0.15, 0.2),
            min_patches: 10,
            aspect: (0.75, 1.5),
        }
    }
}

impl RegionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 2 {
            return bad(format!("region count must be >= 2, got {}", self.n));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.bins < 2 {
            return bad(format!("otsu bins must be >= 2, got {}", self.bins));
        }
        let (s0, s1) = self.scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 < 1.0) {
            return bad(format!("scale range ({s0}, {s1}) must satisfy 0 < lo <= hi < 1"));
        }
        let (a0, a1) = self.aspect;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return bad(format!("aspect range ({a0}, {a1}) must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Discriminative,
    Random,
    Residual,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Discriminative => "discriminative",
            Origin::Random => "random",
            Origin::Residual => "residual",
        }
    }
}

/// Ordered regions `R_1..R_N` partitioning the grid. The last region is
/// the residual and carries no score.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub h: usize,
    pub w: usize,
    /// Cell indices (row-major), each region sorted ascending.
    pub regions: Vec<Vec<usize>>,
    /// Mean normalized saliency of regions `1..N-1`.
    pub scores: Vec<f64>,
    pub origins: Vec<Origin>,
    /// Otsu threshold, absent when the map was degenerate.
    pub tau: Option<f64>,
    pub lambda: f64,
    /// The map gave no usable threshold; every region is random.
    pub fallback: bool,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Region index of every cell.
    pub fn label_grid(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.h * self.w];
        for (k, r) in self.regions.iter().enumerate() {
            for &c in r {
                out[c] = k;
            }
        }
        out
    }

    /// One 0/1 grid per region.
    pub fn masks(&self) -> Vec<Vec<u8>> {
        self.regions
            .iter()
            .map(|r| {
                let mut m = vec![0u8; self.h * self.w];
                for &c in r {
                    m[c] = 1;
                }
                m
            })
            .collect()
    }

    /// Check the partition invariants: nonempty disjoint regions covering
    /// the grid, residual last, scores for all but the residual.
    pub fn validate(&self) -> Result<()> {
        let n = self.h * self.w;
        let mut owner = vec![usize::MAX; n];
        for (k, r) in self.regions.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::invalid(format!("region {k} is empty")));
            }
            for &c in r {
                if c >= n {
                    return Err(Error::invalid(format!("region {k} has cell {c} outside the grid")));
                }
                if owner[c] != usize::MAX {
                    return Err(Error::invalid(format!("cell {c} in regions {} and {k}", owner[c])));
                }
                owner[c] = k;
            }
        }
        if let Some(c) = owner.iter().position(|o| *o == usize::MAX) {
            return Err(Error::invalid(format!("cell {c} not covered")));
        }
        if self.origins.len() != self.regions.len()
            || self.scores.len() + 1 != self.regions.len()
            || self.origins.last() != Some(&Origin::Residual)
        {
            return Err(Error::invalid("region metadata does not match region count"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    /// Input was constant; values are all zero.
    pub degenerate: bool,
}

/// Min-max normalize to [0, 1]. A constant map becomes all zeros with the
/// degenerate flag set.
pub fn normalize_map(map: &SaliencyMap) -> NormalizedMap {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    let values = if degenerate {
        vec![0.0; map.values.len()]
    } else {
        map.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    NormalizedMap {
        h: map.h,
        w: map.w,
        values,
        degenerate,
    }
}

/// Histogram bin of a value in [0, 1].
pub fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in values {
        h[bin_of(v, bins)] += 1;
    }
    h
}

/// Otsu on a histogram: the boundary `b` in `1..bins` (class 1 = bins
/// `>= b`) maximizing between-class variance. Ties take the lowest `b`.
/// Comparisons are exact: `n0 n1 (mu0 - mu1)^2 = (n1 S0 - n0 S1)^2 / (n0 n1)`
/// with `S` the sum of bin indices.
pub fn otsu_boundary(hist: &[u64]) -> Result<usize> {
    if hist.len() < 2 {
        return Err(Error::invalid(format!("otsu needs >= 2 bins, got {}", hist.len())));
    }
    let total_n: u128 = hist.iter().map(|&c| c as u128).sum();
    let total_s: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let overflow = || Error::invalid("histogram too large for exact otsu");
    let (mut n0, mut s0) = (0u128, 0u128);
    // best = num / den
    let mut best: Option<(usize, u128, u128)> = None;
    for b in 1..hist.len() {
        n0 += hist[b - 1] as u128;
        s0 += (b as u128 - 1) * hist[b - 1] as u128;
        let (n1, s1) = (total_n - n0, total_s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = n1.checked_mul(s0).ok_or_else(overflow)?;
        let c = n0.checked_mul(s1).ok_or_else(overflow)?;
        let diff = a.abs_diff(c);
        let num = diff.checked_mul(diff).ok_or_else(overflow)?;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num.checked_mul(bd).ok_or_else(overflow)? > bn.checked_mul(den).ok_or_else(overflow)?,
        };
        if better {
            best = Some((b, num, den));
        }
    }
    best.map(|(b, _, _)| b).ok_or(Error::NoThreshold)
}

/// Otsu threshold `tau = b / bins` for values in [0, 1].
pub fn otsu(values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::invalid(format!("otsu needs >= 2 bins, got {bins}")));
    }
    Ok(otsu_boundary(&histogram(values, bins))? as f64 / bins as f64)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Maximal 8-connected components of the true cells of an `h x w` mask.
/// Each component is sorted; components are ordered by their first cell.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
    if mask.len() != h * w {
        return Err(Error::shape("connected_components", format!("{} cells for {h}x{w}", mask.len())));
    }
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !mask[i] {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut nbrs = [None; 4];
            if c > 0 {
                nbrs[0] = Some(i - 1);
            }
            if r > 0 {
                nbrs[2] = Some(i - w);
                if c > 0 {
                    nbrs[1] = Some(i - w - 1);
                }
                if c + 1 < w {
                    nbrs[3] = Some(i - w + 1);
                }
            }
            for j in nbrs.into_iter().flatten() {
                if mask[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; h * w];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..h * w {
        if mask[i] {
            let root = find(&mut parent, i);
            if slot[root] == usize::MAX {
                slot[root] = out.len();
                out.push(Vec::new());
            }
            out[slot[root]].push(i);
        }
    }
    Ok(out)
}

/// Mean normalized saliency over a region.
pub fn score_region(region: &[usize], map: &NormalizedMap) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::invalid("cannot score an empty region"));
    }
    if let Some(&c) = region.iter().find(|&&c| c >= map.values.len()) {
        return Err(Error::invalid(format!("cell {c} outside the map")));
    }
    Ok(region.iter().map(|&c| map.values[c]).sum::<f64>() / region.len() as f64)
}

/// Thresholded, filtered and ranked components of one map.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub map: NormalizedMap,
    pub tau: f64,
    /// (cells, score), best first.
    pub ranked: Vec<(Vec<usize>, f64)>,
}

/// Normalize, threshold, label and rank. Ranking is by score, then larger
/// size, then smaller first cell. Fails with [`Error::NoThreshold`] on a
/// degenerate map.
pub fn discriminative_candidates(map: &SaliencyMap, p: &RegionParams) -> Result<Candidates> {
    p.validate()?;
    let norm = normalize_map(map);
    if norm.degenerate {
        return Err(Error::NoThreshold);
    }
    let b = otsu_boundary(&histogram(&norm.values, p.bins))?;
    let mask: Vec<bool> = norm.values.iter().map(|&v| bin_of(v, p.bins) >= b).collect();
    let floor = p.alpha * (map.h * map.w) as f64;
    let mut ranked = Vec::new();
    for comp in connected_components(&mask, map.h, map.w)? {
        if (comp.len() as f64) < floor {
            continue;
        }
        let s = score_region(&comp, &norm)?;
        ranked.push((comp, s));
    }
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(b.0.len().cmp(&a.0.len()))
            .then(a.0[0].cmp(&b.0[0]))
    });
    Ok(Candidates {
        map: norm,
        tau: b as f64 / p.bins as f64,
        ranked,
    })
}

/// Cell-count bounds for random blocks on an `h x w` grid.
pub fn block_area_bounds(h: usize, w: usize, scale: (f64, f64), min_patches: usize) -> (usize, usize) {
    let n = (h * w) as f64;
    let lo = ((scale.0 * n - 1e-9).ceil() as usize).max(min_patches);
    let hi = (scale.1 * n + 1e-9).floor() as usize;
    (lo, hi)
}

/// A rectangular block of cells whose area fraction is drawn from `scale`
/// and aspect (height / width) from `aspect`, snapped to the nearest
/// rectangle (in log height and width) whose cell count lies in the
/// admissible range.
pub fn random_block(
    rng: &mut Rng,
    h: usize,
    w: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    min_patches: usize,
) -> Result<Vec<usize>> {
    if min_patches > h * w || h == 0 || w == 0 {
        return Err(Error::Infeasible(format!(
            "a {h}x{w} grid cannot host a block of {min_patches} patches"
        )));
    }
    let (lo, hi) = block_area_bounds(h, w, scale, min_patches);
    let fits = |a: usize| (1..=h).flat_map(move |bh| (1..=w).map(move |bw| (bh, bw))).filter(move |(bh, bw)| bh * bw == a);
    let mut shapes: Vec<(usize, usize)> = (lo..=hi).flat_map(fits).collect();
    if shapes.is_empty() {
        // Nothing in range: use the smallest admissible area above `lo`.
        if let Some(a) = (lo..=h * w).find(|&a| fits(a).next().is_some()) {
            shapes = fits(a).collect();
        }
    }
    if shapes.is_empty() {
        return Err(Error::Infeasible(format!("no rectangle of >= {lo} cells fits a {h}x{w} grid")));
    }
    let s = rng.random_range(scale.0..=scale.1);
    let ar = rng.random_range(aspect.0..=aspect.1);
    let area = s * (h * w) as f64;
    let (th, tw) = ((area * ar).sqrt().ln(), (area / ar).sqrt().ln());
    let mut best = shapes[0];
    let mut best_d = f64::INFINITY;
    for sh in &shapes {
        let d = ((sh.0 as f64).ln() - th).powi(2) + ((sh.1 as f64).ln() - tw).powi(2);
        if d < best_d {
            best_d = d;
            best = *sh;
        }
    }
    let (bh, bw) = best;
    let r0 = rng.random_range(0..=h - bh);
    let c0 = rng.random_range(0..=w - bw);
    let mut cells = Vec::with_capacity(bh * bw);
    for r in r0..r0 + bh {
        for c in c0..c0 + bw {
            cells.push(r * w + c);
        }
    }
    Ok(cells)
}

/// Draw a random block avoiding `taken`, keeping at least one cell free for
/// the residual. After [`DISJOINT_ATTEMPTS`] overlapping draws the draw with
/// the most free cells is clipped to them.
fn place_random(rng: &mut Rng, taken: &[bool], h: usize, w: usize, p: &RegionParams) -> Result<Vec<usize>> {
    let free_total = taken.iter().filter(|t| !**t).count();
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..DISJOINT_ATTEMPTS {
        let block = random_block(rng, h, w, p.scale, p.aspect, p.min_patches)?;
        let free: Vec<usize> = block.iter().copied().filter(|&c| !taken[c]).collect();
        if free.len() == block.len() && free.len() < free_total {
            return Ok(block);
        }
        let mut clipped = free;
        clipped.truncate(free_total.saturating_sub(1));
        if clipped.len() > best.len() {
            best = clipped;
        }
    }
    if best.is_empty() {
        return Err(Error::Infeasible("no free cells left for a random block".into()));
    }
    Ok(best)
}

/// Fill the `n - 1` slots: slot `k` takes candidate `k` when `choose[k]`
/// and that candidate exists, otherwise a random block disjoint from
/// everything placed so far. Discriminative slots are placed first.
fn assemble(
    ranked: &[(Vec<usize>, f64)],
    choose: &[bool],
    h: usize,
    w: usize,
    p: &RegionParams,
    rng: &mut Rng,
) -> Result<(Vec<Vec<usize>>, Vec<Origin>)> {
    let slots = p.n - 1;
    let mut regions: Vec<Option<Vec<usize>>> = vec![None; slots];
    let mut origins = vec![Origin::Random; slots];
    let mut taken = vec![false; h * w];
    for k in 0..slots {
        if choose[k] && k < ranked.len() {
            for &c in &ranked[k].0 {
                taken[c] = true;
            }
            regions[k] = Some(ranked[k].0.clone());
            origins[k] = Origin::Discriminative;
        }
    }
    for slot in regions.iter_mut() {
        if slot.is_none() {
            let mut block = place_random(rng, &taken, h, w, p)?;
            block.sort_unstable();
            for &c in &block {
                taken[c] = true;
            }
            *slot = Some(block);
        }
    }
    let residual: Vec<usize> = (0..h * w).filter(|&c| !taken[c]).collect();
    if residual.is_empty() {
        return Err(Error::Infeasible("selected regions leave no residual".into()));
    }
    let mut out: Vec<Vec<usize>> = regions.into_iter().map(|r| r.expect("filled")).collect();
    out.push(residual);
    origins.push(Origin::Residual);
    Ok((out, origins))
}

fn finish(
    map: &NormalizedMap,
    regions: Vec<Vec<usize>>,
    origins: Vec<Origin>,
    tau: Option<f64>,
    lambda: f64,
    fallback: bool,
) -> Result<RegionSet> {
    let scores = regions[..regions.len() - 1]
        .iter()
        .map(|r| score_region(r, map))
        .collect::<Result<Vec<_>>>()?;
    let set = RegionSet {
        h: map.h,
        w: map.w,
        regions,
        scores,
        origins,
        tau,
        lambda,
        fallback,
    };
    set.validate()?;
    Ok(set)
}

/// Full discriminative selection: the top `n - 1` surviving components by
/// score, any deficit filled with disjoint random blocks, then the
/// residual. Propagates [`Error::NoThreshold`] for degenerate maps.
pub fn select_regions(map: &SaliencyMap, p: &RegionParams, rng: &mut Rng) -> Result<RegionSet> {
    let cands = discriminative_candidates(map, p)?;
    let (regions, origins) = assemble(&cands.ranked, &vec![true; p.n - 1], map.h, map.w, p, rng)?;
    finish(&cands.map, regions, origins, Some(cands.tau), 1.0, false)
}

/// Curriculum probability `clamp(t / total, 0, 1)`; 1 when `total` is 0.
pub fn curriculum_lambda(t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 1.0;
    }
    (t / total).clamp(0.0, 1.0)
}

/// Mix discriminative regions and random blocks: slot `k` uses the k-th
/// ranked component with probability `lambda`, a random block otherwise.
/// Degenerate maps fall back to random blocks everywhere.
pub fn curriculum_select(map: &SaliencyMap, lambda: f64, p: &RegionParams, rng: &mut Rng) -> Result<RegionSet> {
    p.validate()?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let choose: Vec<bool> = (0..p.n - 1).map(|_| rng.random_bool(lambda)).collect();
    let (cands, fallback) = match discriminative_candidates(map, p) {
        Ok(c) => (Some(c), false),
        Err(Error::NoThreshold) => (None, true),
        Err(e) => return Err(e),
    };
    let norm = match &cands {
        Some(c) => c.map.clone(),
        None => normalize_map(map),
    };
    let ranked: &[(Vec<usize>, f64)] = cands.as_ref().map(|c| &c.ranked[..]).unwrap_or(&[]);
    let tau = cands.as_ref().map(|c| c.tau);
    match assemble(ranked, &choose, map.h, map.w, p, rng) {
        Ok((regions, origins)) => finish(&norm, regions, origins, tau, lambda, fallback),
        // Components too large to leave room for the random slots.
        Err(Error::Infeasible(_)) if choose.iter().any(|c| *c) => {
            let (regions, origins) = assemble(&[], &choose, map.h, map.w, p, rng)?;
            finish(&norm, regions, origins, tau, lambda, true)
        }
        Err(e) => Err(e),
    }
}
