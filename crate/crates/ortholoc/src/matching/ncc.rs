//! Self-contained classical matcher: Harris corners in the query matched
//! into the DOP by multi-scale normalized cross-correlation.
//!
//! This exists so the pipeline runs end to end without any model weights.
//! It assumes roughly matching ground sampling distance and orientation
//! between the two images; the rotation wrapper handles quarter-turn
//! orientation differences. Correlation scores in [-1, 1] map to
//! confidences via (score + 1) / 2, so a confidence threshold of 0.5
//! corresponds to zero correlation.

use nalgebra::Vector2;

use super::{Correspondence, CorrespondenceSet, MatchError, Matcher};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NccParams {
    /// Upper bound on returned matches.
    pub n_features: usize,
    /// Odd template side length in pixels.
    pub patch: u32,
    /// Pyramid depth; the full search runs at the coarsest level.
    pub pyramid_levels: u32,
    /// A match is kept only when the second-best correlation peak stays
    /// below this fraction of the best peak.
    pub peak_ratio: f64,
}

impl Default for NccParams {
    fn default() -> Self {
        Self {
            n_features: 256,
            patch: 15,
            pyramid_levels: 3,
            peak_ratio: 0.97,
        }
    }
}

struct Gray {
    w: usize,
    h: usize,
    px: Vec<f32>,
}

impl Gray {
    fn from_raster(r: &Raster) -> Self {
        Gray {
            w: r.width as usize,
            h: r.height as usize,
            px: r.to_gray(),
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        self.px[y * self.w + x]
    }

    /// 2x2 box downsample.
    fn half(&self) -> Gray {
        let w = (self.w / 2).max(1);
        let h = (self.h / 2).max(1);
        let mut px = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let x0 = (2 * x).min(self.w - 1);
                let x1 = (2 * x + 1).min(self.w - 1);
                let y0 = (2 * y).min(self.h - 1);
                let y1 = (2 * y + 1).min(self.h - 1);
                px[y * w + x] =
                    0.25 * (self.at(x0, y0) + self.at(x1, y0) + self.at(x0, y1) + self.at(x1, y1));
            }
        }
        Gray { w, h, px }
    }
}

fn pyramid(g: Gray, levels: u32) -> Vec<Gray> {
    let mut out = vec![g];
    for _ in 1..levels {
        let next = out.last().unwrap().half();
        out.push(next);
    }
    out
}

/// Harris corner positions, strongest first, separated by `min_dist`.
fn harris_corners(g: &Gray, n: usize, min_dist: usize, margin: usize) -> Vec<(usize, usize)> {
    let (w, h) = (g.w, g.h);
    if w < 8 || h < 8 {
        return Vec::new();
    }
    let mut gxx = vec![0.0f32; w * h];
    let mut gyy = vec![0.0f32; w * h];
    let mut gxy = vec![0.0f32; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let dx = 0.5 * (g.at(x + 1, y) - g.at(x - 1, y));
            let dy = 0.5 * (g.at(x, y + 1) - g.at(x, y - 1));
            gxx[y * w + x] = dx * dx;
            gyy[y * w + x] = dy * dy;
            gxy[y * w + x] = dx * dy;
        }
    }
    // 5x5 box smoothing of the structure tensor.
    let box5 = |src: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; w * h];
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let mut s = 0.0;
                for dy in -2i32..=2 {
                    for dx in -2i32..=2 {
                        s += src[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                    }
                }
                out[y * w + x] = s / 25.0;
            }
        }
        out
    };
    let sxx = box5(&gxx);
    let syy = box5(&gyy);
    let sxy = box5(&gxy);

    let mut response = vec![0.0f32; w * h];
    let mut max_r = 0.0f32;
    for i in 0..w * h {
        let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
        let tr = sxx[i] + syy[i];
        let r = det - 0.05 * tr * tr;
        response[i] = r;
        if r > max_r {
            max_r = r;
        }
    }
    if max_r <= 0.0 {
        return Vec::new();
    }
    let threshold = 1e-4 * max_r;

    // 3x3 local maxima above threshold, inside the margin.
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    let m = margin.max(3);
    if h <= 2 * m || w <= 2 * m {
        return Vec::new();
    }
    for y in m..h - m {
        for x in m..w - m {
            let r = response[y * w + x];
            if r <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if response[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize] > r {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((r, x, y));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    // Greedy spacing enforcement.
    let mut out: Vec<(usize, usize)> = Vec::new();
    let d2 = (min_dist * min_dist) as i64;
    for (_, x, y) in candidates {
        if out.len() >= n {
            break;
        }
        let ok = out.iter().all(|&(ox, oy)| {
            let dx = ox as i64 - x as i64;
            let dy = oy as i64 - y as i64;
            dx * dx + dy * dy >= d2
        });
        if ok {
            out.push((x, y));
        }
    }
    out
}

/// Zero-mean, unit-norm template; `None` when the patch is flat.
fn normalized_template(g: &Gray, cx: usize, cy: usize, patch: usize) -> Option<Vec<f32>> {
    let half = patch / 2;
    if cx < half || cy < half || cx + half >= g.w || cy + half >= g.h {
        return None;
    }
    let mut t = Vec::with_capacity(patch * patch);
    for y in cy - half..=cy + half {
        for x in cx - half..=cx + half {
            t.push(g.at(x, y));
        }
    }
    let n = t.len() as f32;
    let mean = t.iter().sum::<f32>() / n;
    let mut norm2 = 0.0f32;
    for v in &mut t {
        *v -= mean;
        norm2 += *v * *v;
    }
    if norm2 < 1e-6 {
        return None;
    }
    let inv = norm2.sqrt().recip();
    for v in &mut t {
        *v *= inv;
    }
    Some(t)
}

/// Summed-area tables for window mean/variance in O(1).
struct Integral {
    w: usize,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Integral {
    fn build(g: &Gray) -> Self {
        let (w, h) = (g.w, g.h);
        let mut s1 = vec![0.0f64; (w + 1) * (h + 1)];
        let mut s2 = vec![0.0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = g.at(x, y) as f64;
                let i = (y + 1) * (w + 1) + (x + 1);
                s1[i] = v + s1[i - 1] + s1[i - w - 1] - s1[i - w - 2];
                s2[i] = v * v + s2[i - 1] + s2[i - w - 1] - s2[i - w - 2];
            }
        }
        Integral { w, s1, s2 }
    }

    /// (sum, sum of squares) over the window with top-left (x, y).
    fn window(&self, x: usize, y: usize, p: usize) -> (f64, f64) {
        let w1 = self.w + 1;
        let (x1, y1) = (x + p, y + p);
        let a = y * w1 + x;
        let b = y * w1 + x1;
        let c = y1 * w1 + x;
        let d = y1 * w1 + x1;
        (
            self.s1[d] - self.s1[b] - self.s1[c] + self.s1[a],
            self.s2[d] - self.s2[b] - self.s2[c] + self.s2[a],
        )
    }
}

/// NCC of a normalized template against the window with top-left (x, y).
fn ncc_score(
    t: &[f32],
    g: &Gray,
    integral: &Integral,
    x: usize,
    y: usize,
    patch: usize,
) -> f64 {
    let n = (patch * patch) as f64;
    let (s1, s2) = integral.window(x, y, patch);
    let var = s2 - s1 * s1 / n;
    if var < 1e-9 {
        return -1.0;
    }
    let mut dot = 0.0f64;
    let mut ti = 0;
    for wy in y..y + patch {
        let row = wy * g.w + x;
        for wx in 0..patch {
            dot += t[ti] as f64 * g.px[row + wx] as f64;
            ti += 1;
        }
    }
    // Template is zero-mean and unit-norm, so only the window needs
    // normalizing; the window-mean term vanishes against the template mean.
    (dot / var.sqrt()).clamp(-1.0, 1.0)
}

struct LevelMatch {
    /// Template center in DOP level coordinates.
    x: f64,
    y: f64,
    score: f64,
}

/// Full search at the coarsest level; returns best and second-best peaks
/// (second best taken outside an exclusion radius around the best).
fn full_search(t: &[f32], g: &Gray, integral: &Integral, patch: usize) -> Option<(LevelMatch, f64)> {
    if g.w < patch || g.h < patch {
        return None;
    }
    let mut best = (-2.0f64, 0usize, 0usize);
    let mut scores = vec![-2.0f64; (g.w - patch + 1) * (g.h - patch + 1)];
    let cols = g.w - patch + 1;
    for y in 0..=g.h - patch {
        for x in 0..=g.w - patch {
            let s = ncc_score(t, g, integral, x, y, patch);
            scores[y * cols + x] = s;
            if s > best.0 {
                best = (s, x, y);
            }
        }
    }
    if best.0 <= -1.5 {
        return None;
    }
    let excl = (patch as i64 / 2).max(3);
    let mut second = -1.0f64;
    for y in 0..=g.h - patch {
        for x in 0..=g.w - patch {
            let dx = x as i64 - best.1 as i64;
            let dy = y as i64 - best.2 as i64;
            if dx * dx + dy * dy <= excl * excl {
                continue;
            }
            let s = scores[y * cols + x];
            if s > second {
                second = s;
            }
        }
    }
    let half = (patch / 2) as f64;
    Some((
        LevelMatch {
            x: best.1 as f64 + half,
            y: best.2 as f64 + half,
            score: best.0,
        },
        second,
    ))
}

/// Local search in a window of radius `r` around a predicted center; returns
/// the refined match with sub-pixel parabola interpolation.
fn local_search(
    t: &[f32],
    g: &Gray,
    integral: &Integral,
    patch: usize,
    cx: f64,
    cy: f64,
    r: i64,
) -> Option<LevelMatch> {
    let half = (patch / 2) as i64;
    let px = cx.round() as i64 - half;
    let py = cy.round() as i64 - half;
    let mut best = (-2.0f64, 0i64, 0i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let x = px + dx;
            let y = py + dy;
            if x < 0 || y < 0 || x + patch as i64 > g.w as i64 || y + patch as i64 > g.h as i64 {
                continue;
            }
            let s = ncc_score(t, g, integral, x as usize, y as usize, patch);
            if s > best.0 {
                best = (s, x, y);
            }
        }
    }
    if best.0 <= -1.5 {
        return None;
    }
    // Sub-pixel refinement by 1D parabola fits along each axis.
    let score_at = |x: i64, y: i64| -> Option<f64> {
        if x < 0 || y < 0 || x + patch as i64 > g.w as i64 || y + patch as i64 > g.h as i64 {
            None
        } else {
            Some(ncc_score(t, g, integral, x as usize, y as usize, patch))
        }
    };
    let mut sub_x = 0.0;
    let mut sub_y = 0.0;
    if let (Some(l), Some(r_)) = (score_at(best.1 - 1, best.2), score_at(best.1 + 1, best.2)) {
        let denom = l - 2.0 * best.0 + r_;
        if denom < -1e-12 {
            sub_x = (0.5 * (l - r_) / denom).clamp(-0.5, 0.5);
        }
    }
    if let (Some(u), Some(d)) = (score_at(best.1, best.2 - 1), score_at(best.1, best.2 + 1)) {
        let denom = u - 2.0 * best.0 + d;
        if denom < -1e-12 {
            sub_y = (0.5 * (u - d) / denom).clamp(-0.5, 0.5);
        }
    }
    Some(LevelMatch {
        x: (best.1 + half) as f64 + sub_x,
        y: (best.2 + half) as f64 + sub_y,
        score: best.0,
    })
}

/// Matches Harris corners of the query into the DOP by coarse-to-fine
/// normalized cross-correlation.
pub fn ncc_match(
    query: &Raster,
    dop: &Raster,
    params: &NccParams,
) -> Result<CorrespondenceSet, MatchError> {
    if params.patch % 2 == 0 || params.patch < 5 {
        return Err(MatchError::NoFeatures);
    }
    let patch = params.patch as usize;
    let q_gray = Gray::from_raster(query);
    let d_gray = Gray::from_raster(dop);
    if q_gray.w == 0 || d_gray.w == 0 {
        return Err(MatchError::NoFeatures);
    }

    // Cap the pyramid so the coarsest DOP level still fits a few templates.
    let mut levels = params.pyramid_levels.max(1);
    while levels > 1 && (d_gray.w.min(d_gray.h) >> (levels - 1)) < 2 * patch {
        levels -= 1;
    }
    while levels > 1 && (q_gray.w.min(q_gray.h) >> (levels - 1)) < 2 * patch {
        levels -= 1;
    }

    let shift = 1usize << (levels - 1);
    let margin = (patch / 2 + 2) * shift;
    let corners = harris_corners(
        &q_gray,
        params.n_features,
        (patch / 2).max(6),
        margin,
    );
    if corners.is_empty() {
        return Err(MatchError::NoFeatures);
    }

    let q_pyr = pyramid(q_gray, levels);
    let d_pyr = pyramid(d_gray, levels);
    let integrals: Vec<Integral> = d_pyr.iter().map(Integral::build).collect();

    let mut pairs = Vec::new();
    'features: for &(fx, fy) in &corners {
        // Coarsest level: full search with the ratio test.
        let top = (levels - 1) as usize;
        let scale_top = (1usize << top) as f64;
        let ctx = ((fx as f64 + 0.5) / scale_top - 0.5).round() as i64;
        let cty = ((fy as f64 + 0.5) / scale_top - 0.5).round() as i64;
        if ctx < 0 || cty < 0 {
            continue;
        }
        let Some(t_top) = normalized_template(&q_pyr[top], ctx as usize, cty as usize, patch)
        else {
            continue;
        };
        let Some((mut m, second)) = full_search(&t_top, &d_pyr[top], &integrals[top], patch)
        else {
            continue;
        };
        if m.score <= 0.0 {
            continue;
        }
        if (second + 1.0) * 0.5 > params.peak_ratio * (m.score + 1.0) * 0.5 {
            continue; // ambiguous peak
        }

        // Refine down the pyramid.
        for level in (0..top).rev() {
            let scale = (1usize << level) as f64;
            let cx = ((fx as f64 + 0.5) / scale - 0.5).round() as i64;
            let cy = ((fy as f64 + 0.5) / scale - 0.5).round() as i64;
            if cx < 0 || cy < 0 {
                continue 'features;
            }
            let Some(t) = normalized_template(&q_pyr[level], cx as usize, cy as usize, patch)
            else {
                continue 'features;
            };
            // Predicted position at this level.
            let pred_x = (m.x + 0.5) * 2.0 - 0.5;
            let pred_y = (m.y + 0.5) * 2.0 - 0.5;
            let Some(refined) =
                local_search(&t, &d_pyr[level], &integrals[level], patch, pred_x, pred_y, 3)
            else {
                continue 'features;
            };
            m = refined;
        }
        if m.score <= 0.0 {
            continue;
        }
        pairs.push(Correspondence {
            query: Vector2::new(fx as f64, fy as f64),
            dop: Vector2::new(m.x, m.y),
            confidence: (m.score + 1.0) * 0.5,
        });
    }

    if pairs.is_empty() {
        return Err(MatchError::NoFeatures);
    }
    Ok(CorrespondenceSet::new_bounded(
        pairs,
        (query.width, query.height),
        (dop.width, dop.height),
    ))
}

/// [`Matcher`] wrapper around [`ncc_match`].
#[derive(Debug, Clone)]
pub struct NccMatcher {
    pub params: NccParams,
}

impl NccMatcher {
    pub fn new(params: NccParams) -> Self {
        Self { params }
    }
}

impl Matcher for NccMatcher {
    fn match_pair(&self, query: &Raster, dop: &Raster) -> Result<CorrespondenceSet, MatchError> {
        ncc_match(query, dop, &self.params)
    }
}
