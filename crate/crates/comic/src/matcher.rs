//! Frame-to-frame matching with SSD computed separately on the two
//! sides of each feature's stable curve (ic+ / ic-), taking the minimum
//! over the four side pairings. Keeps boundary features matchable when
//! the background half of the patch changes.

use rayon::prelude::*;
use thiserror::Error;

use crate::detector::{CurveFeature, FeatureSet};
use crate::isocurve::{is_boundary_pixel, Polarity};
use crate::raster::GrayImage;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("patch around ({0}, {1}) leaves the image")]
    PatchOutOfBounds(i32, i32),
    #[error("no side pairing has enough overlapping pixels")]
    NoAdmissiblePairing,
    #[error("malformed match line {0}: {1}")]
    Parse(usize, String),
}

#[derive(Debug, Clone)]
pub struct MatcherParams {
    pub radius_r: i32,
    pub patch_side: usize,
    pub threshold: f64,
    pub min_side_pixels: usize,
}

impl Default for MatcherParams {
    fn default() -> Self {
        MatcherParams {
            radius_r: 20,
            patch_side: 23,
            threshold: 300.0,
            min_side_pixels: 40,
        }
    }
}

/// Which mask combination produced the accepted distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    PosPos,
    PosNeg,
    NegPos,
    NegNeg,
    /// full-patch score (baseline, or degenerate-split fallback)
    Full,
}

impl Pairing {
    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::PosPos => "++",
            Pairing::PosNeg => "+-",
            Pairing::NegPos => "-+",
            Pairing::NegNeg => "--",
            Pairing::Full => "full",
        }
    }

    fn parse(s: &str) -> Option<Pairing> {
        Some(match s {
            "++" => Pairing::PosPos,
            "+-" => Pairing::PosNeg,
            "-+" => Pairing::NegPos,
            "--" => Pairing::NegNeg,
            "full" => Pairing::Full,
            _ => return None,
        })
    }
}

/// Intensity patch with the two curve-side masks.
#[derive(Debug, Clone)]
pub struct SidedPatch {
    pub side: usize,
    pub intensities: Vec<u8>,
    pub mask_pos: Vec<bool>,
    pub mask_neg: Vec<bool>,
    pub curve_cells: Vec<bool>,
}

impl SidedPatch {
    /// True when the curve failed to split the patch in two; such a
    /// patch scores with a single full mask.
    pub fn degenerate(&self) -> bool {
        !self.mask_pos.iter().any(|&b| b) || !self.mask_neg.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub frame_a: u64,
    pub frame_b: u64,
    pub feature_a: usize,
    pub feature_b: usize,
    pub ssd: f64,
    pub pairing: Pairing,
}

// ---------------------------------------------------------------- patches

/// Cut the patch around the feature and split it along the iso-curve at
/// the feature's level. The curve cells are the boundary pixels of the
/// patch's own level set that connect to the feature's curve; the sides
/// are the 4-connected components of the rest, classed by majority vote
/// of the level predicate (ic+ holds the upper level set).
pub fn make_sided_patch(
    img: &GrayImage,
    feature: &CurveFeature,
    params: &MatcherParams,
) -> Result<SidedPatch, MatchError> {
    let n = params.patch_side;
    let half = n as i32 / 2;
    let (cx, cy) = feature.position;
    let (x0, y0) = (cx - half, cy - half);
    if x0 < 0 || y0 < 0 || x0 + n as i32 > img.width as i32 || y0 + n as i32 > img.height as i32 {
        return Err(MatchError::PatchOutOfBounds(cx, cy));
    }
    let (patch, _) = img.crop_clamped(x0, y0, n, n);
    let work = match feature.polarity {
        Polarity::Bright => patch.clone(),
        Polarity::Dark => patch.inverted(),
    };
    let level = feature.level;

    // boundary pixels of the patch-local level set
    let mut boundary = vec![false; n * n];
    for y in 0..n as i32 {
        for x in 0..n as i32 {
            if is_boundary_pixel(&work, x, y, level) {
                boundary[y as usize * n + x as usize] = true;
            }
        }
    }

    // keep the 8-connected boundary components touching the feature's
    // own curve; fall back to the one nearest the center
    let seeds: Vec<usize> = feature
        .curve
        .iter()
        .filter_map(|&(x, y)| {
            let (px, py) = (x - x0, y - y0);
            if px >= 0 && py >= 0 && (px as usize) < n && (py as usize) < n {
                let i = py as usize * n + px as usize;
                boundary[i].then_some(i)
            } else {
                None
            }
        })
        .collect();
    let seeds = if seeds.is_empty() {
        let c = (half, half);
        (0..n * n)
            .filter(|&i| boundary[i])
            .min_by_key(|&i| {
                let (x, y) = ((i % n) as i32, (i / n) as i32);
                (x - c.0).pow(2) + (y - c.1).pow(2)
            })
            .into_iter()
            .collect()
    } else {
        seeds
    };
    let curve_cells = grow_mask(&boundary, n, &seeds, true);

    // 4-connected components of the complement, classed by majority
    let mut mask_pos = vec![false; n * n];
    let mut mask_neg = vec![false; n * n];
    let mut seen = curve_cells.clone();
    for start in 0..n * n {
        if seen[start] {
            continue;
        }
        let comp = grow_mask(&seen, n, &[start], false);
        let mut above = 0usize;
        let mut total = 0usize;
        for i in 0..n * n {
            if comp[i] {
                seen[i] = true;
                total += 1;
                if work.get(i % n, i / n) >= level {
                    above += 1;
                }
            }
        }
        let dst = if 2 * above >= total { &mut mask_pos } else { &mut mask_neg };
        for i in 0..n * n {
            if comp[i] {
                dst[i] = true;
            }
        }
    }

    let mut out = SidedPatch {
        side: n,
        intensities: patch.data,
        mask_pos,
        mask_neg,
        curve_cells,
    };
    if out.degenerate() {
        out.mask_pos = vec![true; n * n];
        out.mask_neg = vec![false; n * n];
        out.curve_cells = vec![false; n * n];
    }
    Ok(out)
}

/// Flood fill over `base` cells (when `positive`) or over the complement
/// of `base` (when not), 8-connected for curve growth and 4-connected
/// for region growth.
fn grow_mask(base: &[bool], n: usize, seeds: &[usize], curve: bool) -> Vec<bool> {
    let mut out = vec![false; n * n];
    let mut stack: Vec<usize> = seeds.to_vec();
    for &s in seeds {
        out[s] = true;
    }
    let diag = curve;
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % n) as i32, (i / n) as i32);
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if dx == 0 && dy == 0 || (!diag && dx != 0 && dy != 0) {
                    continue;
                }
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx as usize >= n || ny as usize >= n {
                    continue;
                }
                let j = ny as usize * n + nx as usize;
                let inside = if curve { base[j] } else { !base[j] };
                if inside && !out[j] {
                    out[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- ssd

fn masked_ssd(a: &SidedPatch, ma: &[bool], b: &SidedPatch, mb: &[bool]) -> (f64, usize) {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for i in 0..a.intensities.len() {
        if ma[i] && mb[i] {
            let d = a.intensities[i] as f64 - b.intensities[i] as f64;
            sum += d * d;
            count += 1;
        }
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, count)
}

/// Minimum per-pixel SSD over the four side pairings; pairings whose
/// mask intersection is below `min_side_pixels` are inadmissible.
/// Degenerate patches carry a full mask on the positive side, so the
/// comparison gracefully widens to the whole patch.
pub fn sided_ssd(
    a: &SidedPatch,
    b: &SidedPatch,
    min_side_pixels: usize,
) -> Result<(f64, Pairing), MatchError> {
    assert_eq!(a.side, b.side);
    let full = a.degenerate() || b.degenerate();
    let pairings = [
        (Pairing::PosPos, &a.mask_pos, &b.mask_pos),
        (Pairing::PosNeg, &a.mask_pos, &b.mask_neg),
        (Pairing::NegPos, &a.mask_neg, &b.mask_pos),
        (Pairing::NegNeg, &a.mask_neg, &b.mask_neg),
    ];
    let mut best: Option<(f64, Pairing)> = None;
    for (p, ma, mb) in pairings {
        let (ssd, count) = masked_ssd(a, ma, b, mb);
        if count < min_side_pixels {
            continue;
        }
        let p = if full { Pairing::Full } else { p };
        if best.is_none_or(|(b_ssd, _)| ssd < b_ssd) {
            best = Some((ssd, p));
        }
    }
    best.ok_or(MatchError::NoAdmissiblePairing)
}

/// Full-patch per-pixel SSD, the conventional baseline.
pub fn full_patch_ssd(a: &SidedPatch, b: &SidedPatch) -> f64 {
    let ones = vec![true; a.intensities.len()];
    masked_ssd(a, &ones, b, &ones).0
}

// ---------------------------------------------------------------- matching

fn match_frames_impl(
    f1: &FeatureSet,
    img1: &GrayImage,
    f2: &FeatureSet,
    img2: &GrayImage,
    params: &MatcherParams,
    sided: bool,
) -> Vec<MatchRecord> {
    let patches2: Vec<Option<SidedPatch>> = f2
        .features
        .par_iter()
        .map(|f| make_sided_patch(img2, f, params).ok())
        .collect();

    let mut proposals: Vec<MatchRecord> = f1
        .features
        .par_iter()
        .enumerate()
        .filter_map(|(i, fa)| {
            let pa = make_sided_patch(img1, fa, params).ok()?;
            let r2 = (params.radius_r as i64).pow(2);
            let mut best: Option<(f64, Pairing, usize)> = None;
            for (j, fb) in f2.features.iter().enumerate() {
                let (dx, dy) = (
                    (fb.position.0 - fa.position.0) as i64,
                    (fb.position.1 - fa.position.1) as i64,
                );
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let Some(pb) = &patches2[j] else { continue };
                let scored = if sided {
                    sided_ssd(&pa, pb, params.min_side_pixels).ok()
                } else {
                    Some((full_patch_ssd(&pa, pb), Pairing::Full))
                };
                let Some((d, pairing)) = scored else { continue };
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, pairing, j));
                }
            }
            let (d, pairing, j) = best?;
            (d <= params.threshold).then_some(MatchRecord {
                frame_a: f1.frame_id,
                frame_b: f2.frame_id,
                feature_a: i,
                feature_b: j,
                ssd: d,
                pairing,
            })
        })
        .collect();

    // one-to-one: greedy by ascending distance, deterministic tie-break
    proposals.sort_by(|a, b| {
        a.ssd
            .partial_cmp(&b.ssd)
            .unwrap()
            .then(a.feature_a.cmp(&b.feature_a))
            .then(a.feature_b.cmp(&b.feature_b))
    });
    let mut used_a = vec![false; f1.features.len()];
    let mut used_b = vec![false; f2.features.len()];
    let mut out = Vec::new();
    for m in proposals {
        if !used_a[m.feature_a] && !used_b[m.feature_b] {
            used_a[m.feature_a] = true;
            used_b[m.feature_b] = true;
            out.push(m);
        }
    }
    out.sort_by_key(|m| m.feature_a);
    out
}

pub fn match_frames(
    f1: &FeatureSet,
    img1: &GrayImage,
    f2: &FeatureSet,
    img2: &GrayImage,
    params: &MatcherParams,
) -> Vec<MatchRecord> {
    match_frames_impl(f1, img1, f2, img2, params, true)
}

pub fn full_patch_ssd_baseline(
    f1: &FeatureSet,
    img1: &GrayImage,
    f2: &FeatureSet,
    img2: &GrayImage,
    params: &MatcherParams,
) -> Vec<MatchRecord> {
    match_frames_impl(f1, img1, f2, img2, params, false)
}

// ---------------------------------------------------------------- serialization

/// `frame_a,frame_b; idx_a; idx_b; ssd; pairing` per line.
pub fn serialize_matches(matches: &[MatchRecord]) -> String {
    let mut out = String::new();
    for m in matches {
        out.push_str(&format!(
            "{},{}; {}; {}; {:.6}; {}\n",
            m.frame_a,
            m.frame_b,
            m.feature_a,
            m.feature_b,
            m.ssd,
            m.pairing.as_str()
        ));
    }
    out
}

pub fn parse_matches(text: &str) -> Result<Vec<MatchRecord>, MatchError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| MatchError::Parse(ln + 1, m.to_string());
        let parts: Vec<&str> = line.split(';').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(err("expected 5 ';'-separated fields"));
        }
        let (fa, fb) = parts[0]
            .split_once(',')
            .ok_or_else(|| err("bad frame pair"))?;
        out.push(MatchRecord {
            frame_a: fa.trim().parse().map_err(|_| err("bad frame_a"))?,
            frame_b: fb.trim().parse().map_err(|_| err("bad frame_b"))?,
            feature_a: parts[1].parse().map_err(|_| err("bad idx_a"))?,
            feature_b: parts[2].parse().map_err(|_| err("bad idx_b"))?,
            ssd: parts[3].parse().map_err(|_| err("bad ssd"))?,
            pairing: Pairing::parse(parts[4]).ok_or_else(|| err("bad pairing"))?,
        });
    }
    Ok(out)
}
