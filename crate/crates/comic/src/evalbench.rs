//! Multi-frame resilience scoring: track tables chained from pairwise
//! matches, the residual-match score M_score(i, n) split by boundary /
//! interior region classes, and a seeded synthetic scene generator with
//! exact foreground masks for changing-background experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::detector::FeatureSet;
use crate::matcher::MatchRecord;
use crate::raster::{labeled_distance_transform, GrayImage, Point};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("match at pair {0} references feature {1} outside frame {2}")]
    InconsistentInput(usize, usize, usize),
    #[error("sprite leaves the frame at step {0}")]
    TrajectoryOutOfBounds(usize),
    #[error("mask is {0}x{1} but position ({2}, {3}) lies outside it")]
    DimensionMismatch(usize, usize, i32, i32),
}

// ---------------------------------------------------------------- tracks

/// A run of the same physical feature across consecutive frames;
/// `indices[t]` is its index in frame `start_frame + t`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrackChain {
    pub start_frame: usize,
    pub indices: Vec<usize>,
}

impl TrackChain {
    pub fn last_frame(&self) -> usize {
        self.start_frame + self.indices.len() - 1
    }

    pub fn covers(&self, from: usize, to: usize) -> bool {
        self.start_frame <= from && self.last_frame() >= to
    }

    pub fn index_at(&self, frame: usize) -> Option<usize> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|t| self.indices.get(t).copied())
    }
}

#[derive(Debug, Clone)]
pub struct TrackTable {
    pub frames: Vec<FeatureSet>,
    /// matches\[i\] joins frame i to frame i+1; length = frames − 1
    pub matches: Vec<Vec<MatchRecord>>,
    pub chains: Vec<TrackChain>,
}

/// Chain features transitively across the pairwise match lists. A chain
/// breaks at the first frame where its feature goes unmatched.
pub fn build_tracks(
    frames: Vec<FeatureSet>,
    matches: Vec<Vec<MatchRecord>>,
) -> Result<TrackTable, EvalError> {
    assert_eq!(matches.len() + 1, frames.len().max(1));
    // successor per (frame, feature)
    let mut next: Vec<Vec<Option<usize>>> = frames
        .iter()
        .map(|f| vec![None; f.features.len()])
        .collect();
    let mut has_pred: Vec<Vec<bool>> = next
        .iter()
        .map(|v| vec![false; v.len()])
        .collect();
    for (i, pair) in matches.iter().enumerate() {
        for m in pair {
            if m.feature_a >= frames[i].features.len() {
                return Err(EvalError::InconsistentInput(i, m.feature_a, i));
            }
            if m.feature_b >= frames[i + 1].features.len() {
                return Err(EvalError::InconsistentInput(i, m.feature_b, i + 1));
            }
            next[i][m.feature_a] = Some(m.feature_b);
            has_pred[i + 1][m.feature_b] = true;
        }
    }
    let mut chains = Vec::new();
    for f in 0..frames.len() {
        for j in 0..frames[f].features.len() {
            if has_pred[f][j] {
                continue;
            }
            let mut indices = vec![j];
            let (mut cf, mut cj) = (f, j);
            while cf < matches.len() {
                match next[cf][cj] {
                    Some(nj) => {
                        indices.push(nj);
                        cf += 1;
                        cj = nj;
                    }
                    None => break,
                }
            }
            chains.push(TrackChain {
                start_frame: f,
                indices,
            });
        }
    }
    chains.sort();
    Ok(TrackTable {
        frames,
        matches,
        chains,
    })
}

/// Chains spanning at least `n` consecutive matches (n+1 frames) are
/// treated as validated true matches; shorter ones stay unvalidated.
pub const GROUNDTRUTH_N: usize = 5;

pub fn groundtruth_matches(table: &TrackTable) -> Vec<&TrackChain> {
    table
        .chains
        .iter()
        .filter(|c| c.indices.len() >= GROUNDTRUTH_N)
        .collect()
}

// ---------------------------------------------------------------- masks

/// Per-frame foreground mask; boundary band derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub width: usize,
    pub height: usize,
    pub fg: Vec<bool>,
}

impl RegionMask {
    pub fn new(width: usize, height: usize) -> Self {
        RegionMask {
            width,
            height,
            fg: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.fg[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.fg[y * self.width + x] = v;
    }

    /// PGM convention: 0 = background, anything ≥ 128 = foreground.
    pub fn from_image(img: &GrayImage) -> Self {
        RegionMask {
            width: img.width,
            height: img.height,
            fg: img.data.iter().map(|&v| v >= 128).collect(),
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_vec(
            self.width,
            self.height,
            self.fg.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
    }

    /// Euclidean distance from each pixel to the nearest background
    /// pixel; infinite when the mask has no background at all.
    pub fn distance_to_background(&self) -> Vec<f64> {
        let bg: Vec<Point> = (0..self.width * self.height)
            .filter(|&i| !self.fg[i])
            .map(|i| ((i % self.width) as i32, (i / self.width) as i32))
            .collect();
        match labeled_distance_transform(&bg, self.width, self.height) {
            Ok(m) => m.dist,
            Err(_) => vec![f64::INFINITY; self.width * self.height],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionClass {
    Boundary,
    Interior,
    Overall,
}

impl RegionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionClass::Boundary => "boundary",
            RegionClass::Interior => "interior",
            RegionClass::Overall => "overall",
        }
    }
}

/// Default boundary band width in pixels.
pub const BAND: f64 = 5.0;

/// Split features into boundary-band / interior / off-object classes.
/// Off-object features take no part in any score.
pub fn boundary_split(
    features: &FeatureSet,
    mask: &RegionMask,
    band: f64,
) -> Result<(FeatureSet, FeatureSet, FeatureSet), EvalError> {
    let dist = mask.distance_to_background();
    let mut boundary = FeatureSet {
        frame_id: features.frame_id,
        features: Vec::new(),
    };
    let mut interior = boundary.clone();
    let mut off = boundary.clone();
    for f in &features.features {
        let (x, y) = f.position;
        if x < 0 || y < 0 || x as usize >= mask.width || y as usize >= mask.height {
            return Err(EvalError::DimensionMismatch(mask.width, mask.height, x, y));
        }
        let (xu, yu) = (x as usize, y as usize);
        let dst = if !mask.get(xu, yu) {
            &mut off
        } else if dist[yu * mask.width + xu] <= band {
            &mut boundary
        } else {
            &mut interior
        };
        dst.features.push(f.clone());
    }
    Ok((boundary, interior, off))
}

// ---------------------------------------------------------------- scores

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    /// evaluated frame i
    pub frame: usize,
    /// reference frame i − n
    pub reference: usize,
    pub n: usize,
    pub class: RegionClass,
    /// ResM_{i,n} / N_{i−n} in percent
    pub m_score: f64,
    pub resm: usize,
    pub n_detected: usize,
    pub method: String,
}

/// M_score(i, n) per region class: the share of frame-(i−n) detections
/// whose chain survives every one of the following n frames. With no
/// mask only the overall class is produced.
pub fn m_score(
    table: &TrackTable,
    i: usize,
    n: usize,
    mask: Option<&RegionMask>,
    band: f64,
    method: &str,
) -> Result<Vec<ScoreRow>, EvalError> {
    assert!(n >= 1 && i >= n && i < table.frames.len());
    let reference = i - n;
    let base = &table.frames[reference];

    let survives: Vec<bool> = {
        let mut v = vec![false; base.features.len()];
        for c in &table.chains {
            if c.covers(reference, i) {
                v[c.index_at(reference).unwrap()] = true;
            }
        }
        v
    };

    let row = |class: RegionClass, idx: &[usize]| {
        let resm = idx.iter().filter(|&&j| survives[j]).count();
        ScoreRow {
            frame: i,
            reference,
            n,
            class,
            m_score: if idx.is_empty() {
                0.0
            } else {
                100.0 * resm as f64 / idx.len() as f64
            },
            resm,
            n_detected: idx.len(),
            method: method.to_string(),
        }
    };

    match mask {
        None => {
            let all: Vec<usize> = (0..base.features.len()).collect();
            Ok(vec![row(RegionClass::Overall, &all)])
        }
        Some(mask) => {
            let dist = mask.distance_to_background();
            let mut boundary = Vec::new();
            let mut interior = Vec::new();
            for (j, f) in base.features.iter().enumerate() {
                let (x, y) = f.position;
                if x < 0 || y < 0 || x as usize >= mask.width || y as usize >= mask.height {
                    return Err(EvalError::DimensionMismatch(mask.width, mask.height, x, y));
                }
                let (xu, yu) = (x as usize, y as usize);
                if !mask.get(xu, yu) {
                    continue; // off-object: excluded from all scores
                }
                if dist[yu * mask.width + xu] <= band {
                    boundary.push(j);
                } else {
                    interior.push(j);
                }
            }
            let mut on: Vec<usize> = boundary.iter().chain(&interior).copied().collect();
            on.sort_unstable();
            Ok(vec![
                row(RegionClass::Boundary, &boundary),
                row(RegionClass::Interior, &interior),
                row(RegionClass::Overall, &on),
            ])
        }
    }
}

/// Score every fifth frame with the given n and collect the rows.
pub fn score_sequence(
    table: &TrackTable,
    n: usize,
    masks: Option<&[RegionMask]>,
    band: f64,
    method: &str,
) -> Result<Vec<ScoreRow>, EvalError> {
    let mut rows = Vec::new();
    let mut i = n;
    while i < table.frames.len() {
        let mask = masks.map(|ms| &ms[i - n]);
        rows.extend(m_score(table, i, n, mask, band, method)?);
        i += 5;
    }
    Ok(rows)
}

pub fn mean_score(rows: &[ScoreRow], class: RegionClass) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.class == class)
        .map(|r| r.m_score)
        .collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// ---------------------------------------------------------------- reporting

pub fn scores_to_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("frame,i,n,class,m_score,resm,n_detected,method\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{},{}\n",
            r.frame,
            r.reference,
            r.n,
            r.class.as_str(),
            r.m_score,
            r.resm,
            r.n_detected,
            r.method
        ));
    }
    out
}

/// Aligned text table, one row per (frame, class, method).
pub fn scores_to_table(rows: &[ScoreRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>6} {:>6} {:>4} {:<9} {:<10} {:>8} {:>6} {:>10}\n",
        "frame", "ref", "n", "class", "method", "m_score", "resm", "n_detected"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:>6} {:>6} {:>4} {:<9} {:<10} {:>8.2} {:>6} {:>10}\n",
            r.frame,
            r.reference,
            r.n,
            r.class.as_str(),
            r.method,
            r.m_score,
            r.resm,
            r.n_detected
        ));
    }
    out
}

// ---------------------------------------------------------------- synthetic scenes

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgMode {
    Static,
    /// per-frame (dx, dy) drift of one fixed background texture
    Scroll(i32, i32),
    /// fresh background texture every frame
    Regenerate,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub sprite_w: usize,
    pub sprite_h: usize,
    /// top-left sprite corner per frame; length must equal `frames`
    pub trajectory: Vec<Point>,
    pub bg: BgMode,
    pub seed: u64,
}

impl SyntheticScene {
    /// A sprite gliding with constant velocity from `start`.
    pub fn linear(
        width: usize,
        height: usize,
        frames: usize,
        sprite: (usize, usize),
        start: Point,
        velocity: Point,
        bg: BgMode,
        seed: u64,
    ) -> Self {
        SyntheticScene {
            width,
            height,
            frames,
            sprite_w: sprite.0,
            sprite_h: sprite.1,
            trajectory: (0..frames as i32)
                .map(|t| (start.0 + t * velocity.0, start.1 + t * velocity.1))
                .collect(),
            bg,
            seed,
        }
    }
}

/// Smooth value noise in [lo, hi]: a coarse random lattice upsampled
/// bilinearly. Cell size 16 px.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: u8, hi: u8) -> GrayImage {
    const CELL: usize = 16;
    let gw = w / CELL + 2;
    let gh = h / CELL + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let mut img = GrayImage::new(w, h);
    let span = hi as f64 - lo as f64;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / CELL as f64, y as f64 / CELL as f64);
            let (gx, gy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - gx as f64, fy - gy as f64);
            let g = |i: usize, j: usize| grid[j * gw + i];
            let v = g(gx, gy) * (1.0 - tx) * (1.0 - ty)
                + g(gx + 1, gy) * tx * (1.0 - ty)
                + g(gx, gy + 1) * (1.0 - tx) * ty
                + g(gx + 1, gy + 1) * tx * ty;
            img.set(x, y, (lo as f64 + span * v).round() as u8);
        }
    }
    img
}

/// Background texture: dark value noise plus a scatter of dark
/// rectangles, all in [0, 95].
fn background_texture(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    let mut img = value_noise(rng, w, h, 0, 95);
    let count = 6 + rng.random_range(0..6);
    for _ in 0..count {
        let rw = rng.random_range(w / 10..w / 3);
        let rh = rng.random_range(h / 10..h / 3);
        let x0 = rng.random_range(0..w - rw);
        let y0 = rng.random_range(0..h - rh);
        let v: u8 = rng.random_range(0..=95);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                img.set(x, y, v);
            }
        }
    }
    img
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic frames plus exact foreground masks. The sprite is a
/// bright textured rectangle in [160, 255]; the background stays below
/// 96, so the sprite boundary is a strong stable curve in every frame.
pub fn generate_scene(scene: &SyntheticScene) -> Result<Vec<(GrayImage, RegionMask)>, EvalError> {
    assert_eq!(scene.trajectory.len(), scene.frames);
    for (t, &(x, y)) in scene.trajectory.iter().enumerate() {
        if x < 0
            || y < 0
            || x as usize + scene.sprite_w > scene.width
            || y as usize + scene.sprite_h > scene.height
        {
            return Err(EvalError::TrajectoryOutOfBounds(t));
        }
    }
    let sprite = value_noise(
        &mut frame_rng(scene.seed, u64::MAX),
        scene.sprite_w,
        scene.sprite_h,
        160,
        255,
    );
    let static_bg = match scene.bg {
        BgMode::Static | BgMode::Scroll(..) => Some(background_texture(
            &mut frame_rng(scene.seed, 0),
            scene.width,
            scene.height,
        )),
        BgMode::Regenerate => None,
    };

    let frames: Vec<(GrayImage, RegionMask)> = (0..scene.frames)
        .into_par_iter()
        .map(|t| {
            let mut img = match scene.bg {
                BgMode::Static => static_bg.clone().unwrap(),
                BgMode::Scroll(dx, dy) => {
                    let base = static_bg.as_ref().unwrap();
                    let mut out = GrayImage::new(scene.width, scene.height);
                    for y in 0..scene.height {
                        for x in 0..scene.width {
                            let sx = (x as i32 + dx * t as i32).rem_euclid(scene.width as i32);
                            let sy = (y as i32 + dy * t as i32).rem_euclid(scene.height as i32);
                            out.set(x, y, base.get(sx as usize, sy as usize));
                        }
                    }
                    out
                }
                BgMode::Regenerate => background_texture(
                    &mut frame_rng(scene.seed, 1 + t as u64),
                    scene.width,
                    scene.height,
                ),
            };
            let (ox, oy) = scene.trajectory[t];
            let mut mask = RegionMask::new(scene.width, scene.height);
            for sy in 0..scene.sprite_h {
                for sx in 0..scene.sprite_w {
                    let (x, y) = (ox as usize + sx, oy as usize + sy);
                    img.set(x, y, sprite.get(sx, sy));
                    mask.set(x, y, true);
                }
            }
            (img, mask)
        })
        .collect();
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::CurveFeature;
    use crate::isocurve::Polarity;
    use crate::matcher::Pairing;
    use rand::rngs::StdRng;

    fn feat(pos: Point) -> CurveFeature {
        CurveFeature {
            position: pos,
            scale: 8.4,
            kappa: 0.1,
            rho: 50.0,
            level: 128,
            polarity: Polarity::Bright,
            curve: vec![pos],
            corner_index: 0,
            iterations_used: 1,
            converged: true,
        }
    }

    fn frame(id: u64, count: usize) -> FeatureSet {
        FeatureSet {
            frame_id: id,
            features: (0..count).map(|j| feat((j as i32 * 10, 0))).collect(),
        }
    }

    fn pair(i: u64, links: &[(usize, usize)]) -> Vec<MatchRecord> {
        links
            .iter()
            .map(|&(a, b)| MatchRecord {
                frame_a: i,
                frame_b: i + 1,
                feature_a: a,
                feature_b: b,
                ssd: 1.0,
                pairing: Pairing::PosPos,
            })
            .collect()
    }

    #[test]
    fn full_chains_span_all_frames() {
        let frames: Vec<FeatureSet> = (0..6).map(|i| frame(i, 3)).collect();
        let matches: Vec<Vec<MatchRecord>> = (0..5)
            .map(|i| pair(i, &[(0, 0), (1, 1), (2, 2)]))
            .collect();
        let t = build_tracks(frames, matches).unwrap();
        assert_eq!(t.chains.len(), 3);
        assert!(t.chains.iter().all(|c| c.indices.len() == 6 && c.start_frame == 0));
    }

    #[test]
    fn chain_breaks_and_restarts() {
        let frames: Vec<FeatureSet> = (0..6).map(|i| frame(i, 1)).collect();
        // feature unmatched between frames 2 and 3
        let matches: Vec<Vec<MatchRecord>> = (0..5)
            .map(|i| if i == 2 { vec![] } else { pair(i, &[(0, 0)]) })
            .collect();
        let t = build_tracks(frames, matches).unwrap();
        assert_eq!(t.chains.len(), 2);
        assert_eq!((t.chains[0].start_frame, t.chains[0].indices.len()), (0, 3));
        assert_eq!((t.chains[1].start_frame, t.chains[1].indices.len()), (3, 3));
    }

    #[test]
    fn inconsistent_match_rejected() {
        let frames: Vec<FeatureSet> = (0..2).map(|i| frame(i, 2)).collect();
        let matches = vec![pair(0, &[(0, 5)])];
        assert_eq!(
            build_tracks(frames, matches).unwrap_err(),
            EvalError::InconsistentInput(0, 5, 1)
        );
    }

    #[test]
    fn chains_match_path_following_oracle() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let nframes = rng.random_range(3..8);
            let counts: Vec<usize> = (0..nframes).map(|_| rng.random_range(1..6)).collect();
            let frames: Vec<FeatureSet> =
                counts.iter().enumerate().map(|(i, &c)| frame(i as u64, c)).collect();
            let mut matches = Vec::new();
            for i in 0..nframes - 1 {
                let mut links = Vec::new();
                let mut bs: Vec<usize> = (0..counts[i + 1]).collect();
                for a in 0..counts[i] {
                    if bs.is_empty() || rng.random_bool(0.4) {
                        continue;
                    }
                    let b = bs.remove(rng.random_range(0..bs.len()));
                    links.push((a, b));
                }
                matches.push(pair(i as u64, &links));
            }
            let t = build_tracks(frames, matches.clone()).unwrap();

            // oracle: follow successors from every chain head
            let mut succ: Vec<std::collections::HashMap<usize, usize>> = matches
                .iter()
                .map(|p| p.iter().map(|m| (m.feature_a, m.feature_b)).collect())
                .collect();
            succ.push(Default::default());
            let mut expect = Vec::new();
            for f in 0..nframes {
                for j in 0..counts[f] {
                    let incoming =
                        f > 0 && succ[f - 1].values().any(|&b| b == j);
                    if incoming {
                        continue;
                    }
                    let mut idx = vec![j];
                    let (mut cf, mut cj) = (f, j);
                    while let Some(&nj) = succ[cf].get(&cj) {
                        idx.push(nj);
                        cf += 1;
                        cj = nj;
                    }
                    expect.push(TrackChain {
                        start_frame: f,
                        indices: idx,
                    });
                }
            }
            expect.sort();
            assert_eq!(t.chains, expect);
        }
    }

    #[test]
    fn groundtruth_rule_boundary() {
        let frames: Vec<FeatureSet> = (0..6).map(|i| frame(i, 2)).collect();
        // feature 0 tracked 4 pairs (5 frames), feature 1 only 3 (4 frames)
        let matches: Vec<Vec<MatchRecord>> = (0..5)
            .map(|i| match i {
                0..=2 => pair(i, &[(0, 0), (1, 1)]),
                3 => pair(i, &[(0, 0)]),
                _ => vec![],
            })
            .collect();
        let t = build_tracks(frames, matches).unwrap();
        let valid = groundtruth_matches(&t);
        assert_eq!(valid.len(), 1);
        assert_eq!(valid[0].indices.len(), 5);
    }

    #[test]
    fn m_score_all_survive() {
        let frames: Vec<FeatureSet> = (0..6).map(|i| frame(i, 10)).collect();
        let links: Vec<(usize, usize)> = (0..10).map(|j| (j, j)).collect();
        let matches: Vec<Vec<MatchRecord>> = (0..5).map(|i| pair(i, &links)).collect();
        let t = build_tracks(frames, matches).unwrap();
        let rows = m_score(&t, 5, 5, None, BAND, "comic").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].m_score, 100.0);
        assert_eq!((rows[0].resm, rows[0].n_detected), (10, 10));
    }

    #[test]
    fn m_score_seven_of_twenty() {
        let frames: Vec<FeatureSet> = (0..6).map(|i| frame(i, 20)).collect();
        // 7 chains survive all five pairs, the rest die at pair 2
        let matches: Vec<Vec<MatchRecord>> = (0..5)
            .map(|i| {
                let links: Vec<(usize, usize)> = (0..20)
                    .filter(|&j| j < 7 || i != 2)
                    .map(|j| (j, j))
                    .collect();
                pair(i, &links)
            })
            .collect();
        let t = build_tracks(frames, matches).unwrap();
        let rows = m_score(&t, 5, 5, None, BAND, "comic").unwrap();
        assert_eq!(rows[0].m_score, 35.0);
        assert_eq!((rows[0].resm, rows[0].n_detected), (7, 20));
    }

    #[test]
    fn resm_non_increasing_in_n() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(9);
        let frames: Vec<FeatureSet> = (0..8).map(|i| frame(i, 6)).collect();
        let matches: Vec<Vec<MatchRecord>> = (0..7)
            .map(|i| {
                let links: Vec<(usize, usize)> =
                    (0..6).filter(|_| rng.random_bool(0.8)).map(|j| (j, j)).collect();
                pair(i, &links)
            })
            .collect();
        let t = build_tracks(frames, matches).unwrap();
        let mut last = usize::MAX;
        for n in 1..=7 {
            let rows = m_score(&t, 7, n, None, BAND, "m").unwrap();
            assert!(rows[0].resm <= last);
            last = rows[0].resm;
        }
    }

    #[test]
    fn boundary_split_matches_distance_oracle() {
        use rand::Rng;
        // disk mask
        let (w, h, cx, cy, r) = (80usize, 80usize, 40i32, 40i32, 25i64);
        let mut mask = RegionMask::new(w, h);
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let d2 = ((x - cx) as i64).pow(2) + ((y - cy) as i64).pow(2);
                if d2 <= r * r {
                    mask.set(x as usize, y as usize, true);
                }
            }
        }
        let mut rng = StdRng::seed_from_u64(17);
        let fs = FeatureSet {
            frame_id: 0,
            features: (0..200)
                .map(|_| feat((rng.random_range(0..w as i32), rng.random_range(0..h as i32))))
                .collect(),
        };
        let (b, i, o) = boundary_split(&fs, &mask, BAND).unwrap();
        assert_eq!(b.features.len() + i.features.len() + o.features.len(), 200);
        for f in &fs.features {
            let (x, y) = f.position;
            let inside = mask.get(x as usize, y as usize);
            // brute-force distance to nearest background pixel
            let mut dmin = f64::INFINITY;
            for yy in 0..h as i32 {
                for xx in 0..w as i32 {
                    if !mask.get(xx as usize, yy as usize) {
                        let d = (((x - xx).pow(2) + (y - yy).pow(2)) as f64).sqrt();
                        dmin = dmin.min(d);
                    }
                }
            }
            let has = |set: &FeatureSet| set.features.iter().any(|g| g.position == f.position);
            if !inside {
                assert!(has(&o));
            } else if dmin <= BAND {
                assert!(has(&b), "{:?} dmin {dmin}", f.position);
            } else {
                assert!(has(&i), "{:?} dmin {dmin}", f.position);
            }
        }
    }

    #[test]
    fn m_score_classes_partition_on_object() {
        let mut mask = RegionMask::new(40, 40);
        for y in 10..30 {
            for x in 10..30 {
                mask.set(x, y, true);
            }
        }
        let positions = [(5, 5), (11, 11), (20, 20), (28, 20), (35, 35)];
        let frames: Vec<FeatureSet> = (0..6)
            .map(|i| FeatureSet {
                frame_id: i,
                features: positions.iter().map(|&p| feat(p)).collect(),
            })
            .collect();
        let links: Vec<(usize, usize)> = (0..positions.len()).map(|j| (j, j)).collect();
        let matches: Vec<Vec<MatchRecord>> = (0..5).map(|i| pair(i, &links)).collect();
        let t = build_tracks(frames, matches).unwrap();
        let rows = m_score(&t, 5, 5, Some(&mask), BAND, "comic").unwrap();
        let get = |c: RegionClass| rows.iter().find(|r| r.class == c).unwrap();
        let (b, i, ov) = (
            get(RegionClass::Boundary),
            get(RegionClass::Interior),
            get(RegionClass::Overall),
        );
        assert_eq!(b.n_detected + i.n_detected, ov.n_detected);
        assert_eq!(ov.n_detected, 3, "two off-object features excluded");
        assert_eq!(ov.m_score, 100.0);
    }

    #[test]
    fn scene_static_zero_trajectory_identical_frames() {
        let scene = SyntheticScene::linear(
            120, 120, 4, (40, 40), (30, 30), (0, 0), BgMode::Static, 42,
        );
        let frames = generate_scene(&scene).unwrap();
        for (img, mask) in &frames[1..] {
            assert_eq!(img.data, frames[0].0.data);
            assert_eq!(mask, &frames[0].1);
        }
    }

    #[test]
    fn scene_regenerate_fg_constant_bg_changes() {
        let scene = SyntheticScene::linear(
            120, 120, 3, (40, 40), (30, 30), (0, 0), BgMode::Regenerate, 42,
        );
        let frames = generate_scene(&scene).unwrap();
        let mask = &frames[0].1;
        let mut bg_diff = 0usize;
        for y in 0..120 {
            for x in 0..120 {
                if mask.get(x, y) {
                    assert_eq!(frames[0].0.get(x, y), frames[1].0.get(x, y));
                    assert!(frames[0].0.get(x, y) >= 160);
                } else {
                    assert!(frames[0].0.get(x, y) <= 95);
                    if frames[0].0.get(x, y) != frames[1].0.get(x, y) {
                        bg_diff += 1;
                    }
                }
            }
        }
        assert!(bg_diff > 1000, "background barely changed: {bg_diff}");
    }

    #[test]
    fn scene_deterministic() {
        let scene = SyntheticScene::linear(
            100, 100, 5, (30, 30), (10, 10), (5, 3), BgMode::Regenerate, 7,
        );
        let a = generate_scene(&scene).unwrap();
        let b = generate_scene(&scene).unwrap();
        for ((ia, ma), (ib, mb)) in a.iter().zip(&b) {
            assert_eq!(ia.data, ib.data);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn scene_out_of_bounds() {
        let scene = SyntheticScene::linear(
            100, 100, 5, (30, 30), (60, 10), (5, 0), BgMode::Static, 7,
        );
        assert_eq!(
            generate_scene(&scene).unwrap_err(),
            EvalError::TrajectoryOutOfBounds(3)
        );
    }

    #[test]
    fn csv_layout_stable() {
        let rows = vec![ScoreRow {
            frame: 5,
            reference: 0,
            n: 5,
            class: RegionClass::Boundary,
            m_score: 40.9,
            resm: 9,
            n_detected: 22,
            method: "comic".into(),
        }];
        let csv = scores_to_csv(&rows);
        assert_eq!(
            csv,
            "frame,i,n,class,m_score,resm,n_detected,method\n5,0,5,boundary,40.900000,9,22,comic\n"
        );
        assert!(scores_to_table(&rows).contains("boundary"));
    }
}
