//! Two-stage corner detection: coarse initialization on overlapping
//! blocks at twice the working scale, then per-corner convergence to a
//! fixed point that is both maximally stable and a curve corner.

use rayon::prelude::*;
use thiserror::Error;

use crate::cornerness::{nms_along_curve, score_curve, WeightMode};
use crate::isocurve::{
    component_chains, find_msics, find_msics_constrained, nearest_boundary_pixel, segment_around,
    stability, Msics, Polarity, ShapeRef,
};
use crate::raster::{gaussian_weight_field, GrayImage, Point};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("image {0}x{1} smaller than block size {2}")]
    ImageTooSmall(usize, usize, usize),
    #[error("malformed feature line {0}: {1}")]
    Parse(usize, String),
}

/// Ratio of the arc-Gaussian sigma to the segment half-width.
const SIGMA_RATIO: f64 = 0.7;
/// Initial corners closer than this are considered duplicates of the
/// same block-overlap detection.
const INIT_DEDUP_DIST2: i64 = 25;

#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub scale_s: f64,
    pub block_b: usize,
    pub c_scale: f64,
    pub delta: u8,
    pub min_kappa: f64,
    pub min_rho: f64,
    pub max_iterations: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            scale_s: 8.4,
            block_b: 100,
            c_scale: 10.0 / 7.0,
            delta: 5,
            min_kappa: 0.05,
            min_rho: 10.0,
            max_iterations: 10,
        }
    }
}

impl DetectorParams {
    /// Segment half-width k = round(c_scale * s); 12 at the defaults,
    /// for ~25-point segments.
    pub fn k(&self) -> usize {
        (self.c_scale * self.scale_s).round() as usize
    }

    /// Convergence block side f(s) = round(6 s) rounded to even; equals
    /// block_b / 2 at the defaults.
    pub fn conv_block(&self) -> usize {
        ((6.0 * self.scale_s / 2.0).round() as usize) * 2
    }

    /// Initialization delta: delta / 2 rounded up.
    pub fn init_delta(&self) -> u8 {
        self.delta.div_ceil(2)
    }
}

/// A converged CoMIC corner with its certificate data.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveFeature {
    pub position: Point,
    pub scale: f64,
    pub kappa: f64,
    pub rho: f64,
    /// Threshold level in the working space of `polarity`.
    pub level: u8,
    pub polarity: Polarity,
    /// MSICS points in image coordinates; `position` is `curve[corner_index]`.
    pub curve: Vec<Point>,
    pub corner_index: usize,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub frame_id: u64,
    pub features: Vec<CurveFeature>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DetectStats {
    pub attempts: usize,
    pub converged: usize,
    pub cap_hits: usize,
    pub total_iterations: usize,
}

impl DetectStats {
    pub fn mean_iterations(&self) -> f64 {
        if self.converged == 0 {
            0.0
        } else {
            self.total_iterations as f64 / self.converged as f64
        }
    }
}

/// An initial corner from the coarse stage.
#[derive(Debug, Clone)]
pub struct InitialCorner {
    pub position: Point,
    pub level: u8,
    pub polarity: Polarity,
    pub curve: Vec<Point>,
    pub rho: f64,
    pub kappa: f64,
}

// ---------------------------------------------------------------- initialize

/// Coarse corners at scale 2s on overlapping blocks shifted by B/2.
/// No weights are used in this stage.
pub fn initialize(img: &GrayImage, params: &DetectorParams) -> Result<Vec<InitialCorner>, DetectError> {
    let b = params.block_b;
    if img.width < b || img.height < b {
        return Err(DetectError::ImageTooSmall(img.width, img.height, b));
    }
    let k2 = 2 * params.k();
    let xs: Vec<usize> = (0..img.width).step_by(b / 2).collect();
    let ys: Vec<usize> = (0..img.height).step_by(b / 2).collect();
    let blocks: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();

    let mut corners: Vec<InitialCorner> = blocks
        .par_iter()
        .flat_map_iter(|&(bx, by)| {
            let (block, origin) = img.crop_clamped(bx as i32, by as i32, b, b);
            let mut out = Vec::new();
            if block.width < k2 + 1 || block.height < k2 + 1 {
                return out.into_iter();
            }
            let center = (block.width as i32 / 2, block.height as i32 / 2);
            if let Some(m) = find_msics(&block, center, k2, params.init_delta(), None) {
                let seg = &m.segment;
                let scores = score_curve(
                    &seg.points,
                    k2,
                    SIGMA_RATIO * k2 as f64,
                    WeightMode::BoxApprox,
                );
                for s in nms_along_curve(&scores, k2 / 2, params.min_kappa) {
                    let p = seg.points[s.index];
                    out.push(InitialCorner {
                        position: (p.0 + origin.0, p.1 + origin.1),
                        level: seg.level,
                        polarity: seg.polarity,
                        curve: seg
                            .points
                            .iter()
                            .map(|&(x, y)| (x + origin.0, y + origin.1))
                            .collect(),
                        rho: m.stability.rho,
                        kappa: s.kappa,
                    });
                }
            }
            out.into_iter()
        })
        .collect();

    // overlapping blocks re-find the same corner; keep the strongest of
    // each local cluster
    corners.sort_by(|a, b| {
        b.rho
            .partial_cmp(&a.rho)
            .unwrap()
            .then(b.kappa.partial_cmp(&a.kappa).unwrap())
            .then_with(|| (a.position.1, a.position.0).cmp(&(b.position.1, b.position.0)))
    });
    let mut kept: Vec<InitialCorner> = Vec::new();
    for c in corners {
        let dup = kept.iter().any(|k| {
            let (dx, dy) = (
                (k.position.0 - c.position.0) as i64,
                (k.position.1 - c.position.1) as i64,
            );
            dx * dx + dy * dy < INIT_DEDUP_DIST2
        });
        if !dup {
            kept.push(c);
        }
    }
    kept.sort_by_key(|c| (c.position.1, c.position.0));
    Ok(kept)
}

// ---------------------------------------------------------------- convergence

/// Result of one weighted redetection step in a block centered on the
/// current corner.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub position: Point,
    pub level: u8,
    pub polarity: Polarity,
    pub curve: Vec<Point>,
    pub corner_index: usize,
    pub kappa: f64,
    pub msics: Msics,
}

/// One convergence step: center a weighted block of side f(s) on the
/// current corner, redetect the MSICS under the shape-similarity
/// constraint and pick the corner on it nearest the previous one.
/// `None` when the block exits the image, no constrained MSICS exists,
/// or the redetected curve carries no corner.
pub fn convergence_step(
    img: &GrayImage,
    position: Point,
    ref_curve: &[Point],
    ref_level: u8,
    ref_polarity: Polarity,
    params: &DetectorParams,
) -> Option<StepResult> {
    let f = params.conv_block();
    let half = f as i32 / 2;
    let k = params.k();
    let (x0, y0) = (position.0 - half, position.1 - half);
    if x0 < 0 || y0 < 0 || x0 + f as i32 > img.width as i32 || y0 + f as i32 > img.height as i32 {
        return None;
    }
    let (block, origin) = img.crop_clamped(x0, y0, f, f);
    let local_pos = (position.0 - origin.0, position.1 - origin.1);
    let local_ref: Vec<Point> = ref_curve
        .iter()
        .map(|&(x, y)| (x - origin.0, y - origin.1))
        .filter(|&p| block.contains(p))
        .collect();
    if local_ref.is_empty() {
        return None;
    }
    let ref_center = local_ref
        .iter()
        .enumerate()
        .min_by_key(|(_, &(x, y))| {
            ((x - local_pos.0) as i64).pow(2) + ((y - local_pos.1) as i64).pow(2)
        })
        .map(|(i, _)| i)
        .unwrap();
    let wf = gaussian_weight_field(
        &local_ref,
        ref_center,
        block.width,
        block.height,
        SIGMA_RATIO * k as f64,
    )
    .ok()?;
    let shape = ShapeRef {
        polarity: ref_polarity,
        level: ref_level,
        points: local_ref,
    };
    let mut m = find_msics_constrained(&block, local_pos, k, params.delta, Some(&wf), Some(&shape))?;
    let mut pick = pick_corner(&m.segment.points, k, params.min_kappa, local_pos)?;

    // Recenter the curve window on the picked corner so the emitted
    // state is self-consistent: next step's window (centered on the new
    // position) then reproduces this curve and can confirm immediately.
    let wb = match m.segment.polarity {
        Polarity::Bright => block.clone(),
        Polarity::Dark => block.inverted(),
    };
    for _ in 0..4 {
        let corner = m.segment.points[pick.index];
        if corner == m.segment.points[m.segment.center_index] {
            break;
        }
        let Some(seed) = nearest_boundary_pixel(&wb, m.segment.level, corner) else {
            break;
        };
        let chains = component_chains(&wb, m.segment.level, seed);
        let Ok(seg) = segment_around(
            &chains,
            seed,
            k,
            m.segment.level,
            m.segment.polarity,
            k as f64,
        ) else {
            break;
        };
        if seg.points.len() < k + 1 {
            break;
        }
        let Some(p2) = pick_corner(&seg.points, k, params.min_kappa, local_pos) else {
            break;
        };
        m.stability = stability(&seg, &wb, params.delta, Some(&wf));
        m.segment = seg;
        pick = p2;
    }

    let p = m.segment.points[pick.index];
    Some(StepResult {
        position: (p.0 + origin.0, p.1 + origin.1),
        level: m.segment.level,
        polarity: m.segment.polarity,
        curve: m
            .segment
            .points
            .iter()
            .map(|&(x, y)| (x + origin.0, y + origin.1))
            .collect(),
        corner_index: pick.index,
        kappa: pick.kappa,
        msics: m,
    })
}

/// Strongest NMS-surviving corner on the curve; distance to `ref_pos`
/// only breaks exact kappa ties.
fn pick_corner(
    points: &[Point],
    k: usize,
    min_kappa: f64,
    ref_pos: Point,
) -> Option<crate::cornerness::CurvePointScore> {
    let scores = score_curve(points, k, SIGMA_RATIO * k as f64, WeightMode::BoxApprox);
    let survivors = nms_along_curve(&scores, (k / 2).max(1), min_kappa);
    survivors
        .into_iter()
        .max_by(|a, b| {
            let d = |s: &crate::cornerness::CurvePointScore| {
                let (x, y) = points[s.index];
                ((x - ref_pos.0) as i64).pow(2) + ((y - ref_pos.1) as i64).pow(2)
            };
            a.kappa
                .partial_cmp(&b.kappa)
                .unwrap()
                .then(d(b).cmp(&d(a)))
                .then(b.index.cmp(&a.index))
        })
}

#[derive(Debug)]
pub enum ConvergeOutcome {
    Converged(CurveFeature),
    /// iterations spent before hitting the cap
    MaxIterations(usize),
    /// the block left the image, no constrained stable curve remained,
    /// or the iteration entered a cycle and provably cannot settle
    Dropped(usize),
}

/// Iterate convergence steps until both the corner pixel and its curve
/// repeat, which makes the step a verifiable no-op afterwards. A state
/// seen before without being a fixed point means the deterministic step
/// map is cycling, so the attempt is abandoned immediately.
pub fn converge(img: &GrayImage, start: &InitialCorner, params: &DetectorParams) -> ConvergeOutcome {
    let mut pos = start.position;
    let mut curve = start.curve.clone();
    let mut level = start.level;
    let mut polarity = start.polarity;
    let mut seen: Vec<(Point, u8, Polarity, Vec<Point>)> =
        vec![(pos, level, polarity, curve.clone())];
    for it in 1..=params.max_iterations {
        let Some(step) = convergence_step(img, pos, &curve, level, polarity, params) else {
            return ConvergeOutcome::Dropped(it);
        };
        let fixed = step.position == pos
            && step.level == level
            && step.polarity == polarity
            && step.curve == curve;
        if !fixed {
            let state = (step.position, step.level, step.polarity, step.curve.clone());
            if seen.contains(&state) {
                return ConvergeOutcome::Dropped(it);
            }
            seen.push(state);
        }
        if fixed {
            return ConvergeOutcome::Converged(CurveFeature {
                position: pos,
                scale: params.scale_s,
                kappa: step.kappa,
                rho: step.msics.stability.rho,
                level,
                polarity,
                curve: step.curve,
                corner_index: step.corner_index,
                iterations_used: it,
                converged: true,
            });
        }
        pos = step.position;
        curve = step.curve;
        level = step.level;
        polarity = step.polarity;
    }
    ConvergeOutcome::MaxIterations(params.max_iterations)
}

// ---------------------------------------------------------------- detect

pub fn detect(img: &GrayImage, params: &DetectorParams) -> Result<FeatureSet, DetectError> {
    detect_with_stats(img, params).map(|(fs, _)| fs)
}

pub fn detect_with_stats(
    img: &GrayImage,
    params: &DetectorParams,
) -> Result<(FeatureSet, DetectStats), DetectError> {
    let corners = initialize(img, params)?;
    let outcomes: Vec<ConvergeOutcome> = corners
        .par_iter()
        .map(|c| converge(img, c, params))
        .collect();

    let mut stats = DetectStats {
        attempts: outcomes.len(),
        ..Default::default()
    };
    let mut features: Vec<CurveFeature> = Vec::new();
    for o in outcomes {
        match o {
            ConvergeOutcome::Converged(f) => {
                stats.converged += 1;
                stats.total_iterations += f.iterations_used;
                if f.rho >= params.min_rho && f.kappa >= params.min_kappa {
                    features.push(f);
                }
            }
            ConvergeOutcome::MaxIterations(_) => stats.cap_hits += 1,
            ConvergeOutcome::Dropped(_) => {}
        }
    }

    // dedup by exact position: higher rho, then higher kappa, then (y, x)
    features.sort_by(|a, b| {
        (a.position.1, a.position.0)
            .cmp(&(b.position.1, b.position.0))
            .then(b.rho.partial_cmp(&a.rho).unwrap())
            .then(b.kappa.partial_cmp(&a.kappa).unwrap())
    });
    features.dedup_by_key(|f| f.position);

    Ok((
        FeatureSet {
            frame_id: 0,
            features,
        },
        stats,
    ))
}

/// Pick min_rho so the detected count comes as close to `target_n` as
/// the rho distribution allows. One full detection at the floor
/// threshold, then a cutoff on the sorted rho values.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationReport {
    pub target: usize,
    pub achieved: usize,
    pub min_rho: f64,
}

pub fn calibrate_count(
    img: &GrayImage,
    params: &DetectorParams,
    target_n: usize,
) -> Result<(DetectorParams, CalibrationReport), DetectError> {
    assert!(target_n >= 1);
    let mut open = params.clone();
    open.min_rho = 0.0;
    let fs = detect(img, &open)?;
    let mut rhos: Vec<f64> = fs.features.iter().map(|f| f.rho).collect();
    rhos.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut best = (usize::MAX, 0.0f64, 0usize); // (gap, threshold, count)
    let mut cuts: Vec<f64> = rhos.clone();
    cuts.dedup();
    cuts.push(0.0);
    for cut in cuts {
        let count = rhos.iter().filter(|&&r| r >= cut).count();
        let gap = count.abs_diff(target_n);
        if gap < best.0 || (gap == best.0 && cut < best.1) {
            best = (gap, cut, count);
        }
    }
    let mut out = params.clone();
    out.min_rho = best.1;
    Ok((
        out,
        CalibrationReport {
            target: target_n,
            achieved: best.2,
            min_rho: best.1,
        },
    ))
}

// ---------------------------------------------------------------- serialization

/// One feature per line:
/// `frame_id; x,y; scale; kappa; rho; level; x0,y0 x1,y1 ...`
/// Dark-polarity levels are written negated.
pub fn serialize_features(fs: &FeatureSet) -> String {
    let mut out = String::new();
    for f in &fs.features {
        let level = match f.polarity {
            Polarity::Bright => f.level as i32,
            Polarity::Dark => -(f.level as i32),
        };
        out.push_str(&format!(
            "{}; {},{}; {:.6}; {:.6}; {:.6}; {};",
            fs.frame_id, f.position.0, f.position.1, f.scale, f.kappa, f.rho, level
        ));
        for &(x, y) in &f.curve {
            out.push_str(&format!(" {x},{y}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_features(text: &str) -> Result<FeatureSet, DetectError> {
    let mut fs = FeatureSet::default();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| DetectError::Parse(ln + 1, m.to_string());
        let parts: Vec<&str> = line.split(';').map(str::trim).collect();
        if parts.len() != 7 {
            return Err(err("expected 7 ';'-separated fields"));
        }
        fs.frame_id = parts[0].parse().map_err(|_| err("bad frame id"))?;
        let pos = parse_point(parts[1]).ok_or_else(|| err("bad position"))?;
        let scale: f64 = parts[2].parse().map_err(|_| err("bad scale"))?;
        let kappa: f64 = parts[3].parse().map_err(|_| err("bad kappa"))?;
        let rho: f64 = parts[4].parse().map_err(|_| err("bad rho"))?;
        let level_raw: i32 = parts[5].parse().map_err(|_| err("bad level"))?;
        let (level, polarity) = if level_raw < 0 {
            ((-level_raw) as u8, Polarity::Dark)
        } else {
            (level_raw as u8, Polarity::Bright)
        };
        let curve: Vec<Point> = parts[6]
            .split_whitespace()
            .map(parse_point)
            .collect::<Option<_>>()
            .ok_or_else(|| err("bad curve point"))?;
        let corner_index = curve
            .iter()
            .position(|&p| p == pos)
            .ok_or_else(|| err("position not on curve"))?;
        fs.features.push(CurveFeature {
            position: pos,
            scale,
            kappa,
            rho,
            level,
            polarity,
            curve,
            corner_index,
            iterations_used: 0,
            converged: true,
        });
    }
    Ok(fs)
}

fn parse_point(s: &str) -> Option<Point> {
    let (x, y) = s.split_once(',')?;
    Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
}
