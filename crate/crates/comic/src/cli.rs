//! Command-line pipeline: detect features, match frames, build tracks,
//! score resilience, generate synthetic scenes and render overlays.
//! All outputs are deterministic files; exit codes distinguish usage
//! (1), I/O (2) and processing (3) failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::detector::{
    detect_with_stats, parse_features, serialize_features, DetectorParams, FeatureSet,
};
use crate::evalbench::{
    build_tracks, generate_scene, mean_score, score_sequence, scores_to_csv, scores_to_table,
    BgMode, RegionClass, RegionMask, SyntheticScene, TrackChain, TrackTable, BAND,
};
use crate::matcher::{
    full_patch_ssd_baseline, match_frames, parse_matches, serialize_matches, MatchRecord,
    MatcherParams,
};
use crate::raster::{load_image, save_pgm, GrayImage};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "COMIC_OUT";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Processing(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Processing(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Processing(m) => m,
        }
    }
}

fn io_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "comic", about = "Corner detection on maximally stable iso-intensity curves", version)]
pub struct Cli {
    /// Worker threads (0 = rayon default)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct DetectFlags {
    /// Working scale s
    #[arg(long, default_value_t = 8.4)]
    pub scale: f64,
    /// Initialization block side B
    #[arg(long, default_value_t = 100)]
    pub block: usize,
    /// Stability probe delta
    #[arg(long, default_value_t = 5)]
    pub delta: u8,
    /// Minimum cornerness kappa
    #[arg(long, default_value_t = 0.05)]
    pub min_kappa: f64,
    /// Minimum stability rho
    #[arg(long, default_value_t = 10.0)]
    pub min_rho: f64,
    /// Convergence iteration cap
    #[arg(long, default_value_t = 10)]
    pub max_iterations: usize,
}

impl DetectFlags {
    pub fn params(&self) -> DetectorParams {
        DetectorParams {
            scale_s: self.scale,
            block_b: self.block,
            delta: self.delta,
            min_kappa: self.min_kappa,
            min_rho: self.min_rho,
            max_iterations: self.max_iterations,
            ..DetectorParams::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MatchFlags {
    /// Candidate search radius r
    #[arg(long, default_value_t = 20)]
    pub radius: i32,
    /// Patch side length
    #[arg(long, default_value_t = 23)]
    pub patch: usize,
    /// Acceptance threshold (mean squared intensity)
    #[arg(long, default_value_t = 300.0)]
    pub threshold: f64,
    /// Minimum mask-intersection pixels per pairing
    #[arg(long, default_value_t = 40)]
    pub min_side_pixels: usize,
}

impl MatchFlags {
    pub fn params(&self) -> MatcherParams {
        MatcherParams {
            radius_r: self.radius,
            patch_side: self.patch,
            threshold: self.threshold,
            min_side_pixels: self.min_side_pixels,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect corner features in one image
    Detect {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: DetectFlags,
    },
    /// Match two feature files between two frames
    Match {
        image_a: PathBuf,
        features_a: PathBuf,
        image_b: PathBuf,
        features_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: MatchFlags,
        /// Use the full-patch SSD baseline instead of sided matching
        #[arg(long)]
        baseline: bool,
    },
    /// Detect + match + chain across an image sequence
    Track {
        /// Directory of frames or explicit frame paths (≥ 2)
        frames: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectFlags,
        #[command(flatten)]
        matching: MatchFlags,
    },
    /// Score track resilience per region class
    Eval {
        /// Directory of frames or explicit frame paths
        frames: Vec<PathBuf>,
        /// Foreground masks (PGM, 0 = background), one per frame
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Survival span n for M_score(i, n)
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Boundary band width in pixels
        #[arg(long, default_value_t = BAND)]
        band: f64,
        /// Also score the full-patch SSD baseline
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        detect: DetectFlags,
        #[command(flatten)]
        matching: MatchFlags,
    },
    /// Generate a synthetic scene from a key=value config
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a feature overlay for an existing image + feature file
    Render {
        image: PathBuf,
        features: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional match file: draws motion vectors into the overlay
        #[arg(long)]
        matches: Option<PathBuf>,
        /// Feature file for the matched frame (required with --matches)
        #[arg(long)]
        features_b: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        // ignore failure: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match cli.command {
        Command::Detect { input, out, flags } => cmd_detect(&input, out, &flags),
        Command::Match {
            image_a,
            features_a,
            image_b,
            features_b,
            out,
            flags,
            baseline,
        } => cmd_match(&image_a, &features_a, &image_b, &features_b, out, &flags, baseline),
        Command::Track {
            frames,
            out,
            detect,
            matching,
        } => cmd_track(&frames, out, &detect, &matching),
        Command::Eval {
            frames,
            masks,
            out,
            n,
            band,
            baseline,
            detect,
            matching,
        } => cmd_eval(&frames, masks, out, n, band, baseline, &detect, &matching),
        Command::Synth { config, out } => cmd_synth(&config, out),
        Command::Render {
            image,
            features,
            out,
            matches,
            features_b,
        } => cmd_render(&image, &features, out, matches, features_b),
    }
}

// ---------------------------------------------------------------- helpers

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(io_err)?;
    Ok(dir)
}

/// Expand a frame argument list: a single directory becomes its sorted
/// image files; explicit paths pass through.
fn expand_frames(args: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    if args.is_empty() {
        return Err(CliError::Usage("no input frames given".into()));
    }
    if args.len() == 1 && args[0].is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&args[0])
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("pgm" | "png")
                )
            })
            .collect();
        files.sort();
        return Ok(files);
    }
    Ok(args.to_vec())
}

fn load_frames(paths: &[PathBuf]) -> Result<Vec<GrayImage>, CliError> {
    paths
        .iter()
        .map(|p| load_image(p).map_err(|e| io_err(format!("{}: {e}", p.display()))))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(format!("{}: {e}", path.display())))
}

fn read_features(path: &Path) -> Result<FeatureSet, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(format!("{}: {e}", path.display())))?;
    parse_features(&text).map_err(|e| CliError::Processing(e.to_string()))
}

// ---------------------------------------------------------------- overlays

const COLOR_CURVE: [u8; 3] = [255, 200, 0];
const COLOR_CORNER: [u8; 3] = [255, 0, 0];
const COLOR_VECTOR: [u8; 3] = [0, 220, 0];
const CORNER_ARM: i32 = 3;

struct Overlay {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Overlay {
    fn from_gray(img: &GrayImage) -> Self {
        let mut rgb = Vec::with_capacity(img.data.len() * 3);
        for &v in &img.data {
            rgb.extend_from_slice(&[v, v, v]);
        }
        Overlay {
            width: img.width,
            height: img.height,
            rgb,
        }
    }

    fn put(&mut self, x: i32, y: i32, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, a: (i32, i32), b: (i32, i32), c: [u8; 3]) {
        let (mut x, mut y) = a;
        let dx = (b.0 - a.0).abs();
        let dy = -(b.1 - a.1).abs();
        let sx = if a.0 < b.0 { 1 } else { -1 };
        let sy = if a.1 < b.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x, y, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn save_png(&self, path: &Path) -> Result<(), CliError> {
        image::save_buffer(
            path,
            &self.rgb,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| io_err(format!("{}: {e}", path.display())))
    }
}

fn draw_features(ov: &mut Overlay, fs: &FeatureSet) {
    for f in &fs.features {
        for &(x, y) in &f.curve {
            ov.put(x, y, COLOR_CURVE);
        }
        let (cx, cy) = f.position;
        for d in -CORNER_ARM..=CORNER_ARM {
            ov.put(cx + d, cy, COLOR_CORNER);
            ov.put(cx, cy + d, COLOR_CORNER);
        }
    }
}

fn draw_vectors(ov: &mut Overlay, a: &FeatureSet, b: &FeatureSet, ms: &[MatchRecord]) {
    for m in ms {
        let pa = a.features[m.feature_a].position;
        let pb = b.features[m.feature_b].position;
        ov.line(pa, pb, COLOR_VECTOR);
    }
}

// ---------------------------------------------------------------- commands

fn cmd_detect(input: &Path, out: Option<PathBuf>, flags: &DetectFlags) -> Result<(), CliError> {
    let dir = out_dir(out)?;
    let img = load_image(input).map_err(|e| io_err(format!("{}: {e}", input.display())))?;
    let (fs, stats) = detect_with_stats(&img, &flags.params())
        .map_err(|e| CliError::Processing(e.to_string()))?;
    write_file(&dir.join("features.txt"), &serialize_features(&fs))?;
    let mut ov = Overlay::from_gray(&img);
    draw_features(&mut ov, &fs);
    ov.save_png(&dir.join("overlay.png"))?;
    println!(
        "detected {} features ({} attempts, {} converged, {} cap hits, mean {:.2} iterations)",
        fs.features.len(),
        stats.attempts,
        stats.converged,
        stats.cap_hits,
        stats.mean_iterations()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_match(
    image_a: &Path,
    features_a: &Path,
    image_b: &Path,
    features_b: &Path,
    out: Option<PathBuf>,
    flags: &MatchFlags,
    baseline: bool,
) -> Result<(), CliError> {
    let dir = out_dir(out)?;
    let img_a = load_image(image_a).map_err(io_err)?;
    let img_b = load_image(image_b).map_err(io_err)?;
    let fa = read_features(features_a)?;
    let fb = read_features(features_b)?;
    let params = flags.params();
    let ms = if baseline {
        full_patch_ssd_baseline(&fa, &img_a, &fb, &img_b, &params)
    } else {
        match_frames(&fa, &img_a, &fb, &img_b, &params)
    };
    write_file(&dir.join("matches.txt"), &serialize_matches(&ms))?;
    println!("{} matches", ms.len());
    Ok(())
}

fn serialize_chains(chains: &[TrackChain]) -> String {
    let mut out = String::new();
    for c in chains {
        out.push_str(&format!("{};", c.start_frame));
        for &i in &c.indices {
            out.push_str(&format!(" {i}"));
        }
        out.push('\n');
    }
    out
}

/// Detect features on every frame of a sequence.
fn detect_sequence(imgs: &[GrayImage], dp: &DetectorParams) -> Result<Vec<FeatureSet>, CliError> {
    let mut sets = Vec::with_capacity(imgs.len());
    for (t, img) in imgs.iter().enumerate() {
        let (mut fs, _) =
            detect_with_stats(img, dp).map_err(|e| CliError::Processing(e.to_string()))?;
        fs.frame_id = t as u64;
        sets.push(fs);
    }
    Ok(sets)
}

/// Pairwise-match a detected sequence and chain the matches.
fn chain_sequence(
    imgs: &[GrayImage],
    sets: &[FeatureSet],
    mp: &MatcherParams,
    baseline: bool,
) -> Result<TrackTable, CliError> {
    let mut matches = Vec::new();
    for t in 0..imgs.len().saturating_sub(1) {
        let ms = if baseline {
            full_patch_ssd_baseline(&sets[t], &imgs[t], &sets[t + 1], &imgs[t + 1], mp)
        } else {
            match_frames(&sets[t], &imgs[t], &sets[t + 1], &imgs[t + 1], mp)
        };
        matches.push(ms);
    }
    build_tracks(sets.to_vec(), matches).map_err(|e| CliError::Processing(e.to_string()))
}

fn run_pipeline(
    imgs: &[GrayImage],
    dp: &DetectorParams,
    mp: &MatcherParams,
    baseline: bool,
) -> Result<TrackTable, CliError> {
    let sets = detect_sequence(imgs, dp)?;
    chain_sequence(imgs, &sets, mp, baseline)
}

fn cmd_track(
    frames: &[PathBuf],
    out: Option<PathBuf>,
    detect: &DetectFlags,
    matching: &MatchFlags,
) -> Result<(), CliError> {
    let paths = expand_frames(frames)?;
    if paths.len() < 2 {
        return Err(CliError::Usage("track needs at least 2 frames".into()));
    }
    let dir = out_dir(out)?;
    let imgs = load_frames(&paths)?;
    let table = run_pipeline(&imgs, &detect.params(), &matching.params(), false)?;
    for (t, fs) in table.frames.iter().enumerate() {
        write_file(
            &dir.join(format!("features_{t:03}.txt")),
            &serialize_features(fs),
        )?;
    }
    for (t, ms) in table.matches.iter().enumerate() {
        write_file(
            &dir.join(format!("matches_{t:03}_{:03}.txt", t + 1)),
            &serialize_matches(ms),
        )?;
    }
    write_file(&dir.join("chains.txt"), &serialize_chains(&table.chains))?;
    for (t, img) in imgs.iter().enumerate() {
        let mut ov = Overlay::from_gray(img);
        draw_features(&mut ov, &table.frames[t]);
        if t + 1 < imgs.len() {
            draw_vectors(&mut ov, &table.frames[t], &table.frames[t + 1], &table.matches[t]);
        }
        ov.save_png(&dir.join(format!("overlay_{t:03}.png")))?;
    }
    println!(
        "{} frames, {} chains",
        table.frames.len(),
        table.chains.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    frames: &[PathBuf],
    masks: Option<PathBuf>,
    out: Option<PathBuf>,
    n: usize,
    band: f64,
    baseline: bool,
    detect: &DetectFlags,
    matching: &MatchFlags,
) -> Result<(), CliError> {
    let paths = expand_frames(frames)?;
    if paths.len() <= n {
        return Err(CliError::Usage(format!(
            "eval needs more than n = {n} frames, got {}",
            paths.len()
        )));
    }
    let dir = out_dir(out)?;
    let imgs = load_frames(&paths)?;
    let masks = match masks {
        Some(mdir) => {
            let mpaths = expand_frames(&[mdir])?;
            if mpaths.len() != imgs.len() {
                return Err(CliError::Usage(format!(
                    "{} masks for {} frames",
                    mpaths.len(),
                    imgs.len()
                )));
            }
            Some(
                load_frames(&mpaths)?
                    .iter()
                    .map(RegionMask::from_image)
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let dp = detect.params();
    let mp = matching.params();
    let sets = detect_sequence(&imgs, &dp)?;
    let table = chain_sequence(&imgs, &sets, &mp, false)?;
    let mut rows = score_sequence(&table, n, masks.as_deref(), band, "comic")
        .map_err(|e| CliError::Processing(e.to_string()))?;
    if baseline {
        let bt = chain_sequence(&imgs, &sets, &mp, true)?;
        rows.extend(
            score_sequence(&bt, n, masks.as_deref(), band, "full-patch")
                .map_err(|e| CliError::Processing(e.to_string()))?,
        );
    }
    write_file(&dir.join("scores.csv"), &scores_to_csv(&rows))?;
    write_file(&dir.join("scores.txt"), &scores_to_table(&rows))?;
    println!(
        "overall mean M_score({n}) = {:.2}",
        mean_score(&rows, RegionClass::Overall)
    );
    Ok(())
}

/// Scene configs are plain `key = value` lines; `#` starts a comment.
/// Keys: width, height, frames, sprite_w, sprite_h, start_x, start_y,
/// vel_x, vel_y, seed, bg (static | scroll:dx,dy | regen).
pub fn parse_scene_config(text: &str) -> Result<SyntheticScene, CliError> {
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("bad config line: {line}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get_num = |k: &str, default: i64| -> Result<i64, CliError> {
        match kv.get(k) {
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("bad value for {k}: {v}"))),
            None => Ok(default),
        }
    };
    let bg = match kv.get("bg").map(String::as_str).unwrap_or("static") {
        "static" => BgMode::Static,
        "regen" => BgMode::Regenerate,
        s if s.starts_with("scroll:") => {
            let rest = &s["scroll:".len()..];
            let (dx, dy) = rest
                .split_once(',')
                .ok_or_else(|| CliError::Usage(format!("bad bg mode: {s}")))?;
            BgMode::Scroll(
                dx.trim().parse().map_err(|_| CliError::Usage(format!("bad bg mode: {s}")))?,
                dy.trim().parse().map_err(|_| CliError::Usage(format!("bad bg mode: {s}")))?,
            )
        }
        s => return Err(CliError::Usage(format!("bad bg mode: {s}"))),
    };
    Ok(SyntheticScene::linear(
        get_num("width", 400)? as usize,
        get_num("height", 400)? as usize,
        get_num("frames", 10)? as usize,
        (
            get_num("sprite_w", 120)? as usize,
            get_num("sprite_h", 120)? as usize,
        ),
        (get_num("start_x", 50)? as i32, get_num("start_y", 50)? as i32),
        (get_num("vel_x", 0)? as i32, get_num("vel_y", 0)? as i32),
        bg,
        get_num("seed", 1)? as u64,
    ))
}

fn cmd_synth(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = out_dir(out)?;
    let text =
        fs::read_to_string(config).map_err(|e| io_err(format!("{}: {e}", config.display())))?;
    let scene = parse_scene_config(&text)?;
    let frames = generate_scene(&scene).map_err(|e| CliError::Processing(e.to_string()))?;
    for (t, (img, mask)) in frames.iter().enumerate() {
        save_pgm(img, dir.join(format!("frame_{t:03}.pgm"))).map_err(io_err)?;
        save_pgm(&mask.to_image(), dir.join(format!("mask_{t:03}.pgm"))).map_err(io_err)?;
    }
    println!("{} frames written to {}", frames.len(), dir.display());
    Ok(())
}

fn cmd_render(
    image: &Path,
    features: &Path,
    out: Option<PathBuf>,
    matches: Option<PathBuf>,
    features_b: Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out_dir(out)?;
    let img = load_image(image).map_err(io_err)?;
    let fs = read_features(features)?;
    let mut ov = Overlay::from_gray(&img);
    draw_features(&mut ov, &fs);
    if let Some(mpath) = matches {
        let fb_path = features_b
            .ok_or_else(|| CliError::Usage("--matches requires --features-b".into()))?;
        let fb = read_features(&fb_path)?;
        let text =
            fs::read_to_string(&mpath).map_err(|e| io_err(format!("{}: {e}", mpath.display())))?;
        let ms = parse_matches(&text).map_err(|e| CliError::Processing(e.to_string()))?;
        draw_vectors(&mut ov, &fs, &fb, &ms);
    }
    ov.save_png(&dir.join("overlay.png"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_config_round_trip() {
        let text = "width = 300\nheight=200 # comment\nframes = 6\nbg = scroll:2,-1\nseed = 9\n";
        let s = parse_scene_config(text).unwrap();
        assert_eq!((s.width, s.height, s.frames), (300, 200, 6));
        assert_eq!(s.bg, BgMode::Scroll(2, -1));
        assert_eq!(s.seed, 9);
    }

    #[test]
    fn scene_config_rejects_junk() {
        assert!(parse_scene_config("bg = rainbow").is_err());
        assert!(parse_scene_config("width ten").is_err());
        assert!(parse_scene_config("width = ten").is_err());
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Io(String::new()).exit_code(), 2);
        assert_eq!(CliError::Processing(String::new()).exit_code(), 3);
    }

    #[test]
    fn overlay_line_endpoints() {
        let img = GrayImage::new(10, 10);
        let mut ov = Overlay::from_gray(&img);
        ov.line((1, 1), (8, 5), COLOR_VECTOR);
        let at = |x: usize, y: usize| {
            let i = (y * 10 + x) * 3;
            [ov.rgb[i], ov.rgb[i + 1], ov.rgb[i + 2]]
        };
        assert_eq!(at(1, 1), COLOR_VECTOR);
        assert_eq!(at(8, 5), COLOR_VECTOR);
    }
}
