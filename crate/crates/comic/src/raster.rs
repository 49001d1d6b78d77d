//! Image representation, I/O and the low-level numeric kernels
//! (distance transform, iterated box filter) the pipeline builds on.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported or malformed image: {0}")]
    Format(String),
    #[error("empty curve")]
    EmptyCurve,
}

/// Integer pixel coordinate, (x, y) with y growing downward.
pub type Point = (i32, i32);

/// 8-bit single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        GrayImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn contains(&self, p: Point) -> bool {
        p.0 >= 0 && p.1 >= 0 && (p.0 as usize) < self.width && (p.1 as usize) < self.height
    }

    /// Pixel-wise inversion (255 - v). Used for the dark-polarity pass.
    pub fn inverted(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 255 - v).collect(),
        }
    }

    /// Copy of the axis-aligned window clamped to the image bounds.
    /// Returns the sub-image and the (x, y) of its top-left corner.
    pub fn crop_clamped(&self, x0: i32, y0: i32, w: usize, h: usize) -> (GrayImage, Point) {
        let x0 = x0.clamp(0, self.width as i32);
        let y0 = y0.clamp(0, self.height as i32);
        let x1 = (x0 + w as i32).min(self.width as i32);
        let y1 = (y0 + h as i32).min(self.height as i32);
        let (cw, ch) = ((x1 - x0) as usize, (y1 - y0) as usize);
        let mut data = Vec::with_capacity(cw * ch);
        for y in y0..y1 {
            let row = y as usize * self.width;
            data.extend_from_slice(&self.data[row + x0 as usize..row + x1 as usize]);
        }
        (GrayImage::from_vec(cw, ch, data), (x0, y0))
    }
}

/// Per-pixel non-negative weights sharing a block's dimensions.
#[derive(Debug, Clone)]
pub struct WeightField {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl WeightField {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }
}

/// Exact Euclidean distance to the nearest curve point, with the index
/// of that point recorded per pixel.
#[derive(Debug, Clone)]
pub struct LabeledDistanceMap {
    pub width: usize,
    pub height: usize,
    pub dist: Vec<f64>,
    pub label: Vec<u32>,
}

impl LabeledDistanceMap {
    #[inline]
    pub fn dist_at(&self, x: usize, y: usize) -> f64 {
        self.dist[y * self.width + x]
    }

    #[inline]
    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.label[y * self.width + x]
    }
}

// ---------------------------------------------------------------- I/O

pub fn load_image<P: AsRef<Path>>(path: P) -> Result<GrayImage, RasterError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" => {
            let mut buf = Vec::new();
            std::fs::File::open(path)?.read_to_end(&mut buf)?;
            decode_pgm(&buf)
        }
        "png" => {
            let img = image::open(path)
                .map_err(|e| RasterError::Format(format!("png decode: {e}")))?
                .to_luma8();
            Ok(GrayImage::from_vec(
                img.width() as usize,
                img.height() as usize,
                img.into_raw(),
            ))
        }
        other => Err(RasterError::Format(format!(
            "unsupported extension '{other}' (expected pgm or png)"
        ))),
    }
}

pub fn save_pgm<P: AsRef<Path>>(img: &GrayImage, path: P) -> Result<(), RasterError> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.data)?;
    Ok(())
}

pub fn decode_pgm(buf: &[u8]) -> Result<GrayImage, RasterError> {
    let mut pos = 0usize;
    let mut token = |buf: &[u8]| -> Result<String, RasterError> {
        // skip whitespace and '#' comments
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RasterError::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };

    let magic = token(buf)?;
    if magic != "P5" {
        return Err(RasterError::Format(format!("not a P5 PGM: '{magic}'")));
    }
    let width: usize = token(buf)?
        .parse()
        .map_err(|_| RasterError::Format("bad width".into()))?;
    let height: usize = token(buf)?
        .parse()
        .map_err(|_| RasterError::Format("bad height".into()))?;
    let maxval: usize = token(buf)?
        .parse()
        .map_err(|_| RasterError::Format("bad maxval".into()))?;
    if maxval != 255 {
        return Err(RasterError::Format(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if buf.len() < pos + need {
        return Err(RasterError::Format("truncated PGM pixel data".into()));
    }
    Ok(GrayImage::from_vec(
        width,
        height,
        buf[pos..pos + need].to_vec(),
    ))
}

// ---------------------------------------------------------------- resize

/// Bilinear resize to `target_h`, preserving aspect ratio.
pub fn resize_to_height(img: &GrayImage, target_h: usize) -> GrayImage {
    assert!(target_h >= 1);
    if target_h == img.height {
        return img.clone();
    }
    let target_w = ((img.width * target_h + img.height / 2) / img.height).max(1);
    let mut out = GrayImage::new(target_w, target_h);
    let sx = img.width as f64 / target_w as f64;
    let sy = img.height as f64 / target_h as f64;
    for y in 0..target_h {
        // sample at the pixel-center mapping
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, img.height as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..target_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, img.width as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let v = img.get(x0, y0) as f64 * (1.0 - wx) * (1.0 - wy)
                + img.get(x1, y0) as f64 * wx * (1.0 - wy)
                + img.get(x0, y1) as f64 * (1.0 - wx) * wy
                + img.get(x1, y1) as f64 * wx * wy;
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

// ---------------------------------------------------------------- box filter

/// `passes` applications of a centered moving average of window 2r+1,
/// clamping at the sequence edges. Approximates a 1D Gaussian of
/// variance passes * r(r+1)/3.
pub fn iterated_box_filter_1d(values: &[f64], radius: usize, passes: usize) -> Vec<f64> {
    assert!(radius >= 1 && passes >= 1);
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mut cur = values.to_vec();
    let window = (2 * radius + 1) as f64;
    for _ in 0..passes {
        let mut next = vec![0.0; n];
        // prefix sums over the clamp-extended sequence
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + cur[i];
        }
        let r = radius as i64;
        for (i, out) in next.iter_mut().enumerate() {
            let lo = i as i64 - r;
            let hi = i as i64 + r;
            let mut sum = 0.0;
            if lo < 0 {
                sum += (-lo) as f64 * cur[0];
            }
            if hi > n as i64 - 1 {
                sum += (hi - (n as i64 - 1)) as f64 * cur[n - 1];
            }
            let a = lo.clamp(0, n as i64) as usize;
            let b = (hi + 1).clamp(0, n as i64) as usize;
            sum += prefix[b] - prefix[a];
            *out = sum / window;
        }
        cur = next;
    }
    cur
}

/// Box-filter parameters whose iterated variance best matches sigma^2
/// with a fixed number of passes.
pub fn box_radius_for_sigma(sigma: f64, passes: usize) -> usize {
    // passes * r(r+1)/3 = sigma^2  =>  r(r+1) = 3 sigma^2 / passes
    let target = 3.0 * sigma * sigma / passes as f64;
    let r = (-0.5 + (0.25 + target).sqrt()).round() as i64;
    r.max(1) as usize
}

// ---------------------------------------------------------------- distance transform

/// Exact Euclidean distance transform with nearest-point labels, via the
/// two-pass lower-envelope method (columns then rows).
pub fn labeled_distance_transform(
    curve: &[Point],
    w: usize,
    h: usize,
) -> Result<LabeledDistanceMap, RasterError> {
    if curve.is_empty() {
        return Err(RasterError::EmptyCurve);
    }
    const INF: f64 = f64::INFINITY;
    // Pass 1: per column, squared distance to the nearest source in that
    // column along y, plus its curve index.
    let mut d1 = vec![INF; w * h];
    let mut l1 = vec![u32::MAX; w * h];
    for (i, &(x, y)) in curve.iter().enumerate() {
        debug_assert!(x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h);
        let idx = y as usize * w + x as usize;
        if d1[idx] > 0.0 {
            d1[idx] = 0.0;
            l1[idx] = i as u32;
        }
    }
    for x in 0..w {
        // downward then upward sweep of |dy|
        let mut best: Option<(i64, u32)> = None; // (source y, label)
        for y in 0..h {
            let idx = y * w + x;
            if d1[idx] == 0.0 {
                best = Some((y as i64, l1[idx]));
            } else if let Some((sy, sl)) = best {
                d1[idx] = (y as i64 - sy) as f64;
                l1[idx] = sl;
            }
        }
        best = None;
        for y in (0..h).rev() {
            let idx = y * w + x;
            if d1[idx] == 0.0 && l1[idx] != u32::MAX && curve[l1[idx] as usize].1 == y as i32 {
                best = Some((y as i64, l1[idx]));
            } else if let Some((sy, sl)) = best {
                let d = (sy - y as i64) as f64;
                if d < d1[idx] {
                    d1[idx] = d;
                    l1[idx] = sl;
                }
            }
        }
        // square the column distances
        for y in 0..h {
            let idx = y * w + x;
            if d1[idx].is_finite() {
                d1[idx] *= d1[idx];
            }
        }
    }

    // Pass 2: per row, lower envelope of parabolas rooted at (q, d1[q]).
    let mut dist = vec![0.0f64; w * h];
    let mut label = vec![0u32; w * h];
    let mut v = vec![0usize; w]; // parabola roots
    let mut z = vec![0.0f64; w + 1]; // envelope breakpoints
    for y in 0..h {
        let row = y * w;
        let f = |q: usize| d1[row + q];
        let mut k = 0usize;
        let mut started = false;
        for q in 0..w {
            if !f(q).is_finite() {
                continue;
            }
            if !started {
                v[0] = q;
                z[0] = -INF;
                z[1] = INF;
                started = true;
                continue;
            }
            loop {
                let p = v[k];
                let s = (f(q) + (q * q) as f64 - f(p) - (p * p) as f64)
                    / (2.0 * (q as f64 - p as f64));
                if s <= z[k] {
                    if k == 0 {
                        v[0] = q;
                        z[0] = -INF;
                        z[1] = INF;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = INF;
                    break;
                }
            }
        }
        assert!(started, "curve non-empty so every row sees some parabola");
        let mut k2 = 0usize;
        for x in 0..w {
            while z[k2 + 1] < x as f64 {
                k2 += 1;
            }
            let q = v[k2];
            let dx = x as f64 - q as f64;
            dist[row + x] = (f(q) + dx * dx).sqrt();
            label[row + x] = l1[row + q];
        }
    }

    Ok(LabeledDistanceMap {
        width: w,
        height: h,
        dist,
        label,
    })
}

// ---------------------------------------------------------------- weight field

/// Gaussian weight per curve point by arc-index distance from the
/// center point, spread to every pixel via its nearest curve point.
pub fn gaussian_weight_field(
    points: &[Point],
    center_index: usize,
    block_w: usize,
    block_h: usize,
    sigma: f64,
) -> Result<WeightField, RasterError> {
    if points.is_empty() {
        return Err(RasterError::EmptyCurve);
    }
    let curve_w: Vec<f64> = (0..points.len())
        .map(|i| {
            let d = i as f64 - center_index as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let ldt = labeled_distance_transform(points, block_w, block_h)?;
    let weights = ldt.label.iter().map(|&l| curve_w[l as usize]).collect();
    Ok(WeightField {
        width: block_w,
        height: block_h,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_identity_read() {
        let buf = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = decode_pgm(buf).unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 2);
        assert_eq!(img.data, vec![0, 255, 128, 64]);
    }

    #[test]
    fn pgm_truncated_header() {
        assert!(matches!(
            decode_pgm(b"P5\n2 "),
            Err(RasterError::Format(_))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x00"),
            Err(RasterError::Format(_))
        ));
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::from_vec(3, 2, vec![1, 2, 3, 4, 5, 6]);
        let dir = std::env::temp_dir().join("comic_pgm_rt");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.pgm");
        save_pgm(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn resize_noop_and_constant() {
        let img = GrayImage::from_vec(100, 50, vec![7; 5000]);
        let same = resize_to_height(&img, 50);
        assert_eq!(same, img);
        let down = resize_to_height(&img, 20);
        assert_eq!(down.height, 20);
        assert!(down.data.iter().all(|&v| v == 7));
    }

    /// Independent scalar bilinear oracle over the same center-aligned
    /// sampling grid.
    fn bilinear_oracle(img: &GrayImage, x: usize, y: usize, tw: usize, th: usize) -> u8 {
        let sx = img.width as f64 / tw as f64;
        let sy = img.height as f64 / th as f64;
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, img.width as f64 - 1.0);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, img.height as f64 - 1.0);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let top = img.get(x0, y0) as f64 * (1.0 - ax) + img.get(x1, y0) as f64 * ax;
        let bot = img.get(x0, y1) as f64 * (1.0 - ax) + img.get(x1, y1) as f64 * ax;
        (top * (1.0 - ay) + bot * ay).round() as u8
    }

    #[test]
    fn resize_checkerboard_matches_oracle() {
        let mut img = GrayImage::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.set(x, y, if (x + y) % 2 == 0 { 0 } else { 255 });
            }
        }
        let out = resize_to_height(&img, 2);
        assert_eq!(out.height, 2);
        for y in 0..out.height {
            for x in 0..out.width {
                assert_eq!(out.get(x, y), bilinear_oracle(&img, x, y, out.width, 2));
            }
        }
    }

    #[test]
    fn box_filter_constant_and_impulse() {
        let c = vec![3.5; 11];
        assert_eq!(iterated_box_filter_1d(&c, 2, 3), c);

        let mut imp = vec![0.0; 11];
        imp[5] = 1.0;
        let out = iterated_box_filter_1d(&imp, 1, 1);
        for (i, v) in out.iter().enumerate() {
            let expect = if (4..=6).contains(&i) { 1.0 / 3.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "i={i} v={v}");
        }
    }

    #[test]
    fn box_filter_approximates_gaussian() {
        // impulse, radius 2, 3 passes vs a true Gaussian of matched
        // variance passes * r(r+1)/3 = 6
        let n = 41;
        let mut imp = vec![0.0; n];
        imp[n / 2] = 1.0;
        let out = iterated_box_filter_1d(&imp, 2, 3);
        let var = 3.0 * 2.0 * 3.0 / 3.0;
        let gauss: Vec<f64> = (0..n)
            .map(|i| {
                let d = i as f64 - (n / 2) as f64;
                (-d * d / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
            })
            .collect();
        let peak = gauss[n / 2];
        let rms = (out
            .iter()
            .zip(&gauss)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!(rms < 0.03 * peak, "rms {rms} vs peak {peak}");
    }

    #[test]
    fn box_filter_preserves_sum_in_interior() {
        let vals = vec![0.0, 0.0, 1.0, 4.0, 2.0, 0.5, 0.0, 0.0, 0.0, 0.0];
        let out = iterated_box_filter_1d(&vals, 1, 2);
        let s_in: f64 = vals.iter().sum();
        let s_out: f64 = out.iter().sum();
        assert!((s_in - s_out).abs() < 1e-9);
    }

    #[test]
    fn ldt_single_source() {
        let m = labeled_distance_transform(&[(0, 0)], 3, 3).unwrap();
        assert!((m.dist_at(2, 2) - (8.0f64).sqrt()).abs() < 1e-12);
        assert_eq!(m.label_at(2, 2), 0);
        assert_eq!(m.dist_at(0, 0), 0.0);
    }

    #[test]
    fn ldt_matches_brute_force() {
        let curve = vec![(1, 2), (7, 7), (4, 0)];
        let m = labeled_distance_transform(&curve, 10, 10).unwrap();
        for y in 0..10i32 {
            for x in 0..10i32 {
                let best = curve
                    .iter()
                    .map(|&(cx, cy)| {
                        (((x - cx) * (x - cx) + (y - cy) * (y - cy)) as f64).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                let got = m.dist_at(x as usize, y as usize);
                assert!((got - best).abs() < 1e-9, "({x},{y}): {got} vs {best}");
                // recorded label must attain the recorded distance
                let (lx, ly) = curve[m.label_at(x as usize, y as usize) as usize];
                let ld = (((x - lx) * (x - lx) + (y - ly) * (y - ly)) as f64).sqrt();
                assert!((got - ld).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ldt_empty_curve() {
        assert!(matches!(
            labeled_distance_transform(&[], 4, 4),
            Err(RasterError::EmptyCurve)
        ));
    }

    #[test]
    fn weight_field_center_and_endpoint() {
        // straight horizontal curve, center at index 5
        let pts: Vec<Point> = (0..11).map(|i| (i, 3)).collect();
        let k = 5.0;
        let f = gaussian_weight_field(&pts, 5, 11, 7, k).unwrap();
        assert!((f.get(5, 3) - 1.0).abs() < 1e-12);
        // pixel nearest to the endpoint k points from center, sigma = k
        assert!((f.get(10, 3) - (-0.5f64).exp()).abs() < 1e-12);
        assert!(f.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn weight_field_matches_exhaustive_oracle() {
        // L-shaped curve in a 20x20 block
        let mut pts: Vec<Point> = (0..10).map(|i| (4, 14 - i)).collect();
        pts.extend((1..10).map(|i| (4 + i, 5)));
        let center = 9;
        let sigma = 6.0;
        let f = gaussian_weight_field(&pts, center, 20, 20, sigma).unwrap();
        for y in 0..20i32 {
            for x in 0..20i32 {
                // exhaustive nearest curve point, then Gaussian of its arc index
                let (mut bd, mut bi) = (f64::INFINITY, 0usize);
                for (i, &(px, py)) in pts.iter().enumerate() {
                    let d = (((x - px) * (x - px) + (y - py) * (y - py)) as f64).sqrt();
                    if d < bd - 1e-12 {
                        bd = d;
                        bi = i;
                    }
                }
                let arc = bi as f64 - center as f64;
                let expect = (-arc * arc / (2.0 * sigma * sigma)).exp();
                let got = f.get(x as usize, y as usize);
                // ties between equidistant curve points may pick either
                // index; accept both weights
                let mut ok = (got - expect).abs() < 1e-9;
                if !ok {
                    for (i, &(px, py)) in pts.iter().enumerate() {
                        let d =
                            (((x - px) * (x - px) + (y - py) * (y - py)) as f64).sqrt();
                        if (d - bd).abs() < 1e-9 {
                            let a = i as f64 - center as f64;
                            if (got - (-a * a / (2.0 * sigma * sigma)).exp()).abs() < 1e-9 {
                                ok = true;
                                break;
                            }
                        }
                    }
                }
                assert!(ok, "mismatch at ({x},{y})");
            }
        }
    }

    #[test]
    fn weight_field_monotone_in_arc_distance() {
        let pts: Vec<Point> = (0..21).map(|i| (i, 10)).collect();
        let f = gaussian_weight_field(&pts, 10, 21, 21, 4.0).unwrap();
        // walking outward along the curve row, weights never increase
        for x in 10..20usize {
            assert!(f.get(x + 1, 10) <= f.get(x, 10) + 1e-12);
        }
        for x in (1..=10usize).rev() {
            assert!(f.get(x - 1, 10) <= f.get(x, 10) + 1e-12);
        }
    }
}
