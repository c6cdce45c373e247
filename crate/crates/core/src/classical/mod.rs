//! Classical measurement of tip geometry: threshold segmentation, contour
//! tracing and an algebraic circle fit at the apex.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::dataio::{DatasetManifest, GrayImage};
use crate::error::{Result, SimicError};

fn fail(msg: impl Into<String>) -> SimicError {
    SimicError::Measurement(msg.into())
}

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(SimicError::InvalidArgument(format!(
                "mask of {}x{} needs {} cells, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Out-of-frame cells read as background.
    pub fn get(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn map_neighbourhood(&self, keep: impl Fn(bool, bool) -> bool, init: bool) -> Mask {
        let mut out = vec![false; self.data.len()];
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let mut acc = init;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc = keep(acc, self.get(x + dx, y + dy));
                    }
                }
                out[y as usize * self.width + x as usize] = acc;
            }
        }
        Mask {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    /// 3×3 erosion; the frame outside the image counts as background.
    pub fn erode(&self) -> Mask {
        self.map_neighbourhood(|a, b| a && b, true)
    }

    /// Cells 8-connected to any seed cell of `marker` within `self`.
    pub fn reconstruct(&self, marker: &Mask) -> Mask {
        let mut out = vec![false; self.data.len()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for (i, (&m, &s)) in marker.data.iter().zip(&self.data).enumerate() {
            if m && s {
                out[i] = true;
                queue.push_back(i);
            }
        }
        self.flood(&mut out, queue);
        Mask {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    fn flood(&self, out: &mut [bool], mut queue: VecDeque<usize>) {
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
            for (dx, dy) in NEIGHBOURS {
                let (nx, ny) = (x + dx, y + dy);
                if self.get(nx, ny) {
                    let j = ny as usize * self.width + nx as usize;
                    if !out[j] {
                        out[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }

    /// Largest 8-connected component (first in raster order on ties).
    pub fn largest_component(&self) -> Mask {
        let mut label = vec![usize::MAX; self.data.len()];
        let mut best: Option<(usize, usize)> = None;
        let mut next = 0;
        for start in 0..self.data.len() {
            if !self.data[start] || label[start] != usize::MAX {
                continue;
            }
            let mut comp = vec![false; self.data.len()];
            comp[start] = true;
            self.flood(&mut comp, VecDeque::from([start]));
            let size = comp.iter().filter(|&&b| b).count();
            for (l, _) in label.iter_mut().zip(&comp).filter(|(_, &c)| c) {
                *l = next;
            }
            if best.is_none_or(|(_, s)| size > s) {
                best = Some((next, size));
            }
            next += 1;
        }
        Mask {
            width: self.width,
            height: self.height,
            data: match best {
                Some((keep, _)) => label.iter().map(|&l| l == keep).collect(),
                None => vec![false; self.data.len()],
            },
        }
    }
}

/// The 8-neighbourhood, clockwise on screen starting west (y grows down).
const NEIGHBOURS: [(isize, isize); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Otsu's between-class-variance maximum.
    Auto,
    Fixed(u8),
}

/// Smallest threshold `t` maximizing the between-class variance of the
/// split `{p < t}` / `{p ≥ t}`.
pub fn otsu_threshold(image: &GrayImage) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &p in image.pixels() {
        hist[p as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(fail("uniform image has no foreground/background separation"));
    }
    let total = image.pixels().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 1u8);
    for t in 1..256usize {
        w0 += hist[t - 1] as f64;
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Ok(best.1)
}

/// Thresholds, then drops speckle with a 3×3 opening by reconstruction
/// (components that survive erosion are kept whole, so thin apex pixels are
/// not shaved off), and keeps the largest component.
pub fn segment(image: &GrayImage, threshold: Threshold) -> Result<Mask> {
    let t = match threshold {
        Threshold::Auto => otsu_threshold(image)?,
        Threshold::Fixed(t) => t,
    };
    let raw = Mask::new(
        image.width(),
        image.height(),
        image.pixels().iter().map(|&p| p >= t).collect(),
    )?;
    let opened = raw.reconstruct(&raw.erode());
    if opened.count() == 0 {
        return Err(fail("segmentation left no foreground"));
    }
    Ok(opened.largest_component())
}

/// Moore-neighbour boundary trace of the largest component, starting at its
/// topmost-leftmost pixel and running clockwise on screen, which gives a
/// positive shoelace area in `(x, y-down)` coordinates.
pub fn trace_contour(mask: &Mask) -> Result<Vec<(usize, usize)>> {
    let comp = mask.largest_component();
    let start = comp.data.iter().position(|&b| b).ok_or_else(|| fail("empty mask"))?;
    let w = comp.width;
    let s = ((start % w) as isize, (start / w) as isize);
    let dir_of = |from: (isize, isize), to: (isize, isize)| {
        NEIGHBOURS
            .iter()
            .position(|&d| d == (to.0 - from.0, to.1 - from.1))
            .expect("adjacent cells")
    };
    // Next boundary cell clockwise from the backtrack direction, with the new
    // backtrack cell.
    let step = |c: (isize, isize), back: usize| {
        (1..=8).find_map(|k| {
            let d = (back + k) % 8;
            let n = (c.0 + NEIGHBOURS[d].0, c.1 + NEIGHBOURS[d].1);
            comp.get(n.0, n.1).then(|| {
                let pd = (back + k - 1) % 8;
                (n, (c.0 + NEIGHBOURS[pd].0, c.1 + NEIGHBOURS[pd].1))
            })
        })
    };
    let mut contour = vec![(s.0 as usize, s.1 as usize)];
    let Some((first, first_back)) = step(s, 0) else {
        return Ok(contour);
    };
    let (mut c, mut b) = (first, first_back);
    loop {
        if c == s {
            let (n, _) = step(c, dir_of(c, b)).expect("start has a neighbour");
            if n == first {
                break;
            }
        }
        contour.push((c.0 as usize, c.1 as usize));
        let (n, nb) = step(c, dir_of(c, b)).expect("boundary cell has a neighbour");
        c = n;
        b = nb;
    }
    Ok(contour)
}

/// Shoelace area of a closed polygon.
pub fn signed_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (a, b) = (points[i], points[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Algebraic (Kåsa) least-squares circle: minimizes
/// `Σ (x² + y² + D x + E y + F)²`. Points are centered first.
pub fn fit_circle(points: &[(f64, f64)]) -> Result<Circle> {
    if points.len() < 3 {
        return Err(fail("circle fit needs at least three points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut sz = 0.0;
    for &(x, y) in points {
        let (u, v) = (x - mx, y - my);
        let z = u * u + v * v;
        sxx += u * u;
        sxy += u * v;
        syy += v * v;
        sxz += u * z;
        syz += v * z;
        sz += z;
    }
    // With centered data the normal equations decouple F = -mean(z).
    let det = sxx * syy - sxy * sxy;
    if det.abs() <= 1e-12 * (sxx * syy).max(1.0) {
        return Err(fail("points are collinear; no circle"));
    }
    let d = -(sxz * syy - syz * sxy) / det;
    let e = -(syz * sxx - sxz * sxy) / det;
    let f = -sz / n;
    let (cu, cv) = (-d / 2.0, -e / 2.0);
    let r2 = cu * cu + cv * cv - f;
    if !(r2 > 0.0) {
        return Err(fail("degenerate circle fit"));
    }
    Ok(Circle {
        cx: cu + mx,
        cy: cv + my,
        r: r2.sqrt(),
    })
}

/// Midpoints of the edges between contour cells and background 4-neighbours,
/// in continuous coordinates where pixel `(x, y)` spans `[x, x+1] × [y, y+1]`.
pub fn boundary_points(mask: &Mask, contour: &[(usize, usize)]) -> Vec<(f64, f64)> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for &(x, y) in contour {
        if !seen.insert((x, y)) {
            continue;
        }
        let (xi, yi) = (x as isize, y as isize);
        let (xf, yf) = (x as f64, y as f64);
        for (dx, dy, p) in [
            (0, -1, (xf + 0.5, yf)),
            (1, 0, (xf + 1.0, yf + 0.5)),
            (0, 1, (xf + 0.5, yf + 1.0)),
            (-1, 0, (xf, yf + 0.5)),
        ] {
            if !mask.get(xi + dx, yi + dy) {
                out.push(p);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TipMeasurement {
    pub width_px: f64,
    pub height_px: f64,
    pub radius_px: f64,
    pub apex: Circle,
    /// Boundary points the circle was fitted to.
    pub apex_points: Vec<(f64, f64)>,
    pub mask: Mask,
}

impl TipMeasurement {
    /// `(width, height, radius)` in µm for a scale in nm per pixel.
    pub fn to_um(&self, scale_nm_per_px: f64) -> [f64; 3] {
        let k = scale_nm_per_px / 1000.0;
        [self.width_px * k, self.height_px * k, self.radius_px * k]
    }
}

/// Row extent `(first, last)` of foreground cells in row `y`.
fn row_extent(mask: &Mask, y: usize) -> Option<(usize, usize)> {
    let row = &mask.data[y * mask.width..(y + 1) * mask.width];
    let first = row.iter().position(|&b| b)?;
    let last = row.iter().rposition(|&b| b)?;
    Some((first, last))
}

/// Rows below the apex used for the initial curvature estimate.
const GUESS_ROWS: usize = 3;

/// Flank half-angle from the vertical, from the half-widths of two rows in
/// the lower half of the tip where the flanks are straight.
fn flank_angle(mask: &Mask, top: usize, bottom: usize) -> f64 {
    let span = (bottom - top) as f64;
    let (y1, y2) = (top + (0.5 * span) as usize, top + (0.9 * span) as usize);
    if y2 <= y1 {
        return 0.0;
    }
    let half = |y| {
        let (a, b) = row_extent(mask, y).expect("rows are contiguous in a tip");
        (b - a + 1) as f64 / 2.0
    };
    ((half(y2) - half(y1)) / (y2 - y1) as f64).atan().max(0.0)
}

/// Measures an apex-up tip: height is the vertical foreground extent, width
/// the extent of the base (lowest) row, and radius a circle fit to boundary
/// points near the apex. `R_guess` comes from the half-widths `w` of the top
/// rows at depth `k`, via `R = (w² + k²) / 2k`. The fit window spans
/// `2·R_guess` rows, clipped to the arc depth `R_guess·(1 − sin θ)` where the
/// flanks (half-angle θ) take over, plus one row for pixelation.
pub fn measure_tip(mask: &Mask, contour: &[(usize, usize)]) -> Result<TipMeasurement> {
    let rows: Vec<usize> = (0..mask.height).filter(|&y| row_extent(mask, y).is_some()).collect();
    let (&top, &bottom) = rows.first().zip(rows.last()).ok_or_else(|| fail("empty mask"))?;
    let height_px = (bottom - top + 1) as f64;
    let (l, r) = row_extent(mask, bottom).expect("bottom row has foreground");
    let width_px = (r - l + 1) as f64;

    let guesses: Vec<f64> = (top..=bottom)
        .take(GUESS_ROWS)
        .map(|y| {
            let (a, b) = row_extent(mask, y).expect("rows are contiguous in a tip");
            let w = (b - a + 1) as f64 / 2.0;
            let k = (y - top) as f64 + 0.5;
            (w * w + k * k) / (2.0 * k)
        })
        .collect();
    let r_guess = guesses.iter().sum::<f64>() / guesses.len() as f64;
    if r_guess >= width_px / 2.0 {
        return Err(fail(format!(
            "no apex arc: curvature estimate {r_guess:.1} px spans the {width_px} px body"
        )));
    }
    let arc_depth = r_guess * (1.0 - flank_angle(mask, top, bottom).sin()) + 1.0;
    let limit = top as f64 + (2.0 * r_guess).min(arc_depth);
    let apex_points: Vec<(f64, f64)> = boundary_points(mask, contour)
        .into_iter()
        .filter(|p| p.1 <= limit)
        .collect();
    if apex_points.len() < 5 {
        return Err(fail(format!("only {} apex points", apex_points.len())));
    }
    let apex = fit_circle(&apex_points)?;
    if apex.r >= width_px / 2.0 {
        return Err(fail(format!("fitted apex radius {:.1} px spans the body", apex.r)));
    }
    Ok(TipMeasurement {
        width_px,
        height_px,
        radius_px: apex.r,
        apex,
        apex_points,
        mask: mask.clone(),
    })
}

/// Segments, traces and measures one image.
pub fn measure_image(image: &GrayImage, threshold: Threshold) -> Result<TipMeasurement> {
    let mask = segment(image, threshold)?;
    let contour = trace_contour(&mask)?;
    measure_tip(&mask, &contour)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRow {
    pub id: String,
    pub measurement: std::result::Result<[f64; 3], String>,
    pub scale_nm_per_px: f64,
}

/// Measures every record of `manifest`; failures are kept per row.
pub fn run_baseline(manifest: &DatasetManifest, threshold: Threshold) -> Result<Vec<BaselineRow>> {
    let scale = manifest
        .scale_nm_per_px()
        .ok_or_else(|| SimicError::InvalidArgument("manifest has no scale_nm_per_px metadata".into()))?;
    manifest
        .records
        .iter()
        .map(|r| {
            let img = manifest.load_image(r)?;
            let measurement = measure_image(&img, threshold)
                .map(|m| [m.width_px, m.height_px, m.radius_px])
                .map_err(|e| e.to_string());
            Ok(BaselineRow {
                id: r.id.clone(),
                measurement,
                scale_nm_per_px: scale,
            })
        })
        .collect()
}

/// `id,width_px,height_px,radius_px,width_um,height_um,radius_um`; failed
/// rows leave the numeric fields empty.
pub fn baseline_csv(rows: &[BaselineRow]) -> String {
    let mut out = String::from("id,width_px,height_px,radius_px,width_um,height_um,radius_um\n");
    for row in rows {
        match &row.measurement {
            Ok(px) => {
                let k = row.scale_nm_per_px / 1000.0;
                let _ = writeln!(
                    out,
                    "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                    row.id,
                    px[0],
                    px[1],
                    px[2],
                    px[0] * k,
                    px[1] * k,
                    px[2] * k
                );
            }
            Err(_) => {
                let _ = writeln!(out, "{},,,,,,", row.id);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
