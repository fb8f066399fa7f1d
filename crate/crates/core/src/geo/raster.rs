use std::io::Write;
use std::path::Path;

use super::font::glyph;
use super::spec::{Anchor, DiagramSpec};
use crate::error::{Error, Result};

/// Square grayscale image, values in [0, 1], row-major from the top row.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    side: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn blank(side: usize) -> Self {
        RasterImage {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    /// Zero-sized stand-in used while a record's image is not yet loaded.
    pub fn placeholder() -> Self {
        RasterImage::blank(0)
    }

    /// Builds an image, clamping values into [0, 1].
    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side || side == 0 {
            return Err(Error::shape("raster", &[side, side], &[pixels.len()]));
        }
        Ok(RasterImage {
            side,
            pixels: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.side + x]
    }

    fn plot(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && (x as usize) < self.side && (y as usize) < self.side {
            self.pixels[y as usize * self.side + x as usize] = 1.0;
        }
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: format!("pgm: {msg}"),
        };
        let (fields, offset) = header_fields(bytes, 4).ok_or_else(|| bad("truncated header"))?;
        if fields[0] != "P5" {
            return Err(bad("magic is not P5"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        if fields[3] != "255" {
            return Err(bad("maxval must be 255"));
        }
        if w != h {
            return Err(bad("image is not square"));
        }
        let body = &bytes[offset..];
        if body.len() != w * h {
            return Err(bad("payload length"));
        }
        RasterImage::from_pixels(w, body.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        RasterImage::from_pgm(&bytes)
    }
}

/// Splits the first `n` whitespace-separated header tokens of a netpbm file;
/// returns them with the offset of the payload (one whitespace byte after the
/// last token).
pub(crate) fn header_fields(bytes: &[u8], n: usize) -> Option<(Vec<String>, usize)> {
    let mut fields = Vec::with_capacity(n);
    let mut i = 0;
    while fields.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    (i < bytes.len()).then_some((fields, i + 1))
}

/// Maps unit-square coordinates (y up) to pixel indices (row 0 on top).
pub fn to_pixel(x: f64, y: f64, side: usize) -> (i64, i64) {
    let s = (side - 1) as f64;
    ((x * s).round() as i64, ((1.0 - y) * s).round() as i64)
}

/// Renders a diagram. Segments use integer Bresenham stepping, circles the
/// midpoint algorithm, points 3×3 dots, and text the built-in 5×7 font.
pub fn rasterize(spec: &DiagramSpec, side: usize) -> Result<RasterImage> {
    if side < 16 {
        return Err(Error::Usage(format!("raster side must be >= 16, got {side}")));
    }
    let mut img = RasterImage::blank(side);
    let px = |name: &str| -> (i64, i64) {
        let p = spec.point(name).expect("validated spec");
        to_pixel(p.x, p.y, side)
    };
    for (a, b) in &spec.segments {
        let (p, q) = (px(a), px(b));
        for (x, y) in line_pixels(p, q) {
            img.plot(x, y);
        }
    }
    for c in &spec.circles {
        let center = px(&c.center);
        let r = (c.radius * (side - 1) as f64).round() as i64;
        for (x, y) in circle_pixels(center, r) {
            img.plot(x, y);
        }
    }
    for p in &spec.points {
        let (cx, cy) = to_pixel(p.x, p.y, side);
        for dy in -1..=1 {
            for dx in -1..=1 {
                img.plot(cx + dx, cy + dy);
            }
        }
    }
    let (gx, gy) = centroid(spec, side);
    for p in &spec.points {
        let (lx, ly) = label_origin(to_pixel(p.x, p.y, side), (gx, gy));
        let w = 6 * p.name.chars().count() as i64 - 1;
        let at = (lx.clamp(0, side as i64 - w), ly.clamp(0, side as i64 - 7));
        draw_text(&mut img, &p.name, at);
    }
    for l in &spec.labels {
        let at = match &l.anchor {
            Anchor::Point(name) => px(name),
            Anchor::Angle(name) => {
                let a = spec.angle(name).expect("validated spec");
                let v = px(&a.vertex);
                let (r1, r2) = (px(&a.ray1), px(&a.ray2));
                // Nudge into the angle's interior along the bisector.
                let dir = |t: (i64, i64)| {
                    let (dx, dy) = ((t.0 - v.0) as f64, (t.1 - v.1) as f64);
                    let n = (dx * dx + dy * dy).sqrt().max(1e-9);
                    (dx / n, dy / n)
                };
                let (u, w) = (dir(r1), dir(r2));
                let (bx, by) = (u.0 + w.0, u.1 + w.1);
                let n = (bx * bx + by * by).sqrt().max(1e-9);
                (v.0 + (4.0 * bx / n).round() as i64, v.1 + (4.0 * by / n).round() as i64)
            }
        };
        draw_text(&mut img, &l.text, (at.0 - 2, at.1 - 3));
    }
    Ok(img)
}

fn centroid(spec: &DiagramSpec, side: usize) -> (i64, i64) {
    if spec.points.is_empty() {
        return (0, 0);
    }
    let n = spec.points.len() as f64;
    let (sx, sy) = spec.points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    to_pixel(sx / n, sy / n, side)
}

/// Places a glyph box just outside a point, away from the diagram centroid.
fn label_origin(p: (i64, i64), centroid: (i64, i64)) -> (i64, i64) {
    let dx = if p.0 >= centroid.0 { 3 } else { -8 };
    let dy = if p.1 >= centroid.1 { 3 } else { -10 };
    (p.0 + dx, p.1 + dy)
}

fn draw_text(img: &mut RasterImage, text: &str, origin: (i64, i64)) {
    for (k, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        let ox = origin.0 + 6 * k as i64;
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..5 {
                if bits & (0x10 >> c) != 0 {
                    img.plot(ox + c, origin.1 + r as i64);
                }
            }
        }
    }
}

/// Bresenham line from `p` to `q`, inclusive of both ends.
pub fn line_pixels(p: (i64, i64), q: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = p;
    let dx = (q.0 - x).abs();
    let dy = -(q.1 - y).abs();
    let sx = if x < q.0 { 1 } else { -1 };
    let sy = if y < q.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x, y));
        if (x, y) == q {
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
    out
}

/// Midpoint circle algorithm, all eight octants.
pub fn circle_pixels(c: (i64, i64), r: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    let (mut x, mut y) = (r, 0i64);
    let mut d = 1 - r;
    while x >= y {
        for (ox, oy) in [(x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y)] {
            out.push((c.0 + ox, c.1 + oy));
        }
        y += 1;
        if d < 0 {
            d += 2 * y + 1;
        } else {
            x -= 1;
            d += 2 * (y - x) + 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::spec::{Point, DiagramSpec};

    #[test]
    fn empty_spec_is_background() {
        let img = rasterize(&DiagramSpec::empty(), 32).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_tiny_side() {
        assert!(rasterize(&DiagramSpec::empty(), 8).is_err());
    }

    /// Floating-point DDA, written independently of the Bresenham stepper.
    fn dda(p: (f64, f64), q: (f64, f64)) -> Vec<(i64, i64)> {
        let steps = (q.0 - p.0).abs().max((q.1 - p.1).abs()).round().max(1.0) as usize;
        (0..=steps)
            .map(|i| {
                let t = i as f64 / steps as f64;
                ((p.0 + t * (q.0 - p.0)).round() as i64, (p.1 + t * (q.1 - p.1)).round() as i64)
            })
            .collect()
    }

    #[test]
    fn single_segment_lights_projected_pixels() {
        let mut spec = DiagramSpec::empty();
        spec.points = vec![
            Point { name: "P".into(), x: 0.1, y: 0.2 },
            Point { name: "Q".into(), x: 0.9, y: 0.35 },
        ];
        spec.segments = vec![("P".into(), "Q".into())];
        let side = 64;
        let img = rasterize(&spec, side).unwrap();
        let p: (f64, f64) = (0.1 * 63.0, (1.0 - 0.2) * 63.0);
        let q: (f64, f64) = (0.9 * 63.0, (1.0 - 0.35) * 63.0);
        let (px, py) = (p.0.round() as usize, p.1.round() as usize);
        let (qx, qy) = (q.0.round() as usize, q.1.round() as usize);
        assert_eq!(img.get(px, py), 1.0);
        assert_eq!(img.get(qx, qy), 1.0);
        // Both steppers visit one pixel per major-axis column; they may round
        // ties differently, so allow a one-pixel vertical slack.
        for (x, y) in dda(p, q) {
            let hit = (-1..=1).any(|d| {
                let yy = y + d;
                yy >= 0 && (yy as usize) < side && img.get(x as usize, yy as usize) == 1.0
            });
            assert!(hit, "pixel ({x},{y}) not lit");
        }
        let line = line_pixels((px as i64, py as i64), (qx as i64, qy as i64));
        assert_eq!(line.len(), qx - px + 1);
    }

    #[test]
    fn rasterize_is_deterministic() {
        use crate::geo::spec::{sample_diagram, Family};
        use crate::tensor::Rng;
        for fam in Family::ALL {
            let spec = sample_diagram(&mut Rng::new(4), fam);
            let a = rasterize(&spec, 32).unwrap();
            let b = rasterize(&spec, 32).unwrap();
            assert_eq!(a, b);
            assert!(a.pixels().iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        use crate::geo::spec::{sample_diagram, Family};
        use crate::tensor::Rng;
        let spec = sample_diagram(&mut Rng::new(2), Family::CircleInscribed);
        let img = rasterize(&spec, 32).unwrap();
        let back = RasterImage::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!(img, back);
        assert!(RasterImage::from_pgm(b"P6\n2 2\n255\n....").is_err());
        assert!(RasterImage::from_pgm(b"P5\n2 2\n255\n...").is_err());
    }

    #[test]
    fn circle_pixels_stay_on_radius() {
        for (x, y) in circle_pixels((20, 20), 9) {
            let d = (((x - 20).pow(2) + (y - 20).pow(2)) as f64).sqrt();
            assert!((d - 9.0).abs() < 1.0);
        }
    }
}
