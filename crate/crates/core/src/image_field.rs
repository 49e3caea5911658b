//! Gridded grayscale images with continuous bilinear evaluation.
//!
//! Node `(i, j)` (column `i`, row `j`) sits at the physical point
//! `origin + (i * spacing[0], j * spacing[1])`; axis 0 runs along columns. Outside the node
//! rectangle the field is zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    spacing: [f64; 2],
    origin: [f64; 2],
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("pgm") => Ok(Self::Pgm),
            Some("png") => Ok(Self::Png),
            other => Err(Error::UnsupportedFormat(format!("extension {:?}", other.unwrap_or("")))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Pgm => "pgm",
            Self::Png => "png",
        }
    }
}

impl ScalarField {
    /// Field with unit spacing and origin at zero; `values` are row-major.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("empty image {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        Ok(Self { width, height, spacing: [1.0, 1.0], origin: [0.0, 0.0], values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height).flat_map(|j| (0..width).map(move |i| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self::new(width, height, values)
    }

    pub fn with_geometry(mut self, spacing: [f64; 2], origin: [f64; 2]) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) || origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad geometry: spacing {spacing:?}, origin {origin:?}")));
        }
        self.spacing = spacing;
        self.origin = origin;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    pub fn node_position(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
        ]
    }

    /// Physical positions of every node, row-major.
    pub fn node_positions(&self) -> Vec<f64> {
        (0..self.height)
            .flat_map(|j| (0..self.width).flat_map(move |i| [i, j]))
            .collect::<Vec<_>>()
            .chunks(2)
            .flat_map(|ij| self.node_position(ij[0], ij[1]))
            .collect()
    }

    /// A zero field with `width × height` nodes spanning the same physical rectangle.
    pub fn same_extent(&self, width: usize, height: usize) -> Result<ScalarField> {
        let step = |n_old: usize, n_new: usize, s: f64| {
            if n_new > 1 && n_old > 1 {
                s * (n_old - 1) as f64 / (n_new - 1) as f64
            } else {
                s
            }
        };
        ScalarField::new(width, height, vec![0.0; width * height])?.with_geometry(
            [step(self.width, width, self.spacing[0]), step(self.height, height, self.spacing[1])],
            self.origin,
        )
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<ScalarField> {
        ScalarField::new(self.width, self.height, values)?.with_geometry(self.spacing, self.origin)
    }

    fn locate(&self, p: &[f64]) -> Option<(Cell, Cell)> {
        let fx = (p[0] - self.origin[0]) / self.spacing[0];
        let fy = (p[1] - self.origin[1]) / self.spacing[1];
        Some((Cell::locate(fx, self.width)?, Cell::locate(fy, self.height)?))
    }

    fn corners(&self, cx: Cell, cy: Cell) -> [f64; 4] {
        [
            self.get(cx.lo, cy.lo),
            self.get(cx.hi, cy.lo),
            self.get(cx.lo, cy.hi),
            self.get(cx.hi, cy.hi),
        ]
    }

    /// Bilinear interpolation at a physical point; zero outside the grid.
    pub fn eval(&self, p: &[f64]) -> f64 {
        let Some((cx, cy)) = self.locate(p) else {
            return 0.0;
        };
        let [v00, v10, v01, v11] = self.corners(cx, cy);
        let (tx, ty) = (cx.t, cy.t);
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }

    /// Exact gradient of the bilinear interpolant. On a cell edge the cell with the lower
    /// index is used, so the gradient is continuous from the right.
    pub fn grad(&self, p: &[f64]) -> [f64; 2] {
        let Some((cx, cy)) = self.locate(p) else {
            return [0.0, 0.0];
        };
        let [v00, v10, v01, v11] = self.corners(cx, cy);
        let (tx, ty) = (cx.t, cy.t);
        let gx = if cx.lo == cx.hi { 0.0 } else { (1.0 - ty) * (v10 - v00) + ty * (v11 - v01) };
        let gy = if cy.lo == cy.hi { 0.0 } else { (1.0 - tx) * (v01 - v00) + tx * (v11 - v10) };
        [gx / self.spacing[0], gy / self.spacing[1]]
    }

    /// Separable Gaussian blur with standard deviation `radius` pixels, truncated at four
    /// standard deviations, normalized weights, zero padding.
    pub fn smooth(&self, radius: f64) -> Result<ScalarField> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("smoothing radius must be >= 0, got {radius}")));
        }
        if radius == 0.0 {
            return Ok(self.clone());
        }
        let half = (4.0 * radius).ceil() as isize;
        let mut weights: Vec<f64> = (-half..=half).map(|k| (-((k * k) as f64) / (2.0 * radius * radius)).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        let (w, h) = (self.width as isize, self.height as isize);
        let convolve = |src: &[f64], horizontal: bool| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for j in 0..h {
                for i in 0..w {
                    let mut acc = 0.0;
                    for (k, wk) in (-half..=half).zip(&weights) {
                        let (ii, jj) = if horizontal { (i + k, j) } else { (i, j + k) };
                        if (0..w).contains(&ii) && (0..h).contains(&jj) {
                            acc += wk * src[(jj * w + ii) as usize];
                        }
                    }
                    dst[(j * w + i) as usize] = acc;
                }
            }
            dst
        };
        let blurred = convolve(&convolve(&self.values, true), false);
        self.with_values(blurred)
    }

    /// Bilinear resampling onto a `width × height` pixel grid with unit spacing.
    pub fn resize(&self, width: usize, height: usize) -> Result<ScalarField> {
        let target = self.same_extent(width, height)?;
        let values = target.node_positions().chunks(2).map(|p| self.eval(p)).collect();
        ScalarField::new(width, height, values)
    }

    /// Upsampling used for small glyph images: bilinear resize then a radius-1 blur.
    pub fn upsample(&self, width: usize, height: usize) -> Result<ScalarField> {
        self.resize(width, height)?.smooth(1.0)
    }

    /// Particle grid made of every `stride`-th node, row-major, with the field values there.
    pub fn sample_grid(&self, stride: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        let mut positions = Vec::new();
        let mut values = Vec::new();
        for j in (0..self.height).step_by(stride) {
            for i in (0..self.width).step_by(stride) {
                positions.extend(self.node_position(i, j));
                values.push(self.get(i, j));
            }
        }
        Ok((positions, values))
    }

    /// Pointwise product, for laying grid lines over a frame.
    pub fn multiply(&self, other: &ScalarField) -> Result<ScalarField> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::DimensionMismatch("images of different sizes".into()));
        }
        self.with_values(self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect())
    }

    /// Values clamped to `[0, 1]` and quantized to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn load(path: impl AsRef<Path>, normalize: bool) -> Result<ScalarField> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
            decode_pgm(&bytes, normalize)
        } else if bytes.starts_with(b"\x89PNG") {
            decode_png(&bytes, normalize)
        } else {
            Err(Error::UnsupportedFormat(format!("{}: not a PGM or PNG file", path.display())))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode(ImageFormat::from_path(path)?)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn encode(&self, format: ImageFormat) -> Result<Vec<u8>> {
        match format {
            ImageFormat::Pgm => {
                let mut out = Vec::with_capacity(self.values.len() + 32);
                write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
                out.extend(self.to_u8());
                Ok(out)
            }
            ImageFormat::Png => {
                let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
                    .expect("buffer length matches dimensions");
                let mut out = std::io::Cursor::new(Vec::new());
                img.write_to(&mut out, image::ImageFormat::Png)
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                Ok(out.into_inner())
            }
        }
    }
}

/// A scalar image defined on all of space, with a gradient.
///
/// Matching targets and templates are accessed through this trait so that analytic images can
/// stand in for gridded ones.
pub trait Intensity: Sync {
    /// Spatial dimension of the points this image accepts.
    fn dim(&self) -> usize;
    fn value(&self, p: &[f64]) -> f64;
    /// Writes the gradient at `p` into `out` (length `dim`).
    fn gradient(&self, p: &[f64], out: &mut [f64]);
}

impl Intensity for ScalarField {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, p: &[f64]) -> f64 {
        self.eval(p)
    }

    fn gradient(&self, p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.grad(p));
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    lo: usize,
    hi: usize,
    t: f64,
}

/// Points this close outside the grid (in cells) are snapped onto its edge, so that
/// boundary nodes carried around by a flow keep their value despite round-off.
const EDGE_SNAP: f64 = 1e-6;

impl Cell {
    fn locate(coord: f64, n: usize) -> Option<Cell> {
        let last = (n - 1) as f64;
        if !coord.is_finite() || coord < -EDGE_SNAP || coord > last + EDGE_SNAP {
            return None;
        }
        let coord = coord.clamp(0.0, last);
        if n == 1 {
            return Some(Cell { lo: 0, hi: 0, t: 0.0 });
        }
        let lo = (coord.floor() as usize).min(n - 2);
        Some(Cell { lo, hi: lo + 1, t: coord - lo as f64 })
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptFile(format!("bad PGM header near byte {start}")))
    }
}

fn decode_pgm(bytes: &[u8], normalize: bool) -> Result<ScalarField> {
    let ascii = bytes.starts_with(b"P2");
    let mut header = HeaderReader { bytes, pos: 2 };
    let width = header.number()?;
    let height = header.number()?;
    let maxval = header.number()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::CorruptFile(format!("bad PGM header {width}x{height} maxval {maxval}")));
    }
    let count = width * height;
    let raw: Vec<f64> = if ascii {
        (0..count).map(|_| header.number().map(|v| v as f64)).collect::<Result<_>>()?
    } else {
        // exactly one whitespace byte separates the header from the raster
        let start = header.pos + 1;
        let sample = if maxval < 256 { 1 } else { 2 };
        let data = bytes
            .get(start..start + count * sample)
            .ok_or_else(|| Error::CorruptFile(format!("PGM raster truncated: expected {} bytes", count * sample)))?;
        if sample == 1 {
            data.iter().map(|&b| b as f64).collect()
        } else {
            data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
        }
    };
    let scale = if normalize { 1.0 / maxval as f64 } else { 1.0 };
    ScalarField::new(width, height, raw.into_iter().map(|v| v * scale).collect())
}

fn decode_png(bytes: &[u8], normalize: bool) -> Result<ScalarField> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::CorruptFile(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let (raw, maxval): (Vec<f64>, f64) = if sixteen {
        (img.to_luma16().into_raw().into_iter().map(f64::from).collect(), 65535.0)
    } else {
        (img.to_luma8().into_raw().into_iter().map(f64::from).collect(), 255.0)
    };
    let scale = if normalize { 1.0 / maxval } else { 1.0 };
    ScalarField::new(width, height, raw.into_iter().map(|v| v * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bump(w: usize, h: usize) -> ScalarField {
        ScalarField::from_fn(w, h, |i, j| {
            let (dx, dy) = (i as f64 - w as f64 / 2.0, j as f64 - h as f64 / 2.0);
            (-(dx * dx + dy * dy) / 8.0).exp()
        })
        .unwrap()
    }

    #[test]
    fn pgm_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, b"P5\n# comment\n2 2\n255\n\x00\xff\xff\x00").unwrap();
        let f = ScalarField::load(&path, true).unwrap();
        assert_eq!(f.values(), &[0.0, 1.0, 1.0, 0.0]);
        let raw = ScalarField::load(&path, false).unwrap();
        assert_eq!(raw.values(), &[0.0, 255.0, 255.0, 0.0]);
    }

    #[test]
    fn ascii_pgm_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, b"P2\n3 1\n4\n0 2 4\n").unwrap();
        assert_eq!(ScalarField::load(&path, true).unwrap().values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ScalarField::load(dir.path().join("missing.pgm"), true), Err(Error::NotFound(_))));
        let bad = dir.path().join("bad.pgm");
        fs::write(&bad, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(ScalarField::load(&bad, true), Err(Error::CorruptFile(_))));
        let other = dir.path().join("x.bmp");
        fs::write(&other, b"BM....").unwrap();
        assert!(matches!(ScalarField::load(&other, true), Err(Error::UnsupportedFormat(_))));
        let f = bump(4, 4);
        assert!(matches!(f.save(dir.path().join("x.tiff")), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        for ext in ["pgm", "png"] {
            let path = dir.path().join(format!("b.{ext}"));
            bump(9, 7).save(&path).unwrap();
            let once = ScalarField::load(&path, true).unwrap();
            once.save(&path).unwrap();
            let twice = ScalarField::load(&path, true).unwrap();
            assert_eq!(once, twice);
            assert_eq!(once.width(), 9);
            assert_eq!(once.height(), 7);
        }
    }

    #[test]
    fn pgm_encoding_is_bit_exact() {
        let f = ScalarField::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(f.encode(ImageFormat::Pgm).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn bilinear_evaluation() {
        let f = ScalarField::new(3, 2, vec![0.0, 0.2, 0.4, 1.0, 0.6, 0.8]).unwrap();
        assert_eq!(f.eval(&[1.0, 1.0]), 0.6);
        assert_eq!(f.eval(&[2.0, 1.0]), 0.8);
        assert!((f.eval(&[0.5, 0.0]) - 0.1).abs() < 1e-15);
        assert_eq!(f.eval(&[-0.1, 0.0]), 0.0);
        assert_eq!(f.eval(&[0.0, 1.5]), 0.0);
        assert_eq!(f.eval(&[f64::NAN, 0.0]), 0.0);
        // round-off outside an edge still sees the edge value
        assert_eq!(f.eval(&[-1e-12, 1.0]), 1.0);
        assert_eq!(f.eval(&[2.0 + 1e-12, 1.0 + 1e-12]), 0.8);
        assert_eq!(f.eval(&[-1e-3, 1.0]), 0.0);
    }

    #[test]
    fn geometry_is_honoured() {
        let f = ScalarField::from_fn(4, 4, |i, _| i as f64).unwrap().with_geometry([2.0, 0.5], [10.0, -1.0]).unwrap();
        assert_eq!(f.node_position(1, 2), [12.0, 0.0]);
        assert!((f.eval(&[13.0, 0.0]) - 1.5).abs() < 1e-15);
        assert_eq!(f.grad(&[13.0, 0.0]), [0.5, 0.0]);
    }

    #[test]
    fn gradient_simple_fields() {
        let c = ScalarField::new(4, 4, vec![0.3; 16]).unwrap();
        assert_eq!(c.grad(&[1.3, 2.2]), [0.0, 0.0]);
        let ramp = ScalarField::from_fn(5, 5, |i, _| i as f64).unwrap();
        assert_eq!(ramp.grad(&[2.3, 1.7]), [1.0, 0.0]);
        assert_eq!(ramp.grad(&[7.0, 1.0]), [0.0, 0.0]);
    }

    #[test]
    fn gradient_uses_lower_index_cell_on_edges() {
        let f = ScalarField::new(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(f.grad(&[1.0, 0.0])[0], 2.0);
        assert_eq!(f.grad(&[2.0, 0.0])[0], 2.0);
        assert_eq!(f.grad(&[0.0, 0.0])[0], 1.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let f = bump(12, 12);
        let h = 1e-6;
        for p in [[3.3, 4.6], [7.21, 5.77], [5.5, 8.1]] {
            let g = f.grad(&p);
            let fx = (f.eval(&[p[0] + h, p[1]]) - f.eval(&[p[0] - h, p[1]])) / (2.0 * h);
            let fy = (f.eval(&[p[0], p[1] + h]) - f.eval(&[p[0], p[1] - h])) / (2.0 * h);
            assert!((g[0] - fx).abs() < 1e-8 && (g[1] - fy).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_integrates_to_value_difference() {
        let f = bump(10, 10);
        // along row 3 from node 2 to node 6: per-cell gradient is constant
        let integral: f64 = (2..6).map(|i| f.grad(&[i as f64 + 0.5, 3.0])[0]).sum();
        assert!((integral - (f.get(6, 3) - f.get(2, 3))).abs() < 1e-10);
        let integral: f64 = (1..8).map(|j| f.grad(&[4.0, j as f64 + 0.25])[1]).sum();
        assert!((integral - (f.get(4, 8) - f.get(4, 1))).abs() < 1e-10);
    }

    #[test]
    fn smoothing() {
        let f = bump(20, 20);
        assert_eq!(f.smooth(0.0).unwrap(), f);
        let c = ScalarField::new(30, 30, vec![0.4; 900]).unwrap();
        let cs = c.smooth(1.5).unwrap();
        // interior nodes are untouched by the zero padding
        assert!((cs.get(15, 15) - 0.4).abs() < 1e-12);
        let small = ScalarField::from_fn(40, 40, |i, j| if (15..25).contains(&i) && (12..20).contains(&j) { 1.0 } else { 0.0 }).unwrap();
        let blurred = small.smooth(1.0).unwrap();
        let mass = |f: &ScalarField| f.values().iter().sum::<f64>();
        assert!((mass(&small) - mass(&blurred)).abs() < 1e-10);
        assert!(f.smooth(-1.0).is_err());
    }

    #[test]
    fn sample_grid_layout() {
        let f = bump(72, 72);
        let (x, m) = f.sample_grid(1).unwrap();
        assert_eq!(m.len(), 5184);
        assert_eq!(x.len(), 2 * 5184);
        let g = bump(10, 7);
        let (x, m) = g.sample_grid(3).unwrap();
        assert_eq!(m.len(), 4 * 3);
        assert_eq!(&x[..4], &[0.0, 0.0, 3.0, 0.0]);
        for (p, v) in x.chunks(2).zip(&m) {
            assert_eq!(g.eval(p), *v);
        }
        let (x, m) = g.sample_grid(10).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(x, vec![0.0, 0.0]);
        let (_, m) = ScalarField::new(4, 9, vec![0.0; 36]).unwrap().sample_grid(4).unwrap();
        assert_eq!(m.len(), 3);
        assert!(g.sample_grid(0).is_err());
    }

    #[test]
    fn resize_preserves_corners() {
        let f = bump(28, 28);
        let r = f.resize(72, 72).unwrap();
        assert_eq!(r.spacing(), [1.0, 1.0]);
        assert!((r.get(0, 0) - f.get(0, 0)).abs() < 1e-12);
        assert!((r.get(71, 71) - f.get(27, 27)).abs() < 1e-12);
        assert_eq!(f.upsample(72, 72).unwrap().width(), 72);
    }

    proptest! {
        #[test]
        fn eval_is_lipschitz(px in 0.0f64..9.0, py in 0.0f64..9.0, ex in -0.05f64..0.05, ey in -0.05f64..0.05) {
            let f = bump(10, 10);
            let mut lip: f64 = 0.0;
            for j in 0..10 {
                for i in 0..9 {
                    lip = lip.max((f.get(i + 1, j) - f.get(i, j)).abs());
                    lip = lip.max((f.get(j, i + 1) - f.get(j, i)).abs());
                }
            }
            let q = [(px + ex).clamp(0.0, 9.0), (py + ey).clamp(0.0, 9.0)];
            let dist = ((q[0] - px).powi(2) + (q[1] - py).powi(2)).sqrt();
            prop_assert!((f.eval(&[px, py]) - f.eval(&q)).abs() <= 2.0 * lip * dist + 1e-12);
        }
    }
}
