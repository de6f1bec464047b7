//! Raster line-drawing images and graph rasterization.

use super::{GraphError, LineGraph};
use std::path::Path;

/// A grayscale line drawing. Intensities live in `[0, 1]` with 1.0 as the
/// white background and 0.0 as black line pixels; storage is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl RasterImage {
    /// An all-white image.
    pub fn blank(width: u32, height: u32) -> Self {
        RasterImage {
            width,
            height,
            data: vec![1.0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), (width * height) as usize);
        RasterImage {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn black_pixel_count(&self) -> usize {
        self.data.iter().filter(|&&v| v < 0.5).count()
    }

    /// Read a PNG or plain PGM (P5) file, dispatching on the magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let bytes = std::fs::read(&path)?;
        if bytes.starts_with(b"P5") {
            return Self::decode_pgm(&bytes);
        }
        let img = image::load_from_memory(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?
            .into_luma8();
        Ok(Self::from_bytes(img.width(), img.height(), img.as_raw()))
    }

    /// Write the image; the extension picks the format (`.pgm` or PNG).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            std::fs::write(path, self.encode_pgm())?;
            return Ok(());
        }
        let img = image::GrayImage::from_raw(self.width, self.height, self.to_bytes())
            .expect("buffer length matches dimensions");
        img.save(path)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))?;
        Ok(())
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    fn decode_pgm(bytes: &[u8]) -> Result<Self, GraphError> {
        let bad = |msg: &str| {
            GraphError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("pgm: {msg}"),
            ))
        };
        let mut pos = 0usize;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a P5 file"));
        }
        let width: u32 = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: u32 = fields[2].parse().map_err(|_| bad("bad height"))?;
        let maxval: u32 = fields[3].parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = (width * height) as usize;
        if bytes.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        Ok(Self::from_bytes(width, height, &bytes[pos..pos + need]))
    }
}

/// A binary pixel mask (true = line / foreground).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// One pass of 3x3 morphological dilation.
    pub fn dilate3x3(&self) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                'probe: for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0
                            && ny >= 0
                            && nx < self.width as i64
                            && ny < self.height as i64
                            && self.at(nx as u32, ny as u32)
                        {
                            out.set(x as u32, y as u32, true);
                            break 'probe;
                        }
                    }
                }
            }
        }
        out
    }
}

/// All pixels of the integer midpoint (Bresenham) line between two pixels,
/// endpoints included, in traversal order. When the doubled error lands
/// exactly on a decision boundary both axes advance (a diagonal step), which
/// pins the tie behavior.
pub fn line_pixels(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    let dx = (x1 - x0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let dy = -(y1 - y0).abs();
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
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

/// Render a graph as a raster image.
///
/// Every edge is drawn as a midpoint line between the round-half-up pixels
/// of its endpoints, stamped with a square brush of side `line_width`
/// covering offsets `-(s-1)/2 ..= s/2` on both axes. Isolated vertices get a
/// single brush stamp. Out-of-bounds brush pixels are skipped. Each edge is
/// traversed from its lexicographically smaller endpoint pixel, so the image
/// does not depend on vertex numbering.
pub fn rasterize(graph: &LineGraph, line_width: u32) -> RasterImage {
    assert!(line_width >= 1);
    let mut img = RasterImage::blank(graph.width, graph.height);
    let s = line_width as i64;
    let lo = -((s - 1) / 2);
    let hi = s / 2;
    let stamp = |cx: i64, cy: i64, img: &mut RasterImage| {
        for dy in lo..=hi {
            for dx in lo..=hi {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && x < img.width as i64 && y < img.height as i64 {
                    img.set(x as u32, y as u32, 0.0);
                }
            }
        }
    };
    let mut isolated = vec![true; graph.vertex_count()];
    for &(a, b) in &graph.edges {
        isolated[a] = false;
        isolated[b] = false;
        let mut p0 = graph.vertices[a].round_pixel();
        let mut p1 = graph.vertices[b].round_pixel();
        if p1 < p0 {
            std::mem::swap(&mut p0, &mut p1);
        }
        for (x, y) in line_pixels(p0.0, p0.1, p1.0, p1.1) {
            stamp(x, y, &mut img);
        }
    }
    for (i, v) in graph.vertices.iter().enumerate() {
        if isolated[i] {
            let (x, y) = v.round_pixel();
            stamp(x, y, &mut img);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::super::Point;
    use super::*;

    #[test]
    fn empty_graph_renders_blank() {
        let g = LineGraph::new(8, 8);
        let img = rasterize(&g, 2);
        assert_eq!(img, RasterImage::blank(8, 8));
    }

    #[test]
    fn horizontal_segment_width_one_hits_exact_pixels() {
        let mut g = LineGraph::new(8, 8);
        g.vertices.push(Point::new(0.0, 0.0));
        g.vertices.push(Point::new(3.0, 0.0));
        g.add_edge(0, 1).unwrap();
        let img = rasterize(&g, 1);
        let mut black = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                if img.at(x, y) == 0.0 {
                    black.push((x, y));
                }
            }
        }
        assert_eq!(black, vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn line_pixels_match_stepping_oracle_on_diagonals() {
        // The midpoint rule advances both axes when the doubled error sits
        // exactly on a boundary; spot-check a few octants against hand walks.
        assert_eq!(line_pixels(0, 0, 3, 3), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        // Slope 1/2 hits the tie at every x step: err starts at 2, e2 = 4 = dx
        // so x and y advance together, then e2 = 8 > dx advances x alone.
        assert_eq!(line_pixels(0, 0, 4, 2), vec![(0, 0), (1, 1), (2, 1), (3, 2), (4, 2)]);
        assert_eq!(line_pixels(2, 5, 2, 1), vec![(2, 5), (2, 4), (2, 3), (2, 2), (2, 1)]);
        // Every pixel stays within half a pixel of the ideal line.
        for &(x1, y1) in &[(6i64, 3i64), (5, -4), (-7, 2), (3, 8)] {
            for (x, y) in line_pixels(0, 0, x1, y1) {
                let t = if x1.abs() >= y1.abs() {
                    x as f64 / x1 as f64
                } else {
                    y as f64 / y1 as f64
                };
                let ex = t * x1 as f64;
                let ey = t * y1 as f64;
                assert!((x as f64 - ex).abs() <= 0.5 + 1e-9);
                assert!((y as f64 - ey).abs() <= 0.5 + 1e-9);
            }
        }
    }

    #[test]
    fn black_pixels_iff_vertices_exist() {
        let mut g = LineGraph::new(8, 8);
        assert_eq!(rasterize(&g, 2).black_pixel_count(), 0);
        g.vertices.push(Point::new(4.0, 4.0));
        assert!(rasterize(&g, 2).black_pixel_count() > 0);
    }

    #[test]
    fn rasterize_is_invariant_under_vertex_permutation() {
        let mut g = LineGraph::new(16, 16);
        g.vertices.push(Point::new(1.0, 1.0));
        g.vertices.push(Point::new(12.0, 3.0));
        g.vertices.push(Point::new(6.0, 14.0));
        g.add_edge(0, 1).unwrap();
        g.add_edge(1, 2).unwrap();
        let mut p = LineGraph::new(16, 16);
        p.vertices.push(g.vertices[2]);
        p.vertices.push(g.vertices[0]);
        p.vertices.push(g.vertices[1]);
        p.add_edge(1, 2).unwrap();
        p.add_edge(2, 0).unwrap();
        assert_eq!(rasterize(&g, 2), rasterize(&p, 2));
    }

    #[test]
    fn pgm_round_trip() {
        let mut img = RasterImage::blank(5, 3);
        img.set(2, 1, 0.0);
        img.set(4, 2, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        img.save(&path).unwrap();
        let back = RasterImage::load(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        assert_eq!(back.at(2, 1), 0.0);
        assert!((back.at(4, 2) - 0.25).abs() < 1.0 / 255.0);
    }

    #[test]
    fn png_round_trip() {
        let mut img = RasterImage::blank(4, 4);
        img.set(1, 2, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        img.save(&path).unwrap();
        let back = RasterImage::load(&path).unwrap();
        assert_eq!(back.to_bytes(), img.to_bytes());
    }
}
