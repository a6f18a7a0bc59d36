use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Letters with built-in stroke definitions.
pub const BUILTIN_LETTERS: [char; 8] = ['A', 'E', 'H', 'I', 'L', 'S', 'T', 'X'];

/// Half-width of the square raster window.
pub const EXTENT: f64 = 1.2;

/// A letter drawn as thick polylines, rasterized on a square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub letter: char,
    pub strokes: Vec<Vec<(f64, f64)>>,
    pub resolution: usize,
    pub thickness: f64,
}

fn strokes_for(letter: char) -> Option<Vec<Vec<(f64, f64)>>> {
    let s = match letter {
        'A' => vec![
            vec![(-0.55, -0.7), (0.0, 0.7), (0.55, -0.7)],
            vec![(-0.33, -0.1), (0.33, -0.1)],
        ],
        'E' => vec![
            vec![(0.5, 0.7), (-0.5, 0.7), (-0.5, -0.7), (0.5, -0.7)],
            vec![(-0.5, 0.0), (0.35, 0.0)],
        ],
        'H' => vec![
            vec![(-0.5, -0.7), (-0.5, 0.7)],
            vec![(0.5, -0.7), (0.5, 0.7)],
            vec![(-0.5, 0.0), (0.5, 0.0)],
        ],
        'I' => vec![vec![(0.0, -0.7), (0.0, 0.7)]],
        'L' => vec![vec![(-0.45, 0.7), (-0.45, -0.7), (0.5, -0.7)]],
        'S' => vec![vec![
            (0.5, 0.55),
            (0.3, 0.7),
            (-0.3, 0.7),
            (-0.5, 0.45),
            (-0.5, 0.2),
            (-0.3, 0.02),
            (0.3, -0.02),
            (0.5, -0.2),
            (0.5, -0.45),
            (0.3, -0.7),
            (-0.3, -0.7),
            (-0.5, -0.55),
        ]],
        'T' => vec![
            vec![(-0.6, 0.7), (0.6, 0.7)],
            vec![(0.0, 0.7), (0.0, -0.7)],
        ],
        'X' => vec![
            vec![(-0.55, -0.7), (0.55, 0.7)],
            vec![(-0.55, 0.7), (0.55, -0.7)],
        ],
        _ => return None,
    };
    Some(s)
}

impl GlyphSpec {
    /// Built-in glyph at 48×48 with stroke thickness 0.18.
    pub fn builtin(letter: char) -> Result<Self> {
        let letter = letter.to_ascii_uppercase();
        let strokes = strokes_for(letter).ok_or_else(|| {
            Error::invalid(format!(
                "no built-in glyph for '{letter}'; available: {}",
                BUILTIN_LETTERS.iter().collect::<String>()
            ))
        })?;
        Ok(Self {
            letter,
            strokes,
            resolution: 48,
            thickness: 0.18,
        })
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 * EXTENT / self.resolution as f64
    }

    /// Centers of the foreground pixels after rotating the strokes by
    /// `rotation` radians about the origin.
    pub fn foreground(&self, rotation: f64) -> Result<Vec<(f64, f64)>> {
        let rot = normalize_rotation(rotation)?;
        let (s, c) = rot.sin_cos();
        let segs: Vec<((f64, f64), (f64, f64))> = self
            .strokes
            .iter()
            .flat_map(|line| line.windows(2).map(|w| (w[0], w[1])))
            .map(|(a, b)| {
                let r = |(x, y): (f64, f64)| (c * x - s * y, s * x + c * y);
                (r(a), r(b))
            })
            .collect();
        let half = self.thickness / 2.0;
        let px = self.pixel_size();
        let mut out = Vec::new();
        for row in 0..self.resolution {
            let y = -EXTENT + (row as f64 + 0.5) * px;
            for col in 0..self.resolution {
                let x = -EXTENT + (col as f64 + 0.5) * px;
                if segs.iter().any(|&(a, b)| seg_dist(a, b, (x, y)) <= half) {
                    out.push((x, y));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Data(format!(
                "glyph '{}' has no foreground pixels",
                self.letter
            )));
        }
        Ok(out)
    }
}

/// Reduces a finite angle into `[0, 2π)`.
pub fn normalize_rotation(r: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(Error::invalid("rotation must be finite"));
    }
    let x = r.rem_euclid(TAU);
    Ok(if x >= TAU { 0.0 } else { x })
}

fn seg_dist(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Uniform samples over the rotated silhouette: a random foreground pixel
/// plus uniform jitter inside it.
pub fn render_condition<R: Rng + ?Sized>(
    glyph: &GlyphSpec,
    rotation: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let fg = glyph.foreground(rotation)?;
    let half = glyph.pixel_size() / 2.0;
    let mut out = Array2::zeros((n_samples, 2));
    for mut row in out.rows_mut() {
        let (x, y) = fg[rng.random_range(0..fg.len())];
        row[0] = x + rng.random_range(-half..half);
        row[1] = y + rng.random_range(-half..half);
    }
    Ok(out)
}
