use super::Result;
use crate::tilestore::{Modality, Tileset};

/// Per-tile feature vectors for one modality.
///
/// Each channel contributes `grid * grid` block means followed by max, mean,
/// standard deviation and max-minus-mean of the channel. Pixels are divided
/// by `scale`, the largest absolute pixel value in the tileset's modality,
/// unless a scale is supplied (for example from a saved model).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub modality: Modality,
    pub grid: usize,
    pub scale: f32,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn build(
        tileset: &Tileset,
        modality: Modality,
        grid: usize,
        scale: Option<f32>,
    ) -> Result<Self> {
        let stack = tileset.stack(modality)?;
        let scale = scale.unwrap_or_else(|| {
            let max = stack.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if max > 0.0 {
                max
            } else {
                1.0
            }
        });
        let dim = Self::dim_for(stack.channels, grid);
        let mut data = Vec::with_capacity(stack.len() * dim);
        for t in 0..stack.len() {
            extract_into(
                stack.block(t),
                stack.height,
                stack.width,
                stack.channels,
                grid,
                scale,
                &mut data,
            );
        }
        Ok(Self {
            modality,
            grid,
            scale,
            dim,
            data,
        })
    }

    pub fn dim_for(channels: usize, grid: usize) -> usize {
        channels * (grid * grid + 4)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, tile: usize) -> &[f32] {
        &self.data[tile * self.dim..(tile + 1) * self.dim]
    }

    pub fn rows<'a>(&'a self, ids: &[usize]) -> Vec<&'a [f32]> {
        ids.iter().map(|&i| self.row(i)).collect()
    }
}

/// Pooled features of one `h x w x c` block.
pub fn extract(block: &[f32], h: usize, w: usize, c: usize, grid: usize, scale: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(FeatureTable::dim_for(c, grid));
    extract_into(block, h, w, c, grid, scale, &mut out);
    out
}

fn span(i: usize, n: usize, grid: usize) -> (usize, usize) {
    let start = i * n / grid;
    let end = ((i + 1) * n / grid).max(start + 1).min(n);
    (start.min(n - 1), end)
}

fn extract_into(
    block: &[f32],
    h: usize,
    w: usize,
    c: usize,
    grid: usize,
    scale: f32,
    out: &mut Vec<f32>,
) {
    let inv = 1.0 / scale as f64;
    for ch in 0..c {
        for gr in 0..grid {
            let (r0, r1) = span(gr, h, grid);
            for gc in 0..grid {
                let (c0, c1) = span(gc, w, grid);
                let mut sum = 0.0f64;
                for r in r0..r1 {
                    for col in c0..c1 {
                        sum += block[(r * w + col) * c + ch] as f64;
                    }
                }
                out.push((sum / ((r1 - r0) * (c1 - c0)) as f64 * inv) as f32);
            }
        }
        let n = (h * w) as f64;
        let (mut max, mut sum, mut sq) = (f64::MIN, 0.0f64, 0.0f64);
        for p in 0..h * w {
            let v = block[p * c + ch] as f64 * inv;
            max = max.max(v);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n;
        let std = (sq / n - mean * mean).max(0.0).sqrt();
        out.extend_from_slice(&[max as f32, mean as f32, std as f32, (max - mean) as f32]);
    }
}
