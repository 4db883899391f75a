//! Any-resolution encoding on synthetic 2D grids: split the grid into
//! local patches, apply one randomly selected geometric transform per
//! patch, encode every transformed patch plus a resized global view with a
//! linear patch encoder, and concatenate all token features.
//!
//! Standalone by design: the math is exercised end to end on single-channel
//! grids without touching the transformer pipeline.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel 2D grid with row-major values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Grid> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("grid extents must be >= 1".into()));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn random<R: Rng>(height: usize, width: usize, rng: &mut R) -> Grid {
        Grid {
            height,
            width,
            values: (0..height * width).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    /// Parses a CSV of floats (one grid row per line).
    pub fn from_csv<R: BufRead>(r: R) -> Result<Grid> {
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("grid csv line {}: {e}", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Parse(format!(
                        "grid csv line {}: expected {w} columns, got {}",
                        lineno + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            values.extend(row);
            height += 1;
        }
        Grid::new(height, width.unwrap_or(0), values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| self.get(r, c).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Deterministic geometric grid transforms. Rotations and flips permute
/// cells (value multiset preserved); integer shear shifts rows and pads
/// with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridTransform {
    Identity,
    Rotate90,
    Rotate180,
    Rotate270,
    FlipHorizontal,
    FlipVertical,
    /// Horizontal shear: row r shifts right by `r * k` cells.
    Shear(i32),
}

impl GridTransform {
    pub fn apply(&self, g: &Grid) -> Grid {
        let (h, w) = (g.height, g.width);
        match self {
            GridTransform::Identity => g.clone(),
            GridTransform::Rotate90 => {
                // Clockwise: (r, c) of the W x H output reads (H-1-c, r).
                let mut v = vec![0.0; w * h];
                for r in 0..w {
                    for c in 0..h {
                        v[r * h + c] = g.get(h - 1 - c, r);
                    }
                }
                Grid {
                    height: w,
                    width: h,
                    values: v,
                }
            }
            GridTransform::Rotate180 => {
                let mut v = vec![0.0; h * w];
                for r in 0..h {
                    for c in 0..w {
                        v[r * w + c] = g.get(h - 1 - r, w - 1 - c);
                    }
                }
                Grid {
                    height: h,
                    width: w,
                    values: v,
                }
            }
            GridTransform::Rotate270 => {
                let mut v = vec![0.0; w * h];
                for r in 0..w {
                    for c in 0..h {
                        v[r * h + c] = g.get(c, w - 1 - r);
                    }
                }
                Grid {
                    height: w,
                    width: h,
                    values: v,
                }
            }
            GridTransform::FlipHorizontal => {
                let mut v = vec![0.0; h * w];
                for r in 0..h {
                    for c in 0..w {
                        v[r * w + c] = g.get(r, w - 1 - c);
                    }
                }
                Grid {
                    height: h,
                    width: w,
                    values: v,
                }
            }
            GridTransform::FlipVertical => {
                let mut v = vec![0.0; h * w];
                for r in 0..h {
                    for c in 0..w {
                        v[r * w + c] = g.get(h - 1 - r, c);
                    }
                }
                Grid {
                    height: h,
                    width: w,
                    values: v,
                }
            }
            GridTransform::Shear(k) => {
                let mut v = vec![0.0; h * w];
                for r in 0..h {
                    let shift = (r as i64) * (*k as i64);
                    for c in 0..w {
                        let src = c as i64 - shift;
                        if src >= 0 && (src as usize) < w {
                            v[r * w + c] = g.get(r, src as usize);
                        }
                    }
                }
                Grid {
                    height: h,
                    width: w,
                    values: v,
                }
            }
        }
    }
}

/// Non-empty menu of transforms to draw from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformSet(Vec<GridTransform>);

impl TransformSet {
    pub fn new(transforms: Vec<GridTransform>) -> Result<TransformSet> {
        if transforms.is_empty() {
            return Err(Error::Config("transform set must be non-empty".into()));
        }
        Ok(TransformSet(transforms))
    }

    /// The full menu: identity, the three rotations, both flips, shear(1).
    pub fn standard() -> TransformSet {
        TransformSet(vec![
            GridTransform::Identity,
            GridTransform::Rotate90,
            GridTransform::Rotate180,
            GridTransform::Rotate270,
            GridTransform::FlipHorizontal,
            GridTransform::FlipVertical,
            GridTransform::Shear(1),
        ])
    }

    pub fn identity_only() -> TransformSet {
        TransformSet(vec![GridTransform::Identity])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn transforms(&self) -> &[GridTransform] {
        &self.0
    }
}

/// Applies one uniformly selected transform from the set.
pub fn random_transform<R: Rng>(patch: &Grid, ts: &TransformSet, rng: &mut R) -> (Grid, GridTransform) {
    let t = ts.0[rng.gen_range(0..ts.0.len())];
    (t.apply(patch), t)
}

/// Splits into `rows x cols` equal non-overlapping patches in row-major
/// order. Extents must divide exactly (resize first otherwise).
pub fn split_grid(g: &Grid, rows: usize, cols: usize) -> Result<Vec<Grid>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config("split needs rows, cols >= 1".into()));
    }
    if g.height % rows != 0 || g.width % cols != 0 {
        return Err(Error::Contract(format!(
            "grid {}x{} not divisible into {rows}x{cols} patches; resize first",
            g.height, g.width
        )));
    }
    let (ph, pw) = (g.height / rows, g.width / cols);
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut v = Vec::with_capacity(ph * pw);
            for r in 0..ph {
                for c in 0..pw {
                    v.push(g.get(pr * ph + r, pc * pw + c));
                }
            }
            patches.push(Grid {
                height: ph,
                width: pw,
                values: v,
            });
        }
    }
    Ok(patches)
}

/// Inverse of [`split_grid`] for same-size patches in row-major order.
pub fn reassemble(patches: &[Grid], rows: usize, cols: usize) -> Result<Grid> {
    if patches.len() != rows * cols || patches.is_empty() {
        return Err(Error::Contract(format!(
            "reassemble: {} patches for a {rows}x{cols} tiling",
            patches.len()
        )));
    }
    let (ph, pw) = (patches[0].height, patches[0].width);
    let mut g = Grid {
        height: rows * ph,
        width: cols * pw,
        values: vec![0.0; rows * ph * cols * pw],
    };
    for (i, p) in patches.iter().enumerate() {
        if p.height != ph || p.width != pw {
            return Err(Error::Shape("reassemble: patch sizes differ".into()));
        }
        let (pr, pc) = (i / cols, i % cols);
        for r in 0..ph {
            for c in 0..pw {
                g.values[(pr * ph + r) * g.width + (pc * pw + c)] = p.get(r, c);
            }
        }
    }
    Ok(g)
}

/// Bilinear resize with corner alignment (exact identity when the size is
/// unchanged).
pub fn bilinear_resize(g: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize extents must be >= 1".into()));
    }
    let src_coord = |i: usize, out: usize, inp: usize| -> f64 {
        if out == 1 {
            (inp - 1) as f64 / 2.0
        } else {
            i as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let mut v = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = src_coord(r, out_h, g.height);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(g.height - 1);
        let fy = y - y0 as f64;
        for c in 0..out_w {
            let x = src_coord(c, out_w, g.width);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(g.width - 1);
            let fx = x - x0 as f64;
            let top = g.get(y0, x0) * (1.0 - fx) + g.get(y0, x1) * fx;
            let bottom = g.get(y1, x0) * (1.0 - fx) + g.get(y1, x1) * fx;
            v.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::new(out_h, out_w, v)
}

/// Linear patch encoder: flattens each `p x p` tile row-major and projects
/// it to a `dim`-vector.
pub struct PatchEncoder {
    pub patch_size: usize,
    pub dim: usize,
    /// `[p^2, dim]` projection.
    pub projection: Tensor,
}

impl PatchEncoder {
    pub fn new(patch_size: usize, dim: usize, projection: Tensor) -> Result<PatchEncoder> {
        if projection.shape() != [patch_size * patch_size, dim] {
            return Err(Error::Shape(format!(
                "patch encoder projection must be [{}, {dim}], got {:?}",
                patch_size * patch_size,
                projection.shape()
            )));
        }
        Ok(PatchEncoder {
            patch_size,
            dim,
            projection,
        })
    }

    pub fn init<R: Rng>(patch_size: usize, dim: usize, rng: &mut R) -> PatchEncoder {
        PatchEncoder {
            patch_size,
            dim,
            projection: Tensor::randn(&[patch_size * patch_size, dim], 0.5, rng),
        }
    }

    /// Tokens per grid: `(H/p) * (W/p)`.
    pub fn tokens_for(&self, g: &Grid) -> Result<usize> {
        let p = self.patch_size;
        if g.height % p != 0 || g.width % p != 0 {
            return Err(Error::Contract(format!(
                "encoder patch size {p} does not divide grid {}x{}",
                g.height, g.width
            )));
        }
        Ok((g.height / p) * (g.width / p))
    }

    /// Encodes a grid into a `[tokens, dim]` feature matrix.
    pub fn encode(&self, g: &Grid) -> Result<Tensor> {
        let tokens = self.tokens_for(g)?;
        let p = self.patch_size;
        let tiles_w = g.width / p;
        let mut flat = Vec::with_capacity(tokens * p * p);
        for t in 0..tokens {
            let (tr, tc) = (t / tiles_w, t % tiles_w);
            for r in 0..p {
                for c in 0..p {
                    flat.push(g.get(tr * p + r, tc * p + c));
                }
            }
        }
        let tiles = Tensor::from_vec(&[tokens, p * p], flat, false)?;
        tiles.matmul(&self.projection)
    }
}

/// Full pipeline settings.
pub struct AnyResConfig {
    pub split_rows: usize,
    pub split_cols: usize,
    pub resize_to: (usize, usize),
    pub seed: u64,
}

/// Split, transform (one random pick per patch, a pure function of
/// `(seed, patch index)`), encode every patch and the resized original,
/// and concatenate: `[(N + 1) * T_p, dim]` with patch tokens first.
pub fn anyres_encode(
    g: &Grid,
    ts: &TransformSet,
    enc: &PatchEncoder,
    cfg: &AnyResConfig,
) -> Result<Tensor> {
    let patches = split_grid(g, cfg.split_rows, cfg.split_cols)?;
    let tokens_per_patch = {
        let p = &patches[0];
        let pt = enc.tokens_for(p)?;
        // Rotations swap extents; both must stay divisible.
        if p.height % enc.patch_size != 0 || p.width % enc.patch_size != 0 {
            return Err(Error::Contract(format!(
                "patch {}x{} incompatible with encoder patch size {}",
                p.height, p.width, enc.patch_size
            )));
        }
        pt
    };
    let mut features: Vec<f64> = Vec::new();
    for (idx, patch) in patches.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64 + 1);
        let (transformed, _t) = random_transform(patch, ts, &mut rng);
        let z = enc.encode(&transformed)?;
        if z.shape()[0] != tokens_per_patch {
            return Err(Error::Contract(format!(
                "patch {idx} produced {} tokens, expected {tokens_per_patch}",
                z.shape()[0]
            )));
        }
        features.extend_from_slice(&z.data());
    }
    let resized = bilinear_resize(g, cfg.resize_to.0, cfg.resize_to.1)?;
    let z_ori = enc.encode(&resized)?;
    if z_ori.shape()[0] != tokens_per_patch {
        return Err(Error::Contract(format!(
            "resized view produced {} tokens, expected {tokens_per_patch} per patch",
            z_ori.shape()[0]
        )));
    }
    features.extend_from_slice(&z_ori.data());
    let n = patches.len();
    Tensor::from_vec(&[(n + 1) * tokens_per_patch, enc.dim], features, false)
}
