//! Independent reference implementations used as test oracles. They share
//! no code with the library beyond its data types.

#![allow(clippy::needless_range_loop)]

#![allow(dead_code)]

use lrbench_core::vit::{BaseParameters, LRTokenBank};
use lrbench_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    Image::from_fn(h, w, |_, _, _| rng.random::<f32>())
}

/// Smooth gradients with a few sharp edges and a fine checkerboard.
pub fn standard_test_image(size: usize) -> Image {
    let s = size as f32;
    Image::from_fn(size, size, |y, x, c| {
        let (fy, fx) = (y as f32 / s, x as f32 / s);
        let base = match c {
            0 => fx,
            1 => fy,
            _ => 0.5 + 0.5 * ((fx * 9.0).sin() * (fy * 7.0).cos()),
        };
        let disc = ((fx - 0.35).powi(2) + (fy - 0.4).powi(2)).sqrt() < 0.18;
        let checker = fx > 0.6 && fy > 0.55 && ((x / 3 + y / 3) % 2 == 0);
        if disc {
            0.9 - 0.3 * c as f32
        } else if checker {
            1.0 - base
        } else {
            base
        }
    })
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- bicubic -------------------------------------------------------------

fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Direct 4×4 neighbourhood sum per output pixel, no separability.
pub fn bicubic_reference(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (in_h, in_w) = (img.height() as i64, img.width() as i64);
    Image::from_fn(out_h, out_w, |oy, ox, c| {
        let sy = (oy as f64 + 0.5) * in_h as f64 / out_h as f64 - 0.5;
        let sx = (ox as f64 + 0.5) * in_w as f64 / out_w as f64 - 0.5;
        let (y0, x0) = (sy.floor() as i64, sx.floor() as i64);
        let mut acc = 0.0f64;
        for ty in y0 - 1..=y0 + 2 {
            for tx in x0 - 1..=x0 + 2 {
                let w = cubic(sy - ty as f64) * cubic(sx - tx as f64);
                let py = ty.clamp(0, in_h - 1) as usize;
                let px = tx.clamp(0, in_w - 1) as usize;
                acc += w * f64::from(img.get(py, px, c));
            }
        }
        acc.clamp(0.0, 1.0) as f32
    })
}

// ---- transformer forward ---------------------------------------------------

type Mat = Vec<Vec<f64>>;

fn row_ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * g[i] + b[i]).collect()
}

fn linear(x: &[f64], w: &ndarray::Array2<f64>, b: &ndarray::Array1<f64>) -> Vec<f64> {
    let (rows, cols) = w.dim();
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        let mut s = b[j];
        for i in 0..rows {
            s += x[i] * w[[i, j]];
        }
        out[j] = s;
    }
    out
}

fn gelu(u: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (c * (u + 0.044715 * u.powi(3))).tanh())
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn pooled(x: &Mat, patches: usize) -> Vec<f64> {
    let d = x[0].len();
    let mut m = vec![0.0; d];
    for row in &x[1..=patches] {
        for j in 0..d {
            m[j] += row[j] / patches as f64;
        }
    }
    unit(m)
}

fn bank_active(b: usize, start: usize) -> bool {
    if b == 0 {
        start == 0
    } else {
        b >= start.max(1)
    }
}

/// Straight-line scalar forward pass: returns the embedding and the per-layer
/// pooled features.
pub fn forward_reference(
    p: &BaseParameters,
    tokens: Option<&LRTokenBank>,
    img: &Image,
    start: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let cfg = &p.config;
    let ps = cfg.patch_size;
    let grid = cfg.input_res / ps;
    let np = grid * grid;
    let d = cfg.dim;
    let mut x: Mat = vec![p.cls.to_vec()];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut flat = Vec::new();
            for py in 0..ps {
                for px in 0..ps {
                    for c in 0..3 {
                        flat.push(2.0 * f64::from(img.get(gy * ps + py, gx * ps + px, c)) - 1.0);
                    }
                }
            }
            x.push(linear(&flat, &p.patch_w, &p.patch_b));
        }
    }
    let add_bank = |x: &mut Mat, b: usize| {
        if let Some(t) = tokens {
            if bank_active(b, start) {
                for k in 0..np {
                    for j in 0..d {
                        x[k + 1][j] += t.bank(b)[[k, j]];
                    }
                }
            }
        }
    };
    add_bank(&mut x, 0);
    for (k, row) in x.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += p.pos[[k, j]];
        }
    }
    let mut layers = vec![pooled(&x, np)];
    let hd = d / cfg.heads;
    for (bi, blk) in p.blocks.iter().enumerate() {
        add_bank(&mut x, bi + 1);
        let n = x.len();
        let h: Mat = x.iter().map(|r| row_ln(r, blk.ln1_g.as_slice().unwrap(), blk.ln1_b.as_slice().unwrap())).collect();
        let q: Mat = h.iter().map(|r| linear(r, &blk.wq, &blk.bq)).collect();
        let k: Mat = h.iter().map(|r| linear(r, &blk.wk, &blk.bk)).collect();
        let v: Mat = h.iter().map(|r| linear(r, &blk.wv, &blk.bv)).collect();
        let mut o = vec![vec![0.0; d]; n];
        for head in 0..cfg.heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    o[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        for i in 0..n {
            let a = linear(&o[i], &blk.wo, &blk.bo);
            for j in 0..d {
                x[i][j] += a[j];
            }
            let h2 = row_ln(&x[i], blk.ln2_g.as_slice().unwrap(), blk.ln2_b.as_slice().unwrap());
            let u: Vec<f64> = linear(&h2, &blk.w1, &blk.b1).into_iter().map(gelu).collect();
            let m = linear(&u, &blk.w2, &blk.b2);
            for j in 0..d {
                x[i][j] += m[j];
            }
        }
        layers.push(pooled(&x, np));
    }
    let cls = row_ln(&x[0], p.norm_g.as_slice().unwrap(), p.norm_b.as_slice().unwrap());
    (unit(linear(&cls, &p.proj, &p.proj_b)), layers)
}

// ---- contrastive loss ------------------------------------------------------

/// Mean over student sets of the symmetric softmax cross-entropy.
pub fn loss_reference(students: &[Mat], teacher: &Mat, tau: f64) -> f64 {
    let b = teacher.len();
    let mut total = 0.0;
    for s in students {
        let logit = |i: usize, j: usize| s[i].iter().zip(&teacher[j]).map(|(a, c)| a * c).sum::<f64>() / tau;
        let mut row_loss = 0.0;
        let mut col_loss = 0.0;
        for i in 0..b {
            let denom_r: f64 = (0..b).map(|j| logit(i, j).exp()).sum();
            row_loss += -(logit(i, i).exp() / denom_r).ln();
            let denom_c: f64 = (0..b).map(|j| logit(j, i).exp()).sum();
            col_loss += -(logit(i, i).exp() / denom_c).ln();
        }
        total += 0.5 * (row_loss + col_loss) / b as f64;
    }
    total / students.len() as f64
}

// ---- rank statistics -------------------------------------------------------

/// Spearman via the textbook average-rank definition.
pub fn spearman_reference(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Objective value computed from scratch: WAR per model, then weighted
/// Spearman against each objective dataset.
pub fn objective_reference(values: &[Vec<f64>], weights: &[f64], terms: &[(usize, f64)]) -> f64 {
    let wsum: f64 = weights.iter().map(|w| w.abs()).sum();
    let war: Vec<f64> = values
        .iter()
        .map(|row| row.iter().zip(weights).map(|(g, w)| (g * w).abs()).sum::<f64>() / wsum)
        .collect();
    terms
        .iter()
        .map(|&(j, c)| {
            let col: Vec<f64> = values.iter().map(|r| r[j]).collect();
            c * spearman_reference(&war, &col)
        })
        .sum()
}
