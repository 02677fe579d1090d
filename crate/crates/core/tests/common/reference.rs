//! Loop-based plain ViT forward, written without the tape, for
//! equivalence checks. No pruning.

use supervit::model::{BlockParams, ModelConfig, ModelParams};
use supervit::numerics::Tensor;

fn w(t: &Tensor<f64>, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c]
}

fn linear(x: &[Vec<f64>], wt: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (k, n) = (wt.shape()[0], wt.shape()[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| b.data()[j] + (0..k).map(|i| row[i] * w(wt, i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[f64], gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let denom = (var + 1e-6).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / denom * gamma.data()[j] + beta.data()[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Weighted-sum bilinear sample with half-pixel centers.
fn resize_patch(patch: &[f64], p: usize, c: usize, out: usize) -> Vec<f64> {
    let coord = |o: usize| ((o as f64 + 0.5) * p as f64 / out as f64 - 0.5).clamp(0.0, (p - 1) as f64);
    let mut res = Vec::with_capacity(out * out * c);
    for oy in 0..out {
        for ox in 0..out {
            let (sy, sx) = (coord(oy), coord(ox));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(p - 1), (x0 + 1).min(p - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let at = |y: usize, x: usize| patch[(y * p + x) * c + ch];
                res.push(
                    (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                        + (1.0 - fy) * fx * at(y0, x1)
                        + fy * (1.0 - fx) * at(y1, x0)
                        + fy * fx * at(y1, x1),
                );
            }
        }
    }
    res
}

fn block(cfg: &ModelConfig, p: &BlockParams<Tensor<f64>>, x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = x.len();
    let (d, h) = (cfg.dim, cfg.heads);
    let dh = d / h;
    let scale = cfg.attention_scale.factor(d, h);
    let normed: Vec<Vec<f64>> = x.iter().map(|t| layer_norm(t, &p.norm1_gamma, &p.norm1_beta)).collect();
    let q = linear(&normed, &p.wq, &p.bq);
    let k = linear(&normed, &p.wk, &p.bk);
    let v = linear(&normed, &p.wv, &p.bv);
    let mut ctx = vec![vec![0.0; d]; n];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|t| q[i][off + t] * k[j][off + t]).sum::<f64>() * scale)
                .collect();
            let a = softmax(&logits);
            for t in 0..dh {
                ctx[i][off + t] = (0..n).map(|j| a[j] * v[j][off + t]).sum();
            }
        }
    }
    let attn = linear(&ctx, &p.wo, &p.bo);
    let y: Vec<Vec<f64>> = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let normed: Vec<Vec<f64>> = y.iter().map(|t| layer_norm(t, &p.norm2_gamma, &p.norm2_beta)).collect();
    let hidden: Vec<Vec<f64>> = linear(&normed, &p.fc1_w, &p.fc1_b)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f = linear(&hidden, &p.fc2_w, &p.fc2_b);
    y.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

/// Class probabilities for one `[S, S, C]` image on grid index `grid`.
pub fn plain_vit_probs(cfg: &ModelConfig, params: &ModelParams<f64>, image: &[f64], grid: usize) -> Vec<f64> {
    let (s, c) = (cfg.image_side, cfg.channels);
    let side = cfg.grids[grid];
    let p = s / side;
    let mut features = Vec::new();
    for py in 0..side {
        for px in 0..side {
            let mut patch = Vec::with_capacity(p * p * c);
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        patch.push(image[((py * p + y) * s + px * p + x) * c + ch]);
                    }
                }
            }
            features.push(if p == cfg.base_patch { patch } else { resize_patch(&patch, p, c, cfg.base_patch) });
        }
    }
    let mut tokens = vec![params.cls_token.data().to_vec()];
    tokens.extend(linear(&features, &params.patch_w, &params.patch_b));
    let pos = &params.pos[grid];
    for (i, t) in tokens.iter_mut().enumerate() {
        for (j, v) in t.iter_mut().enumerate() {
            *v += w(pos, i, j);
        }
    }
    for b in &params.blocks {
        tokens = block(cfg, b, tokens);
    }
    let cls = layer_norm(&tokens[0], &params.norm_gamma, &params.norm_beta);
    let logits = linear(&[cls], &params.head_w, &params.head_b).remove(0);
    softmax(&logits)
}
