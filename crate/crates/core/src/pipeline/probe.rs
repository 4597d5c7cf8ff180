//! Measurements on trained models: the cross-modal attribute probe,
//! held-out reconstruction error and textualization hit rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vkd_tensor::{no_grad, Tensor};

use crate::data::{attribute_words, PairGenerator, SyntheticPair};
use crate::error::{Result, VkdError};
use crate::integration::{loss_iakr, Decode};
use crate::model::Model;
use crate::tokenizer;

const PROBE_CHUNK: usize = 20;
const PROBE_L2: f64 = 1e-3;
const PROBE_ITERS: usize = 2000;
const PROBE_LR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Accuracy on the image features the probe was fit on.
    pub fit_accuracy: f64,
    /// Accuracy on knowledge distilled from held-out captions alone.
    pub text_accuracy: f64,
    pub chance: f64,
    pub n_fit: usize,
    pub n_eval: usize,
}

/// Mean over queries, then L2 normalization: one row per sample.
fn pooled(k: &Tensor) -> Vec<Vec<f64>> {
    let (b, n, d) = (k.dim(0), k.dim(1), k.dim(2));
    let data = k.data();
    (0..b)
        .map(|i| {
            let mut v = vec![0.0; d];
            for q in 0..n {
                for j in 0..d {
                    v[j] += data[(i * n + q) * d + j] / n as f64;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

fn image_features(model: &Model, pairs: &[SyntheticPair]) -> Result<Vec<Vec<f64>>> {
    let s = model.cfg.image_size;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(PROBE_CHUNK) {
        let pixels: Vec<f64> = chunk.iter().flat_map(|p| p.image.iter().copied()).collect();
        let images = Tensor::new(&[chunk.len(), 3, s, s], pixels)?;
        out.extend(pooled(&no_grad(|| model.knowledge_from_images(&images))?.k));
    }
    Ok(out)
}

fn text_features(model: &Model, texts: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(PROBE_CHUNK) {
        out.extend(pooled(&no_grad(|| model.knowledge_from_text(chunk))?.k));
    }
    Ok(out)
}

/// Multinomial logistic regression fit by full-batch gradient descent
/// with L2 penalty on the weights. Returns `(W [d][A], b [A])`.
pub fn fit_softmax_probe(x: &[Vec<f64>], y: &[usize], classes: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len().max(1) as f64;
    let mut w = vec![vec![0.0; classes]; d];
    let mut b = vec![0.0; classes];
    for _ in 0..PROBE_ITERS {
        let mut gw = vec![vec![0.0; classes]; d];
        let mut gb = vec![0.0; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let p = softmax_scores(&w, &b, xi);
            for c in 0..classes {
                let delta = (p[c] - if c == yi { 1.0 } else { 0.0 }) / n;
                gb[c] += delta;
                for j in 0..d {
                    gw[j][c] += delta * xi[j];
                }
            }
        }
        for j in 0..d {
            for c in 0..classes {
                w[j][c] -= PROBE_LR * (gw[j][c] + 2.0 * PROBE_L2 * w[j][c]);
            }
        }
        for c in 0..classes {
            b[c] -= PROBE_LR * gb[c];
        }
    }
    (w, b)
}

fn softmax_scores(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for (j, xj) in x.iter().enumerate() {
        for (c, zc) in z.iter_mut().enumerate() {
            *zc += xj * w[j][c];
        }
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn accuracy(w: &[Vec<f64>], b: &[f64], x: &[Vec<f64>], y: &[usize]) -> f64 {
    let hits = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| crate::integration::argmax(&softmax_scores(w, b, xi)) == yi)
        .count();
    hits as f64 / x.len().max(1) as f64
}

/// Fits a linear probe on pooled K_I of labelled images, then classifies
/// pooled K_T computed from held-out captions only. Held-out data is always
/// drawn with the true image-caption correspondence.
pub fn knowledge_probe(model: &Model, seed: u64, n_fit: usize, n_eval: usize) -> Result<ProbeReport> {
    if n_fit == 0 || n_eval == 0 {
        return Err(VkdError::input("probe needs non-empty fit and evaluation sets"));
    }
    let gen = PairGenerator::new(model.cfg.image_size, model.cfg.attribute_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fit = gen.draw(&mut rng, n_fit);
    let eval = gen.draw(&mut rng, n_eval);
    let xf = image_features(model, &fit)?;
    let yf: Vec<usize> = fit.iter().map(|p| p.attribute).collect();
    let texts: Vec<Vec<usize>> = eval.iter().map(|p| tokenizer::encode(&p.caption)).collect();
    let xe = text_features(model, &texts)?;
    let ye: Vec<usize> = eval.iter().map(|p| p.attribute).collect();
    let a = model.cfg.attribute_count;
    let (w, b) = fit_softmax_probe(&xf, &yf, a);
    Ok(ProbeReport {
        fit_accuracy: accuracy(&w, &b, &xf, &yf),
        text_accuracy: accuracy(&w, &b, &xe, &ye),
        chance: 1.0 / a as f64,
        n_fit,
        n_eval,
    })
}

/// Mean reconstruction MSE between K_T and K̂ over held-out captions.
pub fn reconstruction_error(model: &Model, seed: u64, count: usize) -> Result<f64> {
    let gen = PairGenerator::new(model.cfg.image_size, model.cfg.attribute_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts: Vec<Vec<usize>> = gen.draw(&mut rng, count).iter().map(|p| tokenizer::encode(&p.caption)).collect();
    let mut total = 0.0;
    for chunk in texts.chunks(PROBE_CHUNK) {
        let err = no_grad(|| -> Result<f64> {
            let kt = model.knowledge_from_text(chunk)?;
            let k_hat = model.projector.reconstruct_knowledge(&model.decoder, &model.params, chunk, &model.prompts)?;
            Ok(loss_iakr(&kt, &k_hat)?.item())
        })?;
        total += err * chunk.len() as f64;
    }
    Ok(total / texts.len().max(1) as f64)
}

/// Fraction of held-out captions whose greedy textualization contains both
/// attribute words.
pub fn textualization_hit_rate(model: &Model, seed: u64, count: usize, max_new: usize) -> Result<f64> {
    let gen = PairGenerator::new(model.cfg.image_size, model.cfg.attribute_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = gen.draw(&mut rng, count);
    let mut hits = 0;
    for p in &pairs {
        let out = model.textualize_knowledge(&tokenizer::encode(&p.caption), max_new, Decode::Greedy, 0)?;
        let text = tokenizer::decode(&out);
        let (c, s) = attribute_words(p.attribute);
        let words = tokenizer::words(&text);
        if words.contains(&c) && words.contains(&s) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len().max(1) as f64)
}
