use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{Block, Embedding, EncoderConfig, EncoderParams, LayerNorm, Linear, ParamGrads, PIXEL_SCALE};
use crate::error::{Error, Result};
use crate::renderer::Raster;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Patchified encoder input: `tokens x patch_dim`, patches in row-major order,
/// each patch flattened as (row, column, channel), pixel values multiplied
/// by [`PIXEL_SCALE`](super::PIXEL_SCALE).
#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub patches: Array2<f64>,
}

pub fn patchify(config: &EncoderConfig, raster: &Raster) -> Result<Input> {
    if raster.width() != config.resolution || raster.height() != config.resolution {
        return Err(Error::Shape(format!(
            "encoder expects {r}x{r} input, got {}x{}",
            raster.width(),
            raster.height(),
            r = config.resolution
        )));
    }
    let p = config.patch_size;
    let side = config.resolution / p;
    let mut patches = Array2::zeros((side * side, config.patch_dim()));
    for py in 0..side {
        for px in 0..side {
            let mut row = patches.row_mut(py * side + px);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let rgb = raster.get(px * p + dx, py * p + dy);
                    for c in rgb {
                        row[k] = PIXEL_SCALE * f64::from(c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(Input { patches })
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    norm1: NormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm2: NormCache,
    b: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    config: EncoderConfig,
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    pooled: Array1<f64>,
}

fn linear_fwd(l: &Linear, x: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&l.weight.t()) + &l.bias
}

/// Accumulates parameter grads into `grad` (if given) and returns dx.
fn linear_bwd(l: &Linear, x: ArrayView2<f64>, dy: &Array2<f64>, grad: Option<&mut Linear>, need_dx: bool) -> Option<Array2<f64>> {
    if let Some(g) = grad {
        g.weight += &dy.t().dot(&x);
        g.bias += &dy.sum_axis(Axis(0));
    }
    need_dx.then(|| dy.dot(&l.weight))
}

fn norm_fwd(n: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * *is);
    }
    let y = &xhat * &n.gamma + &n.beta;
    (y, NormCache { xhat, inv_std })
}

fn norm_bwd(n: &LayerNorm, c: &NormCache, dy: &Array2<f64>, grad: Option<&mut LayerNorm>, need_dx: bool) -> Option<Array2<f64>> {
    if let Some(g) = grad {
        g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
    }
    if !need_dx {
        return None;
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * &n.gamma;
    for ((mut row, xh), is) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(&c.inv_std) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, x) in row.iter_mut().zip(xh) {
            *v = is * (*v - mean_d - x * mean_dx);
        }
    }
    Some(dx)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn block_fwd(blk: &Block, c: &EncoderConfig, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
    let (dim, hd) = (c.embed_dim, c.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let (a, norm1) = norm_fwd(&blk.norm1, x);
    let qkv = linear_fwd(&blk.qkv, a.view());
    let mut attn = Array2::zeros((x.nrows(), dim));
    let mut probs = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
        let v = qkv.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
        let mut p = q.dot(&k.t()) * scale;
        softmax_rows(&mut p);
        attn.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&p.dot(&v));
        probs.push(p);
    }
    let x1 = x + &linear_fwd(&blk.attn_out, attn.view());
    let (b, norm2) = norm_fwd(&blk.norm2, &x1);
    let h1 = linear_fwd(&blk.fc1, b.view());
    let g = h1.mapv(gelu);
    let x2 = &x1 + &linear_fwd(&blk.fc2, g.view());
    (x2, BlockCache { norm1, a, qkv, probs, attn, norm2, b, h1, g })
}

/// Backprop through one block. Returns dx (if requested).
fn block_bwd(
    blk: &Block,
    c: &EncoderConfig,
    cache: &BlockCache,
    dx2: Array2<f64>,
    mut grad: Option<&mut Block>,
    need_dx: bool,
) -> Option<Array2<f64>> {
    let (dim, hd) = (c.embed_dim, c.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP branch
    let dg = linear_bwd(&blk.fc2, cache.g.view(), &dx2, grad.as_deref_mut().map(|g| &mut g.fc2), true)
        .expect("requested");
    let dh1 = &dg * &cache.h1.mapv(gelu_grad);
    let db = linear_bwd(&blk.fc1, cache.b.view(), &dh1, grad.as_deref_mut().map(|g| &mut g.fc1), true)
        .expect("requested");
    let dx1 = dx2 + &norm_bwd(&blk.norm2, &cache.norm2, &db, grad.as_deref_mut().map(|g| &mut g.norm2), true)
        .expect("requested");

    // attention branch
    let dattn = linear_bwd(&blk.attn_out, cache.attn.view(), &dx1, grad.as_deref_mut().map(|g| &mut g.attn_out), true)
        .expect("requested");
    let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
    for h in 0..c.n_heads {
        let (qs, ks, vs) = (h * hd, dim + h * hd, 2 * dim + h * hd);
        let q = cache.qkv.slice(s![.., qs..qs + hd]);
        let k = cache.qkv.slice(s![.., ks..ks + hd]);
        let v = cache.qkv.slice(s![.., vs..vs + hd]);
        let p = &cache.probs[h];
        let do_h = dattn.slice(s![.., h * hd..(h + 1) * hd]);
        let dp = do_h.dot(&v.t());
        dqkv.slice_mut(s![.., vs..vs + hd]).assign(&p.t().dot(&do_h));
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (p * &(dp - &row_dot)) * scale;
        dqkv.slice_mut(s![.., qs..qs + hd]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., ks..ks + hd]).assign(&ds.t().dot(&q));
    }
    let da = linear_bwd(&blk.qkv, cache.a.view(), &dqkv, grad.as_deref_mut().map(|g| &mut g.qkv), true)
        .expect("requested");
    let dn1 = norm_bwd(&blk.norm1, &cache.norm1, &da, grad.map(|g| &mut g.norm1), need_dx);
    dn1.map(|d| dx1 + &d)
}

/// Encode a raster. Masking, if any, is the caller's job.
pub fn forward(params: &EncoderParams, raster: &Raster) -> Result<(Embedding, ActivationCache)> {
    let input = patchify(&params.config, raster)?;
    forward_input(params, &input)
}

pub fn forward_input(params: &EncoderParams, input: &Input) -> Result<(Embedding, ActivationCache)> {
    let c = &params.config;
    if input.patches.dim() != (c.tokens(), c.patch_dim()) {
        return Err(Error::Shape(format!(
            "input is {:?}, encoder expects ({}, {})",
            input.patches.dim(),
            c.tokens(),
            c.patch_dim()
        )));
    }
    let mut x = linear_fwd(&params.patch_embed, input.patches.view()) + &params.pos_embed;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (next, cache) = block_fwd(blk, c, &x);
        blocks.push(cache);
        x = next;
    }
    let (xn, final_norm) = norm_fwd(&LayerNorm::new(c.embed_dim), &x);
    let pooled = xn.mean_axis(Axis(0)).expect("at least one token");
    let z = params.head.weight.dot(&pooled) + &params.head.bias;
    let cache = ActivationCache { config: *c, patches: input.patches.clone(), blocks, final_norm, pooled };
    Ok((Embedding(z.to_vec()), cache))
}

/// Embedding only, discarding the cache.
pub fn embed(params: &EncoderParams, input: &Input) -> Result<Embedding> {
    forward_input(params, input).map(|(z, _)| z)
}

/// Reverse pass: gradients of `<grad_out, z>` with respect to every
/// trainable tensor.
pub fn backward(params: &EncoderParams, cache: &ActivationCache, grad_out: &Embedding) -> Result<ParamGrads> {
    let c = &params.config;
    if cache.config != *c || cache.blocks.len() != params.blocks.len() {
        return Err(Error::Shape("activation cache was produced by a different encoder".into()));
    }
    if grad_out.dim() != c.output_dim {
        return Err(Error::Shape(format!("output gradient has dim {}, expected {}", grad_out.dim(), c.output_dim)));
    }
    let mut grads = ParamGrads::zeros_for(params);
    let Some(lowest) = params.trainable().iter().position(|t| *t) else {
        return Ok(grads);
    };
    let dz = Array1::from_vec(grad_out.0.clone());
    if let Some(g) = grads.head.as_mut() {
        g.weight += &dz
            .view()
            .insert_axis(Axis(1))
            .dot(&cache.pooled.view().insert_axis(Axis(0)));
        g.bias += &dz;
    }
    let n_blocks = params.blocks.len();
    if lowest > n_blocks {
        return Ok(grads);
    }
    let dpooled = params.head.weight.t().dot(&dz);
    let tokens = cache.patches.nrows();
    let row = dpooled / tokens as f64;
    let dxn = Array2::from_shape_fn((tokens, c.embed_dim), |(_, j)| row[j]);
    let mut dx = norm_bwd(&LayerNorm::new(c.embed_dim), &cache.final_norm, &dxn, None, true).expect("requested");
    for i in (0..n_blocks).rev() {
        let layer = i + 1;
        let need_dx = lowest < layer;
        let g = grads.blocks[i].as_mut();
        match block_bwd(&params.blocks[i], c, &cache.blocks[i], dx, g, need_dx) {
            Some(next) => dx = next,
            None => return Ok(grads),
        }
    }
    if let Some(g) = grads.pos_embed.as_mut() {
        *g += &dx;
    }
    if let Some(g) = grads.patch_embed.as_mut() {
        linear_bwd(&params.patch_embed, cache.patches.view(), &dx, Some(g), false);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::super::{init_from_seed, init_params};
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn random_raster(seed: u64, r: usize) -> Raster {
        let mut rng = rng_from(seed);
        Raster::from_data(r, r, (0..r * r * 3).map(|_| rng.random_range(0.0..1.0f32)).collect()).unwrap()
    }

    fn loss_of(params: &EncoderParams, x: &Raster, g: &[f64]) -> f64 {
        let (z, _) = forward(params, x).unwrap();
        z.0.iter().zip(g).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_image_gives_finite_embedding() {
        let p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        let (z, _) = forward(&p, &Raster::new(16, 16).unwrap()).unwrap();
        assert_eq!(z.dim(), 8);
        assert!(z.is_finite());
    }

    #[test]
    fn resolution_mismatch() {
        let p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        assert!(matches!(forward(&p, &Raster::new(32, 32).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        let (_, cache) = forward(&p, &random_raster(1, 16)).unwrap();
        let g = backward(&p, &cache, &Embedding(vec![0.0; 8])).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn cache_from_other_encoder_rejected() {
        let p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        let mut c2 = EncoderConfig::tiny();
        c2.n_blocks = 1;
        let q = init_from_seed(&c2).unwrap();
        let (_, cache) = forward(&q, &random_raster(1, 16)).unwrap();
        assert!(backward(&p, &cache, &Embedding(vec![1.0; 8])).is_err());
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        let (_, cache) = forward(&p, &random_raster(2, 16)).unwrap();
        let g1 = Embedding((0..8).map(|i| (i as f64 * 0.37).sin()).collect());
        let g2 = Embedding((0..8).map(|i| (i as f64 * 1.3).cos()).collect());
        let g12 = Embedding(g1.0.iter().zip(&g2.0).map(|(a, b)| a + b).collect());
        let a = backward(&p, &cache, &g1).unwrap();
        let b = backward(&p, &cache, &g2).unwrap();
        let ab = backward(&p, &cache, &g12).unwrap();
        // relative to each tensor's magnitude: some entries (key biases) are
        // analytically zero and carry only roundoff
        for ((x, y), z) in a.tensors().iter().zip(b.tensors()).zip(ab.tensors()) {
            let scale = x.data.iter().chain(y.data).chain(z.data).fold(1e-300f64, |m, v| m.max(v.abs()));
            for ((u, v), w) in x.data.iter().zip(y.data).zip(z.data) {
                assert!(((u + v) - w).abs() / scale <= 1e-12, "{}", x.name);
            }
        }
    }

    #[test]
    fn every_gradient_matches_central_differences() {
        let c = EncoderConfig::tiny();
        let p = init_params(&c, &mut rng_from(3)).unwrap();
        let x = random_raster(4, 16);
        let g: Vec<f64> = (0..8).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.5).collect();
        let (_, cache) = forward(&p, &x).unwrap();
        let analytic = backward(&p, &cache, &Embedding(g.clone())).unwrap();
        let flat: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        // inputs reach PIXEL_SCALE, so a small step keeps truncation error
        // well below the tolerance
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (ti, grad) in flat.iter().enumerate() {
            for j in 0..grad.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data[j] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data[j] -= h;
                let numeric = (loss_of(&plus, &x, &g) - loss_of(&minus, &x, &g)) / (2.0 * h);
                let err = (numeric - grad[j]).abs() / numeric.abs().max(grad[j].abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn frozen_layers_get_no_entries() {
        let mut p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        p.set_last_block_only();
        let (_, cache) = forward(&p, &random_raster(5, 16)).unwrap();
        let g = backward(&p, &cache, &Embedding(vec![1.0; 8])).unwrap();
        let names: Vec<String> = g.tensors().into_iter().map(|t| t.name).collect();
        assert!(names.iter().all(|n| n.starts_with("blocks.1") || n.starts_with("head")));
        assert!(g.is_finite());
    }
}
