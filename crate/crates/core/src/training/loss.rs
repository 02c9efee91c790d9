use ndarray::Array2;

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::renderer::{Mask, Raster};

/// Zero every pixel outside the mask.
pub fn apply_mask(image: &Raster, mask: &Mask) -> Result<Raster> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::Shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let data = image
        .data()
        .chunks_exact(3)
        .zip(mask.bits())
        .flat_map(|(px, on)| if *on { [px[0], px[1], px[2]] } else { [0.0; 3] })
        .collect();
    Raster::from_data(image.width(), image.height(), data)
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("embedding dims {} and {} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// Scaled dot product `a . b / sqrt(d)`.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.dot(b) / (a.dim() as f64).sqrt())
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.norm() * b.norm();
    Ok(if n > 0.0 { a.dot(b) / n } else { 0.0 })
}

/// Row `i` is query image `i`, column `j` is material `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Array2<f64>);

impl SimilarityMatrix {
    pub fn from_embeddings(images: &[Embedding], materials: &[Embedding]) -> Result<Self> {
        let mut s = Array2::zeros((images.len(), materials.len()));
        for (i, zi) in images.iter().enumerate() {
            for (j, zm) in materials.iter().enumerate() {
                s[[i, j]] = similarity(zi, zm)?;
            }
        }
        Ok(SimilarityMatrix(s))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// InfoNCE over rows: `-(1/N) sum_i log softmax_j(S_ij / tau)[i]`, with the
/// analytic gradient with respect to `S`.
pub fn infonce_loss(s: &SimilarityMatrix, tau: f64) -> Result<(f64, Array2<f64>)> {
    let (n, m) = s.0.dim();
    if n != m || n == 0 {
        return Err(Error::Shape(format!("similarity matrix must be square and non-empty, got {n}x{m}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut grad = Array2::zeros((n, n));
    let mut loss = 0.0;
    for (i, row) in s.0.rows().into_iter().enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v / tau));
        let exps: Vec<f64> = row.iter().map(|v| (v / tau - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += max + sum.ln() - row[i] / tau;
        for (j, e) in exps.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            grad[[i, j]] = (e / sum - target) / (tau * n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Gradients of a batch loss with respect to each embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrads {
    pub anchor: Vec<Embedding>,
    pub positive: Vec<Embedding>,
    pub negative: Vec<Embedding>,
}

/// Mean hinge `max(0, sim(a,n) - sim(a,p) + margin)` over triplets. The
/// subgradient at the hinge corner is zero.
pub fn triplet_loss(
    anchors: &[Embedding],
    positives: &[Embedding],
    negatives: &[Embedding],
    margin: f64,
) -> Result<(f64, TripletGrads)> {
    let t = anchors.len();
    if positives.len() != t || negatives.len() != t || t == 0 {
        return Err(Error::Shape("triplet lists must be non-empty and equally long".into()));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    let zeros = |e: &Embedding| Embedding(vec![0.0; e.dim()]);
    let mut grads = TripletGrads {
        anchor: anchors.iter().map(zeros).collect(),
        positive: positives.iter().map(zeros).collect(),
        negative: negatives.iter().map(zeros).collect(),
    };
    let mut loss = 0.0;
    for k in 0..t {
        let (a, p, n) = (&anchors[k], &positives[k], &negatives[k]);
        let h = similarity(a, n)? - similarity(a, p)? + margin;
        check_dims(a, p)?;
        check_dims(a, n)?;
        if h > 0.0 {
            loss += h;
            let c = 1.0 / ((a.dim() as f64).sqrt() * t as f64);
            for i in 0..a.dim() {
                grads.anchor[k].0[i] = (n.0[i] - p.0[i]) * c;
                grads.positive[k].0[i] = -a.0[i] * c;
                grads.negative[k].0[i] = a.0[i] * c;
            }
        }
    }
    Ok((loss / t as f64, grads))
}

/// Chain `dL/dS` back to the two embedding sets of `S = Z_I Z_M^T / sqrt(d)`.
pub fn similarity_backward(
    images: &[Embedding],
    materials: &[Embedding],
    grad_s: &Array2<f64>,
) -> (Vec<Embedding>, Vec<Embedding>) {
    let d = images.first().map_or(1, Embedding::dim);
    let inv = 1.0 / (d as f64).sqrt();
    let mut gi = vec![Embedding(vec![0.0; d]); images.len()];
    let mut gm = vec![Embedding(vec![0.0; d]); materials.len()];
    for i in 0..images.len() {
        for j in 0..materials.len() {
            let g = grad_s[[i, j]] * inv;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                gi[i].0[k] += g * materials[j].0[k];
                gm[j].0[k] += g * images[i].0[k];
            }
        }
    }
    (gi, gm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn e(v: &[f64]) -> Embedding {
        Embedding(v.to_vec())
    }

    #[test]
    fn mask_cases() {
        let img = Raster::from_data(8, 8, (0..192).map(|i| i as f32 / 100.0 + 0.5).collect()).unwrap();
        assert_eq!(apply_mask(&img, &Mask::full(8, 8)).unwrap(), img);
        assert!(apply_mask(&img, &Mask::new(8, 8)).unwrap().data().iter().all(|v| *v == 0.0));
        let half = Mask::from_fn(8, 8, |x, _| x < 4);
        let out = apply_mask(&img, &half).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if x < 4 { img.get(x, y) } else { [0.0; 3] };
                assert_eq!(out.get(x, y), want);
            }
        }
        assert!(apply_mask(&img, &Mask::full(9, 8)).is_err());
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity(&e(&[1.0; 4]), &e(&[1.0; 4])).unwrap(), 2.0);
        assert_eq!(similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let s = similarity(&e(&[3.0, 0.0]), &e(&[5.0, 0.0])).unwrap();
        assert!((s - 15.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((s - 10.6066).abs() < 1e-4);
        assert!(similarity(&e(&[1.0]), &e(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn infonce_closed_forms() {
        let (l, _) = infonce_loss(&SimilarityMatrix(Array2::from_elem((4, 4), 0.3)), 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let s = SimilarityMatrix(ndarray::arr2(&[[10.0, 0.0], [0.0, 10.0]]));
        let (l, _) = infonce_loss(&s, 1.0).unwrap();
        let want = (1.0 + (-10f64).exp()).ln();
        assert!((l - want).abs() < 1e-15);
        assert!((l - 4.5399e-5).abs() < 1e-9);
        assert!(infonce_loss(&SimilarityMatrix(Array2::zeros((2, 3))), 1.0).is_err());
    }

    #[test]
    fn infonce_gradient_matches_differences() {
        let mut rng = rng_from(12);
        let s = Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0));
        let tau = 0.5;
        let (_, g) = infonce_loss(&SimilarityMatrix(s.clone()), tau).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..4 {
                let mut p = s.clone();
                p[[i, j]] += h;
                let mut m = s.clone();
                m[[i, j]] -= h;
                let num = (infonce_loss(&SimilarityMatrix(p), tau).unwrap().0
                    - infonce_loss(&SimilarityMatrix(m), tau).unwrap().0)
                    / (2.0 * h);
                assert!((num - g[[i, j]]).abs() < 1e-8, "{i},{j}: {num} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn triplet_cases() {
        let a = vec![e(&[1.0, 0.0])];
        let p = vec![e(&[2.0, 0.0])];
        let n = vec![e(&[-1.0, 0.0])];
        let (l, g) = triplet_loss(&a, &p, &n, 0.5).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.anchor[0].0.iter().all(|v| *v == 0.0));
        let (l, _) = triplet_loss(&a, &a, &a, 0.3).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
        assert!(triplet_loss(&a, &p, &[], 0.1).is_err());
    }

    #[test]
    fn triplet_gradient_matches_differences() {
        let mut rng = rng_from(4);
        let mut draw = |k: usize| -> Vec<Embedding> {
            (0..k).map(|_| Embedding((0..5).map(|_| rng.random_range(-1.0..1.0)).collect())).collect()
        };
        let (a, p, n) = (draw(6), draw(6), draw(6));
        let margin = 0.4;
        let (_, g) = triplet_loss(&a, &p, &n, margin).unwrap();
        let f = |a: &[Embedding], p: &[Embedding], n: &[Embedding]| triplet_loss(a, p, n, margin).unwrap().0;
        let h = 1e-6;
        for k in 0..6 {
            let hinge = similarity(&a[k], &n[k]).unwrap() - similarity(&a[k], &p[k]).unwrap() + margin;
            if hinge.abs() < 1e-3 {
                continue;
            }
            for i in 0..5 {
                for (which, grad) in [(0, &g.anchor), (1, &g.positive), (2, &g.negative)] {
                    let (mut ap, mut pp, mut np) = (a.clone(), p.clone(), n.clone());
                    let (mut am, mut pm, mut nm) = (a.clone(), p.clone(), n.clone());
                    match which {
                        0 => {
                            ap[k].0[i] += h;
                            am[k].0[i] -= h;
                        }
                        1 => {
                            pp[k].0[i] += h;
                            pm[k].0[i] -= h;
                        }
                        _ => {
                            np[k].0[i] += h;
                            nm[k].0[i] -= h;
                        }
                    }
                    let num = (f(&ap, &pp, &np) - f(&am, &pm, &nm)) / (2.0 * h);
                    assert!((num - grad[k].0[i]).abs() < 1e-6);
                }
            }
        }
    }
}
