use crate::error::{Error, Result};
use crate::linalg::Scalar;

/// cos/sin of `pos * theta^(-2i / head_dim)` for every position and pair `i`.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> RopeTable<F> {
    pub fn new(head_dim: usize, positions: usize, theta: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "rotary embedding needs an even head dimension, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        Ok(RopeTable { half, cos, sin })
    }

    /// Rotates the pairs `(x[2i], x[2i+1])` of one head vector at `pos`.
    /// `inverse` applies the transpose rotation (used for gradients).
    #[inline]
    pub fn apply(&self, x: &mut [F], pos: usize, inverse: bool) {
        let cos = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sin = &self.sin[pos * self.half..(pos + 1) * self.half];
        for i in 0..self.half {
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Rotary transform of `vectors` (one head vector per row) at `positions`.
pub fn rope_rotate<F: Scalar>(vectors: &[Vec<F>], positions: &[usize], theta: f64) -> Result<Vec<Vec<F>>> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) || vectors.len() != positions.len() {
        return Err(Error::Shape("ragged rotary input".into()));
    }
    let max = positions.iter().copied().max().map_or(0, |p| p + 1);
    let table = RopeTable::new(dim, max, theta)?;
    Ok(vectors
        .iter()
        .zip(positions)
        .map(|(v, &p)| {
            let mut out = v.clone();
            table.apply(&mut out, p, false);
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Analysis);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn position_zero_is_identity() {
        let v = random(8, 1);
        assert_eq!(rope_rotate(std::slice::from_ref(&v), &[0], 10_000.0).unwrap()[0], v);
    }

    #[test]
    fn preserves_norm() {
        for seed in 0..20 {
            let v = random(16, seed);
            let r = &rope_rotate(std::slice::from_ref(&v), &[seed as usize * 7 + 3], 10_000.0).unwrap()[0];
            assert!((dot(&v, &v).sqrt() - dot(r, r).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn relative_positions() {
        let (q, k) = (random(8, 5), random(8, 6));
        let score = |p1: usize, p2: usize| {
            let r = rope_rotate(&[q.clone(), k.clone()], &[p1, p2], 10_000.0).unwrap();
            dot(&r[0], &r[1])
        };
        assert!((score(3, 1) - score(7, 5)).abs() < 1e-6);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            rope_rotate(&[vec![1.0f64; 5]], &[1], 10_000.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn inverse_undoes_rotation() {
        let table = RopeTable::<f64>::new(6, 10, 10_000.0).unwrap();
        let v = random(6, 9);
        let mut x = v.clone();
        table.apply(&mut x, 9, false);
        table.apply(&mut x, 9, true);
        for (a, b) in x.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
