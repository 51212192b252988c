//! Linear layers over the autodiff tape.

use rand::Rng;

use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};

/// Xavier/Glorot uniform: `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self, NumericError> {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericError> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Bias-free map, used where two linear terms share one bias.
    pub fn forward_no_bias(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumericError> {
        let w = g.param(store, self.w)?;
        g.matmul(x, w)
    }

    /// Plain evaluation on one row, for by-hand oracles.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.w);
        let b = store.value(self.b).data();
        (0..self.fan_out)
            .map(|j| b[j] + (0..self.fan_in).map(|i| x[i] * w.at(i, j)).sum::<f64>())
            .collect()
    }
}

/// Runs `x` through `[n, 1]` constant column times a `[d]` parameter row,
/// i.e. the outer product `x wᵀ`.
pub fn outer(g: &mut Graph, store: &ParamStore, x: &[f64], w: ParamId) -> Result<Var, NumericError> {
    let col = g.constant(Tensor::new(vec![x.len(), 1], x.to_vec())?)?;
    let wv = g.param(store, w)?;
    let d = g.shape(wv)[0];
    let row = g.reshape(wv, &[1, d])?;
    g.matmul(col, row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = xavier(&mut rng, 10, 22);
        let a = (6.0f64 / 32.0).sqrt();
        assert!(t.data().iter().all(|x| x.abs() < a));
        assert!(t.data().iter().any(|x| x.abs() > a / 2.0));
    }

    #[test]
    fn linear_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2).unwrap();
        store.value_mut(lin.b).data_mut().copy_from_slice(&[0.5, -1.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, -3.0]).unwrap()).unwrap();
        let y = lin.forward(&mut g, &store, x).unwrap();
        let want = lin.apply(&store, &[1.0, 2.0, -3.0]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
