use rand::Rng;

use super::{gemm, sigmoid, MatRef, NnError, Scalar, Tensor};

/// Single-layer GRU parameters. Gate blocks are stacked in the order
/// reset `r`, update `z`, candidate `n`:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T> {
    /// `3H × in`
    pub w_ih: Tensor<T>,
    /// `3H × H`
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

/// Parameter gradients share the parameter layout.
pub type GruGrads<T> = GruParams<T>;

impl<T: Scalar> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_ih: Tensor::zeros(&[3 * hidden, input]),
            w_hh: Tensor::zeros(&[3 * hidden, hidden]),
            b_ih: Tensor::zeros(&[3 * hidden]),
            b_hh: Tensor::zeros(&[3 * hidden]),
        }
    }

    /// Uniform(−1/√H, 1/√H) initialisation.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input, hidden);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::lit(rng.random_range(-bound..bound)));
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
}

/// Activations saved by [`gru_step`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache<T> {
    x: Tensor<T>,
    h_prev: Tensor<T>,
    r: Tensor<T>,
    z: Tensor<T>,
    n: Tensor<T>,
    /// `W_hn h + b_hn`, before the reset gate is applied.
    hn: Tensor<T>,
}

/// One GRU step over a batch: `x: B×in`, `h_prev: B×H` → `h: B×H`.
pub fn gru_step<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    p: &GruParams<T>,
) -> Result<(Tensor<T>, GruCache<T>), NnError> {
    let (input, hidden) = (p.input_dim(), p.hidden_dim());
    let batch = x.rows();
    x.expect_shape("gru_step input", &[batch, input])?;
    h_prev.expect_shape("gru_step hidden", &[batch, hidden])?;

    let mut gi = Tensor::zeros(&[batch, 3 * hidden]);
    let mut gh = Tensor::zeros(&[batch, 3 * hidden]);
    for b in 0..batch {
        gi.row_mut(b).copy_from_slice(p.b_ih.data());
        gh.row_mut(b).copy_from_slice(p.b_hh.data());
    }
    gemm(MatRef::new(x.data(), batch, input), MatRef::new(p.w_ih.data(), 3 * hidden, input).t(), T::one(), gi.data_mut());
    gemm(
        MatRef::new(h_prev.data(), batch, hidden),
        MatRef::new(p.w_hh.data(), 3 * hidden, hidden).t(),
        T::one(),
        gh.data_mut(),
    );

    let shape = [batch, hidden];
    let (mut r, mut z, mut n, mut hn, mut h) =
        (Tensor::zeros(&shape), Tensor::zeros(&shape), Tensor::zeros(&shape), Tensor::zeros(&shape), Tensor::zeros(&shape));
    for b in 0..batch {
        let (gi_b, gh_b, hp) = (gi.row(b), gh.row(b), h_prev.row(b));
        for j in 0..hidden {
            let rj = sigmoid(gi_b[j] + gh_b[j]);
            let zj = sigmoid(gi_b[hidden + j] + gh_b[hidden + j]);
            let hnj = gh_b[2 * hidden + j];
            let nj = (gi_b[2 * hidden + j] + rj * hnj).tanh();
            let o = b * hidden + j;
            r.data_mut()[o] = rj;
            z.data_mut()[o] = zj;
            hn.data_mut()[o] = hnj;
            n.data_mut()[o] = nj;
            h.data_mut()[o] = (T::one() - zj) * nj + zj * hp[j];
        }
    }
    let cache = GruCache { x: x.clone(), h_prev: h_prev.clone(), r, z, n, hn };
    Ok((h, cache))
}

/// Backward through one step. Accumulates parameter gradients into `grads`
/// and returns `(dL/dx, dL/dh_prev)`.
pub fn gru_step_backward<T: Scalar>(
    cache: &GruCache<T>,
    p: &GruParams<T>,
    grad_h: &Tensor<T>,
    grads: &mut GruGrads<T>,
) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let (input, hidden) = (p.input_dim(), p.hidden_dim());
    let batch = cache.x.rows();
    grad_h.expect_shape("gru_step_backward grad", &[batch, hidden])?;

    let mut d_gi = Tensor::zeros(&[batch, 3 * hidden]);
    let mut d_gh = Tensor::zeros(&[batch, 3 * hidden]);
    let mut dh_prev = Tensor::zeros(&[batch, hidden]);
    for b in 0..batch {
        for j in 0..hidden {
            let o = b * hidden + j;
            let (r, z, n, hn) = (cache.r.data()[o], cache.z.data()[o], cache.n.data()[o], cache.hn.data()[o]);
            let hp = cache.h_prev.data()[o];
            let dh = grad_h.data()[o];

            let dn = dh * (T::one() - z);
            let dz = dh * (hp - n);
            dh_prev.data_mut()[o] = dh * z;

            let da_n = dn * (T::one() - n * n);
            let dr = da_n * hn;
            let da_z = dz * z * (T::one() - z);
            let da_r = dr * r * (T::one() - r);

            let gi = &mut d_gi.row_mut(b)[..];
            gi[j] = da_r;
            gi[hidden + j] = da_z;
            gi[2 * hidden + j] = da_n;
            let gh = &mut d_gh.row_mut(b)[..];
            gh[j] = da_r;
            gh[hidden + j] = da_z;
            gh[2 * hidden + j] = da_n * r;
        }
    }

    gemm(
        MatRef::new(d_gi.data(), batch, 3 * hidden).t(),
        MatRef::new(cache.x.data(), batch, input),
        T::one(),
        grads.w_ih.data_mut(),
    );
    gemm(
        MatRef::new(d_gh.data(), batch, 3 * hidden).t(),
        MatRef::new(cache.h_prev.data(), batch, hidden),
        T::one(),
        grads.w_hh.data_mut(),
    );
    for b in 0..batch {
        for (acc, &g) in grads.b_ih.data_mut().iter_mut().zip(d_gi.row(b)) {
            *acc += g;
        }
        for (acc, &g) in grads.b_hh.data_mut().iter_mut().zip(d_gh.row(b)) {
            *acc += g;
        }
    }

    let mut dx = Tensor::zeros(&[batch, input]);
    gemm(MatRef::new(d_gi.data(), batch, 3 * hidden), MatRef::new(p.w_ih.data(), 3 * hidden, input), T::zero(), dx.data_mut());
    gemm(
        MatRef::new(d_gh.data(), batch, 3 * hidden),
        MatRef::new(p.w_hh.data(), 3 * hidden, hidden),
        T::one(),
        dh_prev.data_mut(),
    );
    Ok((dx, dh_prev))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_halve_the_hidden_state() {
        let p = GruParams::<f64>::zeros(3, 2);
        let x = Tensor::from_vec(&[1, 3], vec![0.7, -0.2, 1.5]).unwrap();
        let h = Tensor::from_vec(&[1, 2], vec![0.8, -0.4]).unwrap();
        let (h1, cache) = gru_step(&x, &h, &p).unwrap();
        assert!(cache.z.data().iter().all(|&z| z == 0.5));
        assert_eq!(h1.data(), &[0.4, -0.2]);
    }

    #[test]
    fn zero_state_zero_input_stays_zero() {
        let p = GruParams::<f64>::zeros(3, 2);
        let (h1, _) = gru_step(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 2]), &p).unwrap();
        assert_eq!(h1.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hidden_width_mismatch_is_rejected() {
        let p = GruParams::<f64>::zeros(3, 2);
        let err = gru_step(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3]), &p).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
    }
}
