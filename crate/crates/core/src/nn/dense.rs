use super::{gemm, MatRef, NnError, Scalar, Tensor};

/// Gradients of an affine layer.
#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(usize, usize, usize), NnError> {
    if weights.shape().len() != 2 || input.shape().len() != 2 {
        return Err(NnError::shape(op, "rank-2 input and weights", format!("{:?} / {:?}", input.shape(), weights.shape())));
    }
    let (batch, fan_in) = (input.shape()[0], input.shape()[1]);
    let (fan_out, w_in) = (weights.shape()[0], weights.shape()[1]);
    if fan_in != w_in {
        return Err(NnError::shape(op, format!("input width {w_in}"), fan_in));
    }
    Ok((batch, fan_in, fan_out))
}

/// `output[b] = weights · input[b] + bias`, with `input: B×in`,
/// `weights: out×in`, `bias: out`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (batch, fan_in, fan_out) = check("dense", input, weights)?;
    bias.expect_shape("dense bias", &[fan_out])?;
    let mut out = Tensor::zeros(&[batch, fan_out]);
    for b in 0..batch {
        out.row_mut(b).copy_from_slice(bias.data());
    }
    gemm(
        MatRef::new(input.data(), batch, fan_in),
        MatRef::new(weights.data(), fan_out, fan_in).t(),
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>, NnError> {
    let (batch, fan_in, fan_out) = check("dense_backward", input, weights)?;
    grad_out.expect_shape("dense_backward grad", &[batch, fan_out])?;
    let mut g_in = Tensor::zeros(&[batch, fan_in]);
    gemm(
        MatRef::new(grad_out.data(), batch, fan_out),
        MatRef::new(weights.data(), fan_out, fan_in),
        T::zero(),
        g_in.data_mut(),
    );
    let mut g_w = Tensor::zeros(&[fan_out, fan_in]);
    gemm(
        MatRef::new(grad_out.data(), batch, fan_out).t(),
        MatRef::new(input.data(), batch, fan_in),
        T::zero(),
        g_w.data_mut(),
    );
    let mut g_b = Tensor::zeros(&[fan_out]);
    for b in 0..batch {
        for (acc, &g) in g_b.data_mut().iter_mut().zip(grad_out.row(b)) {
            *acc += g;
        }
    }
    Ok(DenseGrads { input: g_in, weights: g_w, bias: g_b })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::from_vec(&[1, 3], vec![0.3, -1.0, 2.5]).unwrap();
        let mut w = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = dense(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn two_by_two_hand_case() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = dense(&x, &w, &Tensor::<f64>::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn inner_dimension_mismatch_is_reported() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let w = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(dense(&x, &w, &Tensor::zeros(&[2])), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_does_not_mutate_inputs() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let (x0, w0, b0) = (x.clone(), w.clone(), b.clone());
        dense(&x, &w, &b).unwrap();
        assert_eq!((x, w, b), (x0, w0, b0));
    }
}
