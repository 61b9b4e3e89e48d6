use crate::autograd::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    /// `x · wᵀ + b` for `x: N×Cin`, `w: Cout×Cin`, `b: Cout`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (n, cin, cout) = match (x.shape(), w.shape(), b.shape()) {
            ([n, cin], [cout, wcin], [bc]) if cin == wcin && cout == bc => (*n, *cin, *cout),
            _ => return Err(Error::shape("linear", x.shape(), w.shape())),
        };
        let mut out = vec![T::zero(); n * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.data());
        }
        gemm(MatRef::new(x.data(), n, cin), MatRef::new(w.data(), cout, cin).t(), &mut out, true);
        let out = Tensor::new(vec![n, cout], out)?;
        Ok(self.tape.record(OpKind::Linear, &[self, weight, bias], out, move |args| {
            let (x, w) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            let mut gx = vec![T::zero(); n * cin];
            let mut gw = vec![T::zero(); cout * cin];
            gemm(MatRef::new(g, n, cout), MatRef::new(w.data(), cout, cin), &mut gx, false);
            gemm(MatRef::new(g, n, cout).t(), MatRef::new(x.data(), n, cin), &mut gw, false);
            let mut gb = vec![T::zero(); cout];
            for row in g.chunks(cout) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            vec![
                Some(Tensor::new(vec![n, cin], gx).expect("shape")),
                Some(Tensor::new(vec![cout, cin], gw).expect("shape")),
                Some(Tensor::new(vec![cout], gb).expect("shape")),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use crate::test_util::{rand_tensor, SplitMix};

    #[test]
    fn identity_and_zero_weights() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_fn([2, 3], |i| i as f64 - 1.5);
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = tape
            .constant(x.clone())
            .linear(tape.constant(eye), tape.constant(Tensor::zeros([3])))
            .unwrap();
        assert_eq!(*y.value(), x);
        let b = Tensor::new([2], vec![0.5, -2.0]).unwrap();
        let y = tape
            .constant(x)
            .linear(tape.constant(Tensor::zeros([2, 3])), tape.constant(b))
            .unwrap();
        assert_eq!(y.value().data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn matches_dot_product_oracle() {
        let mut rng = SplitMix::new(17);
        let x = rand_tensor::<f64>(&mut rng, &[3, 5]);
        let w = rand_tensor::<f64>(&mut rng, &[4, 5]);
        let b = rand_tensor::<f64>(&mut rng, &[4]);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .linear(tape.constant(w.clone()), tape.constant(b.clone()))
            .unwrap()
            .value();
        for i in 0..3 {
            for o in 0..4 {
                let dot: f64 = (0..5).map(|k| x.data()[i * 5 + k] * w.data()[o * 5 + k]).sum();
                assert!((y.data()[i * 4 + o] - (dot + b.data()[o])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([2, 3]));
        assert!(x
            .linear(tape.constant(Tensor::zeros([4, 2])), tape.constant(Tensor::zeros([4])))
            .is_err());
    }
}
