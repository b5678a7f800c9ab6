use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.op(
            &[a, b],
            out,
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.op(
            &[a, b],
            out,
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]),
        ))
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.op(
            &[x],
            out,
            Box::new(move |args| vec![Some(args.grad.zip_map(&c, |g, m| g * m).unwrap())]),
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.op(&[x], out, Box::new(move |args| vec![Some(args.grad.map(|g| g * s))]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.op(
            &[x],
            out,
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(args.output, |g, y| if y > T::zero() { g } else { T::zero() })
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.op(
            &[x],
            out,
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(args.output, |g, y| g * y * (T::one() - y))
                        .unwrap(),
                )]
            }),
        )
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel().max(1)).unwrap();
        let out = Tensor::scalar(v.sum() / n);
        self.op(
            &[x],
            out,
            Box::new(move |args| {
                let g = args.grad.item() / n;
                vec![Some(Tensor::full(args.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.op(
            &[x],
            out,
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.op(
            &[x],
            out,
            Box::new(|args| {
                vec![Some(
                    args.grad.clone().reshape(args.inputs[0].shape()).unwrap(),
                )]
            }),
        ))
    }
}
