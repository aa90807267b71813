use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, Layout, ParamBlock};
use crate::{Error, Result, Scalar};

/// Fully connected network with ReLU hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
    layout: Arc<Layout>,
}

/// Inputs to every layer; `inputs[0]` is the network input and
/// `inputs[l]` for `l > 0` is the ReLU output of layer `l - 1`.
#[derive(Debug, Clone)]
pub struct MlpTape<F> {
    inputs: Vec<Vec<F>>,
}

impl<F> MlpTape<F> {
    pub fn input(&self) -> &[F] {
        &self.inputs[0]
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(spec.input_dim)
            .chain(spec.hidden_dims.iter().copied())
            .chain(std::iter::once(spec.output_dim))
            .collect();
        if dims.contains(&0) {
            return Err(Error::invalid(format!("MLP dimensions must be >= 1, got {dims:?}")));
        }
        let mut shapes = Vec::new();
        for (l, w) in dims.windows(2).enumerate() {
            shapes.push((format!("w{l}"), vec![w[1], w[0]]));
            shapes.push((format!("b{l}"), vec![w[1]]));
        }
        let layout = Arc::new(Layout::new(shapes));
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense {
                fan_in: w[0],
                fan_out: w[1],
                w: layout.find(&format!("w{l}")).unwrap().offset,
                b: layout.find(&format!("b{l}")).unwrap().offset,
            })
            .collect();
        Ok(Mlp {
            spec,
            layers,
            layout,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn zero_params<F: Scalar>(&self) -> ParamBlock<F> {
        ParamBlock::zeros(self.layout.clone())
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params<F: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamBlock<F> {
        let mut p = self.zero_params();
        let values = p.values_mut();
        for d in &self.layers {
            let bound = (6.0 / (d.fan_in + d.fan_out) as f64).sqrt();
            for v in &mut values[d.w..d.w + d.fan_in * d.fan_out] {
                *v = F::of(rng.random_range(-bound..=bound));
            }
        }
        p
    }

    fn check<F: Scalar>(&self, params: &ParamBlock<F>, x: &[F]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                context: "MLP input",
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        if params.len() != self.layout.len() {
            return Err(Error::DimensionMismatch {
                context: "MLP parameters",
                expected: self.layout.len(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn layer<F: Scalar>(&self, d: &Dense, params: &[F], x: &[F], relu: bool) -> Vec<F> {
        let w = &params[d.w..d.w + d.fan_in * d.fan_out];
        let b = &params[d.b..d.b + d.fan_out];
        w.chunks_exact(d.fan_in)
            .zip(b)
            .map(|(row, &bias)| {
                let y = bias + dot(row, x);
                if relu && !(y > F::zero()) {
                    F::zero()
                } else {
                    y
                }
            })
            .collect()
    }

    /// Forward pass without recording a tape.
    pub fn predict<F: Scalar>(&self, params: &ParamBlock<F>, x: &[F]) -> Result<Vec<F>> {
        self.check(params, x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, d) in self.layers.iter().enumerate() {
            h = self.layer(d, params.values(), &h, l != last);
        }
        Ok(h)
    }

    pub fn forward<F: Scalar>(&self, params: &ParamBlock<F>, x: &[F]) -> Result<(Vec<F>, MlpTape<F>)> {
        self.check(params, x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for (l, d) in self.layers.iter().enumerate() {
            let y = self.layer(d, params.values(), &inputs[l], l != last);
            if l == last {
                return Ok((y, MlpTape { inputs }));
            }
            inputs.push(y);
        }
        unreachable!("an MLP has at least one layer")
    }

    /// Accumulates `dL/dparams` into `grads` and returns `dL/dx`.
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamBlock<F>,
        tape: &MlpTape<F>,
        dy: &[F],
        grads: &mut ParamBlock<F>,
    ) -> Result<Vec<F>> {
        if dy.len() != self.spec.output_dim {
            return Err(Error::DimensionMismatch {
                context: "MLP output gradient",
                expected: self.spec.output_dim,
                got: dy.len(),
            });
        }
        if grads.len() != self.layout.len() {
            return Err(Error::DimensionMismatch {
                context: "MLP gradient buffer",
                expected: self.layout.len(),
                got: grads.len(),
            });
        }
        let pv = params.values();
        let gv = grads.values_mut();
        let mut delta = dy.to_vec();
        for (l, d) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[l];
            let mut dx = vec![F::zero(); d.fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == F::zero() {
                    continue;
                }
                let row = d.w + j * d.fan_in;
                axpy(dj, x, &mut gv[row..row + d.fan_in]);
                gv[d.b + j] += dj;
                axpy(dj, &pv[row..row + d.fan_in], &mut dx);
            }
            if l > 0 {
                // x is the ReLU output of the previous layer
                for (g, &xi) in dx.iter_mut().zip(x) {
                    if !(xi > F::zero()) {
                        *g = F::zero();
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::new(MlpSpec {
            input_dim: 3,
            hidden_dims: vec![4, 5],
            output_dim: 2,
        })
        .unwrap();
        let y = m.predict(&m.zero_params::<f64>(), &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let m = Mlp::new(MlpSpec {
            input_dim: 3,
            hidden_dims: vec![],
            output_dim: 3,
        })
        .unwrap();
        let mut p = m.zero_params::<f64>();
        let w = p.tensor_mut("w0").unwrap();
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = [0.0, 0.25, 2.0];
        assert_eq!(m.predict(&p, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(Mlp::new(MlpSpec {
            input_dim: 0,
            hidden_dims: vec![],
            output_dim: 1
        })
        .is_err());
        let m = Mlp::new(MlpSpec {
            input_dim: 2,
            hidden_dims: vec![3],
            output_dim: 1,
        })
        .unwrap();
        assert!(m.predict(&m.zero_params::<f64>(), &[1.0]).is_err());
    }

    #[test]
    fn forward_is_bitwise_pure() {
        let m = Mlp::new(MlpSpec {
            input_dim: 5,
            hidden_dims: vec![7],
            output_dim: 3,
        })
        .unwrap();
        let p: ParamBlock<f64> = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let x = [0.1, -0.4, 0.9, 0.0, 0.3];
        let a = m.forward(&p, &x).unwrap().0;
        let b = m.forward(&p, &x).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, m.predict(&p, &x).unwrap());
    }

    #[test]
    fn sum_output_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::new(MlpSpec {
            input_dim: 6,
            hidden_dims: vec![8, 5],
            output_dim: 4,
        })
        .unwrap();
        for _ in 0..5 {
            let mut p: ParamBlock<f64> = m.init_params(&mut rng);
            // nonzero biases keep units away from the ReLU kink
            for v in p.tensor_mut("b0").unwrap() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, tape) = m.forward(&p, &x).unwrap();
            let mut g = p.zeros_like();
            m.backward(&p, &tape, &[1.0; 4], &mut g).unwrap();
            let f = |q: &ParamBlock<f64>| Ok(m.predict(q, &x)?.iter().sum::<f64>());
            let report = grad_check(&p, &g, 1e-5, f).unwrap();
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Mlp::new(MlpSpec {
            input_dim: 4,
            hidden_dims: vec![6],
            output_dim: 2,
        })
        .unwrap();
        let p: ParamBlock<f64> = m.init_params(&mut rng);
        let x = vec![0.3, -0.2, 0.7, 0.1];
        let (_, tape) = m.forward(&p, &x).unwrap();
        let mut g = p.zeros_like();
        let dx = m.backward(&p, &tape, &[0.5, -1.5], &mut g).unwrap();
        for i in 0..4 {
            let eps = 1e-6;
            let mut up = x.clone();
            up[i] += eps;
            let mut dn = x.clone();
            dn[i] -= eps;
            let f = |v: &[f64]| {
                let y = m.predict(&p, v).unwrap();
                0.5 * y[0] - 1.5 * y[1]
            };
            let num = (f(&up) - f(&dn)) / (2.0 * eps);
            assert!((num - dx[i]).abs() < 1e-7);
        }
    }
}
