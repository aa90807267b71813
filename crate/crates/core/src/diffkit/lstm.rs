use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, sigmoid, Layout, ParamBlock};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Four-gate LSTM cell.
///
/// Parameters: `w` of shape `[4H, I + H]` acting on `[x; h_prev]` and bias
/// `b` of shape `[4H]`. Gate rows are ordered input, forget, output,
/// candidate:
///
/// ```text
/// i = σ(W_i [x; h] + b_i)    f = σ(W_f [x; h] + b_f)
/// o = σ(W_o [x; h] + b_o)    g = tanh(W_g [x; h] + b_g)
/// c' = f ⊙ c + i ⊙ g         h' = o ⊙ tanh(c')
/// ```
#[derive(Debug, Clone)]
pub struct LstmCell {
    spec: LstmSpec,
    layout: Arc<Layout>,
}

#[derive(Debug, Clone)]
pub struct LstmTape<F> {
    xh: Vec<F>,
    c_prev: Vec<F>,
    /// activated gates, `[i; f; o; g]`
    gates: Vec<F>,
    tanh_c: Vec<F>,
}

impl LstmCell {
    pub fn new(spec: LstmSpec) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden_dim == 0 {
            return Err(Error::invalid(format!("LSTM dimensions must be >= 1, got {spec:?}")));
        }
        let h = spec.hidden_dim;
        let layout = Arc::new(Layout::new(vec![
            ("w".into(), vec![4 * h, spec.input_dim + h]),
            ("b".into(), vec![4 * h]),
        ]));
        Ok(LstmCell { spec, layout })
    }

    pub fn spec(&self) -> LstmSpec {
        self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn zero_params<F: Scalar>(&self) -> ParamBlock<F> {
        ParamBlock::zeros(self.layout.clone())
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))` with
    /// `fan_in = I + H`, `fan_out = H`; forget-gate bias +1, other biases 0.
    pub fn init_params<F: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamBlock<F> {
        let h = self.spec.hidden_dim;
        let fan_in = self.spec.input_dim + h;
        let bound = (6.0 / (fan_in + h) as f64).sqrt();
        let mut p = self.zero_params();
        for v in p.tensor_mut("w").unwrap() {
            *v = F::of(rng.random_range(-bound..=bound));
        }
        for v in &mut p.tensor_mut("b").unwrap()[h..2 * h] {
            *v = F::one();
        }
        p
    }

    pub fn step<F: Scalar>(
        &self,
        params: &ParamBlock<F>,
        h_prev: &[F],
        c_prev: &[F],
        x: &[F],
    ) -> Result<(Vec<F>, Vec<F>, LstmTape<F>)> {
        let hd = self.spec.hidden_dim;
        for (context, expected, got) in [
            ("LSTM input", self.spec.input_dim, x.len()),
            ("LSTM hidden state", hd, h_prev.len()),
            ("LSTM cell state", hd, c_prev.len()),
            ("LSTM parameters", self.layout.len(), params.len()),
        ] {
            if expected != got {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    got,
                });
            }
        }
        let width = self.spec.input_dim + hd;
        let mut xh = Vec::with_capacity(width);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h_prev);
        let w = params.tensor("w").unwrap();
        let b = params.tensor("b").unwrap();
        let mut gates: Vec<F> = w
            .chunks_exact(width)
            .zip(b)
            .map(|(row, &bias)| bias + dot(row, &xh))
            .collect();
        for (k, v) in gates.iter_mut().enumerate() {
            *v = if k < 3 * hd { sigmoid(*v) } else { v.tanh() };
        }
        let mut c = Vec::with_capacity(hd);
        let mut h = Vec::with_capacity(hd);
        let mut tanh_c = Vec::with_capacity(hd);
        for j in 0..hd {
            let (i, f, o, g) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            let cj = f * c_prev[j] + i * g;
            let tc = cj.tanh();
            c.push(cj);
            tanh_c.push(tc);
            h.push(o * tc);
        }
        let tape = LstmTape {
            xh,
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
        };
        Ok((h, c, tape))
    }

    /// Given `dL/dh'` and `dL/dc'`, accumulates parameter gradients and
    /// returns `(dL/dh_prev, dL/dc_prev, dL/dx)`.
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamBlock<F>,
        tape: &LstmTape<F>,
        dh: &[F],
        dc: &[F],
        grads: &mut ParamBlock<F>,
    ) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
        let hd = self.spec.hidden_dim;
        if dh.len() != hd || dc.len() != hd {
            return Err(Error::DimensionMismatch {
                context: "LSTM state gradient",
                expected: hd,
                got: dh.len().min(dc.len()),
            });
        }
        let width = self.spec.input_dim + hd;
        let g = &tape.gates;
        let mut dpre = vec![F::zero(); 4 * hd];
        let mut dc_prev = vec![F::zero(); hd];
        for j in 0..hd {
            let (i, f, o, gg) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
            let tc = tape.tanh_c[j];
            let dcj = dc[j] + dh[j] * o * (F::one() - tc * tc);
            dpre[j] = dcj * gg * i * (F::one() - i);
            dpre[hd + j] = dcj * tape.c_prev[j] * f * (F::one() - f);
            dpre[2 * hd + j] = dh[j] * tc * o * (F::one() - o);
            dpre[3 * hd + j] = dcj * i * (F::one() - gg * gg);
            dc_prev[j] = dcj * f;
        }
        let w = params.tensor("w").unwrap();
        let w_off = self.layout.find("w").unwrap().offset;
        let b_off = self.layout.find("b").unwrap().offset;
        let gv = grads.values_mut();
        let mut dxh = vec![F::zero(); width];
        for (k, &d) in dpre.iter().enumerate() {
            if d == F::zero() {
                continue;
            }
            let row = w_off + k * width;
            axpy(d, &tape.xh, &mut gv[row..row + width]);
            gv[b_off + k] += d;
            axpy(d, &w[k * width..(k + 1) * width], &mut dxh);
        }
        let dh_prev = dxh.split_off(self.spec.input_dim);
        Ok((dh_prev, dc_prev, dxh))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell() -> LstmCell {
        LstmCell::new(LstmSpec {
            input_dim: 3,
            hidden_dim: 4,
        })
        .unwrap()
    }

    #[test]
    fn zero_params_are_a_fixed_point() {
        let c = cell();
        let p = c.zero_params::<f64>();
        let (h, cs, _) = c.step(&p, &[0.0; 4], &[0.0; 4], &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(cs, vec![0.0; 4]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let c = cell();
        let p: ParamBlock<f64> = c.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let b = p.tensor("b").unwrap();
        assert_eq!(&b[4..8], &[1.0; 4]);
        assert_eq!(&b[0..4], &[0.0; 4]);
    }

    #[test]
    fn hidden_state_is_bounded_and_reproducible() {
        let c = cell();
        let p: ParamBlock<f64> = c.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let run = || {
            let (mut h, mut cs) = (vec![0.0; 4], vec![0.0; 4]);
            for t in 0..5 {
                let x = [t as f64, -1.0, 0.5];
                let (h2, c2, _) = c.step(&p, &h, &cs, &x).unwrap();
                h = h2;
                cs = c2;
            }
            h
        };
        let a = run();
        assert!(a.iter().all(|v| v.abs() < 1.0));
        assert_eq!(a, run());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let c = cell();
        let p = c.zero_params::<f64>();
        assert!(c.step(&p, &[0.0; 3], &[0.0; 4], &[0.0; 3]).is_err());
        assert!(c.step(&p, &[0.0; 4], &[0.0; 4], &[0.0; 2]).is_err());
    }

    /// Loss = Σ_t a_t · h_t + Σ b · c_T over a 3-step unroll.
    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cell();
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let coef: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cc: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: ParamBlock<f64> = c.init_params(&mut rng);

        let loss = |q: &ParamBlock<f64>| -> Result<f64> {
            let (mut h, mut cs) = (vec![0.0; 4], vec![0.0; 4]);
            let mut total = 0.0;
            for (x, a) in xs.iter().zip(&coef) {
                let (h2, c2, _) = c.step(q, &h, &cs, x)?;
                total += h2.iter().zip(a).map(|(u, v)| u * v).sum::<f64>();
                h = h2;
                cs = c2;
            }
            Ok(total + cs.iter().zip(&cc).map(|(u, v)| u * v).sum::<f64>())
        };

        let (mut h, mut cs) = (vec![0.0; 4], vec![0.0; 4]);
        let mut tapes = Vec::new();
        for x in &xs {
            let (h2, c2, t) = c.step(&p, &h, &cs, x).unwrap();
            tapes.push(t);
            h = h2;
            cs = c2;
        }
        let mut g = p.zeros_like();
        let mut dh = vec![0.0; 4];
        let mut dc = cc.clone();
        for (t, tape) in tapes.iter().enumerate().rev() {
            for j in 0..4 {
                dh[j] += coef[t][j];
            }
            let (dhp, dcp, _) = c.backward(&p, tape, &dh, &dc, &mut g).unwrap();
            dh = dhp;
            dc = dcp;
        }
        let report = grad_check(&p, &g, 1e-5, loss).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
