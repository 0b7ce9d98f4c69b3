//! Mixture of softmaxes over a shared output embedding.

use crate::error::{Error, Result};
use crate::kernels::{dot, softmax_with_temperature, ProbVector};
use crate::store::OutputEmbedding;

/// `P = sum_r pi_r softmax(W_sm (w_r h + b_r))`, `pi = softmax(w_pi h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoSHead {
    dim: usize,
    vocab_size: usize,
    components: usize,
    /// `R x D x D`, row-major per component.
    pub(crate) proj: Vec<f64>,
    /// `R x D`.
    pub(crate) bias: Vec<f64>,
    /// `R x D`.
    pub(crate) prior: Vec<f64>,
    /// `V x D` copy of the output embedding.
    pub(crate) output: Vec<f64>,
    finetuned: bool,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct MoSForward {
    pub priors: Vec<f64>,
    /// Per component, `w_r h + b_r`.
    pub projected: Vec<Vec<f64>>,
    /// Per component, `softmax(W_sm projected_r)`.
    pub components: Vec<Vec<f64>>,
    pub mixture: Vec<f64>,
}

impl MoSHead {
    /// Every component is the identity with zero bias; priors are uniform.
    pub fn identity(output: &OutputEmbedding, components: usize) -> Result<Self> {
        let d = output.dim();
        let mut proj = vec![0.0; components * d * d];
        for r in 0..components {
            for i in 0..d {
                proj[r * d * d + i * d + i] = 1.0;
            }
        }
        Self::new(
            output,
            components,
            proj,
            vec![0.0; components * d],
            vec![0.0; components * d],
        )
    }

    pub fn new(
        output: &OutputEmbedding,
        components: usize,
        proj: Vec<f64>,
        bias: Vec<f64>,
        prior: Vec<f64>,
    ) -> Result<Self> {
        let d = output.dim();
        if components == 0 {
            return Err(Error::param("a mixture needs at least one component"));
        }
        if proj.len() != components * d * d {
            return Err(Error::shape("MoS projections", components * d * d, proj.len()));
        }
        if bias.len() != components * d {
            return Err(Error::shape("MoS biases", components * d, bias.len()));
        }
        if prior.len() != components * d {
            return Err(Error::shape("MoS prior projection", components * d, prior.len()));
        }
        Ok(MoSHead {
            dim: d,
            vocab_size: output.vocab_size(),
            components,
            proj,
            bias,
            prior,
            output: output.to_f64(),
            finetuned: false,
        })
    }

    pub(crate) fn from_parts(
        dim: usize,
        vocab_size: usize,
        components: usize,
        proj: Vec<f64>,
        bias: Vec<f64>,
        prior: Vec<f64>,
        output: Vec<f64>,
        finetuned: bool,
    ) -> Self {
        MoSHead {
            dim,
            vocab_size,
            components,
            proj,
            bias,
            prior,
            output,
            finetuned,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Whether the output embedding copy has been trained.
    pub fn finetuned(&self) -> bool {
        self.finetuned
    }

    pub(crate) fn set_finetuned(&mut self, f: bool) {
        self.finetuned = f;
    }

    pub fn projection(&self, r: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.proj[r * dd..(r + 1) * dd]
    }

    pub fn bias(&self, r: usize) -> &[f64] {
        &self.bias[r * self.dim..(r + 1) * self.dim]
    }

    pub fn prior_row(&self, r: usize) -> &[f64] {
        &self.prior[r * self.dim..(r + 1) * self.dim]
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Trainable parameters, flattened: projections, biases, prior
    /// projection and, if `with_output`, the output embedding.
    pub fn parameters(&self, with_output: bool) -> Vec<f64> {
        let mut out = [self.proj.as_slice(), &self.bias, &self.prior].concat();
        if with_output {
            out.extend_from_slice(&self.output);
        }
        out
    }

    /// Inverse of [`MoSHead::parameters`].
    pub fn with_parameters(&self, params: &[f64], with_output: bool) -> Result<MoSHead> {
        let (np, nb) = (self.proj.len(), self.bias.len());
        let want = np + 2 * nb + if with_output { self.output.len() } else { 0 };
        if params.len() != want {
            return Err(Error::shape("MoS parameters", want, params.len()));
        }
        let mut head = self.clone();
        head.proj.copy_from_slice(&params[..np]);
        head.bias.copy_from_slice(&params[np..np + nb]);
        head.prior.copy_from_slice(&params[np + nb..np + 2 * nb]);
        if with_output {
            head.output.copy_from_slice(&params[np + 2 * nb..]);
        }
        Ok(head)
    }

    pub fn forward(&self, h: &[f64]) -> Result<MoSForward> {
        let d = self.dim;
        if h.len() != d {
            return Err(Error::shape("MoS input", d, h.len()));
        }
        let prior_logits: Vec<f64> = (0..self.components).map(|r| dot(self.prior_row(r), h)).collect();
        let priors = softmax_with_temperature(&prior_logits, 1.0)?.into_vec();
        let mut projected = Vec::with_capacity(self.components);
        let mut components = Vec::with_capacity(self.components);
        let mut mixture = vec![0.0; self.vocab_size];
        for r in 0..self.components {
            let w = self.projection(r);
            let z: Vec<f64> = w
                .chunks_exact(d)
                .zip(self.bias(r))
                .map(|(row, b)| dot(row, h) + b)
                .collect();
            let logits: Vec<f64> = self.output.chunks_exact(d).map(|e| dot(e, &z)).collect();
            let p = softmax_with_temperature(&logits, 1.0)?.into_vec();
            for (m, x) in mixture.iter_mut().zip(&p) {
                *m += priors[r] * x;
            }
            projected.push(z);
            components.push(p);
        }
        Ok(MoSForward {
            priors,
            projected,
            components,
            mixture,
        })
    }
}

pub fn mos_predict(h: &[f64], head: &MoSHead) -> Result<ProbVector> {
    Ok(ProbVector::from_vec_unchecked(head.forward(h)?.mixture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn output() -> OutputEmbedding {
        OutputEmbedding::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap()
    }

    #[test]
    fn single_identity_component_is_the_base_softmax() {
        let w = output();
        let head = MoSHead::identity(&w, 1).unwrap();
        let h = [0.4, -1.3];
        assert_eq!(mos_predict(&h, &head).unwrap(), w.predict(&h).unwrap());
    }

    #[test]
    fn identical_components_collapse() {
        let w = output();
        let one = MoSHead::new(&w, 1, vec![0.5, 0.1, -0.2, 1.0], vec![0.1, 0.2], vec![0.3, 0.3]).unwrap();
        let two = MoSHead::new(
            &w,
            2,
            [one.proj.clone(), one.proj.clone()].concat(),
            [one.bias.clone(), one.bias.clone()].concat(),
            vec![0.7, -0.2, 0.1, 0.9],
        )
        .unwrap();
        let h = [0.9, 0.2];
        let a = mos_predict(&h, &one).unwrap();
        let b = mos_predict(&h, &two).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn half_half_mixture() {
        // huge logits make each component (numerically) one-hot
        let w = OutputEmbedding::new(2, 1, vec![1.0, -1.0]).unwrap();
        let head = MoSHead::new(&w, 2, vec![1.0, -1.0], vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let p = mos_predict(&[1000.0], &head).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors() {
        let w = output();
        assert!(MoSHead::identity(&w, 0).is_err());
        assert!(MoSHead::new(&w, 1, vec![1.0], vec![0.0; 2], vec![0.0; 2]).is_err());
        let head = MoSHead::identity(&w, 2).unwrap();
        assert!(matches!(mos_predict(&[1.0], &head), Err(Error::Shape { .. })));
    }

    proptest! {
        #[test]
        fn mixture_is_convex(
            params in prop::collection::vec(-2.0f64..2.0, 3 * (4 + 2 + 2)),
            h in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let w = output();
            let (proj, rest) = params.split_at(12);
            let (bias, prior) = rest.split_at(6);
            let head = MoSHead::new(&w, 3, proj.to_vec(), bias.to_vec(), prior.to_vec()).unwrap();
            let f = head.forward(&h).unwrap();
            prop_assert!((f.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (i, p) in f.mixture.iter().enumerate() {
                let lo = f.components.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
                let hi = f.components.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*p >= lo - 1e-15 && *p <= hi + 1e-15);
            }
        }
    }
}
