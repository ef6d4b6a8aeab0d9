use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::NnError;

/// Epsilon used by every model layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W` stored as in×out.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Gaussian weights with variance 1/in, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::from_init(store, name, in_dim, out_dim, bias, || {
            rng.normals(in_dim * out_dim)
                .iter()
                .map(|v| v * std)
                .collect()
        })
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_init(store, name, in_dim, out_dim, true, || {
            vec![0.0; in_dim * out_dim]
        })
    }

    fn from_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: impl FnOnce() -> Vec<f64>,
    ) -> Self {
        let weight = store.add_with(format!("{name}.weight"), vec![in_dim, out_dim], init);
        let bias = bias
            .then(|| store.add_with(format!("{name}.bias"), vec![out_dim], || vec![0.0; out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned scale (init 1) and shift (init 0).
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_with(format!("{name}.gamma"), vec![dim], || vec![1.0; dim]),
            beta: store.add_with(format!("{name}.beta"), vec![dim], || vec![0.0; dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, Some(g), Some(b), LN_EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Multi-head attention with separate query and key/value inputs. With
/// `rope` set, rotary position embedding is applied to queries and keys.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub rope: bool,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rope: bool,
        rng: &mut Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || !dim.is_multiple_of(heads) || (rope && !(dim / heads).is_multiple_of(2)) {
            return Err(NnError::InvalidArgument {
                op: "attention",
                reason: format!("width {dim} does not split into {heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            // a key bias only shifts each score row by a constant, which
            // softmax cancels, so keys are projected without one
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            rope,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
    ) -> Result<Var, NnError> {
        let mut q = self.q.forward(tape, store, q_in)?;
        let mut k = self.k.forward(tape, store, kv_in)?;
        let v = self.v.forward(tape, store, kv_in)?;
        if self.rope {
            q = tape.rope(q, self.heads)?;
            k = tape.rope(k, self.heads)?;
        }
        let a = tape.attention(q, k, v, self.heads)?;
        self.out.forward(tape, store, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_linear_is_identity() {
        let mut store = ParamStore::new();
        let lin = Linear::zeros(&mut store, "l", 3, 3);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        store.set(lin.weight, eye).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0])
            .unwrap();
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3, 0);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 8, 2, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(1, 8, rng.normals(8)).unwrap();
        let y = mha.forward(&mut tape, &store, x, x).unwrap();
        let v = mha.v.forward(&mut tape, &store, x).unwrap();
        let expect = mha.out.forward(&mut tape, &store, v).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_heads_are_rejected() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0, 0);
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 10, 4, false, &mut rng).is_err());
        assert!(MultiHeadAttention::new(&mut store, "b", 6, 6, 2, true, &mut rng).is_err());
    }
}
