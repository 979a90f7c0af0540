//! Small parameterized building blocks shared across the model modules.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Affine map `x · W + b` applied to the rows of a 2-d input.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: store.register_normal(&format!("{name}.weight"), vec![d_in, d_out], INIT_STD, rng),
            b: Some(store.register_zeros(&format!("{name}.bias"), vec![d_out])),
        }
    }

    pub fn new_no_bias(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            w: store.register_normal(&format!("{name}.weight"), vec![d_in, d_out], INIT_STD, rng),
            b: None,
        }
    }

    /// Zero-initialized variant, used where the attention convention wants
    /// a neutral start (deformable offsets and weights).
    pub fn new_zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.register_zeros(&format!("{name}.weight"), vec![d_in, d_out]),
            b: Some(store.register_zeros(&format!("{name}.bias"), vec![d_out])),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row_vec(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Learnable layer-norm affine parameters.
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.register_full(&format!("{name}.gain"), vec![dim], 1.0),
            bias: store.register_zeros(&format!("{name}.bias"), vec![dim]),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two-layer feed-forward block with GELU, the transformer MLP.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, store, h)
    }
}

/// Three-layer MLP with GELU between layers; used for mask embeddings.
pub struct Mlp3 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl Mlp3 {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, dim: usize) -> Self {
        Mlp3 {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim, dim),
            fc3: Linear::new(store, rng, &format!("{name}.fc3"), dim, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, store, x)?;
        let h = g.gelu(h);
        let h = self.fc2.apply(g, store, h)?;
        let h = g.gelu(h);
        self.fc3.apply(g, store, h)
    }
}
