//! Parameterised layers that emit tape operations.

use rand::Rng;
use radformer_tensor::{BufferId, Element, Init, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Convolution (no bias) followed by batch normalisation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.init_param(
            format!("{name}.conv.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::HeNormal { fan_in },
            rng,
        )?;
        let gamma = store.add_param(format!("{name}.bn.weight"), Tensor::full([out_ch], T::one()))?;
        let beta = store.add_param(format!("{name}.bn.bias"), Tensor::zeros([out_ch]))?;
        let running_mean = store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros([out_ch]))?;
        let running_var = store.add_buffer(format!("{name}.bn.running_var"), Tensor::full([out_ch], T::one()))?;
        Ok(ConvBn { weight, gamma, beta, running_mean, running_var, kernel, stride, padding })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var, train: bool) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        Ok(tape.batch_norm(y, g, b, self.running_mean, self.running_var, BN_EPS, BN_MOMENTUM, train)?)
    }
}

/// `y = x Wᵀ + b` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.init_param(format!("{name}.weight"), &[out_features, in_features], init, rng)?;
        let bias = if bias {
            let b_init = match init {
                Init::FanInUniform { .. } => init,
                _ => Init::Const(0.0),
            };
            Some(store.init_param(format!("{name}.bias"), &[out_features], b_init, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_features, out_features })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        Ok(tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add_param(format!("{name}.weight"), Tensor::full([dim], T::one()))?;
        let beta = store.add_param(format!("{name}.bias"), Tensor::zeros([dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }
}
