//! Encoder-decoder segmentation network: a four-stage residual encoder, a
//! decoder of attention + selective-kernel blocks joined to encoder skips by
//! adaptive fusion, and main/auxiliary segment heads.

mod config;
mod count;
mod decoder;
mod encoder;
mod fusion;

use crate::error::Result;
use crate::nn::{self, Mode};
use crate::params::{Initializer, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use config::NetworkConfig;
pub use count::{param_count, ParamCount};
pub use decoder::{decoder_forward, DecoderOutput};
pub use encoder::encoder_forward;
pub use fusion::{af_fuse, af_fuse_forward};

pub const DEFAULT_AUX_WEIGHT: f64 = 0.4;

/// Parameter handles, running statistics and normalization mode of one forward pass.
pub struct ForwardCtx<'a> {
    pub vars: &'a ParamVars,
    pub buffers: &'a ParamStore,
    pub mode: Mode,
    /// Running statistics produced in train mode, to be written back by the caller.
    pub stat_updates: Vec<(String, Tensor)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(vars: &'a ParamVars, buffers: &'a ParamStore, mode: Mode) -> Self {
        ForwardCtx {
            vars,
            buffers,
            mode,
            stat_updates: Vec::new(),
        }
    }

    pub(crate) fn batchnorm(&mut self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let stats = nn::RunningStats {
            mean: self.buffers.require(&format!("{name}.mean"))?.clone(),
            var: self.buffers.require(&format!("{name}.var"))?.clone(),
        };
        let (y, updated) = nn::batchnorm2d(
            tape,
            x,
            self.vars.get(&format!("{name}.gamma"))?,
            self.vars.get(&format!("{name}.beta"))?,
            &stats,
            self.mode,
        )?;
        if let Some(u) = updated {
            self.stat_updates.push((format!("{name}.mean"), u.mean));
            self.stat_updates.push((format!("{name}.var"), u.var));
        }
        Ok(y)
    }

    pub(crate) fn conv(
        &self,
        tape: &mut Tape,
        x: Var,
        name: &str,
        spec: &nn::ConvSpec,
    ) -> Result<Var> {
        let w = self.vars.get(&format!("{name}.w"))?;
        let b = if spec.has_bias {
            Some(self.vars.get(&format!("{name}.b"))?)
        } else {
            None
        };
        nn::conv2d(tape, x, spec, w, b)
    }
}

/// Learnable parameters and running-stat buffers of a freshly initialized network.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<(ParamStore, ParamStore)> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    encoder::init(&mut init, config)?;
    decoder::init(&mut init, config)?;
    Ok(init.finish())
}

/// Logits at input resolution plus the auxiliary head's logits.
pub fn forward(
    tape: &mut Tape,
    image: Var,
    config: &NetworkConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<DecoderOutput> {
    let features = encoder_forward(tape, image, config, ctx)?;
    decoder_forward(tape, &features, config, ctx)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub aux: Var,
}

/// Mean pixel cross-entropy on the main logits plus `aux_weight` times the same on the auxiliary logits.
pub fn segmentation_loss(
    tape: &mut Tape,
    logits: Var,
    aux_logits: Var,
    labels: &[u8],
    aux_weight: f64,
) -> Result<LossTerms> {
    let main = nn::cross_entropy(tape, logits, labels)?;
    let aux = nn::cross_entropy(tape, aux_logits, labels)?;
    let scaled = crate::ops::affine(tape, aux, aux_weight, 0.0);
    let total = crate::ops::add(tape, main, scaled)?;
    Ok(LossTerms { total, main, aux })
}
