use crate::error::{Error, Result};
use crate::lsk::{lsk_forward, LskParams};
use crate::nn::{self, ConvSpec};
use crate::ops;
use crate::params::Initializer;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::tksa::{tksa_forward, TksaParams};

use super::{af_fuse, ForwardCtx, NetworkConfig};

/// Decoder levels hosting an attention + selective-kernel block, deepest first,
/// each paired with the encoder skip it is fused with after upsampling.
pub(super) const LEVELS: [(usize, usize); 3] = [(4, 3), (3, 2), (2, 1)];

/// The auxiliary head reads the fused feature at this skip level.
const AUX_LEVEL: usize = 2;

pub(super) fn skip_proj_spec(config: &NetworkConfig, level: usize) -> ConvSpec {
    ConvSpec::pointwise(
        config.stage_channels[level - 1],
        config.decoder_channels,
        true,
    )
}

pub(super) fn seg_head_spec(config: &NetworkConfig) -> ConvSpec {
    ConvSpec::same(config.decoder_channels, config.num_classes, 3, 1, 1, true)
}

pub(super) fn aux_head_spec(config: &NetworkConfig) -> ConvSpec {
    ConvSpec::pointwise(config.decoder_channels, config.num_classes, true)
}

pub(super) fn init(init: &mut Initializer, config: &NetworkConfig) -> Result<()> {
    for level in [4, 3, 2, 1] {
        init.conv(&format!("dec.proj{level}"), &skip_proj_spec(config, level))?;
    }
    let (lsk, tksa) = (config.lsk(), config.tksa());
    for (level, skip) in LEVELS {
        TksaParams::init(init, &format!("dec.l{level}.tksa"), &tksa)?;
        LskParams::init(init, &format!("dec.l{level}.lsk"), &lsk)?;
        init.tensor(&format!("dec.af{skip}.alpha"), Tensor::scalar(0.0))?;
    }
    init.conv("head.seg", &seg_head_spec(config))?;
    init.conv("head.aux", &aux_head_spec(config))?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub logits: Var,
    pub aux_logits: Var,
}

/// Attention block then selective-kernel block, each with a residual path.
fn lsksa_block(
    tape: &mut Tape,
    x: Var,
    level: usize,
    config: &NetworkConfig,
    ctx: &ForwardCtx<'_>,
) -> Result<Var> {
    let tksa = TksaParams::bind(ctx.vars, &format!("dec.l{level}.tksa"))?;
    let attended = tksa_forward(tape, x, &tksa, &config.tksa())?;
    let lsk_cfg = config.lsk();
    let lsk = LskParams::bind(ctx.vars, &format!("dec.l{level}.lsk"), &lsk_cfg)?;
    let selected = lsk_forward(tape, attended, &lsk, &lsk_cfg)?;
    ops::add(tape, attended, selected)
}

/// Runs the decoder over `[F1, F2, F3, F4]` and returns full-resolution logits.
pub fn decoder_forward(
    tape: &mut Tape,
    features: &[Var],
    config: &NetworkConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<DecoderOutput> {
    if features.len() != 4 {
        return Err(Error::shape(format!(
            "decoder needs 4 encoder features, got {}",
            features.len()
        )));
    }
    let f4 = features[3];
    let mut x = ctx.conv(tape, f4, "dec.proj4", &skip_proj_spec(config, 4))?;
    let mut aux = None;
    for (level, skip_level) in LEVELS {
        let block = lsksa_block(tape, x, level, config, ctx)?;
        let up = nn::upsample_nearest(tape, block, 2)?;
        let skip = ctx.conv(
            tape,
            features[skip_level - 1],
            &format!("dec.proj{skip_level}"),
            &skip_proj_spec(config, skip_level),
        )?;
        let alpha = ctx.vars.get(&format!("dec.af{skip_level}.alpha"))?;
        x = af_fuse(tape, skip, up, alpha)?;
        if skip_level == AUX_LEVEL {
            aux = Some(x);
        }
    }

    let input_hw = {
        let s = tape.shape(features[0]);
        (s.h * 2, s.w * 2)
    };
    let seg = ctx.conv(tape, x, "head.seg", &seg_head_spec(config))?;
    let logits = upsample_to(tape, seg, input_hw)?;
    let aux_feat = aux.expect("aux level is one of the decoder levels");
    let aux_raw = ctx.conv(tape, aux_feat, "head.aux", &aux_head_spec(config))?;
    let aux_logits = upsample_to(tape, aux_raw, input_hw)?;
    Ok(DecoderOutput { logits, aux_logits })
}

fn upsample_to(tape: &mut Tape, x: Var, (h, w): (usize, usize)) -> Result<Var> {
    let s: Shape = tape.shape(x);
    if h % s.h != 0 || w % s.w != 0 || h / s.h != w / s.w {
        return Err(Error::shape(format!(
            "cannot upsample {s} to {h}x{w} by an integer factor"
        )));
    }
    nn::upsample_nearest(tape, x, h / s.h)
}
