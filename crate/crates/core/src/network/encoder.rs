use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::ops;
use crate::params::Initializer;
use crate::tape::{Tape, Var};

use super::{ForwardCtx, NetworkConfig};

pub(super) fn stem_spec(config: &NetworkConfig) -> ConvSpec {
    ConvSpec::same(config.in_channels, config.stage_channels[0], 3, 1, 1, false)
}

/// One residual block: its convs and whether it has a projection shortcut.
pub(super) struct BlockSpec {
    pub prefix: String,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub proj: Option<ConvSpec>,
}

/// Every residual block in forward order. The first block of each stage halves
/// the resolution and therefore carries a strided 1x1 projection.
pub(super) fn blocks(config: &NetworkConfig) -> Vec<BlockSpec> {
    let mut out = Vec::new();
    let mut cin = config.stage_channels[0];
    for (s, &cout) in config.stage_channels.iter().enumerate() {
        for b in 0..config.blocks_per_stage {
            let stride = if b == 0 { 2 } else { 1 };
            let proj = (stride != 1 || cin != cout)
                .then(|| ConvSpec::pointwise(cin, cout, false).with_stride(stride));
            out.push(BlockSpec {
                prefix: format!("enc.s{}.b{b}", s + 1),
                conv1: ConvSpec::same(cin, cout, 3, 1, 1, false).with_stride(stride),
                conv2: ConvSpec::same(cout, cout, 3, 1, 1, false),
                proj,
            });
            cin = cout;
        }
    }
    out
}

pub(super) fn init(init: &mut Initializer, config: &NetworkConfig) -> Result<()> {
    init.conv("enc.stem.conv", &stem_spec(config))?;
    init.batchnorm("enc.stem.bn", config.stage_channels[0])?;
    for block in blocks(config) {
        let p = &block.prefix;
        init.conv(&format!("{p}.conv1"), &block.conv1)?;
        init.batchnorm(&format!("{p}.bn1"), block.conv1.out_channels)?;
        init.conv(&format!("{p}.conv2"), &block.conv2)?;
        init.batchnorm(&format!("{p}.bn2"), block.conv2.out_channels)?;
        if let Some(proj) = &block.proj {
            init.conv(&format!("{p}.proj"), proj)?;
            init.batchnorm(&format!("{p}.proj_bn"), proj.out_channels)?;
        }
    }
    Ok(())
}

fn residual_block(
    tape: &mut Tape,
    x: Var,
    block: &BlockSpec,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let p = &block.prefix;
    let y = ctx.conv(tape, x, &format!("{p}.conv1"), &block.conv1)?;
    let y = ctx.batchnorm(tape, y, &format!("{p}.bn1"))?;
    let y = nn::relu(tape, y);
    let y = ctx.conv(tape, y, &format!("{p}.conv2"), &block.conv2)?;
    let y = ctx.batchnorm(tape, y, &format!("{p}.bn2"))?;
    let skip = match &block.proj {
        Some(proj) => {
            let s = ctx.conv(tape, x, &format!("{p}.proj"), proj)?;
            ctx.batchnorm(tape, s, &format!("{p}.proj_bn"))?
        }
        None => x,
    };
    let sum = ops::add(tape, y, skip)?;
    Ok(nn::relu(tape, sum))
}

/// Four feature maps at 1/2, 1/4, 1/8 and 1/16 of the input resolution.
pub fn encoder_forward(
    tape: &mut Tape,
    image: Var,
    config: &NetworkConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    let s = tape.shape(image);
    if !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) {
        return Err(Error::shape(format!(
            "input {s} must have height and width divisible by 16"
        )));
    }
    if s.c != config.in_channels {
        return Err(Error::shape(format!(
            "encoder expects {} input channels, got {s}",
            config.in_channels
        )));
    }
    let x = ctx.conv(tape, image, "enc.stem.conv", &stem_spec(config))?;
    let x = ctx.batchnorm(tape, x, "enc.stem.bn")?;
    let mut x = nn::relu(tape, x);
    let mut features = Vec::with_capacity(4);
    for (i, block) in blocks(config).iter().enumerate() {
        x = residual_block(tape, x, block, ctx)?;
        if (i + 1) % config.blocks_per_stage == 0 {
            features.push(x);
        }
    }
    Ok(features)
}
