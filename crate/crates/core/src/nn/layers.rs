//! Composite layers built from tape primitives.

use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

/// Parameters of a concurrent spatial/channel squeeze-excitation layer.
///
/// Channel squeeze: `sq1` is `C×C/r`, `sq2` is `C/r×C`.
/// Spatial squeeze: a one-tap convolution `1×C×1`.
#[derive(Debug, Clone, Copy)]
pub struct ScseVars {
    pub sq1_w: Var,
    pub sq1_b: Var,
    pub sq2_w: Var,
    pub sq2_b: Var,
    pub sp_w: Var,
    pub sp_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualVars {
    pub conv1: ConvVars,
    pub scse1: ScseVars,
    pub conv2: ConvVars,
    pub scse2: ScseVars,
    /// 1×1 projection on the identity path when channel counts differ.
    pub proj: Option<ConvVars>,
}

/// `x·σ(channel excitation) + x·σ(spatial excitation)`.
pub fn scse(tape: &mut Tape, x: Var, p: &ScseVars) -> Result<Var> {
    let z = tape.gap(x)?;
    let h = tape.dense(z, p.sq1_w, p.sq1_b)?;
    let h = tape.relu(h);
    let g = tape.dense(h, p.sq2_w, p.sq2_b)?;
    let g = tape.sigmoid(g);
    let channel = tape.scale_channels(x, g)?;

    let q = tape.conv1d(x, p.sp_w, p.sp_b, 1)?;
    let q = tape.sigmoid(q);
    let spatial = tape.scale_timesteps(x, q)?;

    tape.add(channel, spatial)
}

/// `scse2(selu(conv2(scse1(selu(conv1(x))))) + identity(x))`.
///
/// `on_conv` sees each activated convolution output, which is where the
/// activity penalty attaches.
pub fn residual_block(
    tape: &mut Tape,
    x: Var,
    p: &ResidualVars,
    dilation: usize,
    on_conv: &mut dyn FnMut(&mut Tape, Var),
) -> Result<Var> {
    let h = tape.conv1d(x, p.conv1.w, p.conv1.b, dilation)?;
    let h = tape.selu(h);
    on_conv(tape, h);
    let h = scse(tape, h, &p.scse1)?;
    let h = tape.conv1d(h, p.conv2.w, p.conv2.b, dilation)?;
    let h = tape.selu(h);
    on_conv(tape, h);
    let identity = match &p.proj {
        Some(proj) => tape.conv1d(x, proj.w, proj.b, 1)?,
        None => x,
    };
    let s = tape.add(h, identity)?;
    scse(tape, s, &p.scse2)
}
