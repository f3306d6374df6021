//! Dual-path recurrent block operating on the encoder latent.
//!
//! Each module projects the latent to the LSTM width with a 1×1
//! convolution, runs a bidirectional LSTM along frames (one sequence per
//! bin) and then along bins (one sequence per frame), each with its two
//! directions summed and a residual connection, applies group norm and
//! PReLU, projects back with a 1×1 convolution and adds the module input.

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::{Ctx, Init, LstmIds};
use crate::numerics::{ParamId, Var, NORM_EPS};

#[derive(Clone, Debug)]
pub struct DprnnModule {
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub time_fwd: LstmIds,
    pub time_bwd: LstmIds,
    pub freq_fwd: LstmIds,
    pub freq_bwd: LstmIds,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub prelu: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

impl DprnnModule {
    pub(crate) fn new(init: &mut Init, prefix: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.latent_channels();
        let h = cfg.bilstm_hidden;
        Self {
            proj_weight: init.fan_in(&format!("{prefix}.proj.weight"), vec![h, c, 1, 1], c),
            proj_bias: init.fan_in(&format!("{prefix}.proj.bias"), vec![h], c),
            time_fwd: init.lstm(&format!("{prefix}.time.fwd"), h, h),
            time_bwd: init.lstm(&format!("{prefix}.time.bwd"), h, h),
            freq_fwd: init.lstm(&format!("{prefix}.freq.fwd"), h, h),
            freq_bwd: init.lstm(&format!("{prefix}.freq.bwd"), h, h),
            norm_gamma: init.constant(&format!("{prefix}.norm.gamma"), vec![h], 1.0),
            norm_beta: init.constant(&format!("{prefix}.norm.beta"), vec![h], 0.0),
            prelu: init.constant(&format!("{prefix}.prelu.slope"), vec![h], 0.25),
            out_weight: init.fan_in(&format!("{prefix}.out.weight"), vec![c, h, 1, 1], h),
            out_bias: init.fan_in(&format!("{prefix}.out.bias"), vec![c], h),
        }
    }
}

/// Bidirectional LSTM over `[B, T, H]` with the two directions summed,
/// plus the residual input.
fn summed_path(ctx: &Ctx, x: &Var, fwd: &LstmIds, bwd: &LstmIds) -> Result<Var> {
    let g = ctx.g;
    let y = g.bilstm(x, &ctx.lstm(fwd), &ctx.lstm(bwd))?;
    let h = x.shape()[2];
    let summed = g.add(&g.narrow_last(&y, 0, h), &g.narrow_last(&y, h, h));
    Ok(g.add(&summed, x))
}

fn dprnn_module(ctx: &Ctx, m: &DprnnModule, z: &Var, cfg: &ModelConfig) -> Result<Var> {
    let g = ctx.g;
    // [C, L, F] -> [H, L, F]
    let p = g.conv2d(z, &ctx.p(m.proj_weight), Some(&ctx.p(m.proj_bias)), (1, 1))?;
    // frames as the sequence axis: [F, L, H]
    let t_in = g.permute3(&p, [2, 1, 0]);
    let t_out = summed_path(ctx, &t_in, &m.time_fwd, &m.time_bwd)?;
    // bins as the sequence axis: [L, F, H]
    let f_in = g.permute3(&t_out, [1, 0, 2]);
    let f_out = summed_path(ctx, &f_in, &m.freq_fwd, &m.freq_bwd)?;
    // back to [H, L, F]
    let u = g.permute3(&f_out, [2, 0, 1]);
    let u = g.groupnorm(&u, &ctx.p(m.norm_gamma), &ctx.p(m.norm_beta), cfg.groupnorm_groups, NORM_EPS)?;
    let u = g.prelu(&u, &ctx.p(m.prelu))?;
    let u = g.conv2d(&u, &ctx.p(m.out_weight), Some(&ctx.p(m.out_bias)), (1, 1))?;
    let u = ctx.dropout(&u, cfg.dropout)?;
    Ok(g.add(&u, z))
}

/// Applies the stacked modules; shape-preserving.
pub fn dprnn_block(ctx: &Ctx, modules: &[DprnnModule], latent: &Var, cfg: &ModelConfig) -> Result<Var> {
    let mut z = latent.clone();
    for m in modules {
        z = dprnn_module(ctx, m, &z, cfg)?;
    }
    Ok(z)
}
