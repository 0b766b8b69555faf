//! Invertible hiding/revealing codec.
//!
//! One stack of enhanced additive-affine coupling blocks serves both
//! directions with a single parameter set: run forward it hides a
//! localization watermark inside an image; run backward it reveals the
//! image and watermark again. Both branches live in the Haar feature space
//! (12 channels for RGB inputs).
//!
//! Per block, with `o = h_ori`, `l = h_loc`:
//!
//! forward:  `o' = o + Conv(phi1(l))`
//!           `l' = l * Exp(phi2(o')) + phi3(o')`
//! backward: `l  = (l' - phi3(o')) * Exp(-phi2(o'))`
//!           `o  = o' - Conv(phi1(l))`
//!
//! The `Exp` argument is clamped to [-2, 2]; the same clamped value is used
//! by both directions, so invertibility is exact regardless of saturation.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::blocks::{DenseBlock, DenseCtx, FeatureInteraction, FeatureInteractionCtx};
use crate::nn::layers::Conv2d;
use crate::nn::ops;
use crate::nn::params::{Builder, Grads, Init, ParamStore};
use crate::num::Scalar;
use crate::tensor::{all_finite, Plane};
use crate::wavelet;

pub const EXP_CLAMP: f64 = 2.0;

/// Branch pair at a given depth of the coupling stack.
#[derive(Debug, Clone)]
pub struct CouplingState<T> {
    pub h_ori: Plane<T>,
    pub h_loc: Plane<T>,
    pub layer_index: usize,
}

/// Enhanced transform: five-layer dense convolution block followed by the
/// feature interaction module.
#[derive(Debug, Clone)]
pub struct PhiNet {
    dense: DenseBlock,
    lfim: FeatureInteraction,
}

pub struct PhiCtx<T> {
    dense: DenseCtx<T>,
    lfim: FeatureInteractionCtx<T>,
}

impl PhiNet {
    fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c: usize, growth: usize, expand: usize) -> Self {
        let mut sub = b.sub(name);
        PhiNet {
            dense: DenseBlock::new(&mut sub, "dense", c, growth, c),
            lfim: FeatureInteraction::new(&mut sub, "lfim", c, expand),
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        self.lfim.forward(ps, &self.dense.forward(ps, x))
    }

    fn forward_t<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, PhiCtx<T>) {
        let (mid, dense) = self.dense.forward_t(ps, x);
        let (y, lfim) = self.lfim.forward_t(ps, &mid);
        (y, PhiCtx { dense, lfim })
    }

    fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &PhiCtx<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        let dmid = self.lfim.backward(ps, &ctx.lfim, dy, grads);
        self.dense.backward(ps, &ctx.dense, &dmid, grads)
    }
}

#[derive(Debug, Clone)]
pub struct CouplingBlock {
    phi1: PhiNet,
    conv: Conv2d,
    phi2: PhiNet,
    phi3: PhiNet,
}

impl CouplingBlock {
    fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c: usize, growth: usize, expand: usize) -> Self {
        let mut sub = b.sub(name);
        CouplingBlock {
            phi1: PhiNet::new(&mut sub, "phi1", c, growth, expand),
            conv: Conv2d::new(&mut sub, "conv", c, c, 3, 1, Init::KaimingConv),
            phi2: PhiNet::new(&mut sub, "phi2", c, growth, expand),
            phi3: PhiNet::new(&mut sub, "phi3", c, growth, expand),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        h_ori: &Plane<T>,
        h_loc: &Plane<T>,
    ) -> (Plane<T>, Plane<T>) {
        couple_forward_with(
            h_ori,
            h_loc,
            |l| self.conv.forward(ps, &self.phi1.forward(ps, l)),
            |o| self.phi2.forward(ps, o),
            |o| self.phi3.forward(ps, o),
        )
    }

    pub fn backward_map<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        h_ori_next: &Plane<T>,
        h_loc_next: &Plane<T>,
    ) -> (Plane<T>, Plane<T>) {
        couple_backward_with(
            h_ori_next,
            h_loc_next,
            |l| self.conv.forward(ps, &self.phi1.forward(ps, l)),
            |o| self.phi2.forward(ps, o),
            |o| self.phi3.forward(ps, o),
        )
    }
}

/// The two forward update equations, evaluated in order, with the
/// additive/multiplicative maps supplied as closures.
pub fn couple_forward_with<T, F1, F2, F3>(
    h_ori: &Plane<T>,
    h_loc: &Plane<T>,
    add_map: F1,
    scale_map: F2,
    shift_map: F3,
) -> (Plane<T>, Plane<T>)
where
    T: Scalar,
    F1: FnOnce(&Plane<T>) -> Plane<T>,
    F2: FnOnce(&Plane<T>) -> Plane<T>,
    F3: FnOnce(&Plane<T>) -> Plane<T>,
{
    let o_next = h_ori + &add_map(h_loc);
    let s = ops::exp_clamped(&scale_map(&o_next), -EXP_CLAMP, EXP_CLAMP);
    let l_next = &(h_loc * &s) + &shift_map(&o_next);
    (o_next, l_next)
}

/// Exact algebraic inverse of [`couple_forward_with`] for the same maps.
pub fn couple_backward_with<T, F1, F2, F3>(
    h_ori_next: &Plane<T>,
    h_loc_next: &Plane<T>,
    add_map: F1,
    scale_map: F2,
    shift_map: F3,
) -> (Plane<T>, Plane<T>)
where
    T: Scalar,
    F1: FnOnce(&Plane<T>) -> Plane<T>,
    F2: FnOnce(&Plane<T>) -> Plane<T>,
    F3: FnOnce(&Plane<T>) -> Plane<T>,
{
    let neg_scale = scale_map(h_ori_next).mapv(|v| -v);
    let e = ops::exp_clamped(&neg_scale, -EXP_CLAMP, EXP_CLAMP);
    let l = &(h_loc_next - &shift_map(h_ori_next)) * &e;
    let o = h_ori_next - &add_map(&l);
    (o, l)
}

/// Spec-level single-block step with layer-index bookkeeping and a
/// finiteness gate.
pub fn coupling_forward<T: Scalar>(
    ps: &ParamStore<T>,
    block: &CouplingBlock,
    state: &CouplingState<T>,
) -> Result<CouplingState<T>> {
    let (o, l) = block.forward(ps, &state.h_ori, &state.h_loc);
    if !all_finite(&o) || !all_finite(&l) {
        return Err(Error::Numeric {
            context: format!("coupling_forward block {}", state.layer_index),
            detail: "non-finite intermediate".into(),
        });
    }
    Ok(CouplingState {
        h_ori: o,
        h_loc: l,
        layer_index: state.layer_index + 1,
    })
}

pub fn coupling_backward<T: Scalar>(
    ps: &ParamStore<T>,
    block: &CouplingBlock,
    state: &CouplingState<T>,
) -> Result<CouplingState<T>> {
    if state.layer_index == 0 {
        return Err(Error::Config("coupling_backward at layer 0".into()));
    }
    let (o, l) = block.backward_map(ps, &state.h_ori, &state.h_loc);
    if !all_finite(&o) || !all_finite(&l) {
        return Err(Error::Numeric {
            context: format!("coupling_backward block {}", state.layer_index - 1),
            detail: "non-finite intermediate".into(),
        });
    }
    Ok(CouplingState {
        h_ori: o,
        h_loc: l,
        layer_index: state.layer_index - 1,
    })
}

// ---------------------------------------------------------------------------
// training-time contexts for both directions
// ---------------------------------------------------------------------------

pub struct BlockHideCtx<T> {
    h_loc_in: Plane<T>,
    phi1: PhiCtx<T>,
    phi1_out: Plane<T>,
    phi2: PhiCtx<T>,
    s_raw: Plane<T>,
    s: Plane<T>,
    phi3: PhiCtx<T>,
}

pub struct BlockRevealCtx<T> {
    phi2: PhiCtx<T>,
    neg_s_raw: Plane<T>,
    e: Plane<T>,
    resid: Plane<T>, // l' - phi3(o')
    phi3: PhiCtx<T>,
    phi1: PhiCtx<T>,
    phi1_out: Plane<T>,
}

impl CouplingBlock {
    pub fn forward_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        h_ori: &Plane<T>,
        h_loc: &Plane<T>,
    ) -> (Plane<T>, Plane<T>, BlockHideCtx<T>) {
        let (p1, phi1) = self.phi1.forward_t(ps, h_loc);
        let (t1, _) = self.conv.forward_t(ps, &p1);
        let o_next = h_ori + &t1;
        let (s_raw, phi2) = self.phi2.forward_t(ps, &o_next);
        let s = ops::exp_clamped(&s_raw, -EXP_CLAMP, EXP_CLAMP);
        let (t2, phi3) = self.phi3.forward_t(ps, &o_next);
        let l_next = &(h_loc * &s) + &t2;
        let ctx = BlockHideCtx {
            h_loc_in: h_loc.clone(),
            phi1,
            phi1_out: p1,
            phi2,
            s_raw,
            s,
            phi3,
        };
        (o_next, l_next, ctx)
    }

    /// Adjoint of `forward_t`: maps output grads to input grads.
    pub fn backward_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &BlockHideCtx<T>,
        d_o_next: &Plane<T>,
        d_l_next: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> (Plane<T>, Plane<T>) {
        // l' = l * s + phi3(o')
        let mut d_l = d_l_next * &ctx.s;
        let d_s = d_l_next * &ctx.h_loc_in;
        let d_s_raw = ops::exp_clamped_bwd(&ctx.s_raw, &d_s, -EXP_CLAMP, EXP_CLAMP);
        let mut d_o_total = d_o_next.clone();
        d_o_total += &self.phi2.backward(ps, &ctx.phi2, &d_s_raw, grads);
        d_o_total += &self.phi3.backward(ps, &ctx.phi3, d_l_next, grads);
        // o' = o + conv(phi1(l))
        let d_p1 = self.conv.backward(ps, &ctx.phi1_out, &d_o_total, grads);
        d_l += &self.phi1.backward(ps, &ctx.phi1, &d_p1, grads);
        (d_o_total, d_l)
    }

    /// Reveal direction with context (the decode-time computation).
    pub fn reveal_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        h_ori_next: &Plane<T>,
        h_loc_next: &Plane<T>,
    ) -> (Plane<T>, Plane<T>, BlockRevealCtx<T>) {
        let (s_raw, phi2) = self.phi2.forward_t(ps, h_ori_next);
        let neg_s_raw = s_raw.mapv(|v| -v);
        let e = ops::exp_clamped(&neg_s_raw, -EXP_CLAMP, EXP_CLAMP);
        let (t2, phi3) = self.phi3.forward_t(ps, h_ori_next);
        let resid = h_loc_next - &t2;
        let l = &resid * &e;
        let (p1, phi1) = self.phi1.forward_t(ps, &l);
        let (t1, _) = self.conv.forward_t(ps, &p1);
        let o = h_ori_next - &t1;
        let ctx = BlockRevealCtx {
            phi2,
            neg_s_raw,
            e,
            resid,
            phi3,
            phi1,
            phi1_out: p1,
        };
        (o, l, ctx)
    }

    /// Adjoint of `reveal_t`: maps grads w.r.t. (o, l) to grads w.r.t.
    /// (o', l'), treating the inverse map as the decode-time forward pass.
    pub fn reveal_backward_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &BlockRevealCtx<T>,
        d_o: &Plane<T>,
        d_l: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> (Plane<T>, Plane<T>) {
        // o = o' - conv(phi1(l))
        let mut d_o_next = d_o.clone();
        let d_t1 = d_o.mapv(|v| -v);
        let d_p1 = self.conv.backward(ps, &ctx.phi1_out, &d_t1, grads);
        let mut d_l_total = d_l.clone();
        d_l_total += &self.phi1.backward(ps, &ctx.phi1, &d_p1, grads);
        // l = (l' - phi3(o')) * e
        let d_resid = &d_l_total * &ctx.e;
        let d_e = &d_l_total * &ctx.resid;
        let d_l_next = d_resid.clone();
        let d_t2 = d_resid.mapv(|v| -v);
        d_o_next += &self.phi3.backward(ps, &ctx.phi3, &d_t2, grads);
        // e = exp(clamp(-s_raw))
        let d_neg_s_raw = ops::exp_clamped_bwd(&ctx.neg_s_raw, &d_e, -EXP_CLAMP, EXP_CLAMP);
        let d_s_raw = d_neg_s_raw.mapv(|v| -v);
        d_o_next += &self.phi2.backward(ps, &ctx.phi2, &d_s_raw, grads);
        (d_o_next, d_l_next)
    }
}

// ---------------------------------------------------------------------------
// full codec
// ---------------------------------------------------------------------------

/// Stack of coupling blocks plus the Haar transform in/out of feature space.
#[derive(Debug, Clone)]
pub struct InnCodec {
    pub blocks: Vec<CouplingBlock>,
    /// Feature channels per branch (4x the image channels).
    pub channels: usize,
}

pub struct HideCtx<T> {
    blocks: Vec<BlockHideCtx<T>>,
}

pub struct RevealCtx<T> {
    blocks: Vec<BlockRevealCtx<T>>,
}

impl InnCodec {
    pub fn new(
        b: &mut Builder<'_, impl Scalar>,
        k_blocks: usize,
        growth: usize,
        expand: usize,
    ) -> Self {
        let c = 12; // RGB image branch in Haar space
        let mut sub = b.sub("inn");
        let blocks = (0..k_blocks)
            .map(|k| CouplingBlock::new(&mut sub, &format!("block{k}"), c, growth, expand))
            .collect();
        InnCodec {
            blocks,
            channels: c,
        }
    }

    /// Hides `w_loc` inside `i_ori`. Returns the intermediate image and the
    /// watermark-branch output `z` (discarded by production encode, returned
    /// for testing and training).
    pub fn hide<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        i_ori: &Plane<T>,
        w_loc: &Plane<T>,
    ) -> Result<(Plane<T>, Plane<T>)> {
        if i_ori.dim() != w_loc.dim() {
            return Err(Error::dim(
                "hide",
                format!("{:?}", i_ori.dim()),
                format!("{:?}", w_loc.dim()),
            ));
        }
        let mut o = wavelet::dwt(i_ori)?;
        let mut l = wavelet::dwt(w_loc)?;
        for (k, block) in self.blocks.iter().enumerate() {
            let (o2, l2) = block.forward(ps, &o, &l);
            if !all_finite(&o2) || !all_finite(&l2) {
                return Err(Error::Numeric {
                    context: format!("hide block {k}"),
                    detail: "non-finite intermediate".into(),
                });
            }
            o = o2;
            l = l2;
        }
        Ok((wavelet::idwt(&o)?, l))
    }

    /// Reconstructs `(i_ori_hat, w_loc_hat)` from a received image and a
    /// substitute for the discarded branch output.
    pub fn reveal<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        i_rec: &Plane<T>,
        z_hat: &Plane<T>,
    ) -> Result<(Plane<T>, Plane<T>)> {
        let o0 = wavelet::dwt(i_rec)?;
        if z_hat.dim() != o0.dim() {
            return Err(Error::dim(
                "reveal",
                format!("{:?}", o0.dim()),
                format!("{:?}", z_hat.dim()),
            ));
        }
        let mut o = o0;
        let mut l = z_hat.clone();
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let (o2, l2) = block.backward_map(ps, &o, &l);
            if !all_finite(&o2) || !all_finite(&l2) {
                return Err(Error::Numeric {
                    context: format!("reveal block {k}"),
                    detail: "non-finite intermediate".into(),
                });
            }
            o = o2;
            l = l2;
        }
        Ok((wavelet::idwt(&o)?, wavelet::idwt(&l)?))
    }

    pub fn hide_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        i_ori: &Plane<T>,
        w_loc: &Plane<T>,
    ) -> Result<(Plane<T>, Plane<T>, HideCtx<T>)> {
        let mut o = wavelet::dwt(i_ori)?;
        let mut l = wavelet::dwt(w_loc)?;
        let mut ctxs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (o2, l2, ctx) = block.forward_t(ps, &o, &l);
            ctxs.push(ctx);
            o = o2;
            l = l2;
        }
        Ok((wavelet::idwt(&o)?, l, HideCtx { blocks: ctxs }))
    }

    /// Adjoint of `hide_t`. `d_i_med` is the gradient w.r.t. the intermediate
    /// image, `d_z` w.r.t. the discarded branch (zeros when unused).
    pub fn hide_backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &HideCtx<T>,
        d_i_med: &Plane<T>,
        d_z: Option<&Plane<T>>,
        grads: &mut Grads<T>,
    ) -> (Plane<T>, Plane<T>) {
        let mut d_o = wavelet::idwt_bwd(d_i_med);
        let mut d_l = match d_z {
            Some(g) => g.clone(),
            None => Array3::zeros(d_o.dim()),
        };
        for (block, bctx) in self.blocks.iter().zip(ctx.blocks.iter()).rev() {
            let (o2, l2) = block.backward_t(ps, bctx, &d_o, &d_l, grads);
            d_o = o2;
            d_l = l2;
        }
        (wavelet::dwt_bwd(&d_o), wavelet::dwt_bwd(&d_l))
    }

    pub fn reveal_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        i_rec: &Plane<T>,
        z_hat: &Plane<T>,
    ) -> Result<(Plane<T>, Plane<T>, RevealCtx<T>)> {
        let mut o = wavelet::dwt(i_rec)?;
        let mut l = z_hat.clone();
        let mut ctxs = Vec::with_capacity(self.blocks.len());
        for block in self.blocks.iter().rev() {
            let (o2, l2, ctx) = block.reveal_t(ps, &o, &l);
            ctxs.push(ctx);
            o = o2;
            l = l2;
        }
        Ok((
            wavelet::idwt(&o)?,
            wavelet::idwt(&l)?,
            RevealCtx { blocks: ctxs },
        ))
    }

    /// Adjoint of `reveal_t`: returns `(d_i_rec, d_z_hat)`.
    pub fn reveal_backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &RevealCtx<T>,
        d_i_ori_hat: &Plane<T>,
        d_w_loc_hat: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> (Plane<T>, Plane<T>) {
        let mut d_o = wavelet::idwt_bwd(d_i_ori_hat);
        let mut d_l = wavelet::idwt_bwd(d_w_loc_hat);
        // reveal ran blocks K-1..0; its adjoint walks 0..K-1 over the stored
        // contexts in reverse push order
        for (block, bctx) in self
            .blocks
            .iter()
            .zip(ctx.blocks.iter().rev())
            .collect::<Vec<_>>()
            .into_iter()
        {
            let (o2, l2) = block.reveal_backward_t(ps, bctx, &d_o, &d_l, grads);
            d_o = o2;
            d_l = l2;
        }
        (wavelet::dwt_bwd(&d_o), d_l)
    }
}
