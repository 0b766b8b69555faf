//! Composite network blocks shared by the codec modules.

use ndarray::{s, Array1, Array2, Array3};

use crate::num::Scalar;
use crate::tensor::{matmul, Plane};

use super::layers::{Conv2d, DwConv3, LayerNormC, Linear};
use super::ops::{self, Act};
use super::params::{Builder, Grads, Init, ParamId, ParamStore};

// ---------------------------------------------------------------------------
// dense block: five 3x3 convolutions, each fed the concat of all previous
// outputs, leaky activations, final layer zero-initialized
// ---------------------------------------------------------------------------

pub const DENSE_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct DenseBlock {
    convs: [Conv2d; 5],
    pub c_in: usize,
    pub growth: usize,
    pub c_out: usize,
}

pub struct DenseCtx<T> {
    inputs: Vec<Plane<T>>,  // concatenated input of each conv
    preacts: Vec<Plane<T>>, // pre-activation outputs of convs 1..4
}

impl DenseBlock {
    pub fn new(
        b: &mut Builder<'_, impl Scalar>,
        name: &str,
        c_in: usize,
        growth: usize,
        c_out: usize,
    ) -> Self {
        let mut sub = b.sub(name);
        let g = growth;
        let convs = [
            Conv2d::new(&mut sub, "conv1", c_in, g, 3, 1, Init::KaimingConv),
            Conv2d::new(&mut sub, "conv2", c_in + g, g, 3, 1, Init::KaimingConv),
            Conv2d::new(&mut sub, "conv3", c_in + 2 * g, g, 3, 1, Init::KaimingConv),
            Conv2d::new(&mut sub, "conv4", c_in + 3 * g, g, 3, 1, Init::KaimingConv),
            // zero-initialized: the block contributes nothing until trained
            Conv2d::new(&mut sub, "conv5", c_in + 4 * g, c_out, 3, 1, Init::Zeros),
        ];
        DenseBlock {
            convs,
            c_in,
            growth,
            c_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        self.run(ps, x, None)
    }

    pub fn forward_t<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, DenseCtx<T>) {
        let mut ctx = DenseCtx {
            inputs: Vec::with_capacity(5),
            preacts: Vec::with_capacity(4),
        };
        let y = self.run(ps, x, Some(&mut ctx));
        (y, ctx)
    }

    fn run<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Plane<T>,
        mut ctx: Option<&mut DenseCtx<T>>,
    ) -> Plane<T> {
        let mut feats: Vec<Plane<T>> = vec![x.clone()];
        for (i, conv) in self.convs.iter().enumerate() {
            let cat = if feats.len() == 1 {
                feats[0].clone()
            } else {
                ops::concat_c(&feats.iter().collect::<Vec<_>>())
            };
            let z = conv.forward(ps, &cat);
            if let Some(c) = ctx.as_deref_mut() {
                c.inputs.push(cat);
            }
            if i < 4 {
                let a = ops::act_fwd(Act::Leaky(DENSE_SLOPE), &z);
                if let Some(c) = ctx.as_deref_mut() {
                    c.preacts.push(z);
                }
                feats.push(a);
            } else {
                return z;
            }
        }
        unreachable!()
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &DenseCtx<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        // gradient flowing into each feature slot: [x, f1, f2, f3, f4]
        let widths: Vec<usize> = std::iter::once(self.c_in)
            .chain(std::iter::repeat(self.growth).take(4))
            .collect();
        let mut dfeat: Vec<Plane<T>> = Vec::new();
        let (_, h, w) = ctx.inputs[0].dim();
        for i in 0..5 {
            let (_, hh, ww) = (0, h, w);
            dfeat.push(Array3::zeros((widths[i], hh, ww)));
        }
        let mut dcat = self.convs[4].backward(ps, &ctx.inputs[4], dy, grads);
        for layer in (0..4).rev() {
            // split the concat gradient into slots 0..=layer+1
            let parts = ops::split_c(&dcat, &widths[..layer + 2]);
            for (slot, part) in parts.into_iter().enumerate() {
                dfeat[slot] += &part;
            }
            // activation gradient of f_{layer+1}
            let da = ops::act_bwd(
                Act::Leaky(DENSE_SLOPE),
                &ctx.preacts[layer],
                &dfeat[layer + 1],
            );
            dcat = self.convs[layer].backward(ps, &ctx.inputs[layer], &da, grads);
        }
        dfeat[0] += &dcat;
        dfeat.swap_remove(0)
    }
}

// ---------------------------------------------------------------------------
// lightweight feature interaction: two normalized stages with a
// multiplicative gate, simplified channel attention and 1x1 projections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FeatureInteraction {
    ln1: LayerNormC,
    expand1: Conv2d, // c -> 2*e*c, 1x1
    dw: DwConv3,     // on 2*e*c
    sca: Conv2d,     // e*c -> e*c, 1x1 on pooled vector
    proj1: Conv2d,   // e*c -> c, 1x1
    ln2: LayerNormC,
    expand2: Conv2d, // c -> 2*e*c, 1x1
    proj2: Conv2d,   // e*c -> c, 1x1
    c: usize,
    e: usize,
}

pub struct FeatureInteractionCtx<T> {
    x: Plane<T>,
    t1: Plane<T>,
    a1: Plane<T>,
    g1: (Plane<T>, Plane<T>),
    gated1: Plane<T>,
    scale1: Array1<T>,
    scaled1: Plane<T>,
    y1: Plane<T>,
    t2: Plane<T>,
    g2: (Plane<T>, Plane<T>),
    gated2: Plane<T>,
}

fn simple_gate<T: Scalar>(x: &Plane<T>) -> ((Plane<T>, Plane<T>), Plane<T>) {
    let c = x.dim().0 / 2;
    let parts = ops::split_c(x, &[c, c]);
    let a = parts[0].clone();
    let b = parts[1].clone();
    let y = &a * &b;
    ((a, b), y)
}

fn simple_gate_bwd<T: Scalar>(halves: &(Plane<T>, Plane<T>), dy: &Plane<T>) -> Plane<T> {
    let da = dy * &halves.1;
    let db = dy * &halves.0;
    ops::concat_c(&[&da, &db])
}

impl FeatureInteraction {
    pub fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c: usize, expand: usize) -> Self {
        let mut sub = b.sub(name);
        let e = expand;
        FeatureInteraction {
            ln1: LayerNormC::new(&mut sub, "norm1", c),
            expand1: Conv2d::new(&mut sub, "expand1", c, 2 * e * c, 1, 1, Init::KaimingConv),
            dw: DwConv3::new(&mut sub, "dwconv", 2 * e * c),
            sca: Conv2d::new(&mut sub, "sca", e * c, e * c, 1, 1, Init::KaimingConv),
            proj1: Conv2d::new(&mut sub, "proj1", e * c, c, 1, 1, Init::KaimingConv),
            ln2: LayerNormC::new(&mut sub, "norm2", c),
            expand2: Conv2d::new(&mut sub, "expand2", c, 2 * e * c, 1, 1, Init::KaimingConv),
            proj2: Conv2d::new(&mut sub, "proj2", e * c, c, 1, 1, Init::KaimingConv),
            c,
            e,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        self.run(ps, x).0
    }

    pub fn forward_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Plane<T>,
    ) -> (Plane<T>, FeatureInteractionCtx<T>) {
        let (y, ctx) = self.run(ps, x);
        (y, ctx)
    }

    fn run<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, FeatureInteractionCtx<T>) {
        // stage 1: gate + channel attention
        let t1 = self.ln1.forward(ps, x);
        let a1 = self.expand1.forward(ps, &t1);
        let u1 = self.dw.forward(ps, &a1);
        let (g1, gated1) = simple_gate(&u1);
        drop(u1);
        let pooled = ops::gap(&gated1);
        let pooled_map = pooled
            .clone()
            .into_shape_with_order((self.e * self.c, 1, 1))
            .unwrap();
        let scale_map = self.sca.forward(ps, &pooled_map);
        let scale: Array1<T> = Array1::from_iter(scale_map.iter().cloned());
        let mut scaled1 = gated1.clone();
        for (ci, mut lane) in scaled1.outer_iter_mut().enumerate() {
            lane.mapv_inplace(|v| v * scale[ci]);
        }
        let r1 = self.proj1.forward(ps, &scaled1);
        let y1 = x + &r1;

        // stage 2: gated projection
        let t2 = self.ln2.forward(ps, &y1);
        let a2 = self.expand2.forward(ps, &t2);
        let (g2, gated2) = simple_gate(&a2);
        let r2 = self.proj2.forward(ps, &gated2);
        let y = &y1 + &r2;

        (
            y,
            FeatureInteractionCtx {
                x: x.clone(),
                t1,
                a1,
                g1,
                gated1,
                scale1: scale,
                scaled1,
                y1,
                t2,
                g2,
                gated2,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &FeatureInteractionCtx<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        // stage 2
        let dgated2 = self.proj2.backward(ps, &ctx.gated2, dy, grads);
        let da2 = simple_gate_bwd(&ctx.g2, &dgated2);
        let dt2 = self.expand2.backward(ps, &ctx.t2, &da2, grads);
        let mut dy1 = self.ln2.backward(ps, &ctx.y1, &dt2, grads);
        dy1 += dy;

        // stage 1
        let dscaled1 = self.proj1.backward(ps, &ctx.scaled1, &dy1, grads);
        // scaled1 = gated1 * scale (broadcast per channel)
        let mut dgated1 = dscaled1.clone();
        for (ci, mut lane) in dgated1.outer_iter_mut().enumerate() {
            lane.mapv_inplace(|v| v * ctx.scale1[ci]);
        }
        let mut dscale = Array1::<T>::zeros(self.e * self.c);
        for ci in 0..self.e * self.c {
            dscale[ci] = (&dscaled1.slice(s![ci, .., ..]) * &ctx.gated1.slice(s![ci, .., ..])).sum();
        }
        let dscale_map = dscale
            .into_shape_with_order((self.e * self.c, 1, 1))
            .unwrap();
        let pooled = ops::gap(&ctx.gated1);
        let pooled_map = pooled
            .into_shape_with_order((self.e * self.c, 1, 1))
            .unwrap();
        let dpooled_map = self.sca.backward(ps, &pooled_map, &dscale_map, grads);
        let dpooled = Array1::from_iter(dpooled_map.iter().cloned());
        dgated1 += &ops::gap_bwd(ctx.gated1.dim(), dpooled.view());

        let du1 = simple_gate_bwd(&ctx.g1, &dgated1);
        let da1 = self.dw.backward(ps, &ctx.a1, &du1, grads);
        let dt1 = self.expand1.backward(ps, &ctx.t1, &da1, grads);
        let mut dx = self.ln1.backward(ps, &ctx.x, &dt1, grads);
        dx += &dy1;
        dx
    }
}

// ---------------------------------------------------------------------------
// plain residual block (two 3x3 convolutions)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct ResCtx<T> {
    x: Plane<T>,
    z1: Plane<T>,
    a1: Plane<T>,
}

impl ResBlock {
    pub fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c: usize) -> Self {
        let mut sub = b.sub(name);
        ResBlock {
            conv1: Conv2d::new(&mut sub, "conv1", c, c, 3, 1, Init::KaimingConv),
            conv2: Conv2d::new(&mut sub, "conv2", c, c, 3, 1, Init::KaimingConvScaled(0.1)),
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        let a1 = ops::act_fwd(Act::Relu, &self.conv1.forward(ps, x));
        x + &self.conv2.forward(ps, &a1)
    }

    pub fn forward_t<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, ResCtx<T>) {
        let z1 = self.conv1.forward(ps, x);
        let a1 = ops::act_fwd(Act::Relu, &z1);
        let y = x + &self.conv2.forward(ps, &a1);
        (
            y,
            ResCtx {
                x: x.clone(),
                z1,
                a1,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &ResCtx<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        let da1 = self.conv2.backward(ps, &ctx.a1, dy, grads);
        let dz1 = ops::act_bwd(Act::Relu, &ctx.z1, &da1);
        let mut dx = self.conv1.backward(ps, &ctx.x, &dz1, grads);
        dx += dy;
        dx
    }
}

// ---------------------------------------------------------------------------
// residual fuse block with squeeze-excite channel attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SeResBlock {
    proj: Conv2d, // c_in -> c, 1x1
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    c: usize,
}

pub struct SeResCtx<T> {
    x: Plane<T>,
    p: Plane<T>,
    z1: Plane<T>,
    a1: Plane<T>,
    r: Plane<T>,
    pooled: Array1<T>,
    h1: Array1<T>,
    h1a: Array1<T>,
    z2: Array1<T>,
    gate: Array1<T>,
}

impl SeResBlock {
    pub fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c_in: usize, c: usize) -> Self {
        let mut sub = b.sub(name);
        let reduced = (c / 4).max(2);
        SeResBlock {
            proj: Conv2d::new(&mut sub, "proj", c_in, c, 1, 1, Init::KaimingConv),
            conv1: Conv2d::new(&mut sub, "conv1", c, c, 3, 1, Init::KaimingConv),
            conv2: Conv2d::new(&mut sub, "conv2", c, c, 3, 1, Init::KaimingConvScaled(0.1)),
            fc1: Linear::new(&mut sub, "fc1", c, reduced, Init::Normal(0.05)),
            fc2: Linear::new(&mut sub, "fc2", reduced, c, Init::Normal(0.05)),
            c,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        self.run(ps, x).0
    }

    pub fn forward_t<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, SeResCtx<T>) {
        self.run(ps, x)
    }

    fn run<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, SeResCtx<T>) {
        let p = self.proj.forward(ps, x);
        let z1 = self.conv1.forward(ps, &p);
        let a1 = ops::act_fwd(Act::Relu, &z1);
        let r = self.conv2.forward(ps, &a1);
        let pooled = ops::gap(&r);
        let h1 = self.fc1.forward(ps, &pooled);
        let h1a = ops::act_fwd(Act::Relu, &h1);
        let z2 = self.fc2.forward(ps, &h1a);
        let gate = ops::act_fwd(Act::Sigmoid, &z2);
        let mut y = p.clone();
        for (ci, mut lane) in y.outer_iter_mut().enumerate() {
            let g = gate[ci];
            let rl = r.slice(s![ci, .., ..]);
            ndarray::Zip::from(&mut lane).and(&rl).for_each(|o, &rv| {
                *o += rv * g;
            });
        }
        (
            y,
            SeResCtx {
                x: x.clone(),
                p,
                z1,
                a1,
                r,
                pooled,
                h1,
                h1a,
                z2,
                gate,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &SeResCtx<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        // y = p + r * gate(broadcast)
        let mut dr = dy.clone();
        for (ci, mut lane) in dr.outer_iter_mut().enumerate() {
            lane.mapv_inplace(|v| v * ctx.gate[ci]);
        }
        let mut dgate = Array1::<T>::zeros(self.c);
        for ci in 0..self.c {
            dgate[ci] = (&dy.slice(s![ci, .., ..]) * &ctx.r.slice(s![ci, .., ..])).sum();
        }
        let dz2 = ops::act_bwd(Act::Sigmoid, &ctx.z2, &dgate);
        let dh1a = self.fc2.backward(ps, &ctx.h1a, &dz2, grads);
        let dh1 = ops::act_bwd(Act::Relu, &ctx.h1, &dh1a);
        let dpooled = self.fc1.backward(ps, &ctx.pooled, &dh1, grads);
        dr += &ops::gap_bwd(ctx.r.dim(), dpooled.view());

        let da1 = self.conv2.backward(ps, &ctx.a1, &dr, grads);
        let dz1 = ops::act_bwd(Act::Relu, &ctx.z1, &da1);
        let mut dp = self.conv1.backward(ps, &ctx.p, &dz1, grads);
        dp += dy;
        self.proj.backward(ps, &ctx.x, &dp, grads)
    }
}

// ---------------------------------------------------------------------------
// channel-wise transformer block: attention across channels from
// spatially-flattened descriptors, gated feed-forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChannelTransformerBlock {
    ln1: LayerNormC,
    qkv: Conv2d,  // c -> 3c, 1x1
    out: Conv2d,  // c -> c, 1x1
    ln2: LayerNormC,
    ffn_in: Conv2d,  // c -> 2c, 1x1 (two gated halves)
    ffn_out: Conv2d, // c -> c, 1x1
    temp: ParamId,   // one scale per head
    pub heads: usize,
}

pub struct ChannelTransformerCtx<T> {
    x: Plane<T>,
    t1: Plane<T>,
    // per head: normalized q/k rows, raw q/k, attention rows
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    qn: Array2<T>,
    kn: Array2<T>,
    attn: Vec<Array2<T>>, // one (hc, hc) matrix per head
    o: Plane<T>,
    y1: Plane<T>,
    t2: Plane<T>,
    fg: (Plane<T>, Plane<T>),
    gated: Plane<T>,
}

fn l2_normalize_rows<T: Scalar>(m: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let eps = T::f(1e-12);
    let norms = Array1::from_iter(
        m.rows()
            .into_iter()
            .map(|r| (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt()),
    );
    let mut out = m.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// Adjoint of row L2 normalization: d x = (d y - y (y . d y)) / ||x||.
fn l2_normalize_rows_bwd<T: Scalar>(
    normalized: &Array2<T>,
    norms: &Array1<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    let mut dx = dy.clone();
    for ((mut drow, yrow), &n) in dx
        .rows_mut()
        .into_iter()
        .zip(normalized.rows())
        .zip(norms.iter())
    {
        let dot: T = yrow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
        ndarray::Zip::from(&mut drow).and(&yrow).for_each(|d, &y| {
            *d = (*d - y * dot) / n;
        });
    }
    dx
}

impl ChannelTransformerBlock {
    pub fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c: usize, heads: usize) -> Self {
        assert_eq!(c % heads, 0, "channels must divide across heads");
        let mut sub = b.sub(name);
        let ln1 = LayerNormC::new(&mut sub, "norm1", c);
        let qkv = Conv2d::new(&mut sub, "qkv", c, 3 * c, 1, 1, Init::KaimingConv);
        let out = Conv2d::new(&mut sub, "out", c, c, 1, 1, Init::KaimingConvScaled(0.1));
        let ln2 = LayerNormC::new(&mut sub, "norm2", c);
        let ffn_in = Conv2d::new(&mut sub, "ffn_in", c, 2 * c, 1, 1, Init::KaimingConv);
        let ffn_out = Conv2d::new(&mut sub, "ffn_out", c, c, 1, 1, Init::KaimingConvScaled(0.1));
        let temp = sub.param("temperature", &[heads], Init::Ones);
        ChannelTransformerBlock {
            ln1,
            qkv,
            out,
            ln2,
            ffn_in,
            ffn_out,
            temp,
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        self.run(ps, x).0
    }

    pub fn forward_t<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Plane<T>,
    ) -> (Plane<T>, ChannelTransformerCtx<T>) {
        self.run(ps, x)
    }

    fn run<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, ChannelTransformerCtx<T>) {
        let (c, h, w) = x.dim();
        let hw = h * w;
        let hc = c / self.heads;
        let temp = ps.owned1(self.temp);

        let t1 = self.ln1.forward(ps, x);
        let qkv = self.qkv.forward(ps, &t1);
        let qkv_m = qkv.view().into_shape_with_order((3 * c, hw)).unwrap();
        let q = qkv_m.slice(s![0..c, ..]).to_owned();
        let k = qkv_m.slice(s![c..2 * c, ..]).to_owned();
        let v = qkv_m.slice(s![2 * c..3 * c, ..]).to_owned();
        let (qn, _qnorms) = l2_normalize_rows(&q);
        let (kn, _knorms) = l2_normalize_rows(&k);

        let mut o_m = Array2::<T>::zeros((c, hw));
        let mut attn_all = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let rows = s![head * hc..(head + 1) * hc, ..];
            let qh = qn.slice(rows);
            let kh = kn.slice(rows);
            let vh = v.slice(rows);
            let mut scores = matmul(qh, kh.t());
            scores.mapv_inplace(|s| s * temp[head]);
            let mut attn = scores;
            for mut row in attn.rows_mut() {
                let sm = ops::softmax(row.view());
                row.assign(&sm);
            }
            let oh = matmul(attn.view(), vh);
            o_m.slice_mut(rows).assign(&oh);
            attn_all.push(attn);
        }
        let o = o_m.into_shape_with_order((c, h, w)).unwrap();
        let proj = self.out.forward(ps, &o);
        let y1 = x + &proj;

        let t2 = self.ln2.forward(ps, &y1);
        let f = self.ffn_in.forward(ps, &t2);
        let parts = ops::split_c(&f, &[c, c]);
        let (fa, fb) = (parts[0].clone(), parts[1].clone());
        let gated = &ops::act_fwd(Act::Gelu, &fa) * &fb;
        let y = &y1 + &self.ffn_out.forward(ps, &gated);

        (
            y,
            ChannelTransformerCtx {
                x: x.clone(),
                t1,
                q,
                k,
                v,
                qn,
                kn,
                attn: attn_all,
                o,
                y1,
                t2,
                fg: (fa, fb),
                gated,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        ctx: &ChannelTransformerCtx<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        let (c, h, w) = ctx.x.dim();
        let hw = h * w;
        let hc = c / self.heads;
        let temp = ps.owned1(self.temp);

        // feed-forward stage
        let dgated = self.ffn_out.backward(ps, &ctx.gated, dy, grads);
        let (fa, fb) = (&ctx.fg.0, &ctx.fg.1);
        let ga = ops::act_fwd(Act::Gelu, fa);
        let dfa = ops::act_bwd(Act::Gelu, fa, &(&dgated * fb));
        let dfb = &dgated * &ga;
        let df = ops::concat_c(&[&dfa, &dfb]);
        let dt2 = self.ffn_in.backward(ps, &ctx.t2, &df, grads);
        let mut dy1 = self.ln2.backward(ps, &ctx.y1, &dt2, grads);
        dy1 += dy;

        // attention stage
        let do_ = self.out.backward(ps, &ctx.o, &dy1, grads);
        let do_m = do_.view().into_shape_with_order((c, hw)).unwrap();
        let mut dqn = Array2::<T>::zeros((c, hw));
        let mut dkn = Array2::<T>::zeros((c, hw));
        let mut dv = Array2::<T>::zeros((c, hw));
        let mut dtemp = Array1::<T>::zeros(self.heads);
        for head in 0..self.heads {
            let rows = s![head * hc..(head + 1) * hc, ..];
            let attn = &ctx.attn[head];
            let vh = ctx.v.slice(rows);
            let qh = ctx.qn.slice(rows);
            let kh = ctx.kn.slice(rows);
            let doh = do_m.slice(rows);

            dv.slice_mut(rows).assign(&matmul(attn.t(), doh));
            let dattn = matmul(doh, vh.t());
            // softmax backward per row -> d scores
            let mut dscores = Array2::<T>::zeros((hc, hc));
            for (i, (arow, drow)) in attn.rows().into_iter().zip(dattn.rows()).enumerate() {
                let ds = ops::softmax_bwd(arow, drow);
                dscores.row_mut(i).assign(&ds);
            }
            // scores = temp * qn kh^T
            let raw = matmul(qh, kh.t());
            dtemp[head] = (&dscores * &raw).sum();
            dscores.mapv_inplace(|v| v * temp[head]);
            dqn.slice_mut(rows).assign(&matmul(dscores.view(), kh));
            dkn.slice_mut(rows).assign(&matmul(dscores.t(), qh));
        }
        grads.add1(self.temp, dtemp);

        let (qn, qnorms) = l2_normalize_rows(&ctx.q);
        let (kn, knorms) = l2_normalize_rows(&ctx.k);
        let dq = l2_normalize_rows_bwd(&qn, &qnorms, &dqn);
        let dk = l2_normalize_rows_bwd(&kn, &knorms, &dkn);

        let mut dqkv_m = Array2::<T>::zeros((3 * c, hw));
        dqkv_m.slice_mut(s![0..c, ..]).assign(&dq);
        dqkv_m.slice_mut(s![c..2 * c, ..]).assign(&dk);
        dqkv_m.slice_mut(s![2 * c..3 * c, ..]).assign(&dv);
        let dqkv = dqkv_m.into_shape_with_order((3 * c, h, w)).unwrap();
        let dt1 = self.qkv.backward(ps, &ctx.t1, &dqkv, grads);
        let mut dx = self.ln1.backward(ps, &ctx.x, &dt1, grads);
        dx += &dy1;
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::randn3;

    /// FD check of d(sum(w .* f(x)))/dx plus a sampling of parameter grads.
    fn check_block<F, B>(build: B, x_dim: (usize, usize, usize), tol: f64)
    where
        B: Fn(&mut Builder<'_, f64>) -> F,
        F: BlockUnderTest,
    {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let block = {
            let mut b = Builder::new(&mut ps, &mut rng);
            build(&mut b)
        };
        let x: Plane<f64> = randn3(&mut rng, x_dim, 0.8);
        let y0 = block.fwd(&ps, &x);
        let wgt: Plane<f64> = randn3(&mut rng, y0.dim(), 1.0);

        let mut grads = Grads::zeros(ps.len());
        let dx = block.bwd(&ps, &x, &wgt, &mut grads);

        let h = 1e-6;
        let mut worst = 0.0f64;
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let lp = (&block.fwd(&ps, &xp) * &wgt).sum();
            let lm = (&block.fwd(&ps, &xm) * &wgt).sum();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - dx[idx]).abs() / fd.abs().max(dx[idx].abs()).max(1e-4);
            worst = worst.max(err);
        }
        assert!(worst < tol, "input grad rel err {worst}");

        // parameter spot checks: three coordinates of every tensor
        let mut coord_rng = ChaCha8Rng::seed_from_u64(99);
        for pid in 0..ps.len() {
            let id = ParamId(pid);
            let shape = ps.get(id).shape().to_vec();
            let n: usize = shape.iter().product();
            let analytic = match grads.get(id) {
                Some(g) => g.clone(),
                None => continue,
            };
            for _ in 0..3.min(n) {
                use rand::Rng;
                let flat = coord_rng.gen_range(0..n);
                let orig = ps.get(id).as_slice().unwrap()[flat];
                let mut ps_p = ps_deep_clone(&ps);
                ps_p.get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
                let mut ps_m = ps_deep_clone(&ps);
                ps_m.get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
                let lp = (&block.fwd(&ps_p, &x) * &wgt).sum();
                let lm = (&block.fwd(&ps_m, &x) * &wgt).sum();
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < tol, "param {} grad rel err {err}", ps.name(id));
            }
        }
    }

    fn ps_deep_clone(ps: &ParamStore<f64>) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for (name, val) in ps.names().iter().zip(ps.values().iter()) {
            out.register(name.clone(), val.clone());
        }
        out
    }

    trait BlockUnderTest {
        fn fwd(&self, ps: &ParamStore<f64>, x: &Plane<f64>) -> Plane<f64>;
        fn bwd(
            &self,
            ps: &ParamStore<f64>,
            x: &Plane<f64>,
            dy: &Plane<f64>,
            grads: &mut Grads<f64>,
        ) -> Plane<f64>;
    }

    impl BlockUnderTest for DenseBlock {
        fn fwd(&self, ps: &ParamStore<f64>, x: &Plane<f64>) -> Plane<f64> {
            self.forward(ps, x)
        }
        fn bwd(
            &self,
            ps: &ParamStore<f64>,
            x: &Plane<f64>,
            dy: &Plane<f64>,
            grads: &mut Grads<f64>,
        ) -> Plane<f64> {
            let (_, ctx) = self.forward_t(ps, x);
            self.backward(ps, &ctx, dy, grads)
        }
    }

    impl BlockUnderTest for FeatureInteraction {
        fn fwd(&self, ps: &ParamStore<f64>, x: &Plane<f64>) -> Plane<f64> {
            self.forward(ps, x)
        }
        fn bwd(
            &self,
            ps: &ParamStore<f64>,
            x: &Plane<f64>,
            dy: &Plane<f64>,
            grads: &mut Grads<f64>,
        ) -> Plane<f64> {
            let (_, ctx) = self.forward_t(ps, x);
            self.backward(ps, &ctx, dy, grads)
        }
    }

    impl BlockUnderTest for ResBlock {
        fn fwd(&self, ps: &ParamStore<f64>, x: &Plane<f64>) -> Plane<f64> {
            self.forward(ps, x)
        }
        fn bwd(
            &self,
            ps: &ParamStore<f64>,
            x: &Plane<f64>,
            dy: &Plane<f64>,
            grads: &mut Grads<f64>,
        ) -> Plane<f64> {
            let (_, ctx) = self.forward_t(ps, x);
            self.backward(ps, &ctx, dy, grads)
        }
    }

    impl BlockUnderTest for SeResBlock {
        fn fwd(&self, ps: &ParamStore<f64>, x: &Plane<f64>) -> Plane<f64> {
            self.forward(ps, x)
        }
        fn bwd(
            &self,
            ps: &ParamStore<f64>,
            x: &Plane<f64>,
            dy: &Plane<f64>,
            grads: &mut Grads<f64>,
        ) -> Plane<f64> {
            let (_, ctx) = self.forward_t(ps, x);
            self.backward(ps, &ctx, dy, grads)
        }
    }

    impl BlockUnderTest for ChannelTransformerBlock {
        fn fwd(&self, ps: &ParamStore<f64>, x: &Plane<f64>) -> Plane<f64> {
            self.forward(ps, x)
        }
        fn bwd(
            &self,
            ps: &ParamStore<f64>,
            x: &Plane<f64>,
            dy: &Plane<f64>,
            grads: &mut Grads<f64>,
        ) -> Plane<f64> {
            let (_, ctx) = self.forward_t(ps, x);
            self.backward(ps, &ctx, dy, grads)
        }
    }

    #[test]
    fn dense_block_grads() {
        check_block(|b| DenseBlock::new(b, "dense", 3, 4, 3), (3, 4, 4), 1e-4);
    }

    #[test]
    fn dense_block_zero_init_outputs_zero() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = {
            let mut b = Builder::new(&mut ps, &mut rng);
            DenseBlock::new(&mut b, "d", 2, 3, 2)
        };
        let x: Plane<f64> = randn3(&mut rng, (2, 4, 4), 1.0);
        let y = block.forward(&ps, &x);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_interaction_grads() {
        check_block(
            |b| FeatureInteraction::new(b, "lfim", 4, 2),
            (4, 3, 3),
            2e-4,
        );
    }

    #[test]
    fn feature_interaction_maps_zero_to_zero_at_init() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = {
            let mut b = Builder::new(&mut ps, &mut rng);
            FeatureInteraction::new(&mut b, "lfim", 4, 2)
        };
        let x = Array3::<f64>::zeros((4, 4, 4));
        let y = block.forward(&ps, &x);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn res_block_grads() {
        check_block(|b| ResBlock::new(b, "res", 3), (3, 4, 4), 1e-4);
    }

    #[test]
    fn se_res_block_grads() {
        check_block(|b| SeResBlock::new(b, "fuse", 7, 4), (7, 3, 3), 2e-4);
    }

    #[test]
    fn channel_transformer_grads() {
        check_block(
            |b| ChannelTransformerBlock::new(b, "trans", 4, 2),
            (4, 3, 3),
            2e-4,
        );
    }
}
