//! Parameterized layers: thin wrappers over the ops in [`super::ops`] that
//! hold `ParamId` handles and cache whatever their backward pass needs.

use ndarray::Array1;

use crate::num::Scalar;
use crate::tensor::Plane;

use super::ops;
use super::params::{Builder, Grads, Init, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder<'_, impl Scalar>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let mut sub = b.sub(name);
        let w = sub.param("weight", &[cout, cin, k, k], init);
        let bias = sub.param("bias", &[cout], Init::Zeros);
        Conv2d {
            w,
            b: bias,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        ops::conv2d(
            x,
            &ps.owned4(self.w),
            &ps.owned1(self.b),
            self.stride,
            self.pad,
        )
    }

    pub fn forward_t<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> (Plane<T>, Plane<T>) {
        (self.forward(ps, x), x.clone())
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Plane<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        let (dx, dw, db) = ops::conv2d_bwd(x, &ps.owned4(self.w), dy, self.stride, self.pad);
        grads.add4(self.w, dw);
        grads.add1(self.b, db);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct DwConv3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl DwConv3 {
    pub fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c: usize) -> Self {
        let mut sub = b.sub(name);
        // fan-in of a depthwise 3x3 tap is 9
        let w = sub.param("weight", &[c, 3, 3], Init::KaimingConv);
        let bias = sub.param("bias", &[c], Init::Zeros);
        DwConv3 { w, b: bias }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        ops::dwconv3(x, &ps.owned3(self.w), &ps.owned1(self.b))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Plane<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        let (dx, dw, db) = ops::dwconv3_bwd(x, &ps.owned3(self.w), dy);
        grads.add3(self.w, dw);
        grads.add1(self.b, db);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        b: &mut Builder<'_, impl Scalar>,
        name: &str,
        n_in: usize,
        n_out: usize,
        init: Init,
    ) -> Self {
        let mut sub = b.sub(name);
        let w = sub.param("weight", &[n_out, n_in], init);
        let bias = sub.param("bias", &[n_out], Init::Zeros);
        Linear { w, b: bias }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Array1<T>) -> Array1<T> {
        ops::linear(x.view(), ps.get2(self.w), ps.get1(self.b))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array1<T>,
        dy: &Array1<T>,
        grads: &mut Grads<T>,
    ) -> Array1<T> {
        let (dx, dw, db) = ops::linear_bwd(x.view(), ps.get2(self.w), dy.view());
        grads.add2(self.w, dw);
        grads.add1(self.b, db);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormC {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormC {
    pub fn new(b: &mut Builder<'_, impl Scalar>, name: &str, c: usize) -> Self {
        let mut sub = b.sub(name);
        let gamma = sub.param("gamma", &[c], Init::Ones);
        let beta = sub.param("beta", &[c], Init::Zeros);
        LayerNormC { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Plane<T>) -> Plane<T> {
        ops::layer_norm_c(x, &ps.owned1(self.gamma), &ps.owned1(self.beta))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Plane<T>,
        dy: &Plane<T>,
        grads: &mut Grads<T>,
    ) -> Plane<T> {
        let (dx, dg, db) = ops::layer_norm_c_bwd(x, &ps.owned1(self.gamma), dy);
        grads.add1(self.gamma, dg);
        grads.add1(self.beta, db);
        dx
    }
}
