//! Parameter bundles for the standard layers and their graph application.

use crate::autograd::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Scalar;

/// Standard deviation for projection weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

/// `y = x·W + b` over the last axis, `W: [din, dout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(store, name, din, dout, Init::TruncNormal(LINEAR_INIT_STD))
    }

    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            w: store.init(&format!("{name}.w"), &[din, dout], init)?,
            b: store.init(&format!("{name}.b"), &[dout], Init::Zeros)?,
            din,
            dout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.din * self.dout + self.dout
    }

    pub fn apply<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.linear(x, g.param(self.w)?, g.param(self.b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.init(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: store.init(&format!("{name}.beta"), &[d], Init::Zeros)?,
            d,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.d
    }

    pub fn apply<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(self.gamma)?, g.param(self.beta)?)
    }
}

/// Square-kernel convolution, weights `[k, k, cin, cout]` (`[k, k, 1, c]`
/// when depthwise). Weights start from a normal with std `√(2/fan_out)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Self> {
        let (wc, fan_out) = if depthwise {
            (1, kernel * kernel)
        } else {
            (cin, kernel * kernel * cout)
        };
        let std = (2.0 / fan_out as f64).sqrt();
        Ok(Self {
            w: store.init(&format!("{name}.w"), &[kernel, kernel, wc, cout], Init::Normal(std))?,
            b: store.init(&format!("{name}.b"), &[cout], Init::Zeros)?,
            kernel,
            stride,
            padding,
            depthwise,
            cin,
            cout,
        })
    }

    pub fn num_params(&self) -> usize {
        let wc = if self.depthwise { 1 } else { self.cin };
        self.kernel * self.kernel * wc * self.cout + self.cout
    }

    pub fn apply<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            g.param(self.w)?,
            g.param(self.b)?,
            self.stride,
            self.padding,
            self.depthwise,
        )
    }
}
