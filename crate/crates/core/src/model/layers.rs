use rand::Rng;

use crate::params::{BoundParams, ParamId, ParameterStore};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Scalar, Shape, Tape, Tensor, TensorError, Var};
use crate::Error;

/// Static description of one convolution, for introspection dumps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// A square convolution with bias whose weights live in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct ConvLayer {
    spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    /// Register `<name>.weight` (fan-in uniform) and `<name>.bias` (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
    ) -> Result<Self, Error> {
        let weight = store.register_fan_in(
            &format!("{name}.weight"),
            Shape::new(out_channels, in_channels, kernel, kernel),
            rng,
        )?;
        let bias = store.register(
            &format!("{name}.bias"),
            Tensor::zeros(Shape::new(out_channels, 1, 1, 1)),
        )?;
        Ok(ConvLayer {
            spec: ConvSpec {
                name: name.to_string(),
                in_channels,
                out_channels,
                kernel,
                stride: geom.stride,
                padding: geom.padding,
                dilation: geom.dilation,
            },
            weight,
            bias,
        })
    }

    /// 1x1, stride 1.
    pub fn pointwise<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self, Error> {
        Self::new(store, rng, name, in_channels, out_channels, 1, ConvGeom::unit())
    }

    /// 3x3 with "same" padding for the given dilation.
    pub fn same3<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self, Error> {
        let geom = ConvGeom::new(stride, dilation, dilation);
        Self::new(store, rng, name, in_channels, out_channels, 3, geom)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.spec.stride, self.spec.padding, self.spec.dilation)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
    ) -> Result<Var, TensorError> {
        tape.conv2d(
            x,
            params.var(self.weight),
            Some(params.var(self.bias)),
            self.geom(),
        )
    }

    /// `relu(conv(x))`.
    pub fn forward_relu<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = self.forward(tape, params, x)?;
        tape.relu(y)
    }
}

/// Resize `x` to `(h, w)` unless it already has that size.
pub fn resize_to<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    h: usize,
    w: usize,
) -> Result<Var, TensorError> {
    let s = tape.shape(x);
    if s.h() == h && s.w() == w {
        Ok(x)
    } else {
        tape.bilinear_resize(x, h, w)
    }
}
