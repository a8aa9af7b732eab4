use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, Activation, ConvGeometry, MaskKind};
use super::params::{Grads, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One stage of a feed-forward stack. Parameterized layers own the names
/// `"{name}.w"` and `"{name}.b"` in the [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<MaskKind>,
    },
    Act(Activation),
    Upsample2x,
}

impl Layer {
    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Layer::Dense {
            name: name.to_owned(),
            inputs,
            outputs,
        }
    }

    pub fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::Conv2d {
            name: name.to_owned(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            mask: None,
        }
    }

    pub fn masked_conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, mask: MaskKind) -> Self {
        Layer::Conv2d {
            name: name.to_owned(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            mask: Some(mask),
        }
    }

    fn param_shapes(&self) -> Option<(String, Vec<usize>, Vec<usize>, usize)> {
        match self {
            Layer::Dense { name, inputs, outputs } => {
                Some((name.clone(), vec![*inputs, *outputs], vec![*outputs], *inputs))
            }
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                name.clone(),
                vec![*out_channels, *in_channels, *kernel, *kernel],
                vec![*out_channels],
                in_channels * kernel * kernel,
            )),
            _ => None,
        }
    }
}

/// Activations recorded by a forward pass; `values[0]` is the input.
pub struct Trace<F: Scalar> {
    values: Vec<Tensor<F>>,
}

impl<F: Scalar> Trace<F> {
    pub fn output(&self) -> &Tensor<F> {
        self.values.last().expect("trace holds at least the input")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// He-uniform weights and zero biases, drawn in layer order.
    pub fn init_params<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        for layer in &self.layers {
            if let Some((name, wshape, bshape, fan_in)) = layer.param_shapes() {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let n: usize = wshape.iter().product();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                store.insert(&format!("{name}.w"), Tensor::from_f64(&wshape, &w).expect("shape"));
                store.insert(&format!("{name}.b"), Tensor::zeros(&bshape));
            }
        }
    }

    pub fn forward<F: Scalar>(&self, params: &ParamStore<F>, x: &Tensor<F>) -> Result<Trace<F>> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for layer in &self.layers {
            let input = values.last().expect("non-empty");
            let out = match layer {
                Layer::Dense { name, .. } => {
                    let (w, b) = weights(params, name)?;
                    ops::dense_forward(input, w, b)?
                }
                Layer::Conv2d {
                    name,
                    stride,
                    padding,
                    mask,
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let (w, b) = weights(params, name)?;
                    let m = mask.map(|kind| ops::causal_mask(*out_channels, *in_channels, *kernel, kind));
                    ops::conv2d_forward(
                        input,
                        w,
                        Some(b),
                        ConvGeometry {
                            stride: *stride,
                            padding: *padding,
                        },
                        m.as_ref(),
                    )?
                }
                Layer::Act(a) => a.forward(input),
                Layer::Upsample2x => ops::upsample2x_forward(input)?,
            };
            values.push(out);
        }
        Ok(Trace { values })
    }

    /// Convenience forward pass that keeps only the output.
    pub fn predict<F: Scalar>(&self, params: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let trace = self.forward(params, x)?;
        Ok(trace.values.into_iter().last().expect("non-empty"))
    }

    /// Back-propagates `dy` through the recorded trace, adding parameter
    /// gradients into `grads`, and returns the gradient wrt the input.
    pub fn backward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        trace: &Trace<F>,
        dy: Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::shape("backward", "trace does not match network"));
        }
        let mut g = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.values[i];
            let y = &trace.values[i + 1];
            if g.shape() != y.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("gradient {:?} vs activation {:?}", g.shape(), y.shape()),
                ));
            }
            g = match layer {
                Layer::Dense { name, .. } => {
                    let (w, b) = weights(params, name)?;
                    let r = ops::dense_backward(x, w, b, &g)?;
                    grads.accumulate(&format!("{name}.w"), &r.dw)?;
                    grads.accumulate(&format!("{name}.b"), &r.db)?;
                    r.dx
                }
                Layer::Conv2d {
                    name,
                    stride,
                    padding,
                    mask,
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let (w, _) = weights(params, name)?;
                    let m = mask.map(|kind| ops::causal_mask(*out_channels, *in_channels, *kernel, kind));
                    let r = ops::conv2d_backward(
                        x,
                        w,
                        ConvGeometry {
                            stride: *stride,
                            padding: *padding,
                        },
                        m.as_ref(),
                        &g,
                    )?;
                    grads.accumulate(&format!("{name}.w"), &r.dw)?;
                    grads.accumulate(&format!("{name}.b"), &r.db)?;
                    r.dx
                }
                Layer::Act(a) => a.backward(x, y, &g),
                Layer::Upsample2x => ops::upsample2x_backward(x.shape(), &g)?,
            };
        }
        Ok(g)
    }

    /// Names of every parameter tensor, in layer order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| l.param_shapes())
            .flat_map(|(name, ..)| [format!("{name}.w"), format!("{name}.b")])
            .collect()
    }
}

fn weights<'a, F: Scalar>(params: &'a ParamStore<F>, name: &str) -> Result<(&'a Tensor<F>, &'a Tensor<F>)> {
    Ok((params.get(&format!("{name}.w"))?, params.get(&format!("{name}.b"))?))
}
