//! Layer descriptions and static shape checking.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

/// One layer of a feed-forward network. Shapes below are per batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[in, h, w] -> [out, h', w']`, square kernel, zero padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d { size: usize, stride: usize },
    Relu,
    /// Flattens its input, `[in] -> [out]`.
    Dense { in_features: usize, out_features: usize },
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample2d { factor: usize },
    /// Softmax over the channel axis (axis 0 of the item).
    Softmax,
    /// Channel concatenation of the previous output with the output of layer `skip`.
    Concat { skip: usize },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride: 1, padding: kernel / 2 }
    }

    pub fn pool(size: usize) -> Self {
        LayerSpec::MaxPool2d { size, stride: size }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense { in_features, out_features }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Weight and bias shapes of a parametric layer.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerSpec::Dense { in_features, out_features } => {
                Some((vec![out_features, in_features], vec![out_features]))
            }
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used for weight initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((in_channels * kernel * kernel, out_channels * kernel * kernel))
            }
            LayerSpec::Dense { in_features, out_features } => Some((in_features, out_features)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |detail: &str| Err(NnError::Spec { layer: index, detail: detail.into() });
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad("conv2d channels, kernel and stride must be >= 1");
                }
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return bad("maxpool2d size and stride must be >= 1");
                }
            }
            LayerSpec::Dense { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return bad("dense features must be >= 1");
                }
            }
            LayerSpec::Upsample2d { factor } => {
                if factor == 0 {
                    return bad("upsample factor must be >= 1");
                }
            }
            LayerSpec::Concat { skip } => {
                if skip >= index {
                    return bad("concat must reference an earlier layer");
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => {}
        }
        Ok(())
    }
}

fn spatial(shape: &[usize], layer: usize, what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(NnError::Shape {
            layer,
            detail: format!("{what} needs a [c, h, w] input, got {shape:?}"),
        }),
    }
}

/// Output shape of every layer given the per-item input shape. Fails on the
/// first layer whose input does not match.
pub fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input.is_empty() || input.iter().any(|&d| d == 0) {
        return Err(NnError::Shape { layer: 0, detail: format!("bad input shape {input:?}") });
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        layer.validate(i)?;
        let prev: &[usize] = if i == 0 { input } else { &shapes[i - 1] };
        let mismatch = |detail: String| NnError::Shape { layer: i, detail };
        let out = match *layer {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let (c, h, w) = spatial(prev, i, "conv2d")?;
                if c != in_channels {
                    return Err(mismatch(format!("expected {in_channels} channels, got {c}")));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(mismatch(format!("kernel {kernel} larger than padded {h}x{w}")));
                }
                vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ]
            }
            LayerSpec::MaxPool2d { size, stride } => {
                let (c, h, w) = spatial(prev, i, "maxpool2d")?;
                if h < size || w < size {
                    return Err(mismatch(format!("pool {size} larger than {h}x{w}")));
                }
                vec![c, (h - size) / stride + 1, (w - size) / stride + 1]
            }
            LayerSpec::Relu => prev.to_vec(),
            LayerSpec::Dense { in_features, out_features } => {
                let flat: usize = prev.iter().product();
                if flat != in_features {
                    return Err(mismatch(format!(
                        "dense expects {in_features} features, got {flat}"
                    )));
                }
                vec![out_features]
            }
            LayerSpec::Upsample2d { factor } => {
                let (c, h, w) = spatial(prev, i, "upsample2d")?;
                vec![c, h * factor, w * factor]
            }
            LayerSpec::Softmax => prev.to_vec(),
            LayerSpec::Concat { skip } => {
                let (c, h, w) = spatial(prev, i, "concat")?;
                let (sc, sh, sw) = spatial(&shapes[skip], i, "concat skip")?;
                if (h, w) != (sh, sw) {
                    return Err(mismatch(format!(
                        "concat spatial {h}x{w} vs skip layer {skip} {sh}x{sw}"
                    )));
                }
                vec![c + sc, h, w]
            }
        };
        shapes.push(out);
    }
    Ok(shapes)
}
