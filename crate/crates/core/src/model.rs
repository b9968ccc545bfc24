//! Multilayer-perceptron feature extractor with a classifier head.
//!
//! Hidden layers use ReLU (sub-gradient 0 at 0); the last layer is linear and
//! its output is the feature `f(x; θ) ∈ R^d`. Logits are `z = f Vᵀ`.
//!
//! Flat parameter order: for each layer in order, the weight matrix (row-major,
//! `out × in`) followed by its bias. The classifier (row-major `C × d`) is
//! appended only when it is trainable.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierMatrix;
use crate::error::{Error, Result};
use crate::numerics::{axpy, standard_normal, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec(x).expect("layer input length checked by caller");
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// Extractor layers `θ` plus the classifier `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
    classifier: ClassifierMatrix,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activation of every layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// Output of every layer after its activation; the last one is the feature.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn feature(&self) -> &[f64] {
        self.activations.last().expect("at least one layer")
    }
}

/// Parameter gradients in the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Present iff the classifier is trainable.
    pub classifier: Option<Matrix>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        if let Some(v) = &self.classifier {
            out.extend_from_slice(v.as_slice());
        }
        out
    }

    /// Adds these gradients, scaled by `alpha`, into a flat buffer.
    pub fn accumulate_into(&self, alpha: f64, flat: &mut [f64]) {
        let mut offset = 0;
        let mut push = |src: &[f64]| {
            axpy(alpha, src, &mut flat[offset..offset + src.len()]);
            offset += src.len();
        };
        for (w, b) in self.weights.iter().zip(&self.biases) {
            push(w.as_slice());
            push(b);
        }
        if let Some(v) = &self.classifier {
            push(v.as_slice());
        }
        debug_assert_eq!(offset, flat.len());
    }
}

impl ModelParams {
    /// He-initialized MLP. `layer_sizes` lists the input width followed by
    /// every layer's output width; a single entry `[d]` means one square
    /// `d → d` linear layer. The last width must equal the classifier's `d`.
    pub fn init_mlp(
        layer_sizes: &[usize],
        classifier: ClassifierMatrix,
        rng: &SeededRng,
    ) -> Result<Self> {
        let widths: Vec<usize> = match layer_sizes {
            [] => return Err(Error::Dimension("need at least one layer size".into())),
            [d] => vec![*d, *d],
            sizes => sizes.to_vec(),
        };
        if widths.contains(&0) {
            return Err(Error::Dimension("layer widths must be positive".into()));
        }
        let d = *widths.last().expect("non-empty");
        if d != classifier.dim() {
            return Err(Error::Dimension(format!(
                "feature width {d} does not match classifier dimension {}",
                classifier.dim()
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let mut stream = rng.derive("layer", l as u64).stream();
                let std = (2.0 / fan_in as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| std * standard_normal(&mut stream)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(ModelParams { layers, classifier })
    }

    /// Assembles a model from explicit layers. Shapes must chain.
    pub fn from_layers(layers: Vec<Layer>, classifier: ClassifierMatrix) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("need at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Dimension(format!("layer {l}: bias length mismatch")));
            }
            if l > 0 && layer.in_dim() != layers[l - 1].out_dim() {
                return Err(Error::Dimension(format!("layer {l}: input width does not chain")));
            }
        }
        if layers.last().map(Layer::out_dim) != Some(classifier.dim()) {
            return Err(Error::Dimension("final layer width != classifier dimension".into()));
        }
        Ok(ModelParams { layers, classifier })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classifier(&self) -> &ClassifierMatrix {
        &self.classifier
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn extractor_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Length of [`ModelParams::flatten`].
    pub fn num_params(&self) -> usize {
        let head = if self.classifier.is_frozen() {
            0
        } else {
            self.classifier.vectors().as_slice().len()
        };
        self.extractor_param_count() + head
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &activations[l - 1] };
            let pre = layer.affine(input);
            let post = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|&v| v.max(0.0)).collect()
            };
            pre_activations.push(pre);
            activations.push(post);
        }
        let logits = self.classifier.logits(&activations[last])?;
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre_activations,
            activations,
            logits,
        })
    }

    /// Feature only; skips building a trace.
    pub fn feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.affine(&h);
            if l != last {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(h)
    }

    /// Backpropagates `∂L/∂f` through the extractor. When the classifier is
    /// trainable its gradient is `∂L/∂v_c = (∂L/∂z_c) · f`, taken from `dl_dz`
    /// (zero if `None`).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        dl_df: &[f64],
        dl_dz: Option<&[f64]>,
    ) -> Result<Gradients> {
        self.check_trace(trace)?;
        if dl_df.len() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "feature gradient has length {}, expected {}",
                dl_df.len(),
                self.feature_dim()
            )));
        }
        let depth = self.layers.len();
        let mut weights = vec![Matrix::zeros(0, 0); depth];
        let mut biases = vec![Vec::new(); depth];
        // Gradient w.r.t. the current layer's pre-activation.
        let mut delta = dl_df.to_vec();
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
            weights[l] = Matrix::from_fn(layer.out_dim(), layer.in_dim(), |r, c| delta[r] * input[c]);
            biases[l] = delta.clone();
            if l > 0 {
                let mut upstream = layer.weight.t_matvec(&delta)?;
                for (u, &pre) in upstream.iter_mut().zip(&trace.pre_activations[l - 1]) {
                    if pre <= 0.0 {
                        *u = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        let classifier = if self.classifier.is_frozen() {
            None
        } else {
            let classes = self.num_classes();
            let zeros;
            let dz = match dl_dz {
                Some(g) if g.len() == classes => g,
                Some(g) => {
                    return Err(Error::Dimension(format!(
                        "logit gradient has length {}, expected {classes}",
                        g.len()
                    )))
                }
                None => {
                    zeros = vec![0.0; classes];
                    &zeros
                }
            };
            let f = trace.feature();
            Some(Matrix::from_fn(classes, self.feature_dim(), |c, j| dz[c] * f[j]))
        };
        Ok(Gradients {
            weights,
            biases,
            classifier,
        })
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let ok = trace.input.len() == self.input_dim()
            && trace.activations.len() == self.layers.len()
            && trace.pre_activations.len() == self.layers.len()
            && self
                .layers
                .iter()
                .zip(&trace.activations)
                .all(|(l, a)| a.len() == l.out_dim())
            && trace.logits.len() == self.num_classes();
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("forward trace does not match model shape".into()))
        }
    }

    /// All trainable parameters, in the documented flat order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        if !self.classifier.is_frozen() {
            out.extend_from_slice(self.classifier.vectors().as_slice());
        }
        out
    }

    /// A copy of `self` with its trainable parameters replaced by `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        let mut out = self.clone();
        out.load_flat(flat)?;
        Ok(out)
    }

    /// Overwrites the trainable parameters in place. The frozen classifier is
    /// never touched.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "flat vector has length {}, model has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("parameter {pos} is not finite")));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weight.as_mut_slice();
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        if !self.classifier.is_frozen() {
            self.classifier.set_trainable_from_slice(&flat[offset..])?;
        }
        Ok(())
    }

    /// True when both models have the same layer shapes and classifier shape.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
            && self.classifier.kind() == other.classifier.kind()
            && self.classifier.vectors().shape() == other.classifier.vectors().shape()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
            && self.classifier.vectors().is_finite()
    }
}
