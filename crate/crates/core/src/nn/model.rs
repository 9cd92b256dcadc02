//! Feature extractor with a semicircle classifier head and a folded-cosine
//! regressor head.
//!
//! Parameters live as `f32` (the checkpoint precision); each forward pass
//! lifts them into `f64` graph leaves and [`Model::accumulate_grads`] copies
//! the resulting gradients back.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::angle::{reconstruct, Orientation};
use crate::error::NnError;
use crate::synth::Image;

use super::loss::argmax2;
use super::tape::{Graph, NodeId, Tensor};

/// The three trainable parts of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// Feature extractor `F`.
    Trunk,
    /// Semicircle classifier `C`.
    Classifier,
    /// Folded-cosine regressor `R`.
    Regressor,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Trunk, Component::Classifier, Component::Regressor];

    pub fn name(self) -> &'static str {
        match self {
            Component::Trunk => "F",
            Component::Classifier => "C",
            Component::Regressor => "R",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Component::Trunk => "trunk",
            Component::Classifier => "classifier",
            Component::Regressor => "regressor",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// 3×3-style convolution with "same" padding.
    Conv { in_ch: usize, out_ch: usize, kernel: usize },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Dense { inputs: usize, outputs: usize },
}

impl Layer {
    fn manifest(&self) -> String {
        match *self {
            Layer::Conv {
                in_ch,
                out_ch,
                kernel,
            } => format!("conv {in_ch} {out_ch} {kernel}"),
            Layer::Relu => "relu".into(),
            Layer::MaxPool2 => "maxpool2".into(),
            Layer::GlobalAvgPool => "gap".into(),
            Layer::Dense { inputs, outputs } => format!("dense {inputs} {outputs}"),
        }
    }

    pub(crate) fn parse(text: &str) -> Option<Layer> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let n = |i: usize| parts.get(i)?.parse::<usize>().ok();
        match parts.first()? {
            &"conv" if parts.len() == 4 => Some(Layer::Conv {
                in_ch: n(1)?,
                out_ch: n(2)?,
                kernel: n(3)?,
            }),
            &"relu" if parts.len() == 1 => Some(Layer::Relu),
            &"maxpool2" if parts.len() == 1 => Some(Layer::MaxPool2),
            &"gap" if parts.len() == 1 => Some(Layer::GlobalAvgPool),
            &"dense" if parts.len() == 3 => Some(Layer::Dense {
                inputs: n(1)?,
                outputs: n(2)?,
            }),
            _ => None,
        }
    }
}

/// Architecture: trunk layers feeding a 2-logit classifier and a
/// tanh-bounded scalar regressor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_side: usize,
    pub trunk: Vec<Layer>,
}

impl ModelSpec {
    /// Two conv blocks (8 and 16 channels) with 2× max pooling, global
    /// average pooling and a 32-unit dense layer.
    pub fn desk(input_side: usize) -> Self {
        Self {
            input_side,
            trunk: vec![
                Layer::Conv { in_ch: 1, out_ch: 8, kernel: 3 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv { in_ch: 8, out_ch: 16, kernel: 3 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::GlobalAvgPool,
                Layer::Dense { inputs: 16, outputs: 32 },
                Layer::Relu,
            ],
        }
    }

    /// Width of the feature vector shared by both heads.
    pub fn feature_width(&self) -> Result<usize, NnError> {
        let mut channels = 1usize;
        let mut side = self.input_side;
        let mut flat: Option<usize> = None;
        for layer in &self.trunk {
            match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                } => {
                    if flat.is_some() || in_ch != channels || kernel % 2 == 0 || kernel == 0 {
                        return Err(NnError::Shape(format!("conv layer {layer:?} does not fit")));
                    }
                    channels = out_ch;
                }
                Layer::Relu => {}
                Layer::MaxPool2 => {
                    if flat.is_some() || side % 2 != 0 {
                        return Err(NnError::Shape(format!("cannot pool side {side}")));
                    }
                    side /= 2;
                }
                Layer::GlobalAvgPool => {
                    if flat.is_some() {
                        return Err(NnError::Shape("pooling a flat feature".into()));
                    }
                    flat = Some(channels);
                }
                Layer::Dense { inputs, outputs } => {
                    if flat != Some(inputs) {
                        return Err(NnError::Shape(format!("dense layer {layer:?} does not fit")));
                    }
                    flat = Some(outputs);
                }
            }
        }
        flat.ok_or_else(|| NnError::Shape("trunk never flattens its features".into()))
    }

    pub(crate) fn layer_manifest(&self) -> Vec<String> {
        self.trunk.iter().map(Layer::manifest).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub component: Component,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub grad: Vec<f64>,
    fan_in: usize,
    relu_follows: bool,
}

impl Parameter {
    fn new(name: String, component: Component, shape: Vec<usize>, fan_in: usize, relu_follows: bool) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            component,
            shape,
            values: vec![0.0; n],
            grad: vec![0.0; n],
            fan_in,
            relu_follows,
        }
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }

    fn tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&v| f64::from(v)).collect();
        Tensor::new(self.shape.clone(), data).expect("parameter shape")
    }
}

/// Per-component training switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeMask {
    pub train_f: bool,
    pub train_c: bool,
    pub train_r: bool,
}

impl FreezeMask {
    pub const ALL: FreezeMask = FreezeMask {
        train_f: true,
        train_c: true,
        train_r: true,
    };

    pub fn trains(&self, component: Component) -> bool {
        match component {
            Component::Trunk => self.train_f,
            Component::Classifier => self.train_c,
            Component::Regressor => self.train_r,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.train_f || self.train_c || self.train_r)
    }

    pub fn frozen(&self) -> impl Iterator<Item = Component> + '_ {
        Component::ALL.into_iter().filter(|&c| !self.trains(c))
    }
}

/// Parameter leaves of one model inside a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// `[N, 2]` semicircle logits; index 0 is `ε = 1`.
    pub logits: NodeId,
    /// `[N, 1]` predicted `cos φ`, strictly inside `(-1, 1)`.
    pub cos_pred: NodeId,
    /// `[N, feature_width]` trunk output shared by both heads.
    pub features: NodeId,
}

/// Raw head outputs for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub logits: [f64; 2],
    pub cos_pred: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub orientation: Orientation,
    pub class_index: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Parameter>,
}

impl Model {
    /// All-zero parameters.
    pub fn zeros(spec: ModelSpec) -> Result<Self, NnError> {
        let width = spec.feature_width()?;
        let mut params = Vec::new();
        for (i, layer) in spec.trunk.iter().enumerate() {
            let relu_follows = matches!(spec.trunk.get(i + 1), Some(Layer::Relu));
            match *layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                } => {
                    let fan_in = in_ch * kernel * kernel;
                    params.push(Parameter::new(
                        format!("trunk.{i}.weight"),
                        Component::Trunk,
                        vec![out_ch, in_ch, kernel, kernel],
                        fan_in,
                        relu_follows,
                    ));
                    params.push(Parameter::new(format!("trunk.{i}.bias"), Component::Trunk, vec![out_ch], fan_in, relu_follows));
                }
                Layer::Dense { inputs, outputs } => {
                    params.push(Parameter::new(
                        format!("trunk.{i}.weight"),
                        Component::Trunk,
                        vec![outputs, inputs],
                        inputs,
                        relu_follows,
                    ));
                    params.push(Parameter::new(format!("trunk.{i}.bias"), Component::Trunk, vec![outputs], inputs, relu_follows));
                }
                _ => {}
            }
        }
        for (component, outputs) in [(Component::Classifier, 2), (Component::Regressor, 1)] {
            let p = component.prefix();
            params.push(Parameter::new(format!("{p}.weight"), component, vec![outputs, width], width, false));
            params.push(Parameter::new(format!("{p}.bias"), component, vec![outputs], width, false));
        }
        Ok(Self { spec, params })
    }

    /// Seeded fan-in-scaled uniform weights, zero biases.
    ///
    /// Weights feeding a ReLU draw from `U(±√(6/fan_in))`, head weights from
    /// `U(±√(3/fan_in))`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        let mut model = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut model.params {
            if p.is_bias() {
                continue;
            }
            let gain = if p.relu_follows { 6.0 } else { 3.0 };
            let bound = (gain / p.fan_in as f64).sqrt();
            for v in &mut p.values {
                *v = rng.gen_range(-bound..bound) as f32;
            }
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_side(&self) -> usize {
        self.spec.input_side
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Concatenated parameter bits of one component, for digests.
    pub fn component_bytes(&self, component: Component) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .flat_map(|p| p.values.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds every parameter leaf to `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            nodes: self.params.iter().map(|p| graph.leaf(p.tensor(), true)).collect(),
        }
    }

    /// Adds `graph`'s parameter gradients to the model's gradient buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &BoundParams) {
        for (p, &id) in self.params.iter_mut().zip(&bound.nodes) {
            for (acc, g) in p.grad.iter_mut().zip(graph.grad(id)) {
                *acc += g;
            }
        }
    }

    /// Stacks images into `[N,1,S,S]`, each standardized with [`standardize`].
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor, NnError> {
        let side = self.spec.input_side;
        if images.is_empty() {
            return Err(NnError::Shape("empty image batch".into()));
        }
        let mut data = Vec::with_capacity(images.len() * side * side);
        for img in images {
            if img.side() != side {
                return Err(NnError::Shape(format!(
                    "image side {} does not match model input side {side}",
                    img.side()
                )));
            }
            data.extend(standardize(img.pixels()));
        }
        Tensor::new(vec![images.len(), 1, side, side], data)
    }

    /// Builds `C(F(x))` and `R(F(x))` for a batch on `graph`.
    pub fn forward_on(&self, graph: &mut Graph, bound: &BoundParams, images: &[&Image]) -> Result<ModelOutput, NnError> {
        let input = self.batch_tensor(images)?;
        let mut x = graph.leaf(input, false);
        let mut next_param = 0;
        for layer in &self.spec.trunk {
            x = match *layer {
                Layer::Conv { kernel, .. } => {
                    let (w, b) = (bound.nodes[next_param], bound.nodes[next_param + 1]);
                    next_param += 2;
                    graph.conv2d(x, w, b, kernel / 2)?
                }
                Layer::Dense { .. } => {
                    let (w, b) = (bound.nodes[next_param], bound.nodes[next_param + 1]);
                    next_param += 2;
                    graph.linear(x, w, b)?
                }
                Layer::Relu => graph.relu(x),
                Layer::MaxPool2 => graph.max_pool2(x)?,
                Layer::GlobalAvgPool => graph.global_avg_pool(x)?,
            };
        }
        let features = x;
        let logits = graph.linear(features, bound.nodes[next_param], bound.nodes[next_param + 1])?;
        let raw = graph.linear(features, bound.nodes[next_param + 2], bound.nodes[next_param + 3])?;
        let cos_pred = graph.tanh(raw);
        Ok(ModelOutput {
            logits,
            cos_pred,
            features,
        })
    }

    /// Fresh graph holding one forward pass.
    pub fn forward(&self, images: &[&Image]) -> Result<(Graph, BoundParams, ModelOutput), NnError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let out = self.forward_on(&mut graph, &bound, images)?;
        Ok((graph, bound, out))
    }

    /// Head outputs without gradient bookkeeping.
    pub fn infer(&self, images: &[&Image]) -> Result<Vec<HeadOutput>, NnError> {
        let mut graph = Graph::new();
        let bound = BoundParams {
            nodes: self.params.iter().map(|p| graph.leaf(p.tensor(), false)).collect(),
        };
        let out = self.forward_on(&mut graph, &bound, images)?;
        let logits = graph.value(out.logits).data();
        let cos = graph.value(out.cos_pred).data();
        Ok(logits
            .chunks(2)
            .zip(cos)
            .map(|(l, &c)| HeadOutput {
                logits: [l[0], l[1]],
                cos_pred: c,
            })
            .collect())
    }

    pub fn predict_orientation(&self, image: &Image) -> Result<Prediction, NnError> {
        Ok(predict_from_heads(&self.infer(&[image])?[0]))
    }

    /// Predictions for many images, evaluated in chunks.
    pub fn predict_many(&self, images: &[&Image], chunk: usize) -> Result<Vec<Prediction>, NnError> {
        let mut out = Vec::with_capacity(images.len());
        for batch in images.chunks(chunk.max(1)) {
            out.extend(self.infer(batch)?.iter().map(predict_from_heads));
        }
        Ok(out)
    }
}

/// Per-image standardization: zero mean and unit variance. A constant image
/// maps to all zeros.
pub fn standardize(pixels: &[f32]) -> impl Iterator<Item = f64> + '_ {
    let n = pixels.len().max(1) as f64;
    let mean = pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
    let var = pixels.iter().map(|&p| (f64::from(p) - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { var.sqrt().recip() } else { 0.0 };
    pixels.iter().map(move |&p| (f64::from(p) - mean) * scale)
}

/// Joins the two heads: logit argmax picks the class index (index 0 → 1),
/// `arccos` of the clamped regressor output gives the folded angle.
pub fn predict_from_heads(out: &HeadOutput) -> Prediction {
    let class_index = argmax2(&out.logits) as u8 + 1;
    let folded = out.cos_pred.clamp(-1.0, 1.0).acos();
    Prediction {
        orientation: reconstruct(class_index, folded).expect("arccos lies in [0, π]"),
        class_index,
    }
}

/// `param ← param − lr·grad` on every trained component, then zeroes all
/// gradients. Frozen parameters are not touched.
pub fn sgd_step(model: &mut Model, freeze: FreezeMask, learning_rate: f64) -> Result<(), NnError> {
    if freeze.is_empty() {
        return Err(NnError::EmptyFreezeMask);
    }
    if let Some(bad) = model.params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(NnError::NonFiniteGradient(bad.name.clone()));
    }
    for p in &mut model.params {
        if freeze.trains(p.component) {
            sgd_update(&mut p.values, &p.grad, learning_rate);
        }
    }
    model.zero_grads();
    Ok(())
}

/// Single descent update on `f32` storage, computed in `f64`.
pub fn sgd_update(values: &mut [f32], grads: &[f64], learning_rate: f64) {
    for (v, g) in values.iter_mut().zip(grads) {
        *v = (f64::from(*v) - learning_rate * g) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angle::wrap;
    use crate::synth::{generate, GeneratorSpec};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn images(n: usize) -> Vec<Image> {
        generate(&GeneratorSpec {
            count: n,
            ..GeneratorSpec::default()
        })
        .unwrap()
        .samples
        .into_iter()
        .map(|s| s.image)
        .collect()
    }

    #[test]
    fn zero_heads_output_their_biases() {
        let mut m = Model::new(ModelSpec::desk(32), 1).unwrap();
        for name in ["classifier.weight", "regressor.weight"] {
            m.param_mut(name).unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        }
        m.param_mut("classifier.bias").unwrap().values = vec![0.25, -0.5];
        m.param_mut("regressor.bias").unwrap().values = vec![0.75];
        let imgs = images(3);
        let refs: Vec<&Image> = imgs.iter().collect();
        for out in m.infer(&refs).unwrap() {
            assert_eq!(out.logits, [0.25, -0.5]);
            assert_eq!(out.cos_pred, 0.75f64.tanh());
        }
    }

    #[test]
    fn outputs_have_batch_leading_dimension_and_bounded_regression() {
        let m = Model::new(ModelSpec::desk(32), 2).unwrap();
        let imgs = images(5);
        let refs: Vec<&Image> = imgs.iter().collect();
        let (g, _, out) = m.forward(&refs).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[5, 2]);
        assert_eq!(g.value(out.cos_pred).shape(), &[5, 1]);
        assert_eq!(g.value(out.features).shape(), &[5, 32]);
        assert!(g.value(out.cos_pred).data().iter().all(|c| c.abs() < 1.0));
    }

    #[test]
    fn side_mismatch_is_a_contract_error() {
        let m = Model::new(ModelSpec::desk(32), 2).unwrap();
        let img = Image::new(16, vec![0.0; 256]).unwrap();
        assert!(matches!(m.infer(&[&img]), Err(NnError::Shape(_))));
    }

    #[test]
    fn prediction_examples() {
        let p = predict_from_heads(&HeadOutput {
            logits: [5.0, -5.0],
            cos_pred: 0.0,
        });
        assert_eq!(p.class_index, 1);
        assert!((p.orientation.radians() - FRAC_PI_2).abs() < 1e-15);

        let p = predict_from_heads(&HeadOutput {
            logits: [-5.0, 5.0],
            cos_pred: -(2f64.sqrt()) / 2.0,
        });
        assert_eq!(p.class_index, 2);
        assert!((p.orientation.radians() + FRAC_PI_4).abs() < 1e-12);

        let p = predict_from_heads(&HeadOutput {
            logits: [1.0, 0.0],
            cos_pred: 1.0 + 1e-9,
        });
        assert_eq!(p.orientation.radians(), 0.0);
        let _ = wrap(p.orientation.radians()).unwrap();
    }

    #[test]
    fn sgd_examples() {
        let mut w = [1.0f32];
        sgd_update(&mut w, &[2.0], 0.1);
        assert_eq!(w[0], 0.8f32);

        let mut m = Model::new(ModelSpec::desk(32), 3).unwrap();
        let before = m.clone();
        m.params_mut().iter_mut().for_each(|p| p.grad.iter_mut().for_each(|g| *g = 0.5));
        sgd_step(&mut m, FreezeMask::ALL, 0.0).unwrap();
        assert_eq!(m, before);

        m.params_mut().iter_mut().for_each(|p| p.grad.iter_mut().for_each(|g| *g = 0.5));
        let only_c = FreezeMask {
            train_f: false,
            train_c: true,
            train_r: false,
        };
        sgd_step(&mut m, only_c, 0.1).unwrap();
        for c in [Component::Trunk, Component::Regressor] {
            assert_eq!(m.component_bytes(c), before.component_bytes(c));
        }
        assert_ne!(m.component_bytes(Component::Classifier), before.component_bytes(Component::Classifier));
        assert!(m.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        let mut m = Model::new(ModelSpec::desk(32), 3).unwrap();
        let none = FreezeMask {
            train_f: false,
            train_c: false,
            train_r: false,
        };
        assert!(matches!(sgd_step(&mut m, none, 0.1), Err(NnError::EmptyFreezeMask)));
        m.param_mut("trunk.3.weight").unwrap().grad[0] = f64::NAN;
        match sgd_step(&mut m, FreezeMask::ALL, 0.1) {
            Err(NnError::NonFiniteGradient(name)) => assert_eq!(name, "trunk.3.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_backward_is_bit_reproducible() {
        let m = Model::new(ModelSpec::desk(32), 4).unwrap();
        let imgs = images(4);
        let refs: Vec<&Image> = imgs.iter().collect();
        let run = || {
            let mut m = m.clone();
            let (mut g, bound, out) = m.forward(&refs).unwrap();
            let loss = crate::nn::loss::loss_ce(&mut g, out.logits, &[0, 1, 1, 0]).unwrap();
            g.backward(loss).unwrap();
            m.accumulate_grads(&g, &bound);
            m
        };
        assert_eq!(run(), run());
    }
}
