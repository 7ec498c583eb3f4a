//! Three-part network: feature extractor, projection head, classifier head.
//!
//! The extractor maps an input batch to features `r` (B×feature_dim). The
//! projection head is a 3-layer MLP producing L2-normalized embeddings `z`
//! used only by the supervised contrastive loss. The classifier head is a
//! single affine map `r → logits`.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputShape {
    Vector {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn numel(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Shape of a batch of `batch` inputs.
    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            InputShape::Vector { dim } => vec![batch, dim],
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![batch, channels, height, width],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    /// Fully connected ReLU layers; `widths` are the output widths, the
    /// last of which is the feature dimension. Image inputs are flattened.
    Mlp { widths: Vec<usize> },
    /// "Same"-padded ReLU convolutions, global average pooling, then a
    /// ReLU affine layer to the feature dimension.
    TinyCnn { channels: Vec<usize>, kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub extractor: ExtractorSpec,
    pub feature_dim: usize,
    /// Output widths of the three projection layers; the last is the
    /// projection dimension.
    pub projection: [usize; 3],
    pub num_classes: usize,
}

impl NetworkSpec {
    /// `mlp [64, 32]` extractor with projection `[32, 32, 16]`.
    pub fn default_vector(dim: usize, num_classes: usize) -> Self {
        Self {
            input: InputShape::Vector { dim },
            extractor: ExtractorSpec::Mlp {
                widths: vec![64, 32],
            },
            feature_dim: 32,
            projection: [32, 32, 16],
            num_classes,
        }
    }

    /// `tiny_cnn [8, 16]`, kernel 3, feature_dim 32, projection `[32, 32, 16]`.
    pub fn default_image(channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            input: InputShape::Image {
                channels,
                height,
                width,
            },
            extractor: ExtractorSpec::TinyCnn {
                channels: vec![8, 16],
                kernel: 3,
            },
            feature_dim: 32,
            projection: [32, 32, 16],
            num_classes,
        }
    }

    pub fn projection_dim(&self) -> usize {
        self.projection[2]
    }

    pub fn validate(&self) -> Result<()> {
        let zero = |what: &str| Err(Error::invalid(format!("network: {what} must be positive")));
        if self.input.numel() == 0 {
            return zero("input size");
        }
        if self.feature_dim == 0 {
            return zero("feature_dim");
        }
        if self.num_classes == 0 {
            return zero("num_classes");
        }
        if self.projection.contains(&0) {
            return zero("projection width");
        }
        match &self.extractor {
            ExtractorSpec::Mlp { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return zero("every mlp width");
                }
                if *widths.last().expect("non-empty") != self.feature_dim {
                    return Err(Error::invalid(format!(
                        "network: last mlp width {} differs from feature_dim {}",
                        widths.last().expect("non-empty"),
                        self.feature_dim
                    )));
                }
            }
            ExtractorSpec::TinyCnn { channels, kernel } => {
                if channels.is_empty() || channels.contains(&0) {
                    return zero("every cnn channel width");
                }
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::invalid("network: cnn kernel must be odd"));
                }
                if !matches!(self.input, InputShape::Image { .. }) {
                    return Err(Error::invalid("network: tiny_cnn needs image input"));
                }
            }
        }
        Ok(())
    }

    /// Parameter tensor names and shapes, in canonical order.
    pub fn layout(&self) -> Vec<(Part, String, Vec<usize>)> {
        fn linear(
            out: &mut Vec<(Part, String, Vec<usize>)>,
            part: Part,
            prefix: &str,
            fan_in: usize,
            fan_out: usize,
        ) {
            out.push((part, format!("{prefix}.weight"), vec![fan_in, fan_out]));
            out.push((part, format!("{prefix}.bias"), vec![fan_out]));
        }
        let mut out = Vec::new();
        match &self.extractor {
            ExtractorSpec::Mlp { widths } => {
                let mut fan_in = self.input.numel();
                for (i, &w) in widths.iter().enumerate() {
                    linear(
                        &mut out,
                        Part::Extractor,
                        &format!("extractor.{i}"),
                        fan_in,
                        w,
                    );
                    fan_in = w;
                }
            }
            ExtractorSpec::TinyCnn { channels, kernel } => {
                let mut in_ch = match self.input {
                    InputShape::Image { channels, .. } => channels,
                    InputShape::Vector { .. } => 1,
                };
                for (i, &c) in channels.iter().enumerate() {
                    out.push((
                        Part::Extractor,
                        format!("extractor.conv{i}.weight"),
                        vec![c, in_ch, *kernel, *kernel],
                    ));
                    out.push((Part::Extractor, format!("extractor.conv{i}.bias"), vec![c]));
                    in_ch = c;
                }
                linear(
                    &mut out,
                    Part::Extractor,
                    "extractor.fc",
                    in_ch,
                    self.feature_dim,
                );
            }
        }
        let [p0, p1, p2] = self.projection;
        linear(
            &mut out,
            Part::Projection,
            "projection.0",
            self.feature_dim,
            p0,
        );
        linear(&mut out, Part::Projection, "projection.1", p0, p1);
        linear(&mut out, Part::Projection, "projection.2", p1, p2);
        linear(
            &mut out,
            Part::Head,
            "head",
            self.feature_dim,
            self.num_classes,
        );
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, _, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Extractor,
    Projection,
    Head,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Extractor, Part::Projection, Part::Head];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub frozen: bool,
}

impl ParamGroup {
    fn empty() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: false,
        }
    }
}

/// Parameter store for a [`NetworkSpec`], grouped by part.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    spec: NetworkSpec,
    groups: [ParamGroup; 3],
}

/// Graph handles for every parameter tensor, in layout order per part.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: [Vec<Var>; 3],
}

impl BoundParams {
    pub fn part(&self, part: Part) -> &[Var] {
        &self.vars[part as usize]
    }
}

impl NetworkParams {
    /// Kaiming-uniform weights (bound √(6/fan_in)), zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = [
            ParamGroup::empty(),
            ParamGroup::empty(),
            ParamGroup::empty(),
        ];
        for (part, name, shape) in spec.layout() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            };
            let g = &mut groups[part as usize];
            g.names.push(name);
            g.tensors.push(tensor);
        }
        Ok(Self {
            spec: spec.clone(),
            groups,
        })
    }

    /// Assemble from explicitly named tensors; every layout entry must be
    /// present with the right shape and nothing else may be.
    pub fn from_named(spec: &NetworkSpec, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let mut groups = [
            ParamGroup::empty(),
            ParamGroup::empty(),
            ParamGroup::empty(),
        ];
        for (part, name, shape) in spec.layout() {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            let (_, tensor) = named.swap_remove(pos);
            if tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: shape,
                    rhs: tensor.shape().to_vec(),
                });
            }
            let g = &mut groups[part as usize];
            g.names.push(name);
            g.tensors.push(tensor);
        }
        if let Some((name, _)) = named.first() {
            return Err(Error::invalid(format!("unexpected parameter {name}")));
        }
        Ok(Self {
            spec: spec.clone(),
            groups,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn group(&self, part: Part) -> &ParamGroup {
        &self.groups[part as usize]
    }

    pub fn group_mut(&mut self, part: Part) -> &mut ParamGroup {
        &mut self.groups[part as usize]
    }

    pub fn set_frozen(&mut self, part: Part, frozen: bool) {
        self.groups[part as usize].frozen = frozen;
    }

    pub fn is_frozen(&self, part: Part) -> bool {
        self.groups[part as usize].frozen
    }

    /// All tensors with their names, in canonical layout order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.groups
            .iter()
            .flat_map(|g| g.names.iter().map(String::as_str).zip(&g.tensors))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.groups.iter_mut().find_map(|g| {
            let i = g.names.iter().position(|n| n == name)?;
            Some(&mut g.tensors[i])
        })
    }

    pub fn num_params(&self) -> usize {
        self.named().map(|(_, t)| t.numel()).sum()
    }

    /// Place every tensor on `g`; frozen parts enter as constants.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = std::array::from_fn(|i| {
            let group = &self.groups[i];
            group
                .tensors
                .iter()
                .map(|t| {
                    if group.frozen {
                        g.constant(t.clone())
                    } else {
                        g.leaf(t.clone())
                    }
                })
                .collect()
        });
        BoundParams { vars }
    }

    fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// Extractor output `r`, B×feature_dim.
    pub fn forward_features(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let batch = *shape.first().unwrap_or(&0);
        if shape != self.spec.input.batch_shape(batch) {
            return Err(Error::ShapeMismatch {
                op: "forward_features",
                lhs: self.spec.input.batch_shape(batch),
                rhs: shape,
            });
        }
        let p = bound.part(Part::Extractor);
        match &self.spec.extractor {
            ExtractorSpec::Mlp { .. } => {
                let mut h = g.reshape(x, &[batch, self.spec.input.numel()])?;
                for layer in p.chunks(2) {
                    let a = Self::affine(g, h, layer[0], layer[1])?;
                    h = g.relu(a);
                }
                Ok(h)
            }
            ExtractorSpec::TinyCnn { kernel, .. } => {
                let mut h = x;
                let (convs, fc) = p.split_at(p.len() - 2);
                for layer in convs.chunks(2) {
                    let c = g.conv2d(h, layer[0], Some(layer[1]), kernel / 2)?;
                    h = g.relu(c);
                }
                // Global average pool as a matmul against a constant column.
                let s = g.shape(h).to_vec();
                let plane = s[2] * s[3];
                let flat = g.reshape(h, &[s[0] * s[1], plane])?;
                let avg = g.constant(Tensor::full(&[plane, 1], 1.0 / plane as f64));
                let pooled = g.matmul(flat, avg)?;
                let pooled = g.reshape(pooled, &[s[0], s[1]])?;
                let a = Self::affine(g, pooled, fc[0], fc[1])?;
                Ok(g.relu(a))
            }
        }
    }

    /// Projection head output `z`, rows L2-normalized.
    pub fn forward_projection(&self, g: &mut Graph, bound: &BoundParams, r: Var) -> Result<Var> {
        let p = bound.part(Part::Projection);
        let mut h = r;
        for (i, layer) in p.chunks(2).enumerate() {
            h = Self::affine(g, h, layer[0], layer[1])?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        g.l2_normalize(h)
    }

    pub fn forward_logits(&self, g: &mut Graph, bound: &BoundParams, r: Var) -> Result<Var> {
        let p = bound.part(Part::Head);
        Self::affine(g, r, p[0], p[1])
    }

    /// Features for a batch of inputs, outside any training graph.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let frozen = self.frozen_copy();
        let bound = frozen.bind(&mut g);
        let x = g.constant(batch.clone());
        let r = frozen.forward_features(&mut g, &bound, x)?;
        Ok(g.value(r).clone())
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let frozen = self.frozen_copy();
        let bound = frozen.bind(&mut g);
        let x = g.constant(batch.clone());
        let r = frozen.forward_features(&mut g, &bound, x)?;
        let l = frozen.forward_logits(&mut g, &bound, r)?;
        Ok(g.value(l).clone())
    }

    /// Arg-max class per row; ties go to the lower index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let k = self.spec.num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    fn frozen_copy(&self) -> Self {
        let mut c = self.clone();
        for g in &mut c.groups {
            g.frozen = true;
        }
        c
    }
}
