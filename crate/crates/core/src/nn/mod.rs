//! Hard-parameter-sharing networks: one shared encoder `F` and one decoder
//! head per task.

mod arch;
mod checkpoint;

pub use arch::{ArchName, ArchSpec, ConvBlock};

use crate::error::{Error, Result};
use crate::rng::{derive, rng};
use crate::{Graph, Tensor, Var};

/// Shared encoder parameters plus one parameter list per task head.
/// Head 0 is the main task.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub class_counts: Vec<usize>,
    /// Conv weights `[F, C, k, k]` and biases `[F]`, then dense `[in, out]`
    /// weights and `[out]` biases, in layer order.
    pub shared: Vec<Tensor>,
    /// Per head: hidden dense layers, then the output layer.
    pub decoders: Vec<Vec<Tensor>>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, r: &mut crate::rng::Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, r)
}

/// Parameter shapes of the shared encoder.
pub fn shared_shapes(arch: &ArchSpec) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::new();
    let conv = arch.conv_shapes()?;
    for (b, input) in arch.conv.iter().zip(&conv) {
        shapes.push(vec![b.filters, input[0], b.kernel, b.kernel]);
        shapes.push(vec![b.filters]);
    }
    let [c, h, w] = *conv.last().expect("input shape present");
    let mut width = c * h * w;
    for &out in &arch.encoder_dense {
        shapes.push(vec![width, out]);
        shapes.push(vec![out]);
        width = out;
    }
    Ok(shapes)
}

/// Parameter shapes of one decoder head with `classes` outputs.
pub fn decoder_shapes(arch: &ArchSpec, classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::new();
    let mut width = arch.feature_dim()?;
    for &out in arch.decoder_hidden.iter().chain(std::iter::once(&classes)) {
        shapes.push(vec![width, out]);
        shapes.push(vec![out]);
        width = out;
    }
    Ok(shapes)
}

/// Glorot-uniform weights and zero biases from a dedicated stream.
pub(crate) fn init(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    shapes
        .iter()
        .map(|s| match s.len() {
            1 => Tensor::zeros(s),
            2 => glorot(s, s[0], s[1], &mut r),
            _ => {
                let field: usize = s[2..].iter().product();
                glorot(s, s[1] * field, s[0] * field, &mut r)
            }
        })
        .collect()
}

impl ModelParams {
    /// Fresh parameters. The encoder and each head draw from separate seed
    /// streams, so head `t` is initialized identically whatever the number of
    /// other heads.
    pub fn build(arch: ArchSpec, class_counts: &[usize], seed: u64) -> Result<Self> {
        arch.validate()?;
        if class_counts.is_empty() {
            return Err(Error::Parameter("a model needs at least the main task".into()));
        }
        if let Some(&c) = class_counts.iter().find(|&&c| c < 2) {
            return Err(Error::Parameter(format!("task with {c} classes")));
        }
        let shared = init(&shared_shapes(&arch)?, derive(seed, 0));
        let decoders = class_counts
            .iter()
            .enumerate()
            .map(|(t, &c)| Ok(init(&decoder_shapes(&arch, c)?, derive(seed, 1 + t as u64))))
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            arch,
            class_counts: class_counts.to_vec(),
            shared,
            decoders,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.decoders.len()
    }

    pub fn param_count(&self) -> usize {
        self.shared
            .iter()
            .chain(self.decoders.iter().flatten())
            .map(Tensor::numel)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.shared
            .iter()
            .chain(self.decoders.iter().flatten())
            .all(Tensor::is_finite)
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t >= self.decoders.len() {
            return Err(Error::Index(format!("task {t} of {}", self.decoders.len())));
        }
        Ok(())
    }

    /// Logits of head `t` for a `[N, C, H, W]` batch.
    pub fn forward(&self, t: usize, x: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
        self.check_task(t)?;
        let mut g = Graph::new();
        let shared: Vec<Var> = self.shared.iter().map(|p| g.constant(p.clone())).collect();
        let head: Vec<Var> = self.decoders[t].iter().map(|p| g.constant(p.clone())).collect();
        let xv = g.constant(x.clone());
        let h = encode(&mut g, &self.arch, &shared, xv, training, seed)?;
        let y = decode(&mut g, &head, h)?;
        Ok(g.value(y).clone())
    }

    /// Flattened eval-mode encoder output `[N, feature_dim]`.
    pub fn shared_output(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let shared: Vec<Var> = self.shared.iter().map(|p| g.constant(p.clone())).collect();
        let xv = g.constant(x.clone());
        let h = encode(&mut g, &self.arch, &shared, xv, false, 0)?;
        Ok(g.value(h).clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, checkpoint::encode(self))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        checkpoint::decode(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }
}

/// Shared encoder on the graph: returns `[N, feature_dim]`. Dropout masks in
/// block `i` are drawn from `derive(seed, i)`.
pub fn encode(
    g: &mut Graph,
    arch: &ArchSpec,
    shared: &[Var],
    x: Var,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let [c, h, w] = arch.input_shape;
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || xs[1..] != [c, h, w] {
        return Err(Error::Shape(format!(
            "input {xs:?} does not match [N, {c}, {h}, {w}]"
        )));
    }
    let mut params = shared.iter().copied();
    let mut next = || params.next().ok_or_else(|| Error::Parameter("too few encoder parameters".into()));
    let mut y = x;
    for (i, b) in arch.conv.iter().enumerate() {
        let (wv, bv) = (next()?, next()?);
        y = g.conv2d(y, wv, 1, b.padding)?;
        y = g.add_bias(y, bv)?;
        y = g.relu(y);
        if b.pool > 0 {
            y = g.maxpool2d(y, b.pool, b.pool)?;
        }
        if b.dropout > 0.0 {
            y = g.dropout(y, b.dropout, training, derive(seed, i as u64))?;
        }
    }
    y = g.flatten(y)?;
    for _ in &arch.encoder_dense {
        let (wv, bv) = (next()?, next()?);
        y = g.dense(y, wv, bv)?;
        y = g.relu(y);
    }
    Ok(y)
}

/// One decoder head on the graph: relu hidden layers, then linear logits.
pub fn decode(g: &mut Graph, head: &[Var], h: Var) -> Result<Var> {
    if head.is_empty() || !head.len().is_multiple_of(2) {
        return Err(Error::Parameter(format!("decoder with {} tensors", head.len())));
    }
    let layers = head.len() / 2;
    let mut y = h;
    for l in 0..layers {
        y = g.dense(y, head[2 * l], head[2 * l + 1])?;
        if l + 1 < layers {
            y = g.relu(y);
        }
    }
    Ok(y)
}

/// Mean cross-entropy of head `head` on a labelled batch.
#[allow(clippy::too_many_arguments)]
pub fn task_loss(
    g: &mut Graph,
    arch: &ArchSpec,
    shared: &[Var],
    head: &[Var],
    x: &Tensor,
    labels: &[usize],
    training: bool,
    seed: u64,
) -> Result<Var> {
    let xv = g.constant(x.clone());
    let h = encode(g, arch, shared, xv, training, seed)?;
    let logits = decode(g, head, h)?;
    g.softmax_cross_entropy(logits, labels)
}
