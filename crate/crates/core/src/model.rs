//! Shared-bottom multi-task network with hand-derived backpropagation.
//!
//! Parameters are split into the shared trunk (`theta`) and one head per
//! task (`phi[t]`). Every head ends in a single logit; losses are sigmoid
//! binary cross-entropy, mean-reduced over the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{flatten_params, DenseMatrix, NamedTensor, ParamVector, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid labels: {0}")]
    Data(String),
    #[error("forward cache does not match network or batch: {0}")]
    StaleCache(String),
    #[error("task index {task} out of range for {num_tasks} tasks")]
    TaskIndex { task: usize, num_tasks: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    // ReLU'(0) = 0
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer, `a = act(x · Wᵀ + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(ModelError::Config(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let mut pre = x.matmul_t(&self.weights)?;
        pre.add_row_vector(&self.bias)?;
        let act = self.activation;
        let post = pre.map(|z| act.apply(z));
        Ok((pre, post))
    }
}

/// Gradients of one layer, same shapes as the layer.
#[derive(Debug, Clone)]
struct LayerGrad {
    weights: DenseMatrix,
    bias: Vec<f64>,
}

/// Activations retained by [`SharedBottomNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: DenseMatrix,
    shared_pre: Vec<DenseMatrix>,
    shared_post: Vec<DenseMatrix>,
    head_pre: Vec<Vec<DenseMatrix>>,
    head_post: Vec<Vec<DenseMatrix>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }

    /// Output of the last shared layer.
    pub fn trunk_output(&self) -> &DenseMatrix {
        self.shared_post.last().unwrap_or(&self.inputs)
    }

    /// Smallest |pre-activation| over all ReLU units, i.e. the distance of
    /// this batch from the nearest kink. `None` when the net has no ReLU.
    pub fn relu_margin(&self, net: &SharedBottomNet) -> Option<f64> {
        let layers = net.shared.iter().zip(&self.shared_pre).chain(
            net.heads
                .iter()
                .zip(&self.head_pre)
                .flat_map(|(h, p)| h.iter().zip(p)),
        );
        layers
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, z)| z.data().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBottomNet {
    input_dim: usize,
    shared: Vec<DenseLayer>,
    heads: Vec<Vec<DenseLayer>>,
}

fn check_chain(input_dim: usize, layers: &[DenseLayer], what: &str) -> Result<usize> {
    let mut dim = input_dim;
    for (i, layer) in layers.iter().enumerate() {
        if layer.inputs() != dim {
            return Err(ModelError::Config(format!(
                "{what} layer {i} expects {} inputs but receives {dim}",
                layer.inputs()
            )));
        }
        if layer.outputs() == 0 {
            return Err(ModelError::Config(format!("{what} layer {i} has zero width")));
        }
        dim = layer.outputs();
    }
    Ok(dim)
}

fn layer_params(prefix: &str, layers: &[(&DenseMatrix, &[f64])]) -> Result<ParamVector> {
    let mut named = Vec::with_capacity(layers.len() * 2);
    for (i, (w, b)) in layers.iter().enumerate() {
        named.push((format!("{prefix}.{i:02}.weight"), NamedTensor::from_matrix(w)));
        named.push((format!("{prefix}.{i:02}.bias"), NamedTensor::vector(b.to_vec())));
    }
    Ok(flatten_params(named)?)
}

fn stack_params(prefix: &str, layers: &[DenseLayer]) -> Result<ParamVector> {
    let refs: Vec<_> = layers
        .iter()
        .map(|l| (&l.weights, l.bias.as_slice()))
        .collect();
    layer_params(prefix, &refs)
}

fn stack_grads(prefix: &str, grads: &[LayerGrad]) -> Result<ParamVector> {
    let refs: Vec<_> = grads
        .iter()
        .map(|g| (&g.weights, g.bias.as_slice()))
        .collect();
    layer_params(prefix, &refs)
}

fn load_stack(prefix: &str, layers: &mut [DenseLayer], params: &ParamVector) -> Result<()> {
    let expected = stack_params(prefix, layers)?;
    if expected.layout != params.layout {
        return Err(ModelError::Config(format!(
            "parameter layout does not match the `{prefix}` stack"
        )));
    }
    if let Some(index) = params.values.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { index }.into());
    }
    for (i, layer) in layers.iter_mut().enumerate() {
        let wname = format!("{prefix}.{i:02}.weight");
        let bname = format!("{prefix}.{i:02}.bias");
        for spec in &params.layout {
            let slice = &params.values[spec.offset..spec.offset + spec.numel()];
            if spec.name == wname {
                layer.weights.data_mut().copy_from_slice(slice);
            } else if spec.name == bname {
                layer.bias.copy_from_slice(slice);
            }
        }
    }
    Ok(())
}

/// Backpropagates `upstream` (gradient w.r.t. the stack's output) through a
/// layer stack. Returns per-layer grads and the gradient w.r.t. the input.
fn backprop_stack(
    layers: &[DenseLayer],
    inputs: &DenseMatrix,
    pre: &[DenseMatrix],
    post: &[DenseMatrix],
    upstream: DenseMatrix,
) -> Result<(Vec<LayerGrad>, DenseMatrix)> {
    let mut grads = Vec::with_capacity(layers.len());
    let mut grad_out = upstream;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let z = &pre[l];
        if z.rows() != grad_out.rows() || z.cols() != grad_out.cols() {
            return Err(ModelError::StaleCache(format!("layer {l} shape mismatch")));
        }
        let act = layer.activation;
        let mut delta = grad_out;
        for (d, &zv) in delta.data_mut().iter_mut().zip(z.data()) {
            *d *= act.derivative(zv);
        }
        let prev = if l == 0 { inputs } else { &post[l - 1] };
        let weights = delta.t_matmul(prev)?;
        let bias = delta.sum_rows();
        grad_out = delta.matmul(&layer.weights)?;
        grads.push(LayerGrad { weights, bias });
    }
    grads.reverse();
    Ok((grads, grad_out))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean sigmoid cross-entropy against (possibly soft) targets in `[0, 1]`.
pub fn bce_mean(logits: &[f64], targets: &[f64]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
pub fn task_loss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(TensorError::Dimension {
            expected: logits.len(),
            found: labels.len(),
        }
        .into());
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(ModelError::Data(format!(
            "label {} at row {i} is not 0/1",
            labels[i]
        )));
    }
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    Ok(bce_mean(logits, &targets))
}

pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}

fn init_layer(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, act: Activation) -> DenseLayer {
    let limit = match act {
        Activation::Relu => (6.0 / inputs as f64).sqrt(),
        Activation::Identity => (1.0 / inputs as f64).sqrt(),
    };
    let data = (0..inputs * outputs)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    DenseLayer {
        weights: DenseMatrix::new(outputs, inputs, data).expect("sizes agree"),
        bias: vec![0.0; outputs],
        activation: act,
    }
}

/// Builds a ReLU shared-bottom net. Each head gets `head_widths` hidden
/// ReLU layers followed by a one-unit identity output.
pub fn init_net(
    input_dim: usize,
    shared_widths: &[usize],
    head_widths: &[usize],
    num_tasks: usize,
    seed: u64,
) -> Result<SharedBottomNet> {
    if input_dim == 0 {
        return Err(ModelError::Config("input_dim must be positive".into()));
    }
    if shared_widths.is_empty() {
        return Err(ModelError::Config("shared trunk needs at least one layer".into()));
    }
    if num_tasks == 0 {
        return Err(ModelError::Config("num_tasks must be positive".into()));
    }
    if shared_widths.iter().chain(head_widths).any(|&w| w == 0) {
        return Err(ModelError::Config("layer widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = input_dim;
    let mut shared = Vec::with_capacity(shared_widths.len());
    for &w in shared_widths {
        shared.push(init_layer(&mut rng, dim, w, Activation::Relu));
        dim = w;
    }
    let trunk_out = dim;
    let heads = (0..num_tasks)
        .map(|_| {
            let mut d = trunk_out;
            let mut head = Vec::with_capacity(head_widths.len() + 1);
            for &w in head_widths {
                head.push(init_layer(&mut rng, d, w, Activation::Relu));
                d = w;
            }
            head.push(init_layer(&mut rng, d, 1, Activation::Identity));
            head
        })
        .collect();
    SharedBottomNet::from_layers(input_dim, shared, heads)
}

/// Network architecture and parameters in a serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub input_dim: usize,
    pub num_tasks: usize,
    pub shared_activations: Vec<Activation>,
    pub head_activations: Vec<Vec<Activation>>,
    pub theta: ParamVector,
    pub phi: Vec<ParamVector>,
}

impl SharedBottomNet {
    pub fn from_layers(
        input_dim: usize,
        shared: Vec<DenseLayer>,
        heads: Vec<Vec<DenseLayer>>,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(ModelError::Config("need at least one task head".into()));
        }
        let trunk_out = check_chain(input_dim, &shared, "shared")?;
        for (t, head) in heads.iter().enumerate() {
            let out = check_chain(trunk_out, head, &format!("head {t}"))?;
            if head.is_empty() || out != 1 {
                return Err(ModelError::Config(format!(
                    "head {t} must end in a single logit"
                )));
            }
        }
        Ok(Self {
            input_dim,
            shared,
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn shared_layers(&self) -> &[DenseLayer] {
        &self.shared
    }

    pub fn head_layers(&self, task: usize) -> &[DenseLayer] {
        &self.heads[task]
    }

    /// Width of the last shared layer.
    pub fn trunk_width(&self) -> usize {
        self.shared.last().map_or(self.input_dim, DenseLayer::outputs)
    }

    pub fn num_theta_params(&self) -> usize {
        self.shared.iter().map(DenseLayer::num_params).sum()
    }

    pub fn num_phi_params(&self, task: usize) -> usize {
        self.heads[task].iter().map(DenseLayer::num_params).sum()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task < self.num_tasks() {
            Ok(())
        } else {
            Err(ModelError::TaskIndex {
                task,
                num_tasks: self.num_tasks(),
            })
        }
    }

    pub fn theta(&self) -> ParamVector {
        stack_params("shared", &self.shared).expect("finite parameters")
    }

    pub fn phi(&self, task: usize) -> ParamVector {
        stack_params("head", &self.heads[task]).expect("finite parameters")
    }

    pub fn set_theta(&mut self, theta: &ParamVector) -> Result<()> {
        load_stack("shared", &mut self.shared, theta)
    }

    pub fn set_phi(&mut self, task: usize, phi: &ParamVector) -> Result<()> {
        self.check_task(task)?;
        load_stack("head", &mut self.heads[task], phi)
    }

    /// Returns per-task logits and the cache needed by the backward pass.
    pub fn forward(&self, features: &DenseMatrix) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        if features.cols() != self.input_dim {
            return Err(TensorError::Dimension {
                expected: self.input_dim,
                found: features.cols(),
            }
            .into());
        }
        let mut shared_pre = Vec::with_capacity(self.shared.len());
        let mut shared_post: Vec<DenseMatrix> = Vec::with_capacity(self.shared.len());
        for layer in &self.shared {
            let x = shared_post.last().unwrap_or(features);
            let (pre, post) = layer.forward(x)?;
            shared_pre.push(pre);
            shared_post.push(post);
        }
        let trunk = shared_post.last().unwrap_or(features);
        let mut head_pre = Vec::with_capacity(self.heads.len());
        let mut head_post = Vec::with_capacity(self.heads.len());
        let mut logits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut pre_h = Vec::with_capacity(head.len());
            let mut post_h: Vec<DenseMatrix> = Vec::with_capacity(head.len());
            for layer in head {
                let x = post_h.last().unwrap_or(trunk);
                let (pre, post) = layer.forward(x)?;
                pre_h.push(pre);
                post_h.push(post);
            }
            let out = post_h.last().expect("heads are non-empty");
            if !out.is_finite() {
                return Err(ModelError::Data("non-finite logits".into()));
            }
            logits.push(out.data().to_vec());
            head_pre.push(pre_h);
            head_post.push(post_h);
        }
        Ok((
            logits,
            ForwardCache {
                inputs: features.clone(),
                shared_pre,
                shared_post,
                head_pre,
                head_post,
            },
        ))
    }

    /// Activations of the last shared layer.
    pub fn trunk_activations(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        let (_, cache) = self.forward(features)?;
        Ok(cache.trunk_output().clone())
    }

    fn check_cache(&self, cache: &ForwardCache, targets: usize) -> Result<()> {
        if cache.head_pre.len() != self.num_tasks()
            || cache.shared_pre.len() != self.shared.len()
            || cache.inputs.cols() != self.input_dim
        {
            return Err(ModelError::StaleCache("layer structure differs".into()));
        }
        if cache.batch_size() != targets {
            return Err(ModelError::StaleCache(format!(
                "cache holds {} rows but {targets} targets were given",
                cache.batch_size()
            )));
        }
        Ok(())
    }

    /// Backpropagates from the head output to its input; returns head grads
    /// and the gradient w.r.t. the trunk output.
    fn backward_head(
        &self,
        cache: &ForwardCache,
        targets: &[f64],
        task: usize,
        scale: f64,
    ) -> Result<(Vec<LayerGrad>, DenseMatrix)> {
        let logits = cache.head_post[task].last().expect("non-empty head");
        let n = targets.len() as f64;
        let dlogit: Vec<f64> = logits
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| scale * (sigmoid(z) - y) / n)
            .collect();
        let upstream = DenseMatrix::new(targets.len(), 1, dlogit)?;
        backprop_stack(
            &self.heads[task],
            cache.trunk_output(),
            &cache.head_pre[task],
            &cache.head_post[task],
            upstream,
        )
    }

    /// Gradients of one task's mean loss w.r.t. the trunk and that task's
    /// head. `targets` may be soft labels in `[0, 1]`.
    pub fn backward_task(
        &self,
        cache: &ForwardCache,
        targets: &[f64],
        task: usize,
    ) -> Result<(ParamVector, ParamVector)> {
        self.check_task(task)?;
        self.check_cache(cache, targets.len())?;
        let (head_grads, trunk_grad) = self.backward_head(cache, targets, task, 1.0)?;
        let (shared_grads, _) = backprop_stack(
            &self.shared,
            &cache.inputs,
            &cache.shared_pre,
            &cache.shared_post,
            trunk_grad,
        )?;
        Ok((
            stack_grads("shared", &shared_grads)?,
            stack_grads("head", &head_grads)?,
        ))
    }

    /// Gradient of `Σ_t w_t L_t` in a single pass: head signals are summed at
    /// the trunk output before the trunk is backpropagated once.
    pub fn backward_joint(
        &self,
        cache: &ForwardCache,
        targets: &[Vec<f64>],
        weights: &[f64],
    ) -> Result<(ParamVector, Vec<ParamVector>)> {
        if targets.len() != self.num_tasks() || weights.len() != self.num_tasks() {
            return Err(TensorError::Dimension {
                expected: self.num_tasks(),
                found: targets.len().min(weights.len()),
            }
            .into());
        }
        let n = cache.batch_size();
        let mut trunk_total = DenseMatrix::zeros(n, self.trunk_width());
        let mut phi = Vec::with_capacity(self.num_tasks());
        for (task, (y, &w)) in targets.iter().zip(weights).enumerate() {
            self.check_cache(cache, y.len())?;
            let (head_grads, trunk_grad) = self.backward_head(cache, y, task, w)?;
            for (acc, v) in trunk_total.data_mut().iter_mut().zip(trunk_grad.data()) {
                *acc += v;
            }
            phi.push(stack_grads("head", &head_grads)?);
        }
        let (shared_grads, _) = backprop_stack(
            &self.shared,
            &cache.inputs,
            &cache.shared_pre,
            &cache.shared_post,
            trunk_total,
        )?;
        Ok((stack_grads("shared", &shared_grads)?, phi))
    }

    /// Mean loss of `task` with the trunk replaced by `theta`.
    pub fn task_loss_at(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
        targets: &[f64],
        task: usize,
    ) -> Result<f64> {
        self.check_task(task)?;
        let mut probe = self.clone();
        probe.set_theta(theta)?;
        let (logits, _) = probe.forward(features)?;
        Ok(bce_mean(&logits[task], targets))
    }

    /// Trunk gradient of `task` with the trunk replaced by `theta`.
    pub fn task_grad_at(
        &self,
        theta: &ParamVector,
        features: &DenseMatrix,
        targets: &[f64],
        task: usize,
    ) -> Result<ParamVector> {
        let mut probe = self.clone();
        probe.set_theta(theta)?;
        let (_, cache) = probe.forward(features)?;
        Ok(probe.backward_task(&cache, targets, task)?.0)
    }

    /// Per-task predicted probabilities.
    pub fn predict(&self, features: &DenseMatrix) -> Result<Vec<Vec<f64>>> {
        let (logits, _) = self.forward(features)?;
        Ok(logits.iter().map(|z| probabilities(z)).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            input_dim: self.input_dim,
            num_tasks: self.num_tasks(),
            shared_activations: self.shared.iter().map(|l| l.activation).collect(),
            head_activations: self
                .heads
                .iter()
                .map(|h| h.iter().map(|l| l.activation).collect())
                .collect(),
            theta: self.theta(),
            phi: (0..self.num_tasks()).map(|t| self.phi(t)).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.phi.len() != ckpt.num_tasks || ckpt.head_activations.len() != ckpt.num_tasks {
            return Err(ModelError::Config("checkpoint task count is inconsistent".into()));
        }
        let shared = stack_from_params("shared", &ckpt.theta, &ckpt.shared_activations)?;
        let heads = ckpt
            .phi
            .iter()
            .zip(&ckpt.head_activations)
            .map(|(p, acts)| stack_from_params("head", p, acts))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(ckpt.input_dim, shared, heads)
    }
}

fn stack_from_params(
    prefix: &str,
    params: &ParamVector,
    activations: &[Activation],
) -> Result<Vec<DenseLayer>> {
    params.validate_layout()?;
    let find = |name: &str| {
        params
            .layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| ModelError::Config(format!("checkpoint is missing `{name}`")))
    };
    let mut layers = Vec::with_capacity(activations.len());
    for (i, &act) in activations.iter().enumerate() {
        let w = find(&format!("{prefix}.{i:02}.weight"))?;
        let b = find(&format!("{prefix}.{i:02}.bias"))?;
        if w.shape.len() != 2 || b.shape.len() != 1 {
            return Err(ModelError::Config(format!("bad tensor rank in {prefix} layer {i}")));
        }
        let weights = DenseMatrix::new(
            w.shape[0],
            w.shape[1],
            params.values[w.offset..w.offset + w.numel()].to_vec(),
        )?;
        let bias = params.values[b.offset..b.offset + b.numel()].to_vec();
        layers.push(DenseLayer::new(weights, bias, act)?);
    }
    if layers.len() * 2 != params.layout.len() {
        return Err(ModelError::Config(format!(
            "{prefix} parameters do not match {} activations",
            activations.len()
        )));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradient;
    use rand_distr::StandardNormal;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> (DenseMatrix, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let labels = (0..2)
            .map(|_| (0..rows).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect())
            .collect();
        (DenseMatrix::new(rows, cols, data).unwrap(), labels)
    }

    /// Redraws the batch until every ReLU pre-activation is at least
    /// `margin` away from zero, so central differences never straddle a kink.
    fn kink_free_batch(
        net: &SharedBottomNet,
        rows: usize,
        cols: usize,
        seed: u64,
        margin: f64,
    ) -> (DenseMatrix, Vec<Vec<f64>>) {
        for attempt in 0..10_000u64 {
            let (x, y) = random_batch(rows, cols, seed.wrapping_mul(10_007).wrapping_add(attempt));
            let (_, cache) = net.forward(&x).unwrap();
            if cache.relu_margin(net).map_or(true, |m| m > margin) {
                return (x, y);
            }
        }
        panic!("no kink-free batch found");
    }

    fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
        a.sub(b).norm() / a.norm().max(b.norm()).max(1e-12)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_net(8, &[16, 8], &[4], 2, 7).unwrap();
        let b = init_net(8, &[16, 8], &[4], 2, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_net(8, &[16, 8], &[4], 2, 8).unwrap());
        for layer in a.shared.iter().chain(a.heads.iter().flatten()) {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn parameter_counts() {
        let net = init_net(8, &[16, 8], &[4], 2, 0).unwrap();
        assert_eq!(net.num_theta_params(), 8 * 16 + 16 + 16 * 8 + 8);
        assert_eq!(net.num_theta_params(), 280);
        assert_eq!(net.theta().len(), 280);
        assert_eq!(net.num_phi_params(0), 8 * 4 + 4 + 4 + 1);
        assert_eq!(net.phi(1).len(), 41);
    }

    #[test]
    fn init_rejects_bad_config() {
        assert!(init_net(8, &[16, 0], &[4], 2, 0).is_err());
        assert!(init_net(8, &[], &[4], 2, 0).is_err());
        assert!(init_net(0, &[4], &[], 2, 0).is_err());
        assert!(init_net(8, &[4], &[], 0, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_half() {
        let mut net = init_net(3, &[4], &[2], 2, 1).unwrap();
        net.set_theta(&net.theta().zeros_like()).unwrap();
        for t in 0..2 {
            net.set_phi(t, &net.phi(t).zeros_like()).unwrap();
        }
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        let probs = net.predict(&x).unwrap();
        for p in probs.iter().flatten() {
            assert_eq!(*p, 0.5);
        }
    }

    #[test]
    fn linear_forward_by_hand() {
        let shared = DenseLayer::new(
            DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap();
        let head = DenseLayer::new(
            DenseMatrix::new(1, 1, vec![1.0]).unwrap(),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap();
        let net = SharedBottomNet::from_layers(2, vec![shared], vec![vec![head]]).unwrap();
        let x = DenseMatrix::new(1, 2, vec![2.0, 3.0]).unwrap();
        let (logits, _) = net.forward(&x).unwrap();
        assert_eq!(logits[0], vec![5.0]);
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let net = init_net(3, &[4], &[], 1, 1).unwrap();
        let x = DenseMatrix::zeros(2, 4);
        assert!(matches!(net.forward(&x), Err(ModelError::Tensor(_))));
    }

    #[test]
    fn forward_matches_perturbation_reconstruction() {
        // logit is linear in the output bias: d logit / d b_out == 1 for each row
        let net = init_net(4, &[5], &[3], 1, 3).unwrap();
        let (x, _) = random_batch(6, 4, 1);
        let (base, _) = net.forward(&x).unwrap();
        let mut bumped = net.clone();
        let mut phi = bumped.phi(0);
        let idx = phi.layout.iter().find(|s| s.name == "head.01.bias").unwrap().offset;
        phi.values[idx] += 1e-3;
        bumped.set_phi(0, &phi).unwrap();
        let (after, _) = bumped.forward(&x).unwrap();
        for (a, b) in after[0].iter().zip(&base[0]) {
            assert!(((a - b) / 1e-3 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn task_loss_values() {
        let l = task_loss(&[0.0, 0.0, 0.0], &[1, 0, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let big = task_loss(&[20.0], &[1]).unwrap();
        assert!((big - 2.061_153_620_314_380_7e-9).abs() < 1e-20, "{big}");
        let z = [1.5, -0.3, 4.0];
        let a = task_loss(&z, &[1, 0, 0]).unwrap();
        let b = task_loss(&[-1.5, 0.3, -4.0], &[0, 1, 1]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(task_loss(&[-800.0, 800.0], &[1, 0]).unwrap().is_finite());
        assert!(matches!(task_loss(&[0.0], &[2]), Err(ModelError::Data(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10u64 {
            let net = init_net(8, &[16, 8], &[4], 2, seed).unwrap();
            let (x, labels) = kink_free_batch(&net, 16, 8, 100 + seed, 1e-2);
            let (_, cache) = net.forward(&x).unwrap();
            for task in 0..2 {
                let (g_theta, g_phi) = net.backward_task(&cache, &labels[task], task).unwrap();
                let fd_theta = finite_diff_gradient(
                    |th| net.task_loss_at(th, &x, &labels[task], task).unwrap(),
                    &net.theta(),
                    1e-3,
                )
                .unwrap();
                assert!(rel_err(&g_theta, &fd_theta) < 1e-4, "seed {seed} task {task} {}", rel_err(&g_theta, &fd_theta));
                let fd_phi = finite_diff_gradient(
                    |ph| {
                        let mut probe = net.clone();
                        probe.set_phi(task, ph).unwrap();
                        let (z, _) = probe.forward(&x).unwrap();
                        bce_mean(&z[task], &labels[task])
                    },
                    &net.phi(task),
                    1e-3,
                )
                .unwrap();
                assert!(rel_err(&g_phi, &fd_phi) < 1e-4, "seed {seed} task {task}");
            }
        }
    }

    #[test]
    fn stationary_targets_give_zero_gradient() {
        let net = init_net(4, &[6], &[3], 2, 5).unwrap();
        let (x, _) = random_batch(8, 4, 9);
        let (logits, cache) = net.forward(&x).unwrap();
        let targets = probabilities(&logits[0]);
        let (g_theta, g_phi) = net.backward_task(&cache, &targets, 0).unwrap();
        assert!(g_theta.norm_inf() < 1e-15);
        assert!(g_phi.norm_inf() < 1e-15);
    }

    #[test]
    fn other_heads_receive_no_gradient() {
        let net = init_net(4, &[6], &[3], 2, 5).unwrap();
        let (x, labels) = random_batch(8, 4, 9);
        let (_, cache) = net.forward(&x).unwrap();
        // loss of task 0 does not depend on head 1
        let fd = finite_diff_gradient(
            |ph| {
                let mut probe = net.clone();
                probe.set_phi(1, ph).unwrap();
                let (z, _) = probe.forward(&x).unwrap();
                bce_mean(&z[0], &labels[0])
            },
            &net.phi(1),
            1e-3,
        )
        .unwrap();
        assert!(fd.values.iter().all(|&v| v == 0.0));
        let (_, phis) = net
            .backward_joint(&cache, &labels, &[1.0, 0.0])
            .unwrap();
        assert!(phis[1].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_backward_equals_sum_of_task_backwards() {
        let net = init_net(5, &[7, 4], &[3], 2, 11).unwrap();
        let (x, labels) = random_batch(12, 5, 2);
        let (_, cache) = net.forward(&x).unwrap();
        let (joint, _) = net.backward_joint(&cache, &labels, &[0.3, 1.7]).unwrap();
        let mut sum = net.theta().zeros_like();
        for (t, w) in [0.3, 1.7].into_iter().enumerate() {
            sum.axpy(w, &net.backward_task(&cache, &labels[t], t).unwrap().0);
        }
        assert!(joint.sub(&sum).norm_inf() < 1e-14);
    }

    #[test]
    fn duplicated_batch_leaves_mean_loss_and_grads_unchanged() {
        let net = init_net(4, &[6, 5], &[3], 2, 4).unwrap();
        let (x, labels) = random_batch(10, 4, 3);
        let x2 = x.vstack(&x).unwrap();
        let (z1, c1) = net.forward(&x).unwrap();
        let (z2, c2) = net.forward(&x2).unwrap();
        for t in 0..2 {
            let y2: Vec<f64> = labels[t].iter().chain(&labels[t]).copied().collect();
            assert!((bce_mean(&z1[t], &labels[t]) - bce_mean(&z2[t], &y2)).abs() < 1e-12);
            let (a, b) = net.backward_task(&c1, &labels[t], t).unwrap();
            let (c, d) = net.backward_task(&c2, &y2, t).unwrap();
            assert!(a.sub(&c).norm_inf() < 1e-12);
            assert!(b.sub(&d).norm_inf() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let net = init_net(4, &[6], &[3], 2, 4).unwrap();
        let (x, labels) = random_batch(10, 4, 3);
        let (_, cache) = net.forward(&x).unwrap();
        assert!(matches!(
            net.backward_task(&cache, &labels[0][..5], 0),
            Err(ModelError::StaleCache(_))
        ));
        let other = init_net(4, &[6, 6], &[3], 2, 4).unwrap();
        assert!(other.backward_task(&cache, &labels[0], 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = init_net(4, &[6, 5], &[3], 3, 4).unwrap();
        let back = SharedBottomNet::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn set_theta_rejects_foreign_layout() {
        let mut net = init_net(4, &[6], &[3], 2, 4).unwrap();
        let wrong = ParamVector::from_values(vec![0.0; net.num_theta_params()]);
        assert!(net.set_theta(&wrong).is_err());
    }
}
