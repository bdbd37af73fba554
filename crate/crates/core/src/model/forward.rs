use super::config::{Fusion, ModelConfig, ResidualMode};
use super::params::{BlockWeights, ModelParams, ModelWeights};
use crate::error::{Error, Result};
use crate::ssm::{directional_scan, Direction, SsmDirectionParams};
use crate::tensor::{Eager, Element, Graph, Tensor, TensorOps};

/// A token matrix together with the row that holds the classification token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Element> {
    pub tokens: Tensor<T>,
    pub cls_index: usize,
}

/// Cut an `H×W` image into `P×P` patches, row-major over patches and within
/// each patch, giving `J×P²`.
pub fn patchify<T: Element>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (h, w) = image.dims2()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape(vec![h, w, patch]));
    }
    let (rows, cols) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..rows {
        for pc in 0..cols {
            for r in 0..patch {
                let start = (pr * patch + r) * w + pc * patch;
                out.extend_from_slice(&src[start..start + patch]);
            }
        }
    }
    Tensor::new(&[rows * cols, patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(patches: &Tensor<T>, height: usize, width: usize, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::InvalidShape(vec![height, width, patch]));
    }
    let cols = width / patch;
    let expect = [(height / patch) * cols, patch * patch];
    if patches.shape() != expect {
        return Err(Error::mismatch("unpatchify", patches.shape(), &expect));
    }
    let mut out = vec![T::zero(); height * width];
    for (j, p) in patches.data().chunks(patch * patch).enumerate() {
        let (pr, pc) = (j / cols, j % cols);
        for r in 0..patch {
            let start = (pr * patch + r) * width + pc * patch;
            out[start..start + patch].copy_from_slice(&p[r * patch..(r + 1) * patch]);
        }
    }
    Tensor::new(&[height, width], out)
}

fn embed_view<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    image: &Tensor<T>,
    w: &ModelWeights<O::Value>,
    config: &ModelConfig,
) -> Result<O::Value> {
    if image.shape() != [config.height, config.width] {
        return Err(Error::mismatch("view", image.shape(), &[config.height, config.width]));
    }
    let patches = ops.input(&patchify(image, config.patch)?, false);
    ops.linear(&patches, &w.patch_proj, &w.patch_bias)
}

/// Stack row ranges of `segments` with `cls` inserted before segment
/// `cls_after`, skipping empty ranges.
fn rows_with_cls<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    segments: &[(&O::Value, std::ops::Range<usize>)],
    cls: &O::Value,
    cls_after: usize,
) -> Result<O::Value> {
    let mut pieces = Vec::new();
    for (i, (v, range)) in segments.iter().enumerate() {
        if i == cls_after {
            pieces.push(None);
        }
        if !range.is_empty() {
            let idx: Vec<usize> = range.clone().collect();
            pieces.push(Some(ops.gather_rows(v, &idx)?));
        }
    }
    if cls_after >= segments.len() {
        pieces.push(None);
    }
    let refs: Vec<&O::Value> = pieces.iter().map(|p| p.as_ref().unwrap_or(cls)).collect();
    ops.concat_rows(&refs)
}

/// `[emb₁ … emb_{⌊J/2⌋}, cls, … emb_J] + pos`.
pub fn assemble_single_view_with<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    emb: &O::Value,
    cls: &O::Value,
    pos: &O::Value,
) -> Result<O::Value> {
    let (j, _) = ops.value(emb).dims2()?;
    let mid = j / 2;
    let seq = rows_with_cls(ops, &[(emb, 0..mid), (emb, mid..j)], cls, 1)?;
    ops.add(&seq, pos)
}

/// `[U₁ … U_J, cls, V₁ … V_J] + pos`.
pub fn assemble_multi_view_with<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    emb_u: &O::Value,
    emb_v: &O::Value,
    cls: &O::Value,
    pos: &O::Value,
) -> Result<O::Value> {
    let (su, sv) = (ops.value(emb_u).shape().to_vec(), ops.value(emb_v).shape().to_vec());
    if su != sv {
        return Err(Error::mismatch("assemble_multi_view", &su, &sv));
    }
    let seq = ops.concat_rows(&[emb_u, cls, emb_v])?;
    ops.add(&seq, pos)
}

fn branch<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    x: &O::Value,
    gate: &O::Value,
    params: &SsmDirectionParams<O::Value>,
    out_proj: &O::Value,
    config: &ModelConfig,
) -> Result<O::Value> {
    let conv = match params.direction {
        Direction::Forward => ops.depthwise_conv1d(x, &params.conv_kernel, &params.conv_bias)?,
        Direction::Backward => {
            let rev = ops.reverse_rows(x)?;
            let c = ops.depthwise_conv1d(&rev, &params.conv_kernel, &params.conv_bias)?;
            drop(rev);
            ops.reverse_rows(&c)?
        }
    };
    let x_prime = ops.silu(&conv)?;
    drop(conv);
    let y = directional_scan(ops, &x_prime, params, config.scan_options())?;
    drop(x_prime);
    let gated = ops.mul(&y, gate)?;
    drop(y);
    ops.matmul(&gated, out_proj)
}

/// One bidirectional block on `L×D` tokens.
pub fn block_forward<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    t_in: &O::Value,
    block: &BlockWeights<O::Value>,
    config: &ModelConfig,
) -> Result<O::Value> {
    let normed = norm(ops, t_in, &block.norm_gain, block.norm_bias.as_ref())?;
    let x = ops.matmul(&normed, &block.x_proj)?;
    let z = ops.matmul(&normed, &block.z_proj)?;
    drop(normed);
    let gate = ops.silu(&z)?;
    drop(z);
    let fwd = branch(ops, &x, &gate, &block.forward, &block.out_proj, config)?;
    let bwd = if config.bidirectional {
        Some(branch(ops, &x, &gate, &block.backward, &block.out_proj, config)?)
    } else {
        None
    };
    drop((x, gate));
    match (config.residual_mode, bwd) {
        (ResidualMode::Single, Some(bwd)) => {
            let r = ops.add(&fwd, &bwd)?;
            ops.add(&r, t_in)
        }
        (ResidualMode::LiteralPaper, Some(bwd)) => {
            let a = ops.add(&fwd, t_in)?;
            let b = ops.add(&bwd, t_in)?;
            ops.add(&a, &b)
        }
        (_, None) => ops.add(&fwd, t_in),
    }
}

/// Run the block stack and return the normalized classification token, `1×D`.
fn encode_cls<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    tokens: O::Value,
    cls_index: usize,
    w: &ModelWeights<O::Value>,
    config: &ModelConfig,
) -> Result<O::Value> {
    let mut t = tokens;
    for block in &w.blocks {
        t = block_forward(ops, &t, block, config)?;
    }
    let cls = ops.select_row(&t, cls_index)?;
    drop(t);
    norm(ops, &cls, &w.final_gain, w.final_bias.as_ref())
}

/// Layer normalization when a bias is present, RMS otherwise.
fn norm<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    x: &O::Value,
    gain: &O::Value,
    bias: Option<&O::Value>,
) -> Result<O::Value> {
    match bias {
        Some(b) => ops.layer_norm(x, gain, b),
        None => ops.rms_norm(x, gain),
    }
}

fn head<T: Element, O: TensorOps<T>>(ops: &mut O, feature: &O::Value, w: &ModelWeights<O::Value>) -> Result<O::Value> {
    let pre = ops.linear(feature, &w.head_hidden, &w.head_hidden_bias)?;
    let hidden = ops.tanh(&pre)?;
    drop(pre);
    ops.linear(&hidden, &w.head_out, &w.head_out_bias)
}

/// Pre-sigmoid logit, `1×1`. Views not used by `config.fusion` are ignored.
pub fn forward_logit<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    w: &ModelWeights<O::Value>,
    config: &ModelConfig,
    frontal: &Tensor<T>,
    lateral: &Tensor<T>,
) -> Result<O::Value> {
    let feature = match config.fusion {
        Fusion::SingleFrontal | Fusion::SingleLateral => {
            let view = if config.fusion == Fusion::SingleFrontal { frontal } else { lateral };
            let emb = embed_view(ops, view, w, config)?;
            let tokens = assemble_single_view_with(ops, &emb, &w.cls, &w.pos)?;
            drop(emb);
            encode_cls(ops, tokens, config.cls_index(), w, config)?
        }
        Fusion::InputPatchConcat => {
            let u = embed_view(ops, frontal, w, config)?;
            let v = embed_view(ops, lateral, w, config)?;
            let tokens = assemble_multi_view_with(ops, &u, &v, &w.cls, &w.pos)?;
            drop((u, v));
            encode_cls(ops, tokens, config.cls_index(), w, config)?
        }
        Fusion::ClsTokenConcat => {
            let mut cls_out = Vec::with_capacity(2);
            for view in [frontal, lateral] {
                let emb = embed_view(ops, view, w, config)?;
                let tokens = assemble_single_view_with(ops, &emb, &w.cls, &w.pos)?;
                drop(emb);
                cls_out.push(encode_cls(ops, tokens, config.cls_index(), w, config)?);
            }
            ops.concat_cols(&[&cls_out[0], &cls_out[1]])?
        }
    };
    head(ops, &feature, w)
}

/// A configuration paired with its weights.
#[derive(Clone, Debug)]
pub struct BiMamba<T: Element> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Element> BiMamba<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(BiMamba { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(BiMamba { config, params })
    }

    pub fn logit(&self, frontal: &Tensor<T>, lateral: &Tensor<T>) -> Result<T> {
        let mut ops = Eager::new();
        let w = self.params.map(|t| ops.input(t, false));
        let z = forward_logit(&mut ops, &w, &self.config, frontal, lateral)?;
        Ok(z.data()[0])
    }

    /// `p̂ = σ(logit)`
    pub fn predict(&self, frontal: &Tensor<T>, lateral: &Tensor<T>) -> Result<f64> {
        let z = self.logit(frontal, lateral)?.to_f64();
        Ok(crate::tensor::sigmoid(z))
    }

    pub fn loss(&self, frontal: &Tensor<T>, lateral: &Tensor<T>, label: bool) -> Result<T> {
        let z = self.logit(frontal, lateral)?;
        bce_loss(z, label)
    }

    /// Loss and the gradient of every parameter for one sample.
    pub fn loss_and_gradients(
        &self,
        frontal: &Tensor<T>,
        lateral: &Tensor<T>,
        label: bool,
    ) -> Result<(T, ModelParams<T>)> {
        let mut graph = Graph::new();
        let w = self.params.map(|t| graph.param(t));
        let z = forward_logit(&mut graph, &w, &self.config, frontal, lateral)?;
        let target = if label { T::one() } else { T::zero() };
        let loss = graph.bce_with_logits(&z, target)?;
        let value = graph.value(&loss).data()[0];
        graph.backward(loss)?;
        let grads = w.map(|v| {
            graph
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()).expect("existing shape"))
        });
        Ok((value, grads))
    }
}

/// `−[y·log σ(z) + (1−y)·log(1−σ(z))]` evaluated stably from the logit.
pub fn bce_loss<T: Element>(logit: T, label: bool) -> Result<T> {
    let target = if label { T::one() } else { T::zero() };
    let v = crate::tensor::bce_value(&Tensor::scalar(logit), target)?;
    Ok(v.data()[0])
}

fn eager_weights<T: Element>(ops: &mut Eager, params: &ModelParams<T>) -> ModelWeights<crate::tensor::Live<T>> {
    params.map(|t| ops.input(t, false))
}

/// Single-view token layout from `J×D` patch embeddings.
pub fn assemble_single_view<T: Element>(patch_emb: &Tensor<T>, params: &ModelParams<T>) -> Result<TokenSequence<T>> {
    let mut ops = Eager::new();
    let emb = ops.input(patch_emb, false);
    let (cls, pos) = (ops.input(&params.cls, false), ops.input(&params.pos, false));
    let tokens = assemble_single_view_with(&mut ops, &emb, &cls, &pos)?.into_tensor();
    Ok(TokenSequence {
        tokens,
        cls_index: patch_emb.dims2()?.0 / 2,
    })
}

/// Two-view token layout from `J×D` patch embeddings of each view.
pub fn assemble_multi_view<T: Element>(
    patch_emb_u: &Tensor<T>,
    patch_emb_v: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<TokenSequence<T>> {
    let mut ops = Eager::new();
    let u = ops.input(patch_emb_u, false);
    let v = ops.input(patch_emb_v, false);
    let (cls, pos) = (ops.input(&params.cls, false), ops.input(&params.pos, false));
    let tokens = assemble_multi_view_with(&mut ops, &u, &v, &cls, &pos)?.into_tensor();
    Ok(TokenSequence {
        tokens,
        cls_index: patch_emb_u.dims2()?.0,
    })
}

/// One block on plain tensors.
pub fn bimamba_block<T: Element>(
    t_in: &Tensor<T>,
    block: &BlockWeights<Tensor<T>>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut ops = Eager::new();
    let w = block.map(|t| ops.input(t, false));
    let x = ops.input(t_in, false);
    Ok(block_forward(&mut ops, &x, &w, config)?.into_tensor())
}

/// The whole block stack on a token matrix.
pub fn encode_tokens<T: Element>(tokens: &Tensor<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<Tensor<T>> {
    let mut ops = Eager::new();
    let w = eager_weights(&mut ops, params);
    let mut t = ops.input(tokens, false);
    for block in &w.blocks {
        t = block_forward(&mut ops, &t, block, config)?;
    }
    Ok(t.into_tensor())
}

/// Probability for one sample under the fusion mode in `config`.
pub fn model_forward<T: Element>(
    frontal: &Tensor<T>,
    lateral: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<f64> {
    let mut ops = Eager::new();
    let w = eager_weights(&mut ops, params);
    let z = forward_logit(&mut ops, &w, config, frontal, lateral)?;
    Ok(crate::tensor::sigmoid(z.data()[0].to_f64()))
}

/// Probability with each view encoded separately and the two cls outputs
/// concatenated.
pub fn cls_concat_forward<T: Element>(
    u_image: &Tensor<T>,
    v_image: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<f64> {
    if config.fusion != Fusion::ClsTokenConcat {
        return Err(Error::Config(format!(
            "cls concatenation needs fusion = cls_token_concat, not {}",
            config.fusion
        )));
    }
    model_forward(u_image, v_image, params, config)
}
