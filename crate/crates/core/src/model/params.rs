use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Norm};
use crate::error::{Error, Result};
use crate::ssm::{Direction, SsmDirectionParams};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct BlockWeights<P> {
    pub norm_gain: P,
    /// Present only under layer normalization.
    pub norm_bias: Option<P>,
    /// `D×E`, shared by both directions.
    pub x_proj: P,
    /// `D×E`, shared by both directions.
    pub z_proj: P,
    pub forward: SsmDirectionParams<P>,
    pub backward: SsmDirectionParams<P>,
    /// `E×D`, shared by both directions.
    pub out_proj: P,
}

impl<P> BlockWeights<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> BlockWeights<Q> {
        BlockWeights {
            norm_gain: f(&self.norm_gain),
            norm_bias: self.norm_bias.as_ref().map(&mut f),
            x_proj: f(&self.x_proj),
            z_proj: f(&self.z_proj),
            forward: self.forward.map(&mut f),
            backward: self.backward.map(&mut f),
            out_proj: f(&self.out_proj),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.norm_gain"), &self.norm_gain);
        if let Some(b) = &self.norm_bias {
            f(format!("{prefix}.norm_bias"), b);
        }
        f(format!("{prefix}.x_proj"), &self.x_proj);
        f(format!("{prefix}.z_proj"), &self.z_proj);
        self.forward.visit(|n, p| f(format!("{prefix}.forward.{n}"), p));
        self.backward.visit(|n, p| f(format!("{prefix}.backward.{n}"), p));
        f(format!("{prefix}.out_proj"), &self.out_proj);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.norm_gain"), &mut self.norm_gain);
        if let Some(b) = &mut self.norm_bias {
            f(format!("{prefix}.norm_bias"), b);
        }
        f(format!("{prefix}.x_proj"), &mut self.x_proj);
        f(format!("{prefix}.z_proj"), &mut self.z_proj);
        self.forward.visit_mut(|n, p| f(format!("{prefix}.forward.{n}"), p));
        self.backward.visit_mut(|n, p| f(format!("{prefix}.backward.{n}"), p));
        f(format!("{prefix}.out_proj"), &mut self.out_proj);
    }
}

/// Every learnable tensor of the classifier, generic over the handle type.
#[derive(Clone, Debug)]
pub struct ModelWeights<P> {
    /// `P²×D`
    pub patch_proj: P,
    pub patch_bias: P,
    /// `1×D`
    pub cls: P,
    /// `L_seq×D`
    pub pos: P,
    pub blocks: Vec<BlockWeights<P>>,
    pub final_gain: P,
    pub final_bias: Option<P>,
    /// `D_head×D`
    pub head_hidden: P,
    pub head_hidden_bias: P,
    /// `D×1`
    pub head_out: P,
    pub head_out_bias: P,
}

pub type ModelParams<T> = ModelWeights<Tensor<T>>;

impl<P> ModelWeights<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelWeights<Q> {
        ModelWeights {
            patch_proj: f(&self.patch_proj),
            patch_bias: f(&self.patch_bias),
            cls: f(&self.cls),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            final_gain: f(&self.final_gain),
            final_bias: self.final_bias.as_ref().map(&mut f),
            head_hidden: f(&self.head_hidden),
            head_hidden_bias: f(&self.head_hidden_bias),
            head_out: f(&self.head_out),
            head_out_bias: f(&self.head_out_bias),
        }
    }

    /// Visit every parameter with a stable dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a P)) {
        f("patch_proj".into(), &self.patch_proj);
        f("patch_bias".into(), &self.patch_bias);
        f("cls".into(), &self.cls);
        f("pos".into(), &self.pos);
        for (m, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("blocks.{m}"), &mut f);
        }
        f("final_gain".into(), &self.final_gain);
        if let Some(b) = &self.final_bias {
            f("final_bias".into(), b);
        }
        f("head_hidden".into(), &self.head_hidden);
        f("head_hidden_bias".into(), &self.head_hidden_bias);
        f("head_out".into(), &self.head_out);
        f("head_out_bias".into(), &self.head_out_bias);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut P)) {
        f("patch_proj".into(), &mut self.patch_proj);
        f("patch_bias".into(), &mut self.patch_bias);
        f("cls".into(), &mut self.cls);
        f("pos".into(), &mut self.pos);
        for (m, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("blocks.{m}"), &mut f);
        }
        f("final_gain".into(), &mut self.final_gain);
        if let Some(b) = &mut self.final_bias {
            f("final_bias".into(), b);
        }
        f("head_hidden".into(), &mut self.head_hidden);
        f("head_hidden_bias".into(), &mut self.head_hidden_bias);
        f("head_out".into(), &mut self.head_out);
        f("head_out_bias".into(), &mut self.head_out_bias);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }

    /// Combine two weight sets of identical layout entry by entry.
    pub fn zip_mut<Q>(&mut self, other: &ModelWeights<Q>, mut f: impl FnMut(&str, &mut P, &Q)) {
        let mut rhs = Vec::new();
        other.visit(|_, q| rhs.push(q));
        let mut it = rhs.into_iter();
        self.visit_mut(|name, p| {
            let q = it.next().expect("weight layouts differ");
            f(&name, p, q)
        });
    }
}

/// Norm gains, biases, and the cls and positional embeddings are kept out of
/// weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("gain") || name.ends_with("bias") || name == "cls" || name == "pos")
}

impl<T: Element> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, p2) = (config.dim, config.expand, config.patch * config.patch);
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::sample_uniform(shape, -bound, bound, rng)
        };
        let bias = || -> Result<Option<Tensor<T>>> {
            match config.norm {
                Norm::Rms => Ok(None),
                Norm::Layer => Ok(Some(Tensor::zeros(&[d])?)),
            }
        };
        let patch_proj = uniform(&[p2, d], p2, &mut rng)?;
        let patch_bias = Tensor::zeros(&[d])?;
        let cls = Tensor::sample_normal(&[1, d], 0.0, 0.02, &mut rng)?;
        let pos = Tensor::sample_normal(&[config.sequence_length(), d], 0.0, 0.02, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let x_proj = uniform(&[d, e], d, &mut rng)?;
            let z_proj = uniform(&[d, e], d, &mut rng)?;
            let direction = |dir, rng: &mut ChaCha8Rng| {
                SsmDirectionParams::init(dir, e, config.state, config.delta_rank, config.conv_width, rng)
            };
            let forward = direction(Direction::Forward, &mut rng)?;
            let backward = direction(Direction::Backward, &mut rng)?;
            let out_proj = uniform(&[e, d], e, &mut rng)?;
            blocks.push(BlockWeights {
                norm_gain: Tensor::ones(&[d])?,
                norm_bias: bias()?,
                x_proj,
                z_proj,
                forward,
                backward,
                out_proj,
            });
        }
        let hin = config.head_input_dim();
        Ok(ModelWeights {
            patch_proj,
            patch_bias,
            cls,
            pos,
            blocks,
            final_gain: Tensor::ones(&[d])?,
            final_bias: bias()?,
            head_hidden: uniform(&[hin, d], hin, &mut rng)?,
            head_hidden_bias: Tensor::zeros(&[d])?,
            head_out: uniform(&[d, 1], d, &mut rng)?,
            head_out_bias: Tensor::zeros(&[1])?,
        })
    }

    /// Shapes every parameter must have under `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::<T>::init_shapes(config);
        let mut actual = Vec::new();
        self.visit(|name, t| actual.push((name, t.shape().to_vec())));
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, as_)) in expected.iter().zip(&actual) {
            if en != an || es != as_ {
                return Err(Error::Config(format!(
                    "parameter {an} has shape {as_:?}, expected {en} with shape {es:?}"
                )));
            }
        }
        Ok(())
    }

    fn init_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, e, n, r, k) = (config.dim, config.expand, config.state, config.delta_rank, config.conv_width);
        let layer = config.norm == Norm::Layer;
        let mut out = vec![
            ("patch_proj".to_string(), vec![config.patch * config.patch, d]),
            ("patch_bias".to_string(), vec![d]),
            ("cls".to_string(), vec![1, d]),
            ("pos".to_string(), vec![config.sequence_length(), d]),
        ];
        for m in 0..config.blocks {
            out.push((format!("blocks.{m}.norm_gain"), vec![d]));
            if layer {
                out.push((format!("blocks.{m}.norm_bias"), vec![d]));
            }
            out.push((format!("blocks.{m}.x_proj"), vec![d, e]));
            out.push((format!("blocks.{m}.z_proj"), vec![d, e]));
            for dir in ["forward", "backward"] {
                for (name, shape) in [
                    ("a_log", vec![e, n]),
                    ("delta_down", vec![e, r]),
                    ("delta_up", vec![r, e]),
                    ("delta_bias", vec![e]),
                    ("b_proj", vec![e, n]),
                    ("c_proj", vec![e, n]),
                    ("conv_kernel", vec![e, k]),
                    ("conv_bias", vec![e]),
                ] {
                    out.push((format!("blocks.{m}.{dir}.{name}"), shape));
                }
            }
            out.push((format!("blocks.{m}.out_proj"), vec![e, d]));
        }
        out.push(("final_gain".to_string(), vec![d]));
        if layer {
            out.push(("final_bias".to_string(), vec![d]));
        }
        out.push(("head_hidden".to_string(), vec![config.head_input_dim(), d]));
        out.push(("head_hidden_bias".to_string(), vec![d]));
        out.push(("head_out".to_string(), vec![d, 1]));
        out.push(("head_out_bias".to_string(), vec![1]));
        out
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()).expect("existing shape"))
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        self.map(|t| t.cast())
    }

    /// Zero every block's output projection, which turns each block into a
    /// pure residual pass-through.
    pub fn zero_output_projections(&mut self) {
        for block in &mut self.blocks {
            block.out_proj.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
