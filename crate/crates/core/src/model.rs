//! Two-stage restoration model: predicted kernels, task modulation,
//! multi-scale filtering, and uncertainty-conditioned refinement.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::{concat_channels, split_channels, Image};
use crate::kernel::{
    apply_multiscale_fast, gather_samples, multiscale_backward, softmax_backward, softmax_fusion, uncertainty_backward,
    uncertainty_map, FusionField, KernelField, SampledTensor, ScaleSet, UncertaintyMap,
};
use crate::net::{net_backward, net_forward, NetCache, NetConfig, NetParams, DEFAULT_BASE_WIDTH};
use crate::param::{prefixed, Parameters, Tensor};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tam::{
    modulate, modulation_with_cache, tam_backward, TamCache, TamParams, TaskEmbeddingTable, DEFAULT_EMBEDDING_DIM,
    DEFAULT_HIDDEN,
};

/// Number of degradation tasks with an embedding row.
pub const NUM_TASKS: usize = 3;

/// Which components are active. `full` enables all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub two_stage: bool,
    pub use_um: bool,
    pub use_tam: bool,
    pub multiscale: bool,
}

impl Variant {
    pub const FULL: Self = Self { two_stage: true, use_um: true, use_tam: true, multiscale: true };
    pub const NAMES: [&'static str; 5] = ["one-stage", "no-um", "no-tam", "no-multiscale", "full"];

    /// Parses a variant name or a `+`-joined combination such as
    /// `one-stage+no-tam`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut v = Self::FULL;
        for part in s.trim().split('+') {
            match part.trim() {
                "full" => {}
                "one-stage" => {
                    v.two_stage = false;
                    v.use_um = false;
                }
                "no-um" => v.use_um = false,
                "no-tam" => v.use_tam = false,
                "no-multiscale" => v.multiscale = false,
                other => return Err(Error::InvalidParameter(format!("unknown variant '{other}'"))),
            }
        }
        Ok(v)
    }

    pub fn name(&self) -> String {
        if *self == Self::FULL {
            return "full".into();
        }
        let mut parts = Vec::new();
        if !self.two_stage {
            parts.push("one-stage");
        } else if !self.use_um {
            parts.push("no-um");
        }
        if !self.use_tam {
            parts.push("no-tam");
        }
        if !self.multiscale {
            parts.push("no-multiscale");
        }
        parts.join("+")
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub base_width: usize,
    pub emb_dim: usize,
    pub tam_hidden: usize,
    pub num_tasks: usize,
    pub scales: ScaleSet,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_width: DEFAULT_BASE_WIDTH,
            emb_dim: DEFAULT_EMBEDDING_DIM,
            tam_hidden: DEFAULT_HIDDEN,
            num_tasks: NUM_TASKS,
            scales: ScaleSet::default(),
            variant: Variant::FULL,
        }
    }
}

impl ModelConfig {
    /// Scales actually used by the filter (`{1}` without multi-scale).
    pub fn effective_scales(&self) -> ScaleSet {
        if self.variant.multiscale {
            self.scales.clone()
        } else {
            ScaleSet::single(1).expect("valid")
        }
    }

    fn net_config(&self, stage: usize) -> NetConfig {
        NetConfig {
            in_channels: self.image_channels + usize::from(stage == 2),
            base_width: self.base_width,
            num_scales: self.effective_scales().len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.emb_dim == 0 || self.tam_hidden == 0 || self.num_tasks == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub net: NetParams<T>,
    pub tam: TamParams<T>,
}

impl<T: Scalar> Parameters<T> for StageParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<_> = prefixed("net", self.net.tensors()).collect();
        v.extend(prefixed("tam", self.tam.tensors()));
        v
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<_> = prefixed("net", self.net.tensors_mut()).collect();
        v.extend(prefixed("tam", self.tam.tensors_mut()));
        v
    }
}

/// Full parameter set. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub embeddings: TaskEmbeddingTable<T>,
    pub stage1: StageParams<T>,
    /// Absent for the one-stage variant.
    pub stage2: Option<StageParams<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let embeddings = TaskEmbeddingTable::new(config.num_tasks, config.emb_dim, &mut rng);
        let stage1 = StageParams {
            net: NetParams::new(config.net_config(1), &mut rng)?,
            tam: TamParams::new(config.emb_dim, config.tam_hidden, &mut rng)?,
        };
        let stage2 = if config.variant.two_stage {
            Some(StageParams {
                net: NetParams::new(config.net_config(2), &mut rng)?,
                tam: TamParams::new(config.emb_dim, config.tam_hidden, &mut rng)?,
            })
        } else {
            None
        };
        Ok(Self { config, embeddings, stage1, stage2 })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let stage = |s| -> Result<StageParams<T>> {
            Ok(StageParams {
                net: NetParams::zeros(config.net_config(s))?,
                tam: TamParams::zeros(config.emb_dim, config.tam_hidden),
            })
        };
        Ok(Self {
            embeddings: TaskEmbeddingTable::zeros(config.num_tasks, config.emb_dim),
            stage1: stage(1)?,
            stage2: if config.variant.two_stage { Some(stage(2)?) } else { None },
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.config.clone()).expect("config already validated");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Runs both stages (or one for the one-stage variant).
    pub fn forward(&self, input: &Image<T>, task: usize) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        if input.channels() != cfg.image_channels {
            return Err(Error::ChannelCount { expected: cfg.image_channels, actual: input.channels() });
        }
        input.ensure_finite("model input")?;
        let scales = cfg.effective_scales();
        let s1 = stage_forward(input, input, &self.stage1, &self.embeddings, task, &scales, cfg.variant.use_tam)?;
        let s2 = match &self.stage2 {
            Some(sp) => {
                let um = if cfg.variant.use_um {
                    s1.uncertainty.to_image()
                } else {
                    Image::zeros(input.height(), input.width(), 1)
                };
                let x2 = concat_channels(&s1.restored, &um)?;
                Some(stage_forward(&x2, &s1.restored, sp, &self.embeddings, task, &scales, cfg.variant.use_tam)?)
            }
            None => None,
        };
        Ok(ForwardPass { task, use_um: cfg.variant.use_um, stage1: s1, stage2: s2 })
    }

    /// Final restoration only.
    pub fn restore(&self, input: &Image<T>, task: usize) -> Result<Image<T>> {
        Ok(self.forward(input, task)?.final_output().clone())
    }

    /// Reverse pass through every stage. `d_j2` is ignored for the one-stage
    /// variant. Consumes the forward caches.
    pub fn backward(&self, pass: ForwardPass<T>, d_j1: &Image<T>, d_j2: Option<&Image<T>>) -> Result<Self> {
        let mut grads = self.zeros_like();
        self.backward_into(pass, d_j1, d_j2, &mut grads)?;
        Ok(grads)
    }

    /// As [`Model::backward`], accumulating into `grads`.
    pub fn backward_into(
        &self,
        pass: ForwardPass<T>,
        d_j1: &Image<T>,
        d_j2: Option<&Image<T>>,
        grads: &mut Self,
    ) -> Result<()> {
        let task = pass.task;
        let c = self.config.image_channels;
        let mut d_j1_total = d_j1.clone();
        let mut d_um1 = None;
        if let (Some(s2), Some(sp2), Some(g2)) = (pass.stage2, &self.stage2, grads.stage2.as_mut()) {
            let d_j2 = d_j2.ok_or_else(|| Error::ShapeMismatch("missing stage-2 upstream gradient".into()))?;
            let (d_filter, d_x2) =
                stage_backward(s2.cache, sp2, &self.embeddings, d_j2, None, g2, &mut grads.embeddings, task, true)?;
            let d_x2 = d_x2.expect("requested");
            let (d_img, d_um) = split_channels(&d_x2, c)?;
            for ((a, &b), &f) in d_j1_total.data_mut().iter_mut().zip(d_img.data()).zip(d_filter.data()) {
                *a += b + f;
            }
            if pass.use_um {
                d_um1 = Some(d_um.into_data());
            }
        }
        stage_backward(
            pass.stage1.cache,
            &self.stage1,
            &self.embeddings,
            &d_j1_total,
            d_um1.as_deref(),
            &mut grads.stage1,
            &mut grads.embeddings,
            task,
            false,
        )?;
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<_> = prefixed("embeddings", self.embeddings.tensors()).collect();
        v.extend(prefixed("stage1", self.stage1.tensors()));
        if let Some(s2) = &self.stage2 {
            v.extend(prefixed("stage2", s2.tensors()));
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<_> = prefixed("embeddings", self.embeddings.tensors_mut()).collect();
        v.extend(prefixed("stage1", self.stage1.tensors_mut()));
        if let Some(s2) = &mut self.stage2 {
            v.extend(prefixed("stage2", s2.tensors_mut()));
        }
        v
    }
}

/// Everything one stage needs for its reverse pass.
#[derive(Clone, Debug)]
pub struct StageCache<T> {
    net: NetCache<T>,
    tam: Option<TamCache<T>>,
    samples: SampledTensor<T>,
    /// Network output before modulation.
    pub raw_kernels: KernelField<T>,
    /// Kernels actually applied.
    pub kernels: KernelField<T>,
    pub fusion: FusionField<T>,
}

#[derive(Clone, Debug)]
pub struct StageOutput<T> {
    pub restored: Image<T>,
    pub uncertainty: UncertaintyMap<T>,
    pub cache: StageCache<T>,
}

/// One stage: predict from `net_input`, filter `filter_input`.
pub fn stage_forward<T: Scalar>(
    net_input: &Image<T>,
    filter_input: &Image<T>,
    sp: &StageParams<T>,
    embeddings: &TaskEmbeddingTable<T>,
    task: usize,
    scales: &ScaleSet,
    use_tam: bool,
) -> Result<StageOutput<T>> {
    let (raw, logits, net) = net_forward(net_input, &sp.net)?;
    let (kernels, tam) = if use_tam {
        let cache = modulation_with_cache(&raw, task, embeddings, &sp.tam)?;
        (modulate(&raw, &cache.modulation)?, Some(cache))
    } else {
        embeddings.embedding(task)?;
        (raw.clone(), None)
    };
    let fusion = softmax_fusion(&logits)?;
    let samples = gather_samples(filter_input, scales)?;
    let restored = apply_multiscale_fast(&samples, &kernels, &fusion)?;
    let uncertainty = uncertainty_map(&kernels);
    Ok(StageOutput { restored, uncertainty, cache: StageCache { net, tam, samples, raw_kernels: raw, kernels, fusion } })
}

/// Returns `(∂L/∂filter_input, ∂L/∂net_input)`; the latter only on request.
#[allow(clippy::too_many_arguments)]
fn stage_backward<T: Scalar>(
    cache: StageCache<T>,
    sp: &StageParams<T>,
    embeddings: &TaskEmbeddingTable<T>,
    d_out: &Image<T>,
    d_um: Option<&[T]>,
    grads: &mut StageParams<T>,
    d_embeddings: &mut TaskEmbeddingTable<T>,
    task: usize,
    want_inputs: bool,
) -> Result<(Image<T>, Option<Image<T>>)> {
    let mg = multiscale_backward(&cache.samples, &cache.kernels, &cache.fusion, d_out, want_inputs)?;
    let mut d_kernels = mg.d_kernels;
    if let Some(d_um) = d_um {
        uncertainty_backward(&cache.kernels, d_um, &mut d_kernels);
    }
    let d_logits = softmax_backward(&cache.fusion, &mg.d_alpha);
    let d_raw = match &cache.tam {
        Some(tc) => {
            let tg = tam_backward(tc, embeddings, &sp.tam, &d_kernels, true)?;
            grads.tam.add_assign_from(&tg.d_params);
            for (a, &b) in d_embeddings.embedding_mut(task)?.iter_mut().zip(&tg.d_embedding) {
                *a += b;
            }
            tg.d_kernels
        }
        None => d_kernels,
    };
    let d_net_in = net_backward(&cache.net, &sp.net, &d_raw, &d_logits, &mut grads.net, want_inputs)?;
    let d_filter = mg.d_image.unwrap_or_else(|| Image::zeros(d_out.height(), d_out.width(), d_out.channels()));
    Ok((d_filter, d_net_in))
}

/// Output and caches of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub task: usize,
    use_um: bool,
    pub stage1: StageOutput<T>,
    pub stage2: Option<StageOutput<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn j1(&self) -> &Image<T> {
        &self.stage1.restored
    }

    pub fn j2(&self) -> Option<&Image<T>> {
        self.stage2.as_ref().map(|s| &s.restored)
    }

    pub fn final_output(&self) -> &Image<T> {
        self.j2().unwrap_or(self.j1())
    }

    /// Stage-1 uncertainty map, the stage-2 conditioning signal.
    pub fn uncertainty(&self) -> &UncertaintyMap<T> {
        &self.stage1.uncertainty
    }
}
