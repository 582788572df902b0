//! The assembled flow model.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::backbone::Backbone;
use super::config::{ConfigError, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::matching::{global_match, MatchError};
use crate::nn::{Bound, Init, ParamStore};
use crate::polymamba::PolyMamba;
use crate::pulse::PulseMamba;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("image size {height}x{width} is not divisible by the backbone stride {stride}; pad the images to a multiple of {stride}")]
    Indivisible { height: usize, width: usize, stride: usize },
    #[error("images must be [H, W, 3] with equal shapes, got {0:?} and {1:?}")]
    ImageShape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Wall time per stage of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub backbone: Duration,
    pub polymamba: Duration,
    pub matching: Duration,
    pub pulsemamba: Duration,
    pub upsample: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.backbone + self.polymamba + self.matching + self.pulsemamba + self.upsample
    }
}

impl fmt::Display for StageTimings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        writeln!(f, "backbone    {:9.2} ms", ms(self.backbone))?;
        writeln!(f, "polymamba   {:9.2} ms", ms(self.polymamba))?;
        writeln!(f, "matching    {:9.2} ms", ms(self.matching))?;
        writeln!(f, "pulsemamba  {:9.2} ms", ms(self.pulsemamba))?;
        writeln!(f, "upsample    {:9.2} ms", ms(self.upsample))?;
        write!(f, "total       {:9.2} ms", ms(self.total()))
    }
}

pub struct ModelOutput<'t, T> {
    /// Final flow at image resolution.
    pub flow: Var<'t, T>,
    /// `V⁰ … Vᴺ` at feature resolution.
    pub flows: Vec<Var<'t, T>>,
    pub attention: Vec<Var<'t, T>>,
    pub timings: StageTimings,
}

/// Bilinear ×`s` resize with flow vectors scaled by `s`.
pub fn upsample_flow<'t, T: Scalar>(flow: Var<'t, T>, s: usize) -> Result<Var<'t, T>, TensorError> {
    let sh = flow.shape();
    if s == 1 {
        return Ok(flow);
    }
    Ok(flow.resize_bilinear(sh[0] * s, sh[1] * s)?.scale(T::from_usize_lossy(s)))
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub poly: PolyMamba,
    pub pulse: PulseMamba,
}

impl FlowModel {
    /// Builds the model and its freshly initialised parameters.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(ParamStore<T>, Self), ConfigError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let backbone = Backbone::new(&mut init, "backbone", config.backbone_width, config.feat_dim, config.stride);
        let poly = PolyMamba::new(&mut init, "poly", config.poly());
        let pulse = PulseMamba::new(&mut init, "pulse", config.pulse());
        Ok((store, Self { config, backbone, poly, pulse }))
    }

    /// Shared-weight features for both frames.
    pub fn extract_features<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        img1: Var<'t, T>,
        img2: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), ModelError> {
        let (s1, s2) = (img1.shape(), img2.shape());
        if s1.len() != 3 || s1[2] != 3 || s1 != s2 {
            return Err(ModelError::ImageShape(s1, s2));
        }
        let stride = self.config.stride;
        if s1[0] % stride != 0 || s1[1] % stride != 0 {
            return Err(ModelError::Indivisible { height: s1[0], width: s1[1], stride });
        }
        Ok((self.backbone.forward(p, img1)?, self.backbone.forward(p, img2)?))
    }

    /// Full forward pass; `iterations` overrides the configured count.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        img1: Var<'t, T>,
        img2: Var<'t, T>,
        iterations: Option<usize>,
    ) -> Result<ModelOutput<'t, T>, ModelError> {
        let mut timings = StageTimings::default();
        let t0 = Instant::now();
        let (f1, f2) = self.extract_features(p, img1, img2)?;
        timings.backbone = t0.elapsed();

        let t0 = Instant::now();
        let (fq, fv) = self.poly.forward(p, f1, f2)?;
        timings.polymamba = t0.elapsed();

        let t0 = Instant::now();
        let gm = global_match(fq, fv, self.config.match_capacity)?;
        timings.matching = t0.elapsed();

        let t0 = Instant::now();
        let n = iterations.unwrap_or(self.config.iterations);
        let r = self.pulse.refine(p, gm.flow, fq, gm.cost, n)?;
        timings.pulsemamba = t0.elapsed();

        let t0 = Instant::now();
        let flow = upsample_flow(*r.flows.last().expect("initial flow present"), self.config.stride)?;
        timings.upsample = t0.elapsed();
        Ok(ModelOutput { flow, flows: r.flows, attention: r.attention, timings })
    }

    /// Inference on `[H, W, 3]` images in `[0, 1]`; returns the image-resolution flow.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        img1: &Tensor<f32>,
        img2: &Tensor<f32>,
        iterations: Option<usize>,
    ) -> Result<(Tensor<f32>, StageTimings), ModelError> {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(img1.cast()), tape.constant(img2.cast()), iterations)?;
        Ok((out.flow.value().cast(), out.timings))
    }
}

/// Number of scalar parameters for `config`.
pub fn count_parameters(config: &ModelConfig) -> Result<usize, ConfigError> {
    Ok(FlowModel::new::<f32>(*config, 0)?.0.num_elements())
}
