//! Coordinate MLPs, the convolutional encoder and their parameter layout.

mod encoder;
mod fourier;
mod mlp;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, WindowQuery};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use encoder::{EncoderArch, EncoderConfig};
pub use fourier::{fourier_features, FourierFeatureMap};
pub use mlp::{MlpArch, HIDDEN_LAYERS, SKIP_AFTER};
pub use params::{Optimizer, ParamEntry, ParamStore};

/// Network variants compared in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// ReLU MLP on raw coordinates.
    #[serde(rename = "relu")]
    Relu,
    /// ReLU MLP on Fourier features of the coordinates.
    #[serde(rename = "relu_pe")]
    ReluPe,
    #[serde(rename = "siren")]
    Siren,
    /// SIREN fitted to the observed Bayer samples only.
    #[serde(rename = "nerd0")]
    Nerd0,
    /// SIREN conditioned on local encoder features.
    #[serde(rename = "nerd")]
    Nerd,
    /// As `Nerd` without the two input skip concatenations.
    #[serde(rename = "nerd-ns")]
    NerdNs,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Relu, Variant::ReluPe, Variant::Siren, Variant::Nerd0, Variant::Nerd, Variant::NerdNs];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Relu => "relu",
            Variant::ReluPe => "relu_pe",
            Variant::Siren => "siren",
            Variant::Nerd0 => "nerd0",
            Variant::Nerd => "nerd",
            Variant::NerdNs => "nerd-ns",
        }
    }

    pub fn is_conditioned(self) -> bool {
        matches!(self, Variant::Nerd | Variant::NerdNs)
    }

    pub fn uses_skips(self) -> bool {
        self != Variant::NerdNs
    }

    pub fn uses_sine(self) -> bool {
        !matches!(self, Variant::Relu | Variant::ReluPe)
    }

    pub fn uses_fourier(self) -> bool {
        self == Variant::ReluPe
    }

    pub fn names() -> String {
        Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (valid: {})", Variant::names())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden_width: usize,
    pub omega0: f64,
    /// Number of Fourier frequencies `m` (relu_pe only).
    pub fourier_features: usize,
    /// Standard deviation of the Fourier frequency matrix (relu_pe only).
    pub fourier_sigma: f64,
    /// Encoder settings (conditioned variants only).
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            hidden_width: 256,
            omega0: 30.0,
            fourier_features: 128,
            fourier_sigma: 10.0,
            encoder: EncoderConfig::default(),
        }
    }

    /// Width of the vector derived from the coordinates alone.
    pub fn coord_width(&self) -> usize {
        if self.variant.uses_fourier() {
            2 * self.fourier_features
        } else {
            2
        }
    }

    /// Length of the per-pixel local encoding, zero for unconditioned variants.
    pub fn encoding_width(&self) -> usize {
        if self.variant.is_conditioned() {
            self.encoder.local_encoding_len()
        } else {
            0
        }
    }

    /// MLP input width `Din`.
    pub fn input_width(&self) -> usize {
        self.coord_width() + self.encoding_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::Config(format!("omega0 must be positive, got {}", self.omega0)));
        }
        if self.variant.uses_fourier() && (self.fourier_features == 0 || !(self.fourier_sigma > 0.0)) {
            return Err(Error::Config("Fourier features need m > 0 and sigma > 0".into()));
        }
        if self.variant.is_conditioned() {
            self.encoder.validate()?;
        }
        Ok(())
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Uniform in `[-bound, bound)`.
    Uniform(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// One parameter tensor of an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter specifications and hands out their indices.
#[derive(Default)]
pub(crate) struct LayoutBuilder {
    pub specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> usize {
        self.specs.push(ParamSpec { name, shape, init, trainable });
        self.specs.len() - 1
    }
}

/// A complete network: architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    mlp: MlpArch,
    encoder: Option<EncoderArch>,
    pub params: ParamStore<f32>,
}

struct Arch {
    specs: Vec<ParamSpec>,
    mlp: MlpArch,
    encoder: Option<EncoderArch>,
}

fn build_arch(config: &ModelConfig) -> Result<Arch> {
    config.validate()?;
    let mut b = LayoutBuilder::default();
    let encoder = if config.variant.is_conditioned() { Some(EncoderArch::build(&config.encoder, &mut b)) } else { None };
    let mlp = MlpArch::build(config, &mut b);
    Ok(Arch { specs: b.specs, mlp, encoder })
}

/// Parameter layout of `config` without allocating any weights.
pub fn layout(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    Ok(build_arch(config)?.specs)
}

impl Model {
    /// Builds a model with freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = build_arch(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for s in &arch.specs {
            let value = match s.init {
                Init::Zero => Tensor::zeros(s.shape.clone())?,
                Init::Uniform(bound) => Tensor::uniform(s.shape.clone(), -bound, bound, &mut rng)?,
                Init::Normal(std) => Tensor::from_fn(s.shape.clone(), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })?,
            };
            params.push(s.name.clone(), value, s.trainable);
        }
        Ok(Self { config, specs: arch.specs, mlp: arch.mlp, encoder: arch.encoder, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn mlp(&self) -> &MlpArch {
        &self.mlp
    }

    pub fn encoder(&self) -> Option<&EncoderArch> {
        self.encoder.as_ref()
    }

    /// Spatial multiple the encoder input must have (1 without encoder).
    pub fn spatial_multiple(&self) -> usize {
        self.encoder.as_ref().map_or(1, |e| e.spatial_multiple())
    }

    /// Runs the encoder on an `N x 1 x H x W` Bayer tensor, giving
    /// `N x C x H x W` features.
    pub fn encode<T: Element>(&self, tape: &mut Tape<T>, vars: &[Var], bayer: Var) -> Result<Var> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no encoder", self.variant())))?;
        enc.forward(tape, vars, bayer)
    }

    /// MLP outputs (`Q x 3`) for coordinates `coords` (`Q x 2`) and, for
    /// conditioned variants, local encodings (`Q x L`).
    pub fn query<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        coords: Tensor<T>,
        encoding: Option<Var>,
    ) -> Result<Var> {
        self.mlp.forward(tape, vars, coords, encoding)
    }

    /// Conditioned query: gathers local windows from `features` at `queries`
    /// (restricted to the `region` of valid pixels) and evaluates the MLP.
    pub fn query_features<T: Element>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: Var,
        region: (usize, usize),
        queries: Vec<WindowQuery>,
        coords: Tensor<T>,
    ) -> Result<Var> {
        let radius = self.config.encoder.window / 2;
        let local = tape.gather_windows(features, queries, radius, region)?;
        self.query(tape, vars, coords, Some(local))
    }
}

/// One row of the architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: usize,
    pub trainable: bool,
}

/// Shapes and parameter counts of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Description {
    pub config: ModelConfig,
    pub input_width: usize,
    pub encoding_width: usize,
    pub rows: Vec<LayerRow>,
    pub mlp_params: usize,
    pub encoder_params: usize,
}

impl Description {
    pub fn total_params(&self) -> usize {
        self.mlp_params + self.encoder_params
    }
}

pub fn describe(config: &ModelConfig) -> Result<Description> {
    let specs = layout(config)?;
    let rows: Vec<LayerRow> = specs
        .iter()
        .map(|s| LayerRow { name: s.name.clone(), shape: s.shape.clone(), params: s.numel(), trainable: s.trainable })
        .collect();
    let count = |prefix: &str| -> usize {
        rows.iter().filter(|r| r.trainable && r.name.starts_with(prefix)).map(|r| r.params).sum()
    };
    Ok(Description {
        config: config.clone(),
        input_width: config.input_width(),
        encoding_width: config.encoding_width(),
        mlp_params: count("mlp."),
        encoder_params: count("encoder."),
        rows,
    })
}

impl fmt::Display for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant {}", self.config.variant)?;
        writeln!(f, "mlp input width {}", self.input_width)?;
        if self.encoding_width > 0 {
            writeln!(f, "local encoding length {}", self.encoding_width)?;
        }
        for r in &self.rows {
            let shape = r.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let tag = if r.trainable { "" } else { "  (fixed)" };
            writeln!(f, "  {:<32} {:>18} {:>10}{}", r.name, shape, r.params, tag)?;
        }
        writeln!(f, "mlp parameters {}", self.mlp_params)?;
        if self.encoder_params > 0 {
            writeln!(f, "encoder parameters {}", self.encoder_params)?;
        }
        write!(f, "total parameters {}", self.total_params())
    }
}
