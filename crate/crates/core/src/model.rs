//! Parameter layout, initialization and the full forward pass from patches
//! to head predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embed::{embed_modality, Geometry, StreamPatches, POS, PROJ};
use crate::encoder::{self, AmiTrace, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{self, HeadVars};
use crate::tensor::{Bound, Params, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    /// Matrix with normal entries of standard deviation `1/sqrt(fan_in)`.
    pub fn weight(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let fan_in = shape.first().copied().unwrap_or(1).max(1);
        Self::new(name, shape, Init::Normal(1.0 / (fan_in as f64).sqrt()))
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Draws every parameter from its own stream keyed by `(seed, name)`, so a
/// parameter's initial value does not depend on which others exist.
pub fn materialize(specs: &[ParamSpec], seed: u64) -> Result<Params> {
    let mut params = Params::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.name));
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("{}: {e}", spec.name)))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        params.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?, true)?;
    }
    Ok(params)
}

/// Names of the interaction-module parameter group.
pub fn is_ami_param(name: &str) -> bool {
    name.starts_with("ami.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            encoder: EncoderConfig::default(),
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.encoder.validate(self.geometry.dim)?;
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let g = &self.geometry;
        let mut specs = vec![
            ParamSpec::weight(PROJ, vec![g.patch_len(), g.dim]),
            ParamSpec::new(POS, vec![g.n_tokens(), g.dim], Init::Normal(0.02)),
        ];
        specs.extend(encoder::param_specs(&self.encoder, g.dim));
        specs.extend(head::param_specs(g.dim, self.head_hidden));
        specs
    }

    pub fn init_params(&self, seed: u64) -> Result<Params> {
        self.validate()?;
        materialize(&self.param_specs(), seed)
    }
}

pub struct ModelOutput {
    pub head: HeadVars,
    pub traces: Vec<AmiTrace>,
}

/// Embedding, dual-stream encoder and head for one frame pair.
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    rgb: &StreamPatches,
    x: &StreamPatches,
) -> Result<ModelOutput> {
    let hr = embed_modality(tape, bound, rgb)?;
    let hx = embed_modality(tape, bound, x)?;
    let enc = encoder::encode_pair(tape, bound, &cfg.encoder, hr, hx)?;
    let sr = enc.rgb.search(tape)?;
    let sx = enc.x.search(tape)?;
    let head = head::predict(tape, bound, sr, sx)?;
    Ok(ModelOutput {
        head,
        traces: enc.traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ami::AmiConfig;

    #[test]
    fn parameters_do_not_depend_on_siblings() {
        let a = materialize(&[ParamSpec::weight("x.w", vec![3, 2])], 9).unwrap();
        let b = materialize(
            &[ParamSpec::weight("a.w", vec![4, 4]), ParamSpec::weight("x.w", vec![3, 2])],
            9,
        )
        .unwrap();
        assert_eq!(a.get("x.w").unwrap(), b.get("x.w").unwrap());
        let c = materialize(&[ParamSpec::weight("x.w", vec![3, 2])], 10).unwrap();
        assert_ne!(a.get("x.w").unwrap(), c.get("x.w").unwrap());
    }

    #[test]
    fn default_layout() {
        let cfg = ModelConfig::default();
        let p = cfg.init_params(1).unwrap();
        assert_eq!(p.get(PROJ).unwrap().shape(), &[192, 64]);
        assert_eq!(p.get(POS).unwrap().shape(), &[96, 64]);
        assert!(p.contains("encoder.block6.mlp.w2"));
        assert!(p.contains("ami.l2.alpha.w"));
        assert!(p.contains("ami.l4.gmp.fuse.w"));
        assert!(!p.contains("ami.l1.alpha.w"));
        assert!(p.iter().any(|(n, _)| n.starts_with("head.")));
    }

    #[test]
    fn forward_shapes_on_small_geometry() {
        let cfg = ModelConfig {
            geometry: Geometry { patch: 4, template: 8, search: 16, dim: 8 },
            encoder: EncoderConfig {
                n_layers: 2,
                heads: 2,
                ami_layers: vec![1],
                ami: Some(AmiConfig { n_tokens: 4, ..Default::default() }),
            },
            head_hidden: 8,
        };
        let p = cfg.init_params(3).unwrap();
        let patches = StreamPatches {
            template_init: Tensor::filled(&[4, 48], 0.2),
            template_dyn: Tensor::filled(&[4, 48], 0.3),
            search: Tensor::filled(&[16, 48], 0.1),
        };
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let out = forward(&mut tape, &b, &cfg, &patches, &patches).unwrap();
        assert_eq!(tape.shape(out.head.score), &[16, 1]);
        assert_eq!(tape.shape(out.head.offset), &[16, 2]);
        assert_eq!(tape.shape(out.head.size), &[16, 2]);
        assert_eq!(out.traces.len(), 1);
    }
}
