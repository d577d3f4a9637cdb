//! Shared-weight transformer stack over the two modality streams, with
//! interaction modules between selected layers.

use crate::ami::{ami_pair, AmiConfig, AmiOutput};
use crate::embed::TokenSeq;
use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};
use crate::tensor::{attention, Bound, Tape, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub heads: usize,
    /// 1-based layers after which the interaction module runs.
    pub ami_layers: Vec<usize>,
    /// `None` disables interaction entirely.
    pub ami: Option<AmiConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            heads: 2,
            ami_layers: vec![2, 4],
            ami: Some(AmiConfig::default()),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_layers == 0 || self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} layers with {} heads over dim {dim}",
                self.n_layers, self.heads
            )));
        }
        let mut prev = 0;
        for &l in &self.ami_layers {
            if l <= prev || l > self.n_layers {
                return Err(Error::Config(format!(
                    "ami_layers {:?} must be increasing within 1..={}",
                    self.ami_layers, self.n_layers
                )));
            }
            prev = l;
        }
        if let Some(ami) = &self.ami {
            if (ami.variant.learns_tokens() && ami.n_tokens == 0) || ami.heads == 0 || !dim.is_multiple_of(ami.heads) {
                return Err(Error::Config(format!(
                    "AMI needs n_tokens >= 1 and heads dividing {dim}"
                )));
            }
        }
        Ok(())
    }

    /// Layers that actually host an interaction module.
    pub fn active_ami_layers(&self) -> &[usize] {
        if self.ami.is_some() {
            &self.ami_layers
        } else {
            &[]
        }
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("encoder.block{layer}")
}

pub fn ami_prefix(layer: usize) -> String {
    format!("ami.l{layer}")
}

pub fn block_param_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    let n = |s: &str| format!("{prefix}.{s}");
    let mut specs = vec![
        ParamSpec::new(n("ln1.gamma"), vec![dim], Init::Ones),
        ParamSpec::new(n("ln1.beta"), vec![dim], Init::Zeros),
    ];
    for p in ["q", "k", "v", "o"] {
        specs.push(ParamSpec::weight(n(&format!("msa.w{p}")), vec![dim, dim]));
        specs.push(ParamSpec::new(n(&format!("msa.b{p}")), vec![dim], Init::Zeros));
    }
    specs.extend([
        ParamSpec::new(n("ln2.gamma"), vec![dim], Init::Ones),
        ParamSpec::new(n("ln2.beta"), vec![dim], Init::Zeros),
        ParamSpec::weight(n("mlp.w1"), vec![dim, 4 * dim]),
        ParamSpec::new(n("mlp.b1"), vec![4 * dim], Init::Zeros),
        ParamSpec::weight(n("mlp.w2"), vec![4 * dim, dim]),
        ParamSpec::new(n("mlp.b2"), vec![dim], Init::Zeros),
    ]);
    specs
}

pub fn param_specs(cfg: &EncoderConfig, dim: usize) -> Vec<ParamSpec> {
    let mut specs: Vec<ParamSpec> = (1..=cfg.n_layers)
        .flat_map(|l| block_param_specs(&block_prefix(l), dim))
        .collect();
    if let Some(ami) = &cfg.ami {
        for &l in &cfg.ami_layers {
            specs.extend(crate::ami::param_specs(&ami_prefix(l), dim, ami));
        }
    }
    specs
}

fn linear(tape: &mut Tape, bound: &Bound, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.at(prefix, w)?)?;
    tape.add_bias(y, bound.at(prefix, b)?)
}

/// `h = H + MSA(LN(H))`, `H' = h + MLP(LN(h))`.
pub fn block_forward(tape: &mut Tape, bound: &Bound, prefix: &str, heads: usize, x: Var) -> Result<Var> {
    let dim = bound.at(prefix, "ln1.gamma").map(|g| tape.shape(g)[0])?;
    let (_, c) = tape.value(x).dims2()?;
    if c != dim {
        return Err(Error::Shape {
            op: "block_forward",
            detail: format!("{c} token channels for a {dim}-wide block"),
        });
    }
    let n1 = tape.layer_norm(x, bound.at(prefix, "ln1.gamma")?, bound.at(prefix, "ln1.beta")?, LN_EPS)?;
    let q = linear(tape, bound, n1, prefix, "msa.wq", "msa.bq")?;
    let k = linear(tape, bound, n1, prefix, "msa.wk", "msa.bk")?;
    let v = linear(tape, bound, n1, prefix, "msa.wv", "msa.bv")?;
    let att = attention(tape, q, k, v, heads)?;
    let msa = linear(tape, bound, att, prefix, "msa.wo", "msa.bo")?;
    let h = tape.add(x, msa)?;

    let n2 = tape.layer_norm(h, bound.at(prefix, "ln2.gamma")?, bound.at(prefix, "ln2.beta")?, LN_EPS)?;
    let hidden = linear(tape, bound, n2, prefix, "mlp.w1", "mlp.b1")?;
    let hidden = tape.gelu(hidden);
    let mlp = linear(tape, bound, hidden, prefix, "mlp.w2", "mlp.b2")?;
    tape.add(h, mlp)
}

/// Interaction outputs recorded after one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct AmiTrace {
    pub layer: usize,
    pub rgb: AmiOutput,
    pub x: AmiOutput,
}

pub struct EncodedPair {
    pub rgb: TokenSeq,
    pub x: TokenSeq,
    pub traces: Vec<AmiTrace>,
}

/// Runs both streams through the shared blocks. After every layer in
/// `ami_layers` both streams receive their interaction delta, computed from
/// the pre-update values of both.
pub fn encode_pair(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    rgb: TokenSeq,
    x: TokenSeq,
) -> Result<EncodedPair> {
    if tape.shape(rgb.tokens) != tape.shape(x.tokens) || rgb.n_template != x.n_template {
        return Err(Error::Shape {
            op: "encode_pair",
            detail: format!("{:?} vs {:?}", tape.shape(rgb.tokens), tape.shape(x.tokens)),
        });
    }
    let (mut hr, mut hx) = (rgb.tokens, x.tokens);
    let mut traces = Vec::new();
    for layer in 1..=cfg.n_layers {
        let prefix = block_prefix(layer);
        hr = block_forward(tape, bound, &prefix, cfg.heads, hr)?;
        hx = block_forward(tape, bound, &prefix, cfg.heads, hx)?;
        if let Some(ami) = &cfg.ami {
            if cfg.ami_layers.contains(&layer) {
                let (dr, dx) = ami_pair(tape, bound, &ami_prefix(layer), ami, hr, hx)?;
                hr = tape.add(hr, dr.delta)?;
                hx = tape.add(hx, dx.delta)?;
                traces.push(AmiTrace { layer, rgb: dr, x: dx });
            }
        }
    }
    Ok(EncodedPair {
        rgb: rgb.with_tokens(hr),
        x: x.with_tokens(hx),
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::materialize;
    use crate::tensor::{Params, Tensor};
    use crate::testutil::random_matrix;

    fn block_params(dim: usize, seed: u64) -> Params {
        materialize(&block_param_specs("b", dim), seed).unwrap()
    }

    fn run_block(p: &Params, x: &Tensor, heads: usize) -> Tensor {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = block_forward(&mut tape, &b, "b", heads, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_output_projections_make_identity() {
        let mut p = block_params(8, 1);
        p.get_mut("b.msa.wo").unwrap().data_mut().fill(0.0);
        p.get_mut("b.mlp.w2").unwrap().data_mut().fill(0.0);
        let x = random_matrix(5, 8, 2);
        assert_eq!(run_block(&p, &x, 2), x);
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let p = block_params(8, 3);
        let x = random_matrix(6, 8, 4);
        let perm = [3, 0, 5, 1, 4, 2];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let y = run_block(&p, &x, 2);
        let py = run_block(&p, &px, 2);
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in py.row(k).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_block_matches_hand_evaluation() {
        let dim = 4;
        let p = block_params(dim, 5);
        let x = random_matrix(1, dim, 6);
        let g = |n: &str| p.get(&format!("b.{n}")).unwrap().clone();
        let ln = |v: &[f64], gamma: &Tensor, beta: &Tensor| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
            v.iter()
                .enumerate()
                .map(|(j, a)| (a - m) / (var + LN_EPS).sqrt() * gamma.data()[j] + beta.data()[j])
                .collect()
        };
        let affine = |v: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (k, n) = w.dims2().unwrap();
            (0..n).map(|j| b.data()[j] + (0..k).map(|t| v[t] * w.at(t, j)).sum::<f64>()).collect()
        };
        // one key: attention output is V itself, so MSA is an affine map
        let n1 = ln(x.row(0), &g("ln1.gamma"), &g("ln1.beta"));
        let v = affine(&n1, &g("msa.wv"), &g("msa.bv"));
        let msa = affine(&v, &g("msa.wo"), &g("msa.bo"));
        let h: Vec<f64> = x.row(0).iter().zip(&msa).map(|(a, b)| a + b).collect();
        let n2 = ln(&h, &g("ln2.gamma"), &g("ln2.beta"));
        let hid: Vec<f64> = affine(&n2, &g("mlp.w1"), &g("mlp.b1"))
            .into_iter()
            .map(|z| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh()))
            .collect();
        let mlp = affine(&hid, &g("mlp.w2"), &g("mlp.b2"));
        let expect: Vec<f64> = h.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        let got = run_block(&p, &x, 2);
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let p = block_params(8, 7);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let x = tape.constant(random_matrix(3, 4, 8));
        assert!(block_forward(&mut tape, &b, "b", 2, x).is_err());
    }

    fn encoder_setup(cfg: &EncoderConfig, dim: usize, seed: u64) -> Params {
        materialize(&param_specs(cfg, dim), seed).unwrap()
    }

    fn encode(p: &Params, cfg: &EncoderConfig, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let seq = |t: &mut Tape, x: &Tensor| TokenSeq {
            tokens: t.constant(x.clone()),
            n_template: 2,
            n_search: x.dims2().unwrap().0 - 2,
        };
        let (sa, sb) = (seq(&mut tape, a), seq(&mut tape, b));
        let out = encode_pair(&mut tape, &bound, cfg, sa, sb).unwrap();
        (tape.value(out.rgb.tokens).clone(), tape.value(out.x.tokens).clone())
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            n_layers: 3,
            heads: 2,
            ami_layers: vec![1, 3],
            ami: Some(AmiConfig { n_tokens: 3, heads: 1, ..Default::default() }),
        }
    }

    #[test]
    fn swapping_streams_swaps_outputs_bitwise() {
        let cfg = small_cfg();
        let p = encoder_setup(&cfg, 8, 11);
        let (a, b) = (random_matrix(10, 8, 12), random_matrix(10, 8, 13));
        let (ra, xa) = encode(&p, &cfg, &a, &b);
        let (rb, xb) = encode(&p, &cfg, &b, &a);
        assert_eq!(ra, xb);
        assert_eq!(xa, rb);
    }

    #[test]
    fn equal_streams_stay_equal() {
        let cfg = small_cfg();
        let p = encoder_setup(&cfg, 8, 21);
        let a = random_matrix(10, 8, 22);
        let (r, x) = encode(&p, &cfg, &a, &a);
        assert_eq!(r, x);
    }

    #[test]
    fn without_ami_streams_are_independent() {
        let mut cfg = small_cfg();
        cfg.ami = None;
        let p = encoder_setup(&cfg, 8, 31);
        let (a, b, c) = (random_matrix(10, 8, 32), random_matrix(10, 8, 33), random_matrix(10, 8, 34));
        let (r1, _) = encode(&p, &cfg, &a, &b);
        let (r2, _) = encode(&p, &cfg, &a, &c);
        assert_eq!(r1, r2);
        // single-stream reference: the blocks applied in sequence
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let mut h = tape.constant(a.clone());
        for l in 1..=cfg.n_layers {
            h = block_forward(&mut tape, &bound, &block_prefix(l), cfg.heads, h).unwrap();
        }
        assert_eq!(tape.value(h), &r1);
    }

    #[test]
    fn validate_rejects_bad_layers() {
        let mut cfg = small_cfg();
        cfg.ami_layers = vec![0];
        assert!(cfg.validate(8).is_err());
        cfg.ami_layers = vec![4];
        assert!(cfg.validate(8).is_err());
        cfg.ami_layers = vec![2];
        assert!(cfg.validate(8).is_ok());
    }
}
