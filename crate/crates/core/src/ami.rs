//! Adaptive modality interaction.
//!
//! Each stream is compressed to `n_tokens` learned tokens (a softmax over
//! the sequence axis pools the input), the two token sets exchange
//! information through a pair of cross-modal attentions, and the result is
//! spread back over every sequence position with a second softmax over the
//! token axis. The cross-modal step only ever sees `n_tokens` rows per
//! stream, so no sequence-by-sequence matrix is formed.

use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};
use crate::tensor::{attention, Bound, Tape, Var};

/// Which stages of the module are active (ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmiVariant {
    /// Token learning, perceptor and token embedding.
    Full,
    /// Perceptor applied directly to the full token sequences.
    PerceptorOnly,
    /// Token learning and embedding with a plain linear exchange in place
    /// of the perceptor.
    TokensOnly,
}

impl AmiVariant {
    pub fn name(self) -> &'static str {
        match self {
            AmiVariant::Full => "full",
            AmiVariant::PerceptorOnly => "gmp-only",
            AmiVariant::TokensOnly => "lt-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AmiVariant::Full),
            "gmp-only" => Ok(AmiVariant::PerceptorOnly),
            "lt-only" => Ok(AmiVariant::TokensOnly),
            _ => Err(Error::Config(format!(
                "unknown AMI variant `{s}` (expected full, gmp-only, lt-only)"
            ))),
        }
    }

    pub fn learns_tokens(self) -> bool {
        !matches!(self, AmiVariant::PerceptorOnly)
    }

    pub fn has_perceptor(self) -> bool {
        !matches!(self, AmiVariant::TokensOnly)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmiConfig {
    pub n_tokens: usize,
    /// Heads of the perceptor attentions.
    pub heads: usize,
    pub variant: AmiVariant,
}

impl Default for AmiConfig {
    fn default() -> Self {
        Self {
            n_tokens: 32,
            heads: 1,
            variant: AmiVariant::Full,
        }
    }
}

pub fn param_specs(prefix: &str, dim: usize, cfg: &AmiConfig) -> Vec<ParamSpec> {
    let nt = cfg.n_tokens;
    let mut specs = Vec::new();
    let w = |name: &str, shape: Vec<usize>| ParamSpec::weight(format!("{prefix}.{name}"), shape);
    let z = |name: &str, shape: Vec<usize>| ParamSpec::new(format!("{prefix}.{name}"), shape, Init::Zeros);
    if cfg.variant.learns_tokens() {
        specs.push(w("alpha.w", vec![dim, nt]));
        specs.push(z("alpha.b", vec![nt]));
        specs.push(w("embed.w", vec![dim, nt]));
        specs.push(z("embed.b", vec![nt]));
    }
    if cfg.variant.has_perceptor() {
        for p in ["q", "k", "v"] {
            specs.push(w(&format!("gmp.w{p}"), vec![dim, dim]));
            specs.push(z(&format!("gmp.b{p}"), vec![dim]));
        }
    }
    specs.push(w("gmp.fuse.w", vec![2 * dim, dim]));
    specs.push(z("gmp.fuse.b", vec![dim]));
    specs
}

fn linear(tape: &mut Tape, bound: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.get(w)?)?;
    tape.add_bias(y, bound.get(b)?)
}

/// Learned tokens `F = softmax_N(X α)ᵀ X` and the `N x N_t` pooling weights.
#[derive(Clone, Copy, Debug)]
pub struct LearnedTokens {
    pub tokens: Var,
    pub weights: Var,
}

pub fn learn_tokens(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<LearnedTokens> {
    let logits = linear(tape, bound, x, &format!("{prefix}.alpha.w"), &format!("{prefix}.alpha.b"))?;
    let weights = tape.softmax(logits, 0)?;
    let tokens = tape.matmul_tn(weights, x)?;
    Ok(LearnedTokens { tokens, weights })
}

#[derive(Clone, Copy, Debug)]
struct Projected {
    q: Var,
    k: Var,
    v: Var,
}

fn project(tape: &mut Tape, bound: &Bound, prefix: &str, f: Var) -> Result<Projected> {
    let mut proj = |p: &str| linear(tape, bound, f, &format!("{prefix}.gmp.w{p}"), &format!("{prefix}.gmp.b{p}"));
    Ok(Projected {
        q: proj("q")?,
        k: proj("k")?,
        v: proj("v")?,
    })
}

fn fuse(tape: &mut Tape, bound: &Bound, prefix: &str, a: Var, b: Var) -> Result<Var> {
    let cat = tape.concat(&[a, b], 1)?;
    linear(tape, bound, cat, &format!("{prefix}.gmp.fuse.w"), &format!("{prefix}.gmp.fuse.b"))
}

/// Fused Q-/KV-attention output for the `input` direction, before the
/// residual add.
fn perceptor_update(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    heads: usize,
    input: &Projected,
    other: &Projected,
) -> Result<Var> {
    let q_sum = tape.add(input.q, other.q)?;
    let q_merged = tape.scale(q_sum, 0.5);
    let k_merged = tape.concat(&[input.k, other.k], 0)?;
    let v_merged = tape.concat(&[input.v, other.v], 0)?;
    let w_q = attention(tape, q_merged, input.k, input.v, heads)?;
    let w_kv = attention(tape, input.q, k_merged, v_merged, heads)?;
    fuse(tape, bound, prefix, w_q, w_kv)
}

/// `F_in + fuse([Attn(Q̂, K_in, V_in), Attn(Q_in, K̂, V̂)])` with
/// `Q̂ = (Q_in + Q_other) / 2` and `K̂`, `V̂` stacked over both token sets.
pub fn global_modal_perceptor(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    heads: usize,
    f_in: Var,
    f_other: Var,
) -> Result<Var> {
    if tape.shape(f_in) != tape.shape(f_other) {
        return Err(Error::Shape {
            op: "global_modal_perceptor",
            detail: format!("{:?} vs {:?}", tape.shape(f_in), tape.shape(f_other)),
        });
    }
    let p_in = project(tape, bound, prefix, f_in)?;
    let p_other = project(tape, bound, prefix, f_other)?;
    let update = perceptor_update(tape, bound, prefix, heads, &p_in, &p_other)?;
    tape.add(f_in, update)
}

/// `B_w F` with `B_w = softmax_{N_t}(H w + b)`, plus `B_w` itself.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedTokens {
    pub delta: Var,
    pub weights: Var,
}

pub fn embed_tokens(tape: &mut Tape, bound: &Bound, prefix: &str, h: Var, f: Var) -> Result<EmbeddedTokens> {
    let logits = linear(tape, bound, h, &format!("{prefix}.embed.w"), &format!("{prefix}.embed.b"))?;
    if tape.shape(logits)[1] != tape.value(f).dims2()?.0 {
        return Err(Error::Shape {
            op: "embed_tokens",
            detail: format!("{:?} weights for {:?} tokens", tape.shape(logits), tape.shape(f)),
        });
    }
    let weights = tape.softmax(logits, 1)?;
    let delta = tape.matmul(weights, f)?;
    Ok(EmbeddedTokens { delta, weights })
}

/// Residual update for one stream. The caller adds `delta` to the stream.
#[derive(Clone, Copy, Debug)]
pub struct AmiOutput {
    pub delta: Var,
    /// Token-learning weights `A` (`N x N_t`) of the input stream.
    pub token_weights: Option<Var>,
    /// Token-embedding weights `B_w` (`N x N_t`).
    pub embed_weights: Option<Var>,
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op: "ami",
            detail: format!("streams differ: {:?} vs {:?}", tape.shape(a), tape.shape(b)),
        });
    }
    Ok(())
}

/// `AMI(H_in, H_other)`.
pub fn ami_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &AmiConfig,
    h_in: Var,
    h_other: Var,
) -> Result<AmiOutput> {
    check_pair(tape, h_in, h_other)?;
    match cfg.variant {
        AmiVariant::Full | AmiVariant::TokensOnly => {
            let lt_in = learn_tokens(tape, bound, prefix, h_in)?;
            let lt_other = learn_tokens(tape, bound, prefix, h_other)?;
            let refined = if cfg.variant == AmiVariant::Full {
                global_modal_perceptor(tape, bound, prefix, cfg.heads, lt_in.tokens, lt_other.tokens)?
            } else {
                let update = fuse(tape, bound, prefix, lt_in.tokens, lt_other.tokens)?;
                tape.add(lt_in.tokens, update)?
            };
            let emb = embed_tokens(tape, bound, prefix, h_in, refined)?;
            Ok(AmiOutput {
                delta: emb.delta,
                token_weights: Some(lt_in.weights),
                embed_weights: Some(emb.weights),
            })
        }
        AmiVariant::PerceptorOnly => {
            let p_in = project(tape, bound, prefix, h_in)?;
            let p_other = project(tape, bound, prefix, h_other)?;
            let delta = perceptor_update(tape, bound, prefix, cfg.heads, &p_in, &p_other)?;
            Ok(AmiOutput {
                delta,
                token_weights: None,
                embed_weights: None,
            })
        }
    }
}

/// `(AMI(H_r, H_x), AMI(H_x, H_r))`, sharing the per-stream work between
/// the two directions. Values are identical to two [`ami_forward`] calls.
pub fn ami_pair(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &AmiConfig,
    h_r: Var,
    h_x: Var,
) -> Result<(AmiOutput, AmiOutput)> {
    check_pair(tape, h_r, h_x)?;
    match cfg.variant {
        AmiVariant::Full => {
            let lt_r = learn_tokens(tape, bound, prefix, h_r)?;
            let lt_x = learn_tokens(tape, bound, prefix, h_x)?;
            let p_r = project(tape, bound, prefix, lt_r.tokens)?;
            let p_x = project(tape, bound, prefix, lt_x.tokens)?;
            let u_r = perceptor_update(tape, bound, prefix, cfg.heads, &p_r, &p_x)?;
            let u_x = perceptor_update(tape, bound, prefix, cfg.heads, &p_x, &p_r)?;
            let f_r = tape.add(lt_r.tokens, u_r)?;
            let f_x = tape.add(lt_x.tokens, u_x)?;
            let e_r = embed_tokens(tape, bound, prefix, h_r, f_r)?;
            let e_x = embed_tokens(tape, bound, prefix, h_x, f_x)?;
            Ok((
                AmiOutput {
                    delta: e_r.delta,
                    token_weights: Some(lt_r.weights),
                    embed_weights: Some(e_r.weights),
                },
                AmiOutput {
                    delta: e_x.delta,
                    token_weights: Some(lt_x.weights),
                    embed_weights: Some(e_x.weights),
                },
            ))
        }
        AmiVariant::TokensOnly => {
            let lt_r = learn_tokens(tape, bound, prefix, h_r)?;
            let lt_x = learn_tokens(tape, bound, prefix, h_x)?;
            let u_r = fuse(tape, bound, prefix, lt_r.tokens, lt_x.tokens)?;
            let u_x = fuse(tape, bound, prefix, lt_x.tokens, lt_r.tokens)?;
            let f_r = tape.add(lt_r.tokens, u_r)?;
            let f_x = tape.add(lt_x.tokens, u_x)?;
            let e_r = embed_tokens(tape, bound, prefix, h_r, f_r)?;
            let e_x = embed_tokens(tape, bound, prefix, h_x, f_x)?;
            Ok((
                AmiOutput {
                    delta: e_r.delta,
                    token_weights: Some(lt_r.weights),
                    embed_weights: Some(e_r.weights),
                },
                AmiOutput {
                    delta: e_x.delta,
                    token_weights: Some(lt_x.weights),
                    embed_weights: Some(e_x.weights),
                },
            ))
        }
        AmiVariant::PerceptorOnly => {
            let p_r = project(tape, bound, prefix, h_r)?;
            let p_x = project(tape, bound, prefix, h_x)?;
            let d_r = perceptor_update(tape, bound, prefix, cfg.heads, &p_r, &p_x)?;
            let d_x = perceptor_update(tape, bound, prefix, cfg.heads, &p_x, &p_r)?;
            let out = |delta| AmiOutput {
                delta,
                token_weights: None,
                embed_weights: None,
            };
            Ok((out(d_r), out(d_x)))
        }
    }
}

#[cfg(test)]
fn q_attention_weights(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    f_in: Var,
    f_other: Var,
) -> Result<Vec<Var>> {
    let p_in = project(tape, bound, prefix, f_in)?;
    let p_other = project(tape, bound, prefix, f_other)?;
    let q_sum = tape.add(p_in.q, p_other.q)?;
    let q_merged = tape.scale(q_sum, 0.5);
    Ok(crate::tensor::attention_with_weights(tape, q_merged, p_in.k, p_in.v, 1)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::materialize;
    use crate::tensor::{grad_check, Params, Tensor};
    use crate::testutil::random_matrix;

    const P: &str = "ami.l1";

    fn params(dim: usize, cfg: &AmiConfig, seed: u64) -> Params {
        materialize(&param_specs(P, dim, cfg), seed).unwrap()
    }

    fn randomize_biases(p: &mut Params, seed: u64) {
        let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            if name.rsplit('.').next().unwrap().starts_with('b') {
                let len = p.get(name).unwrap().len();
                let r = random_matrix(1, len, seed + i as u64);
                p.get_mut(name).unwrap().data_mut().copy_from_slice(r.data());
            }
        }
    }

    fn softmax_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            })
            .collect()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.dims2().unwrap().0).map(|i| t.row(i).to_vec()).collect()
    }

    fn lin(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        let (k, n) = w.dims2().unwrap();
        x.iter()
            .map(|r| (0..n).map(|j| b.data()[j] + (0..k).map(|t| r[t] * w.at(t, j)).sum::<f64>()).collect())
            .collect()
    }

    fn transpose(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).collect()).collect()
    }

    fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    fn attn(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let c = q[0].len() as f64;
        let logits: Vec<Vec<f64>> = mm(q, &transpose(k))
            .into_iter()
            .map(|r| r.into_iter().map(|x| x / c.sqrt()).collect())
            .collect();
        mm(&softmax_rows(&logits), v)
    }

    fn max_diff(a: &[Vec<f64>], t: &Tensor) -> f64 {
        let flat: Vec<f64> = a.concat();
        flat.iter().zip(t.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn learn_oracle(x: &Tensor, p: &Params) -> Vec<Vec<f64>> {
        let xr = rows(x);
        let logits = lin(&xr, p.get(&format!("{P}.alpha.w")).unwrap(), p.get(&format!("{P}.alpha.b")).unwrap());
        // softmax over the sequence axis = softmax of the transposed rows
        let a_t = softmax_rows(&transpose(&logits));
        mm(&a_t, &xr)
    }

    #[test]
    fn zero_alpha_gives_column_mean() {
        let cfg = AmiConfig { n_tokens: 3, ..Default::default() };
        let mut p = params(4, &cfg, 1);
        p.get_mut(&format!("{P}.alpha.w")).unwrap().data_mut().fill(0.0);
        let x = random_matrix(6, 4, 2);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let lt = learn_tokens(&mut tape, &b, P, xv).unwrap();
        let f = tape.value(lt.tokens);
        for i in 0..3 {
            for c in 0..4 {
                let mean: f64 = (0..6).map(|r| x.at(r, c)).sum::<f64>() / 6.0;
                assert!((f.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_limit_selects_row() {
        let cfg = AmiConfig { n_tokens: 2, ..Default::default() };
        let mut p = params(4, &cfg, 1);
        let mut x = random_matrix(5, 4, 3);
        for r in 0..5 {
            x.data_mut()[r * 4] = 0.0;
        }
        x.data_mut()[3 * 4] = 1.0; // row 3 stands out on channel 0
        let alpha = p.get_mut(&format!("{P}.alpha.w")).unwrap();
        alpha.data_mut().fill(0.0);
        alpha.data_mut()[1] = 5000.0; // column 1 reads channel 0
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let lt = learn_tokens(&mut tape, &b, P, xv).unwrap();
        assert_eq!(tape.value(lt.tokens).row(1), x.row(3));
    }

    #[test]
    fn learn_tokens_matches_oracle() {
        let cfg = AmiConfig { n_tokens: 3, ..Default::default() };
        let mut p = params(4, &cfg, 7);
        randomize_biases(&mut p, 70);
        let x = random_matrix(12, 4, 8);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let lt = learn_tokens(&mut tape, &b, P, xv).unwrap();
        assert!(max_diff(&learn_oracle(&x, &p), tape.value(lt.tokens)) < 1e-12);
    }

    fn gmp_oracle(f_in: &Tensor, f_other: &Tensor, p: &Params) -> Vec<Vec<f64>> {
        let g = |n: &str| p.get(&format!("{P}.gmp.{n}")).unwrap();
        let (fi, fo) = (rows(f_in), rows(f_other));
        let (qi, ki, vi) = (lin(&fi, g("wq"), g("bq")), lin(&fi, g("wk"), g("bk")), lin(&fi, g("wv"), g("bv")));
        let (qo, ko, vo) = (lin(&fo, g("wq"), g("bq")), lin(&fo, g("wk"), g("bk")), lin(&fo, g("wv"), g("bv")));
        let q_hat: Vec<Vec<f64>> = qi.iter().zip(&qo).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect()).collect();
        let k_hat = [ki.clone(), ko].concat();
        let v_hat = [vi.clone(), vo].concat();
        let w_q = attn(&q_hat, &ki, &vi);
        let w_kv = attn(&qi, &k_hat, &v_hat);
        let cat: Vec<Vec<f64>> = w_q.iter().zip(&w_kv).map(|(a, b)| [a.clone(), b.clone()].concat()).collect();
        let fused = lin(&cat, g("fuse.w"), g("fuse.b"));
        fi.iter().zip(&fused).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
    }

    fn run_gmp(p: &Params, f_in: &Tensor, f_other: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let (a, o) = (tape.constant(f_in.clone()), tape.constant(f_other.clone()));
        let out = global_modal_perceptor(&mut tape, &b, P, 1, a, o).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn perceptor_matches_oracle() {
        let cfg = AmiConfig { n_tokens: 2, ..Default::default() };
        let mut p = params(4, &cfg, 11);
        randomize_biases(&mut p, 110);
        let (fi, fo) = (random_matrix(2, 4, 12), random_matrix(2, 4, 13));
        assert!(max_diff(&gmp_oracle(&fi, &fo, &p), &run_gmp(&p, &fi, &fo)) < 1e-10);
    }

    #[test]
    fn perceptor_on_equal_inputs_reduces_to_self_attention() {
        let cfg = AmiConfig { n_tokens: 3, ..Default::default() };
        let p = params(4, &cfg, 21);
        let f = random_matrix(3, 4, 22);
        let got = run_gmp(&p, &f, &f);
        // W^Q = W^KV = Attn(Q, K, V), so F' = F + fuse([att, att]).
        let g = |n: &str| p.get(&format!("{P}.gmp.{n}")).unwrap();
        let fr = rows(&f);
        let att = attn(&lin(&fr, g("wq"), g("bq")), &lin(&fr, g("wk"), g("bk")), &lin(&fr, g("wv"), g("bv")));
        let cat: Vec<Vec<f64>> = att.iter().map(|a| [a.clone(), a.clone()].concat()).collect();
        let fused = lin(&cat, g("fuse.w"), g("fuse.b"));
        let expect: Vec<Vec<f64>> = fr.iter().zip(&fused).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        assert!(max_diff(&expect, &got) < 1e-12);
    }

    #[test]
    fn zero_fusion_is_identity() {
        let cfg = AmiConfig { n_tokens: 3, ..Default::default() };
        let mut p = params(4, &cfg, 31);
        p.get_mut(&format!("{P}.gmp.fuse.w")).unwrap().data_mut().fill(0.0);
        let (fi, fo) = (random_matrix(3, 4, 32), random_matrix(3, 4, 33));
        assert_eq!(run_gmp(&p, &fi, &fo), fi);
    }

    fn embed_oracle(h: &Tensor, f: &Tensor, p: &Params) -> Vec<Vec<f64>> {
        let logits = lin(&rows(h), p.get(&format!("{P}.embed.w")).unwrap(), p.get(&format!("{P}.embed.b")).unwrap());
        mm(&softmax_rows(&logits), &rows(f))
    }

    fn run_embed(p: &Params, h: &Tensor, f: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let (hv, fv) = (tape.constant(h.clone()), tape.constant(f.clone()));
        let e = embed_tokens(&mut tape, &b, P, hv, fv).unwrap();
        (tape.value(e.delta).clone(), tape.value(e.weights).clone())
    }

    #[test]
    fn single_token_broadcasts() {
        let cfg = AmiConfig { n_tokens: 1, ..Default::default() };
        let p = params(4, &cfg, 41);
        let f = random_matrix(1, 4, 42);
        let (delta, _) = run_embed(&p, &random_matrix(7, 4, 43), &f);
        for r in 0..7 {
            assert_eq!(delta.row(r), f.row(0));
        }
    }

    #[test]
    fn zero_tokens_embed_to_zero() {
        let cfg = AmiConfig { n_tokens: 3, ..Default::default() };
        let p = params(4, &cfg, 51);
        let (delta, _) = run_embed(&p, &random_matrix(7, 4, 52), &Tensor::zeros(&[3, 4]));
        assert!(delta.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_tokens_matches_oracle() {
        let cfg = AmiConfig { n_tokens: 4, ..Default::default() };
        let mut p = params(4, &cfg, 61);
        randomize_biases(&mut p, 610);
        let (h, f) = (random_matrix(10, 4, 62), random_matrix(4, 4, 63));
        let (delta, w) = run_embed(&p, &h, &f);
        assert!(max_diff(&embed_oracle(&h, &f, &p), &delta) < 1e-12);
        for r in 0..10 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_inputs_and_fusion_give_zero_delta() {
        let cfg = AmiConfig { n_tokens: 3, ..Default::default() };
        let mut p = params(4, &cfg, 71);
        p.get_mut(&format!("{P}.gmp.fuse.w")).unwrap().data_mut().fill(0.0);
        let zero = Tensor::zeros(&[6, 4]);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let (a, o) = (tape.constant(zero.clone()), tape.constant(zero));
        let out = ami_forward(&mut tape, &b, P, &cfg, a, o).unwrap();
        assert!(tape.value(out.delta).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pair_equals_two_directed_calls() {
        for variant in [AmiVariant::Full, AmiVariant::TokensOnly, AmiVariant::PerceptorOnly] {
            let cfg = AmiConfig { n_tokens: 3, heads: 2, variant };
            let mut p = params(4, &cfg, 81);
            randomize_biases(&mut p, 810);
            let (a, c) = (random_matrix(8, 4, 82), random_matrix(8, 4, 83));
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let (av, cv) = (tape.constant(a), tape.constant(c));
            let ab = ami_forward(&mut tape, &b, P, &cfg, av, cv).unwrap();
            let ba = ami_forward(&mut tape, &b, P, &cfg, cv, av).unwrap();
            let (pr, px) = ami_pair(&mut tape, &b, P, &cfg, av, cv).unwrap();
            assert_eq!(tape.value(ab.delta), tape.value(pr.delta), "{variant:?}");
            assert_eq!(tape.value(ba.delta), tape.value(px.delta), "{variant:?}");
            let (sr, sx) = ami_pair(&mut tape, &b, P, &cfg, cv, av).unwrap();
            assert_eq!(tape.value(sr.delta), tape.value(px.delta));
            assert_eq!(tape.value(sx.delta), tape.value(pr.delta));
        }
    }

    #[test]
    fn default_size_and_no_sequence_square_matrix() {
        let cfg = AmiConfig::default();
        let p = params(64, &cfg, 91);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let before = tape.len();
        let (a, c) = (tape.constant(random_matrix(96, 64, 92)), tape.constant(random_matrix(96, 64, 93)));
        let out = ami_forward(&mut tape, &b, P, &cfg, a, c).unwrap();
        assert_eq!(tape.shape(out.delta), &[96, 64]);
        let largest = tape
            .shapes()
            .skip(before)
            .filter(|s| s.len() == 2)
            .map(|s| s[0].min(s[1]))
            .max()
            .unwrap();
        assert!(largest < 96, "an N x N-sized value was formed");
    }

    #[test]
    fn q_attention_rows_are_normalized() {
        let cfg = AmiConfig { n_tokens: 3, ..Default::default() };
        let p = params(4, &cfg, 95);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let (a, c) = (tape.constant(random_matrix(3, 4, 96)), tape.constant(random_matrix(3, 4, 97)));
        let w = q_attention_weights(&mut tape, &b, P, a, c).unwrap();
        for r in 0..3 {
            assert!((tape.value(w[0]).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_through_full_module() {
        let cfg = AmiConfig { n_tokens: 3, heads: 2, variant: AmiVariant::Full };
        let mut p = params(4, &cfg, 101);
        randomize_biases(&mut p, 1010);
        p.insert("in.r", random_matrix(6, 4, 102), true).unwrap();
        p.insert("in.x", random_matrix(6, 4, 103), true).unwrap();
        let target = random_matrix(6, 4, 104);
        let err = grad_check(
            |t, b| {
                let (r, x) = (b.get("in.r")?, b.get("in.x")?);
                let (dr, dx) = ami_pair(t, b, P, &cfg, r, x)?;
                let tv = t.constant(target.clone());
                let m1 = t.mul(dr.delta, tv)?;
                let m2 = t.mul(dx.delta, dx.delta)?;
                let s1 = t.sum(m1);
                let s2 = t.sum(m2);
                t.add(s1, s2)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
