use super::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Scaled dot-product attention with `heads` heads over column blocks.
///
/// `q` is `Nq x C`, `k` and `v` are `Nk x C`. Returns the `Nq x C` output and
/// the `Nq x Nk` weight matrix of every head.
pub fn attention_with_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (nq, c) = tape.value(q).dims2()?;
    let (nk, ck) = tape.value(k).dims2()?;
    let (nv, cv) = tape.value(v).dims2()?;
    if nk == 0 {
        return Err(Error::EmptyKeySet);
    }
    if ck != c || cv != c || nv != nk {
        return Err(shape_err(
            "attention",
            format!("Q {nq}x{c}, K {nk}x{ck}, V {nv}x{cv}"),
        ));
    }
    if heads == 0 || c % heads != 0 {
        return Err(shape_err(
            "attention",
            format!("{c} channels not divisible into {heads} heads"),
        ));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, h * dh, dh)?,
                tape.slice(k, 1, h * dh, dh)?,
                tape.slice(v, 1, h * dh, dh)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let w = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    Ok((out, weights))
}

pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    Ok(attention_with_weights(tape, q, k, v, heads)?.0)
}

/// Value-level [`attention`].
pub fn attention_values(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = attention(&mut tape, q, k, v, heads)?;
    Ok(tape.value(out).clone())
}
