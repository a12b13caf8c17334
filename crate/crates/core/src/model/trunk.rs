use moth_tensor::{Scalar, Tape, Var};

use super::{Forward, Model, LN_EPS};
use crate::error::{Error, Result};
use crate::layout::{AttentionMask, Expert, SpanKind, SpanLayout};

/// Run all trunk layers. Returns the input tokens followed by the output of
/// every layer.
///
/// Each expert updates only its own rows. Its queries come from those rows;
/// its keys and values cover every row up to the end of its span, projected
/// with its own matrices. With `insulate` set, rows owned by upstream experts
/// enter through [`Tape::detach`].
pub fn trunk_forward<T: Scalar>(
    m: &Model<T>,
    tape: &mut Tape<'_, T>,
    tokens: Var,
    layout: &SpanLayout,
    mask: &AttentionMask,
    insulate: bool,
) -> Result<Vec<Var>> {
    let c = &m.config;
    let total = layout.total();
    if tape.shape(tokens) != [total, c.width] {
        return Err(Error::Layout(format!(
            "tokens have shape {:?}, layout needs [{total}, {}]",
            tape.shape(tokens),
            c.width
        )));
    }
    if mask.size() != total {
        return Err(Error::Layout(format!("mask size {} differs from layout total {total}", mask.size())));
    }

    let mut experts = Vec::with_capacity(3);
    for e in Expert::ALL {
        if let Some((start, len)) = layout.expert_rows(e) {
            let ids = m.ids.expert(e).ok_or_else(|| Error::invalid(format!("{e:?} expert is disabled")))?;
            experts.push((start, len, ids, mask.block(start, len, start + len)));
        }
    }

    let dh = c.width / c.heads;
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut h = tokens;
    let mut states = vec![h];
    for l in 0..c.depth {
        let mut outs = Vec::with_capacity(experts.len());
        for (start, len, ids, block) in &experts {
            let (start, len) = (*start, *len);
            let end = start + len;
            let blk = &ids.layers[l];
            let own = if len == total { h } else { tape.slice_rows(h, start, len)? };
            let ctx = if start == 0 {
                own
            } else {
                let mut up = tape.slice_rows(h, 0, start)?;
                if insulate {
                    up = tape.detach(up);
                }
                tape.concat_rows(&[up, own])?
            };

            let (g, b) = (tape.param(blk.ln1.0), tape.param(blk.ln1.1));
            let n = tape.layer_norm(ctx, g, b, LN_EPS)?;
            let n_own = if start == 0 { n } else { tape.slice_rows(n, start, len)? };
            let wq = tape.param(blk.wq);
            let wk = tape.param(blk.wk);
            let wv = tape.param(blk.wv);
            let q = tape.matmul(n_own, wq)?;
            let k = tape.matmul(n, wk)?;
            let v = tape.matmul(n, wv)?;

            let mut heads = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let (qh, kh, vh) = if c.heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, hd * dh, dh)?,
                        tape.slice_cols(k, hd * dh, dh)?,
                        tape.slice_cols(v, hd * dh, dh)?,
                    )
                };
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, inv_sqrt);
                let p = tape.masked_softmax(s, block.clone())?;
                heads.push(tape.matmul(p, vh)?);
            }
            let a = if heads.len() == 1 { heads[0] } else { tape.concat_lastdim(&heads)? };
            let wo = tape.param(blk.wo);
            let a = tape.matmul(a, wo)?;
            let h1 = tape.add(own, a)?;

            let (g, b) = (tape.param(blk.ln2.0), tape.param(blk.ln2.1));
            let f = tape.layer_norm(h1, g, b, LN_EPS)?;
            let (w1, b1) = (tape.param(blk.ff1.0), tape.param(blk.ff1.1));
            let f = tape.matmul(f, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let (w2, b2) = (tape.param(blk.ff2.0), tape.param(blk.ff2.1));
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            outs.push(tape.add(h1, f)?);
            debug_assert!(end <= total);
        }
        h = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        states.push(h);
    }
    Ok(states)
}

/// Final-layer hidden states at the rows of `span`.
pub fn read_hidden<T: Scalar>(tape: &mut Tape<'_, T>, fwd: &Forward, span: SpanKind) -> Result<Var> {
    let s = fwd
        .layout
        .span(span)
        .ok_or_else(|| Error::Layout(format!("{span:?} span is not in this sequence")))?;
    Ok(tape.slice_rows(fwd.last(), s.start, s.len)?)
}
