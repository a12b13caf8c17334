use moth_tensor::{Scalar, Tape, Var};

use super::{ExpertIds, FlowInput, Model, Query, HAND_DIM};
use crate::error::{Error, Result};
use crate::layout::{SpanKind, SpanLayout};
use crate::waypoint::dequantize;

/// One visual token: the quantized position and attributes of an object,
/// or padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectToken {
    Object { bins: [usize; 3], shape: usize, color: usize },
    Pad,
}

const FOURIER_BANDS: usize = 8;
pub const FOURIER_FEATURES: usize = 3 * (1 + 2 * FOURIER_BANDS);

/// `[v, sin(2ᵏπv), cos(2ᵏπv)]` for each axis and `k = 0..8`; the top band
/// has a period of 1/128 of the unit range.
pub fn fourier_features(p: [f64; 3]) -> [f64; FOURIER_FEATURES] {
    let mut out = [0.0; FOURIER_FEATURES];
    let per = 1 + 2 * FOURIER_BANDS;
    for (a, &v) in p.iter().enumerate() {
        let o = a * per;
        out[o] = v;
        for k in 0..FOURIER_BANDS {
            let (s, c) = (std::f64::consts::PI * (1u32 << k) as f64 * v).sin_cos();
            out[o + 1 + 2 * k] = s;
            out[o + 2 + 2 * k] = c;
        }
    }
    out
}

/// Sinusoidal embedding of a flow time in `[0, 1]`, scaled by 1000 so the
/// lowest frequency spans many periods over the unit interval.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn constant<T: Scalar>(tape: &mut Tape<'_, T>, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<Var> {
    Ok(tape.constant_from(shape, data.into_iter().map(T::from_f64).collect())?)
}

fn object_block<T: Scalar>(m: &Model<T>, tape: &mut Tape<'_, T>, objects: &[ObjectToken]) -> Result<Var> {
    let c = &m.config;
    if objects.len() != c.n_img {
        return Err(Error::invalid(format!("{} object tokens, layout needs {}", objects.len(), c.n_img)));
    }
    let mut feats = Vec::with_capacity(c.n_img * FOURIER_FEATURES);
    let mut shapes = Vec::with_capacity(c.n_img);
    let mut colors = Vec::with_capacity(c.n_img);
    for o in objects {
        match *o {
            ObjectToken::Object { bins, shape, color } => {
                if shape >= c.shapes || color >= c.colors {
                    return Err(Error::invalid(format!("object attributes ({shape}, {color}) out of range")));
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let [lo, hi] = c.coord_range[a];
                    p[a] = dequantize(bins[a], lo, hi, c.bins)?;
                }
                feats.extend(fourier_features(p));
                shapes.push(shape);
                colors.push(color);
            }
            ObjectToken::Pad => {
                feats.extend([0.0; FOURIER_FEATURES]);
                shapes.push(c.shapes);
                colors.push(c.colors);
            }
        }
    }
    let f = constant(tape, &[c.n_img, FOURIER_FEATURES], feats)?;
    let (w, b) = (tape.param(m.ids.obj.0), tape.param(m.ids.obj.1));
    let x = tape.matmul(f, w)?;
    let x = tape.add_row(x, b)?;
    let se = tape.param(m.ids.shape_emb);
    let s = tape.embedding(se, &shapes)?;
    let ce = tape.param(m.ids.color_emb);
    let col = tape.embedding(ce, &colors)?;
    let x = tape.add(x, s)?;
    Ok(tape.add(x, col)?)
}

fn text_block<T: Scalar>(m: &Model<T>, tape: &mut Tape<'_, T>, text: Option<&[usize]>) -> Result<Var> {
    match text {
        Some(tokens) => {
            if tokens.len() != m.config.n_txt {
                return Err(Error::invalid(format!(
                    "{} text tokens, layout needs {}",
                    tokens.len(),
                    m.config.n_txt
                )));
            }
            let table = tape.param(m.ids.txt_emb);
            Ok(tape.embedding(table, tokens)?)
        }
        None => Ok(tape.param(m.ids.null_txt)),
    }
}

/// Fourier features of dequantized waypoints, one row per entry.
fn plan_features<T: Scalar>(m: &Model<T>, tape: &mut Tape<'_, T>, waypoints: &[[usize; 3]]) -> Result<Var> {
    let c = &m.config;
    let mut feats = Vec::with_capacity(waypoints.len() * FOURIER_FEATURES);
    for w in waypoints {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let [lo, hi] = c.coord_range[a];
            p[a] = dequantize(w[a], lo, hi, c.bins)?;
        }
        feats.extend(fourier_features(p));
    }
    constant(tape, &[waypoints.len(), FOURIER_FEATURES], feats)
}

fn traj_block<T: Scalar>(m: &Model<T>, tape: &mut Tape<'_, T>, waypoints: &[[usize; 3]]) -> Result<Var> {
    let h = m.config.horizon;
    let ids = m.ids.traj.as_ref().ok_or_else(|| Error::invalid("model has no waypoint span"))?;
    if waypoints.len() + 1 < h {
        return Err(Error::invalid(format!("{} waypoints fed, need {}", waypoints.len(), h - 1)));
    }
    let query = tape.param(ids.query);
    let begin = tape.param(ids.begin);
    let prev = if h > 1 {
        let f = plan_features(m, tape, &waypoints[..h - 1])?;
        let pw = tape.param(ids.pos);
        let mut sum = tape.matmul(f, pw)?;
        for (a, &table) in ids.axis_emb.iter().enumerate() {
            let idx: Vec<usize> = waypoints[..h - 1].iter().map(|w| w[a]).collect();
            let t = tape.param(table);
            let e = tape.embedding(t, &idx)?;
            sum = tape.add(sum, e)?;
        }
        tape.concat_rows(&[begin, sum])?
    } else {
        begin
    };
    Ok(tape.add(query, prev)?)
}

fn flow_block<T: Scalar>(
    m: &Model<T>,
    tape: &mut Tape<'_, T>,
    ids: &ExpertIds,
    flow: &FlowInput<'_>,
    waypoints: Option<&[[usize; 3]]>,
    dim: usize,
) -> Result<Var> {
    let input = ids.input.expect("flow expert has an input projection");
    let h = m.config.horizon;
    if flow.x.len() != h * dim {
        return Err(Error::invalid(format!("flow state has {} values, need {}", flow.x.len(), h * dim)));
    }
    if !flow.x.iter().all(|v| v.is_finite()) || !flow.t.is_finite() {
        return Err(Error::NonFinite("flow state".into()));
    }
    let x = constant(tape, &[h, dim], flow.x.iter().copied())?;
    let (w, b) = (tape.param(input.0), tape.param(input.1));
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    let te = constant(tape, &[m.config.width], time_embedding(flow.t, m.config.width))?;
    let y = tape.add_row(y, te)?;
    match (ids.plan, waypoints) {
        (Some(pw), Some(wp)) if wp.len() >= h => {
            let f = plan_features(m, tape, &wp[..h])?;
            let pw = tape.param(pw);
            let p = tape.matmul(f, pw)?;
            Ok(tape.add(y, p)?)
        }
        (Some(_), _) => Err(Error::invalid(format!("flow spans need all {h} waypoints"))),
        (None, _) => Ok(y),
    }
}

pub(super) fn blocks<T: Scalar>(
    m: &Model<T>,
    tape: &mut Tape<'_, T>,
    layout: &SpanLayout,
    q: &Query<'_>,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(5);
    for span in layout.spans() {
        let b = match span.kind {
            SpanKind::Img => object_block(m, tape, q.objects)?,
            SpanKind::Txt => text_block(m, tape, q.text)?,
            SpanKind::Traj3d => traj_block(m, tape, q.waypoints.expect("layout follows query"))?,
            SpanKind::Mano => {
                let ids = m.ids.int.as_ref().expect("intention enabled");
                flow_block(m, tape, ids, q.mano.as_ref().expect("layout follows query"), q.waypoints, HAND_DIM)?
            }
            SpanKind::Action => {
                let action = q.action.as_ref().expect("layout follows query");
                flow_block(m, tape, &m.ids.fine, action, q.waypoints, m.config.action_dim)?
            }
        };
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_matches_reference() {
        let d = 16;
        for &t in &[0.0, 0.25, 1.0] {
            let e = time_embedding(t, d);
            for i in 0..d / 2 {
                let f = 10000f64.powf(-(i as f64) / (d / 2) as f64);
                assert!((e[i] - (1000.0 * t * f).sin()).abs() < 1e-12);
                assert!((e[d / 2 + i] - (1000.0 * t * f).cos()).abs() < 1e-12);
            }
        }
        assert_eq!(time_embedding(0.3, d), time_embedding(0.3, d));
        let diff: f64 = time_embedding(0.0, d)
            .iter()
            .zip(time_embedding(1.0, d))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn fourier_layout() {
        let f = fourier_features([0.5, 0.0, -1.0]);
        assert_eq!(f[0], 0.5);
        assert!((f[1] - 1.0).abs() < 1e-15);
        assert!((f[4] + 1.0).abs() < 1e-15, "cos(2π·0.5)");
        assert_eq!(f[17], 0.0);
        assert_eq!(f[34], -1.0);
        assert!((f[36] + 1.0).abs() < 1e-15, "cos(-π)");
    }
}
