//! Adjoint rules. Every rule is written with differentiable `Var` operations
//! so that a recorded backward pass can itself be differentiated.

use std::sync::Arc;

use crate::tape::{Axis, Op, Tape};
use crate::{Result, Var};

/// Contributions to each input of `op` (in `Op::inputs` order) given the
/// adjoint `g` of its output. Inputs with `need[i] == false` get `None`.
pub(crate) fn rule(
    tape: &Tape,
    op: &Op,
    out: usize,
    g: &Var,
    need: &[bool],
) -> Result<Vec<Option<Var>>> {
    let v = |id: usize| tape.var(id);
    let shape_of = |id: usize| tape.value(id).shape().to_vec();
    let when = |i: usize, f: &dyn Fn() -> Result<Var>| -> Result<Option<Var>> {
        if need[i] {
            f().map(Some)
        } else {
            Ok(None)
        }
    };

    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add(_, _) => vec![when(0, &|| Ok(g.clone()))?, when(1, &|| Ok(g.clone()))?],
        Op::Sub(_, _) => vec![when(0, &|| Ok(g.clone()))?, when(1, &|| g.neg())?],
        Op::Mul(a, b) => vec![when(0, &|| g.mul(&v(*b)))?, when(1, &|| g.mul(&v(*a)))?],
        Op::Neg(_) => vec![when(0, &|| g.neg())?],
        Op::Scale(_, c) => vec![when(0, &|| g.scale(*c))?],
        Op::AddConst(_) => vec![Some(g.clone())],
        Op::MulConst(_, c) => vec![when(0, &|| g.mul_const(c.clone()))?],
        Op::MatMul { a, b, batch, ta, tb } => {
            let (av, bv, n) = (v(*a), v(*b), *batch);
            match (ta, tb) {
                (false, false) => vec![
                    when(0, &|| g.bmm(&bv, n, false, true))?,
                    when(1, &|| av.bmm(g, n, true, false))?,
                ],
                (true, false) => vec![
                    when(0, &|| bv.bmm(g, n, false, true))?,
                    when(1, &|| av.bmm(g, n, false, false))?,
                ],
                (false, true) => vec![
                    when(0, &|| g.bmm(&bv, n, false, false))?,
                    when(1, &|| g.bmm(&av, n, true, false))?,
                ],
                (true, true) => vec![
                    when(0, &|| bv.bmm(g, n, true, true))?,
                    when(1, &|| g.bmm(&av, n, true, true))?,
                ],
            }
        }
        Op::Transpose(_) => vec![when(0, &|| g.transpose())?],
        Op::Reshape(a) => vec![when(0, &|| g.reshape(&shape_of(*a)))?],
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for (i, &p) in parts.iter().enumerate() {
                let t = tape.value(p);
                let len = if *axis == Axis::Rows { t.rows() } else { t.cols() };
                grads.push(when(i, &|| g.slice(*axis, start, len))?);
                start += len;
            }
            grads
        }
        Op::Slice { a, axis, start } => {
            let t = tape.value(*a);
            let total = if *axis == Axis::Rows { t.rows() } else { t.cols() };
            vec![when(0, &|| g.place(*axis, *start, total))?]
        }
        Op::Place { a, axis, start } => {
            let t = tape.value(*a);
            let len = if *axis == Axis::Rows { t.rows() } else { t.cols() };
            vec![when(0, &|| g.slice(*axis, *start, len))?]
        }
        Op::GatherRows { a, idx } => {
            let n = tape.value(*a).rows();
            vec![when(0, &|| g.scatter_add_rows(idx, n))?]
        }
        Op::ScatterAddRows { idx, .. } => vec![when(0, &|| g.gather_rows(idx))?],
        Op::PickCols { a, idx } => {
            let cols = tape.value(*a).cols();
            vec![when(0, &|| g.place_picks(idx.clone(), cols))?]
        }
        Op::PlacePicks { idx, .. } => vec![when(0, &|| g.pick_cols(idx))?],
        Op::SumAll(a) => vec![when(0, &|| g.broadcast_scalar(&shape_of(*a)))?],
        Op::BroadcastScalar(a) => vec![when(0, &|| g.sum()?.reshape(&shape_of(*a)))?],
        Op::RowSum(a) => {
            let cols = tape.value(*a).cols();
            vec![when(0, &|| g.broadcast_cols(cols))?]
        }
        Op::BroadcastCols(_) => vec![when(0, &|| g.row_sum())?],
        Op::ColSum(a) => {
            let rows = tape.value(*a).rows();
            vec![when(0, &|| g.broadcast_rows(rows))?]
        }
        Op::BroadcastRows(a) => vec![when(0, &|| g.col_sum()?.reshape(&shape_of(*a)))?],
        Op::TileRows { times, .. } => vec![when(0, &|| g.untile_sum(*times))?],
        Op::UntileSum { times, .. } => vec![when(0, &|| g.tile_rows(*times))?],
        Op::SwapMid { a, dims: [b, m, n, z] } => {
            vec![when(0, &|| g.swap_mid(*b, *n, *m, *z)?.reshape(&shape_of(*a)))?]
        }
        Op::Exp(_) => vec![when(0, &|| g.mul(&v(out)))?],
        Op::Log(a) => vec![when(0, &|| g.mul(&v(*a).powf(-1.0)?))?],
        Op::Tanh(_) => {
            // d tanh = 1 - y^2
            vec![when(0, &|| {
                let y = v(out);
                g.sub(&g.mul(&y.mul(&y)?)?)
            })?]
        }
        Op::Pow(a, p) => vec![when(0, &|| {
            if *p == 1.0 {
                Ok(g.clone())
            } else {
                g.mul(&v(*a).powf(p - 1.0)?.scale(*p)?)
            }
        })?],
        Op::Relu(a) => {
            let mask = Arc::new(tape.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            vec![when(0, &|| g.mul_const(mask.clone()))?]
        }
        Op::Softmax(_) => vec![when(0, &|| {
            let y = v(out);
            let cols = y.value().cols();
            let gy = g.mul(&y)?;
            gy.sub(&y.mul(&gy.row_sum()?.broadcast_cols(cols)?)?)
        })?],
        Op::LogSoftmax(_) => vec![when(0, &|| {
            let p = v(out).exp()?;
            let cols = p.value().cols();
            g.sub(&p.mul(&g.row_sum()?.broadcast_cols(cols)?)?)
        })?],
        Op::Unfold { geom, .. } => vec![when(0, &|| g.fold(*geom))?],
        Op::Fold { geom, .. } => vec![when(0, &|| g.unfold(*geom))?],
    })
}

