//! Broadcasting and axis bookkeeping shared by the tape operators.

use super::{strides, Tensor};
use crate::error::{shape_err, Result};

/// Broadcast two same-rank shapes; each dimension must match or be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(format!("cannot broadcast {a:?} with {b:?}: rank differs")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(out).zip(s).map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st }).collect()
}

/// Visit every output index of a broadcast, passing `(out, a, b)` offsets.
pub fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = view_strides(a, out);
    let sb = view_strides(b, out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut oo = 0;
    for _ in 0..outer {
        for j in 0..last {
            f(oo + j, oa + j * la, ob + j * lb);
        }
        oo += last;
        // odometer over the leading axes
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sum a tensor of shape `from` down to a broadcast-compatible `to`.
pub fn sum_to(g: &Tensor, to: &[usize]) -> Tensor {
    if g.shape() == to {
        return g.clone();
    }
    let mut out = vec![0.0; to.iter().product()];
    let gd = g.data();
    for_each_broadcast(g.shape(), to, to, |o, t, _| out[t] += gd[o]);
    Tensor { shape: to.to_vec(), data: out }
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[1, 3, 4]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[3, 3]).is_err());
        assert!(broadcast_shape(&[3], &[1, 3]).is_err());
    }

    #[test]
    fn sum_to_reduces_broadcast_axes() {
        let g = Tensor::from_fn([2, 3, 2], |i| i as f64);
        let s = sum_to(&g, &[1, 3, 1]);
        assert_eq!(s.data(), &[0.0 + 1.0 + 6.0 + 7.0, 2.0 + 3.0 + 8.0 + 9.0, 4.0 + 5.0 + 10.0 + 11.0]);
    }

    #[test]
    fn visits_in_row_major_order() {
        let mut seen = vec![];
        for_each_broadcast(&[2, 2], &[2, 1], &[1, 2], |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen, vec![(0, 0, 0), (1, 0, 1), (2, 1, 0), (3, 1, 1)]);
    }
}
