//! Elementwise operators, reductions, reshape, and concatenation.

use super::{Real, Tensor};
use crate::{Error, Result};

fn require_same_shape<S: Real>(what: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<Vec<usize>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa != sb {
        return Err(Error::Shape(format!("{what}: shape {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

pub fn add<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = require_same_shape("add", a, b)?;
    let data: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            pa.add_grad(|ga| ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
            pb.add_grad(|gb| gb.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
        }),
    ))
}

pub fn sub<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = require_same_shape("sub", a, b)?;
    let data: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            pa.add_grad(|ga| ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
            pb.add_grad(|gb| gb.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi));
        }),
    ))
}

/// Elementwise product. Safe when both arguments are the same tensor: parent
/// values are snapshotted before gradients are written.
pub fn mul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = require_same_shape("mul", a, b)?;
    let data: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let bd = pb.to_vec();
            pa.add_grad(|ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
            });
            let ad = pa.to_vec();
            pb.add_grad(|gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            });
        }),
    ))
}

pub fn scale<S: Real>(a: &Tensor<S>, c: f64) -> Tensor<S> {
    let cs = S::from_f64(c);
    let data: Vec<S> = a.data().iter().map(|&x| x * cs).collect();
    let pa = a.clone();
    Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone()],
        Box::new(move |g, _| {
            pa.add_grad(|ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * cs;
                }
            })
        }),
    )
}

/// Reinterpret the buffer under a new shape of equal element count.
pub fn reshape<S: Real>(a: &Tensor<S>, new_shape: &[usize]) -> Result<Tensor<S>> {
    let n: usize = new_shape.iter().product();
    if n != a.numel() {
        return Err(Error::Shape(format!(
            "reshape: {:?} ({} elements) to {:?} ({} elements)",
            a.shape(),
            a.numel(),
            new_shape,
            n
        )));
    }
    let pa = a.clone();
    Ok(Tensor::from_op(
        new_shape.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(move |g, _| {
            pa.add_grad(|ga| ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi))
        }),
    ))
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<S: Real>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat: no inputs".into()));
    }
    let base = parts[0].shape();
    if axis >= base.len() {
        return Err(Error::Shape(format!("concat: axis {axis} out of range for rank {}", base.len())));
    }
    let mut axis_total = 0usize;
    for p in parts {
        let s = p.shape();
        if s.len() != base.len()
            || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(Error::Shape(format!("concat: shape {s:?} incompatible with {base:?}")));
        }
        axis_total += s[axis];
    }
    let mut shape = base.clone();
    shape[axis] = axis_total;

    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let row = axis_total * inner;

    let mut data = vec![S::zero(); outer * row];
    for o in 0..outer {
        let mut off = o * row;
        for (p, &blk) in parts.iter().zip(&blocks) {
            let pd = p.data();
            data[off..off + blk].copy_from_slice(&pd[o * blk..(o + 1) * blk]);
            off += blk;
        }
    }

    let owned: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
    let handles = owned.clone();
    Ok(Tensor::from_op(
        shape,
        data,
        owned,
        Box::new(move |g, _| {
            let mut start = 0usize;
            for (p, &blk) in handles.iter().zip(&blocks) {
                p.add_grad(|gp| {
                    for o in 0..outer {
                        let src = &g[o * row + start..o * row + start + blk];
                        let dst = &mut gp[o * blk..(o + 1) * blk];
                        dst.iter_mut().zip(src).for_each(|(d, &gi)| *d += gi);
                    }
                });
                start += blk;
            }
        }),
    ))
}

impl<S: Real> Tensor<S> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<S> {
        let total: S = self.data().iter().copied().sum();
        let pa = self.clone();
        Tensor::from_op(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| {
                let gi = g[0];
                pa.add_grad(|ga| ga.iter_mut().for_each(|d| *d += gi));
            }),
        )
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel().max(1);
        scale(&self.sum(), 1.0 / n as f64)
    }

    /// Leaky rectifier with the given negative slope; the derivative at zero
    /// takes the negative-side slope.
    pub fn leaky_relu(&self, slope: f64) -> Tensor<S> {
        let a = S::from_f64(slope);
        let data: Vec<S> = self.data().iter().map(|&x| if x > S::zero() { x } else { x * a }).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g, out| {
                pa.add_grad(|ga| {
                    for i in 0..g.len() {
                        // out keeps the sign of the input for any slope > 0.
                        let d = if out[i] > S::zero() { S::one() } else { a };
                        ga[i] += g[i] * d;
                    }
                })
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&x| {
                if x >= S::zero() {
                    S::one() / (S::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (S::one() + e)
                }
            })
            .collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g, out| {
                pa.add_grad(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (S::one() - out[i]);
                    }
                })
            }),
        )
    }

    pub fn tanh_act(&self) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&x| x.tanh()).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g, out| {
                pa.add_grad(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (S::one() - out[i] * out[i]);
                    }
                })
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_mul_values() {
        let a = Tensor::<f64>::constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::constant(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]);
        assert_eq!(add(&a, &b).unwrap().to_vec(), vec![11.0, 22.0, 33.0, 44.0]);
        assert_eq!(mul(&a, &b).unwrap().to_vec(), vec![10.0, 40.0, 90.0, 160.0]);
        assert!(add(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn concat_axis1_blocks() {
        let a = Tensor::<f64>::constant(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::constant(&[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(
            c.to_vec(),
            vec![1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
    }

    #[test]
    fn concat_gradient_splits() {
        let a = Tensor::<f64>::param(&[1, 2], vec![1.0, 2.0]);
        let b = Tensor::<f64>::param(&[1, 3], vec![3.0, 4.0, 5.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        let w = Tensor::<f64>::constant(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        mul(&c, &w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::<f32>::constant(&[2], vec![-200.0, 200.0]);
        let y = x.sigmoid().to_vec();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 1.0);
    }
}
