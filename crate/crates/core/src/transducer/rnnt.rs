//! Exact transducer loss by forward-backward over the alignment lattice,
//! plus an enumeration oracle.

use crate::error::{Error, Result};
use crate::graph::log_sum_exp;
use crate::tensor::Real;

/// Borrowed `[T, U+1, V+1]` table of log-probabilities.
#[derive(Clone, Copy)]
pub struct LatticeView<'a, T> {
    data: &'a [T],
    frames: usize,
    u1: usize,
    width: usize,
}

impl<'a, T: Real> LatticeView<'a, T> {
    pub fn new(data: &'a [T], frames: usize, u1: usize, width: usize) -> Result<Self> {
        if data.len() != frames * u1 * width || u1 == 0 || width < 2 {
            return Err(Error::Format {
                what: "transducer lattice",
                reason: format!(
                    "{} values for T={frames}, U+1={u1}, V+1={width}",
                    data.len()
                ),
            });
        }
        Ok(Self {
            data,
            frames,
            u1,
            width,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn label_positions(&self) -> usize {
        self.u1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> T {
        self.data[(t * self.u1 + u) * self.width + k]
    }

    #[inline]
    fn offset(&self, t: usize, u: usize, k: usize) -> usize {
        (t * self.u1 + u) * self.width + k
    }
}

fn check<T: Real>(lat: &LatticeView<'_, T>, labels: &[usize], blank: usize) -> Result<()> {
    if lat.u1 != labels.len() + 1 {
        return Err(Error::LatticeMismatch {
            lattice: lat.u1,
            labels: labels.len() + 1,
        });
    }
    if lat.frames == 0 {
        return Err(Error::ImpossibleAlignment {
            labels: labels.len(),
            frames: 0,
        });
    }
    if blank >= lat.width {
        return Err(Error::TokenOutOfRange {
            token: blank,
            vocab: lat.width,
        });
    }
    for &y in labels {
        if y >= lat.width || y == blank {
            return Err(Error::TokenOutOfRange {
                token: y,
                vocab: lat.width - 1,
            });
        }
    }
    Ok(())
}

fn lse2<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward variables `alpha[t*(U+1) + u]`.
pub fn forward_variables<T: Real>(lat: &LatticeView<'_, T>, labels: &[usize], blank: usize) -> Vec<T> {
    let (tn, u1) = (lat.frames, lat.u1);
    let mut alpha = vec![T::neg_infinity(); tn * u1];
    for t in 0..tn {
        for u in 0..u1 {
            let a = if t == 0 && u == 0 {
                T::zero()
            } else {
                let from_time = if t > 0 {
                    alpha[(t - 1) * u1 + u] + lat.at(t - 1, u, blank)
                } else {
                    T::neg_infinity()
                };
                let from_label = if u > 0 {
                    alpha[t * u1 + u - 1] + lat.at(t, u - 1, labels[u - 1])
                } else {
                    T::neg_infinity()
                };
                lse2(from_time, from_label)
            };
            alpha[t * u1 + u] = a;
        }
    }
    alpha
}

/// Backward variables `beta[t*(U+1) + u]`: log-probability of finishing the
/// alignment from lattice node `(t, u)`.
pub fn backward_variables<T: Real>(lat: &LatticeView<'_, T>, labels: &[usize], blank: usize) -> Vec<T> {
    let (tn, u1) = (lat.frames, lat.u1);
    let mut beta = vec![T::neg_infinity(); tn * u1];
    for t in (0..tn).rev() {
        for u in (0..u1).rev() {
            let b = if t == tn - 1 && u == u1 - 1 {
                lat.at(t, u, blank)
            } else {
                let via_blank = if t + 1 < tn {
                    beta[(t + 1) * u1 + u] + lat.at(t, u, blank)
                } else {
                    T::neg_infinity()
                };
                let via_label = if u + 1 < u1 {
                    beta[t * u1 + u + 1] + lat.at(t, u, labels[u])
                } else {
                    T::neg_infinity()
                };
                lse2(via_blank, via_label)
            };
            beta[t * u1 + u] = b;
        }
    }
    beta
}

/// `-log P(y|x)` and its gradient with respect to every lattice entry.
pub fn loss_and_grad<T: Real>(lat: &LatticeView<'_, T>, labels: &[usize], blank: usize) -> Result<(T, Vec<T>)> {
    check(lat, labels, blank)?;
    let (tn, u1) = (lat.frames, lat.u1);
    let alpha = forward_variables(lat, labels, blank);
    let beta = backward_variables(lat, labels, blank);
    let log_p = alpha[(tn - 1) * u1 + u1 - 1] + lat.at(tn - 1, u1 - 1, blank);
    let mut grad = vec![T::zero(); lat.data.len()];
    for t in 0..tn {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            let blank_next = if t + 1 < tn {
                beta[(t + 1) * u1 + u]
            } else if u == u1 - 1 {
                T::zero()
            } else {
                T::neg_infinity()
            };
            grad[lat.offset(t, u, blank)] = -(a + lat.at(t, u, blank) + blank_next - log_p).exp();
            if u + 1 < u1 {
                let k = labels[u];
                grad[lat.offset(t, u, k)] = -(a + lat.at(t, u, k) + beta[t * u1 + u + 1] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

pub fn loss<T: Real>(lat: &LatticeView<'_, T>, labels: &[usize], blank: usize) -> Result<T> {
    check(lat, labels, blank)?;
    let (tn, u1) = (lat.frames, lat.u1);
    let alpha = forward_variables(lat, labels, blank);
    Ok(-(alpha[(tn - 1) * u1 + u1 - 1] + lat.at(tn - 1, u1 - 1, blank)))
}

/// Loss by direct enumeration of every alignment, with the number of
/// alignments visited. Only for `T + U <= 12`.
pub fn loss_bruteforce(lat: &LatticeView<'_, f64>, labels: &[usize], blank: usize) -> Result<(f64, usize)> {
    check(lat, labels, blank)?;
    let (tn, un) = (lat.frames, labels.len());
    if tn + un > 12 {
        return Err(Error::TooLarge(tn + un));
    }
    // Each alignment is T-1+U free moves (label placements chosen among
    // them) followed by the closing blank at (T-1, U).
    let moves = tn - 1 + un;
    let mut path_logs = Vec::new();
    for bits in 0u32..(1u32 << moves) {
        if bits.count_ones() as usize != un {
            continue;
        }
        let (mut t, mut u, mut lp) = (0usize, 0usize, 0.0f64);
        for step in 0..moves {
            if bits >> step & 1 == 1 {
                lp += lat.at(t, u, labels[u]);
                u += 1;
            } else {
                lp += lat.at(t, u, blank);
                t += 1;
            }
        }
        debug_assert!(t == tn - 1 && u == un);
        lp += lat.at(t, u, blank);
        path_logs.push(lp);
    }
    Ok((-log_sum_exp(&path_logs), path_logs.len()))
}
