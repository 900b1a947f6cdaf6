//! Direct stride-1 convolution.
//!
//! Every input plane is zero padded and flattened with the padded row stride
//! `wp`. Output position `q = r * wp + c` then reads input `q + ki * wp + kj`
//! for every tap, so each tap is one straight run over memory. Positions with
//! `c >= wo` fall in the padding columns; they are computed and discarded.
//!
//! The per-element summation order is fixed (input channel, then tap), so a
//! given machine always produces the same bits.

use super::tape::Conv2d;
use super::tensor::Real;

/// Output positions handled per register block.
const Q: usize = 32;

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    g: Conv2d,
    hp: usize,
    wp: usize,
    taps: Vec<usize>,
}

impl Layout {
    pub fn new(cin: usize, cout: usize, h: usize, w: usize, ho: usize, wo: usize, g: Conv2d) -> Self {
        let hp = h + g.pad_top + g.pad_bottom;
        let wp = w + g.pad_left + g.pad_right;
        let taps = (0..g.kh).flat_map(|ki| (0..g.kw).map(move |kj| ki * wp + kj)).collect();
        Self {
            cin,
            cout,
            h,
            w,
            ho,
            wo,
            g,
            hp,
            wp,
            taps,
        }
    }

    fn max_tap(&self) -> usize {
        (self.g.kh - 1) * self.wp + self.g.kw - 1
    }

    fn out_len(&self) -> usize {
        self.ho * self.wp
    }

    /// Padded plane length, with slack so a full block never reads past it.
    fn in_stride(&self) -> usize {
        self.hp * self.wp + self.g.kw - 1 + Q
    }

    /// Stride of the padded output-gradient planes used for the input gradient.
    fn grad_stride(&self) -> usize {
        self.hp * self.wp + self.max_tap() + Q
    }

    fn out_stride(&self) -> usize {
        self.out_len().div_ceil(Q) * Q
    }

    fn pad_input<T: Real>(&self, x: &[T], xp: &mut [T]) {
        let (stride, plane) = (self.in_stride(), self.h * self.w);
        xp.fill(T::zero());
        for c in 0..self.cin {
            let src = &x[c * plane..(c + 1) * plane];
            let dst = &mut xp[c * stride..(c + 1) * stride];
            for r in 0..self.h {
                let d0 = (r + self.g.pad_top) * self.wp + self.g.pad_left;
                dst[d0..d0 + self.w].copy_from_slice(&src[r * self.w..(r + 1) * self.w]);
            }
        }
    }

    /// Forward pass for one example: `out` is `cout x ho x wo`.
    pub fn forward<T: Real>(&self, x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
        let mut xp = vec![T::zero(); self.cin * self.in_stride()];
        self.pad_input(x, &mut xp);
        let os = self.out_stride();
        let mut flat = vec![T::zero(); self.cout * os];
        correlate(&xp, self.in_stride(), self.cin, weight, &self.taps, &mut flat, os, self.cout);
        let p = self.ho * self.wo;
        for c in 0..self.cout {
            for r in 0..self.ho {
                let src = &flat[c * os + r * self.wp..c * os + r * self.wp + self.wo];
                let dst = &mut out[c * p + r * self.wo..c * p + (r + 1) * self.wo];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[c];
                }
            }
        }
    }

    /// Accumulates the weight and input gradients of one example.
    pub fn backward<T: Real>(&self, x: &[T], weight: &[T], gy: &[T], gw: Option<&mut [T]>, gx: Option<&mut [T]>) {
        let p = self.ho * self.wo;
        let nt = self.taps.len();
        if let Some(gw) = gw {
            let mut xp = vec![T::zero(); self.cin * self.in_stride()];
            self.pad_input(x, &mut xp);
            // output gradient in the flat layout, zero in the discarded columns
            let os = self.out_stride();
            let mut dy = vec![T::zero(); self.cout * os];
            for c in 0..self.cout {
                for r in 0..self.ho {
                    dy[c * os + r * self.wp..c * os + r * self.wp + self.wo]
                        .copy_from_slice(&gy[c * p + r * self.wo..c * p + (r + 1) * self.wo]);
                }
            }
            weight_grad(&xp, self.in_stride(), self.cin, &dy, os, self.cout, &self.taps, gw);
        }
        if let Some(gx) = gx {
            // dx_pad[s] = sum_t w_t * dy[s - tap_t]; shifting dy right by the
            // largest tap turns that into a correlation with reversed offsets
            let f = self.max_tap();
            let ds = self.grad_stride();
            let mut d = vec![T::zero(); self.cout * ds];
            for c in 0..self.cout {
                for r in 0..self.ho {
                    let d0 = c * ds + f + r * self.wp;
                    d[d0..d0 + self.wo].copy_from_slice(&gy[c * p + r * self.wo..c * p + (r + 1) * self.wo]);
                }
            }
            let rev: Vec<usize> = self.taps.iter().map(|&t| f - t).collect();
            let mut wt = vec![T::zero(); weight.len()];
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    wt[(ci * self.cout + co) * nt..(ci * self.cout + co + 1) * nt]
                        .copy_from_slice(&weight[(co * self.cin + ci) * nt..(co * self.cin + ci + 1) * nt]);
                }
            }
            let len = self.hp * self.wp;
            let xs = len.div_ceil(Q) * Q;
            let mut flat = vec![T::zero(); self.cin * xs];
            correlate(&d, ds, self.cout, &wt, &rev, &mut flat, xs, self.cin);
            let plane = self.h * self.w;
            for c in 0..self.cin {
                for r in 0..self.h {
                    let s0 = c * xs + (r + self.g.pad_top) * self.wp + self.g.pad_left;
                    let dst = &mut gx[c * plane + r * self.w..c * plane + (r + 1) * self.w];
                    for (dv, &s) in dst.iter_mut().zip(&flat[s0..s0 + self.w]) {
                        *dv += s;
                    }
                }
            }
        }
    }
}

/// `out[o][q] += sum_i sum_t w[o][i][t] * x[i][q + taps[t]]` over every
/// position of `out` (length `os`, a multiple of `Q`).
#[allow(clippy::too_many_arguments)]
fn correlate<T: Real>(x: &[T], xs: usize, cin: usize, w: &[T], taps: &[usize], out: &mut [T], os: usize, cout: usize) {
    assert!(os % Q == 0 && out.len() >= cout * os && w.len() >= cout * cin * taps.len());
    assert!(taps.iter().all(|&t| t + os <= xs) && x.len() >= cin * xs);
    T::correlate(x, xs, cin, w, taps, out, os, cout);
}

/// `gw[o][i][t] += sum_q dy[o][q] * x[i][q + taps[t]]`.
#[allow(clippy::too_many_arguments)]
fn weight_grad<T: Real>(x: &[T], xs: usize, cin: usize, dy: &[T], os: usize, cout: usize, taps: &[usize], gw: &mut [T]) {
    assert!(os % Q == 0 && dy.len() >= cout * os && gw.len() >= cout * cin * taps.len());
    assert!(taps.iter().all(|&t| t + os <= xs) && x.len() >= cin * xs);
    T::weight_grad(x, xs, cin, dy, os, cout, taps, gw);
}

/// Largest block size in {8, 4, 2, 1} not above `rest`.
fn block(rest: usize) -> usize {
    match rest {
        8.. => 8,
        4..=7 => 4,
        2 | 3 => 2,
        _ => 1,
    }
}

/// Plane offset of every (input channel, tap) pair, in weight order.
fn offsets(cin: usize, xs: usize, taps: &[usize]) -> Vec<usize> {
    (0..cin).flat_map(|i| taps.iter().map(move |&t| i * xs + t)).collect()
}

/// Weights of output rows `co..co + CB`, one `CB`-array per (input, tap).
fn pack<T: Real, const CB: usize>(w: &[T], per_out: usize, co: usize) -> Vec<[T; CB]> {
    (0..per_out)
        .map(|k| std::array::from_fn(|c| w[(co + c) * per_out + k]))
        .collect()
}

/// Portable kernels; the checked path for every scalar type.
pub(crate) mod portable {
    use super::{block, offsets, pack, Q};
    use crate::neural::tensor::Real;

    #[allow(clippy::too_many_arguments)]
    pub fn correlate<T: Real>(x: &[T], xs: usize, cin: usize, w: &[T], taps: &[usize], out: &mut [T], os: usize, cout: usize) {
        let offs = offsets(cin, xs, taps);
        let mut co = 0;
        while co < cout {
            let cb = block(cout - co);
            match cb {
                8 => rows::<T, 8>(x, &pack(w, offs.len(), co), &offs, out, os, co),
                4 => rows::<T, 4>(x, &pack(w, offs.len(), co), &offs, out, os, co),
                2 => rows::<T, 2>(x, &pack(w, offs.len(), co), &offs, out, os, co),
                _ => rows::<T, 1>(x, &pack(w, offs.len(), co), &offs, out, os, co),
            }
            co += cb;
        }
    }

    fn rows<T: Real, const CB: usize>(x: &[T], packed: &[[T; CB]], offs: &[usize], out: &mut [T], os: usize, co: usize) {
        for q in (0..os).step_by(Q) {
            let mut acc = [[T::zero(); Q]; CB];
            for (wk, &o) in packed.iter().zip(offs) {
                let src = &x[q + o..q + o + Q];
                for (a, &wv) in acc.iter_mut().zip(wk) {
                    for (av, &sv) in a.iter_mut().zip(src) {
                        *av += wv * sv;
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                for (d, &v) in out[(co + c) * os + q..(co + c) * os + q + Q].iter_mut().zip(a) {
                    *d += v;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn weight_grad<T: Real>(x: &[T], xs: usize, cin: usize, dy: &[T], os: usize, cout: usize, taps: &[usize], gw: &mut [T]) {
        for (k, &o) in offsets(cin, xs, taps).iter().enumerate() {
            let (i, t) = (k / taps.len(), k % taps.len());
            let src = &x[o..o + os];
            for c in 0..cout {
                let row = &dy[c * os..(c + 1) * os];
                let mut lanes = [T::zero(); Q];
                for (s, d) in src.chunks_exact(Q).zip(row.chunks_exact(Q)) {
                    for l in 0..Q {
                        lanes[l] += d[l] * s[l];
                    }
                }
                gw[(c * cin + i) * taps.len() + t] += lanes.iter().copied().fold(T::zero(), |a, v| a + v);
            }
        }
    }
}

/// AVX-512 kernels for `f32`.
#[cfg(target_arch = "x86_64")]
pub(crate) mod avx512 {
    use super::{block, offsets, pack, Q};
    use std::arch::x86_64::*;

    const _: () = assert!(Q == 32);

    pub fn available() -> bool {
        is_x86_feature_detected!("avx512f")
    }

    /// # Safety
    /// Needs AVX-512F and the bounds asserted by `conv::correlate`.
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    pub unsafe fn correlate(x: &[f32], xs: usize, cin: usize, w: &[f32], taps: &[usize], out: &mut [f32], os: usize, cout: usize) {
        let offs = offsets(cin, xs, taps);
        let _ = xs;
        let mut co = 0;
        while co < cout {
            let cb = block(cout - co);
            match cb {
                8 => rows::<8>(x, &pack(w, offs.len(), co), &offs, out, os, co),
                4 => rows::<4>(x, &pack(w, offs.len(), co), &offs, out, os, co),
                2 => rows::<2>(x, &pack(w, offs.len(), co), &offs, out, os, co),
                _ => rows::<1>(x, &pack(w, offs.len(), co), &offs, out, os, co),
            }
            co += cb;
        }
    }

    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn rows<const CB: usize>(x: &[f32], packed: &[[f32; CB]], offs: &[usize], out: &mut [f32], os: usize, co: usize) {
        let xp = x.as_ptr();
        for q in (0..os).step_by(Q) {
            let mut lo = [_mm512_setzero_ps(); CB];
            let mut hi = [_mm512_setzero_ps(); CB];
            for (wk, &o) in packed.iter().zip(offs) {
                let a = _mm512_loadu_ps(xp.add(q + o));
                let b = _mm512_loadu_ps(xp.add(q + o + 16));
                for c in 0..CB {
                    let wv = _mm512_set1_ps(wk[c]);
                    lo[c] = _mm512_fmadd_ps(wv, a, lo[c]);
                    hi[c] = _mm512_fmadd_ps(wv, b, hi[c]);
                }
            }
            for c in 0..CB {
                let d = out.as_mut_ptr().add((co + c) * os + q);
                _mm512_storeu_ps(d, _mm512_add_ps(_mm512_loadu_ps(d), lo[c]));
                _mm512_storeu_ps(d.add(16), _mm512_add_ps(_mm512_loadu_ps(d.add(16)), hi[c]));
            }
        }
    }

    /// # Safety
    /// Needs AVX-512F and the bounds asserted by `conv::weight_grad`.
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    pub unsafe fn weight_grad(x: &[f32], xs: usize, cin: usize, dy: &[f32], os: usize, cout: usize, taps: &[usize], gw: &mut [f32]) {
        // tiles of positions keep the output-gradient rows in L1
        const TILE: usize = 512;
        let nt = taps.len();
        let offs = offsets(cin, xs, taps);
        for q0 in (0..os).step_by(TILE) {
            let len = TILE.min(os - q0);
            let mut co = 0;
            while co < cout {
                let cb = block(cout - co);
                for (k, &o) in offs.iter().enumerate() {
                    let (i, t) = (k / nt, k % nt);
                    let src = x.as_ptr().add(o + q0);
                    let d = dy.as_ptr().add(q0);
                    let sums = match cb {
                        8 => dots::<8>(src, d, len, os, co),
                        4 => dots::<4>(src, d, len, os, co),
                        2 => dots::<2>(src, d, len, os, co),
                        _ => dots::<1>(src, d, len, os, co),
                    };
                    for (c, s) in sums.iter().take(cb).enumerate() {
                        gw[((co + c) * cin + i) * nt + t] += s;
                    }
                }
                co += cb;
            }
        }
    }

    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn dots<const CB: usize>(src: *const f32, d: *const f32, len: usize, os: usize, co: usize) -> [f32; 8] {
        let mut acc = [_mm512_setzero_ps(); CB];
        for q in (0..len).step_by(16) {
            let xv = _mm512_loadu_ps(src.add(q));
            for c in 0..CB {
                acc[c] = _mm512_fmadd_ps(_mm512_loadu_ps(d.add((co + c) * os + q)), xv, acc[c]);
            }
        }
        let mut out = [0.0; 8];
        for c in 0..CB {
            out[c] = _mm512_reduce_add_ps(acc[c]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::uniform_tensor;

    fn naive(x: &[f64], w: &[f64], l: &Layout) -> Vec<f64> {
        let g = l.g;
        let mut out = vec![0.0; l.cout * l.ho * l.wo];
        for co in 0..l.cout {
            for r in 0..l.ho {
                for c in 0..l.wo {
                    let mut s = 0.0;
                    for ci in 0..l.cin {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let (ii, jj) = ((r + ki) as isize - g.pad_top as isize, (c + kj) as isize - g.pad_left as isize);
                                if ii >= 0 && jj >= 0 && (ii as usize) < l.h && (jj as usize) < l.w {
                                    s += w[((co * l.cin + ci) * g.kh + ki) * g.kw + kj] * x[(ci * l.h + ii as usize) * l.w + jj as usize];
                                }
                            }
                        }
                    }
                    out[(co * l.ho + r) * l.wo + c] = s;
                }
            }
        }
        out
    }

    fn cases() -> Vec<(usize, usize, usize, usize, Conv2d)> {
        vec![
            (3, 15, 11, 7, Conv2d::same(3)),
            (17, 8, 64, 47, Conv2d::same(3)),
            (1, 25, 9, 47, Conv2d::along_width(9)),
            (25, 16, 64, 1, Conv2d::causal_time(7)),
            (16, 2, 13, 1, Conv2d::pointwise()),
        ]
    }

    /// The vectorized f32 kernels agree with an f64 direct sum, and with the
    /// portable f32 path.
    #[test]
    fn fast_kernels_match_direct_sums() {
        for (k, (cin, cout, h, w, g)) in cases().into_iter().enumerate() {
            let (ho, wo) = g.output_hw(h, w).unwrap();
            let l = Layout::new(cin, cout, h, w, ho, wo, g);
            let x = uniform_tensor::<f64>(&[cin * h * w], 10 + k as u64).data;
            let wt = uniform_tensor::<f64>(&[cout * cin * g.kh * g.kw], 20 + k as u64).data;
            let gy = uniform_tensor::<f64>(&[cout * ho * wo], 30 + k as u64).data;
            let expected = naive(&x, &wt, &l);
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let wf: Vec<f32> = wt.iter().map(|&v| v as f32).collect();
            let gf: Vec<f32> = gy.iter().map(|&v| v as f32).collect();
            let mut out = vec![0f32; expected.len()];
            l.forward(&xf, &wf, &vec![0.0; cout], &mut out);
            let scale = (cin * g.kh * g.kw) as f64;
            for (a, b) in out.iter().zip(&expected) {
                assert!((f64::from(*a) - b).abs() < 1e-5 * scale, "case {k}: {a} vs {b}");
            }

            // backward in f64 (portable) against f32 (fast)
            let mut gw64 = vec![0.0; wt.len()];
            let mut gx64 = vec![0.0; x.len()];
            l.backward(&x, &wt, &gy, Some(&mut gw64), Some(&mut gx64));
            let mut gw32 = vec![0f32; wt.len()];
            let mut gx32 = vec![0f32; x.len()];
            l.backward(&xf, &wf, &gf, Some(&mut gw32), Some(&mut gx32));
            let pos = (ho * wo) as f64;
            for (a, b) in gw32.iter().zip(&gw64) {
                assert!((f64::from(*a) - b).abs() < 1e-5 * pos, "case {k} weight grad: {a} vs {b}");
            }
            for (a, b) in gx32.iter().zip(&gx64) {
                assert!((f64::from(*a) - b).abs() < 1e-5 * scale, "case {k} input grad: {a} vs {b}");
            }
            let mut gw_portable = vec![0f32; wt.len()];
            let xs = l.in_stride();
            let mut xp = vec![0f32; cin * xs];
            l.pad_input(&xf, &mut xp);
            let os = l.out_stride();
            let mut dy = vec![0f32; cout * os];
            for c in 0..cout {
                for r in 0..ho {
                    dy[c * os + r * l.wp..c * os + r * l.wp + wo].copy_from_slice(&gf[(c * ho + r) * wo..(c * ho + r + 1) * wo]);
                }
            }
            portable::weight_grad(&xp, xs, cin, &dy, os, cout, &l.taps, &mut gw_portable);
            for (a, b) in gw32.iter().zip(&gw_portable) {
                assert!((a - b).abs() < 1e-4 * (pos as f32).sqrt(), "case {k} portable: {a} vs {b}");
            }
        }
    }
}
