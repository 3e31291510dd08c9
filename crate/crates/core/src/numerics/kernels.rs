//! Raw slice kernels behind the tape operations.
//!
//! All products accumulate over the shared dimension in increasing index
//! order, so results are bit-identical to a textbook triple loop.

use super::Scalar;

const ROW_BLOCK: usize = 4;
const COL_BLOCK: usize = 512;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + ROW_BLOCK <= m {
            let (c0, rest) = c[i * n..(i + ROW_BLOCK) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (
                &mut c0[j0..j1],
                &mut c1[j0..j1],
                &mut c2[j0..j1],
                &mut c3[j0..j1],
            );
            for p in 0..k {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for (j, &bv) in brow.iter().enumerate() {
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += ROW_BLOCK;
        }
        for i in i..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Returns `a[m×k] · b[k×n]`.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a, b, &mut c);
    c
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Stride, zero padding and channel grouping of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Shapes of one convolution call, resolved once.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    fn cg(&self) -> usize {
        self.c / self.geom.groups
    }

    fn og(&self) -> usize {
        self.o / self.geom.groups
    }

    fn patch(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `input[cg×h×w]` into `cols[(cg·kh·kw)×(ho·wo)]`.
fn im2col<T: Scalar>(d: &ConvDims, input: &[T], cols: &mut [T]) {
    let (kh, kw, ho, wo) = (d.kh, d.kw, d.ho, d.wo);
    let s = d.geom.stride as isize;
    let pad = d.geom.padding as isize;
    let positions = d.positions();
    for ch in 0..d.cg() {
        let plane = &input[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let y = oy as isize * s + ki as isize - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if y < 0 || y >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * d.w..(y as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let x = ox as isize * s + kj as isize - pad;
                        *v = if x < 0 || x >= d.w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `input` additively.
fn col2im_acc<T: Scalar>(d: &ConvDims, cols: &[T], input: &mut [T]) {
    let (kh, kw, ho, wo) = (d.kh, d.kw, d.ho, d.wo);
    let s = d.geom.stride as isize;
    let pad = d.geom.padding as isize;
    let positions = d.positions();
    for ch in 0..d.cg() {
        let plane = &mut input[ch * d.h * d.w..(ch + 1) * d.h * d.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let y = oy as isize * s + ki as isize - pad;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * d.w..(y as usize + 1) * d.w];
                    for ox in 0..wo {
                        let x = ox as isize * s + kj as isize - pad;
                        if x >= 0 && x < d.w as isize {
                            dst[x as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(d: &ConvDims, input: &[T], weight: &[T]) -> Vec<T> {
    let (cg, og, patch, positions) = (d.cg(), d.og(), d.patch(), d.positions());
    let mut out = vec![T::zero(); d.n * d.o * positions];
    let pointwise = d.geom.is_pointwise(d.kh, d.kw);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); patch * positions]
    };
    for b in 0..d.n {
        for g in 0..d.geom.groups {
            let in_off = (b * d.c + g * cg) * d.h * d.w;
            let x = &input[in_off..in_off + cg * d.h * d.w];
            let wg = &weight[g * og * patch..(g + 1) * og * patch];
            let out_off = (b * d.o + g * og) * positions;
            let y = &mut out[out_off..out_off + og * positions];
            if pointwise {
                gemm_acc(og, patch, positions, wg, x, y);
            } else {
                im2col(d, x, &mut cols);
                gemm_acc(og, patch, positions, wg, &cols, y);
            }
        }
    }
    out
}

/// Returns (d_input, d_weight), each only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    d: &ConvDims,
    input: &[T],
    weight: &[T],
    d_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cg, og, patch, positions) = (d.cg(), d.og(), d.patch(), d.positions());
    let pointwise = d.geom.is_pointwise(d.kh, d.kw);
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); patch * positions];
    // Transposed weights per group, reused across the batch.
    let w_t: Vec<Vec<T>> = if want_input {
        (0..d.geom.groups)
            .map(|g| transpose(og, patch, &weight[g * og * patch..(g + 1) * og * patch]))
            .collect()
    } else {
        Vec::new()
    };
    for b in 0..d.n {
        for g in 0..d.geom.groups {
            let in_off = (b * d.c + g * cg) * d.h * d.w;
            let out_off = (b * d.o + g * og) * positions;
            let dy = &d_out[out_off..out_off + og * positions];
            if let Some(dw) = d_weight.as_mut() {
                let x = &input[in_off..in_off + cg * d.h * d.w];
                let cols_t = if pointwise {
                    transpose(patch, positions, x)
                } else {
                    im2col(d, x, &mut cols);
                    transpose(patch, positions, &cols)
                };
                gemm_acc(
                    og,
                    positions,
                    patch,
                    dy,
                    &cols_t,
                    &mut dw[g * og * patch..(g + 1) * og * patch],
                );
            }
            if let Some(dx) = d_input.as_mut() {
                let dx = &mut dx[in_off..in_off + cg * d.h * d.w];
                if pointwise {
                    gemm_acc(patch, og, positions, &w_t[g], dy, dx);
                } else {
                    cols.fill(T::zero());
                    gemm_acc(patch, og, positions, &w_t[g], dy, &mut cols);
                    col2im_acc(d, &cols, dx);
                }
            }
        }
    }
    (d_input, d_weight)
}
