//! Dense kernels for the batched network passes.
//!
//! Matrices are row-major slices. Each public entry point picks an
//! implementation once per process from the CPU features found at run time,
//! so results are bitwise reproducible on a given machine but may differ in
//! the last bits between machines.

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Isa {
    #[cfg(target_arch = "x86_64")]
    Avx512,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    Baseline,
}

/// `TWOSCALE_OCP_KERNELS=baseline|avx2` caps the kernel set, mainly for
/// testing the fallbacks.
fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        let cap = std::env::var("TWOSCALE_OCP_KERNELS").unwrap_or_default();
        #[cfg(target_arch = "x86_64")]
        {
            if cap != "baseline" && is_x86_feature_detected!("fma") {
                if cap != "avx2" && is_x86_feature_detected!("avx512f") {
                    return Isa::Avx512;
                }
                if is_x86_feature_detected!("avx2") {
                    return Isa::Avx2;
                }
            }
        }
        let _ = cap;
        Isa::Baseline
    })
}

/// Name of the kernel set in use, for reports.
pub fn kernel_name() -> &'static str {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => "avx512",
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => "avx2",
        Isa::Baseline => "baseline",
    }
}

/// Left operand of [`gemm_nn`]: element `(r, k)` is `data[r * rs + k * cs]`.
#[derive(Debug, Clone, Copy)]
pub struct Strided<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Strided<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Strided { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        // view of the transpose of a row-major `rows x cols` matrix
        assert!(data.len() >= rows * cols);
        Strided { data, rows: cols, cols: rows, rs: 1, cs: cols }
    }
}

/// `out = w * a` (or `out += w * a` when `accumulate`), with `a` of shape
/// `w.cols x m` and `out` of shape `w.rows x m`.
pub fn gemm_nn(w: Strided<'_>, a: &[f64], m: usize, out: &mut [f64], accumulate: bool) {
    assert!(a.len() >= w.cols * m && out.len() >= w.rows * m);
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { x86::avx512::gemm_nn(w, a, m, out, accumulate) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::avx2::gemm_nn(w, a, m, out, accumulate) },
        Isa::Baseline => gemm_nn_baseline(w, a, m, out, accumulate),
    }
}

/// `out += g * a^T` with `g` of shape `rows x m`, `a` of shape `cols x m`
/// and `out` of shape `rows x cols`.
pub fn gemm_nt(g: &[f64], rows: usize, a: &[f64], cols: usize, m: usize, out: &mut [f64]) {
    assert!(g.len() >= rows * m && a.len() >= cols * m && out.len() >= rows * cols);
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { x86::avx512::gemm_nt(g, rows, a, cols, m, out) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::avx2::gemm_nt(g, rows, a, cols, m, out) },
        Isa::Baseline => gemm_nt_baseline(g, rows, a, cols, m, out),
    }
}

/// Forward tanh recurrences on one row of pre-activations laid out as
/// `[value | tangent_0 .. tangent_{d-1} | laplacian]` blocks of `n`
/// (only the value block when `full` is false).
pub fn activate_row(z: &[f64], a: &mut [f64], n: usize, d: usize, full: bool) {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { x86::avx512::activate_row(z, a, n, d, full) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::avx2::activate_row(z, a, n, d, full) },
        Isa::Baseline => (0..n).for_each(|i| activate_point(z, a, n, d, full, i)),
    }
}

/// Reverse of [`activate_row`]: turns the adjoint `g` of the activations
/// into the adjoint of the pre-activations, in place. `t` is the value block
/// of the activations.
pub fn activate_row_backward(g: &mut [f64], z: &[f64], t: &[f64], n: usize, d: usize, full: bool) {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { x86::avx512::activate_row_backward(g, z, t, n, d, full) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { x86::avx2::activate_row_backward(g, z, t, n, d, full) },
        Isa::Baseline => (0..n).for_each(|i| activate_backward_point(g, z, t, n, d, full, i)),
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;

    /// Register-tiled GEMM kernels and activation sweeps over the vector
    /// helpers in scope. `$mr x $nv` vectors of accumulators for `gemm_nn`,
    /// `$rb x $cb` for `gemm_nt`.
    macro_rules! simd_kernels {
        ($feat:literal, $mr:expr, $nv:expr, $rb:expr, $cb:expr) => {

            const NR: usize = $nv * L;
            /// Column block kept hot in cache across row tiles.
            const JB: usize = 16 * NR;

            #[target_feature(enable = $feat)]
            pub unsafe fn gemm_nn(w: Strided<'_>, a: &[f64], m: usize, out: &mut [f64], accumulate: bool) {
                let mut k0 = 0;
                while k0 < w.cols.max(1) {
                    let kn = KSEG.min(w.cols - k0);
                    let seg = Strided { data: &w.data[k0 * w.cs..], cols: kn, ..w };
                    let a = &a[k0 * m..];
                    let acc = accumulate || k0 > 0;
                    let mut jb = 0;
                    while jb < m {
                        let je = (jb + JB).min(m);
                        let mut r = 0;
                        while w.rows - r >= $mr {
                            nn_rows::<{ $mr }>(seg, r, a, m, jb, je, out, acc);
                            r += $mr;
                        }
                        while w.rows - r >= 2 {
                            nn_rows::<2>(seg, r, a, m, jb, je, out, acc);
                            r += 2;
                        }
                        if r < w.rows {
                            nn_rows::<1>(seg, r, a, m, jb, je, out, acc);
                        }
                        jb = je;
                    }
                    k0 += KSEG;
                }
            }

            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            unsafe fn nn_rows<const R: usize>(
                w: Strided<'_>,
                r0: usize,
                a: &[f64],
                m: usize,
                jb: usize,
                je: usize,
                out: &mut [f64],
                accumulate: bool,
            ) {
                let inner = w.cols;
                let mut wt = [[0.0; R]; KSEG];
                for (k, slot) in wt.iter_mut().enumerate().take(inner) {
                    for (r, v) in slot.iter_mut().enumerate() {
                        *v = w.data[(r0 + r) * w.rs + k * w.cs];
                    }
                }
                assert!(a.len() >= inner * m && out.len() >= (r0 + R) * m && je <= m);
                let ap = a.as_ptr();
                let op = out.as_mut_ptr();
                let mut j0 = jb;
                while j0 + NR <= je {
                    let mut acc = [[zero(); $nv]; R];
                    for (k, wk) in wt.iter().enumerate().take(inner) {
                        let row = ap.add(k * m + j0);
                        let mut b = [zero(); $nv];
                        for (v, bv) in b.iter_mut().enumerate() {
                            *bv = load(row.add(v * L));
                        }
                        for r in 0..R {
                            let ws = splat(wk[r]);
                            for v in 0..$nv {
                                acc[r][v] = fma(ws, b[v], acc[r][v]);
                            }
                        }
                    }
                    for r in 0..R {
                        let dst = op.add((r0 + r) * m + j0);
                        for v in 0..$nv {
                            let p = dst.add(v * L);
                            let x = if accumulate { add(load(p), acc[r][v]) } else { acc[r][v] };
                            store(p, x);
                        }
                    }
                    j0 += NR;
                }
                for j in j0..je {
                    for r in 0..R {
                        let mut s = 0.0;
                        for (k, wk) in wt.iter().enumerate().take(inner) {
                            s = wk[r].mul_add(a[k * m + j], s);
                        }
                        let o = &mut out[(r0 + r) * m + j];
                        *o = if accumulate { *o + s } else { s };
                    }
                }
            }

            #[target_feature(enable = $feat)]
            pub unsafe fn gemm_nt(g: &[f64], rows: usize, a: &[f64], cols: usize, m: usize, out: &mut [f64]) {
                assert!(g.len() >= rows * m && a.len() >= cols * m);
                // lane-wise partial sums, reduced once at the end
                let mut lanes = vec![zero(); rows * cols];
                let full = m - m % L;
                let mut jb = 0;
                while jb < full {
                    let je = (jb + JB).min(full);
                    let mut r = 0;
                    while rows - r >= $rb {
                        nt_rows::<{ $rb }>(g, r, a, cols, m, jb, je, &mut lanes);
                        r += $rb;
                    }
                    while rows - r >= 2 {
                        nt_rows::<2>(g, r, a, cols, m, jb, je, &mut lanes);
                        r += 2;
                    }
                    if r < rows {
                        nt_rows::<1>(g, r, a, cols, m, jb, je, &mut lanes);
                    }
                    jb = je;
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let mut buf = [0.0; L];
                        store(buf.as_mut_ptr(), lanes[r * cols + c]);
                        let mut s = 0.0;
                        for x in buf {
                            s += x;
                        }
                        for j in full..m {
                            s = g[r * m + j].mul_add(a[c * m + j], s);
                        }
                        out[r * cols + c] += s;
                    }
                }
            }

            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            unsafe fn nt_rows<const RB: usize>(
                g: &[f64],
                r0: usize,
                a: &[f64],
                cols: usize,
                m: usize,
                jb: usize,
                je: usize,
                lanes: &mut [V],
            ) {
                let mut c = 0;
                while cols - c >= $cb {
                    nt_block::<RB, { $cb }>(g, r0, a, c, cols, m, jb, je, lanes);
                    c += $cb;
                }
                while cols - c >= 2 {
                    nt_block::<RB, 2>(g, r0, a, c, cols, m, jb, je, lanes);
                    c += 2;
                }
                if c < cols {
                    nt_block::<RB, 1>(g, r0, a, c, cols, m, jb, je, lanes);
                }
            }

            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            unsafe fn nt_block<const RB: usize, const CB: usize>(
                g: &[f64],
                r0: usize,
                a: &[f64],
                c0: usize,
                cols: usize,
                m: usize,
                jb: usize,
                je: usize,
                lanes: &mut [V],
            ) {
                let gp = g.as_ptr().add(r0 * m);
                let ap = a.as_ptr().add(c0 * m);
                let mut acc = [[zero(); CB]; RB];
                for r in 0..RB {
                    for c in 0..CB {
                        acc[r][c] = lanes[(r0 + r) * cols + c0 + c];
                    }
                }
                let mut j = jb;
                while j < je {
                    let mut gv = [zero(); RB];
                    for (r, x) in gv.iter_mut().enumerate() {
                        *x = load(gp.add(r * m + j));
                    }
                    for c in 0..CB {
                        let av = load(ap.add(c * m + j));
                        for r in 0..RB {
                            acc[r][c] = fma(gv[r], av, acc[r][c]);
                        }
                    }
                    j += L;
                }
                for r in 0..RB {
                    for c in 0..CB {
                        lanes[(r0 + r) * cols + c0 + c] = acc[r][c];
                    }
                }
            }

            #[target_feature(enable = $feat)]
            pub unsafe fn activate_row(z: &[f64], a: &mut [f64], n: usize, d: usize, full: bool) {
                let blocks = if full { 2 + d } else { 1 };
                assert!(z.len() >= blocks * n && a.len() >= blocks * n);
                let zp = z.as_ptr();
                let ap = a.as_mut_ptr();
                let one = splat(1.0);
                let m2 = splat(-2.0);
                let vn = n - n % L;
                let mut i = 0;
                while i < vn {
                    let t = vtanh(load(zp.add(i)));
                    store(ap.add(i), t);
                    if full {
                        let s1 = sub(one, mul(t, t));
                        let s2 = mul(mul(m2, t), s1);
                        let mut lap = mul(s1, load(zp.add((1 + d) * n + i)));
                        for k in 0..d {
                            let v = load(zp.add((1 + k) * n + i));
                            store(ap.add((1 + k) * n + i), mul(s1, v));
                            lap = fma(mul(s2, v), v, lap);
                        }
                        store(ap.add((1 + d) * n + i), lap);
                    }
                    i += L;
                }
                for i in vn..n {
                    activate_point(z, a, n, d, full, i);
                }
            }

            #[target_feature(enable = $feat)]
            pub unsafe fn activate_row_backward(g: &mut [f64], z: &[f64], t: &[f64], n: usize, d: usize, full: bool) {
                let blocks = if full { 2 + d } else { 1 };
                assert!(g.len() >= blocks * n && z.len() >= blocks * n && t.len() >= n);
                let gp = g.as_mut_ptr();
                let zp = z.as_ptr();
                let tp = t.as_ptr();
                let one = splat(1.0);
                let two = splat(2.0);
                let m2 = splat(-2.0);
                let four = splat(4.0);
                let vn = n - n % L;
                let mut i = 0;
                while i < vn {
                    let ti = load(tp.add(i));
                    let s1 = sub(one, mul(ti, ti));
                    if !full {
                        store(gp.add(i), mul(load(gp.add(i)), s1));
                        i += L;
                        continue;
                    }
                    let s2 = mul(mul(m2, ti), s1);
                    let s3 = fma(mul(m2, s1), s1, mul(mul(four, mul(ti, ti)), s1));
                    let gl = load(gp.add((1 + d) * n + i));
                    let zl = load(zp.add((1 + d) * n + i));
                    let mut gv = fma(load(gp.add(i)), s1, mul(mul(gl, s2), zl));
                    let gls2 = mul(mul(two, gl), s2);
                    let gls3 = mul(gl, s3);
                    for k in 0..d {
                        let v = load(zp.add((1 + k) * n + i));
                        let gt = load(gp.add((1 + k) * n + i));
                        gv = fma(mul(gt, s2), v, fma(mul(gls3, v), v, gv));
                        store(gp.add((1 + k) * n + i), fma(gt, s1, mul(gls2, v)));
                    }
                    store(gp.add(i), gv);
                    store(gp.add((1 + d) * n + i), mul(gl, s1));
                    i += L;
                }
                for i in vn..n {
                    activate_backward_point(g, z, t, n, d, full, i);
                }
            }
        };
    }

    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const SHIFT: f64 = 6_755_399_441_055_744.0;

    macro_rules! vector_helpers {
        ($feat:literal, $v:ty, $lanes:expr, $zero:ident, $splat:ident, $load:ident, $store:ident,
         $fma:ident, $add:ident, $sub:ident, $mul:ident, $div:ident) => {
            use std::arch::x86_64::*;

            const L: usize = $lanes;
            type V = $v;

            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn zero() -> V {
                $zero()
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn splat(x: f64) -> V {
                $splat(x)
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn load(p: *const f64) -> V {
                $load(p)
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn store(p: *mut f64, x: V) {
                $store(p, x)
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn fma(a: V, b: V, c: V) -> V {
                $fma(a, b, c)
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn add(a: V, b: V) -> V {
                $add(a, b)
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn sub(a: V, b: V) -> V {
                $sub(a, b)
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn mul(a: V, b: V) -> V {
                $mul(a, b)
            }
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn div(a: V, b: V) -> V {
                $div(a, b)
            }

            /// Vector form of [`tanh_fast`] given `|x|` clamped and the sign bits.
            #[inline]
            #[target_feature(enable = $feat)]
            unsafe fn tanh_parts(ax: V) -> V {
                let y = add(ax, ax);
                let kk = add(mul(y, splat(LOG2E)), splat(SHIFT));
                let k = sub(kk, splat(SHIFT));
                let r = sub(sub(y, mul(k, splat(LN2_HI))), mul(k, splat(LN2_LO)));
                let mut p = splat(EXP_COEFFS[0]);
                for &c in &EXP_COEFFS[1..] {
                    p = add(mul(p, r), splat(c));
                }
                let e = mul(p, pow2(kk));
                let one = splat(1.0);
                div(sub(e, one), add(e, one))
            }
        };
    }

    pub mod avx512 {
        use super::*;
        vector_helpers!(
            "avx512f,avx2,fma", __m512d, 8, _mm512_setzero_pd, _mm512_set1_pd, _mm512_loadu_pd,
            _mm512_storeu_pd, _mm512_fmadd_pd, _mm512_add_pd, _mm512_sub_pd, _mm512_mul_pd,
            _mm512_div_pd
        );

        #[inline]
        #[target_feature(enable = "avx512f,avx2,fma")]
        unsafe fn pow2(kk: V) -> V {
            let bits = _mm512_add_epi64(_mm512_castpd_si512(kk), _mm512_set1_epi64(1023));
            _mm512_castsi512_pd(_mm512_slli_epi64::<52>(bits))
        }

        #[inline]
        #[target_feature(enable = "avx512f,avx2,fma")]
        unsafe fn vtanh(x: V) -> V {
            let ax = _mm512_min_pd(_mm512_abs_pd(x), splat(20.0));
            let sign = _mm512_and_si512(_mm512_castpd_si512(x), _mm512_set1_epi64(i64::MIN));
            let t = tanh_parts(ax);
            _mm512_castsi512_pd(_mm512_or_si512(_mm512_castpd_si512(t), sign))
        }

        simd_kernels!("avx512f,avx2,fma", 8, 2, 6, 4);
    }

    pub mod avx2 {
        use super::*;
        vector_helpers!(
            "avx2,fma", __m256d, 4, _mm256_setzero_pd, _mm256_set1_pd, _mm256_loadu_pd,
            _mm256_storeu_pd, _mm256_fmadd_pd, _mm256_add_pd, _mm256_sub_pd, _mm256_mul_pd,
            _mm256_div_pd
        );

        #[inline]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn pow2(kk: V) -> V {
            let bits = _mm256_add_epi64(_mm256_castpd_si256(kk), _mm256_set1_epi64x(1023));
            _mm256_castsi256_pd(_mm256_slli_epi64::<52>(bits))
        }

        #[inline]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn vtanh(x: V) -> V {
            let mask = splat(-0.0);
            let ax = _mm256_min_pd(_mm256_andnot_pd(mask, x), splat(20.0));
            let t = tanh_parts(ax);
            _mm256_or_pd(t, _mm256_and_pd(x, mask))
        }

        simd_kernels!("avx2,fma", 4, 3, 3, 4);
    }
}


const KSEG: usize = 64;

fn gemm_nn_baseline(w: Strided<'_>, a: &[f64], m: usize, out: &mut [f64], accumulate: bool) {
    for r in 0..w.rows {
        let o = &mut out[r * m..(r + 1) * m];
        if !accumulate {
            o.fill(0.0);
        }
        for k in 0..w.cols {
            let wv = w.data[r * w.rs + k * w.cs];
            for (o, &x) in o.iter_mut().zip(&a[k * m..(k + 1) * m]) {
                *o += wv * x;
            }
        }
    }
}

fn gemm_nt_baseline(g: &[f64], rows: usize, a: &[f64], cols: usize, m: usize, out: &mut [f64]) {
    for r in 0..rows {
        let gr = &g[r * m..(r + 1) * m];
        for c in 0..cols {
            let s: f64 = gr.iter().zip(&a[c * m..(c + 1) * m]).map(|(x, y)| x * y).sum();
            out[r * cols + c] += s;
        }
    }
}

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// Taylor coefficients of `exp` from degree 13 down to 0; the remainder on
/// `|r| <= ln2 / 2` is below `1e-17`.
const EXP_COEFFS: [f64; 14] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// `tanh` built on a polynomial `exp`, with a vector twin in the SIMD
/// kernels. Absolute error is a few ulp of 1.
#[inline]
pub fn tanh_fast(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let y = 2.0 * x.abs().min(20.0);
    let kk = y * std::f64::consts::LOG2_E + SHIFT;
    let k = kk - SHIFT;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let mut p = EXP_COEFFS[0];
    for &c in &EXP_COEFFS[1..] {
        p = p * r + c;
    }
    let e = p * f64::from_bits(kk.to_bits().wrapping_add(1023) << 52);
    ((e - 1.0) / (e + 1.0)).copysign(x)
}

fn activate_point(z: &[f64], a: &mut [f64], n: usize, d: usize, full: bool, i: usize) {
    let t = tanh_fast(z[i]);
    a[i] = t;
    if !full {
        return;
    }
    let s1 = 1.0 - t * t;
    let s2 = -2.0 * t * s1;
    let mut lap = s1 * z[(1 + d) * n + i];
    for k in 0..d {
        let v = z[(1 + k) * n + i];
        a[(1 + k) * n + i] = s1 * v;
        lap += s2 * v * v;
    }
    a[(1 + d) * n + i] = lap;
}

fn activate_backward_point(g: &mut [f64], z: &[f64], t: &[f64], n: usize, d: usize, full: bool, i: usize) {
    let ti = t[i];
    let s1 = 1.0 - ti * ti;
    if !full {
        g[i] *= s1;
        return;
    }
    let s2 = -2.0 * ti * s1;
    let s3 = -2.0 * s1 * s1 + 4.0 * ti * ti * s1;
    let gl = g[(1 + d) * n + i];
    let mut gv = g[i] * s1 + gl * s2 * z[(1 + d) * n + i];
    for k in 0..d {
        let v = z[(1 + k) * n + i];
        let gt = g[(1 + k) * n + i];
        gv += gt * s2 * v + gl * s3 * v * v;
        g[(1 + k) * n + i] = gt * s1 + 2.0 * gl * s2 * v;
    }
    g[i] = gv;
    g[(1 + d) * n + i] = gl * s1;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(w: Strided<'_>, a: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; w.rows * m];
        for r in 0..w.rows {
            for j in 0..m {
                for k in 0..w.cols {
                    out[r * m + j] += w.data[r * w.rs + k * w.cs] * a[k * m + j];
                }
            }
        }
        out
    }

    fn fill(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn gemm_nn_matches_naive_on_ragged_shapes() {
        for &(rows, inner, m) in &[(1, 1, 1), (7, 5, 37), (50, 50, 64), (13, 70, 19), (3, 2, 100)] {
            let wd = fill(rows * inner, 0.37);
            let a = fill(inner * m, 0.11);
            let w = Strided::row_major(&wd, rows, inner);
            let want = naive_nn(w, &a, m);
            let mut out = vec![1.0; rows * m];
            gemm_nn(w, &a, m, &mut out, false);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            gemm_nn(w, &a, m, &mut out, true);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - 2.0 * y).abs() < 1e-12);
            }
            // transposed view
            let wt = Strided::transposed(&wd, rows, inner);
            let a2 = fill(rows * m, 0.23);
            let want = naive_nn(wt, &a2, m);
            let mut out = vec![0.0; inner * m];
            gemm_nn(wt, &a2, m, &mut out, false);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_nt_matches_naive() {
        for &(rows, cols, m) in &[(1, 1, 3), (50, 50, 129), (7, 5, 16), (3, 11, 8)] {
            let g = fill(rows * m, 0.3);
            let a = fill(cols * m, 0.7);
            let mut out = vec![0.5; rows * cols];
            gemm_nt(&g, rows, &a, cols, m, &mut out);
            for r in 0..rows {
                for c in 0..cols {
                    let s: f64 = (0..m).map(|j| g[r * m + j] * a[c * m + j]).sum();
                    assert!((out[r * cols + c] - 0.5 - s).abs() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn fast_tanh_is_accurate() {
        assert_eq!(tanh_fast(0.0), 0.0);
        assert_eq!(tanh_fast(50.0), 1.0);
        assert_eq!(tanh_fast(-50.0), -1.0);
        let mut worst: f64 = 0.0;
        for i in -40000..=40000 {
            let x = i as f64 * 5e-4;
            worst = worst.max((tanh_fast(x) - x.tanh()).abs());
        }
        assert!(worst < 1e-15, "{worst}");
    }
}
