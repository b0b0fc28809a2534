//! Raw loops behind the convolution, pooling and matmul primitives.
//!
//! All reductions accumulate in `f64` and run in a fixed order, so results are
//! bit-reproducible for identical inputs.

/// Input, weight and bias gradients, each present only if requested.
type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

pub(crate) struct Conv1dDims {
    pub batch: usize,
    pub in_ch: usize,
    pub len: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_len: usize,
}

impl Conv1dDims {
    /// The same convolution seen as a 2D one over a width-1 plane.
    fn as_2d(&self) -> Conv2dDims {
        Conv2dDims {
            batch: self.batch,
            in_ch: self.in_ch,
            height: self.len,
            width: 1,
            out_ch: self.out_ch,
            kh: self.kernel,
            kw: 1,
            sh: self.stride,
            sw: 1,
            out_h: self.out_len,
            out_w: 1,
        }
    }
}

pub(crate) fn conv1d_forward(d: &Conv1dDims, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    conv2d_forward(&d.as_2d(), x, w, b)
}

/// Returns (dx, dw, db); each is only computed when requested.
pub(crate) fn conv1d_backward(d: &Conv1dDims, x: &[f32], w: &[f32], gy: &[f32], want: [bool; 3]) -> ConvGrads {
    conv2d_backward(&d.as_2d(), x, w, gy, want)
}

pub(crate) struct Conv2dDims {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `a . b` accumulated in f64 over four fixed lanes.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += *x as f64 * *y as f64;
    }
    s
}

fn axpy(acc: &mut [f64], a: f64, x: &[f32]) {
    for (s, &v) in acc.iter_mut().zip(x) {
        *s += a * v as f64;
    }
}

/// Splits a `[height, width]` plane into contiguous time series, one per
/// (column, residue mod `sh`): element `(h, w)` lands at
/// `rows[w * sh + h % sh][h / sh]`, so every strided window is a slice.
fn phases(plane: &[f32], height: usize, width: usize, sh: usize) -> Vec<Vec<f32>> {
    let mut rows = vec![Vec::with_capacity(height / sh + 1); width * sh];
    for h in 0..height {
        for w in 0..width {
            rows[w * sh + h % sh].push(plane[h * width + w]);
        }
    }
    rows
}

impl Conv2dDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn batch_phases(&self, x: &[f32], bi: usize) -> Vec<Vec<Vec<f32>>> {
        let plane = self.plane();
        (0..self.in_ch)
            .map(|c| {
                let off = (bi * self.in_ch + c) * plane;
                phases(&x[off..off + plane], self.height, self.width, self.sh)
            })
            .collect()
    }

    /// Phase row and offset holding input `(i * sh + p, j * sw + q)` for `i = 0..`.
    fn tap(&self, p: usize, q: usize, j: usize) -> (usize, usize) {
        ((j * self.sw + q) * self.sh + p % self.sh, p / self.sh)
    }
}

pub(crate) fn conv2d_forward(d: &Conv2dDims, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let out_plane = d.out_plane();
    let mut out = vec![0.0f32; d.batch * d.out_ch * out_plane];
    // Accumulator laid out column-major: [out_w][out_h].
    let mut acc = vec![0.0f64; out_plane];
    for bi in 0..d.batch {
        let xp = d.batch_phases(x, bi);
        for o in 0..d.out_ch {
            acc.fill(b[o] as f64);
            for (c, rows) in xp.iter().enumerate() {
                for p in 0..d.kh {
                    for q in 0..d.kw {
                        let wv = w[((o * d.in_ch + c) * d.kh + p) * d.kw + q] as f64;
                        for j in 0..d.out_w {
                            let (row, off) = d.tap(p, q, j);
                            axpy(
                                &mut acc[j * d.out_h..(j + 1) * d.out_h],
                                wv,
                                &rows[row][off..off + d.out_h],
                            );
                        }
                    }
                }
            }
            let dst = &mut out[(bi * d.out_ch + o) * out_plane..(bi * d.out_ch + o + 1) * out_plane];
            for i in 0..d.out_h {
                for j in 0..d.out_w {
                    dst[i * d.out_w + j] = acc[j * d.out_h + i] as f32;
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(d: &Conv2dDims, x: &[f32], w: &[f32], gy: &[f32], want: [bool; 3]) -> ConvGrads {
    let plane = d.plane();
    let out_plane = d.out_plane();
    let mut dx = want[0].then(|| vec![0.0f64; x.len()]);
    let mut dw = want[1].then(|| vec![0.0f64; w.len()]);
    let mut db = want[2].then(|| vec![0.0f64; d.out_ch]);
    let mut gt = vec![0.0f32; out_plane];
    for bi in 0..d.batch {
        let xp = d.batch_phases(x, bi);
        let mut dxp: Option<Vec<Vec<Vec<f64>>>> = dx.as_ref().map(|_| {
            xp.iter()
                .map(|rows| rows.iter().map(|r| vec![0.0f64; r.len()]).collect())
                .collect()
        });
        for o in 0..d.out_ch {
            let g = &gy[(bi * d.out_ch + o) * out_plane..(bi * d.out_ch + o + 1) * out_plane];
            if let Some(db) = db.as_mut() {
                db[o] += g.iter().map(|&v| v as f64).sum::<f64>();
            }
            for i in 0..d.out_h {
                for j in 0..d.out_w {
                    gt[j * d.out_h + i] = g[i * d.out_w + j];
                }
            }
            for (c, rows) in xp.iter().enumerate() {
                for p in 0..d.kh {
                    for q in 0..d.kw {
                        let widx = ((o * d.in_ch + c) * d.kh + p) * d.kw + q;
                        let wv = w[widx] as f64;
                        for j in 0..d.out_w {
                            let (row, off) = d.tap(p, q, j);
                            let gj = &gt[j * d.out_h..(j + 1) * d.out_h];
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] += dot(gj, &rows[row][off..off + d.out_h]);
                            }
                            if let Some(dxp) = dxp.as_mut() {
                                axpy(&mut dxp[c][row][off..off + d.out_h], wv, gj);
                            }
                        }
                    }
                }
            }
        }
        if let (Some(dx), Some(dxp)) = (dx.as_mut(), dxp) {
            for (c, rows) in dxp.iter().enumerate() {
                let base = (bi * d.in_ch + c) * plane;
                for h in 0..d.height {
                    for wc in 0..d.width {
                        dx[base + h * d.width + wc] = rows[wc * d.sh + h % d.sh][h / d.sh];
                    }
                }
            }
        }
    }
    (narrow_all(dx), narrow_all(dw), narrow_all(db))
}

/// Max over windows of the last axis of a `[rows, len]` view. Returns values
/// and the flat argmax of every output (first maximum wins on ties).
pub(crate) fn max_pool_forward(
    x: &[f32],
    rows: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    out_len: usize,
) -> (Vec<f32>, Vec<usize>) {
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        for t in 0..out_len {
            let start = r * len + t * stride;
            let mut best = start;
            for i in start + 1..start + kernel {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// `y[i, c] = b[c] + sum_k w[k, c] * x[i + k - pad, c]` with zero padding.
pub(crate) fn depthwise_rows_forward(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    rows: usize,
    cols: usize,
    kernel: usize,
) -> Vec<f32> {
    let pad = (kernel - 1) / 2;
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for c in 0..cols {
            let mut acc = b[c] as f64;
            for k in 0..kernel {
                let src = i + k;
                if src < pad || src - pad >= rows {
                    continue;
                }
                acc += w[k * cols + c] as f64 * x[(src - pad) * cols + c] as f64;
            }
            out[i * cols + c] = acc as f32;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_rows_backward(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    rows: usize,
    cols: usize,
    kernel: usize,
    want: [bool; 3],
) -> ConvGrads {
    let pad = (kernel - 1) / 2;
    let mut dx = want[0].then(|| vec![0.0f64; x.len()]);
    let mut dw = want[1].then(|| vec![0.0f64; w.len()]);
    let mut db = want[2].then(|| vec![0.0f64; cols]);
    for i in 0..rows {
        for c in 0..cols {
            let g = gy[i * cols + c] as f64;
            if let Some(db) = db.as_mut() {
                db[c] += g;
            }
            for k in 0..kernel {
                let src = i + k;
                if src < pad || src - pad >= rows {
                    continue;
                }
                let xi = (src - pad) * cols + c;
                if let Some(dw) = dw.as_mut() {
                    dw[k * cols + c] += g * x[xi] as f64;
                }
                if let Some(dx) = dx.as_mut() {
                    dx[xi] += g * w[k * cols + c] as f64;
                }
            }
        }
    }
    (narrow_all(dx), narrow_all(dw), narrow_all(db))
}

/// `[m, k] x [k, n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            for (s, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// `[m, n] x [k, n]^T -> [m, k]`.
pub(crate) fn matmul_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(ar, br) as f32;
        }
    }
    out
}

/// `[m, k]^T x [m, n] -> [k, n]`.
pub(crate) fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            for (s, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(br) {
                *s += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn narrow_all(v: Option<Vec<f64>>) -> Option<Vec<f32>> {
    v.map(|v| v.into_iter().map(|x| x as f32).collect())
}
