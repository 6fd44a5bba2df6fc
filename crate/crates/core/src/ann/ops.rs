//! Dense layer kernels over row-major batches (one example per row).

use crate::network::Layer;
use crate::topology::LayerKind;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "row length mismatch");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// `c = a * b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index touched by the kernel is bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Columns of the convolution input for one example: `[(c, ky, kx)][(oy, ox)]`.
fn im2col(layer: &Layer, input: &[f64], col: &mut [f64]) {
    let s = &layer.spec;
    let (h, w, k, pad) = (s.input.height, s.input.width, s.kernel, s.pad());
    let plane = h * w;
    for c in 0..s.input.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in 0..h {
                    let dst = &mut col[row + oy * w..row + (oy + 1) * w];
                    match (oy + ky).checked_sub(pad).filter(|&y| y < h) {
                        None => dst.fill(0.0),
                        Some(y) => {
                            let src = &input[c * plane + y * w..c * plane + (y + 1) * w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match (ox + kx).checked_sub(pad).filter(|&x| x < w) {
                                    Some(x) => src[x],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(layer: &Layer, col: &[f64], out: &mut [f64]) {
    let s = &layer.spec;
    let (h, w, k, pad) = (s.input.height, s.input.width, s.kernel, s.pad());
    let plane = h * w;
    for c in 0..s.input.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in 0..h {
                    let Some(y) = (oy + ky).checked_sub(pad).filter(|&y| y < h) else {
                        continue;
                    };
                    for ox in 0..w {
                        if let Some(x) = (ox + kx).checked_sub(pad).filter(|&x| x < w) {
                            out[c * plane + y * w + x] += col[row + oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Weighted input sums plus bias for every output neuron.
pub fn forward(layer: &Layer, input: &Batch) -> Batch {
    let s = &layer.spec;
    let (n_in, n_out) = (s.input.len(), s.output.len());
    assert_eq!(input.cols, n_in);
    let w = &layer.params.weights;
    let mut out = Batch::zeros(input.rows, n_out);
    match s.kind {
        LayerKind::FullyConnected => {
            for r in 0..input.rows {
                out.row_mut(r).copy_from_slice(&layer.params.biases);
            }
            gemm(
                input.rows,
                n_in,
                n_out,
                &input.data,
                (n_in, 1),
                w,
                (1, n_in),
                1.0,
                &mut out.data,
                (n_out, 1),
            );
        }
        LayerKind::Convolution => {
            let plane = s.output.plane();
            let ck = s.input.channels * s.kernel * s.kernel;
            let mut col = vec![0.0; ck * plane];
            for r in 0..input.rows {
                im2col(layer, input.row(r), &mut col);
                let o = out.row_mut(r);
                for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.fill(layer.params.biases[oc]);
                }
                gemm(
                    s.output.channels,
                    ck,
                    plane,
                    w,
                    (ck, 1),
                    &col,
                    (plane, 1),
                    1.0,
                    o,
                    (plane, 1),
                );
            }
        }
        LayerKind::AvgPool => {
            for r in 0..input.rows {
                let src = input.row(r);
                let dst = out.row_mut(r);
                for (i, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    layer.for_each_source(i, |j, wi| acc += w[wi] * src[j]);
                    *d = acc;
                }
            }
        }
    }
    out
}

/// Transposed pass: `W^T * err` for every input neuron.
pub fn backward_input(layer: &Layer, err: &Batch) -> Batch {
    let s = &layer.spec;
    let (n_in, n_out) = (s.input.len(), s.output.len());
    assert_eq!(err.cols, n_out);
    let w = &layer.params.weights;
    let mut out = Batch::zeros(err.rows, n_in);
    match s.kind {
        LayerKind::FullyConnected => gemm(
            err.rows,
            n_out,
            n_in,
            &err.data,
            (n_out, 1),
            w,
            (n_in, 1),
            0.0,
            &mut out.data,
            (n_in, 1),
        ),
        LayerKind::Convolution => {
            let plane = s.output.plane();
            let ck = s.input.channels * s.kernel * s.kernel;
            let mut col = vec![0.0; ck * plane];
            for r in 0..err.rows {
                let e = err.row(r);
                if e.iter().all(|&v| v == 0.0) {
                    continue;
                }
                gemm(
                    ck,
                    s.output.channels,
                    plane,
                    w,
                    (1, ck),
                    e,
                    (plane, 1),
                    0.0,
                    &mut col,
                    (plane, 1),
                );
                col2im(layer, &col, out.row_mut(r));
            }
        }
        LayerKind::AvgPool => {
            for r in 0..err.rows {
                let e = err.row(r);
                let dst = out.row_mut(r);
                for (i, &ev) in e.iter().enumerate() {
                    if ev != 0.0 {
                        layer.for_each_source(i, |j, wi| dst[j] += w[wi] * ev);
                    }
                }
            }
        }
    }
    out
}

/// Adds `scale * sum_rows(err ⊗ input)` to the weight and bias slots.
/// Pooling layers have no trainable parameters and are skipped.
pub fn accumulate_outer(
    layer: &Layer,
    err: &Batch,
    input: &Batch,
    scale: f64,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let s = &layer.spec;
    let (n_in, n_out) = (s.input.len(), s.output.len());
    assert_eq!(err.rows, input.rows);
    match s.kind {
        LayerKind::FullyConnected => {
            let mut tmp = vec![0.0; n_out * n_in];
            gemm(
                n_out,
                err.rows,
                n_in,
                &err.data,
                (1, n_out),
                &input.data,
                (n_in, 1),
                0.0,
                &mut tmp,
                (n_in, 1),
            );
            dw.iter_mut().zip(&tmp).for_each(|(d, t)| *d += scale * t);
            for r in 0..err.rows {
                db.iter_mut().zip(err.row(r)).for_each(|(d, e)| *d += scale * e);
            }
        }
        LayerKind::Convolution => {
            let plane = s.output.plane();
            let ck = s.input.channels * s.kernel * s.kernel;
            let mut col = vec![0.0; ck * plane];
            let mut tmp = vec![0.0; s.output.channels * ck];
            let mut any = false;
            for r in 0..err.rows {
                let e = err.row(r);
                if e.iter().all(|&v| v == 0.0) {
                    continue;
                }
                im2col(layer, input.row(r), &mut col);
                gemm(
                    s.output.channels,
                    plane,
                    ck,
                    e,
                    (plane, 1),
                    &col,
                    (1, plane),
                    if any { 1.0 } else { 0.0 },
                    &mut tmp,
                    (ck, 1),
                );
                any = true;
                for (oc, chunk) in e.chunks(plane).enumerate() {
                    db[oc] += scale * chunk.iter().sum::<f64>();
                }
            }
            if any {
                dw.iter_mut().zip(&tmp).for_each(|(d, t)| *d += scale * t);
            }
        }
        LayerKind::AvgPool => {}
    }
}
