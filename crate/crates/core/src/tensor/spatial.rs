//! Spatial operators on NCHW feature maps.

use super::gemm::{gemm, MatRef};
use super::tape::{Backward, Grads, Values};
use super::{conv_out_extent, fault, shape_err, Result, Tape, Tensor, Var};

#[derive(Copy, Clone, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dRule {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
}

impl Backward for Conv2dRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let g = &self.geom;
        let (k, p) = (g.k(), g.pixels());
        let x = values.get(self.x).data();
        let w = values.get(self.w).data();
        let in_len = g.cin * g.h * g.w;
        let out_len = g.cout * p;
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };

        if let Some(dw) = grads.slot(self.w) {
            let sign = fault::conv_backward_sign();
            for n in 0..g.n {
                let xn = &x[n * in_len..(n + 1) * in_len];
                let cols_ref: &[f64] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, g, &mut cols);
                    &cols
                };
                let dy = MatRef::row_major(&grad_out[n * out_len..(n + 1) * out_len], g.cout, p);
                let c = MatRef::row_major(cols_ref, k, p).t();
                gemm(sign, dy, c, 1.0, dw, k);
            }
        }
        if let Some(dx) = grads.slot(self.x) {
            let wt = MatRef::row_major(w, g.cout, k).t();
            for n in 0..g.n {
                let dy = MatRef::row_major(&grad_out[n * out_len..(n + 1) * out_len], g.cout, p);
                let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                if g.is_pointwise() {
                    gemm(1.0, wt, dy, 1.0, dxn, p);
                } else {
                    gemm(1.0, wt, dy, 0.0, &mut cols, p);
                    col2im_add(&cols, g, dxn);
                }
            }
        }
        if let Some(b) = self.b {
            if let Some(db) = grads.slot(b) {
                for n in 0..g.n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let start = n * out_len + co * p;
                        *d += grad_out[start..start + p].iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

struct DepthwiseRule {
    x: Var,
    w: Var,
    geom: ConvGeom,
}

fn depthwise_taps(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    // f(input offset within plane, tap index, output offset within plane)
    for oy in 0..g.ho {
        for i in 0..g.kh {
            let iy = (oy * g.stride + i) as isize - g.padding as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            for ox in 0..g.wo {
                for j in 0..g.kw {
                    let ix = (ox * g.stride + j) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    f(iy as usize * g.w + ix as usize, i * g.kw + j, oy * g.wo + ox);
                }
            }
        }
    }
}

impl Backward for DepthwiseRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let g = &self.geom;
        let taps = g.kh * g.kw;
        let (hw, p) = (g.h * g.w, g.pixels());
        if grads.wants(self.w) {
            let x = values.get(self.x).data();
            let dw = grads.slot(self.w).unwrap();
            for n in 0..g.n {
                for c in 0..g.cin {
                    let xp = &x[(n * g.cin + c) * hw..][..hw];
                    let gp = &grad_out[(n * g.cin + c) * p..][..p];
                    let dwc = &mut dw[c * taps..(c + 1) * taps];
                    depthwise_taps(g, |ii, t, oo| dwc[t] += xp[ii] * gp[oo]);
                }
            }
        }
        if grads.wants(self.x) {
            let w = values.get(self.w).data();
            let dx = grads.slot(self.x).unwrap();
            for n in 0..g.n {
                for c in 0..g.cin {
                    let wc = &w[c * taps..(c + 1) * taps];
                    let gp = &grad_out[(n * g.cin + c) * p..][..p];
                    let dxp = &mut dx[(n * g.cin + c) * hw..][..hw];
                    depthwise_taps(g, |ii, t, oo| dxp[ii] += wc[t] * gp[oo]);
                }
            }
        }
    }
}

struct GapRule {
    x: Var,
    hw: usize,
}

impl Backward for GapRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let hw = self.hw;
        if let Some(dx) = grads.slot(self.x) {
            for (nc, g) in grad_out.iter().enumerate() {
                let s = g / hw as f64;
                dx[nc * hw..(nc + 1) * hw].iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

/// Source taps for one output coordinate of a half-pixel-centred ×2 upsample.
#[derive(Copy, Clone)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn upsample_taps(input: usize) -> Vec<Tap> {
    (0..2 * input)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

struct UpsampleRule {
    x: Var,
    planes: usize,
    h: usize,
    w: usize,
}

impl Backward for UpsampleRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let (h, w) = (self.h, self.w);
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        if let Some(dx) = grads.slot(self.x) {
            for pl in 0..self.planes {
                let go = &grad_out[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                let d = &mut dx[pl * h * w..(pl + 1) * h * w];
                for (oy, a) in ty.iter().enumerate() {
                    for (ox, b) in tx.iter().enumerate() {
                        let gv = go[oy * 2 * w + ox];
                        d[a.lo * w + b.lo] += gv * a.w_lo * b.w_lo;
                        d[a.lo * w + b.hi] += gv * a.w_lo * b.w_hi;
                        d[a.hi * w + b.lo] += gv * a.w_hi * b.w_lo;
                        d[a.hi * w + b.hi] += gv * a.w_hi * b.w_hi;
                    }
                }
            }
        }
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(shape_err(op, format!("expected a 4-d tensor, got {shape:?}"))),
    }
}

impl Tape {
    /// Cross-correlation with square stride and symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, width] = dims4(OP, self.shape(x))?;
        let [cout, wcin, kh, kw] = dims4(OP, self.shape(w))?;
        if wcin != cin {
            return Err(shape_err(OP, format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(OP, format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, stride, padding),
            conv_out_extent(width, kw, stride, padding),
        ) else {
            return Err(shape_err(
                OP,
                format!("kernel {kh}x{kw} stride {stride} padding {padding} does not fit {h}x{width}"),
            ));
        };
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: width,
            cout,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let (k, p) = (geom.k(), geom.pixels());
        let mut out = vec![0.0; n * cout * p];
        {
            let xd = self.value(x).data();
            let wd = MatRef::row_major(self.value(w).data(), cout, k);
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
            let in_len = cin * h * width;
            for i in 0..n {
                let xn = &xd[i * in_len..(i + 1) * in_len];
                let cols_ref: &[f64] = if geom.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &geom, &mut cols);
                    &cols
                };
                let on = &mut out[i * cout * p..(i + 1) * cout * p];
                gemm(1.0, wd, MatRef::row_major(cols_ref, k, p), 0.0, on, p);
                if let Some(b) = b {
                    for (co, bv) in self.value(b).data().iter().enumerate() {
                        on[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::new([n, cout, ho, wo], out)?;
        self.record(OP, value, &inputs, Conv2dRule { x, w, b, geom })
    }

    /// Per-channel convolution with kernel shape `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "depthwise_conv2d";
        let [n, c, h, width] = dims4(OP, self.shape(x))?;
        let [wc, one, kh, kw] = dims4(OP, self.shape(w))?;
        if wc != c || one != 1 {
            return Err(shape_err(OP, format!("kernel {:?} incompatible with {c} channels", self.shape(w))));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, stride, padding),
            conv_out_extent(width, kw, stride, padding),
        ) else {
            return Err(shape_err(OP, "kernel does not fit input"));
        };
        let geom = ConvGeom {
            n,
            cin: c,
            h,
            w: width,
            cout: c,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let taps = kh * kw;
        let (hw, p) = (h * width, ho * wo);
        let mut out = vec![0.0; n * c * p];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for i in 0..n {
                for ch in 0..c {
                    let xp = &xd[(i * c + ch) * hw..][..hw];
                    let wch = &wd[ch * taps..(ch + 1) * taps];
                    let op = &mut out[(i * c + ch) * p..][..p];
                    depthwise_taps(&geom, |ii, t, oo| op[oo] += wch[t] * xp[ii]);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.record(OP, value, &[x, w], DepthwiseRule { x, w, geom })
    }

    /// Mean over H and W: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new([n, c], out)?;
        self.record("global_avg_pool", value, &[x], GapRule { x, hw })
    }

    /// Bilinear ×2 upsampling with half-pixel centres and edge clamping.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("upsample_bilinear2x", self.shape(x))?;
        if h == 0 || w == 0 {
            return Err(shape_err("upsample_bilinear2x", "empty spatial extent"));
        }
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let planes = n * c;
        let mut out = vec![0.0; planes * 4 * h * w];
        {
            let xd = self.value(x).data();
            for pl in 0..planes {
                let src = &xd[pl * h * w..(pl + 1) * h * w];
                let dst = &mut out[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                for (oy, a) in ty.iter().enumerate() {
                    for (ox, b) in tx.iter().enumerate() {
                        dst[oy * 2 * w + ox] = a.w_lo * (b.w_lo * src[a.lo * w + b.lo] + b.w_hi * src[a.lo * w + b.hi])
                            + a.w_hi * (b.w_lo * src[a.hi * w + b.lo] + b.w_hi * src[a.hi * w + b.hi]);
                    }
                }
            }
        }
        let value = Tensor::new([n, c, 2 * h, 2 * w], out)?;
        self.record("upsample_bilinear2x", value, &[x], UpsampleRule { x, planes, h, w })
    }
}
